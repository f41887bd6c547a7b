//! Hosts resumable stage-machine tasks and implements `hop` and `publish`.
//!
//! A task runs its stages in order. After a stage body returns, the runtime
//! acts on its [`Directive`]:
//!
//! * `Publish(Ckpt)` uploads a checkpoint image and manifest, notifies the
//!   scheduler and keeps running locally.
//! * `Publish(Finished)` uploads the products and notifies the scheduler.
//! * `Hop(dest)` uploads a checkpoint, asks `dest` to resume it and stops
//!   locally once `dest` has validated the image.
//!
//! Checkpoints always describe the task as it stands after the stage that
//! requested them, so a resumed task continues with the next stage.
//!
//! Store and scheduler calls are retried per [`RetryPolicy`] before an error
//! surfaces. A [`Halted`] emit stops everything immediately; it is how an
//! in-process test kills a node at an exact point.

mod machine;

use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

pub use machine::{AppRegistry, Directive, PublishStatus, Stage, StageCtx, StageError, StageMachine, StepFn};

use crate::cmi::{decode_cmi, encode_cmi, CmiError, RestartManifest};
use crate::events::{Emitter, Event, EventKind, Halted};
use crate::layout;
use crate::registry::{JobRecord, JobStatus};
use crate::state::{TaskState, Value};
use crate::store::{BlobKey, BlobStore, StoreError};

/// State variable holding the products a finished publish uploads: a map
/// from product name to bytes.
pub const PRODUCTS_VAR: &str = "products";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeDescriptor {
    pub node_id: String,
    pub host: String,
    pub port: u16,
}

impl NodeDescriptor {
    pub fn new(node_id: impl Into<String>, host: impl Into<String>, port: u16) -> Self {
        Self {
            node_id: node_id.into(),
            host: host.into(),
            port,
        }
    }

    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    /// Builds a descriptor from `host:port`.
    pub fn from_addr(node_id: &str, addr: &str) -> Option<Self> {
        let (host, port) = addr.rsplit_once(':')?;
        Some(Self::new(node_id, host, port.parse().ok()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopRequest {
    pub job_id: String,
    pub manifest_key: BlobKey,
    pub source_node: String,
}

/// Failure talking to a remote service.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    /// No answer; the request may or may not have been applied.
    #[error("unreachable: {0}")]
    Unreachable(String),
    /// The service answered with an error.
    #[error("{kind}: {message}")]
    Rejected { kind: String, message: String },
}

impl LinkError {
    pub fn rejected(kind: impl Into<String>, message: impl Into<String>) -> Self {
        LinkError::Rejected {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &str {
        match self {
            LinkError::Unreachable(_) => "Unreachable",
            LinkError::Rejected { kind, .. } => kind,
        }
    }
}

/// The scheduler services a task needs.
pub trait SchedulerLink: Send + Sync {
    fn publish_job(&self, job_id: &str, status: &str, keys: &[BlobKey], sequence: u64) -> Result<(), LinkError>;
    fn get_job(&self, job_id: &str) -> Result<JobRecord, LinkError>;
    fn lookup_node(&self, node_id: &str) -> Result<Option<NodeDescriptor>, LinkError>;
}

/// Delivers a hop handoff to another node's agent. Returns once the
/// destination has validated the checkpoint and accepted the task.
pub trait PeerLink: Send + Sync {
    fn request_hop(&self, dest: &NodeDescriptor, req: &HopRequest) -> Result<(), LinkError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(retries: u32) -> Self {
        Self {
            retries,
            base: Duration::ZERO,
        }
    }

    /// Runs `op`, retrying failures `retryable` accepts with exponential
    /// backoff. The closure receives the attempt number, starting at 0.
    pub fn run<T, E>(&self, mut op: impl FnMut(u32) -> Result<T, E>, retryable: impl Fn(&E) -> bool) -> Result<T, E> {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Err(e) if attempt < self.retries && retryable(&e) => {
                    let delay = self.base.saturating_mul(1 << attempt);
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// What a node offers to the tasks it runs.
#[derive(Clone)]
pub struct NodeEnv {
    pub node: NodeDescriptor,
    pub store: Arc<dyn BlobStore>,
    pub scheduler: Arc<dyn SchedulerLink>,
    pub peers: Arc<dyn PeerLink>,
    pub apps: Arc<AppRegistry>,
    pub events: Emitter,
    pub retry: RetryPolicy,
}

impl fmt::Debug for NodeEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeEnv")
            .field("node", &self.node)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl NodeEnv {
    pub fn node_id(&self) -> &str {
        &self.node.node_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("stage {stage} failed: {cause}")]
    StageFailure { stage: u32, cause: String },
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("node {0} unreachable")]
    NodeUnreachable(String),
    #[error("hop refused by {dest}: {kind}: {message}")]
    HopRejected { dest: String, kind: String, message: String },
    #[error("scheduler unreachable: {0}")]
    SchedulerUnreachable(String),
    #[error("scheduler refused: {kind}: {message}")]
    SchedulerRejected { kind: String, message: String },
    #[error("invalid publish status {0:?}")]
    InvalidStatus(String),
    #[error("no products to publish")]
    MissingProduct,
    #[error("job {0} has no checkpoint")]
    NoCheckpoint(String),
    #[error("job {0} is already finished")]
    AlreadyFinished(String),
    #[error("checkpoint refused: {0}")]
    DigestMismatch(String),
    #[error("unknown application {0:?}")]
    UnknownApp(String),
    #[error("manifest and checkpoint disagree: {0}")]
    ManifestMismatch(String),
    #[error("stage {stage} out of range for {stages} stages")]
    InvalidStage { stage: u32, stages: usize },
    #[error("bad task state: {0}")]
    BadState(String),
}

impl RuntimeError {
    /// Error kind as reported over the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            RuntimeError::StageFailure { .. } => "StageFailure",
            RuntimeError::StoreUnavailable(_) => "StoreUnavailable",
            RuntimeError::NodeUnreachable(_) => "NodeUnreachable",
            RuntimeError::HopRejected { .. } => "HopRejected",
            RuntimeError::SchedulerUnreachable(_) => "SchedulerUnreachable",
            RuntimeError::SchedulerRejected { .. } => "SchedulerRejected",
            RuntimeError::InvalidStatus(_) => "InvalidStatus",
            RuntimeError::MissingProduct => "MissingProduct",
            RuntimeError::NoCheckpoint(_) => "NoCheckpoint",
            RuntimeError::AlreadyFinished(_) => "InvalidTransition",
            RuntimeError::DigestMismatch(_) => "DigestMismatch",
            RuntimeError::UnknownApp(_) => "UnknownApp",
            RuntimeError::ManifestMismatch(_) => "ManifestMismatch",
            RuntimeError::InvalidStage { .. } => "InvalidStage",
            RuntimeError::BadState(_) => "BadState",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskOutcome {
    Completed(TaskState),
    /// The task now runs on `dest`.
    Migrated { dest: String },
    /// The task stopped; `state` is the last in-memory state when one exists.
    Failed { error: RuntimeError, state: Option<Box<TaskState>> },
    /// The node was stopped at an instrumentation point.
    Halted,
}

impl TaskOutcome {
    fn failed(error: RuntimeError, state: Option<&TaskState>) -> Self {
        TaskOutcome::Failed {
            error,
            state: state.map(|s| Box::new(s.clone())),
        }
    }
}

/// Internal control flow: either a real error or a halt.
#[derive(Debug)]
enum Flow {
    Halt,
    Err(RuntimeError),
}

impl From<Halted> for Flow {
    fn from(_: Halted) -> Self {
        Flow::Halt
    }
}

impl From<RuntimeError> for Flow {
    fn from(e: RuntimeError) -> Self {
        Flow::Err(e)
    }
}

fn store_flow(e: StoreError) -> Flow {
    match e {
        StoreError::Interrupted => Flow::Halt,
        other => Flow::Err(RuntimeError::StoreUnavailable(other.to_string())),
    }
}

fn retry_store<T>(env: &NodeEnv, op: impl FnMut(u32) -> Result<T, StoreError>) -> Result<T, Flow> {
    env.retry
        .run(op, |e| matches!(e, StoreError::Unavailable(_)))
        .map_err(store_flow)
}

fn scheduler_error(e: LinkError) -> RuntimeError {
    match e {
        LinkError::Unreachable(m) => RuntimeError::SchedulerUnreachable(m),
        LinkError::Rejected { kind, message } => RuntimeError::SchedulerRejected { kind, message },
    }
}

fn scheduler_call<T>(env: &NodeEnv, mut op: impl FnMut(&dyn SchedulerLink) -> Result<T, LinkError>) -> Result<T, RuntimeError> {
    env.retry
        .run(|_| op(env.scheduler.as_ref()), |e| matches!(e, LinkError::Unreachable(_)))
        .map_err(scheduler_error)
}

fn emit(env: &NodeEnv, ev: Event) -> Result<(), Flow> {
    env.events.emit(ev).map_err(Flow::from)
}

/// Runs `machine` from `state.next_stage` until it completes, migrates or fails.
pub fn run_task(machine: &StageMachine, mut state: TaskState, env: &NodeEnv) -> TaskOutcome {
    let stages = machine.len();
    if state.next_stage as usize > stages {
        return TaskOutcome::failed(
            RuntimeError::InvalidStage {
                stage: state.next_stage,
                stages,
            },
            Some(&state),
        );
    }
    let mut finished_published = false;
    let result = (|| -> Result<Option<String>, Flow> {
        while (state.next_stage as usize) < stages {
            let idx = state.next_stage;
            let stage = &machine.stages[idx as usize];
            emit(env, Event::new(EventKind::StageStart, state.job_id.clone()).stage(idx).detail(&stage.label))?;
            let directive = {
                let mut ctx = StageCtx {
                    state: &mut state,
                    store: env.store.as_ref(),
                    node_id: env.node_id(),
                    stage: idx,
                    emitter: &env.events,
                };
                match (stage.step)(&mut ctx) {
                    Ok(d) => d,
                    Err(StageError::Halted(_)) => return Err(Flow::Halt),
                    Err(StageError::Failed(cause)) => {
                        return Err(Flow::Err(RuntimeError::StageFailure { stage: idx, cause }));
                    }
                }
            };
            emit(env, Event::new(EventKind::StageEnd, state.job_id.clone()).stage(idx))?;
            state.next_stage = idx + 1;
            match directive {
                Directive::Continue => {}
                Directive::Publish(PublishStatus::Ckpt) => publish_ckpt(&mut state, env)?,
                Directive::Publish(PublishStatus::Finished) => {
                    publish_finished(&state, env)?;
                    finished_published = true;
                }
                Directive::Hop(dest) => {
                    if hop_inner(&mut state, &dest, env)? {
                        return Ok(Some(dest));
                    }
                }
            }
        }
        if machine.auto_finish && !finished_published {
            publish_finished(&state, env)?;
        }
        Ok(None)
    })();
    match result {
        Ok(Some(dest)) => TaskOutcome::Migrated { dest },
        Ok(None) => match env.events.emit(Event::new(EventKind::TaskCompleted, state.job_id.clone())) {
            Ok(()) => TaskOutcome::Completed(state),
            Err(Halted) => TaskOutcome::Halted,
        },
        Err(Flow::Halt) => TaskOutcome::Halted,
        Err(Flow::Err(error)) => {
            let ev = Event::new(EventKind::TaskFailed, state.job_id.clone()).detail(error.to_string());
            if env.events.emit(ev).is_err() {
                return TaskOutcome::Halted;
            }
            TaskOutcome::failed(error, Some(&state))
        }
    }
}

/// Writes the image then the manifest for `captured`, then drops superseded
/// images. Returns the manifest key.
fn write_checkpoint(captured: &TaskState, env: &NodeEnv) -> Result<BlobKey, Flow> {
    let job = captured.job_id.as_str();
    let seq = captured.ckpt_sequence;
    let stage = captured.next_stage;
    let key_err = |e: StoreError| Flow::Err(RuntimeError::StoreUnavailable(e.to_string()));
    let cmi_key = layout::cmi_key(job, seq).map_err(key_err)?;
    let manifest_key = layout::manifest_key(job).map_err(key_err)?;

    let image = encode_cmi(job, seq, stage, &captured.to_bytes());
    retry_store(env, |_| env.store.put_atomic(&cmi_key, &image))?;
    emit(
        env,
        Event::new(EventKind::CmiWritten, job)
            .stage(stage)
            .sequence(seq)
            .bytes(image.len() as u64),
    )?;

    let manifest = RestartManifest {
        job_id: job.to_string(),
        cmi_blob_key: cmi_key.to_string(),
        app_name: captured.app_name.clone(),
        stage,
        sequence: seq,
    };
    retry_store(env, |_| env.store.put_atomic(&manifest_key, &manifest.encode()))?;
    emit(env, Event::new(EventKind::ManifestPromoted, job).stage(stage).sequence(seq))?;

    // only the image the manifest references is kept
    if let Ok(metas) = env.store.list(&layout::job_namespace(job)) {
        for meta in metas {
            if layout::cmi_sequence(meta.key.name()).is_some_and(|s| s != seq) {
                let _ = env.store.delete(&meta.key);
            }
        }
    }
    Ok(manifest_key)
}

fn publish_ckpt(state: &mut TaskState, env: &NodeEnv) -> Result<(), Flow> {
    let seq = state.ckpt_sequence + 1;
    let mut captured = state.clone();
    captured.ckpt_sequence = seq;
    let manifest_key = write_checkpoint(&captured, env)?;
    state.ckpt_sequence = seq;
    notify_ckpt(&state.job_id, &manifest_key, seq, env)?;
    Ok(())
}

/// Reports a promoted checkpoint to the scheduler. A stale-sequence answer to
/// a retried request means an earlier attempt already landed.
fn notify_ckpt(job: &str, manifest_key: &BlobKey, seq: u64, env: &NodeEnv) -> Result<(), Flow> {
    let keys = [manifest_key.clone()];
    let outcome = env.retry.run(
        |attempt| match env.scheduler.publish_job(job, "ckpt", &keys, seq) {
            Err(LinkError::Rejected { kind, .. }) if kind == "StaleSequence" && attempt > 0 => Ok(()),
            other => other,
        },
        |e| matches!(e, LinkError::Unreachable(_)),
    );
    outcome.map_err(scheduler_error)?;
    emit(env, Event::new(EventKind::Published, job).sequence(seq).detail("ckpt"))
}

fn products(state: &TaskState) -> Result<Vec<(String, Vec<u8>)>, RuntimeError> {
    let map = state
        .get(PRODUCTS_VAR)
        .and_then(Value::as_map)
        .ok_or(RuntimeError::MissingProduct)?;
    let out: Vec<_> = map
        .iter()
        .filter_map(|(name, v)| v.as_bytes().map(|b| (name.clone(), b.to_vec())))
        .collect();
    if out.is_empty() || out.len() != map.len() {
        return Err(RuntimeError::MissingProduct);
    }
    Ok(out)
}

fn publish_finished(state: &TaskState, env: &NodeEnv) -> Result<(), Flow> {
    let job = state.job_id.as_str();
    let mut keys = Vec::new();
    for (name, bytes) in products(state)? {
        let key = layout::product_key(job, &name).map_err(|e| Flow::Err(RuntimeError::StoreUnavailable(e.to_string())))?;
        retry_store(env, |_| env.store.put_atomic(&key, &bytes))?;
        keys.push(key);
    }
    let outcome = env.retry.run(
        |attempt| match env.scheduler.publish_job(job, "finished", &keys, state.ckpt_sequence) {
            Err(LinkError::Rejected { kind, .. }) if kind == "InvalidTransition" && attempt > 0 => Ok(()),
            other => other,
        },
        |e| matches!(e, LinkError::Unreachable(_)),
    );
    outcome.map_err(scheduler_error)?;
    emit(env, Event::new(EventKind::Published, job).sequence(state.ckpt_sequence).detail("finished"))
}

/// Publishes at a stage boundary outside the stage loop.
///
/// `"ckpt"` checkpoints and keeps the task going (the caller continues with
/// `state`); `"finished"` uploads `vars["products"]`. Anything else is
/// refused before any side effect.
pub fn publish(state: &mut TaskState, status: &str, env: &NodeEnv) -> Result<(), RuntimeError> {
    let status = PublishStatus::parse(status).ok_or_else(|| RuntimeError::InvalidStatus(status.to_string()))?;
    let flow = match status {
        PublishStatus::Ckpt => publish_ckpt(state, env),
        PublishStatus::Finished => products(state)
            .map_err(Flow::Err)
            .and_then(|_| publish_finished(state, env)),
    };
    match flow {
        Ok(()) => Ok(()),
        Err(Flow::Err(e)) => Err(e),
        Err(Flow::Halt) => Err(RuntimeError::StoreUnavailable("halted".into())),
    }
}

fn resolve(dest: &str, env: &NodeEnv) -> Result<NodeDescriptor, RuntimeError> {
    if dest == env.node_id() {
        return Ok(env.node.clone());
    }
    match scheduler_call(env, |s| s.lookup_node(dest)) {
        Ok(Some(d)) => Ok(d),
        Ok(None) => Err(RuntimeError::NodeUnreachable(dest.to_string())),
        Err(RuntimeError::SchedulerUnreachable(_)) => Err(RuntimeError::NodeUnreachable(dest.to_string())),
        Err(e) => Err(e),
    }
}

/// A destination is this node if it names it or, through an alias, reaches
/// the same listening address. Port 0 means the node has no address.
fn is_local(target: &NodeDescriptor, env: &NodeEnv) -> bool {
    target.node_id == env.node_id() || (env.node.port != 0 && target.addr() == env.node.addr())
}

/// Returns false, without checkpointing, when `dest` is this node.
fn hop_inner(state: &mut TaskState, dest: &str, env: &NodeEnv) -> Result<bool, Flow> {
    let target = resolve(dest, env)?;
    if is_local(&target, env) {
        return Ok(false);
    }
    let seq = state.ckpt_sequence + 1;
    let mut captured = state.clone();
    captured.ckpt_sequence = seq;
    let manifest_key = write_checkpoint(&captured, env)?;
    state.ckpt_sequence = seq;

    let job = state.job_id.clone();
    emit(env, Event::new(EventKind::HopRequested, job.clone()).sequence(seq).detail(dest))?;
    let req = HopRequest {
        job_id: job.clone(),
        manifest_key,
        source_node: env.node_id().to_string(),
    };
    let sent = env
        .retry
        .run(|_| env.peers.request_hop(&target, &req), |e| matches!(e, LinkError::Unreachable(_)));
    match sent {
        Ok(()) => {
            emit(env, Event::new(EventKind::HopAcked, job).sequence(seq).detail(dest))?;
            Ok(true)
        }
        Err(e) => {
            emit(env, Event::new(EventKind::HopRejected, job).sequence(seq).detail(format!("{dest}: {e}")))?;
            Err(Flow::Err(match e {
                LinkError::Unreachable(_) => RuntimeError::NodeUnreachable(dest.to_string()),
                LinkError::Rejected { kind, message } => RuntimeError::HopRejected {
                    dest: dest.to_string(),
                    kind,
                    message,
                },
            }))
        }
    }
}

/// Migrates a task that sits at a stage boundary to `dest`. Returns true if
/// it left; the caller must then not execute any further stage of this task.
/// A hop to this node is a no-op that returns false.
pub fn hop(state: &mut TaskState, dest: &str, env: &NodeEnv) -> Result<bool, RuntimeError> {
    match hop_inner(state, dest, env) {
        Ok(moved) => Ok(moved),
        Err(Flow::Err(e)) => Err(e),
        Err(Flow::Halt) => Err(RuntimeError::StoreUnavailable("halted".into())),
    }
}

/// A checkpoint loaded and cross-checked against its manifest.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub machine: Arc<StageMachine>,
    pub state: TaskState,
    pub manifest: RestartManifest,
}

/// Reads the manifest at `manifest_key` and the image it references, and
/// verifies digest, manifest/image agreement, application and stage range.
pub fn load_checkpoint(job_id: &str, manifest_key: &BlobKey, env: &NodeEnv) -> Result<LoadedCheckpoint, RuntimeError> {
    let store_err = |e: StoreError| match e {
        StoreError::NotFound(_) => RuntimeError::NoCheckpoint(job_id.to_string()),
        other => RuntimeError::StoreUnavailable(other.to_string()),
    };
    let raw = env
        .retry
        .run(|_| env.store.get(manifest_key), |e| matches!(e, StoreError::Unavailable(_)))
        .map_err(store_err)?;
    let manifest = RestartManifest::decode(&raw).map_err(|e| RuntimeError::ManifestMismatch(e.to_string()))?;
    if manifest.job_id != job_id {
        return Err(RuntimeError::ManifestMismatch(format!(
            "manifest is for job {:?}",
            manifest.job_id
        )));
    }
    let machine = env
        .apps
        .get(&manifest.app_name)
        .ok_or_else(|| RuntimeError::UnknownApp(manifest.app_name.clone()))?;
    let cmi_key = BlobKey::parse(&manifest.cmi_blob_key)
        .map_err(|_| RuntimeError::ManifestMismatch(format!("bad image key {:?}", manifest.cmi_blob_key)))?;
    let blob = env
        .retry
        .run(|_| env.store.get(&cmi_key), |e| matches!(e, StoreError::Unavailable(_)))
        .map_err(store_err)?;
    let image = decode_cmi(&blob).map_err(|e| {
        let _ = env.events.emit(
            Event::new(EventKind::DigestRejected, job_id)
                .sequence(manifest.sequence)
                .detail(e.to_string()),
        );
        match e {
            CmiError::DigestMismatch | CmiError::BadMagic | CmiError::Malformed(_) | CmiError::VersionUnsupported(_) => {
                RuntimeError::DigestMismatch(format!("{cmi_key}: {e}"))
            }
        }
    })?;
    manifest
        .check_against(&image)
        .map_err(|e| RuntimeError::ManifestMismatch(e.to_string()))?;
    if image.stage as usize > machine.len() {
        return Err(RuntimeError::InvalidStage {
            stage: image.stage,
            stages: machine.len(),
        });
    }
    let state = TaskState::from_bytes(&image.payload).map_err(|e| RuntimeError::BadState(e.to_string()))?;
    if state.job_id != job_id
        || state.app_name != manifest.app_name
        || state.next_stage != image.stage
        || state.ckpt_sequence != image.sequence
    {
        return Err(RuntimeError::ManifestMismatch(
            "task state header disagrees with image".into(),
        ));
    }
    Ok(LoadedCheckpoint {
        machine,
        state,
        manifest,
    })
}

/// Continues a validated checkpoint on this node.
pub fn resume(loaded: LoadedCheckpoint, env: &NodeEnv) -> TaskOutcome {
    resume_known(loaded, None, env)
}

/// Resumes, first telling the scheduler about the checkpoint when it only
/// knows sequence `known` or older.
fn resume_known(loaded: LoadedCheckpoint, known: Option<u64>, env: &NodeEnv) -> TaskOutcome {
    let ev = Event::new(EventKind::Resumed, loaded.state.job_id.clone())
        .stage(loaded.state.next_stage)
        .sequence(loaded.state.ckpt_sequence);
    if env.events.emit(ev).is_err() {
        return TaskOutcome::Halted;
    }
    if let Some(known) = known {
        if let Err(flow) = catch_up(&loaded, known, env) {
            return outcome_of(flow);
        }
    }
    run_task(&loaded.machine, loaded.state, env)
}

/// Brings the scheduler up to date with a checkpoint it has not heard of.
fn catch_up(loaded: &LoadedCheckpoint, known_sequence: u64, env: &NodeEnv) -> Result<(), Flow> {
    if loaded.manifest.sequence <= known_sequence {
        return Ok(());
    }
    let key = layout::manifest_key(&loaded.state.job_id).map_err(|e| Flow::Err(RuntimeError::StoreUnavailable(e.to_string())))?;
    let keys = [key];
    let outcome = env.retry.run(
        |_| match env.scheduler.publish_job(&loaded.state.job_id, "ckpt", &keys, loaded.manifest.sequence) {
            Err(LinkError::Rejected { kind, .. }) if kind == "StaleSequence" => Ok(()),
            other => other,
        },
        |e| matches!(e, LinkError::Unreachable(_)),
    );
    outcome.map_err(scheduler_error)?;
    emit(
        env,
        Event::new(EventKind::Published, loaded.state.job_id.clone())
            .sequence(loaded.manifest.sequence)
            .detail("ckpt"),
    )
}

fn outcome_of(flow: Flow) -> TaskOutcome {
    match flow {
        Flow::Halt => TaskOutcome::Halted,
        Flow::Err(e) => TaskOutcome::failed(e, None),
    }
}

/// Resumes a job the scheduler reports as `ckpt` from its latest checkpoint.
pub fn restart(job_id: &str, env: &NodeEnv) -> TaskOutcome {
    let rec = match scheduler_call(env, |s| s.get_job(job_id)) {
        Ok(r) => r,
        Err(e) => return TaskOutcome::failed(e, None),
    };
    match rec.status {
        JobStatus::New => return TaskOutcome::failed(RuntimeError::NoCheckpoint(job_id.to_string()), None),
        JobStatus::Finished => return TaskOutcome::failed(RuntimeError::AlreadyFinished(job_id.to_string()), None),
        JobStatus::Ckpt => {}
    }
    let Some(manifest_key) = rec.cmi_manifest_key.clone() else {
        return TaskOutcome::failed(RuntimeError::NoCheckpoint(job_id.to_string()), None);
    };
    let loaded = match load_checkpoint(job_id, &manifest_key, env) {
        Ok(l) => l,
        Err(e) => return TaskOutcome::failed(e, None),
    };
    if loaded.manifest.sequence < rec.ckpt_sequence {
        return TaskOutcome::failed(
            RuntimeError::ManifestMismatch(format!(
                "manifest sequence {} behind published {}",
                loaded.manifest.sequence, rec.ckpt_sequence
            )),
            None,
        );
    }
    resume_known(loaded, Some(rec.ckpt_sequence), env)
}

/// Highest checkpoint sequence visible in the store for `job_id`.
fn stored_sequence(job_id: &str, env: &NodeEnv) -> u64 {
    let mut best = 0;
    if let Ok(key) = layout::manifest_key(job_id) {
        if let Ok(m) = env.store.get(&key).map_err(drop).and_then(|raw| RestartManifest::decode(&raw).map_err(drop)) {
            best = m.sequence;
        }
    }
    if let Ok(metas) = env.store.list(&layout::job_namespace(job_id)) {
        for meta in metas {
            if let Some(s) = layout::cmi_sequence(meta.key.name()) {
                best = best.max(s);
            }
        }
    }
    best
}

/// Runs a job the scheduler reports as `new`.
///
/// A manifest already in the store is a promoted checkpoint whose scheduler
/// notification never landed; the job resumes from it. Otherwise the job
/// starts at stage 0 with sequence numbering continuing above any image left
/// in the store.
pub fn start_job(job_id: &str, app_name: &str, env: &NodeEnv) -> TaskOutcome {
    let Some(machine) = env.apps.get(app_name) else {
        return TaskOutcome::failed(RuntimeError::UnknownApp(app_name.to_string()), None);
    };
    if let Ok(key) = layout::manifest_key(job_id) {
        if env.store.exists(&key).unwrap_or(false) {
            match load_checkpoint(job_id, &key, env) {
                Ok(loaded) if loaded.manifest.app_name == app_name => return resume_known(loaded, Some(0), env),
                Ok(_) => {}
                Err(e) => tracing::warn!(job_id, error = %e, "ignoring unusable checkpoint of a new job"),
            }
        }
    }
    let mut state = TaskState::fresh(job_id, app_name);
    state.ckpt_sequence = stored_sequence(job_id, env);
    if env.events.emit(Event::new(EventKind::Started, job_id).stage(0)).is_err() {
        return TaskOutcome::Halted;
    }
    run_task(&machine, state, env)
}

/// The job driver: a `new` job starts, a `ckpt` job restarts from its
/// checkpoint, a finished job has nothing left to do.
pub fn run_claimed(rec: &JobRecord, env: &NodeEnv) -> Option<TaskOutcome> {
    match rec.status {
        JobStatus::New => Some(start_job(&rec.job_id, &rec.app_name, env)),
        JobStatus::Ckpt => Some(restart(&rec.job_id, env)),
        JobStatus::Finished => None,
    }
}

#[cfg(test)]
mod tests;
