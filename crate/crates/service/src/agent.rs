//! The node agent: accepts hop handoffs and start requests, runs each job on
//! its own worker thread, heartbeats to the scheduler and optionally pulls
//! work from it.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use navhop_client::{wire, PeerClient, SchedulerClient};
use navhop_core::colocation;
use navhop_core::events::{Emitter, Event, EventSink, Halted, NullSink};
use navhop_core::kvdoc::KvDoc;
use navhop_core::registry::{JobRecord, JobStatus};
use navhop_core::runtime::{
    load_checkpoint, resume, run_claimed, AppRegistry, LinkError, NodeDescriptor, NodeEnv,
    RetryPolicy, SchedulerLink, TaskOutcome,
};
use navhop_core::store::{BlobKey, LocalDirStore};
use tokio::net::TcpListener;

/// Exit status of a hard kill, as if by SIGKILL.
pub const KILLED_EXIT: i32 = 137;

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub node_id: String,
    pub store_root: PathBuf,
    pub scheduler: String,
    pub apps: Vec<String>,
    pub max_jobs: usize,
    pub events: Option<String>,
    pub poll: Option<Duration>,
    pub heartbeat: Duration,
    pub store_chunk: Option<usize>,
    pub grace: Duration,
    pub retry: RetryPolicy,
}

/// Sends each event as a JSON line and waits for the `ok` line that
/// releases it. The harness decides about kills while the agent waits.
pub struct SocketSink {
    conn: Mutex<Option<(TcpStream, BufReader<TcpStream>)>>,
}

impl SocketSink {
    pub fn connect(addr: &str) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            conn: Mutex::new(Some((stream, reader))),
        })
    }
}

impl EventSink for SocketSink {
    fn emit(&self, event: Event) -> Result<(), Halted> {
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let Some((w, r)) = guard.as_mut() else { return Ok(()) };
        let mut line = serde_json::to_string(&event).expect("events serialize");
        line.push('\n');
        let mut ack = String::new();
        let ok = w.write_all(line.as_bytes()).and_then(|()| r.read_line(&mut ack));
        match ok {
            Ok(n) if n > 0 && ack.trim_end() == "ok" => Ok(()),
            Ok(_) if ack.trim_end() == "halt" => Err(Halted),
            other => {
                tracing::warn!(result = ?other.map(|_| ack), "event channel lost; continuing without it");
                *guard = None;
                Ok(())
            }
        }
    }
}

pub struct Agent {
    pub env: NodeEnv,
    scheduler: SchedulerClient,
    workers: Mutex<BTreeSet<String>>,
    accepting: AtomicBool,
    started: Instant,
    max_jobs: usize,
    grace: Duration,
}

/// Why a job could not be given a worker slot.
fn slot_error(agent: &Agent, job_id: &str) -> Option<KvDoc> {
    if !agent.accepting.load(Ordering::SeqCst) {
        return Some(wire::error("ShuttingDown", "agent is shutting down"));
    }
    let workers = agent.workers.lock().unwrap();
    if workers.contains(job_id) {
        return None;
    }
    (workers.len() >= agent.max_jobs).then(|| wire::error("Busy", format!("{} jobs running", workers.len())))
}

fn link_error(e: LinkError) -> KvDoc {
    match e {
        LinkError::Unreachable(m) => wire::error("SchedulerUnreachable", m),
        LinkError::Rejected { kind, message } => wire::error(&kind, message),
    }
}

impl Agent {
    /// Builds the node environment. `addr` is the address peers reach this
    /// agent at.
    pub fn new(cfg: &AgentConfig, addr: &str) -> Result<Arc<Self>, String> {
        let sink: Arc<dyn EventSink> = match &cfg.events {
            Some(a) => Arc::new(SocketSink::connect(a).map_err(|e| format!("event socket {a}: {e}"))?),
            None => Arc::new(NullSink),
        };
        let emitter = Emitter::new(&cfg.node_id, sink);
        let mut store = LocalDirStore::open(&cfg.store_root).map_err(|e| e.to_string())?;
        if cfg.events.is_some() {
            store = store.with_hook(emitter.store_hook());
        }
        if let Some(n) = cfg.store_chunk {
            store = store.with_chunk_size(n);
        }
        let mut all = AppRegistry::new();
        colocation::register_apps(&mut all);
        let mut apps = AppRegistry::new();
        for name in &cfg.apps {
            let m = all.get(name).ok_or_else(|| format!("unknown application {name:?}"))?;
            apps.register((*m).clone());
        }
        let node = NodeDescriptor::from_addr(&cfg.node_id, addr).ok_or_else(|| format!("bad address {addr}"))?;
        let scheduler = SchedulerClient::new(&cfg.scheduler);
        let env = NodeEnv {
            node,
            store: Arc::new(store),
            scheduler: Arc::new(scheduler.clone()),
            peers: Arc::new(PeerClient::default()),
            apps: Arc::new(apps),
            events: emitter,
            retry: cfg.retry,
        };
        Ok(Arc::new(Self {
            env,
            scheduler,
            workers: Mutex::default(),
            accepting: AtomicBool::new(true),
            started: Instant::now(),
            max_jobs: cfg.max_jobs.max(1),
            grace: cfg.grace,
        }))
    }

    pub fn node_id(&self) -> &str {
        self.env.node_id()
    }

    pub fn running_jobs(&self) -> Vec<String> {
        self.workers.lock().unwrap().iter().cloned().collect()
    }

    /// Takes a worker slot for `job_id`. False if the job already runs here.
    fn reserve(&self, job_id: &str) -> bool {
        self.workers.lock().unwrap().insert(job_id.to_string())
    }

    fn vacate(&self, job_id: &str) {
        self.workers.lock().unwrap().remove(job_id);
    }

    fn spawn_worker(self: &Arc<Self>, job_id: String, body: impl FnOnce(&NodeEnv) -> Option<TaskOutcome> + Send + 'static) {
        let agent = self.clone();
        thread::Builder::new()
            .name(format!("job-{job_id}"))
            .spawn(move || {
                let outcome = body(&agent.env);
                match &outcome {
                    Some(TaskOutcome::Failed { error, .. }) => {
                        tracing::warn!(job = %job_id, %error, "job failed here; releasing it");
                        if let Err(e) = agent.scheduler.release(&job_id, agent.node_id()) {
                            tracing::warn!(job = %job_id, error = %e, "release failed");
                        }
                    }
                    None => {
                        let _ = agent.scheduler.release(&job_id, agent.node_id());
                    }
                    Some(o) => tracing::info!(job = %job_id, outcome = ?std::mem::discriminant(o), "job left this node"),
                }
                agent.vacate(&job_id);
            })
            .expect("spawn worker thread");
    }

    fn svc_hop(self: &Arc<Self>, req: &KvDoc) -> Result<KvDoc, KvDoc> {
        let field = |k| req.require(k).map_err(|e| wire::error("BadRequest", e));
        let job_id = field("job_id")?.to_string();
        let manifest_key = BlobKey::parse(field("manifest_key")?).map_err(|e| wire::error("BadRequest", e))?;
        let source = field("source_node")?.to_string();
        if let Some(err) = slot_error(self, &job_id) {
            return Err(err);
        }
        if !self.reserve(&job_id) {
            // a retried handoff for a job already accepted here
            return Ok(wire::ok());
        }
        let accepted = load_checkpoint(&job_id, &manifest_key, &self.env)
            .map_err(|e| wire::error(e.kind(), e))
            .and_then(|loaded| {
                self.scheduler
                    .claim(&job_id, self.node_id(), Some(&source))
                    .map(|_| loaded)
                    .map_err(link_error)
            });
        match accepted {
            Ok(loaded) => {
                self.spawn_worker(job_id, move |env| Some(resume(loaded, env)));
                Ok(wire::ok())
            }
            Err(e) => {
                self.vacate(&job_id);
                Err(e)
            }
        }
    }

    fn svc_start(self: &Arc<Self>, req: &KvDoc) -> Result<KvDoc, KvDoc> {
        let field = |k| req.require(k).map_err(|e| wire::error("BadRequest", e));
        let job_id = field("job_id")?.to_string();
        let app_name = field("app_name")?;
        if self.env.apps.get(app_name).is_none() {
            return Err(wire::error("UnknownApp", format!("application {app_name:?} is not registered here")));
        }
        if let Some(err) = slot_error(self, &job_id) {
            return Err(err);
        }
        if !self.reserve(&job_id) {
            return Err(wire::error("Busy", format!("job {job_id} already runs here")));
        }
        let rec = self.scheduler.get_job(&job_id).map_err(link_error).and_then(|rec| {
            if rec.status == JobStatus::Finished {
                return Err(wire::error("InvalidTransition", format!("job {job_id} is finished")));
            }
            if rec.app_name != app_name {
                return Err(wire::error("UnknownApp", format!("job {job_id} runs {:?}", rec.app_name)));
            }
            self.scheduler.claim(&job_id, self.node_id(), None).map_err(link_error)
        });
        match rec {
            Ok(rec) => {
                self.spawn_worker(job_id, move |env| run_claimed(&rec, env));
                Ok(wire::ok())
            }
            Err(e) => {
                self.vacate(&job_id);
                Err(e)
            }
        }
    }

    fn svc_health(&self) -> KvDoc {
        wire::ok()
            .with("node_id", self.node_id())
            .with("running_jobs", self.running_jobs().join(","))
            .with("uptime_ms", self.started.elapsed().as_millis())
            .with("accepting", self.accepting.load(Ordering::SeqCst))
    }

    /// Stops taking work and exits once idle or when the grace runs out,
    /// whichever comes first. Jobs still running at the deadline die with
    /// the process.
    fn begin_notice(self: &Arc<Self>, grace: Duration) {
        self.accepting.store(false, Ordering::SeqCst);
        let agent = self.clone();
        thread::spawn(move || {
            let deadline = Instant::now() + grace;
            while Instant::now() < deadline {
                if agent.workers.lock().unwrap().is_empty() {
                    std::process::exit(0);
                }
                thread::sleep(Duration::from_millis(5));
            }
            std::process::exit(if agent.workers.lock().unwrap().is_empty() { 0 } else { KILLED_EXIT });
        });
    }

    /// Handles one request. `None` means close without replying.
    pub fn handle(self: &Arc<Self>, req: &KvDoc) -> Option<KvDoc> {
        let service = req.get(wire::SERVICE).unwrap_or("");
        let reply = match service {
            "hop" => self.svc_hop(req),
            "start" => self.svc_start(req),
            "health" => Ok(self.svc_health()),
            "kill" => {
                match req.get("mode") {
                    Some("immediate") => std::process::exit(KILLED_EXIT),
                    Some("notice") => {
                        let grace = req
                            .parsed_or("grace_ms", self.grace.as_millis() as u64)
                            .map(Duration::from_millis)
                            .unwrap_or(self.grace);
                        self.begin_notice(grace);
                        return None;
                    }
                    other => Err(wire::error("BadRequest", format!("kill mode {other:?}"))),
                }
            }
            other => Err(wire::error("BadRequest", format!("unknown service {other:?}"))),
        };
        Some(reply.unwrap_or_else(|e| e))
    }

    /// Claims and runs one job if there is room. Returns whether it did.
    pub fn pull_once(self: &Arc<Self>) -> bool {
        if !self.accepting.load(Ordering::SeqCst) || self.workers.lock().unwrap().len() >= self.max_jobs {
            return false;
        }
        let rec: JobRecord = match self.scheduler.next_job(self.node_id()) {
            Ok(Some(r)) => r,
            Ok(None) => return false,
            Err(e) => {
                tracing::debug!(error = %e, "pull failed");
                return false;
            }
        };
        if !self.reserve(&rec.job_id) {
            return false;
        }
        let job_id = rec.job_id.clone();
        self.spawn_worker(job_id, move |env| run_claimed(&rec, env));
        true
    }

    pub fn heartbeat(&self) -> Result<(), LinkError> {
        self.scheduler.heartbeat(self.node_id(), &self.env.node.addr())
    }
}

/// Runs the agent on an already bound listener until the process exits.
pub async fn run(listener: TcpListener, cfg: AgentConfig) -> Result<(), String> {
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let agent = tokio::task::block_in_place(|| Agent::new(&cfg, &addr.to_string()))?;

    // peers resolve this node through the scheduler, so register first
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match tokio::task::block_in_place(|| agent.heartbeat()) {
            Ok(()) => break,
            Err(e) if Instant::now() < deadline => {
                tracing::debug!(error = %e, "scheduler not ready");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
            Err(e) => return Err(format!("scheduler: {e}")),
        }
    }

    let hb = agent.clone();
    let every = cfg.heartbeat;
    thread::spawn(move || loop {
        thread::sleep(every);
        if let Err(e) = hb.heartbeat() {
            tracing::debug!(error = %e, "heartbeat failed");
        }
    });
    if let Some(poll) = cfg.poll {
        let puller = agent.clone();
        thread::spawn(move || loop {
            if !puller.pull_once() {
                thread::sleep(poll);
            }
        });
    }

    crate::net::announce(&addr);
    let handler = Arc::new(move |req: KvDoc| {
        let a = agent.clone();
        async move {
            tokio::task::spawn_blocking(move || a.handle(&req))
                .await
                .unwrap_or_else(|e| Some(wire::error("Internal", e)))
        }
    });
    crate::net::serve(listener, handler).await;
    Ok(())
}
