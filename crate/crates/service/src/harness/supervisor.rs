//! Runs a scenario against real processes.
//!
//! The scheduler and every agent are child processes. Agents send each
//! event over the harness socket and block until it is acknowledged; the
//! supervisor handles one event at a time, so kill triggers fire at exact
//! points and the log is a single total order.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use navhop_client::{AgentClient, Client, SchedulerClient};
use navhop_core::colocation::{self, JobParams, PRODUCT_NAME};
use navhop_core::events::{Event, EventKind};
use navhop_core::layout;
use navhop_core::registry::JobStatus;
use navhop_core::runtime::{LinkError, SchedulerLink};
use navhop_core::store::{BlobStore, LocalDirStore};

use super::config::{ConfigError, KillMode, Scenario, Topology, EMITTER, SCHEDULER};
use super::report::{KillRecord, LoggedEvent, RunOutcome, RunReport, HARNESS_NODE};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{what}: {source}")]
    Io { what: String, source: io::Error },
    #[error("{0}")]
    Setup(String),
}

fn io_err(what: impl Into<String>) -> impl FnOnce(io::Error) -> HarnessError {
    let what = what.into();
    move |source| HarnessError::Io { what, source }
}

/// Where the agent and scheduler executables are.
#[derive(Debug, Clone)]
pub struct Binaries {
    pub agent: PathBuf,
    pub scheduler: PathBuf,
}

impl Binaries {
    /// The executables installed next to the running one.
    pub fn beside_current_exe() -> io::Result<Self> {
        let exe = std::env::current_exe()?;
        let dir = exe.parent().unwrap_or(Path::new("."));
        Ok(Self {
            agent: dir.join(format!("agent{}", std::env::consts::EXE_SUFFIX)),
            scheduler: dir.join(format!("scheduler{}", std::env::consts::EXE_SUFFIX)),
        })
    }
}

const CLIENT_TIMEOUT: Duration = Duration::from_secs(5);
const DRAIN_LIMIT: Duration = Duration::from_secs(2);
const STATUS_EVERY: Duration = Duration::from_millis(25);

enum Verdict {
    Ack,
    Drop,
}

struct Incoming {
    event: Event,
    reply: Sender<Verdict>,
}

/// Accepts agent event connections; each connection gets a thread that
/// forwards events and writes back the verdicts.
struct EventServer {
    addr: String,
    stop: Arc<AtomicBool>,
}

impl EventServer {
    fn start() -> io::Result<(Self, Receiver<Incoming>)> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let flag = stop.clone();
        thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let tx = tx.clone();
                thread::spawn(move || forward_events(stream, tx));
            }
        });
        Ok((Self { addr, stop }, rx))
    }

    fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop so it sees the flag
        let _ = TcpStream::connect(&self.addr);
    }
}

fn forward_events(stream: TcpStream, tx: Sender<Incoming>) {
    stream.set_nodelay(true).ok();
    let Ok(mut writer) = stream.try_clone() else { return };
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { return };
        let event: Event = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(e) => {
                tracing::warn!(error = %e, %line, "unreadable event");
                return;
            }
        };
        let (reply, verdict) = mpsc::channel();
        if tx.send(Incoming { event, reply }).is_err() {
            return;
        }
        match verdict.recv() {
            Ok(Verdict::Ack) => {
                if writer.write_all(b"ok\n").is_err() {
                    return;
                }
            }
            _ => return,
        }
    }
}

/// Starts `cmd` and waits for its `listening <addr>` line.
fn spawn_announced(mut cmd: Command, log: &Path, what: &str) -> Result<(Child, String), HarnessError> {
    for (k, _) in std::env::vars() {
        if k.starts_with("NAVHOP_") && k != "NAVHOP_LOG" {
            cmd.env_remove(k);
        }
    }
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .map_err(io_err(log.display().to_string()))?;
    cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(log_file);
    let mut child = cmd.spawn().map_err(io_err(format!("spawn {what}")))?;
    let stdout = child.stdout.take().expect("stdout is piped");
    let mut line = String::new();
    let read = BufReader::new(stdout).read_line(&mut line);
    match (read, line.trim().strip_prefix("listening ")) {
        (Ok(_), Some(addr)) => Ok((child, addr.to_string())),
        _ => {
            let _ = child.kill();
            let _ = child.wait();
            Err(HarnessError::Setup(format!(
                "{what} exited before announcing its address; see {}",
                log.display()
            )))
        }
    }
}

fn exit_code(status: ExitStatus) -> i32 {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    status.code().unwrap_or(-1)
}

struct AgentProc {
    child: Child,
    addr: String,
    /// Kill record of a notice kill in progress.
    dying: Option<usize>,
}

struct Run<'a> {
    topo: &'a Topology,
    scenario: &'a Scenario,
    bins: &'a Binaries,
    dir: PathBuf,
    store_root: PathBuf,
    journal: PathBuf,
    events_addr: String,
    start: Instant,
    scheduler: Option<Child>,
    scheduler_addr: String,
    client: SchedulerClient,
    agents: BTreeMap<String, AgentProc>,
    /// Topology name -> every incarnation, oldest first.
    incarnations: BTreeMap<String, Vec<String>>,
    log: Vec<LoggedEvent>,
    kills: Vec<KillRecord>,
    fired: Vec<bool>,
    seen: Vec<u32>,
    line_stages: Vec<Option<u32>>,
    harness_seq: u64,
    discarded: u64,
}

impl Run<'_> {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn record(&mut self, event: Event) {
        let at_ms = self.now_ms();
        self.log.push(LoggedEvent {
            arrival: self.log.len() as u64,
            at_ms,
            event,
        });
    }

    fn record_harness(&mut self, kind: EventKind, detail: String) {
        self.harness_seq += 1;
        let mut ev = Event::new(kind, "").detail(detail);
        ev.node = HARNESS_NODE.to_string();
        ev.seq = self.harness_seq;
        self.record(ev);
    }

    fn spawn_scheduler(&mut self, listen: &str) -> Result<(), HarnessError> {
        let mut cmd = Command::new(&self.bins.scheduler);
        cmd.arg("--listen")
            .arg(listen)
            .arg("--journal")
            .arg(&self.journal)
            .arg("--store-root")
            .arg(&self.store_root)
            .arg("--lease-secs")
            .arg(self.topo.lease_secs.to_string());
        let (child, addr) = spawn_announced(cmd, &self.dir.join("scheduler.log"), "scheduler")?;
        self.scheduler = Some(child);
        self.scheduler_addr = addr;
        self.client = SchedulerClient::from_client(Client::new(&self.scheduler_addr).with_timeout(CLIENT_TIMEOUT));
        Ok(())
    }

    fn spawn_agent(&mut self, id: &str, poll: bool) -> Result<(), HarnessError> {
        let t = self.topo;
        let mut cmd = Command::new(&self.bins.agent);
        cmd.arg("--node-id")
            .arg(id)
            .arg("--listen")
            .arg("127.0.0.1:0")
            .arg("--store-root")
            .arg(&self.store_root)
            .arg("--scheduler")
            .arg(&self.scheduler_addr)
            .arg("--events")
            .arg(&self.events_addr)
            .arg("--heartbeat-ms")
            .arg(t.heartbeat_ms.to_string())
            .arg("--grace-ms")
            .arg(t.grace_ms.to_string())
            .arg("--retry-base-ms")
            .arg(t.retry_base_ms.to_string())
            .arg("--max-jobs")
            .arg(t.max_jobs.to_string());
        if poll {
            cmd.arg("--poll-ms").arg(t.poll_ms.to_string());
        }
        if let Some(n) = t.store_chunk_bytes {
            cmd.arg("--store-chunk-bytes").arg(n.to_string());
        }
        let (child, addr) = spawn_announced(cmd, &self.dir.join(format!("{id}.log")), &format!("agent {id}"))?;
        self.agents.insert(
            id.to_string(),
            AgentProc {
                child,
                addr,
                dying: None,
            },
        );
        Ok(())
    }

    /// Retries a scheduler call while the scheduler is down or restarting.
    fn with_scheduler<T>(&self, mut op: impl FnMut(&SchedulerClient) -> Result<T, LinkError>) -> Result<T, LinkError> {
        let deadline = Instant::now() + CLIENT_TIMEOUT;
        loop {
            match op(&self.client) {
                Err(LinkError::Unreachable(_)) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
                other => return other,
            }
        }
    }

    fn topology_name(&self, id: &str) -> Option<String> {
        self.incarnations
            .iter()
            .find(|(_, ids)| ids.iter().any(|i| i == id))
            .map(|(name, _)| name.clone())
    }

    fn resolve_target(&self, target: &str, emitter: Option<&str>) -> Option<String> {
        match target {
            EMITTER => emitter.map(str::to_string),
            SCHEDULER => Some(SCHEDULER.to_string()),
            name => self.incarnations.get(name).and_then(|ids| ids.last().cloned()),
        }
    }

    /// Fires kill `k` at `target`. Returns whether `target` is gone already.
    fn fire(&mut self, k: usize, target: Option<String>) -> Result<bool, HarnessError> {
        let scenario = self.scenario;
        let spec = &scenario.kills[k];
        let mut rec = KillRecord {
            target: target.clone().unwrap_or_default(),
            mode: spec.mode,
            trigger: spec.describe(),
            fired_ms: self.now_ms(),
            exited_ms: None,
            exit_code: None,
            replacement: None,
        };
        let Some(target) = target else {
            self.kills.push(rec);
            return Ok(false);
        };
        if target == SCHEDULER {
            let code = match self.scheduler.take() {
                Some(mut child) => {
                    let _ = child.kill();
                    child.wait().ok().map(exit_code)
                }
                None => None,
            };
            rec.exited_ms = Some(self.now_ms());
            rec.exit_code = code;
            self.record_harness(EventKind::Killed, SCHEDULER.into());
            let listen = self.scheduler_addr.clone();
            self.restart_scheduler(&listen)?;
            rec.replacement = Some(SCHEDULER.into());
            self.record_harness(EventKind::Replaced, format!("{SCHEDULER}>{SCHEDULER}"));
            self.kills.push(rec);
            return Ok(false);
        }
        let live = self.agents.get(&target).is_some_and(|a| a.dying.is_none());
        if !live {
            rec.trigger.push_str(" (target already gone)");
            self.kills.push(rec);
            return Ok(false);
        }
        self.kills.push(rec);
        let idx = self.kills.len() - 1;
        match spec.mode {
            KillMode::Immediate => {
                let proc_ = self.agents.get_mut(&target).expect("checked live");
                let _ = proc_.child.kill();
                let status = proc_.child.wait().map_err(io_err(format!("wait for {target}")))?;
                self.reaped(&target, status, idx)?;
                Ok(true)
            }
            KillMode::Notice => {
                let grace = spec.grace_ms.unwrap_or(self.topo.grace_ms);
                let proc_ = self.agents.get_mut(&target).expect("checked live");
                proc_.dying = Some(idx);
                let agent = AgentClient::from_client(Client::new(&proc_.addr).with_timeout(CLIENT_TIMEOUT));
                if let Err(e) = agent.kill("notice", Some(grace)) {
                    tracing::warn!(%target, error = %e, "notice kill not delivered");
                }
                Ok(false)
            }
        }
    }

    fn restart_scheduler(&mut self, listen: &str) -> Result<(), HarnessError> {
        // the old socket may linger for a moment
        let mut last = None;
        for _ in 0..50 {
            match self.spawn_scheduler(listen) {
                Ok(()) => return Ok(()),
                Err(e) => last = Some(e),
            }
            thread::sleep(Duration::from_millis(20));
        }
        Err(last.expect("at least one attempt"))
    }

    /// Bookkeeping once an agent process is gone: log it, free its jobs and
    /// bring up a replacement that answers to the old names.
    fn reaped(&mut self, id: &str, status: ExitStatus, kill: usize) -> Result<(), HarnessError> {
        self.agents.remove(id);
        self.kills[kill].exited_ms = Some(self.now_ms());
        self.kills[kill].exit_code = Some(exit_code(status));
        self.record_harness(EventKind::Killed, id.to_string());
        if let Err(e) = self.with_scheduler(|c| c.requeue_dead(id)) {
            tracing::warn!(node = %id, error = %e, "requeue failed");
        }
        if !self.scenario.replace_killed {
            return Ok(());
        }
        let Some(name) = self.topology_name(id) else { return Ok(()) };
        let generation = self.incarnations[&name].len();
        let fresh = format!("{name}-r{generation}");
        self.spawn_agent(&fresh, true)?;
        self.incarnations.get_mut(&name).expect("known name").push(fresh.clone());
        let addr = self.agents[&fresh].addr.clone();
        // hops addressed to an old name reach the replacement
        for old in self.incarnations[&name].clone() {
            if old != fresh {
                let _ = self.with_scheduler(|c| c.heartbeat(&old, &addr));
            }
        }
        self.kills[kill].replacement = Some(fresh.clone());
        self.record_harness(EventKind::Replaced, format!("{id}>{fresh}"));
        Ok(())
    }

    fn on_event(&mut self, inc: Incoming) -> Result<(), HarnessError> {
        let node = inc.event.node.clone();
        if !self.agents.contains_key(&node) {
            self.discarded += 1;
            let _ = inc.reply.send(Verdict::Drop);
            return Ok(());
        }
        let event = inc.event;
        self.record(event.clone());
        let scenario = self.scenario;
        let mut due = Vec::new();
        for (i, k) in scenario.kills.iter().enumerate() {
            let Some(m) = &k.on else { continue };
            if self.fired[i] || !m.matches(&event, self.line_stages[i]) {
                continue;
            }
            self.seen[i] += 1;
            if self.seen[i] == m.occurrence {
                self.fired[i] = true;
                due.push(i);
            }
        }
        let mut emitter_gone = false;
        for i in due {
            let target = self.resolve_target(&scenario.kills[i].target, Some(&node));
            let hits_emitter = target.as_deref() == Some(node.as_str());
            if self.fire(i, target)? && hits_emitter {
                emitter_gone = true;
            }
        }
        let _ = inc.reply.send(if emitter_gone { Verdict::Drop } else { Verdict::Ack });
        Ok(())
    }

    fn tick(&mut self) -> Result<(), HarnessError> {
        let elapsed = self.now_ms();
        let scenario = self.scenario;
        for (i, k) in scenario.kills.iter().enumerate() {
            if !self.fired[i] && k.at_ms.is_some_and(|at| elapsed >= at) {
                self.fired[i] = true;
                let target = self.resolve_target(&k.target, None);
                self.fire(i, target)?;
            }
        }
        let dying: Vec<(String, usize)> = self
            .agents
            .iter()
            .filter_map(|(id, a)| a.dying.map(|k| (id.clone(), k)))
            .collect();
        for (id, k) in dying {
            let exited = self.agents.get_mut(&id).and_then(|a| a.child.try_wait().ok().flatten());
            if let Some(status) = exited {
                self.reaped(&id, status, k)?;
            }
        }
        Ok(())
    }

    fn all_finished(&self) -> bool {
        match self.client.list_jobs() {
            Ok(jobs) => {
                self.scenario
                    .jobs
                    .iter()
                    .all(|j| jobs.iter().any(|(id, st)| *id == j.id && *st == JobStatus::Finished))
            }
            Err(_) => false,
        }
    }

    fn all_idle(&self) -> bool {
        self.agents.values().filter(|a| a.dying.is_none()).all(|a| {
            AgentClient::from_client(Client::new(&a.addr).with_timeout(CLIENT_TIMEOUT))
                .health()
                .is_ok_and(|h| h.running_jobs.is_empty())
        })
    }

    fn submit_jobs(&mut self) -> Result<(), HarnessError> {
        let store = LocalDirStore::open(&self.store_root).map_err(|e| HarnessError::Setup(e.to_string()))?;
        let mut keys = Vec::new();
        for j in &self.scenario.jobs {
            let params = JobParams {
                radius: j.radius,
                data_node: j.data_node.clone(),
            };
            let k = colocation::stage_inputs(&store, &j.id, self.scenario.seed_of(j), j.fine, j.coarse, &params)
                .map_err(|e| HarnessError::Setup(format!("inputs of job {}: {e}", j.id)))?;
            keys.push(k);
        }
        self.start = Instant::now();
        let setup = |e: LinkError| HarnessError::Setup(e.to_string());
        for (j, k) in self.scenario.jobs.iter().zip(keys) {
            self.client.submit(&j.id, &j.app, &k).map_err(setup)?;
            if let Some(node) = &j.start_on {
                // hold the job so no poller takes it first
                self.client.claim(&j.id, node, None).map_err(setup)?;
                let addr = &self.agents[node].addr;
                AgentClient::from_client(Client::new(addr).with_timeout(CLIENT_TIMEOUT))
                    .start(&j.id, &j.app)
                    .map_err(setup)?;
            }
        }
        Ok(())
    }

    fn drive(&mut self, rx: &Receiver<Incoming>) -> Result<RunOutcome, HarnessError> {
        let deadline = self.start + Duration::from_millis(self.scenario.timeout_ms);
        let mut last_check = Instant::now();
        let mut finished_at: Option<Instant> = None;
        loop {
            match rx.recv_timeout(Duration::from_millis(5)) {
                Ok(inc) => self.on_event(inc)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(HarnessError::Setup("event server stopped".into())),
            }
            self.tick()?;
            if last_check.elapsed() >= STATUS_EVERY {
                last_check = Instant::now();
                match finished_at {
                    None if self.all_finished() => finished_at = Some(Instant::now()),
                    Some(at) if at.elapsed() >= DRAIN_LIMIT || self.all_idle() => return Ok(RunOutcome::AllFinished),
                    _ => {}
                }
            }
            if finished_at.is_none() && Instant::now() >= deadline {
                return Ok(RunOutcome::DeadlineExceeded);
            }
        }
    }

    fn collect(&self) -> (BTreeMap<String, String>, BTreeMap<String, Vec<u8>>) {
        let mut statuses = BTreeMap::new();
        let mut products = BTreeMap::new();
        let store = LocalDirStore::open(&self.store_root).ok();
        for j in &self.scenario.jobs {
            let Ok(rec) = self.with_scheduler(|c| c.get_job(&j.id)) else { continue };
            statuses.insert(j.id.clone(), rec.status.as_str().to_string());
            let Ok(want) = layout::product_key(&j.id, PRODUCT_NAME) else { continue };
            if rec.product_keys.contains(&want) {
                if let Some(bytes) = store.as_ref().and_then(|s| s.get(&want).ok()) {
                    products.insert(j.id.clone(), bytes);
                }
            }
        }
        (statuses, products)
    }

    fn shutdown(&mut self) {
        for a in self.agents.values_mut() {
            let _ = a.child.kill();
            let _ = a.child.wait();
        }
        if let Some(mut s) = self.scheduler.take() {
            let _ = s.kill();
            let _ = s.wait();
        }
    }
}

/// Runs `scenario` on `topology` in a fresh temporary directory.
pub fn run_scenario(topology: &Topology, scenario: &Scenario, bins: &Binaries) -> Result<RunReport, HarnessError> {
    let dir = tempfile::tempdir().map_err(io_err("temporary directory"))?;
    run_scenario_in(topology, scenario, bins, dir.path())
}

/// Runs `scenario` with the store, journal and process logs under `dir`.
pub fn run_scenario_in(
    topology: &Topology,
    scenario: &Scenario,
    bins: &Binaries,
    dir: &Path,
) -> Result<RunReport, HarnessError> {
    topology.validate()?;
    let line_stages = scenario.validate(topology)?;
    let store_root = dir.join("store");
    std::fs::create_dir_all(&store_root).map_err(io_err(store_root.display().to_string()))?;
    let (server, rx) = EventServer::start().map_err(io_err("event socket"))?;
    let mut run = Run {
        topo: topology,
        scenario,
        bins,
        dir: dir.to_path_buf(),
        journal: dir.join("journal.log"),
        store_root,
        events_addr: server.addr.clone(),
        start: Instant::now(),
        scheduler: None,
        scheduler_addr: String::new(),
        client: SchedulerClient::new(""),
        agents: BTreeMap::new(),
        incarnations: BTreeMap::new(),
        log: Vec::new(),
        kills: Vec::new(),
        fired: vec![false; scenario.kills.len()],
        seen: vec![0; scenario.kills.len()],
        line_stages,
        harness_seq: 0,
        discarded: 0,
    };
    let result = (|| {
        run.spawn_scheduler("127.0.0.1:0")?;
        for n in &topology.nodes {
            run.spawn_agent(&n.id, n.poll)?;
            run.incarnations.insert(n.id.clone(), vec![n.id.clone()]);
        }
        run.submit_jobs()?;
        run.drive(&rx)
    })();
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            run.shutdown();
            server.shutdown();
            return Err(e);
        }
    };
    let wall_ms = run.now_ms();
    let (statuses, products) = run.collect();
    run.shutdown();
    server.shutdown();
    // events still in flight came from processes that are gone now
    let late = rx.try_iter().count() as u64;
    Ok(RunReport::summarize(
        &scenario.name,
        outcome,
        wall_ms,
        &scenario.jobs,
        &statuses,
        products,
        std::mem::take(&mut run.kills),
        run.discarded + late,
        std::mem::take(&mut run.log),
    ))
}
