//! Topology and scenario documents.
//!
//! Both are TOML. A topology names the nodes and the settings every agent
//! gets; a scenario lists the jobs to run and the kills to inject.
//!
//! ```toml
//! # topology
//! heartbeat_ms = 200
//! [[node]]
//! id = "A"
//! [[node]]
//! id = "B"
//! poll = true
//! ```
//!
//! ```toml
//! # scenario
//! name = "kill after second checkpoint"
//! [[job]]
//! id = "1"
//! app = "colocation"
//! start_on = "A"
//! [[kill]]
//! target = "@emitter"
//! on = { kind = "stage_mid", job = "1", line = 13 }
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use navhop_core::colocation::{self, DEFAULT_RADIUS};
use navhop_core::events::{Event, EventKind};
use serde::{Deserialize, Serialize};

/// Kill target naming the node that emitted the triggering event.
pub const EMITTER: &str = "@emitter";
/// Kill target naming the scheduler process.
pub const SCHEDULER: &str = "scheduler";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    /// Pull unclaimed jobs from the scheduler.
    #[serde(default)]
    pub poll: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "Topology::default_lease_secs")]
    pub lease_secs: u64,
    #[serde(default = "Topology::default_heartbeat_ms")]
    pub heartbeat_ms: u64,
    #[serde(default = "Topology::default_poll_ms")]
    pub poll_ms: u64,
    /// Default grace of a notice kill.
    #[serde(default = "Topology::default_grace_ms")]
    pub grace_ms: u64,
    #[serde(default = "Topology::default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "Topology::default_max_jobs")]
    pub max_jobs: usize,
    /// Chunked blob writes, so kills can land mid-upload.
    #[serde(default)]
    pub store_chunk_bytes: Option<usize>,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
}

impl Topology {
    fn default_lease_secs() -> u64 {
        30
    }
    fn default_heartbeat_ms() -> u64 {
        200
    }
    fn default_poll_ms() -> u64 {
        20
    }
    fn default_grace_ms() -> u64 {
        500
    }
    fn default_retry_base_ms() -> u64 {
        50
    }
    fn default_max_jobs() -> usize {
        4
    }

    /// Nodes `A`, `B`, ... with defaults; `polling` lists the ones that pull work.
    pub fn with_nodes(ids: &[&str], polling: &[&str]) -> Self {
        Self {
            lease_secs: Self::default_lease_secs(),
            heartbeat_ms: Self::default_heartbeat_ms(),
            poll_ms: Self::default_poll_ms(),
            grace_ms: Self::default_grace_ms(),
            retry_base_ms: Self::default_retry_base_ms(),
            max_jobs: Self::default_max_jobs(),
            store_chunk_bytes: None,
            nodes: ids
                .iter()
                .map(|id| NodeSpec {
                    id: id.to_string(),
                    poll: polling.contains(id),
                })
                .collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let t: Self = toml::from_str(text).map_err(|e| bad(format!("topology: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes.is_empty() {
            return Err(bad("topology has no nodes"));
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            valid_node_id(&n.id)?;
            if !seen.insert(n.id.as_str()) {
                return Err(bad(format!("node {:?} listed twice", n.id)));
            }
        }
        if self.max_jobs == 0 {
            return Err(bad("max_jobs must be at least 1"));
        }
        if self.store_chunk_bytes == Some(0) {
            return Err(bad("store_chunk_bytes must be positive"));
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

fn valid_node_id(id: &str) -> Result<(), ConfigError> {
    let ok = !id.is_empty()
        && id != SCHEDULER
        && id != "harness"
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(bad(format!("bad node id {id:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub id: String,
    #[serde(default = "JobSpec::default_app")]
    pub app: String,
    /// Granule seed; the scenario seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "JobSpec::default_fine")]
    pub fine: usize,
    #[serde(default = "JobSpec::default_coarse")]
    pub coarse: usize,
    #[serde(default = "JobSpec::default_radius")]
    pub radius: f64,
    /// Where the hop variant reads and writes.
    #[serde(default)]
    pub data_node: Option<String>,
    /// Start the job on this node instead of leaving it to pollers.
    #[serde(default)]
    pub start_on: Option<String>,
}

impl JobSpec {
    fn default_app() -> String {
        colocation::PUBLISH_APP.to_string()
    }
    fn default_fine() -> usize {
        100
    }
    fn default_coarse() -> usize {
        20
    }
    fn default_radius() -> f64 {
        DEFAULT_RADIUS
    }

    pub fn new(id: &str, app: &str) -> Self {
        Self {
            id: id.to_string(),
            app: app.to_string(),
            seed: None,
            fine: Self::default_fine(),
            coarse: Self::default_coarse(),
            radius: Self::default_radius(),
            data_node: None,
            start_on: None,
        }
    }

    pub fn start_on(mut self, node: &str) -> Self {
        self.start_on = Some(node.to_string());
        self
    }

    pub fn data_node(mut self, node: &str) -> Self {
        self.data_node = Some(node.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillMode {
    /// Hard termination with no cleanup.
    #[default]
    Immediate,
    /// Stop accepting work, then exit once idle or when the grace runs out.
    Notice,
}

/// Selects the `occurrence`-th event with every given field equal. `line`
/// is translated to a stage index through the job's application; `detail`
/// matches as a substring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventMatch {
    pub kind: EventKind,
    #[serde(default)]
    pub job: Option<String>,
    #[serde(default)]
    pub node: Option<String>,
    #[serde(default)]
    pub stage: Option<u32>,
    #[serde(default)]
    pub line: Option<u32>,
    #[serde(default)]
    pub sequence: Option<u64>,
    #[serde(default)]
    pub detail: Option<String>,
    #[serde(default = "EventMatch::first")]
    pub occurrence: u32,
}

impl EventMatch {
    fn first() -> u32 {
        1
    }

    pub fn new(kind: EventKind, job: &str) -> Self {
        Self {
            kind,
            job: Some(job.to_string()),
            node: None,
            stage: None,
            line: None,
            sequence: None,
            detail: None,
            occurrence: 1,
        }
    }

    pub fn line(mut self, line: u32) -> Self {
        self.line = Some(line);
        self
    }

    pub fn stage(mut self, stage: u32) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn sequence(mut self, sequence: u64) -> Self {
        self.sequence = Some(sequence);
        self
    }

    pub fn detail(mut self, detail: &str) -> Self {
        self.detail = Some(detail.to_string());
        self
    }

    pub fn occurrence(mut self, n: u32) -> Self {
        self.occurrence = n;
        self
    }

    /// Whether `ev` matches, given the stage `line` resolved to.
    pub fn matches(&self, ev: &Event, line_stage: Option<u32>) -> bool {
        let stage = self.stage.or(line_stage);
        ev.kind == self.kind
            && self.job.as_ref().is_none_or(|j| *j == ev.job)
            && self.node.as_ref().is_none_or(|n| *n == ev.node)
            && stage.is_none_or(|s| ev.stage == Some(s))
            && self.sequence.is_none_or(|s| ev.sequence == Some(s))
            && self.detail.as_ref().is_none_or(|d| ev.detail.contains(d.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KillSpec {
    /// A topology node, [`SCHEDULER`] or [`EMITTER`].
    pub target: String,
    #[serde(default)]
    pub mode: KillMode,
    /// Notice grace; the topology default when absent.
    #[serde(default)]
    pub grace_ms: Option<u64>,
    /// Fire this long after the jobs were started.
    #[serde(default)]
    pub at_ms: Option<u64>,
    /// Fire while the matching event's emitter waits for its acknowledgement.
    #[serde(default)]
    pub on: Option<EventMatch>,
}

impl KillSpec {
    pub fn on_event(target: &str, on: EventMatch) -> Self {
        Self {
            target: target.to_string(),
            mode: KillMode::Immediate,
            grace_ms: None,
            at_ms: None,
            on: Some(on),
        }
    }

    pub fn notice(mut self, grace_ms: u64) -> Self {
        self.mode = KillMode::Notice;
        self.grace_ms = Some(grace_ms);
        self
    }

    pub fn describe(&self) -> String {
        let trigger = match (&self.at_ms, &self.on) {
            (Some(ms), _) => format!("at {ms} ms"),
            (None, Some(m)) => {
                let kind = serde_json::to_value(m.kind).ok();
                let mut s = format!("on {}", kind.as_ref().and_then(|v| v.as_str()).unwrap_or("?"));
                for (k, v) in [
                    ("job", m.job.clone()),
                    ("node", m.node.clone()),
                    ("stage", m.stage.map(|x| x.to_string())),
                    ("line", m.line.map(|x| x.to_string())),
                    ("sequence", m.sequence.map(|x| x.to_string())),
                    ("detail", m.detail.clone()),
                ] {
                    if let Some(v) = v {
                        s.push_str(&format!(" {k}={v}"));
                    }
                }
                if m.occurrence != 1 {
                    s.push_str(&format!(" #{}", m.occurrence));
                }
                s
            }
            (None, None) => "never".into(),
        };
        let mode = match self.mode {
            KillMode::Immediate => "immediate",
            KillMode::Notice => "notice",
        };
        format!("{} {mode} {trigger}", self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "Scenario::default_seed")]
    pub seed: u64,
    #[serde(default = "Scenario::default_timeout_ms")]
    pub timeout_ms: u64,
    /// Bring up a fresh polling node after every agent kill.
    #[serde(default = "Scenario::default_replace")]
    pub replace_killed: bool,
    #[serde(rename = "job")]
    pub jobs: Vec<JobSpec>,
    #[serde(default, rename = "kill")]
    pub kills: Vec<KillSpec>,
}

impl Scenario {
    fn default_seed() -> u64 {
        7
    }
    fn default_timeout_ms() -> u64 {
        60_000
    }
    fn default_replace() -> bool {
        true
    }

    pub fn new(name: &str, jobs: Vec<JobSpec>) -> Self {
        Self {
            name: name.to_string(),
            seed: Self::default_seed(),
            timeout_ms: Self::default_timeout_ms(),
            replace_killed: true,
            jobs,
            kills: Vec::new(),
        }
    }

    pub fn kill(mut self, k: KillSpec) -> Self {
        self.kills.push(k);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn job(&self, id: &str) -> Option<&JobSpec> {
        self.jobs.iter().find(|j| j.id == id)
    }

    pub fn seed_of(&self, job: &JobSpec) -> u64 {
        job.seed.unwrap_or(self.seed)
    }

    /// Stage index each kill's `line` refers to, after checking the whole
    /// scenario against `topo`.
    pub fn validate(&self, topo: &Topology) -> Result<Vec<Option<u32>>, ConfigError> {
        let apps = colocation::all_apps();
        if self.jobs.is_empty() {
            return Err(bad("scenario has no jobs"));
        }
        let mut ids = BTreeSet::new();
        for j in &self.jobs {
            if j.id.is_empty() || j.id.contains(',') || !ids.insert(j.id.as_str()) {
                return Err(bad(format!("bad or duplicate job id {:?}", j.id)));
            }
            if apps.get(&j.app).is_none() {
                return Err(bad(format!("job {}: unknown application {:?}", j.id, j.app)));
            }
            if j.fine == 0 || j.coarse == 0 || j.radius.is_nan() || j.radius <= 0.0 {
                return Err(bad(format!("job {}: empty granules or bad radius", j.id)));
            }
            if let Some(n) = &j.start_on {
                topo.node(n).ok_or_else(|| bad(format!("job {}: start_on names unknown node {n:?}", j.id)))?;
            }
            if j.app == colocation::HOP_APP {
                let n = j
                    .data_node
                    .as_ref()
                    .ok_or_else(|| bad(format!("job {}: the hop variant needs data_node", j.id)))?;
                topo.node(n).ok_or_else(|| bad(format!("job {}: data_node names unknown node {n:?}", j.id)))?;
            }
        }
        if self.jobs.iter().any(|j| j.start_on.is_none()) && !topo.nodes.iter().any(|n| n.poll) {
            return Err(bad("jobs without start_on need a polling node"));
        }
        let mut lines = Vec::new();
        for (i, k) in self.kills.iter().enumerate() {
            let what = format!("kill {}", i + 1);
            match (&k.at_ms, &k.on) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => return Err(bad(format!("{what}: give exactly one of at_ms and on"))),
            }
            if k.target == EMITTER {
                if k.on.is_none() {
                    return Err(bad(format!("{what}: {EMITTER} needs an event trigger")));
                }
            } else if k.target != SCHEDULER && topo.node(&k.target).is_none() {
                return Err(bad(format!("{what}: unknown target {:?}", k.target)));
            }
            if k.target == SCHEDULER && k.mode == KillMode::Notice {
                return Err(bad(format!("{what}: the scheduler only takes immediate kills")));
            }
            let mut line_stage = None;
            if let Some(m) = &k.on {
                if m.occurrence == 0 {
                    return Err(bad(format!("{what}: occurrence starts at 1")));
                }
                if let Some(line) = m.line {
                    if m.stage.is_some() {
                        return Err(bad(format!("{what}: give stage or line, not both")));
                    }
                    let job = m
                        .job
                        .as_ref()
                        .and_then(|j| self.job(j))
                        .ok_or_else(|| bad(format!("{what}: a line trigger needs a known job")))?;
                    let machine = apps.get(&job.app).expect("checked above");
                    line_stage = Some(
                        machine
                            .stage_for_line(line)
                            .ok_or_else(|| bad(format!("{what}: {} has no line {line}", job.app)))?,
                    );
                }
            }
            lines.push(line_stage);
        }
        Ok(lines)
    }
}
