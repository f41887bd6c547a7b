//! Run reports and the log checker.
//!
//! Everything in a [`RunReport`] except the product bytes is derived from
//! the merged event log, so [`replay_verify`] can be run on a report read
//! back from disk.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use navhop_core::cmi::{hex_digest, sha256};
use navhop_core::colocation::{self, JobParams, PRODUCT_NAME};
use navhop_core::events::{Event, EventKind};
use navhop_core::layout;
use navhop_core::runtime::{AppRegistry, TaskOutcome};
use navhop_core::sim::SimCluster;
use navhop_core::store::{BlobStore, MemStore};
use serde::{Deserialize, Serialize};

use super::config::{JobSpec, KillMode};

/// Node name the harness stamps its own events with.
pub const HARNESS_NODE: &str = "harness";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    /// Position in the merged stream.
    pub arrival: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillRecord {
    pub target: String,
    pub mode: KillMode,
    pub trigger: String,
    pub fired_ms: u64,
    /// When the process was seen gone; `None` if it outlived the run.
    pub exited_ms: Option<u64>,
    pub exit_code: Option<i32>,
    pub replacement: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub app: String,
    pub status: String,
    /// Stage starts seen in the log, by stage index.
    pub stage_attempts: Vec<u32>,
    /// The same counts keyed by source line, for applications that have them.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub line_attempts: BTreeMap<u32, u32>,
    pub cmis: u32,
    pub ckpt_bytes: u64,
    /// Bytes of each image written, in order.
    pub cmi_sizes: Vec<u64>,
    pub wall_ms: u64,
    pub product_len: Option<u64>,
    pub product_sha256: Option<String>,
    /// Raw product, kept in memory only.
    #[serde(skip)]
    pub product: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    AllFinished,
    DeadlineExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub outcome: RunOutcome,
    pub wall_ms: u64,
    pub jobs: BTreeMap<String, JobReport>,
    pub kills: Vec<KillRecord>,
    /// Re-executed stage starts over distinct stages started.
    pub recompute_ratio: f64,
    /// Events from processes already dead when they were read; never acknowledged.
    pub discarded_events: u64,
    pub events: Vec<LoggedEvent>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Rebuilds the per-job counters from the log. `statuses` and `products`
    /// come from the scheduler and the store.
    #[allow(clippy::too_many_arguments)]
    pub fn summarize(
        scenario: &str,
        outcome: RunOutcome,
        wall_ms: u64,
        jobs: &[JobSpec],
        statuses: &BTreeMap<String, String>,
        mut products: BTreeMap<String, Vec<u8>>,
        kills: Vec<KillRecord>,
        discarded_events: u64,
        events: Vec<LoggedEvent>,
    ) -> Self {
        let apps = colocation::all_apps();
        let mut out = BTreeMap::new();
        let (mut total, mut distinct) = (0u64, 0u64);
        for spec in jobs {
            let machine = apps.get(&spec.app);
            let n = machine.as_ref().map_or(0, |m| m.len());
            let mut attempts = vec![0u32; n];
            let mut cmi_sizes = Vec::new();
            let (mut first, mut last) = (None, 0);
            for le in events.iter().filter(|le| le.event.job == spec.id) {
                first.get_or_insert(le.at_ms);
                last = le.at_ms;
                match le.event.kind {
                    EventKind::StageStart => {
                        if let Some(a) = le.event.stage.and_then(|s| attempts.get_mut(s as usize)) {
                            *a += 1;
                        }
                    }
                    EventKind::CmiWritten => cmi_sizes.push(le.event.bytes.unwrap_or(0)),
                    _ => {}
                }
            }
            total += attempts.iter().map(|&a| a as u64).sum::<u64>();
            distinct += attempts.iter().filter(|&&a| a > 0).count() as u64;
            let line_attempts = machine
                .map(|m| {
                    m.stages
                        .iter()
                        .zip(&attempts)
                        .filter_map(|(s, &a)| s.line.map(|l| (l, a)))
                        .collect()
                })
                .unwrap_or_default();
            let product = products.remove(&spec.id);
            out.insert(
                spec.id.clone(),
                JobReport {
                    app: spec.app.clone(),
                    status: statuses.get(&spec.id).cloned().unwrap_or_else(|| "unknown".into()),
                    stage_attempts: attempts,
                    line_attempts,
                    cmis: cmi_sizes.len() as u32,
                    ckpt_bytes: cmi_sizes.iter().sum(),
                    cmi_sizes,
                    wall_ms: first.map_or(0, |f| last - f),
                    product_len: product.as_ref().map(|p| p.len() as u64),
                    product_sha256: product.as_ref().map(|p| hex_digest(&sha256(p))),
                    product,
                },
            );
        }
        let recompute_ratio = if distinct == 0 {
            0.0
        } else {
            (total - distinct) as f64 / distinct as f64
        };
        Self {
            scenario: scenario.to_string(),
            outcome,
            wall_ms,
            jobs: out,
            kills,
            recompute_ratio,
            discarded_events,
            events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DeadlineExceeded,
    NotFinished { job: String, status: String },
    ProductMismatch { job: String },
    MissingProduct { job: String },
    NoBaseline { job: String },
    /// A stage ran a different number of times than kills and failures explain.
    Attempts { job: String, stage: u32, expected: u32, actual: u32 },
    /// Two nodes executed the job at once.
    ConcurrentExecutors { job: String, running: String, started: String },
    /// A node that does not hold the job emitted for it, e.g. after handing it off.
    ForeignEvent { job: String, node: String, arrival: u64 },
    SequenceRegression { job: String, previous: u64, promoted: u64 },
    /// A resume from anything but the latest promoted checkpoint.
    StaleResume { job: String, sequence: Option<u64>, expected: Option<u64> },
    /// A fresh start although a checkpoint had been promoted.
    IgnoredCheckpoint { job: String, sequence: u64 },
    DigestRejected { job: String, node: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string(self).map_err(|_| fmt::Error)?)
    }
}

/// Per-job state while walking the log.
#[derive(Default)]
struct Track {
    executor: Option<String>,
    /// (source, destination) of a requested hop not yet resolved.
    pending_hop: Option<(String, String)>,
    /// A source whose destination already resumed; only its ack may follow.
    draining: Option<String>,
    /// Last image uploaded, as (sequence, stage); committed by the manifest rename.
    written: Option<(u64, u32)>,
    promoted: Option<(u64, u32)>,
    /// The promotion came from a rename whose event has not arrived yet.
    unconfirmed: bool,
    last_started: Option<u32>,
    finished: bool,
}

fn is_manifest_rename(job: &str, detail: &str) -> bool {
    detail
        .strip_prefix("renamed:")
        .is_some_and(|k| layout::manifest_key(job).is_ok_and(|m| m.to_string() == k))
}

fn promote(t: &mut Track, p: (u64, u32), job: &str, out: &mut Vec<Violation>) {
    if let Some((previous, _)) = t.promoted {
        if p.0 <= previous {
            out.push(Violation::SequenceRegression {
                job: job.to_string(),
                previous,
                promoted: p.0,
            });
        }
    }
    t.promoted = Some(p);
}

/// Checks a report against the fault-free products. Returns every violation
/// found; an empty list means the run is correct.
pub fn replay_verify(report: &RunReport, baselines: &BTreeMap<String, Vec<u8>>) -> Vec<Violation> {
    let mut out = Vec::new();
    if report.outcome == RunOutcome::DeadlineExceeded {
        out.push(Violation::DeadlineExceeded);
    }
    let apps = colocation::all_apps();
    let mut expected: BTreeMap<&str, Vec<u32>> = report
        .jobs
        .iter()
        .map(|(id, j)| (id.as_str(), vec![1; apps.get(&j.app).map_or(0, |m| m.len())]))
        .collect();
    let mut tracks: BTreeMap<String, Track> = BTreeMap::new();
    // replaced node -> replacement, so hops to a node's old name resolve
    let mut successor: BTreeMap<String, String> = BTreeMap::new();
    let resolve = |successor: &BTreeMap<String, String>, mut n: String| {
        while let Some(next) = successor.get(&n) {
            n = next.clone();
        }
        n
    };

    // the stages a node leaving the job forces to run again
    let rerun = |t: &mut Track, exp: Option<&mut Vec<u32>>| {
        if t.finished {
            return;
        }
        let from = t.promoted.map_or(0, |(_, stage)| stage);
        if let (Some(last), Some(exp)) = (t.last_started, exp) {
            for s in from..=last {
                if let Some(e) = exp.get_mut(s as usize) {
                    *e += 1;
                }
            }
        }
    };

    for le in &report.events {
        let ev = &le.event;
        if ev.node == HARNESS_NODE {
            match ev.kind {
                EventKind::Killed => {
                    for (job, t) in tracks.iter_mut() {
                        let holds = t.executor.as_deref() == Some(ev.detail.as_str());
                        if holds {
                            rerun(t, expected.get_mut(job.as_str()));
                            t.executor = None;
                            t.pending_hop = None;
                        }
                        if t.draining.as_deref() == Some(ev.detail.as_str()) {
                            t.draining = None;
                        }
                    }
                }
                EventKind::Replaced => {
                    if let Some((old, new)) = ev.detail.split_once('>') {
                        successor.insert(old.to_string(), new.to_string());
                    }
                }
                _ => {}
            }
            continue;
        }
        let t = tracks.entry(ev.job.clone()).or_default();
        let node = ev.node.clone();
        match ev.kind {
            EventKind::Started | EventKind::Resumed => {
                if let Some(running) = t.executor.clone().filter(|r| *r != node) {
                    let handed = t
                        .pending_hop
                        .as_ref()
                        .is_some_and(|(src, dst)| *src == running && resolve(&successor, dst.clone()) == node);
                    if handed {
                        t.draining = Some(running);
                    } else {
                        out.push(Violation::ConcurrentExecutors {
                            job: ev.job.clone(),
                            running,
                            started: node.clone(),
                        });
                    }
                }
                t.executor = Some(node);
                t.pending_hop = None;
                t.unconfirmed = false;
                let promoted = t.promoted.map(|(seq, _)| seq);
                if ev.kind == EventKind::Resumed {
                    if ev.sequence != promoted || promoted.is_none() {
                        out.push(Violation::StaleResume {
                            job: ev.job.clone(),
                            sequence: ev.sequence,
                            expected: promoted,
                        });
                    }
                } else if let Some(sequence) = promoted {
                    out.push(Violation::IgnoredCheckpoint {
                        job: ev.job.clone(),
                        sequence,
                    });
                }
            }
            EventKind::HopAcked if t.draining.as_deref() == Some(node.as_str()) => {
                t.draining = None;
            }
            EventKind::DigestRejected => out.push(Violation::DigestRejected {
                job: ev.job.clone(),
                node,
            }),
            _ if t.executor.as_deref() != Some(node.as_str()) => out.push(Violation::ForeignEvent {
                job: ev.job.clone(),
                node,
                arrival: le.arrival,
            }),
            EventKind::StageStart => t.last_started = ev.stage,
            EventKind::CmiWritten => t.written = Some((ev.sequence.unwrap_or(0), ev.stage.unwrap_or(0))),
            // the rename is the commit point; the event after it may never be sent
            EventKind::PutStep if is_manifest_rename(&ev.job, &ev.detail) => {
                if let Some(w) = t.written.take() {
                    promote(t, w, &ev.job, &mut out);
                    t.unconfirmed = true;
                }
            }
            EventKind::ManifestPromoted => {
                let p = (ev.sequence.unwrap_or(0), ev.stage.unwrap_or(0));
                if !(t.unconfirmed && t.promoted == Some(p)) {
                    promote(t, p, &ev.job, &mut out);
                }
                t.unconfirmed = false;
            }
            EventKind::Published if ev.detail == "finished" => t.finished = true,
            EventKind::HopRequested => t.pending_hop = Some((node, ev.detail.clone())),
            EventKind::HopAcked => t.executor = None,
            EventKind::HopRejected => t.pending_hop = None,
            EventKind::TaskFailed => {
                rerun(t, expected.get_mut(ev.job.as_str()));
                t.executor = None;
            }
            _ => {}
        }
    }

    for (id, job) in &report.jobs {
        if job.status != "finished" {
            out.push(Violation::NotFinished {
                job: id.clone(),
                status: job.status.clone(),
            });
        }
        let exp = &expected[id.as_str()];
        for (stage, (&e, &actual)) in exp.iter().zip(&job.stage_attempts).enumerate() {
            if e != actual {
                out.push(Violation::Attempts {
                    job: id.clone(),
                    stage: stage as u32,
                    expected: e,
                    actual,
                });
            }
        }
        let Some(base) = baselines.get(id) else {
            out.push(Violation::NoBaseline { job: id.clone() });
            continue;
        };
        let same = match (&job.product, &job.product_sha256) {
            (Some(bytes), _) => bytes == base,
            (None, Some(digest)) => *digest == hex_digest(&sha256(base)) && job.product_len == Some(base.len() as u64),
            (None, None) => {
                out.push(Violation::MissingProduct { job: id.clone() });
                continue;
            }
        };
        if !same {
            out.push(Violation::ProductMismatch { job: id.clone() });
        }
    }
    out
}

/// The product a kill-free single-node sequential run makes for `job`,
/// computed in this process.
pub fn baseline_product(job: &JobSpec, seed: u64) -> Result<Vec<u8>, String> {
    let store: Arc<dyn BlobStore> = Arc::new(MemStore::new());
    let mut apps = AppRegistry::new();
    apps.register(colocation::build_sequential_variant());
    let cluster = SimCluster::new(store.clone(), apps);
    cluster.add_node("solo");
    let params = JobParams {
        radius: job.radius,
        data_node: None,
    };
    let keys = colocation::stage_inputs(store.as_ref(), &job.id, seed, job.fine, job.coarse, &params)
        .map_err(|e| e.to_string())?;
    cluster
        .registry
        .lock()
        .unwrap()
        .submit(&job.id, colocation::SEQUENTIAL_APP, &keys)
        .map_err(|e| e.to_string())?;
    match cluster.pull("solo").as_deref() {
        Some([(_, TaskOutcome::Completed(_))]) => {}
        other => return Err(format!("baseline run ended with {other:?}")),
    }
    let key = layout::product_key(&job.id, PRODUCT_NAME).map_err(|e| e.to_string())?;
    store.get(&key).map_err(|e| e.to_string())
}

/// Baselines for every job of a scenario.
pub fn baselines(jobs: &[JobSpec], seed_of: impl Fn(&JobSpec) -> u64) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut cache: BTreeMap<(u64, usize, usize, u64), Vec<u8>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for j in jobs {
        let seed = seed_of(j);
        let k = (seed, j.fine, j.coarse, j.radius.to_bits());
        let product = match cache.get(&k) {
            Some(p) => p.clone(),
            None => {
                let p = baseline_product(j, seed)?;
                cache.insert(k, p.clone());
                p
            }
        };
        out.insert(j.id.clone(), product);
    }
    Ok(out)
}

/// Where a job started, resumed, handed off and completed, in log order.
pub fn nodes_running(report: &RunReport, job: &str) -> Vec<(String, EventKind)> {
    let interesting = [EventKind::Started, EventKind::Resumed, EventKind::HopAcked, EventKind::TaskCompleted];
    report
        .events
        .iter()
        .filter(|le| le.event.job == job && interesting.contains(&le.event.kind))
        .map(|le| (le.event.node.clone(), le.event.kind))
        .collect()
}
