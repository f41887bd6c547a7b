//! Instrumentation events.
//!
//! Every process stamps its events with its node id and a per-process
//! sequence number. A sink may refuse to let the emitter proceed
//! ([`Halted`]); the runtime then unwinds immediately without touching the
//! store or the scheduler again, which is how in-process tests model a node
//! dying at an exact point.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::store::{BlobKey, FaultHook, Interrupted, PutStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Fresh run from stage 0.
    Started,
    /// Resumed from a checkpoint image (`sequence`, `stage`).
    Resumed,
    StageStart,
    /// Instrumentation point inside a stage body.
    StageMid,
    StageEnd,
    /// A step of a blob write; `detail` is `<step>:<key>`.
    PutStep,
    /// Checkpoint image uploaded but not yet referenced by the manifest.
    CmiWritten,
    ManifestPromoted,
    /// Scheduler acknowledged a publish; `detail` is the status.
    Published,
    HopRequested,
    HopAcked,
    HopRejected,
    TaskCompleted,
    TaskFailed,
    DigestRejected,
    /// Written by the harness when it terminates a process.
    Killed,
    /// Written by the harness when a replacement node comes up.
    Replaced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub node: String,
    pub seq: u64,
    pub kind: EventKind,
    #[serde(default)]
    pub job: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Event {
    pub fn new(kind: EventKind, job: impl Into<String>) -> Self {
        Self {
            node: String::new(),
            seq: 0,
            kind,
            job: job.into(),
            stage: None,
            sequence: None,
            bytes: None,
            detail: String::new(),
        }
    }

    pub fn stage(mut self, stage: u32) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn sequence(mut self, sequence: u64) -> Self {
        self.sequence = Some(sequence);
        self
    }

    pub fn bytes(mut self, bytes: u64) -> Self {
        self.bytes = Some(bytes);
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("halted at an instrumentation point")]
pub struct Halted;

pub trait EventSink: Send + Sync {
    fn emit(&self, event: Event) -> Result<(), Halted>;
}

pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _event: Event) -> Result<(), Halted> {
        Ok(())
    }
}

type HaltPredicate = Box<dyn Fn(&Event) -> bool + Send + Sync>;

/// Keeps every event in memory. An optional predicate halts the emitter the
/// first time it matches; the matching event is still recorded.
#[derive(Default)]
pub struct RecordingSink {
    events: Mutex<Vec<Event>>,
    halt_when: Mutex<Option<HaltPredicate>>,
}

impl RecordingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn halt_when(&self, pred: impl Fn(&Event) -> bool + Send + Sync + 'static) {
        *self.halt_when.lock().unwrap() = Some(Box::new(pred));
    }

    pub fn clear_halt(&self) {
        *self.halt_when.lock().unwrap() = None;
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }

    pub fn push(&self, event: Event) {
        self.events.lock().unwrap().push(event);
    }
}

impl EventSink for RecordingSink {
    fn emit(&self, event: Event) -> Result<(), Halted> {
        let mut halt = self.halt_when.lock().unwrap();
        let fire = halt.as_ref().is_some_and(|p| p(&event));
        self.events.lock().unwrap().push(event);
        if fire {
            // one-shot
            *halt = None;
            return Err(Halted);
        }
        Ok(())
    }
}

/// Stamps events with a node id and a per-process sequence number.
#[derive(Clone)]
pub struct Emitter {
    node: String,
    next: Arc<AtomicU64>,
    sink: Arc<dyn EventSink>,
}

impl Emitter {
    pub fn new(node: impl Into<String>, sink: Arc<dyn EventSink>) -> Self {
        Self {
            node: node.into(),
            next: Arc::new(AtomicU64::new(1)),
            sink,
        }
    }

    pub fn null(node: impl Into<String>) -> Self {
        Self::new(node, Arc::new(NullSink))
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn emit(&self, mut event: Event) -> Result<(), Halted> {
        event.node = self.node.clone();
        event.seq = self.next.fetch_add(1, Ordering::SeqCst);
        self.sink.emit(event)
    }

    /// Store fault hook reporting the interesting steps of every write as
    /// [`EventKind::PutStep`] events; a halted emit interrupts the write.
    pub fn store_hook(&self) -> FaultHook {
        let emitter = self.clone();
        Arc::new(move |key: &BlobKey, step: PutStep| {
            if matches!(step, PutStep::Begin | PutStep::Done) {
                return Ok(());
            }
            let job = key.namespace().strip_prefix("job-").unwrap_or(key.namespace());
            let ev = Event::new(EventKind::PutStep, job).detail(format!("{}:{}", step.label(), key));
            emitter.emit(ev).map_err(|Halted| Interrupted)
        })
    }
}
