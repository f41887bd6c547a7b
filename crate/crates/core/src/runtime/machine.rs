use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::events::{Emitter, Event, EventKind, Halted};
use crate::state::TaskState;
use crate::store::BlobStore;

/// What the runtime does after a stage body returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Continue,
    /// Checkpoint, hand off to the named node and stop locally.
    Hop(String),
    Publish(PublishStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishStatus {
    Ckpt,
    Finished,
}

impl PublishStatus {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ckpt" => Some(PublishStatus::Ckpt),
            "finished" => Some(PublishStatus::Finished),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PublishStatus::Ckpt => "ckpt",
            PublishStatus::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StageError {
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Halted(#[from] Halted),
}

impl StageError {
    pub fn failed(msg: impl fmt::Display) -> Self {
        StageError::Failed(msg.to_string())
    }
}

/// Everything a stage body may touch: its task state, the shared store for
/// declared inputs, and the node it happens to run on.
pub struct StageCtx<'a> {
    pub state: &'a mut TaskState,
    pub store: &'a dyn BlobStore,
    pub node_id: &'a str,
    pub stage: u32,
    pub(crate) emitter: &'a Emitter,
}

impl StageCtx<'_> {
    /// Instrumentation point inside a stage body.
    pub fn mark(&self, label: &str) -> Result<(), Halted> {
        self.emitter.emit(
            Event::new(EventKind::StageMid, self.state.job_id.clone())
                .stage(self.stage)
                .detail(label),
        )
    }
}

pub type StepFn = Arc<dyn Fn(&mut StageCtx<'_>) -> Result<Directive, StageError> + Send + Sync>;

#[derive(Clone)]
pub struct Stage {
    pub label: String,
    /// Line of the source program this stage corresponds to, when meaningful.
    pub line: Option<u32>,
    pub step: StepFn,
}

impl fmt::Debug for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stage")
            .field("label", &self.label)
            .field("line", &self.line)
            .finish_non_exhaustive()
    }
}

/// An application as an ordered list of stages. Stage boundaries are the only
/// points where the task may checkpoint, hop or publish.
#[derive(Debug, Clone)]
pub struct StageMachine {
    pub app_name: String,
    pub stages: Vec<Stage>,
    /// Publish the products in `vars["products"]` as finished when the last
    /// stage returns without having published them explicitly.
    pub auto_finish: bool,
}

impl StageMachine {
    pub fn new(app_name: impl Into<String>) -> Self {
        Self {
            app_name: app_name.into(),
            stages: Vec::new(),
            auto_finish: false,
        }
    }

    pub fn stage<F>(mut self, label: &str, step: F) -> Self
    where
        F: Fn(&mut StageCtx<'_>) -> Result<Directive, StageError> + Send + Sync + 'static,
    {
        self.stages.push(Stage {
            label: label.to_string(),
            line: None,
            step: Arc::new(step),
        });
        self
    }

    pub fn stage_at_line<F>(mut self, line: u32, label: &str, step: F) -> Self
    where
        F: Fn(&mut StageCtx<'_>) -> Result<Directive, StageError> + Send + Sync + 'static,
    {
        self = self.stage(label, step);
        self.stages.last_mut().expect("just pushed").line = Some(line);
        self
    }

    pub fn auto_finish(mut self, on: bool) -> Self {
        self.auto_finish = on;
        self
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Stage index for a source line, if some stage carries it.
    pub fn stage_for_line(&self, line: u32) -> Option<u32> {
        self.stages
            .iter()
            .position(|s| s.line == Some(line))
            .map(|i| i as u32)
    }
}

/// Stage machines by application name. Every node registers the same set at
/// startup so a checkpoint taken on one node can resume on any other.
#[derive(Debug, Clone, Default)]
pub struct AppRegistry {
    apps: BTreeMap<String, Arc<StageMachine>>,
}

impl AppRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, machine: StageMachine) -> &mut Self {
        self.apps.insert(machine.app_name.clone(), Arc::new(machine));
        self
    }

    pub fn get(&self, app_name: &str) -> Option<Arc<StageMachine>> {
        self.apps.get(app_name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.apps.keys().map(String::as_str)
    }
}
