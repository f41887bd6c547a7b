//! Preemption harness: runs jobs on a cluster of real agent processes,
//! kills processes at chosen points and checks the recovery from the log.

pub mod config;
pub mod report;
pub mod supervisor;

pub use config::{EventMatch, JobSpec, KillMode, KillSpec, NodeSpec, Scenario, Topology, EMITTER, SCHEDULER};
pub use report::{baseline_product, baselines, replay_verify, JobReport, KillRecord, LoggedEvent, RunOutcome, RunReport, Violation};
pub use supervisor::{run_scenario, run_scenario_in, Binaries, HarnessError};
