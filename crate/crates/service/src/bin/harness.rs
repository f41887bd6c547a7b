use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use navhop_service::harness::{self, Binaries, RunOutcome, Scenario, Topology};
use navhop_service::net;

/// Runs jobs on a local cluster of agent processes and injects preemptions.
#[derive(Parser)]
#[command(name = "harness", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario, write its report, and verify it against a fault-free run.
    Run {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
        /// Keep the store, journal and process logs here instead of a temporary directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Agent executable; defaults to the one next to this program.
        #[arg(long, env = "NAVHOP_AGENT_BIN")]
        agent_bin: Option<PathBuf>,
        /// Scheduler executable; defaults to the one next to this program.
        #[arg(long, env = "NAVHOP_SCHEDULER_BIN")]
        scheduler_bin: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool, String> {
    let Cmd::Run {
        topology,
        scenario,
        report,
        work_dir,
        agent_bin,
        scheduler_bin,
    } = cli.cmd;
    let topo = Topology::load(&topology).map_err(|e| e.to_string())?;
    let sc = Scenario::load(&scenario).map_err(|e| e.to_string())?;
    let mut bins = Binaries::beside_current_exe().map_err(|e| e.to_string())?;
    if let Some(p) = agent_bin {
        bins.agent = p;
    }
    if let Some(p) = scheduler_bin {
        bins.scheduler = p;
    }
    let baselines = harness::baselines(&sc.jobs, |j| sc.seed_of(j))?;
    let result = match &work_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            harness::run_scenario_in(&topo, &sc, &bins, dir)
        }
        None => harness::run_scenario(&topo, &sc, &bins),
    };
    let rep = result.map_err(|e| e.to_string())?;
    std::fs::write(&report, rep.to_json()).map_err(|e| format!("{}: {e}", report.display()))?;

    let violations = harness::replay_verify(&rep, &baselines);
    let outcome = match rep.outcome {
        RunOutcome::AllFinished => "all jobs finished",
        RunOutcome::DeadlineExceeded => "deadline exceeded",
    };
    println!(
        "{}: {outcome} in {} ms, {} kill(s), recompute ratio {:.3}",
        if sc.name.is_empty() { "scenario" } else { &sc.name },
        rep.wall_ms,
        rep.kills.len(),
        rep.recompute_ratio
    );
    for (id, j) in &rep.jobs {
        println!(
            "  job {id} ({}): {}, attempts {:?}, {} image(s), {} checkpoint bytes",
            j.app, j.status, j.stage_attempts, j.cmis, j.ckpt_bytes
        );
    }
    for k in &rep.kills {
        println!(
            "  kill {} ({}): exit {:?}, replaced by {:?}",
            k.target, k.trigger, k.exit_code, k.replacement
        );
    }
    for v in &violations {
        println!("  violation: {v}");
    }
    println!("verify: {}", if violations.is_empty() { "pass" } else { "FAIL" });
    Ok(violations.is_empty())
}

fn main() -> ExitCode {
    net::init_logging();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("harness: {e}");
            ExitCode::from(2)
        }
    }
}
