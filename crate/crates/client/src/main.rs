use std::process::ExitCode;

use clap::{Parser, Subcommand};
use navhop_client::{AgentClient, SchedulerClient};
use navhop_core::colocation::{self, JobParams, DEFAULT_RADIUS};
use navhop_core::registry::JobRecord;
use navhop_core::runtime::SchedulerLink;
use navhop_core::store::LocalDirStore;
use serde_json::json;

/// Control client for navhop schedulers and agents.
#[derive(Parser)]
#[command(name = "navhop", version)]
struct Cli {
    /// Scheduler address.
    #[arg(long, env = "NAVHOP_SCHEDULER", default_value = "127.0.0.1:7000", global = true)]
    scheduler: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print every job and its status.
    ListJobs,
    /// Show one job, or claim the next unfinished one for --node.
    GetJob {
        job_id: Option<String>,
        #[arg(long, default_value = "navhop-cli")]
        node: String,
    },
    /// Write co-location inputs into the store and register the job.
    Submit {
        #[arg(long)]
        job: String,
        #[arg(long, default_value = colocation::PUBLISH_APP)]
        app: String,
        #[arg(long, env = "NAVHOP_STORE_ROOT")]
        store_root: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        fine: usize,
        #[arg(long, default_value_t = 20)]
        coarse: usize,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        /// Node the hop variant reads and writes on.
        #[arg(long)]
        data_node: Option<String>,
    },
    /// Ask an agent to start a job.
    Start {
        #[arg(long)]
        agent: String,
        #[arg(long)]
        job: String,
        #[arg(long, default_value = colocation::PUBLISH_APP)]
        app: String,
    },
    /// Query an agent's health.
    Health {
        #[arg(long)]
        agent: String,
    },
    /// Terminate an agent.
    Kill {
        #[arg(long)]
        agent: String,
        #[arg(long, default_value = "immediate")]
        mode: String,
        #[arg(long)]
        grace_ms: Option<u64>,
    },
}

fn record_json(r: &JobRecord) -> serde_json::Value {
    json!({
        "job_id": r.job_id,
        "status": r.status.as_str(),
        "app_name": r.app_name,
        "input_keys": r.input_keys.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "cmi_manifest_key": r.cmi_manifest_key.as_ref().map(ToString::to_string),
        "product_keys": r.product_keys.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "ckpt_sequence": r.ckpt_sequence,
        "claimed_by": r.claimed_by,
        "updated_at": r.updated_at,
    })
}

fn run(cli: Cli) -> Result<(), String> {
    let sched = SchedulerClient::new(&cli.scheduler);
    let err = |e: navhop_core::runtime::LinkError| e.to_string();
    match cli.cmd {
        Cmd::ListJobs => println!("{}", sched.list_jobs_raw().map_err(err)?),
        Cmd::GetJob { job_id: Some(id), .. } => println!("{}", record_json(&sched.get_job(&id).map_err(err)?)),
        Cmd::GetJob { job_id: None, node } => match sched.next_job(&node).map_err(err)? {
            Some(r) => println!("{}", record_json(&r)),
            None => println!("null"),
        },
        Cmd::Submit {
            job,
            app,
            store_root,
            seed,
            fine,
            coarse,
            radius,
            data_node,
        } => {
            let store = LocalDirStore::open(&store_root).map_err(|e| e.to_string())?;
            let params = JobParams { radius, data_node };
            let keys = colocation::stage_inputs(&store, &job, seed, fine, coarse, &params).map_err(|e| e.to_string())?;
            println!("{}", record_json(&sched.submit(&job, &app, &keys).map_err(err)?));
        }
        Cmd::Start { agent, job, app } => {
            AgentClient::new(agent).start(&job, &app).map_err(err)?;
            println!("started {job}");
        }
        Cmd::Health { agent } => {
            let h = AgentClient::new(agent).health().map_err(err)?;
            println!(
                "{}",
                json!({"node_id": h.node_id, "running_jobs": h.running_jobs, "uptime_ms": h.uptime_ms, "accepting": h.accepting})
            );
        }
        Cmd::Kill { agent, mode, grace_ms } => AgentClient::new(agent).kill(&mode, grace_ms).map_err(err)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("navhop: {e}");
            ExitCode::FAILURE
        }
    }
}
