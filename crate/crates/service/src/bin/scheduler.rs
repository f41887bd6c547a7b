use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use navhop_service::net;
use navhop_service::scheduler::{self, Scheduler, SchedulerConfig};

/// Job registry serving list_jobs, get_job and publish_job.
#[derive(Parser)]
#[command(name = "scheduler", version)]
struct Args {
    #[arg(long, env = "NAVHOP_LISTEN", default_value = "127.0.0.1:7000")]
    listen: String,
    /// Append-only transition journal, replayed at startup.
    #[arg(long, env = "NAVHOP_JOURNAL")]
    journal: Option<PathBuf>,
    #[arg(long, env = "NAVHOP_LEASE_SECS", default_value_t = 30)]
    lease_secs: u64,
    /// Shared store to verify published blobs against.
    #[arg(long, env = "NAVHOP_STORE_ROOT")]
    store_root: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    net::init_logging();
    let a = Args::parse();
    let cfg = SchedulerConfig {
        journal: a.journal,
        lease: Duration::from_secs(a.lease_secs),
        store_root: a.store_root,
    };
    let sched = match Scheduler::open(&cfg) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("scheduler: {e}");
            return ExitCode::FAILURE;
        }
    };
    let listener = match tokio::net::TcpListener::bind(&a.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("scheduler: bind {}: {e}", a.listen);
            return ExitCode::FAILURE;
        }
    };
    if let Ok(addr) = listener.local_addr() {
        net::announce(&addr);
    }
    scheduler::serve(listener, sched).await;
    ExitCode::SUCCESS
}
