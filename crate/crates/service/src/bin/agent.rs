use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use navhop_core::colocation;
use navhop_core::runtime::RetryPolicy;
use navhop_service::agent::{self, AgentConfig};
use navhop_service::net;

/// Node agent: runs migrating jobs and accepts hop handoffs.
#[derive(Parser)]
#[command(name = "agent", version)]
struct Args {
    #[arg(long, env = "NAVHOP_NODE_ID")]
    node_id: String,
    /// Address to serve on; port 0 picks a free port, printed on stdout.
    #[arg(long, env = "NAVHOP_LISTEN", default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long, env = "NAVHOP_STORE_ROOT")]
    store_root: PathBuf,
    #[arg(long, env = "NAVHOP_SCHEDULER")]
    scheduler: String,
    /// Comma-separated applications to register.
    #[arg(long, env = "NAVHOP_APPS", value_delimiter = ',',
          default_values_t = [colocation::PUBLISH_APP.to_string(), colocation::HOP_APP.to_string(), colocation::SEQUENTIAL_APP.to_string()])]
    apps: Vec<String>,
    #[arg(long, env = "NAVHOP_MAX_JOBS", default_value_t = 4)]
    max_jobs: usize,
    /// Harness event socket; every event waits for its acknowledgement.
    #[arg(long, env = "NAVHOP_EVENTS")]
    events: Option<String>,
    /// Pull work from the scheduler at this interval.
    #[arg(long, env = "NAVHOP_POLL_MS")]
    poll_ms: Option<u64>,
    #[arg(long, env = "NAVHOP_HEARTBEAT_MS", default_value_t = 1000)]
    heartbeat_ms: u64,
    /// Write blobs in chunks of this size, reporting progress after each.
    #[arg(long, env = "NAVHOP_STORE_CHUNK_BYTES")]
    store_chunk_bytes: Option<usize>,
    /// Default grace period of a notice kill.
    #[arg(long, env = "NAVHOP_GRACE_MS", default_value_t = 500)]
    grace_ms: u64,
    #[arg(long, env = "NAVHOP_RETRY_BASE_MS", default_value_t = 100)]
    retry_base_ms: u64,
}

#[tokio::main]
async fn main() -> ExitCode {
    net::init_logging();
    let a = Args::parse();
    let cfg = AgentConfig {
        node_id: a.node_id,
        store_root: a.store_root,
        scheduler: a.scheduler,
        apps: a.apps,
        max_jobs: a.max_jobs,
        events: a.events,
        poll: a.poll_ms.map(Duration::from_millis),
        heartbeat: Duration::from_millis(a.heartbeat_ms),
        store_chunk: a.store_chunk_bytes,
        grace: Duration::from_millis(a.grace_ms),
        retry: RetryPolicy {
            retries: 3,
            base: Duration::from_millis(a.retry_base_ms),
        },
    };
    let listener = match tokio::net::TcpListener::bind(&a.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("agent: bind {}: {e}", a.listen);
            return ExitCode::FAILURE;
        }
    };
    match agent::run(listener, cfg).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agent: {e}");
            ExitCode::FAILURE
        }
    }
}
