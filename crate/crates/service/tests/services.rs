//! Scheduler and agent processes driven over the wire.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use navhop_client::{AgentClient, SchedulerClient};
use navhop_core::colocation::{self, JobParams, DEFAULT_RADIUS, PRODUCT_NAME};
use navhop_core::layout;
use navhop_core::registry::JobStatus;
use navhop_core::runtime::{LinkError, SchedulerLink};
use navhop_core::store::{BlobKey, BlobStore, LocalDirStore};
use navhop_service::harness::{baseline_product, JobSpec};

struct Proc {
    child: Child,
    addr: String,
}

impl Proc {
    fn spawn(bin: &str, args: &[&str]) -> Self {
        let mut child = Command::new(bin)
            .args(args)
            .env_remove("NAVHOP_SCHEDULER")
            .env_remove("NAVHOP_STORE_ROOT")
            .env_remove("NAVHOP_EVENTS")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening ").expect("announce line").to_string();
        Self { child, addr }
    }

    fn scheduler(extra: &[&str]) -> Self {
        let mut args = vec!["--listen", "127.0.0.1:0"];
        args.extend_from_slice(extra);
        Self::spawn(env!("CARGO_BIN_EXE_scheduler"), &args)
    }

    fn agent(id: &str, scheduler: &str, store: &Path) -> Self {
        let store = store.to_str().unwrap();
        let args = ["--node-id", id, "--scheduler", scheduler, "--store-root", store, "--heartbeat-ms", "50"];
        Self::spawn(env!("CARGO_BIN_EXE_agent"), &args)
    }

    fn wait_exit(&mut self, within: Duration) -> ExitStatus {
        let end = Instant::now() + within;
        loop {
            if let Some(st) = self.child.try_wait().unwrap() {
                return st;
            }
            assert!(Instant::now() < end, "process still running");
            thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn key(s: &str) -> BlobKey {
    BlobKey::parse(s).unwrap()
}

fn kind<T: std::fmt::Debug>(r: Result<T, LinkError>) -> String {
    r.expect_err("expected an error").kind().to_string()
}

#[test]
fn scheduler_job_lifecycle() {
    let s = Proc::scheduler(&[]);
    let c = SchedulerClient::new(&s.addr);
    assert_eq!(c.list_jobs_raw().unwrap(), "[]");
    assert!(c.next_job("A").unwrap().is_none());

    let input = [key("job-1/input/fine.txt")];
    c.submit("1", colocation::PUBLISH_APP, &input).unwrap();
    assert_eq!(kind(c.submit("1", colocation::PUBLISH_APP, &input)), "AlreadyExists");
    assert_eq!(kind(c.get_job("9")), "NotFound");

    let rec = c.next_job("A").unwrap().unwrap();
    assert_eq!((rec.job_id.as_str(), rec.claimed_by.as_deref()), ("1", Some("A")));
    assert!(c.next_job("B").unwrap().is_none(), "a claimed job is not handed out twice");
    assert_eq!(kind(c.claim("1", "B", None)), "ClaimConflict");

    let manifest = [key("job-1/current.manifest")];
    c.publish_job("1", "ckpt", &manifest, 1).unwrap();
    assert_eq!(kind(c.publish_job("1", "ckpt", &manifest, 1)), "StaleSequence");
    assert_eq!(kind(c.publish_job("1", "bogus", &manifest, 2)), "InvalidStatus");
    let rec = c.get_job("1").unwrap();
    assert_eq!((rec.status, rec.ckpt_sequence), (JobStatus::Ckpt, 1));
    assert_eq!(rec.cmi_manifest_key, Some(manifest[0].clone()));

    // a dead claimant's jobs go back to the pool
    assert_eq!(c.requeue_dead("A").unwrap(), ["1"]);
    assert_eq!(c.next_job("B").unwrap().unwrap().claimed_by.as_deref(), Some("B"));
    c.release("1", "B").unwrap();

    c.publish_job("1", "finished", &[key("job-1/product/match.txt")], 1).unwrap();
    assert_eq!(c.list_jobs_raw().unwrap(), r#"[["1","finished"]]"#);
    assert_eq!(kind(c.publish_job("1", "ckpt", &manifest, 5)), "InvalidTransition");
    assert!(c.next_job("B").unwrap().is_none());
}

#[test]
fn scheduler_node_directory() {
    let s = Proc::scheduler(&[]);
    let c = SchedulerClient::new(&s.addr);
    assert!(c.lookup_node("A").unwrap().is_none());
    c.heartbeat("A", "127.0.0.1:4100").unwrap();
    assert_eq!(c.lookup_node("A").unwrap().unwrap().addr(), "127.0.0.1:4100");
    c.heartbeat("A", "127.0.0.1:4200").unwrap();
    assert_eq!(c.lookup_node("A").unwrap().unwrap().addr(), "127.0.0.1:4200");
}

#[test]
fn scheduler_journal_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.log");
    let journal = journal.to_str().unwrap();
    let before = {
        let s = Proc::scheduler(&["--journal", journal]);
        let c = SchedulerClient::new(&s.addr);
        for id in ["1", "2"] {
            c.submit(id, colocation::PUBLISH_APP, &[key(&format!("job-{id}/input/fine.txt"))]).unwrap();
        }
        c.publish_job("2", "ckpt", &[key("job-2/current.manifest")], 3).unwrap();
        (c.list_jobs_raw().unwrap(), c.get_job("2").unwrap())
    };
    let s = Proc::scheduler(&["--journal", journal]);
    let c = SchedulerClient::new(&s.addr);
    assert_eq!((c.list_jobs_raw().unwrap(), c.get_job("2").unwrap()), before);
    assert_eq!(kind(c.publish_job("2", "ckpt", &[key("job-2/current.manifest")], 3)), "StaleSequence");
}

#[test]
fn scheduler_with_a_store_checks_published_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let s = Proc::scheduler(&["--store-root", dir.path().to_str().unwrap()]);
    let c = SchedulerClient::new(&s.addr);
    c.submit("1", colocation::PUBLISH_APP, &[key("job-1/input/fine.txt")]).unwrap();
    assert_eq!(kind(c.publish_job("1", "ckpt", &[key("job-1/current.manifest")], 1)), "MissingBlob");
}

#[test]
fn unknown_services_are_bad_requests() {
    let s = Proc::scheduler(&[]);
    let c = navhop_client::Client::new(&s.addr);
    let e = c.call(&navhop_client::wire::request("frobnicate")).unwrap_err();
    assert_eq!(e.kind(), "BadRequest");
}

#[test]
fn agent_runs_a_job_to_the_fault_free_product() {
    let store_dir = tempfile::tempdir().unwrap();
    let s = Proc::scheduler(&["--store-root", store_dir.path().to_str().unwrap()]);
    let a = Proc::agent("A", &s.addr, store_dir.path());
    let sched = SchedulerClient::new(&s.addr);
    let agent = AgentClient::new(&a.addr);

    let h = agent.health().unwrap();
    assert_eq!(h.node_id, "A");
    assert!(h.accepting && h.running_jobs.is_empty());
    assert_eq!(kind(agent.start("1", "no-such-app")), "UnknownApp");
    assert_eq!(kind(agent.start("1", colocation::PUBLISH_APP)), "NotFound");

    let store = LocalDirStore::open(store_dir.path()).unwrap();
    let params = JobParams {
        radius: DEFAULT_RADIUS,
        data_node: None,
    };
    let keys = colocation::stage_inputs(&store, "1", 7, 100, 20, &params).unwrap();
    sched.submit("1", colocation::PUBLISH_APP, &keys).unwrap();
    agent.start("1", colocation::PUBLISH_APP).unwrap();

    let end = Instant::now() + Duration::from_secs(20);
    while sched.get_job("1").unwrap().status != JobStatus::Finished {
        assert!(Instant::now() < end, "job did not finish");
        thread::sleep(Duration::from_millis(20));
    }
    let product = store.get(&layout::product_key("1", PRODUCT_NAME).unwrap()).unwrap();
    let want = baseline_product(&JobSpec::new("1", colocation::PUBLISH_APP), 7).unwrap();
    assert_eq!(product, want);
    assert_eq!(sched.get_job("1").unwrap().ckpt_sequence, 2);
}

#[test]
fn agent_kill_modes() {
    let dir = tempfile::tempdir().unwrap();
    let s = Proc::scheduler(&[]);

    let mut a = Proc::agent("A", &s.addr, dir.path());
    AgentClient::new(&a.addr).kill("notice", Some(5_000)).unwrap();
    // idle, so it leaves at once instead of using the grace period
    let st = a.wait_exit(Duration::from_secs(2));
    assert_eq!(st.code(), Some(0));

    let mut b = Proc::agent("B", &s.addr, dir.path());
    assert_eq!(kind(AgentClient::new(&b.addr).kill("gently", None)), "BadRequest");
    AgentClient::new(&b.addr).kill("immediate", None).unwrap();
    assert_eq!(b.wait_exit(Duration::from_secs(2)).code(), Some(137));
}

#[test]
fn documented_exchange_is_byte_exact() {
    use std::io::{Read, Write};
    let s = Proc::scheduler(&[]);
    let mut conn = std::net::TcpStream::connect(&s.addr).unwrap();
    conn.write_all(b"\x00\x00\x00\x19service=get_job\njob_id=1\n").unwrap();
    let mut reply = Vec::new();
    conn.read_to_end(&mut reply).unwrap();
    assert_eq!(reply, b"\x00\x00\x00\x34result=error\nerror=NotFound\nmessage=job 1 not found\n");
}
