use std::sync::Arc;

use super::*;
use crate::events::EventKind;
use crate::registry::JobStatus;
use crate::sim::SimCluster;
use crate::store::MemStore;

fn bump(ctx: &mut StageCtx<'_>) {
    let n = ctx.state.get("n").and_then(Value::as_int).unwrap_or(0);
    ctx.state.set("n", Value::Int(n + 1));
}

fn counting(name: &str, directives: Vec<Directive>) -> StageMachine {
    let mut m = StageMachine::new(name);
    for (i, d) in directives.into_iter().enumerate() {
        m = m.stage(&format!("s{i}"), move |ctx| {
            bump(ctx);
            Ok(d.clone())
        });
    }
    m
}

fn cluster(machines: Vec<StageMachine>, nodes: &[&str]) -> Arc<SimCluster> {
    let mut apps = AppRegistry::new();
    for m in machines {
        apps.register(m);
    }
    let c = SimCluster::new(Arc::new(MemStore::new()), apps);
    for n in nodes {
        c.add_node(n);
    }
    c
}

fn starts(c: &SimCluster, job: &str) -> Vec<(String, u32)> {
    c.sink
        .events()
        .into_iter()
        .filter(|e| e.kind == EventKind::StageStart && e.job == job)
        .map(|e| (e.node, e.stage.unwrap()))
        .collect()
}

#[test]
fn straight_run_completes_every_stage() {
    let c = cluster(vec![counting("three", vec![Directive::Continue; 3])], &["A"]);
    let m = c.apps.get("three").unwrap();
    let out = run_task(&m, TaskState::fresh("1", "three"), &c.env("A"));
    let TaskOutcome::Completed(state) = out else { panic!("{out:?}") };
    assert_eq!(state.next_stage, 3);
    assert_eq!(state.get("n"), Some(&Value::Int(3)));
}

#[test]
fn hop_stops_locally_and_resumes_remotely() {
    let app = counting("hopper", vec![Directive::Continue, Directive::Hop("B".into()), Directive::Continue]);
    let c = cluster(vec![app], &["A", "B"]);
    c.registry.lock().unwrap().submit("1", "hopper", &[]).unwrap();
    let outcomes = c.pull("A").unwrap();
    assert_eq!(outcomes[0], ("A".into(), TaskOutcome::Migrated { dest: "B".into() }));
    let (node, TaskOutcome::Completed(state)) = &outcomes[1] else { panic!("{outcomes:?}") };
    assert_eq!(node, "B");
    assert_eq!(state.get("n"), Some(&Value::Int(3)));
    assert_eq!(starts(&c, "1"), vec![("A".into(), 0), ("A".into(), 1), ("B".into(), 2)]);
    assert_eq!(c.registry.lock().unwrap().get_job("1").unwrap().claimed_by.as_deref(), Some("B"));
}

#[test]
fn hop_to_self_continues_in_place() {
    let app = counting("selfhop", vec![Directive::Hop("A".into()), Directive::Continue]);
    let c = cluster(vec![app], &["A"]);
    c.registry.lock().unwrap().submit("1", "selfhop", &[]).unwrap();
    let outcomes = c.pull("A").unwrap();
    assert_eq!(outcomes.len(), 1);
    let TaskOutcome::Completed(state) = &outcomes[0].1 else { panic!("{outcomes:?}") };
    assert_eq!(state.get("n"), Some(&Value::Int(2)));
    assert_eq!(state.ckpt_sequence, 0);
    assert_eq!(starts(&c, "1"), vec![("A".to_string(), 0), ("A".to_string(), 1)]);
}

#[test]
fn hop_to_unknown_node_fails_without_running_on() {
    let app = counting("lost", vec![Directive::Hop("Z".into()), Directive::Continue]);
    let c = cluster(vec![app], &["A"]);
    c.registry.lock().unwrap().submit("1", "lost", &[]).unwrap();
    let outcomes = c.pull("A").unwrap();
    let TaskOutcome::Failed { error, .. } = &outcomes[0].1 else { panic!("{outcomes:?}") };
    assert_eq!(error, &RuntimeError::NodeUnreachable("Z".into()));
    assert_eq!(starts(&c, "1").len(), 1);
}

#[test]
fn publish_refuses_unknown_status_before_side_effects() {
    let c = cluster(vec![], &["A"]);
    let mut state = TaskState::fresh("1", "none");
    let err = publish(&mut state, "done", &c.env("A")).unwrap_err();
    assert_eq!(err, RuntimeError::InvalidStatus("done".into()));
    assert!(c.store.list("job-1").unwrap().is_empty());
    assert_eq!(state.ckpt_sequence, 0);
}

#[test]
fn publish_finished_needs_products() {
    let c = cluster(vec![], &["A"]);
    c.registry.lock().unwrap().submit("1", "none", &[]).unwrap();
    let mut state = TaskState::fresh("1", "none");
    assert_eq!(publish(&mut state, "finished", &c.env("A")), Err(RuntimeError::MissingProduct));
    let products = crate::state::VarMap::from([("out.txt".to_string(), Value::Bytes(b"x".to_vec()))]);
    state.set(PRODUCTS_VAR, Value::Map(products));
    publish(&mut state, "finished", &c.env("A")).unwrap();
    assert_eq!(c.registry.lock().unwrap().get_job("1").unwrap().status, JobStatus::Finished);
}

#[test]
fn restart_without_checkpoint() {
    let c = cluster(vec![counting("a", vec![Directive::Continue])], &["A"]);
    c.registry.lock().unwrap().submit("1", "a", &[]).unwrap();
    let TaskOutcome::Failed { error, .. } = restart("1", &c.env("A")) else { panic!() };
    assert_eq!(error, RuntimeError::NoCheckpoint("1".into()));
}

fn ckpt_app() -> StageMachine {
    counting(
        "ck",
        vec![
            Directive::Continue,
            Directive::Publish(PublishStatus::Ckpt),
            Directive::Continue,
            Directive::Continue,
        ],
    )
}

fn kill_at_stage_start(c: &Arc<SimCluster>, stage: u32) {
    c.sink
        .halt_when(move |e| e.kind == EventKind::StageStart && e.stage == Some(stage));
}

#[test]
fn restart_runs_each_stage_before_the_checkpoint_once() {
    let c = cluster(vec![ckpt_app()], &["A", "B"]);
    c.registry.lock().unwrap().submit("1", "ck", &[]).unwrap();
    kill_at_stage_start(&c, 3);
    let outcomes = c.pull("A").unwrap();
    assert_eq!(outcomes, vec![("A".into(), TaskOutcome::Halted)]);
    c.kill("A");
    c.sink.clear_halt();

    let outcomes = c.pull("B").unwrap();
    let TaskOutcome::Completed(state) = &outcomes[0].1 else { panic!("{outcomes:?}") };
    assert_eq!(state.get("n"), Some(&Value::Int(4)));
    let s = starts(&c, "1");
    let count = |stage| s.iter().filter(|(_, st)| *st == stage).count();
    assert_eq!((count(0), count(1), count(2), count(3)), (1, 1, 2, 2));
}

#[test]
fn restart_refuses_corrupt_image_and_leaves_job_alone() {
    let c = cluster(vec![ckpt_app()], &["A", "B"]);
    c.registry.lock().unwrap().submit("1", "ck", &[]).unwrap();
    kill_at_stage_start(&c, 2);
    c.pull("A").unwrap();
    c.kill("A");
    c.sink.clear_halt();

    let key = crate::layout::cmi_key("1", 1).unwrap();
    let mut blob = c.store.get(&key).unwrap();
    let mid = blob.len() / 2;
    blob[mid] ^= 0x40;
    c.store.put_atomic(&key, &blob).unwrap();

    let TaskOutcome::Failed { error, .. } = restart("1", &c.env("B")) else { panic!() };
    assert_eq!(error.kind(), "DigestMismatch");
    assert_eq!(c.registry.lock().unwrap().get_job("1").unwrap().status, JobStatus::Ckpt);
    assert!(c.sink.events().iter().any(|e| e.kind == EventKind::DigestRejected));
    assert!(starts(&c, "1").iter().all(|(n, _)| n == "A"));
}

#[test]
fn only_the_promoted_image_is_kept() {
    let app = counting(
        "two",
        vec![
            Directive::Publish(PublishStatus::Ckpt),
            Directive::Publish(PublishStatus::Ckpt),
            Directive::Continue,
        ],
    );
    let c = cluster(vec![app], &["A"]);
    c.registry.lock().unwrap().submit("1", "two", &[]).unwrap();
    c.pull("A").unwrap();
    let names: Vec<String> = c.store.list("job-1").unwrap().into_iter().map(|m| m.key.name().to_string()).collect();
    assert_eq!(names, vec!["ckpt-0000000002.cmi", "current.manifest"]);
    let rec = c.registry.lock().unwrap().get_job("1").unwrap();
    assert_eq!((rec.status, rec.ckpt_sequence), (JobStatus::Ckpt, 2));
}

#[test]
fn kill_between_image_and_manifest_keeps_old_checkpoint() {
    let app = counting(
        "two",
        vec![
            Directive::Publish(PublishStatus::Ckpt),
            Directive::Publish(PublishStatus::Ckpt),
            Directive::Continue,
        ],
    );
    let c = cluster(vec![app], &["A", "B"]);
    c.registry.lock().unwrap().submit("1", "two", &[]).unwrap();
    c.sink
        .halt_when(|e| e.kind == EventKind::CmiWritten && e.sequence == Some(2));
    c.pull("A").unwrap();
    c.kill("A");
    c.sink.clear_halt();

    let outcomes = c.pull("B").unwrap();
    assert!(matches!(outcomes[0].1, TaskOutcome::Completed(_)));
    let resumed: Vec<_> = c.sink.events().into_iter().filter(|e| e.kind == EventKind::Resumed).collect();
    assert_eq!(resumed[0].sequence, Some(1));
    assert_eq!(resumed[0].stage, Some(1));
    // the orphaned image was never promoted, so its sequence is reused
    assert_eq!(c.registry.lock().unwrap().get_job("1").unwrap().ckpt_sequence, 2);
}

#[test]
fn start_resumes_a_promoted_but_unpublished_checkpoint() {
    let app = counting("one", vec![Directive::Publish(PublishStatus::Ckpt), Directive::Continue]);
    let c = cluster(vec![app], &["A", "B"]);
    c.registry.lock().unwrap().submit("1", "one", &[]).unwrap();
    c.sink.halt_when(|e| e.kind == EventKind::ManifestPromoted);
    c.pull("A").unwrap();
    c.kill("A");
    c.sink.clear_halt();
    assert_eq!(c.registry.lock().unwrap().get_job("1").unwrap().status, JobStatus::New);

    let outcomes = c.pull("B").unwrap();
    assert!(matches!(outcomes[0].1, TaskOutcome::Completed(_)));
    assert_eq!(starts(&c, "1"), vec![("A".into(), 0), ("B".into(), 1)]);
    assert_eq!(c.registry.lock().unwrap().get_job("1").unwrap().ckpt_sequence, 1);
}

#[test]
fn retry_policy_gives_up_after_budget() {
    let mut calls = 0;
    let r: Result<(), &str> = RetryPolicy::immediate(3).run(
        |_| {
            calls += 1;
            Err("down")
        },
        |_| true,
    );
    assert!(r.is_err());
    assert_eq!(calls, 4);
}
