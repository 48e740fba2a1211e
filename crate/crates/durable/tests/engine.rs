use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chunkwise_durable::*;
use proptest::prelude::*;

fn virtual_engine(queues: &[&str]) -> Engine {
    Engine::with_clock(EngineConfig::new(queues.iter().copied()), Arc::new(VirtualClock::new())).unwrap()
}

fn json<T: serde::Serialize>(v: T) -> Payload {
    Payload::json(&v).unwrap()
}

fn fast_heartbeat(cfg: WorkerConfig) -> WorkerConfig {
    cfg.heartbeat(Duration::from_millis(10), Duration::from_millis(150))
}

fn wait_until(what: &str, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(20);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(5));
    }
}

/// Registers `echo` (workflow) and `upper` (activity), plus a workflow `call`
/// that runs the activity named in its input and reports how it went.
fn register_basics(engine: &Engine, queue: &'static str, policy: RetryPolicy) {
    engine.register_workflow("echo", |_, input| Ok(WorkflowOutcome::Complete(input)));
    engine.register_activity("upper", |_, input| {
        let s: String = input.decode().map_err(|e| ActivityError::non_retryable("decode", e.to_string()))?;
        Ok(json(s.to_uppercase()))
    });
    engine.register_workflow("call", move |ctx, input| {
        let (activity, arg): (String, String) = input.decode()?;
        let opts = ActivityOptions::on(queue).retry(policy.clone());
        let out = match ctx.execute_activity(&activity, json(arg), &opts) {
            Ok(p) => format!("ok:{}", p.decode::<String>()?),
            Err(f) => format!("failed:{:?}:{}", f.reason, f.attempts),
        };
        Ok(WorkflowOutcome::Complete(json(out)))
    });
}

fn call(engine: &Engine, queue: &str, activity: &str, arg: &str) -> (String, WorkflowHistory) {
    let id = engine.start_workflow("call", json((activity, arg)), queue).unwrap();
    let out: String = engine.wait_result(&id).unwrap().decode().unwrap();
    let h = engine.history(&id, None).unwrap();
    h.check().unwrap();
    (out, h)
}

#[test]
fn echo_workflow_returns_its_input() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default());
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("echo")).unwrap();
    let out = engine.execute_workflow("echo", json("hello"), "main").unwrap();
    assert_eq!(out.decode::<String>().unwrap(), "hello");
    let id = engine.workflow_ids().pop().unwrap();
    let h = engine.history(&id, None).unwrap();
    assert_eq!(h.kinds(), vec![EventKind::WorkflowStarted, EventKind::WorkflowCompleted]);
    assert_eq!(engine.status(&id).unwrap(), WorkflowStatus::Completed);
    engine.shutdown();
}

#[test]
fn start_returns_before_any_execution() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default());
    let id = engine.start_workflow("echo", json(1), "main").unwrap();
    assert_eq!(engine.status(&id).unwrap(), WorkflowStatus::Running);
    assert_eq!(engine.pending_tasks("main"), 1);
    assert_eq!(engine.history(&id, None).unwrap().kinds(), vec![EventKind::WorkflowStarted]);
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("echo")).unwrap();
    assert_eq!(engine.wait_result(&id).unwrap(), json(1));
    engine.shutdown();
}

#[test]
fn client_errors() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default());
    let err = Payload::new(OCTETS, vec![0; 2_097_153]).unwrap_err();
    assert_eq!(err, EngineError::PayloadTooLarge { size: 2_097_153, limit: 2_097_152 });
    assert_eq!(
        engine.start_workflow("nope", json(1), "main"),
        Err(EngineError::UnknownWorkflow("nope".into()))
    );
    assert_eq!(engine.start_workflow("echo", json(1), "gpu"), Err(EngineError::UnknownQueue("gpu".into())));
    assert_eq!(engine.status("x"), Err(EngineError::NotFound("x".into())));
    assert_eq!(engine.history("x", None), Err(EngineError::NotFound("x".into())));
    let id = engine.start_workflow("echo", json(1), "main").unwrap();
    assert_eq!(engine.history(&id, Some(2)), Err(EngineError::RunNotFound { id: id.clone(), run: 2 }));

    assert!(matches!(
        engine.run_worker(WorkerConfig::new("w", "gpu").workflow("echo")),
        Err(EngineError::UnknownQueue(_))
    ));
    assert!(matches!(
        engine.run_worker(WorkerConfig::new("w", "main").activity("missing")),
        Err(EngineError::UnknownActivity(_))
    ));
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("echo")).unwrap();
    assert!(matches!(
        engine.run_worker(WorkerConfig::new("w", "main").workflow("echo")),
        Err(EngineError::DuplicateWorker(_))
    ));
    assert!(engine.run_worker(WorkerConfig::new("z", "main").workflow("echo").max_concurrent_activities(0)).is_err());
    engine.shutdown();
}

#[test]
fn successful_activity_history() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default());
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("call").activity("upper")).unwrap();
    let (out, h) = call(&engine, "main", "upper", "abc");
    assert_eq!(out, "ok:ABC");
    use EventKind::*;
    assert_eq!(h.kinds(), vec![WorkflowStarted, ActivityScheduled, ActivityStarted, ActivityCompleted, WorkflowCompleted]);
    let started = &h.events[2];
    assert_eq!(started.worker.as_deref(), Some("w"));
    assert_eq!(started.attempt, Some(1));
    assert_eq!(started.scheduled, Some(2));
    engine.shutdown();
}

#[test]
fn non_retryable_failure_is_attempted_once_and_workflow_continues() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default().non_retryable("validation"));
    engine.register_activity("validate", |_, _| Err(ActivityError::retryable("validation", "wrong format")));
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("call").activity("validate")).unwrap();
    let (out, h) = call(&engine, "main", "validate", "x");
    assert_eq!(out, "failed:NonRetryable:1");
    assert_eq!(h.count(EventKind::ActivityStarted), 1);
    assert_eq!(h.count(EventKind::ActivityRetryScheduled), 0);
    assert_eq!(h.terminal().unwrap().kind, EventKind::WorkflowCompleted);
    let failed = h.events_of(EventKind::ActivityFailed).next().unwrap();
    assert_eq!(failed.error.as_ref().unwrap().kind, "validation");
    engine.shutdown();
}

#[test]
fn workflow_salvages_partial_results_when_every_activity_fails() {
    let engine = virtual_engine(&["main"]);
    engine.register_activity("read", |_, input| {
        let path: String = input.decode().unwrap();
        Err(ActivityError::non_retryable("not-found", path))
    });
    engine.register_workflow("batch", |ctx, input| {
        let paths: Vec<String> = input.decode()?;
        let mut skipped = Vec::new();
        for p in paths {
            if let Err(f) = ctx.execute_activity("read", json(&p), &ActivityOptions::on("main")) {
                skipped.push(f.error.message);
            }
        }
        Ok(WorkflowOutcome::Complete(json(skipped)))
    });
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("batch").activity("read")).unwrap();
    let out = engine.execute_workflow("batch", json(["a", "b", "c"]), "main").unwrap();
    assert_eq!(out.decode::<Vec<String>>().unwrap(), vec!["a", "b", "c"]);
    engine.shutdown();
}

#[test]
fn failed_then_retried_activity_records_both_attempts() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default());
    engine.inject_failures("upper", [ActivityError::retryable("io", "flaky")]);
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("call").activity("upper")).unwrap();
    let (out, h) = call(&engine, "main", "upper", "abc");
    assert_eq!(out, "ok:ABC");
    let attempts: Vec<u32> = h.events_of(EventKind::ActivityStarted).map(|e| e.attempt.unwrap()).collect();
    assert_eq!(attempts, vec![1, 2]);
    let retry = h.events_of(EventKind::ActivityRetryScheduled).next().unwrap();
    assert_eq!(retry.backoff_ms, Some(100));
    let second = h.events_of(EventKind::ActivityStarted).nth(1).unwrap();
    assert_eq!(second.timestamp_ms, 100, "virtual clock jumps exactly one backoff");
    engine.shutdown();
}

#[test]
fn exhausted_retries_report_every_attempt() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default().with_max_attempts(3));
    engine.inject_failures("upper", (0..5).map(|_| ActivityError::retryable("io", "down")));
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("call").activity("upper")).unwrap();
    let (out, h) = call(&engine, "main", "upper", "abc");
    assert_eq!(out, "failed:RetryableExhausted:3");
    assert_eq!(h.count(EventKind::ActivityStarted), 3);
    assert_eq!(h.count(EventKind::ActivityRetryScheduled), 2);
    let ts: Vec<u64> = h.events_of(EventKind::ActivityStarted).map(|e| e.timestamp_ms).collect();
    assert_eq!(ts, vec![0, 100, 300]);
    engine.shutdown();
}

/// An activity that blocks on workers whose id starts with "doomed".
fn register_stuck(engine: &Engine) {
    engine.register_activity("slow", |ctx, input| {
        if ctx.worker.starts_with("doomed") {
            std::thread::sleep(Duration::from_secs(2));
        }
        Ok(input)
    });
}

fn running_on(engine: &Engine, worker: &str) -> bool {
    engine.ledger().iter().any(|e| e.worker == worker && e.outcome == LedgerOutcome::Running)
}

#[test]
fn killed_worker_is_replaced_after_heartbeat_timeout() {
    let engine = Engine::new(EngineConfig::new(["io", "c"])).unwrap();
    register_basics(&engine, "c", RetryPolicy::default().with_max_attempts(3).with_initial_backoff(Duration::ZERO));
    register_stuck(&engine);
    let _w = engine.run_worker(WorkerConfig::new("wf", "io").workflow("call")).unwrap();
    let doomed = engine.run_worker(fast_heartbeat(WorkerConfig::new("doomed", "c").activity("slow"))).unwrap();
    let id = engine.start_workflow("call", json(("slow", "payload")), "io").unwrap();
    wait_until("attempt on doomed worker", || running_on(&engine, "doomed"));
    doomed.kill();
    let _spare = engine.run_worker(fast_heartbeat(WorkerConfig::new("spare", "c").activity("slow"))).unwrap();
    let out: String = engine.wait_result(&id).unwrap().decode().unwrap();
    assert_eq!(out, "ok:payload");

    let h = engine.history(&id, None).unwrap();
    h.check().unwrap();
    let failed = h.events_of(EventKind::ActivityFailed).next().unwrap();
    assert_eq!(failed.error.as_ref().unwrap().kind, "heartbeat-timeout");
    assert_eq!(failed.worker.as_deref(), Some("doomed"));
    let starts: Vec<_> =
        h.events_of(EventKind::ActivityStarted).map(|e| (e.worker.clone().unwrap(), e.attempt.unwrap())).collect();
    assert_eq!(starts, vec![("doomed".to_string(), 1), ("spare".to_string(), 2)]);
    engine.shutdown();
}

#[test]
fn repeated_worker_deaths_exhaust_max_attempts() {
    let engine = Engine::new(EngineConfig::new(["io", "c"])).unwrap();
    register_basics(&engine, "c", RetryPolicy::default().with_max_attempts(3).with_initial_backoff(Duration::ZERO));
    register_stuck(&engine);
    let _w = engine.run_worker(WorkerConfig::new("wf", "io").workflow("call")).unwrap();
    let id = engine.start_workflow("call", json(("slow", "x")), "io").unwrap();
    for i in 0..3 {
        let name = format!("doomed-{i}");
        let w = engine.run_worker(fast_heartbeat(WorkerConfig::new(&name, "c").activity("slow"))).unwrap();
        wait_until("attempt", || running_on(&engine, &name));
        w.kill();
    }
    let out: String = engine.wait_result(&id).unwrap().decode().unwrap();
    assert_eq!(out, "failed:RetryableExhausted:3");
    let h = engine.history(&id, None).unwrap();
    assert_eq!(h.count(EventKind::ActivityStarted), 3);
    engine.shutdown();
}

#[test]
fn graceful_shutdown_requeues_in_flight_attempts() {
    let engine = Engine::new(EngineConfig::new(["io", "c"])).unwrap();
    register_basics(&engine, "c", RetryPolicy::default().with_initial_backoff(Duration::ZERO));
    register_stuck(&engine);
    let _w = engine.run_worker(WorkerConfig::new("wf", "io").workflow("call")).unwrap();
    let doomed = engine.run_worker(WorkerConfig::new("doomed", "c").activity("slow")).unwrap();
    let id = engine.start_workflow("call", json(("slow", "x")), "io").unwrap();
    wait_until("attempt on doomed worker", || running_on(&engine, "doomed"));
    let t = Instant::now();
    doomed.shutdown();
    let _spare = engine.run_worker(WorkerConfig::new("spare", "c").activity("slow")).unwrap();
    assert_eq!(engine.wait_result(&id).unwrap().decode::<String>().unwrap(), "ok:x");
    assert!(t.elapsed() < Duration::from_millis(1500), "requeue must not wait for the heartbeat timeout");
    let h = engine.history(&id, None).unwrap();
    let failed = h.events_of(EventKind::ActivityFailed).next().unwrap();
    assert_eq!(failed.error.as_ref().unwrap().kind, "worker-shutdown");
    engine.shutdown();
}

#[test]
fn continue_as_new_chain() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default());
    engine.register_workflow("count", |ctx, input| {
        let n: u32 = input.decode()?;
        ctx.execute_activity("upper", json(format!("step{n}")), &ActivityOptions::on("main"))?;
        if n < 2 {
            Ok(WorkflowOutcome::ContinueAsNew(json(n + 1)))
        } else {
            Ok(WorkflowOutcome::Complete(json(n)))
        }
    });
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("count").activity("upper")).unwrap();
    let id = engine.start_workflow("count", json(0u32), "main").unwrap();
    assert_eq!(engine.wait_result(&id).unwrap().decode::<u32>().unwrap(), 2);
    let runs = engine.histories(&id).unwrap();
    assert_eq!(runs.len(), 3);
    for (i, h) in runs.iter().enumerate() {
        h.check().unwrap();
        assert_eq!(h.workflow_id, id);
        assert_eq!(h.run_id, i as u32 + 1);
        assert_eq!(h.count(EventKind::ActivityScheduled), 1);
        let input: u32 = h.events[0].payload.as_ref().unwrap().decode().unwrap();
        assert_eq!(input, i as u32);
        let last = h.terminal().unwrap().kind;
        if i < 2 {
            assert_eq!(last, EventKind::WorkflowContinuedAsNew);
            assert_eq!(h.count(EventKind::WorkflowCompleted), 0);
        } else {
            assert_eq!(last, EventKind::WorkflowCompleted);
        }
    }
    engine.shutdown();
}

#[test]
fn child_workflow_chain_is_awaited() {
    let engine = virtual_engine(&["main"]);
    engine.register_workflow("countdown", |_, input| {
        let n: u32 = input.decode()?;
        Ok(if n == 0 { WorkflowOutcome::Complete(json("done")) } else { WorkflowOutcome::ContinueAsNew(json(n - 1)) })
    });
    engine.register_workflow("parent", |ctx, input| {
        let out = ctx.execute_child_workflow("countdown", input, "main")?;
        Ok(WorkflowOutcome::Complete(out))
    });
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("countdown").workflow("parent")).unwrap();
    let id = engine.start_workflow("parent", json(3u32), "main").unwrap();
    assert_eq!(engine.wait_result(&id).unwrap().decode::<String>().unwrap(), "done");
    let h = engine.history(&id, None).unwrap();
    h.check().unwrap();
    use EventKind::*;
    assert_eq!(h.kinds(), vec![WorkflowStarted, ChildWorkflowStarted, ChildWorkflowCompleted, WorkflowCompleted]);
    let child = h.events[1].child_id.clone().unwrap();
    assert_eq!(child, format!("{id}/countdown-1"));
    assert_eq!(engine.histories(&child).unwrap().len(), 4);
    engine.shutdown();
}

#[test]
fn single_slot_workers_share_a_queue_without_overlap() {
    let engine = Engine::new(EngineConfig::new(["main"])).unwrap();
    engine.register_activity("nap", |_, input| {
        std::thread::sleep(Duration::from_millis(5));
        Ok(input)
    });
    engine.register_workflow("fan", |ctx, input| {
        let n: u32 = input.decode()?;
        let handles: Vec<_> = (0..n)
            .map(|i| ctx.schedule_activity("nap", json(i), &ActivityOptions::on("main")))
            .collect::<Result<_, _>>()?;
        let mut sum = 0;
        for h in handles {
            sum += ctx.wait(h)?.decode::<u32>()?;
        }
        Ok(WorkflowOutcome::Complete(json(sum)))
    });
    let _a = engine.run_worker(WorkerConfig::new("a", "main").activity("nap").workflow("fan")).unwrap();
    let _b = engine.run_worker(WorkerConfig::new("b", "main").activity("nap")).unwrap();
    let out = engine.execute_workflow("fan", json(40u32), "main").unwrap();
    assert_eq!(out.decode::<u32>().unwrap(), (0..40).sum::<u32>());

    let ledger = engine.ledger();
    assert_eq!(ledger.len(), 40);
    assert!(ledger.iter().all(|e| e.outcome == LedgerOutcome::Completed));
    for w in ["a", "b"] {
        let mine: Vec<_> = ledger.iter().filter(|e| e.worker == w).collect();
        assert!(!mine.is_empty(), "worker {w} got no tasks");
        for (i, x) in mine.iter().enumerate() {
            for y in &mine[i + 1..] {
                assert!(!x.overlaps(y), "worker {w} ran two tasks at once");
            }
        }
    }
    for (i, x) in ledger.iter().enumerate() {
        for y in &ledger[i + 1..] {
            assert!(!(x.activity_id == y.activity_id && x.attempt == y.attempt && x.overlaps(y)));
        }
    }
    engine.shutdown();
}

#[test]
fn concurrency_limit_allows_parallel_attempts() {
    let engine = Engine::new(EngineConfig::new(["main"])).unwrap();
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (a, p) = (active.clone(), peak.clone());
    engine.register_activity("nap", move |_, input| {
        let now = a.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(20));
        a.fetch_sub(1, Ordering::SeqCst);
        Ok(input)
    });
    engine.register_workflow("fan", |ctx, _| {
        let hs: Vec<_> =
            (0..6).map(|i| ctx.schedule_activity("nap", json(i), &ActivityOptions::on("main"))).collect::<Result<_, _>>()?;
        for h in hs {
            ctx.wait(h)?;
        }
        Ok(WorkflowOutcome::Complete(Payload::empty()))
    });
    let _w = engine
        .run_worker(WorkerConfig::new("w", "main").activity("nap").workflow("fan").max_concurrent_activities(3))
        .unwrap();
    engine.execute_workflow("fan", Payload::empty(), "main").unwrap();
    let peak = peak.load(Ordering::SeqCst);
    assert!((2..=3).contains(&peak), "peak concurrency {peak}");
    engine.shutdown();
}

#[test]
fn tasks_stall_without_a_worker_on_their_queue() {
    let engine = Engine::new(EngineConfig::new(["io", "c"])).unwrap();
    register_basics(&engine, "c", RetryPolicy::default());
    let _io = engine.run_worker(WorkerConfig::new("io-worker", "io").workflow("call").activity("upper")).unwrap();
    let first = engine.run_worker(WorkerConfig::new("c1", "c").activity("upper")).unwrap();
    first.kill();
    let id = engine.start_workflow("call", json(("upper", "q")), "io").unwrap();
    std::thread::sleep(Duration::from_millis(200));
    assert_eq!(engine.status(&id).unwrap(), WorkflowStatus::Running);
    assert_eq!(engine.pending_tasks("c"), 1, "activity waits on its own queue");
    assert!(engine.ledger().is_empty(), "the io worker must not take c tasks");
    let _c2 = engine.run_worker(WorkerConfig::new("c2", "c").activity("upper")).unwrap();
    assert_eq!(engine.wait_result(&id).unwrap().decode::<String>().unwrap(), "ok:Q");
    assert!(engine.ledger().iter().all(|e| e.worker == "c2"));
    engine.shutdown();
}

#[test]
fn history_budget_fails_the_run_instead_of_overflowing() {
    let engine = virtual_engine(&["main"]);
    engine.register_activity("id", |_, input| Ok(input));
    engine.register_workflow("hog", |ctx, _| {
        for _ in 0..4 {
            let big = Payload::new(OCTETS, vec![7; 1_500_000]).unwrap();
            ctx.execute_activity("id", big, &ActivityOptions::on("main"))?;
        }
        Ok(WorkflowOutcome::Complete(Payload::empty()))
    });
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("hog").activity("id")).unwrap();
    let id = engine.start_workflow("hog", Payload::empty(), "main").unwrap();
    let err = engine.wait_result(&id).unwrap_err();
    assert!(matches!(err, EngineError::WorkflowFailed { .. }), "{err}");
    let h = engine.history(&id, None).unwrap();
    h.check().unwrap();
    assert!(h.payload_bytes <= MAX_HISTORY_BYTES);
    assert_eq!(h.terminal().unwrap().kind, EventKind::WorkflowFailed);
    engine.shutdown();
}

#[test]
fn panicking_workflow_fails_with_a_message() {
    let engine = virtual_engine(&["main"]);
    engine.register_workflow("boom", |_, _| panic!("kaput"));
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("boom")).unwrap();
    match engine.execute_workflow("boom", Payload::empty(), "main") {
        Err(EngineError::WorkflowFailed { message, run, .. }) => {
            assert!(message.contains("kaput"));
            assert_eq!(run, 1);
        }
        other => panic!("unexpected {other:?}"),
    }
    engine.shutdown();
}

#[test]
fn wait_with_timeout() {
    let engine = virtual_engine(&["main"]);
    register_basics(&engine, "main", RetryPolicy::default());
    let id = engine.start_workflow("echo", json(1), "main").unwrap();
    assert_eq!(
        engine.wait_result_timeout(&id, Duration::from_millis(30)),
        Err(EngineError::Timeout(id.clone()))
    );
    engine.shutdown();
}

#[test]
fn export_and_journal_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = EngineConfig::new(["main"]);
    cfg.journal_dir = Some(dir.path().to_path_buf());
    let engine = Engine::with_clock(cfg, Arc::new(VirtualClock::new())).unwrap();
    register_basics(&engine, "main", RetryPolicy::default());
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("call").activity("upper")).unwrap();
    let (_, h) = call(&engine, "main", "upper", "abc");
    let mut exported = Vec::new();
    engine.export_history(&h.workflow_id, &mut exported).unwrap();
    let exported = String::from_utf8(exported).unwrap();
    assert_eq!(exported.lines().count(), h.events.len());
    let journal = std::fs::read_to_string(dir.path().join(format!("{}.jsonl", h.workflow_id))).unwrap();
    assert_eq!(journal, exported);
    let first: serde_json::Value = serde_json::from_str(exported.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "WorkflowStarted");
    assert_eq!(first["workflow_id"], h.workflow_id.as_str());
    engine.shutdown();
}

/// Runs a small program with a deterministic in-activity failure and returns
/// every history it produced.
fn scripted_run() -> Vec<WorkflowHistory> {
    let engine = virtual_engine(&["main"]);
    engine.register_activity("flaky", |ctx, input| {
        if ctx.attempt < 3 {
            Err(ActivityError::retryable("io", format!("attempt {}", ctx.attempt)))
        } else {
            Ok(input)
        }
    });
    engine.register_workflow("script", |ctx, input| {
        let n: u32 = input.decode()?;
        let opts = ActivityOptions::on("main");
        ctx.execute_activity("flaky", json(n), &opts)?;
        Ok(if n < 2 { WorkflowOutcome::ContinueAsNew(json(n + 1)) } else { WorkflowOutcome::Complete(json(n)) })
    });
    let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("script").activity("flaky")).unwrap();
    let id = engine.start_workflow("script", json(0u32), "main").unwrap();
    engine.wait_result(&id).unwrap();
    let out = engine.histories(&id).unwrap();
    engine.shutdown();
    out
}

#[test]
fn virtual_clock_runs_are_reproducible() {
    let a = scripted_run();
    let b = scripted_run();
    assert_eq!(a, b);
    let last = a.last().unwrap();
    assert_eq!(last.terminal().unwrap().timestamp_ms, 3 * (100 + 200));
}

#[derive(Debug, Clone)]
struct Plan {
    max_attempts: u32,
    failures: Vec<(bool, String)>,
}

fn plan() -> impl Strategy<Value = Plan> {
    (1u32..=4, prop::collection::vec((any::<bool>(), prop::sample::select(vec!["io", "validation"])), 0..6))
        .prop_map(|(max_attempts, f)| Plan {
            max_attempts,
            failures: f.into_iter().map(|(r, k)| (r, k.to_string())).collect(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn retry_invariants_hold_for_any_fault_plan(p in plan()) {
        let engine = virtual_engine(&["main"]);
        let policy = RetryPolicy::default().with_max_attempts(p.max_attempts).non_retryable("validation");
        register_basics(&engine, "main", policy.clone());
        engine.inject_failures("upper", p.failures.iter().map(|(retryable, kind)| ActivityError {
            kind: kind.clone(),
            message: "injected".into(),
            retryable: *retryable,
        }));
        let _w = engine.run_worker(WorkerConfig::new("w", "main").workflow("call").activity("upper")).unwrap();
        let (out, h) = call(&engine, "main", "upper", "v");
        engine.shutdown();

        let starts = h.count(EventKind::ActivityStarted);
        prop_assert!(starts as u32 <= p.max_attempts);
        prop_assert_eq!(h.count(EventKind::WorkflowCompleted), 1);

        // Oracle: walk the plan the way the policy should.
        let mut expected = "ok:V".to_string();
        let mut attempts = 0;
        for attempt in 1..=p.max_attempts {
            attempts = attempt;
            match p.failures.get(attempt as usize - 1) {
                None => break,
                Some((retryable, kind)) => {
                    let err = ActivityError { kind: kind.clone(), message: String::new(), retryable: *retryable };
                    if !policy.is_retryable(&err) {
                        expected = format!("failed:NonRetryable:{attempt}");
                        break;
                    }
                    if attempt == p.max_attempts {
                        expected = format!("failed:RetryableExhausted:{attempt}");
                    }
                }
            }
        }
        prop_assert_eq!(out, expected);
        prop_assert_eq!(starts as u32, attempts);
        for f in h.events_of(EventKind::ActivityFailed) {
            let e = f.error.as_ref().unwrap();
            if !policy.is_retryable(e) {
                let next = h.events.get(f.seq as usize);
                prop_assert!(next.is_none_or(|n| n.kind != EventKind::ActivityRetryScheduled));
            }
        }
    }
}
