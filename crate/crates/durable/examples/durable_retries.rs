//! A flaky activity retried with exponential backoff, a non-retryable
//! failure, and a counter that continues as new, all on a virtual clock so
//! the printed timestamps are the backoff schedule itself.

use std::sync::Arc;

use chunkwise_durable::{
    ActivityError, ActivityOptions, Engine, EngineConfig, Payload, RetryPolicy, VirtualClock, WorkerConfig,
    WorkflowOutcome,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = Engine::with_clock(EngineConfig::new(["main"]), Arc::new(VirtualClock::new()))?;

    engine.register_activity("flaky", |ctx, input| {
        if ctx.attempt < 3 {
            return Err(ActivityError::retryable("unavailable", format!("attempt {} refused", ctx.attempt)));
        }
        Ok(input)
    });
    engine.register_activity("strict", |_, _| Err(ActivityError::non_retryable("invalid", "input rejected")));
    engine.register_workflow("call", |ctx, input| {
        let name: String = input.decode()?;
        let policy = RetryPolicy::default().with_max_attempts(4);
        let out = ctx.execute_activity(&name, Payload::json(&name)?, &ActivityOptions::on("main").retry(policy))?;
        Ok(WorkflowOutcome::Complete(out))
    });
    engine.register_workflow("count", |_, input| {
        let n: u32 = input.decode()?;
        Ok(if n < 3 {
            WorkflowOutcome::ContinueAsNew(Payload::json(&(n + 1))?)
        } else {
            WorkflowOutcome::Complete(Payload::json(&n)?)
        })
    });
    let worker = engine.run_worker(
        WorkerConfig::new("w", "main").activity("flaky").activity("strict").workflow("call").workflow("count"),
    )?;

    for name in ["flaky", "strict"] {
        let id = engine.start_workflow("call", Payload::json(&name)?, "main")?;
        let result = engine.wait_result(&id);
        println!("{id} ({name}): {}", match &result {
            Ok(_) => "completed".to_string(),
            Err(e) => e.to_string(),
        });
        for e in &engine.history(&id, None)?.events {
            let detail = e.error.as_ref().map(|err| format!(" {err}")).unwrap_or_default();
            println!("  t={:>4} ms  #{:<2} {:?}{detail}", e.timestamp_ms, e.seq, e.kind);
        }
    }

    let id = engine.start_workflow("count", Payload::json(&0u32)?, "main")?;
    let n: u32 = engine.wait_result(&id)?.decode()?;
    println!("{id} finished at {n} after {} runs", engine.histories(&id)?.len());

    worker.shutdown();
    engine.shutdown();
    Ok(())
}
