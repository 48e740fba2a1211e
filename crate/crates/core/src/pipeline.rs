//! The document classification pipeline on top of the durable engine.
//!
//! Two queues separate cheap I/O from model inference:
//!
//! | name | queue | work |
//! |---|---|---|
//! | `find_files` | `q_io` | recursive `*.json`/`*.jsonl` listing |
//! | `read_validate` | `q_io` | load one file and validate it as a document |
//! | `classify` | `q_c` | chunk, sample and classify one document |
//! | `w1` | `q_io` | up to [`BATCH_SIZE`] files, then continue-as-new |
//! | `w2` | `q_io` | `find_files`, then `w1` as a child |
//!
//! Predictions are flushed to a [`PredictionSink`] after every batch; the
//! state carried between runs holds only counters, skips and the paths left.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chunkwise_durable::{
    ActivityError, ActivityOptions, Engine, EngineConfig, EngineError, Payload, RetryPolicy, WorkerConfig,
    WorkerHandle, WorkflowError, WorkflowOutcome,
};
use parking_lot::Mutex;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::ChunkingError;
use crate::corpus::{validate_document, Document};
use crate::evaluation::document_rng;
use crate::model::{argmax, Classifier};
use crate::seed::derive;
use crate::stats::FiveNumberSummary;

pub const QUEUE_IO: &str = "q_io";
pub const QUEUE_C: &str = "q_c";
pub const FIND_FILES: &str = "find_files";
pub const READ_VALIDATE: &str = "read_validate";
pub const CLASSIFY: &str = "classify";
pub const W1: &str = "w1";
pub const W2: &str = "w2";
pub const BATCH_SIZE: usize = 10;

/// Error kinds that mean the input itself is bad; retrying cannot help.
pub const NOT_FOUND: &str = "not-found";
pub const MALFORMED_JSON: &str = "malformed-json";
pub const SCHEMA_INVALID: &str = "schema-invalid";
pub const NO_CHUNKS: &str = "no-chunks";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineInput {
    pub dir: PathBuf,
    pub seed: u64,
    /// Recorded in the history for traceability; the classify worker loads
    /// its model at startup.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub path: String,
    pub label: String,
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub model_version: String,
    /// Pipeline seed; the sampling stream is derived from it and `doc_id`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub path: String,
    pub kind: String,
    pub reason: String,
}

/// State carried through the `w1` continue-as-new chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchState {
    pub seed: u64,
    pub discovered: usize,
    pub remaining: Vec<String>,
    pub predicted: usize,
    pub skipped: Vec<Skip>,
    pub batches: usize,
}

impl BatchState {
    pub fn new(paths: Vec<String>, seed: u64) -> Self {
        BatchState { seed, discovered: paths.len(), remaining: paths, predicted: 0, skipped: Vec::new(), batches: 0 }
    }

    /// Every discovered file is predicted, skipped or still pending.
    pub fn is_conserved(&self) -> bool {
        self.discovered == self.predicted + self.skipped.len() + self.remaining.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifyInput {
    path: String,
    seed: u64,
    doc: Document,
}

/// Receives each batch of predictions once, tagged with the id of the
/// pipeline (`w2`) execution that produced it.
pub trait PredictionSink: Send + Sync {
    fn write_batch(&self, pipeline_id: &str, predictions: &[Prediction]) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    batches: Mutex<BTreeMap<String, Vec<Prediction>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Removes and returns everything written for `pipeline_id`.
    pub fn take(&self, pipeline_id: &str) -> Vec<Prediction> {
        self.batches.lock().remove(pipeline_id).unwrap_or_default()
    }
}

impl PredictionSink for MemorySink {
    fn write_batch(&self, pipeline_id: &str, predictions: &[Prediction]) -> io::Result<()> {
        self.batches.lock().entry(pipeline_id.to_string()).or_default().extend_from_slice(predictions);
        Ok(())
    }
}

/// Appends one JSON line per prediction.
#[derive(Debug)]
pub struct JsonlSink {
    file: Mutex<File>,
}

impl JsonlSink {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlSink { file: Mutex::new(file) })
    }
}

impl PredictionSink for JsonlSink {
    fn write_batch(&self, _pipeline_id: &str, predictions: &[Prediction]) -> io::Result<()> {
        let mut text = Vec::new();
        for p in predictions {
            serde_json::to_writer(&mut text, p)?;
            text.push(b'\n');
        }
        let mut f = self.file.lock();
        f.write_all(&text)?;
        f.flush()
    }
}

/// Writes to several sinks in order.
pub struct TeeSink(pub Vec<Arc<dyn PredictionSink>>);

impl PredictionSink for TeeSink {
    fn write_batch(&self, pipeline_id: &str, predictions: &[Prediction]) -> io::Result<()> {
        self.0.iter().try_for_each(|s| s.write_batch(pipeline_id, predictions))
    }
}

/// Queues and retry defaults for the pipeline; input errors never retry.
pub fn engine_config() -> EngineConfig {
    let mut cfg = EngineConfig::new([QUEUE_IO, QUEUE_C]);
    cfg.retry = io_policy();
    cfg.workers = vec![io_worker("W1"), classify_worker("W2")];
    cfg
}

fn io_policy() -> RetryPolicy {
    RetryPolicy::default().non_retryable(NOT_FOUND).non_retryable(MALFORMED_JSON).non_retryable(SCHEMA_INVALID)
}

/// Hosts both workflows and the file activities on `q_io`.
pub fn io_worker(id: &str) -> WorkerConfig {
    WorkerConfig::new(id, QUEUE_IO)
        .activity(FIND_FILES)
        .activity(READ_VALIDATE)
        .workflow(W1)
        .workflow(W2)
        .max_concurrent_workflows(4)
}

/// Runs only `classify`, on `q_c`.
pub fn classify_worker(id: &str) -> WorkerConfig {
    WorkerConfig::new(id, QUEUE_C).activity(CLASSIFY)
}

fn json<T: Serialize + ?Sized>(v: &T) -> Result<Payload, ActivityError> {
    Payload::json(v).map_err(|e| ActivityError::non_retryable("payload", e.to_string()))
}

fn decode<T: serde::de::DeserializeOwned>(p: &Payload) -> Result<T, ActivityError> {
    p.decode().map_err(|e| ActivityError::non_retryable("payload", e.to_string()))
}

pub fn find_files(dir: &Path) -> Result<Vec<String>, ActivityError> {
    if !dir.is_dir() {
        return Err(ActivityError::non_retryable(NOT_FOUND, format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir) {
        let entry = entry.map_err(|e| ActivityError::retryable("io", e.to_string()))?;
        let ext = entry.path().extension().and_then(|e| e.to_str());
        if entry.file_type().is_file() && matches!(ext, Some("json" | "jsonl")) {
            out.push(entry.path().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Loads one document file: a JSON object, or a JSONL file holding exactly
/// one record.
pub fn read_validate(path: &Path) -> Result<Document, ActivityError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        match e.kind() {
            io::ErrorKind::NotFound => ActivityError::non_retryable(NOT_FOUND, msg),
            io::ErrorKind::InvalidData => ActivityError::non_retryable(MALFORMED_JSON, msg),
            _ => ActivityError::retryable("io", msg),
        }
    })?;
    let malformed = |e: serde_json::Error| ActivityError::non_retryable(MALFORMED_JSON, format!("{}: {e}", path.display()));
    let value = if path.extension().is_some_and(|e| e == "jsonl") {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| {
            ActivityError::non_retryable(SCHEMA_INVALID, format!("{}: no record", path.display()))
        })?;
        if lines.next().is_some() {
            return Err(ActivityError::non_retryable(
                SCHEMA_INVALID,
                format!("{}: more than one record", path.display()),
            ));
        }
        serde_json::from_str(first).map_err(malformed)?
    } else {
        serde_json::from_str(&text).map_err(malformed)?
    };
    validate_document(&value).map_err(|e| ActivityError::non_retryable(SCHEMA_INVALID, format!("{}: {e}", path.display())))
}

/// Chunk encoding, sampling and inference for one document; the sample is
/// drawn from a stream fixed by `(seed, doc id)`.
pub fn classify_document(clf: &Classifier, doc: &Document, path: &str, seed: u64) -> Result<Prediction, ActivityError> {
    let prepared = clf.prepare(doc).map_err(|e| match e {
        ChunkingError::NoChunks => ActivityError::non_retryable(NO_CHUNKS, format!("{}: {e}", doc.id)),
        e => ActivityError::non_retryable("chunking", format!("{}: {e}", doc.id)),
    })?;
    let mut rng = document_rng(seed, &doc.id);
    let probabilities =
        clf.predict(&prepared, &mut rng).map_err(|e| ActivityError::non_retryable("model", e.to_string()))?;
    let class = argmax(&probabilities);
    Ok(Prediction {
        doc_id: doc.id.clone(),
        path: path.to_string(),
        label: clf.labels[class].clone(),
        class,
        probabilities,
        model_version: clf.model_version.clone(),
        seed,
    })
}

/// Registers `find_files`, `read_validate`, `w1` and `w2`.
pub fn register_io(engine: &Engine, sink: Arc<dyn PredictionSink>) {
    engine.register_activity(FIND_FILES, |_, input| {
        let dir: PathBuf = decode(&input)?;
        json(&find_files(&dir)?)
    });
    engine.register_activity(READ_VALIDATE, |_, input| {
        let path: String = decode(&input)?;
        json(&read_validate(Path::new(&path))?)
    });
    engine.register_workflow(W1, move |ctx, input| {
        let mut state: BatchState = input.decode()?;
        let io = ActivityOptions::on(QUEUE_IO);
        let c = ActivityOptions::on(QUEUE_C);
        let take = state.remaining.len().min(BATCH_SIZE);
        let batch: Vec<String> = state.remaining.drain(..take).collect();
        let mut predictions = Vec::with_capacity(batch.len());
        for path in batch {
            let skip = |f: chunkwise_durable::ActivityFailure| Skip {
                path: path.clone(),
                kind: f.error.kind.clone(),
                reason: f.error.message.clone(),
            };
            let doc = match ctx.execute_activity(READ_VALIDATE, Payload::json(&path)?, &io) {
                Ok(p) => p,
                Err(f) => {
                    state.skipped.push(skip(f));
                    continue;
                }
            };
            let input = ClassifyInput { path: path.clone(), seed: state.seed, doc: doc.decode()? };
            match ctx.execute_activity(CLASSIFY, Payload::json(&input)?, &c) {
                Ok(p) => predictions.push(p.decode::<Prediction>()?),
                Err(f) => state.skipped.push(skip(f)),
            }
        }
        let root = ctx.workflow_id().split('/').next().unwrap_or_default().to_string();
        sink.write_batch(&root, &predictions).map_err(|e| WorkflowError::new(format!("prediction sink: {e}")))?;
        state.predicted += predictions.len();
        state.batches += 1;
        if state.remaining.is_empty() {
            Ok(WorkflowOutcome::Complete(Payload::json(&state)?))
        } else {
            Ok(WorkflowOutcome::ContinueAsNew(Payload::json(&state)?))
        }
    });
    engine.register_workflow(W2, |ctx, input| {
        let input: PipelineInput = input.decode()?;
        let paths: Vec<String> =
            ctx.execute_activity(FIND_FILES, Payload::json(&input.dir)?, &ActivityOptions::on(QUEUE_IO))?.decode()?;
        let state = BatchState::new(paths, input.seed);
        let out = ctx.execute_child_workflow(W1, Payload::json(&state)?, QUEUE_IO)?;
        Ok(WorkflowOutcome::Complete(out))
    });
}

/// Registers `classify` around a model loaded once, up front.
pub fn register_classifier(engine: &Engine, clf: Arc<Classifier>) {
    engine.register_activity(CLASSIFY, move |_, input| {
        let input: ClassifyInput = decode(&input)?;
        json(&classify_document(&clf, &input.doc, &input.path, input.seed)?)
    });
}

/// Final state of one pipeline execution and the predictions it flushed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub workflow_id: String,
    pub state: BatchState,
    pub predictions: Vec<Prediction>,
}

impl PipelineOutcome {
    /// Predictions keyed by path, independent of completion order.
    pub fn by_path(&self) -> BTreeMap<&str, &Prediction> {
        self.predictions.iter().map(|p| (p.path.as_str(), p)).collect()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {} discovered, {} predicted, {} skipped in {} batch(es)\n",
            self.workflow_id,
            self.state.discovered,
            self.state.predicted,
            self.state.skipped.len(),
            self.state.batches
        );
        for skip in &self.state.skipped {
            s.push_str(&format!("  skipped {} [{}]: {}\n", skip.path, skip.kind, skip.reason));
        }
        s
    }
}

/// An engine with the pipeline registered, one `q_io` worker and any
/// number of `q_c` workers.
pub struct PipelineHost {
    engine: Engine,
    sink: Arc<MemorySink>,
    workers: BTreeMap<String, WorkerHandle>,
}

impl PipelineHost {
    /// Starts workers `W1` and `W2`.
    pub fn start(clf: Arc<Classifier>, extra_sink: Option<Arc<dyn PredictionSink>>) -> Result<Self, EngineError> {
        Self::with_config(engine_config(), clf, extra_sink)
    }

    /// Starts every worker listed in `config`.
    pub fn with_config(
        config: EngineConfig,
        clf: Arc<Classifier>,
        extra_sink: Option<Arc<dyn PredictionSink>>,
    ) -> Result<Self, EngineError> {
        let engine = Engine::new(config)?;
        let sink = Arc::new(MemorySink::new());
        let out: Arc<dyn PredictionSink> = match extra_sink {
            Some(extra) => Arc::new(TeeSink(vec![sink.clone(), extra])),
            None => sink.clone(),
        };
        register_io(&engine, out);
        register_classifier(&engine, clf);
        let mut host = PipelineHost { engine, sink, workers: BTreeMap::new() };
        let ids: Vec<String> = host.engine.config().workers.iter().map(|w| w.id.clone()).collect();
        for id in ids {
            let handle = host.engine.run_configured_worker(&id)?;
            host.workers.insert(id, handle);
        }
        Ok(host)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn add_worker(&mut self, config: WorkerConfig) -> Result<(), EngineError> {
        let id = config.id.clone();
        let handle = self.engine.run_worker(config)?;
        self.workers.insert(id, handle);
        Ok(())
    }

    /// Simulated crash; returns false for an unknown id.
    pub fn kill_worker(&mut self, id: &str) -> bool {
        self.workers.remove(id).map(WorkerHandle::kill).is_some()
    }

    pub fn shutdown_worker(&mut self, id: &str) -> bool {
        self.workers.remove(id).map(WorkerHandle::shutdown).is_some()
    }

    /// Starts `w2` and returns its id at once.
    pub fn submit(&self, input: &PipelineInput) -> Result<String, EngineError> {
        self.engine.start_workflow(W2, Payload::json(input)?, QUEUE_IO)
    }

    pub fn wait(&self, id: &str) -> Result<PipelineOutcome, EngineError> {
        let state: BatchState = self.engine.wait_result(id)?.decode()?;
        Ok(PipelineOutcome { workflow_id: id.to_string(), state, predictions: self.sink.take(id) })
    }

    pub fn run(&self, input: &PipelineInput) -> Result<PipelineOutcome, EngineError> {
        let id = self.submit(input)?;
        self.wait(&id)
    }

    /// Id of the `w1` child started by pipeline `id`, once it exists.
    pub fn batch_workflow_id(&self, id: &str) -> Option<String> {
        let prefix = format!("{id}/");
        self.engine.workflow_ids().into_iter().find(|w| w.starts_with(&prefix))
    }
}

impl Drop for PipelineHost {
    fn drop(&mut self) {
        self.workers.clear();
        self.engine.shutdown();
    }
}

/// Writes each document to `<dir>/<index>.json`.
pub fn write_document_files(dir: &Path, docs: &[Document]) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let path = dir.join(format!("doc-{i:05}.json"));
            std::fs::write(&path, serde_json::to_vec(d)?)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub docs_per_run: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { docs_per_run: 100, runs: 30, seed: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub docs_per_run: usize,
    pub runs: usize,
    /// Per-run wall-clock seconds are kept in `summary.values`.
    pub summary: FiveNumberSummary,
    pub mean: f64,
    pub std_dev: f64,
}

impl BenchReport {
    pub fn from_seconds(docs_per_run: usize, seconds: Vec<f64>) -> Self {
        let n = seconds.len() as f64;
        let mean = seconds.iter().sum::<f64>() / n;
        let var = if seconds.len() > 1 {
            seconds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        BenchReport {
            docs_per_run,
            runs: n as usize,
            summary: FiveNumberSummary::from_values(seconds),
            mean,
            std_dev: var.sqrt(),
        }
    }

    pub fn render(&self) -> String {
        let s = &self.summary;
        let mut out = format!("Time [seconds per {} documents], {} runs\n", self.docs_per_run, self.runs);
        out.push_str(&format!("{:<10}{:>10}{:>10}{:>10}{:>10}{:>10}\n", "", "Min", "Q1", "Q2", "Q3", "Max"));
        out.push_str(&format!(
            "{:<10}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}\n",
            "pipeline", s.min, s.q1, s.q2, s.q3, s.max
        ));
        out.push_str(&format!("mean {:.3} s, standard deviation {:.3} s\n", self.mean, self.std_dev));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Times `runs` end-to-end pipeline executions, each over a fresh sample of
/// `docs_per_run` documents (without replacement within a run). File
/// writing happens before the clock starts; reading and validation are
/// inside the timed region.
pub fn bench_pipeline(
    host: &PipelineHost,
    corpus: &[Document],
    config: &BenchConfig,
    scratch: &Path,
    mut on_run: impl FnMut(usize, f64),
) -> Result<BenchReport, EngineError> {
    let take = config.docs_per_run.min(corpus.len());
    let mut seconds = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, run as u64));
        let mut picked = sample(&mut rng, corpus.len(), take).into_vec();
        picked.sort_unstable();
        let docs: Vec<Document> = picked.into_iter().map(|i| corpus[i].clone()).collect();
        let dir = scratch.join(format!("run-{run:03}"));
        write_document_files(&dir, &docs).map_err(|e| EngineError::Config(format!("{}: {e}", dir.display())))?;
        let input = PipelineInput { dir: dir.clone(), seed: derive(config.seed, run as u64), checkpoint: None };
        let t = Instant::now();
        let outcome = host.run(&input)?;
        let secs = t.elapsed().as_secs_f64();
        if outcome.state.predicted + outcome.state.skipped.len() != take {
            log::warn!("bench run {run}: {}", outcome.summary());
        }
        let _ = std::fs::remove_dir_all(&dir);
        on_run(run, secs);
        seconds.push(secs);
    }
    Ok(BenchReport::from_seconds(take, seconds))
}

/// Polls until `id` is no longer running or `timeout` elapses.
pub fn wait_for_status(engine: &Engine, id: &str, timeout: Duration) -> Result<chunkwise_durable::WorkflowStatus, EngineError> {
    let deadline = Instant::now() + timeout;
    loop {
        let status = engine.status(id)?;
        if status != chunkwise_durable::WorkflowStatus::Running || Instant::now() >= deadline {
            return Ok(status);
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}
