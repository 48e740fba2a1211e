//! Command-line front end. `main.rs` only parses arguments and calls [`run`].
//!
//! Exit codes: `0` when nothing failed hard, `1` when every input file of
//! `classify` or `pipeline` was rejected, `2` on a hard error (bad config,
//! missing checkpoint, failed workflow and so on). Per-file failures are
//! reported on stderr and do not change the exit code as long as at least
//! one file was classified.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use chunkwise_durable::{Engine, EngineConfig, WorkerConfig, WorkerHandle, WorkflowStatus};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::chunking::FeatureSet;
use crate::corpus::synthetic::{generate, SyntheticConfig};
use crate::corpus::{corpus_stats, load_corpus, split_corpus, write_jsonl, Document, SplitSpec};
use crate::evaluation::evaluate_runs;
use crate::model::Classifier;
use crate::pipeline::{
    self, bench_pipeline, classify_document, find_files, read_validate, BenchConfig, JsonlSink, MemorySink,
    PipelineHost, PipelineInput, PredictionSink,
};
use crate::training::{fit, prepare_documents, ClassifierSetup};

#[derive(Debug, Parser)]
#[command(name = "chunkwise", version, about = "Chunk-sampling document classifier and batch pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides a config value, e.g. `--set setup.train.lr=0.003`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log filter; `CHUNKWISE_LOG` is used when absent.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates a synthetic corpus and writes train/dev/test JSONL.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        docs_per_class: Option<usize>,
    },
    /// Trains a classifier and writes a checkpoint plus an epoch log.
    Train {
        /// Directory holding `train.jsonl` and `dev.jsonl`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sample_size: Option<usize>,
        /// Comma-separated subset of `np,nc,app`; `-` for none.
        #[arg(long)]
        features: Option<String>,
        /// Epoch log (JSONL); defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Repeated-sampling evaluation of a checkpoint on a labeled corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        sample_size: Option<usize>,
        /// Also writes the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Classifies a file or directory without the engine; JSONL on stdout.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
    },
    /// Hosts pipeline workers. Each stdin line is a directory to process.
    Worker {
        #[arg(long, value_enum, required = true)]
        role: Vec<Role>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Queue to poll instead of the role's default.
        #[arg(long)]
        queue: Option<String>,
        #[arg(long, value_enum, default_value_t = Mode::Wait)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the batch pipeline over a directory.
    Pipeline {
        #[arg(long)]
        checkpoint: PathBuf,
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Wait)]
        mode: Mode,
        /// Prediction JSONL; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Times end-to-end pipeline runs over samples of a corpus.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL corpus or directory of document files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    /// `q_io`: file activities and both workflows.
    Io,
    /// `q_c`: classification only.
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Block and print the outcome.
    Wait,
    /// Print the workflow id, then report its status.
    Submit,
}

/// Everything a config file may set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for evaluation, classification and the pipeline.
    pub seed: u64,
    pub corpus: SyntheticConfig,
    pub split: SplitRatios,
    pub setup: ClassifierSetup,
    pub runs: usize,
    pub bench: BenchConfig,
    /// Engine queues, retry policy and workers; the pipeline default when absent.
    pub engine: Option<EngineConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 12,
            corpus: SyntheticConfig::default(),
            split: SplitRatios::default(),
            setup: ClassifierSetup::default(),
            runs: 30,
            bench: BenchConfig::default(),
            engine: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        let (train, dev, test) = SplitSpec::default().ratios();
        SplitRatios { train, dev, test, seed: SplitSpec::default().seed }
    }
}

impl RunConfig {
    /// Reads `path` (if any) and applies dotted `key=value` overrides. Values
    /// are parsed as TOML and fall back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override `{item}` is not KEY=VALUE"))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let config: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        config.setup.train.validate()?;
        config.engine()?.validate()?;
        Ok(config)
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let s = &self.split;
        Ok(SplitSpec::new(s.train, s.dev, s.test, s.seed)?)
    }

    pub fn engine(&self) -> Result<EngineConfig> {
        Ok(self.engine.clone().unwrap_or_else(pipeline::engine_config))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty override key"))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| anyhow!("`{part}` in `{key}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Sets up logging from `--log-level` or `CHUNKWISE_LOG` (default `warn`).
pub fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::new().filter_or("CHUNKWISE_LOG", "warn");
    let mut builder = env_logger::Builder::from_env(env);
    if let Some(level) = level {
        builder.parse_filters(level);
    }
    let _ = builder.try_init();
}

pub fn main_with(cli: Cli) -> ExitCode {
    init_logging(cli.log_level.as_deref());
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
    }
    out
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let seed = cli.seed;
    if let Some(s) = seed {
        config.seed = s;
    }
    match cli.command {
        Command::GenCorpus { out, classes, docs_per_class } => {
            if let Some(n) = classes {
                config.corpus.n_classes = n;
            }
            if let Some(n) = docs_per_class {
                config.corpus.docs_per_class = n;
            }
            if let Some(s) = seed {
                config.corpus.seed = s;
                config.split.seed = s;
            }
            gen_corpus(&config, &out)
        }
        Command::Train { data, out, sample_size, features, log } => {
            if let Some(n) = sample_size {
                config.setup.train.sampler.sample_size = n;
            }
            if let Some(f) = features {
                config.setup.features = FeatureSet::parse(&f).map_err(|e| anyhow!(e))?;
            }
            if let Some(s) = seed {
                config.setup.train.seed = s;
            }
            let log = log.unwrap_or_else(|| out.with_extension("log.jsonl"));
            train(&config.setup, &data, &out, &log)
        }
        Command::Evaluate { checkpoint, data, runs, sample_size, json } => {
            evaluate(&checkpoint, &data, runs.unwrap_or(config.runs), sample_size, config.seed, json.as_deref())
        }
        Command::Classify { checkpoint, input } => classify(&checkpoint, &input, config.seed),
        Command::Worker { role, checkpoint, queue, mode, out } => {
            worker(&config, &role, checkpoint.as_deref(), queue.as_deref(), mode, out.as_deref())
        }
        Command::Pipeline { checkpoint, dir, mode, out } => {
            run_pipeline(&config, &checkpoint, &dir, mode, out.as_deref())
        }
        Command::Bench { checkpoint, data, runs, docs, json } => {
            if let Some(n) = runs {
                config.bench.runs = n;
            }
            if let Some(n) = docs {
                config.bench.docs_per_run = n;
            }
            if let Some(s) = seed {
                config.bench.seed = s;
            }
            bench(&config, &checkpoint, &data, json.as_deref())
        }
    }
}

/// Writes `train.jsonl`, `dev.jsonl` and `test.jsonl` under `out`.
pub fn gen_corpus(config: &RunConfig, out: &Path) -> Result<ExitCode> {
    let corpus = generate(&config.corpus);
    let split = split_corpus(&corpus, &config.split_spec()?);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, docs) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        write_jsonl(out.join(format!("{name}.jsonl")), docs)?;
    }
    if let Some(stats) = corpus_stats(&corpus) {
        print!("{}", stats.render_table());
    }
    println!(
        "{} documents: train {} / dev {} / test {}",
        corpus.len(),
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_labeled(path: &Path) -> Result<Vec<Document>> {
    let loaded = load_corpus(path).with_context(|| format!("loading {}", path.display()))?;
    for (line, reason) in &loaded.rejected {
        log::warn!("{}:{line}: {reason}", path.display());
    }
    if loaded.documents.is_empty() {
        bail!("{} holds no valid documents", path.display());
    }
    Ok(loaded.documents)
}

pub fn train(setup: &ClassifierSetup, data: &Path, out: &Path, log_path: &Path) -> Result<ExitCode> {
    let train_set = load_labeled(&data.join("train.jsonl"))?;
    let dev_set = load_labeled(&data.join("dev.jsonl"))?;
    let t = &setup.train;
    println!(
        "lr={:e} epochs={} patience={} seed={} batch={}x{} sample_size={} features={}",
        t.lr,
        t.max_epochs,
        t.patience,
        t.seed,
        t.batch_size,
        t.grad_accum,
        t.sampler.sample_size,
        setup.features.label()
    );
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut log_err = None;
    let outcome = fit(&train_set, &dev_set, setup, |e| {
        println!("epoch {:>2}  loss {:.4}  dev F {:.4}  lr {:.2e}", e.epoch, e.train_loss, e.dev_weighted_f, e.lr);
        if let Err(err) = writeln!(log, "{}", e.to_json_line()) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err).context("writing epoch log");
    }
    log.flush()?;
    outcome.checkpoint.save(out)?;
    println!(
        "best epoch {} (dev F {:.4}); checkpoint {}",
        outcome.result.best_epoch,
        outcome.result.best_dev_f,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(
    checkpoint: &Path,
    data: &Path,
    runs: usize,
    sample_size: Option<usize>,
    seed: u64,
    json: Option<&Path>,
) -> Result<ExitCode> {
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    let mut clf = Classifier::load(checkpoint)?;
    if let Some(n) = sample_size {
        clf.sampler.sample_size = n;
        clf.sampler.validate()?;
    }
    let docs = load_labeled(data)?;
    let prepared = prepare_documents(&docs, &clf.vocabulary, &clf.labels, &clf.sampler, clf.features)?;
    if let Some((doc, _)) = docs.iter().zip(&prepared).find(|(_, p)| p.label.is_none()) {
        bail!("document {} has no label known to the checkpoint", doc.id);
    }
    let report = evaluate_runs(&clf, &prepared, &clf.labels, runs, seed)?;
    let name = format!("{} {}", clf.sampler.sample_size, clf.features.label());
    print!("{}", report.render(&name));
    if let Some(path) = json {
        std::fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Files under `input`, or `input` itself.
fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let files = find_files(input).map_err(|e| anyhow!("{}: {}", e.kind, e.message))?;
        Ok(files.into_iter().map(PathBuf::from).collect())
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

fn soft_exit(successes: usize, failures: usize) -> ExitCode {
    if failures > 0 && successes == 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

pub fn classify(checkpoint: &Path, input: &Path, seed: u64) -> Result<ExitCode> {
    let clf = Classifier::load(checkpoint)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let (mut ok, mut failed) = (0, 0);
    for path in input_files(input)? {
        let shown = path.display().to_string();
        match read_validate(&path).and_then(|doc| classify_document(&clf, &doc, &shown, seed)) {
            Ok(p) => {
                writeln!(out, "{}", serde_json::to_string(&p)?)?;
                ok += 1;
            }
            Err(e) => {
                eprintln!("{}: {}", e.kind, e.message);
                failed += 1;
            }
        }
    }
    Ok(soft_exit(ok, failed))
}

/// Registers the pipeline code a role needs and starts its worker.
/// `Role::Classify` refuses to start without a classifier.
pub fn host_role(
    engine: &Engine,
    role: Role,
    id: &str,
    queue: Option<&str>,
    sink: Arc<dyn PredictionSink>,
    classifier: Option<Arc<Classifier>>,
) -> Result<WorkerHandle> {
    let mut cfg: WorkerConfig = match role {
        Role::Io => {
            pipeline::register_io(engine, sink);
            pipeline::io_worker(id)
        }
        Role::Classify => {
            let clf = classifier.ok_or_else(|| anyhow!("the classify role needs --checkpoint"))?;
            pipeline::register_classifier(engine, clf);
            pipeline::classify_worker(id)
        }
    };
    if let Some(q) = queue {
        cfg.queue = q.to_string();
    }
    Ok(engine.run_worker(cfg)?)
}

fn prediction_sink(out: Option<&Path>) -> Result<Arc<dyn PredictionSink>> {
    Ok(match out {
        Some(p) => Arc::new(JsonlSink::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Arc::new(MemorySink::new()),
    })
}

pub fn worker(
    config: &RunConfig,
    roles: &[Role],
    checkpoint: Option<&Path>,
    queue: Option<&str>,
    mode: Mode,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let classifier = match checkpoint {
        Some(p) => Some(Arc::new(Classifier::load(p)?)),
        None if roles.contains(&Role::Classify) => bail!("the classify role needs --checkpoint"),
        None => None,
    };
    let engine = Engine::new(config.engine()?)?;
    let sink = prediction_sink(out)?;
    let mut handles = Vec::new();
    for (i, role) in roles.iter().enumerate() {
        let id = format!("{}-{}", role_name(*role), i + 1);
        handles.push(host_role(&engine, *role, &id, queue, sink.clone(), classifier.clone())?);
        eprintln!("worker {id} polling");
    }
    if !roles.contains(&Role::Classify) || !roles.contains(&Role::Io) {
        log::warn!("only some roles are hosted; submitted pipelines wait for the others");
    }
    for line in std::io::stdin().lock().lines() {
        let dir = line?;
        let dir = dir.trim();
        if dir.is_empty() {
            continue;
        }
        let input = PipelineInput { dir: dir.into(), seed: config.seed, checkpoint: checkpoint.map(Into::into) };
        let id = engine.start_workflow(pipeline::W2, chunkwise_durable::Payload::json(&input)?, pipeline::QUEUE_IO)?;
        println!("{id}");
        if mode == Mode::Wait {
            match engine.wait_result(&id).and_then(|p| p.decode::<pipeline::BatchState>()) {
                Ok(state) => println!(
                    "{id}: {} discovered, {} predicted, {} skipped",
                    state.discovered,
                    state.predicted,
                    state.skipped.len()
                ),
                Err(e) => eprintln!("{id}: {e}"),
            }
        }
    }
    for h in handles {
        h.shutdown();
    }
    engine.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Io => "io",
        Role::Classify => "classify",
    }
}

pub fn run_pipeline(
    config: &RunConfig,
    checkpoint: &Path,
    dir: &Path,
    mode: Mode,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let clf = Arc::new(Classifier::load(checkpoint)?);
    let extra = match out {
        Some(p) => Some(prediction_sink(Some(p))?),
        None => None,
    };
    let host = PipelineHost::with_config(config.engine()?, clf, extra)?;
    let input = PipelineInput { dir: dir.to_path_buf(), seed: config.seed, checkpoint: Some(checkpoint.into()) };
    let id = host.submit(&input)?;
    if mode == Mode::Submit {
        println!("{id}");
        let status = pipeline::wait_for_status(host.engine(), &id, Duration::from_secs(24 * 3600))?;
        println!("{id} {status:?}");
        if status == WorkflowStatus::Failed {
            host.wait(&id)?;
        }
    }
    let outcome = host.wait(&id)?;
    if out.is_none() && mode == Mode::Wait {
        let stdout = std::io::stdout();
        let mut w = stdout.lock();
        for p in &outcome.predictions {
            writeln!(w, "{}", serde_json::to_string(p)?)?;
        }
    }
    eprint!("{}", outcome.summary());
    Ok(soft_exit(outcome.state.predicted, outcome.state.skipped.len()))
}

/// Documents from a JSONL corpus or a directory of document files.
fn load_documents(path: &Path) -> Result<Vec<Document>> {
    if !path.is_dir() {
        return load_labeled(path);
    }
    let mut docs = Vec::new();
    for file in input_files(path)? {
        match read_validate(&file) {
            Ok(d) => docs.push(d),
            Err(e) => log::warn!("{}: {}", e.kind, e.message),
        }
    }
    if docs.is_empty() {
        bail!("{} holds no valid documents", path.display());
    }
    Ok(docs)
}

pub fn bench(config: &RunConfig, checkpoint: &Path, data: &Path, json: Option<&Path>) -> Result<ExitCode> {
    let clf = Arc::new(Classifier::load(checkpoint)?);
    let corpus = load_documents(data)?;
    let host = PipelineHost::with_config(config.engine()?, clf, None)?;
    let scratch = tempfile::tempdir()?;
    let report = bench_pipeline(&host, &corpus, &config.bench, scratch.path(), |run, secs| {
        log::info!("run {run}: {secs:.3} s");
    })?;
    print!("{}", report.render());
    if let Some(path) = json {
        std::fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_training_table() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c.setup.train.lr, 2e-5);
        assert_eq!(c.setup.train.patience, 5);
        assert_eq!(c.setup.train.seed, 12);
        assert_eq!(c.runs, 30);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::load(
            None,
            &["setup.train.lr=0.003".into(), "setup.train.sampler.sample_size=20".into(), "seed=7".into()],
        )
        .unwrap();
        assert_eq!(c.setup.train.lr, 0.003);
        assert_eq!(c.setup.train.sampler.sample_size, 20);
        assert_eq!(c.seed, 7);
        assert!(RunConfig::load(None, &["nonsense=1".into()]).is_err());
        assert!(RunConfig::load(None, &["seed".into()]).is_err());
    }

    #[test]
    fn string_values_need_no_quotes() {
        let c = RunConfig::load(None, &["setup.model_version=v2".into()]).unwrap();
        assert_eq!(c.setup.model_version, "v2");
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "chunkwise", "train", "--data", "d", "--out", "m.json", "--sample-size", "62", "--features", "np,nc,app",
            "--seed", "3",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(matches!(cli.command, Command::Train { sample_size: Some(62), .. }));
        let cli = Cli::try_parse_from(["chunkwise", "worker", "--role", "io", "--role", "classify", "--queue", "q"]);
        assert!(cli.is_ok());
        assert!(Cli::try_parse_from(["chunkwise"]).is_err());
        assert!(Cli::try_parse_from(["chunkwise", "pipeline", "--checkpoint", "c", "d", "--mode", "later"]).is_err());
    }
}
