//! Times end-to-end pipeline runs over random 100-document samples and
//! prints the distribution of wall-clock seconds.
//!
//! ```text
//! cargo run --release --example bench_pipeline -- [runs]
//! ```

use std::sync::Arc;

use chunkwise::corpus::synthetic::{generate, SyntheticConfig};
use chunkwise::model::Classifier;
use chunkwise::pipeline::{bench_pipeline, BenchConfig, PipelineHost};
use chunkwise::training::{initial_checkpoint, ClassifierSetup};

fn main() -> anyhow::Result<()> {
    let runs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let corpus = generate(&SyntheticConfig::default());
    let clf = Arc::new(Classifier::from_checkpoint(initial_checkpoint(&corpus, &ClassifierSetup::default(), 12)?)?);
    let host = PipelineHost::start(clf, None)?;
    let scratch = tempfile::tempdir()?;
    let config = BenchConfig { runs, ..BenchConfig::default() };
    let report = bench_pipeline(&host, &corpus, &config, scratch.path(), |run, secs| {
        eprintln!("run {run}: {secs:.3} s");
    })?;
    print!("{}", report.render());
    Ok(())
}
