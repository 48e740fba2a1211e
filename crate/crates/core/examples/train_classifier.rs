//! Trains a classifier on a synthetic corpus and evaluates it over 30
//! resampled runs.
//!
//! ```text
//! cargo run --release --example train_classifier -- [sample_size] [lr]
//! ```
//!
//! The default learning rate suits fine-tuning; a freshly initialized encoder
//! needs something like `3e-3` to learn the synthetic corpus.

use chunkwise::corpus::synthetic::{generate, SyntheticConfig};
use chunkwise::corpus::{split_corpus, SplitSpec};
use chunkwise::evaluation::evaluate_runs;
use chunkwise::model::Classifier;
use chunkwise::training::{fit, prepare_documents, ClassifierSetup};

fn main() -> anyhow::Result<()> {
    let sample_size: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(48);
    let corpus = generate(&SyntheticConfig::default());
    let split = split_corpus(&corpus, &SplitSpec::default());
    println!("train {} / dev {} / test {}", split.train.len(), split.dev.len(), split.test.len());

    let mut setup = ClassifierSetup::default();
    setup.train.sampler.sample_size = sample_size;
    if let Some(lr) = std::env::args().nth(2) {
        setup.train.lr = lr.parse()?;
    }
    let outcome = fit(&split.train, &split.dev, &setup, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  dev F {:.4}  lr {:.2e}  {:.1}s",
            e.epoch, e.train_loss, e.dev_weighted_f, e.lr, e.wall_time
        )
    })?;
    println!("best epoch {} (dev F {:.4})", outcome.result.best_epoch, outcome.result.best_dev_f);

    let clf = Classifier::from_checkpoint(outcome.checkpoint)?;
    let test = prepare_documents(&split.test, &clf.vocabulary, &clf.labels, &clf.sampler, clf.features)?;
    let report = evaluate_runs(&clf, &test, &clf.labels, 30, 12)?;
    println!("{}", report.render(&format!("{sample_size} {}", clf.features.label())));
    Ok(())
}
