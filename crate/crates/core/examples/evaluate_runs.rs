//! Trains a small classifier quickly, then compares the F-score
//! distribution over 30 resampled runs at several inference sample sizes.

use chunkwise::corpus::synthetic::{generate, SyntheticConfig};
use chunkwise::corpus::{split_corpus, SplitSpec};
use chunkwise::evaluation::{evaluate_runs, RunsReport};
use chunkwise::model::Classifier;
use chunkwise::training::{fit, prepare_documents, ClassifierSetup};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SyntheticConfig::default());
    let split = split_corpus(&corpus, &SplitSpec::default());

    let mut setup = ClassifierSetup::default();
    setup.train.lr = 3e-3;
    setup.train.max_epochs = 12;
    setup.train.patience = 3;
    setup.train.sampler.sample_size = 20;
    let outcome = fit(&split.train, &split.dev, &setup, |e| println!("epoch {}  dev F {:.3}", e.epoch, e.dev_weighted_f))?;
    let mut clf = Classifier::from_checkpoint(outcome.checkpoint)?;

    let mut reports: Vec<(String, RunsReport)> = Vec::new();
    for size in [4, 20, 48] {
        clf.sampler.sample_size = size;
        let test = prepare_documents(&split.test, &clf.vocabulary, &clf.labels, &clf.sampler, clf.features)?;
        let report = evaluate_runs(&clf, &test, &clf.labels, 30, 12)?;
        reports.push((format!("{size} {}", clf.features.label()), report));
    }
    let rows: Vec<(&str, _)> = reports.iter().map(|(n, r)| (n.as_str(), &r.weighted_f)).collect();
    print!("{}", RunsReport::render_distribution(&rows));
    println!();
    print!("{}", reports[1].1.render_per_class());
    Ok(())
}
