//! Weighted and per-class F-scores and the repeated-resampling evaluation
//! protocol.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunking::{ChunkSample, PreparedDocument};
use crate::model::{argmax, Classifier, Mode, Model, ModelError, ModelParams};
use crate::seed::{derive, stable_hash};
use crate::stats::{quantile, FiveNumberSummary};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_pairs(n_classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        assert_eq!(truth.len(), predicted.len(), "truth and predictions differ in length");
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.n_classes + predicted] += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.n_classes, other.n_classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Documents whose true class is `class`.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, class)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes).map(<[u64]>::to_vec).collect()
    }
}

/// F1 of every class; zero when precision and recall are both zero or
/// undefined.
pub fn per_class_f(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.n_classes())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let predicted = cm.predicted(c) as f64;
            let support = cm.support(c) as f64;
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if support > 0.0 { tp / support } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect()
}

/// Support-weighted mean of the per-class F1; 0 for an empty matrix.
pub fn weighted_f(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    per_class_f(cm)
        .iter()
        .enumerate()
        .map(|(c, f)| f * cm.support(c) as f64)
        .sum::<f64>()
        / total as f64
}

/// Anything that maps a chunk sample to class probabilities.
pub trait SampleClassifier: Sync {
    fn n_classes(&self) -> usize;
    fn sample_size(&self) -> usize;
    fn predict(&self, sample: &ChunkSample) -> Result<Vec<f64>, ModelError>;
}

impl SampleClassifier for Classifier {
    fn n_classes(&self) -> usize {
        self.labels.len()
    }

    fn sample_size(&self) -> usize {
        self.sampler.sample_size
    }

    fn predict(&self, sample: &ChunkSample) -> Result<Vec<f64>, ModelError> {
        self.predict_sample(sample)
    }
}

/// Borrowed weights under evaluation, used by the trainer.
pub struct ModelView<'a> {
    pub model: &'a Model,
    pub params: &'a ModelParams,
    pub sample_size: usize,
}

impl SampleClassifier for ModelView<'_> {
    fn n_classes(&self) -> usize {
        self.model.config().n_classes
    }

    fn sample_size(&self) -> usize {
        self.sample_size
    }

    fn predict(&self, sample: &ChunkSample) -> Result<Vec<f64>, ModelError> {
        Ok(self.model.classify(self.params, sample, Mode::Eval)?.probabilities)
    }
}

/// Generator for one document in one run; depends only on the run seed
/// and the document id.
pub fn document_rng(run_seed: u64, doc_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(run_seed, stable_hash(doc_id)))
}

/// Samples every labeled document once with `run_seed` and tallies the
/// predictions.
pub fn evaluate_once<C: SampleClassifier + ?Sized>(
    clf: &C,
    docs: &[PreparedDocument],
    run_seed: u64,
) -> Result<ConfusionMatrix, ModelError> {
    let pairs: Vec<(usize, usize)> = docs
        .par_iter()
        .filter_map(|doc| doc.label.map(|label| (doc, label)))
        .map(|(doc, label)| {
            let sample = doc.sample(clf.sample_size(), &mut document_rng(run_seed, &doc.id));
            Ok((label, argmax(&clf.predict(&sample)?)))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut cm = ConfusionMatrix::new(clf.n_classes());
    for (t, p) in pairs {
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsReport {
    pub labels: Vec<String>,
    pub base_seed: u64,
    pub n_runs: usize,
    pub n_documents: usize,
    /// Weighted F of every run, in run order.
    pub weighted_f: FiveNumberSummary,
    /// Median over runs of each class's F1.
    pub per_class_median_f: Vec<f64>,
    /// Documents per true class.
    pub support: Vec<u64>,
    /// Confusion counts summed over all runs.
    pub confusion: ConfusionMatrix,
}

/// Evaluates `n_runs` independent resamples; run `r` uses seed
/// `base_seed + r`.
pub fn evaluate_runs<C: SampleClassifier + ?Sized>(
    clf: &C,
    docs: &[PreparedDocument],
    labels: &[String],
    n_runs: usize,
    base_seed: u64,
) -> Result<RunsReport, ModelError> {
    assert!(n_runs >= 1, "at least one run");
    let matrices: Vec<ConfusionMatrix> = (0..n_runs as u64)
        .map(|r| evaluate_once(clf, docs, base_seed.wrapping_add(r)))
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = matrices.iter().map(weighted_f).collect();
    let per_class: Vec<Vec<f64>> = matrices.iter().map(per_class_f).collect();
    let per_class_median_f = (0..clf.n_classes())
        .map(|c| quantile(&per_class.iter().map(|f| f[c]).collect::<Vec<_>>(), 0.5))
        .collect();
    let mut confusion = ConfusionMatrix::new(clf.n_classes());
    matrices.iter().for_each(|m| confusion.merge(m));
    let support = (0..clf.n_classes()).map(|c| matrices[0].support(c)).collect();
    Ok(RunsReport {
        labels: labels.to_vec(),
        base_seed,
        n_runs,
        n_documents: matrices[0].total() as usize,
        weighted_f: FiveNumberSummary::from_values(scores),
        per_class_median_f,
        support,
        confusion,
    })
}

impl RunsReport {
    /// Distribution table (one row per configuration) with the columns
    /// Min, Q1, Q2, Q3, Max.
    pub fn render_distribution(rows: &[(&str, &FiveNumberSummary)]) -> String {
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Configuration".len());
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "Configuration", "Min", "Q1", "Q2", "Q3", "Max"
        );
        for (name, d) in rows {
            out.push_str(&format!(
                "{name:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}\n",
                d.min, d.q1, d.q2, d.q3, d.max
            ));
        }
        out
    }

    /// Per-class median F-score table.
    pub fn render_per_class(&self) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max("Class".len());
        let mut out = format!("{:<width$}  {:>7}  {:>8}\n", "Class", "Support", "Median F");
        for (c, label) in self.labels.iter().enumerate() {
            out.push_str(&format!(
                "{label:<width$}  {:>7}  {:>8.4}\n",
                self.support[c], self.per_class_median_f[c]
            ));
        }
        out
    }

    pub fn render(&self, name: &str) -> String {
        format!(
            "Test weighted F-score over {} runs ({} documents, base seed {})\n{}\n{}",
            self.n_runs,
            self.n_documents,
            self.base_seed,
            Self::render_distribution(&[(name, &self.weighted_f)]),
            self.render_per_class()
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }
}
