//! Synthetic labeled corpora for desk-scale experiments.
//!
//! Each class owns a few marker words that appear in a document-specific
//! fraction of its paragraphs, and a paragraph-count range that overlaps with
//! its neighbours. A share of documents is "faint": only a handful of their
//! paragraphs carry markers, so whether a random chunk sample sees them
//! depends on the draw.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Document;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "pr", "tr", "st", "cl",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ia", "eu"];
const CODAS: &[&str] = &["", "n", "r", "s", "l", "nt", "m"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub docs_per_class: usize,
    pub seed: u64,
    /// Filler vocabulary size shared by all classes.
    pub filler_words: usize,
    pub markers_per_class: usize,
    /// Minimum paragraph count of class 0; class `k` starts at
    /// `min_paragraphs + k * paragraph_step`.
    pub min_paragraphs: usize,
    pub paragraph_step: usize,
    /// Width of each class's paragraph-count range.
    pub paragraph_span: usize,
    pub words_per_paragraph: (usize, usize),
    /// Range of the fraction of paragraphs carrying class markers.
    pub marker_density: (f64, f64),
    /// Probability that a document is faint.
    pub faint_share: f64,
    /// Marked paragraphs in a faint document.
    pub faint_marked: (usize, usize),
    /// Per-paragraph probability of a marker from another class.
    pub cross_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            docs_per_class: 100,
            seed: 12,
            filler_words: 300,
            markers_per_class: 4,
            min_paragraphs: 12,
            paragraph_step: 24,
            paragraph_span: 90,
            words_per_paragraph: (4, 16),
            marker_density: (0.3, 0.7),
            faint_share: 0.1,
            faint_marked: (1, 3),
            cross_noise: 0.03,
        }
    }
}

pub fn class_name(k: usize) -> String {
    format!("class-{k}")
}

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.gen_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(NUCLEI.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

/// Generates `n_classes * docs_per_class` labeled documents, deterministic in
/// the config.
pub fn generate(config: &SyntheticConfig) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut fillers: Vec<String> = Vec::with_capacity(config.filler_words);
    while fillers.len() < config.filler_words {
        let w = pseudo_word(&mut rng);
        if !fillers.contains(&w) {
            fillers.push(w);
        }
    }
    // Zipf-like filler frequencies.
    let weights: Vec<f64> = (1..=fillers.len()).map(|r| 1.0 / r as f64).collect();
    let filler_dist = WeightedIndex::new(&weights).expect("non-empty filler vocabulary");

    let markers: Vec<Vec<String>> = (0..config.n_classes)
        .map(|k| {
            (0..config.markers_per_class)
                .map(|j| format!("{}{}", ["qx", "zv", "kj", "wq", "xz", "jq"][j % 6], k))
                .collect()
        })
        .collect();

    let mut docs = Vec::with_capacity(config.n_classes * config.docs_per_class);
    for i in 0..config.docs_per_class {
        for k in 0..config.n_classes {
            let lo = config.min_paragraphs + k * config.paragraph_step;
            let n_paragraphs = rng.gen_range(lo..=lo + config.paragraph_span);

            let marked: Vec<bool> = if rng.gen_bool(config.faint_share) {
                let (a, b) = config.faint_marked;
                let n_marked = rng.gen_range(a..=b).min(n_paragraphs);
                let mut flags = vec![false; n_paragraphs];
                for idx in rand::seq::index::sample(&mut rng, n_paragraphs, n_marked) {
                    flags[idx] = true;
                }
                flags
            } else {
                let density = rng.gen_range(config.marker_density.0..=config.marker_density.1);
                (0..n_paragraphs).map(|_| rng.gen_bool(density)).collect()
            };

            let paragraphs = marked
                .iter()
                .map(|&is_marked| {
                    let (a, b) = config.words_per_paragraph;
                    let n_words = rng.gen_range(a..=b);
                    let mut words: Vec<String> = (0..n_words)
                        .map(|_| fillers[filler_dist.sample(&mut rng)].clone())
                        .collect();
                    if is_marked {
                        for _ in 0..rng.gen_range(1..=2) {
                            let pos = rng.gen_range(0..=words.len());
                            words.insert(pos, markers[k].choose(&mut rng).unwrap().clone());
                        }
                    }
                    if config.n_classes > 1 && rng.gen_bool(config.cross_noise) {
                        let other = (k + rng.gen_range(1..config.n_classes)) % config.n_classes;
                        let pos = rng.gen_range(0..=words.len());
                        words.insert(pos, markers[other].choose(&mut rng).unwrap().clone());
                    }
                    let mut text = String::new();
                    for (j, w) in words.iter().enumerate() {
                        if j > 0 {
                            text.push_str(if rng.gen_bool(0.08) { ", " } else { " " });
                        }
                        text.push_str(w);
                    }
                    let mut chars = text.chars();
                    let mut sentence: String =
                        chars.next().map(|c| c.to_uppercase().collect()).unwrap_or_default();
                    sentence.extend(chars);
                    sentence.push('.');
                    sentence
                })
                .collect();

            docs.push(Document {
                id: format!("syn-{k}-{i:04}"),
                language: "en".to_string(),
                label: Some(class_name(k)),
                paragraphs,
            });
        }
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SyntheticConfig {
            docs_per_class: 5,
            ..Default::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        let ids: std::collections::HashSet<_> = a.iter().map(|d| &d.id).collect();
        assert_eq!(ids.len(), a.len());
        assert!(a.iter().all(|d| !d.paragraphs.is_empty()));
    }

    #[test]
    fn class_lengths_follow_ranges() {
        let cfg = SyntheticConfig {
            docs_per_class: 20,
            ..Default::default()
        };
        for d in generate(&cfg) {
            let k: usize = d.label.unwrap()["class-".len()..].parse().unwrap();
            let lo = cfg.min_paragraphs + k * cfg.paragraph_step;
            assert!((lo..=lo + cfg.paragraph_span).contains(&d.paragraphs.len()));
        }
    }
}
