//! Paragraph chunking, order-preserving chunk sampling and length features.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::tokenizer::{Tokenizer, CLS_ID, SEP_ID};

/// Encoder input width, special tokens included.
pub const MAX_CHUNK_LEN: usize = 128;
/// Tokens shared by consecutive windows of an over-long paragraph.
pub const CHUNK_OVERLAP: usize = 16;
/// Sample sizes explored for the classifier.
pub const SAMPLE_SIZES: [usize; 3] = [20, 48, 62];
/// Characters per approximate page.
pub const CHARS_PER_PAGE: f64 = 1800.0;

/// One `[CLS] body [SEP]` window cut from a paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedChunk {
    pub token_ids: Vec<u32>,
    /// Ordinal of the chunk in the document's full chunk sequence.
    pub doc_position: usize,
}

impl EncodedChunk {
    pub fn body(&self) -> &[u32] {
        &self.token_ids[1..self.token_ids.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub sample_size: usize,
    pub max_chunk_len: usize,
    pub overlap: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sample_size: 48,
            max_chunk_len: MAX_CHUNK_LEN,
            overlap: CHUNK_OVERLAP,
            seed: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChunkingError {
    #[error("document yielded no chunks")]
    NoChunks,
    #[error("sample_size must be at least 1")]
    ZeroSampleSize,
    #[error("overlap {overlap} must be smaller than the body window {window}")]
    OverlapTooLarge { overlap: usize, window: usize },
}

impl SamplerConfig {
    pub fn with_sample_size(sample_size: usize) -> Self {
        Self {
            sample_size,
            ..Self::default()
        }
    }

    /// Body tokens per window: `max_chunk_len` minus CLS and SEP.
    pub fn body_window(&self) -> usize {
        self.max_chunk_len.saturating_sub(2)
    }

    pub fn validate(&self) -> Result<(), ChunkingError> {
        if self.sample_size == 0 {
            return Err(ChunkingError::ZeroSampleSize);
        }
        if self.overlap >= self.body_window() {
            return Err(ChunkingError::OverlapTooLarge {
                overlap: self.overlap,
                window: self.body_window(),
            });
        }
        Ok(())
    }
}

/// Body ranges covering `len` tokens with windows of `window` tokens that
/// advance by `window - overlap`. The last window may be shorter.
pub fn window_ranges(len: usize, window: usize, overlap: usize) -> Vec<Range<usize>> {
    assert!(overlap < window, "overlap must be smaller than the window");
    let mut ranges = Vec::new();
    if len == 0 {
        return ranges;
    }
    let step = window - overlap;
    let mut start = 0;
    loop {
        let end = (start + window).min(len);
        ranges.push(start..end);
        if end == len {
            return ranges;
        }
        start += step;
    }
}

/// Encodes every paragraph and cuts it into chunks numbered in document
/// order. Paragraphs that encode to nothing are skipped.
pub fn encode_document(
    doc: &Document,
    tokenizer: &dyn Tokenizer,
    config: &SamplerConfig,
) -> Result<Vec<EncodedChunk>, ChunkingError> {
    config.validate()?;
    let window = config.body_window();
    let mut chunks = Vec::new();
    for paragraph in &doc.paragraphs {
        let ids = tokenizer.encode(paragraph);
        for range in window_ranges(ids.len(), window, config.overlap) {
            let mut token_ids = Vec::with_capacity(range.len() + 2);
            token_ids.push(CLS_ID);
            token_ids.extend_from_slice(&ids[range]);
            token_ids.push(SEP_ID);
            chunks.push(EncodedChunk {
                token_ids,
                doc_position: chunks.len(),
            });
        }
    }
    Ok(chunks)
}

/// Which length features a model consumes. The vector order is always
/// `(ln_nc, ln_np, ln_app)` restricted to the selected ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n_chars: bool,
    pub n_paragraphs: bool,
    pub approx_pages: bool,
}

impl FeatureSet {
    pub const NONE: Self = Self {
        n_chars: false,
        n_paragraphs: false,
        approx_pages: false,
    };
    pub const ALL: Self = Self {
        n_chars: true,
        n_paragraphs: true,
        approx_pages: true,
    };

    pub fn len(&self) -> usize {
        [self.n_chars, self.n_paragraphs, self.approx_pages]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses names like `nc`, `np`, `app` (comma separated). `-` or an
    /// empty string selects nothing.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let mut set = Self::NONE;
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "-") {
            match name {
                "nc" | "n_c" => set.n_chars = true,
                "np" | "n_p" => set.n_paragraphs = true,
                "app" | "a_pp" => set.approx_pages = true,
                other => return Err(format!("unknown feature `{other}` (expected nc, np, app)")),
            }
        }
        Ok(set)
    }

    /// Short label in the `n_p n_c a_pp` style of result tables.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.n_paragraphs {
            parts.push("n_p");
        }
        if self.n_chars {
            parts.push("n_c");
        }
        if self.approx_pages {
            parts.push("a_pp");
        }
        if parts.is_empty() {
            "-".to_string()
        } else {
            parts.join(" ")
        }
    }
}

/// Log-scaled length features of one document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub ln_nc: Option<f64>,
    pub ln_np: Option<f64>,
    pub ln_app: Option<f64>,
}

impl FeatureVector {
    /// Selected values in `(ln_nc, ln_np, ln_app)` order.
    pub fn values(&self) -> Vec<f64> {
        [self.ln_nc, self.ln_np, self.ln_app].into_iter().flatten().collect()
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn ln_guarded(x: f64) -> f64 {
    x.max(1.0).ln()
}

pub fn length_features(doc: &Document, selected: FeatureSet) -> FeatureVector {
    let n_c = doc.char_count() as f64;
    let n_p = doc.paragraph_count() as f64;
    FeatureVector {
        ln_nc: selected.n_chars.then(|| ln_guarded(n_c)),
        ln_np: selected.n_paragraphs.then(|| ln_guarded(n_p)),
        ln_app: selected.approx_pages.then(|| ln_guarded(n_c / CHARS_PER_PAGE)),
    }
}

/// Chunks fed to the classifier for one document, in document order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSample {
    pub chunks: Vec<EncodedChunk>,
    pub features: Option<FeatureVector>,
    pub label: Option<usize>,
}

impl ChunkSample {
    pub fn positions(&self) -> Vec<usize> {
        self.chunks.iter().map(|c| c.doc_position).collect()
    }

    pub fn feature_values(&self) -> Vec<f64> {
        self.features.as_ref().map(FeatureVector::values).unwrap_or_default()
    }
}

/// Draws `min(sample_size, chunks.len())` chunks uniformly without
/// replacement and returns them sorted by `doc_position`.
pub fn sample_chunks<R: Rng + ?Sized>(
    chunks: &[EncodedChunk],
    sample_size: usize,
    rng: &mut R,
) -> Result<Vec<EncodedChunk>, ChunkingError> {
    if chunks.is_empty() {
        return Err(ChunkingError::NoChunks);
    }
    if sample_size == 0 {
        return Err(ChunkingError::ZeroSampleSize);
    }
    let k = sample_size.min(chunks.len());
    let mut picked: Vec<&EncodedChunk> = if k == chunks.len() {
        chunks.iter().collect()
    } else {
        rand::seq::index::sample(rng, chunks.len(), k)
            .into_iter()
            .map(|i| &chunks[i])
            .collect()
    };
    picked.sort_by_key(|c| c.doc_position);
    Ok(picked.into_iter().cloned().collect())
}

/// A document encoded once, ready to be resampled any number of times.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDocument {
    pub id: String,
    pub chunks: Vec<EncodedChunk>,
    pub features: FeatureVector,
    pub label: Option<usize>,
}

impl PreparedDocument {
    pub fn new(
        doc: &Document,
        tokenizer: &dyn Tokenizer,
        sampler: &SamplerConfig,
        features: FeatureSet,
        label: Option<usize>,
    ) -> Result<Self, ChunkingError> {
        let chunks = encode_document(doc, tokenizer, sampler)?;
        if chunks.is_empty() {
            return Err(ChunkingError::NoChunks);
        }
        Ok(Self {
            id: doc.id.clone(),
            chunks,
            features: length_features(doc, features),
            label,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, sample_size: usize, rng: &mut R) -> ChunkSample {
        ChunkSample {
            chunks: sample_chunks(&self.chunks, sample_size, rng)
                .expect("prepared documents always have chunks"),
            features: Some(self.features.clone()),
            label: self.label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    /// Tokenizer whose paragraphs are decimal counts: "300" encodes to 300
    /// distinct ids.
    struct CountingTokenizer;

    impl Tokenizer for CountingTokenizer {
        fn encode(&self, text: &str) -> Vec<u32> {
            let n: u32 = text.trim().parse().unwrap();
            (0..n).map(|i| 4 + i).collect()
        }
        fn vocab_size(&self) -> usize {
            usize::MAX
        }
    }

    fn doc(paragraphs: &[&str]) -> Document {
        Document {
            id: "d".into(),
            language: "en".into(),
            label: None,
            paragraphs: paragraphs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn chunk(pos: usize) -> EncodedChunk {
        EncodedChunk {
            token_ids: vec![CLS_ID, 10 + pos as u32, SEP_ID],
            doc_position: pos,
        }
    }

    #[test]
    fn windows_for_300_tokens() {
        assert_eq!(window_ranges(300, 126, 16), vec![0..126, 110..236, 220..300]);
        assert_eq!(window_ranges(126, 126, 16), vec![0..126]);
        assert_eq!(window_ranges(127, 126, 16), vec![0..126, 110..127]);
        assert!(window_ranges(0, 126, 16).is_empty());
    }

    #[test]
    fn encode_document_numbers_chunks_across_paragraphs() {
        let cfg = SamplerConfig::default();
        let chunks = encode_document(&doc(&["5", "300"]), &CountingTokenizer, &cfg).unwrap();
        assert_eq!(chunks.len(), 4);
        assert_eq!(chunks.iter().map(|c| c.doc_position).collect::<Vec<_>>(), [0, 1, 2, 3]);
        assert_eq!(chunks[0].token_ids.len(), 7);
        assert_eq!(chunks[1].token_ids.len(), 128);
        assert_eq!(chunks[3].body().len(), 80);
        let single = encode_document(&doc(&["126"]), &CountingTokenizer, &cfg).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].token_ids.len(), 128);
    }

    #[test]
    fn empty_paragraphs_are_skipped() {
        let chunks = encode_document(&doc(&["0", "3", "0"]), &CountingTokenizer, &SamplerConfig::default())
            .unwrap();
        assert_eq!(chunks.len(), 1);
        let d = doc(&["0"]);
        assert_eq!(
            PreparedDocument::new(&d, &CountingTokenizer, &SamplerConfig::default(), FeatureSet::NONE, None),
            Err(ChunkingError::NoChunks)
        );
    }

    #[test]
    fn invalid_sampler_configs() {
        let cfg = SamplerConfig {
            overlap: 126,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ChunkingError::OverlapTooLarge { .. })));
        assert_eq!(SamplerConfig::with_sample_size(0).validate(), Err(ChunkingError::ZeroSampleSize));
    }

    #[test]
    fn small_documents_contribute_everything() {
        let chunks: Vec<_> = (0..10).map(chunk).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_chunks(&chunks, 20, &mut rng).unwrap(), chunks);
        assert_eq!(sample_chunks(&[], 20, &mut rng), Err(ChunkingError::NoChunks));
    }

    #[test]
    fn sampling_is_deterministic_and_ordered() {
        let chunks: Vec<_> = (0..100).map(chunk).collect();
        let a = sample_chunks(&chunks, 48, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_chunks(&chunks, 48, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        for seed in 0..500 {
            let s = sample_chunks(&chunks, 48, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(s.len(), 48);
            assert!(s.windows(2).all(|w| w[0].doc_position < w[1].doc_position));
        }
    }

    #[test]
    fn length_feature_values() {
        let long = doc(&[&"x".repeat(18_000)]);
        let f = length_features(&long, FeatureSet::ALL);
        assert!((f.ln_app.unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(f.ln_np, Some(0.0));
        assert!((f.ln_nc.unwrap() - 18_000f64.ln()).abs() < 1e-12);
        assert!(length_features(&long, FeatureSet::NONE).is_empty());
        // a_pp < 1 is clamped before the log.
        let short = doc(&["abc"]);
        assert_eq!(length_features(&short, FeatureSet::ALL).ln_app, Some(0.0));
    }

    #[test]
    fn feature_order_and_parse() {
        let f = FeatureVector {
            ln_nc: Some(1.0),
            ln_np: Some(2.0),
            ln_app: Some(3.0),
        };
        assert_eq!(f.values(), [1.0, 2.0, 3.0]);
        assert_eq!(FeatureSet::parse("np,nc,app").unwrap(), FeatureSet::ALL);
        assert_eq!(FeatureSet::parse("-").unwrap(), FeatureSet::NONE);
        assert!(FeatureSet::parse("pages").is_err());
        assert_eq!(FeatureSet::ALL.label(), "n_p n_c a_pp");
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        let chunks: Vec<_> = (0..100).map(chunk).collect();
        let mut counts = [0usize; 100];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_chunks(&chunks, 48, &mut rng).unwrap();
            let distinct: HashSet<_> = s.iter().map(|c| c.doc_position).collect();
            assert_eq!(distinct.len(), 48);
            for c in s {
                counts[c.doc_position] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.48).abs() <= 0.05, "{freq}");
        }
    }
}
