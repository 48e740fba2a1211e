//! Shows how one document becomes chunks and how a sample is drawn.

use chunkwise::chunking::{length_features, FeatureSet, PreparedDocument, SamplerConfig};
use chunkwise::corpus::synthetic::{generate, SyntheticConfig};
use chunkwise::tokenizer::{TokenizerConfig, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SyntheticConfig { docs_per_class: 2, ..SyntheticConfig::default() });
    let doc = &corpus[0];
    let vocab = Vocabulary::build(corpus.iter().flat_map(|d| d.paragraphs.iter().map(String::as_str)), &TokenizerConfig::default())?;

    // Short windows make the overlap visible.
    let sampler = SamplerConfig { max_chunk_len: 10, overlap: 2, ..SamplerConfig::with_sample_size(6) };
    let prepared = PreparedDocument::new(doc, &vocab, &sampler, FeatureSet::ALL, None)?;
    println!(
        "{}: {} paragraphs, {} characters, {} chunks",
        doc.id,
        doc.paragraph_count(),
        doc.char_count(),
        prepared.chunks.len()
    );
    for chunk in prepared.chunks.iter().take(4) {
        let words: Vec<&str> = chunk.body().iter().map(|&id| vocab.token(id).unwrap_or("?")).collect();
        println!("  chunk {:>3}: {}", chunk.doc_position, words.join(" "));
    }

    let features = length_features(doc, FeatureSet::ALL);
    println!("features ln(n_c, n_p, a_pp) = {:.3?}", features.values());

    for seed in [1, 2] {
        let sample = prepared.sample(sampler.sample_size, &mut ChaCha8Rng::seed_from_u64(seed));
        println!("seed {seed}: positions {:?}", sample.positions());
    }
    Ok(())
}
