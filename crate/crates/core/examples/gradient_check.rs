//! Checks backpropagation against central finite differences on a handful
//! of randomly sized small models.

use chunkwise::chunking::{ChunkSample, EncodedChunk, FeatureVector};
use chunkwise::tokenizer::{CLS_ID, SEP_ID};
use chunkwise::model::{gradient_check, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..5 {
        let heads = rng.gen_range(1..=2);
        let cfg = ModelConfig {
            vocab_size: rng.gen_range(6..20),
            // Layer norm over fewer than four values all but erases gradients.
            embed_dim: 2 * rng.gen_range(2..=3),
            encoder_layers: rng.gen_range(1..=2),
            encoder_heads: heads,
            encoder_ff_dim: rng.gen_range(2..8),
            lstm_hidden: rng.gen_range(2..6),
            n_classes: rng.gen_range(2..5),
            n_features: rng.gen_range(0..=3),
            dropout: 0.5,
            max_chunk_len: 8,
        };
        let model = Model::new(cfg.clone())?;
        let params = model.init_params(rng.gen());
        let chunks = (0..rng.gen_range(1..4))
            .map(|i| {
                let mut ids = vec![CLS_ID];
                ids.extend((0..rng.gen_range(1..=6)).map(|_| rng.gen_range(4..cfg.vocab_size as u32)));
                ids.push(SEP_ID);
                EncodedChunk { token_ids: ids, doc_position: i }
            })
            .collect();
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..5.0)).collect();
        let features = FeatureVector {
            ln_nc: (cfg.n_features > 0).then_some(v[0]),
            ln_np: (cfg.n_features > 1).then_some(v[1]),
            ln_app: (cfg.n_features > 2).then_some(v[2]),
        };
        let sample = ChunkSample { chunks, features: Some(features), label: None };
        let report = gradient_check(&model, &params, &sample, rng.gen_range(0..cfg.n_classes), 1e-5)?;
        println!(
            "trial {trial}: layers {} heads {} hidden {} features {} -> max relative error {:.2e}",
            cfg.encoder_layers,
            cfg.encoder_heads,
            cfg.lstm_hidden,
            cfg.n_features,
            report.max_relative_error()
        );
        for (group, err) in &report.groups {
            println!(
                "    {group:?}: {:.2e} over {} entries ({} too small, within {:.1e})",
                err.max_relative, err.checked, err.small_entries, err.max_small_abs
            );
        }
    }
    Ok(())
}
