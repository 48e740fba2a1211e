use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::chunking::{EncodedChunk, FeatureVector};
use crate::tokenizer::{CLS_ID, SEP_ID};

fn tiny_config(n_features: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        embed_dim: 4,
        encoder_layers: 1,
        encoder_heads: 2,
        encoder_ff_dim: 6,
        lstm_hidden: 3,
        n_classes: 3,
        n_features,
        dropout: 0.5,
        max_chunk_len: 8,
    }
}

fn random_sample(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n_chunks: usize) -> ChunkSample {
    let chunks = (0..n_chunks)
        .map(|i| {
            let body = rng.gen_range(1..=cfg.max_chunk_len - 2);
            let mut ids = vec![CLS_ID];
            ids.extend((0..body).map(|_| rng.gen_range(4..cfg.vocab_size as u32)));
            ids.push(SEP_ID);
            EncodedChunk {
                token_ids: ids,
                doc_position: i * 3,
            }
        })
        .collect();
    let vals: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..4.0)).collect();
    let features = FeatureVector {
        ln_nc: (cfg.n_features > 0).then_some(vals[0]),
        ln_np: (cfg.n_features > 1).then_some(vals[1]),
        ln_app: (cfg.n_features > 2).then_some(vals[2]),
    };
    ChunkSample {
        chunks,
        features: Some(features),
        label: None,
    }
}

fn set(model: &Model, params: &mut ModelParams, name: &str, f: impl Fn(usize, usize) -> f64) {
    let t = model.layout().spec(name).unwrap().tensor;
    let slot = t.of_mut(&mut params.values);
    for r in 0..t.rows {
        for c in 0..t.cols {
            slot[r * t.cols + c] = f(r, c);
        }
    }
}

fn identity(r: usize, c: usize) -> f64 {
    if r == c {
        1.0
    } else {
        0.0
    }
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config(0);
    assert!(cfg.validate().is_ok());
    cfg.embed_dim = 5;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(0);
    cfg.n_classes = 1;
    assert!(Model::new(cfg).is_err());
}

#[test]
fn layout_shapes_follow_config() {
    let cfg = tiny_config(2);
    let model = Model::new(cfg.clone()).unwrap();
    let lay = model.layout();
    assert_eq!(lay.head_w.rows, cfg.n_classes);
    assert_eq!(lay.head_w.cols, cfg.lstm_hidden + 2);
    assert_eq!(lay.lstm_wx.rows, 4 * cfg.lstm_hidden);
    let mut next = 0;
    for spec in &lay.specs {
        assert_eq!(spec.tensor.offset, next, "{}", spec.name);
        next += spec.tensor.len();
    }
    assert_eq!(next, lay.total);
    assert!(!lay.spec("layer0.ln1_g").unwrap().decay);
    assert!(!lay.spec("head_b").unwrap().decay);
    assert!(lay.spec("head_w").unwrap().decay);
}

#[test]
fn init_is_seeded_and_bounded() {
    let model = Model::new(tiny_config(3)).unwrap();
    let a = model.init_params(12);
    assert_eq!(a, model.init_params(12));
    assert_ne!(a, model.init_params(13));
    for spec in &model.layout().specs {
        let vals = spec.tensor.of(&a.values);
        match spec.init {
            Init::Scaled { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                assert!(vals.iter().all(|v| v.abs() <= bound));
            }
            Init::Ones => assert!(vals.iter().all(|&v| v == 1.0)),
            Init::Zeros => assert!(vals.iter().all(|&v| v == 0.0)),
        }
    }
}

#[test]
fn context_pool_is_exact_gelu() {
    let model = Model::new(tiny_config(0)).unwrap();
    let mut params = model.init_params(1);
    set(&model, &mut params, "pool_w", identity);
    set(&model, &mut params, "pool_b", |_, _| 0.0);
    assert_eq!(model.context_pool(&params, &[0.0; 4]), vec![0.0; 4]);
    let out = model.context_pool(&params, &[1.0, 0.0, 0.0, 0.0]);
    assert!((out[0] - 0.841_344_746_068_543).abs() < 1e-12);
    assert_eq!(&out[1..], &[0.0; 3]);
}

fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn lstm_matches_scalar_loop() {
    let model = Model::new(tiny_config(0)).unwrap();
    let params = model.init_params(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let got = model.lstm_forward(&params, &seq).unwrap();

    let lay = model.layout();
    let wx = lay.lstm_wx.of(&params.values);
    let wh = lay.lstm_wh.of(&params.values);
    let b = lay.lstm_b.of(&params.values);
    let (h_n, d) = (3, 4);
    let mut h = [0.0f64; 3];
    let mut c = [0.0f64; 3];
    for x in &seq {
        let pre = |gate: usize, j: usize| -> f64 {
            let row = gate * h_n + j;
            let mut z = b[row];
            for k in 0..d {
                z += wx[row * d + k] * x[k];
            }
            for k in 0..h_n {
                z += wh[row * h_n + k] * h[k];
            }
            z
        };
        let mut h_new = [0.0; 3];
        for j in 0..h_n {
            let i = sigmoid_ref(pre(0, j));
            let f = sigmoid_ref(pre(1, j));
            let g = pre(2, j).tanh();
            let o = sigmoid_ref(pre(3, j));
            c[j] = f * c[j] + i * g;
            h_new[j] = o * c[j].tanh();
        }
        h = h_new;
    }
    for j in 0..3 {
        assert!((got[j] - h[j]).abs() < 1e-12);
    }
}

#[test]
fn lstm_zero_weights_give_zero_state() {
    let model = Model::new(tiny_config(0)).unwrap();
    let mut params = model.init_params(5);
    for name in ["lstm_wx", "lstm_wh", "lstm_b"] {
        set(&model, &mut params, name, |_, _| 0.0);
    }
    let h = model.lstm_forward(&params, &[vec![1.0; 4], vec![-2.0; 4]]).unwrap();
    assert_eq!(h, vec![0.0; 3]);
    assert!(model.lstm_forward(&params, &[]).is_err());
}

#[test]
fn single_step_lstm_equals_one_recurrence() {
    let model = Model::new(tiny_config(0)).unwrap();
    let params = model.init_params(2);
    let x = vec![0.3, -0.2, 0.9, 0.1];
    let once = model.lstm_forward(&params, &[x.clone()]).unwrap();
    let twice = model.lstm_forward(&params, &[x.clone(), x]).unwrap();
    assert_eq!(once.len(), 3);
    assert_ne!(once, twice);
}

/// Single layer, single head, identity Q/K/V/O, zero feed-forward: the CLS
/// output is computed by hand from embeddings.
#[test]
fn encoder_single_layer_oracle() {
    let mut cfg = tiny_config(0);
    cfg.encoder_heads = 1;
    let model = Model::new(cfg).unwrap();
    let mut params = model.init_params(3);
    for name in ["layer0.wq", "layer0.wk", "layer0.wv", "layer0.wo"] {
        set(&model, &mut params, name, identity);
    }
    for name in ["layer0.bq", "layer0.bk", "layer0.bv", "layer0.bo", "layer0.w2", "layer0.b2"] {
        set(&model, &mut params, name, |_, _| 0.0);
    }
    let tokens = [CLS_ID, 7, 5, SEP_ID];
    let emb = model.layout().tok_emb.of(&params.values).to_vec();
    let pos = model.layout().pos_emb.of(&params.values).to_vec();
    let d = 4;
    let x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|k| emb[id as usize * d + k] + pos[t * d + k]).collect())
        .collect();
    let norm = |v: &[f64]| -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
        v.iter().map(|a| (a - mean) / (var + 1e-5).sqrt()).collect()
    };
    let a: Vec<Vec<f64>> = x.iter().map(|r| norm(r)).collect();
    let scores: Vec<f64> = a
        .iter()
        .map(|aj| (0..d).map(|k| a[0][k] * aj[k]).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut mid = x[0].clone();
    for (j, aj) in a.iter().enumerate() {
        let w = (scores[j] - max).exp() / z;
        for k in 0..d {
            mid[k] += w * aj[k];
        }
    }
    let expected = norm(&mid);
    let chunk = EncodedChunk {
        token_ids: tokens.to_vec(),
        doc_position: 0,
    };
    let got = model.encoder_forward(&params, &chunk).unwrap();
    assert_eq!(got.len(), 4);
    for k in 0..d {
        assert!((got[k] - expected[k]).abs() < 1e-12);
    }

    // A lone CLS token attends only to itself, and the residual plus its own
    // normalization is an affine rescaling, so the final norm undoes it up
    // to the variance epsilon.
    let lone = EncodedChunk {
        token_ids: vec![CLS_ID],
        doc_position: 0,
    };
    let got = model.encoder_forward(&params, &lone).unwrap();
    let expected = norm(&x[0]);
    for k in 0..d {
        assert!((got[k] - expected[k]).abs() < 1e-3);
    }
}

#[test]
fn encoder_rejects_bad_chunks() {
    let model = Model::new(tiny_config(0)).unwrap();
    let params = model.init_params(3);
    let chunk = |ids: Vec<u32>| EncodedChunk {
        token_ids: ids,
        doc_position: 0,
    };
    assert_eq!(
        model.encoder_forward(&params, &chunk(vec![CLS_ID, 11, SEP_ID])),
        Err(ModelError::TokenOutOfRange { id: 11, vocab_size: 11 })
    );
    assert_eq!(
        model.encoder_forward(&params, &chunk(vec![4; 9])),
        Err(ModelError::ChunkTooLong { len: 9, max: 8 })
    );
    assert_eq!(model.encoder_forward(&params, &chunk(vec![])), Err(ModelError::EmptyChunk));
}

#[test]
fn zero_head_gives_uniform_and_ln_c_loss() {
    let cfg = tiny_config(3);
    let model = Model::new(cfg).unwrap();
    let mut params = model.init_params(4);
    set(&model, &mut params, "head_w", |_, _| 0.0);
    set(&model, &mut params, "head_b", |_, _| 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = random_sample(&mut rng, model.config(), 3);
    let trace = model.classify(&params, &sample, Mode::Eval).unwrap();
    for p in &trace.probabilities {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let loss = model.loss(&params, &sample, 1, Mode::Eval).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_prediction_has_near_zero_loss() {
    let model = Model::new(tiny_config(0)).unwrap();
    let mut params = model.init_params(4);
    set(&model, &mut params, "head_w", |_, _| 0.0);
    set(&model, &mut params, "head_b", |_, c| if c == 2 { 50.0 } else { 0.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = random_sample(&mut rng, model.config(), 2);
    assert!(model.loss(&params, &sample, 2, Mode::Eval).unwrap() < 1e-20);
}

#[test]
fn probabilities_are_normalized() {
    let model = Model::new(tiny_config(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..20 {
        let params = model.init_params(seed);
        let sample = random_sample(&mut rng, model.config(), 1 + seed as usize % 4);
        let trace = model.classify(&params, &sample, Mode::Train { dropout_seed: seed }).unwrap();
        assert!((trace.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(trace.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(trace.pooled().len(), sample.chunks.len());
        assert_eq!(trace.final_hidden().len(), 3);
    }
}

#[test]
fn feature_count_must_match() {
    let model = Model::new(tiny_config(3)).unwrap();
    let params = model.init_params(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sample = random_sample(&mut rng, model.config(), 2);
    sample.features = None;
    assert_eq!(
        model.classify(&params, &sample, Mode::Eval).err(),
        Some(ModelError::FeatureMismatch { expected: 3, got: 0 })
    );
    sample.chunks.clear();
    assert_eq!(model.classify(&params, &sample, Mode::Eval).err(), Some(ModelError::EmptySample));
}

#[test]
fn head_bias_gradient_is_p_minus_onehot() {
    let model = Model::new(tiny_config(3)).unwrap();
    let params = model.init_params(6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = random_sample(&mut rng, model.config(), 3);
    let mode = Mode::Train { dropout_seed: 77 };
    let trace = model.classify(&params, &sample, mode).unwrap();
    let (_, grads) = model.loss_and_gradients(&params, &sample, 1, mode).unwrap();
    let gb = model.layout().head_b.of(&grads);
    for (c, g) in gb.iter().enumerate() {
        let onehot = if c == 1 { 1.0 } else { 0.0 };
        assert!((g - (trace.probabilities[c] - onehot)).abs() < 1e-15);
    }
    assert!(model.loss_and_gradients(&params, &sample, 3, mode).is_err());
}

#[test]
fn eval_mode_is_deterministic_and_dropout_free() {
    let model = Model::new(tiny_config(1)).unwrap();
    let params = model.init_params(6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = random_sample(&mut rng, model.config(), 4);
    let a = model.classify(&params, &sample, Mode::Eval).unwrap().probabilities;
    let b = model.classify(&params, &sample, Mode::Eval).unwrap().probabilities;
    assert_eq!(a, b);

    let t1 = model.classify(&params, &sample, Mode::Train { dropout_seed: 1 }).unwrap().probabilities;
    let t1b = model.classify(&params, &sample, Mode::Train { dropout_seed: 1 }).unwrap().probabilities;
    let t2 = model.classify(&params, &sample, Mode::Train { dropout_seed: 2 }).unwrap().probabilities;
    assert_eq!(t1, t1b);
    assert_ne!(t1, t2);
    assert_ne!(t1, a);

    let mut cfg = tiny_config(1);
    cfg.dropout = 0.0;
    let plain = Model::new(cfg).unwrap();
    let t = plain.classify(&params, &sample, Mode::Train { dropout_seed: 1 }).unwrap().probabilities;
    assert_eq!(t, a);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for n_features in 0..=3 {
        let model = Model::new(tiny_config(n_features)).unwrap();
        let params = model.init_params(rng.gen());
        let sample = random_sample(&mut rng, model.config(), 3);
        let report = gradient_check(&model, &params, &sample, rng.gen_range(0..3), 1e-5).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.groups.len(), 7);
    }
}

#[test]
fn gradients_match_with_dropout_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let model = Model::new(tiny_config(2)).unwrap();
    let params = model.init_params(3);
    let sample = random_sample(&mut rng, model.config(), 4);
    let report = gradcheck::gradient_check_in(&model, &params, &sample, 2, 1e-5, Mode::Train { dropout_seed: 5 }).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn gradient_check_catches_corrupted_forget_gate() {
    let model = Model::new(tiny_config(0)).unwrap();
    let params = model.init_params(10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample = random_sample(&mut rng, model.config(), 3);
    let (_, bad) = model
        .loss_and_gradients_impl(&params, &sample, 0, Mode::Eval, lstm::GateFault::ForgetGate)
        .unwrap();
    let report = gradcheck::compare(&model, &params, &sample, 0, 1e-5, Mode::Eval, &bad).unwrap();
    assert!(report.groups[&ParamGroup::Lstm].max_relative > 1e-2, "{report:?}");
    assert!(!report.passes(1e-4));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = crate::tokenizer::Vocabulary::build(["a b c"], &Default::default()).unwrap();
    let mut cfg = tiny_config(0);
    cfg.vocab_size = vocab.len();
    let model = Model::new(cfg.clone()).unwrap();
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        model_version: "test".into(),
        config: cfg,
        features: crate::chunking::FeatureSet::NONE,
        sampler: Default::default(),
        labels: vec!["x".into(), "y".into(), "z".into()],
        vocabulary: vocab,
        params: model.init_params(1),
    };
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let clf = Classifier::from_checkpoint(back).unwrap();
    assert_eq!(clf.to_checkpoint(), ckpt);

    let mut wrong = ckpt.clone();
    wrong.format = "other/9".into();
    wrong.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Format(_))));
}
