//! Chunk classifier: encoder, context pooler, LSTM aggregation and softmax
//! head, with hand-written backpropagation in double precision.
//!
//! For a sample of chunks `c_1..c_T` (in document order):
//!
//! ```text
//! e_t = Encoder(c_t)[CLS]
//! p_t = Dropout(GELU(W_pool e_t + b_pool))
//! h_T = LSTM(p_1..p_T)
//! y   = softmax(W_head [Dropout(h_T); features] + b_head)
//! ```

mod checkpoint;
mod encoder;
pub mod gradcheck;
mod layout;
mod lstm;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::{ChunkSample, EncodedChunk, MAX_CHUNK_LEN};

pub use checkpoint::{Checkpoint, CheckpointError, Classifier, CHECKPOINT_FORMAT};
pub use encoder::{ChunkEncoder, EncoderCache, TransformerEncoder};
pub use gradcheck::{gradient_check, gradient_check_in, GradientCheckReport};
pub use layout::{Init, Layout, ParamGroup, Tensor, TensorSpec};
pub use lstm::LstmCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ff_dim: usize,
    pub lstm_hidden: usize,
    pub n_classes: usize,
    pub n_features: usize,
    pub dropout: f64,
    pub max_chunk_len: usize,
}

/// Architecture sizes that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ff_dim: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub max_chunk_len: usize,
}

impl Default for ModelDims {
    /// A desk-scale encoder; the recurrent size and dropout rate match the
    /// full-size classifier.
    fn default() -> Self {
        Self {
            embed_dim: 32,
            encoder_layers: 1,
            encoder_heads: 2,
            encoder_ff_dim: 64,
            lstm_hidden: 128,
            dropout: 0.5,
            max_chunk_len: MAX_CHUNK_LEN,
        }
    }
}

impl ModelDims {
    pub fn config(&self, vocab_size: usize, n_classes: usize, n_features: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            encoder_layers: self.encoder_layers,
            encoder_heads: self.encoder_heads,
            encoder_ff_dim: self.encoder_ff_dim,
            lstm_hidden: self.lstm_hidden,
            n_classes,
            n_features,
            dropout: self.dropout,
            max_chunk_len: self.max_chunk_len,
        }
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_classes: usize, n_features: usize) -> Self {
        ModelDims::default().config(vocab_size, n_classes, n_features)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.encoder_heads == 0 {
            return fail("vocab_size, embed_dim and encoder_heads must be positive");
        }
        if self.embed_dim % self.encoder_heads != 0 {
            return fail("embed_dim must be divisible by encoder_heads");
        }
        if self.lstm_hidden == 0 {
            return fail("lstm_hidden must be at least 1");
        }
        if self.n_classes < 2 {
            return fail("n_classes must be at least 2");
        }
        if self.n_features > 3 {
            return fail("n_features must be 0..=3");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.max_chunk_len < 2 || self.encoder_ff_dim == 0 {
            return fail("max_chunk_len must be at least 2 and encoder_ff_dim positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("chunk of {len} tokens exceeds the maximum of {max}")]
    ChunkTooLong { len: usize, max: usize },
    #[error("empty chunk")]
    EmptyChunk,
    #[error("sample has no chunks")]
    EmptySample,
    #[error("model expects {expected} length features, sample has {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("parameter vector has {got} values, layout needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

/// All trainable values in one flat vector, addressed through [`Layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout is the identity.
    Eval,
    /// Dropout masks are drawn from a generator seeded with `dropout_seed`.
    Train { dropout_seed: u64 },
}

/// Intermediate activations of one classification.
pub struct ForwardTrace {
    encoder_caches: Vec<EncoderCache>,
    cls: Vec<Vec<f64>>,
    pool_pre: Vec<Vec<f64>>,
    pool_masks: Option<Vec<Vec<f64>>>,
    lstm: LstmCache,
    hidden_mask: Option<Vec<f64>>,
    head_input: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ForwardTrace {
    /// Context-pool vectors fed to the LSTM, after dropout.
    pub fn pooled(&self) -> &[Vec<f64>] {
        &self.lstm.inputs
    }

    pub fn final_hidden(&self) -> &[f64] {
        self.lstm.final_hidden()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Architecture: configuration, parameter layout and encoder.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    encoder: TransformerEncoder,
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let encoder = TransformerEncoder::new(&layout, config.embed_dim, config.encoder_heads, config.encoder_ff_dim);
        Ok(Self {
            config,
            layout,
            encoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Scaled-uniform initialization (`±1/sqrt(fan_in)`), layer-norm gains
    /// at one and offsets at zero.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total];
        for spec in &self.layout.specs {
            let slot = spec.tensor.of_mut(&mut values);
            match spec.init {
                Init::Scaled { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
                }
                Init::Ones => slot.fill(1.0),
                Init::Zeros => slot.fill(0.0),
            }
        }
        ModelParams { values }
    }

    fn check_params(&self, params: &ModelParams) -> Result<(), ModelError> {
        if params.values.len() != self.layout.total {
            return Err(ModelError::ParamCount {
                expected: self.layout.total,
                got: params.values.len(),
            });
        }
        Ok(())
    }

    /// Contextual embedding of the CLS position. The encoder has no dropout
    /// of its own, so the result does not depend on the mode.
    pub fn encoder_forward(&self, params: &ModelParams, chunk: &EncodedChunk) -> Result<Vec<f64>, ModelError> {
        self.check_params(params)?;
        Ok(self.encoder.forward(&params.values, &chunk.token_ids)?.0)
    }

    /// `GELU(W x + b)`, before dropout.
    pub fn context_pool(&self, params: &ModelParams, cls: &[f64]) -> Vec<f64> {
        let p = &params.values;
        ops::linear(cls, self.config.embed_dim, self.layout.pool_w.of(p), self.layout.pool_b.of(p))
            .into_iter()
            .map(ops::gelu)
            .collect()
    }

    fn lstm_weights<'a>(&self, p: &'a [f64]) -> lstm::LstmWeights<'a> {
        lstm::LstmWeights {
            wx: self.layout.lstm_wx.of(p),
            wh: self.layout.lstm_wh.of(p),
            b: self.layout.lstm_b.of(p),
            hidden: self.config.lstm_hidden,
            in_dim: self.config.embed_dim,
        }
    }

    /// Final hidden state of the LSTM over `sequence`.
    pub fn lstm_forward(&self, params: &ModelParams, sequence: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        if sequence.is_empty() {
            return Err(ModelError::EmptySample);
        }
        let cache = lstm::forward(&self.lstm_weights(&params.values), sequence.to_vec());
        Ok(cache.final_hidden().to_vec())
    }

    /// Class probabilities for one chunk sample.
    pub fn classify(&self, params: &ModelParams, sample: &ChunkSample, mode: Mode) -> Result<ForwardTrace, ModelError> {
        self.check_params(params)?;
        if sample.chunks.is_empty() {
            return Err(ModelError::EmptySample);
        }
        let features = sample.feature_values();
        if features.len() != self.config.n_features {
            return Err(ModelError::FeatureMismatch {
                expected: self.config.n_features,
                got: features.len(),
            });
        }
        let p = &params.values;
        let cfg = &self.config;
        let mut rng = match mode {
            Mode::Train { dropout_seed } if cfg.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            _ => None,
        };

        let mut encoder_caches = Vec::with_capacity(sample.chunks.len());
        let mut cls = Vec::with_capacity(sample.chunks.len());
        for chunk in &sample.chunks {
            let (out, cache) = self.encoder.forward(p, &chunk.token_ids)?;
            cls.push(out);
            encoder_caches.push(cache);
        }
        let pool_pre: Vec<Vec<f64>> = cls
            .iter()
            .map(|e| ops::linear(e, cfg.embed_dim, self.layout.pool_w.of(p), self.layout.pool_b.of(p)))
            .collect();
        let pool_masks: Option<Vec<Vec<f64>>> = rng
            .as_mut()
            .map(|r| pool_pre.iter().map(|_| dropout_mask(r, cfg.embed_dim, cfg.dropout)).collect());
        let pooled: Vec<Vec<f64>> = pool_pre
            .iter()
            .enumerate()
            .map(|(t, pre)| {
                pre.iter()
                    .enumerate()
                    .map(|(j, &v)| ops::gelu(v) * pool_masks.as_ref().map_or(1.0, |m| m[t][j]))
                    .collect()
            })
            .collect();

        let lstm = lstm::forward(&self.lstm_weights(p), pooled);
        let hidden_mask = rng.as_mut().map(|r| dropout_mask(r, cfg.lstm_hidden, cfg.dropout));
        let mut head_input: Vec<f64> = lstm
            .final_hidden()
            .iter()
            .enumerate()
            .map(|(j, &h)| h * hidden_mask.as_ref().map_or(1.0, |m| m[j]))
            .collect();
        head_input.extend_from_slice(&features);
        let logits = ops::linear(&head_input, head_input.len(), self.layout.head_w.of(p), self.layout.head_b.of(p));
        let probabilities = ops::softmax(&logits);

        Ok(ForwardTrace {
            encoder_caches,
            cls,
            pool_pre,
            pool_masks,
            lstm,
            hidden_mask,
            head_input,
            logits,
            probabilities,
        })
    }

    /// Cross-entropy loss `-ln p[label]` and its gradient for every
    /// parameter, laid out like the parameters.
    pub fn loss_and_gradients(
        &self,
        params: &ModelParams,
        sample: &ChunkSample,
        label: usize,
        mode: Mode,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.loss_and_gradients_impl(
            params,
            sample,
            label,
            mode,
            #[cfg(test)]
            lstm::GateFault::None,
        )
    }

    fn loss_and_gradients_impl(
        &self,
        params: &ModelParams,
        sample: &ChunkSample,
        label: usize,
        mode: Mode,
        #[cfg(test)] fault: lstm::GateFault,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let cfg = &self.config;
        if label >= cfg.n_classes {
            return Err(ModelError::LabelOutOfRange {
                label,
                n_classes: cfg.n_classes,
            });
        }
        let trace = self.classify(params, sample, mode)?;
        let loss = cross_entropy(&trace.logits, label);

        let p = &params.values;
        let lay = &self.layout;
        let mut g = vec![0.0; lay.total];

        // Head.
        let mut d_logits = trace.probabilities.clone();
        d_logits[label] -= 1.0;
        let mut d_head_in = vec![0.0; trace.head_input.len()];
        {
            let (dw, db) = encoder::split2(&mut g, lay.head_w, lay.head_b);
            ops::linear_backward(
                &trace.head_input,
                trace.head_input.len(),
                lay.head_w.of(p),
                &d_logits,
                Some(&mut d_head_in),
                dw,
                db,
            );
        }
        let mut dh: Vec<f64> = d_head_in[..cfg.lstm_hidden].to_vec();
        if let Some(mask) = &trace.hidden_mask {
            dh.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
        }

        // LSTM.
        let d_pooled = {
            let (head, rest) = g.split_at_mut(lay.lstm_wh.offset);
            let (wh, rest) = rest.split_at_mut(lay.lstm_wh.len());
            let grads = lstm::LstmGrads {
                wx: &mut head[lay.lstm_wx.range()],
                wh,
                b: &mut rest[..lay.lstm_b.len()],
            };
            let w = self.lstm_weights(p);
            #[cfg(test)]
            {
                lstm::backward_with_fault(&w, &trace.lstm, &dh, grads, fault)
            }
            #[cfg(not(test))]
            {
                lstm::backward(&w, &trace.lstm, &dh, grads)
            }
        };

        // Pooler and encoder.
        for (t, d_out) in d_pooled.iter().enumerate() {
            let d_pre: Vec<f64> = d_out
                .iter()
                .enumerate()
                .map(|(j, &d)| {
                    let m = trace.pool_masks.as_ref().map_or(1.0, |m| m[t][j]);
                    d * m * ops::gelu_grad(trace.pool_pre[t][j])
                })
                .collect();
            let mut d_cls = vec![0.0; cfg.embed_dim];
            {
                let (dw, db) = encoder::split2(&mut g, lay.pool_w, lay.pool_b);
                ops::linear_backward(&trace.cls[t], cfg.embed_dim, lay.pool_w.of(p), &d_pre, Some(&mut d_cls), dw, db);
            }
            self.encoder.backward(p, &trace.encoder_caches[t], &d_cls, &mut g);
        }
        Ok((loss, g))
    }

    /// Loss only, without building gradients.
    pub fn loss(&self, params: &ModelParams, sample: &ChunkSample, label: usize, mode: Mode) -> Result<f64, ModelError> {
        let trace = self.classify(params, sample, mode)?;
        Ok(cross_entropy(&trace.logits, label))
    }
}

/// `-ln softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[cfg(test)]
mod tests;
