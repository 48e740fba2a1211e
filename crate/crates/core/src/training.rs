//! Lookahead-wrapped AdamW with a linear warm-up schedule, gradient
//! accumulation, per-epoch chunk resampling and early stopping on the dev
//! weighted F-score.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunking::{ChunkSample, ChunkingError, FeatureSet, PreparedDocument, SamplerConfig};
use crate::corpus::Document;
use crate::evaluation::{evaluate_once, weighted_f, ModelView};
use crate::model::{Checkpoint, Mode, Model, ModelDims, ModelError, ModelParams, CHECKPOINT_FORMAT};
use crate::seed::{derive, derive_named, stable_hash};
use crate::tokenizer::{TokenizerConfig, VocabError, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Documents per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub seed: u64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 35,
            patience: 5,
            lr: 2e-5,
            warmup_ratio: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 8,
            grad_accum: 4,
            seed: 12,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("no labeled training documents")]
    EmptyTrain,
    #[error("no labeled dev documents")]
    EmptyDev,
    #[error("need at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("document {id}: {source}")]
    Chunking { id: String, source: ChunkingError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocabulary(#[from] VocabError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return fail("max_epochs, patience, batch_size and grad_accum must be positive");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if !(self.lr > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return fail("lr and adam_eps must be positive, weight_decay non-negative");
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail("warmup_ratio must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.lookahead_k == 0 || !(0.0..=1.0).contains(&self.lookahead_alpha) {
            return fail("lookahead_k must be positive and lookahead_alpha in [0, 1]");
        }
        self.sampler
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    /// Documents per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn steps_per_epoch(&self, n_docs: usize) -> usize {
        n_docs.div_ceil(self.effective_batch())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        ((self.warmup_ratio * total_steps as f64).ceil() as usize).max(1)
    }
}

/// Linear ramp from 0 to `lr` over the warm-up steps, then linear decay to
/// 0 at `total_steps`. Steps count from 0.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps(total_steps);
    if step < warmup {
        cfg.lr * step as f64 / warmup as f64
    } else if step >= total_steps {
        0.0
    } else {
        cfg.lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn from_config(n_params: usize, cfg: &TrainConfig) -> Self {
        Self::new(n_params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// `θ ← θ - lr (m̂ / (√v̂ + ε) + wd θ)`; decay only where `decay` is set
    /// (all parameters when `decay` is `None`). Nothing changes if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, decay: Option<&[bool]>) -> Result<(), TrainError> {
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { index });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let wd = if decay.map_or(true, |d| d[i]) { self.weight_decay } else { 0.0 };
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * params[i]);
        }
        Ok(())
    }
}

/// Slow weights synchronized with the fast ones every `k` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lookahead {
    pub slow: Vec<f64>,
    pub k: usize,
    pub alpha: f64,
    pub counter: usize,
}

impl Lookahead {
    pub fn new(initial: &[f64], k: usize, alpha: f64) -> Self {
        Self {
            slow: initial.to_vec(),
            k,
            alpha,
            counter: 0,
        }
    }

    /// Call after every fast step. Returns true when a synchronization
    /// happened.
    pub fn step(&mut self, fast: &mut [f64]) -> bool {
        self.counter += 1;
        if self.counter % self.k != 0 {
            return false;
        }
        for (s, f) in self.slow.iter_mut().zip(fast.iter_mut()) {
            *s += self.alpha * (*f - *s);
            *f = *s;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    /// `(epoch, score)` of the best epoch so far; epochs count from 1.
    pub best: Option<(usize, f64)>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if score <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_weighted_f: f64,
    /// Learning rate of the last optimizer step of the epoch.
    pub lr: f64,
    pub steps: usize,
    pub wall_time: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch log always serializes")
    }
}

/// Optimizer state between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamW,
    pub lookahead: Lookahead,
    pub step: usize,
    pub stopping: EarlyStopping,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_dev_f: f64,
    pub log: Vec<EpochLog>,
    pub total_steps: usize,
}

/// Chunk sample of a training document in a given epoch.
pub fn epoch_sample(doc: &PreparedDocument, epoch: usize, sample_size: usize, seed: u64) -> ChunkSample {
    let epoch_seed = derive(derive_named(seed, "epoch"), epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(epoch_seed, stable_hash(&doc.id)));
    doc.sample(sample_size, &mut rng)
}

/// Seed of the single dev resample used after every epoch.
pub fn dev_seed(seed: u64) -> u64 {
    derive_named(seed, "dev")
}

/// Trains `model` from a seeded initialization. `on_epoch` sees every
/// epoch's log entry as soon as it is complete.
pub fn train(
    model: &Model,
    train_docs: &[PreparedDocument],
    dev_docs: &[PreparedDocument],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    let train_docs: Vec<&PreparedDocument> = train_docs.iter().filter(|d| d.label.is_some()).collect();
    if train_docs.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if dev_docs.iter().all(|d| d.label.is_none()) {
        return Err(TrainError::EmptyDev);
    }
    let init = model.init_params(cfg.seed);
    let n = init.values.len();
    let decay = model.layout().decay_mask();
    let mut state = TrainState {
        lookahead: Lookahead::new(&init.values, cfg.lookahead_k, cfg.lookahead_alpha),
        params: init,
        adam: AdamW::from_config(n, cfg),
        step: 0,
        stopping: EarlyStopping::new(cfg.patience),
        log: Vec::new(),
    };
    let steps_per_epoch = cfg.steps_per_epoch(train_docs.len());
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let mut best_params = state.params.clone();
    let started = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = derive(derive_named(cfg.seed, "epoch"), epoch as u64);
        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_named(epoch_seed, "order")));

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.effective_batch()) {
            let params = &state.params;
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let doc = train_docs[i];
                    let sample = epoch_sample(doc, epoch, cfg.sampler.sample_size, cfg.seed);
                    let mode = Mode::Train {
                        dropout_seed: derive(derive_named(epoch_seed, "dropout"), stable_hash(&doc.id)),
                    };
                    model.loss_and_gradients(params, &sample, doc.label.expect("filtered to labeled"), mode)
                })
                .collect::<Result<_, _>>()?;
            let mut grads = vec![0.0; n];
            for (loss, g) in &results {
                loss_sum += loss;
                grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);

            lr = lr_at(state.step, total_steps, cfg);
            state.adam.step(&mut state.params.values, &grads, lr, Some(&decay))?;
            state.lookahead.step(&mut state.params.values);
            state.step += 1;
        }

        let view = ModelView {
            model,
            params: &state.params,
            sample_size: cfg.sampler.sample_size,
        };
        let dev_f = weighted_f(&evaluate_once(&view, dev_docs, dev_seed(cfg.seed))?);
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_docs.len() as f64,
            dev_weighted_f: dev_f,
            lr,
            steps: state.step,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev F {:.4} lr {:.2e}",
            entry.train_loss,
            entry.dev_weighted_f,
            entry.lr
        );
        on_epoch(&entry);
        state.log.push(entry);
        match state.stopping.observe(epoch, dev_f) {
            StopDecision::Improved => best_params = state.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let (best_epoch, best_dev_f) = state.stopping.best.expect("at least one epoch ran");
    Ok(TrainResult {
        best_params,
        best_epoch,
        best_dev_f,
        log: state.log,
        total_steps,
    })
}

/// Everything about a classifier that is chosen before seeing data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSetup {
    pub tokenizer: TokenizerConfig,
    pub features: FeatureSet,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub model_version: String,
}

impl Default for ClassifierSetup {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            features: FeatureSet::ALL,
            model: ModelDims::default(),
            train: TrainConfig::default(),
            model_version: "chunkwise-0.1".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub result: TrainResult,
}

/// Prepares documents with `vocab` and the label list; documents whose
/// label is missing or unknown get no label id.
pub fn prepare_documents(
    docs: &[Document],
    vocab: &Vocabulary,
    labels: &[String],
    sampler: &SamplerConfig,
    features: FeatureSet,
) -> Result<Vec<PreparedDocument>, TrainError> {
    docs.par_iter()
        .map(|doc| {
            let label = doc.label.as_deref().and_then(|l| labels.iter().position(|x| x == l));
            PreparedDocument::new(doc, vocab, sampler, features, label).map_err(|source| TrainError::Chunking {
                id: doc.id.clone(),
                source,
            })
        })
        .collect()
}

/// Vocabulary, labels and seeded initial weights for `train_set`, packaged
/// as a checkpoint before any training.
pub fn initial_checkpoint(train_set: &[Document], setup: &ClassifierSetup, seed: u64) -> Result<Checkpoint, TrainError> {
    let labels: Vec<String> = train_set
        .iter()
        .filter_map(|d| d.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() < 2 {
        return Err(TrainError::TooFewClasses(labels.len()));
    }
    let vocab = Vocabulary::build(
        train_set.iter().flat_map(|d| d.paragraphs.iter().map(String::as_str)),
        &setup.tokenizer,
    )?;
    let config = setup.model.config(vocab.len(), labels.len(), setup.features.len());
    let model = Model::new(config.clone())?;
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        model_version: setup.model_version.clone(),
        config,
        features: setup.features,
        sampler: setup.train.sampler.clone(),
        labels,
        vocabulary: vocab,
        params: model.init_params(seed),
    })
}

/// Builds the vocabulary and label set from `train`, trains, and packages
/// the best weights as a checkpoint.
pub fn fit(
    train_set: &[Document],
    dev_set: &[Document],
    setup: &ClassifierSetup,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome, TrainError> {
    let mut checkpoint = initial_checkpoint(train_set, setup, setup.train.seed)?;
    let (vocab, labels, sampler) = (&checkpoint.vocabulary, &checkpoint.labels, &checkpoint.sampler);
    let train_docs = prepare_documents(train_set, vocab, labels, sampler, setup.features)?;
    let dev_docs = prepare_documents(dev_set, vocab, labels, sampler, setup.features)?;
    let model = Model::new(checkpoint.config.clone())?;
    let result = train(&model, &train_docs, &dev_docs, &setup.train, on_epoch)?;
    checkpoint.params = result.best_params.clone();
    Ok(FitOutcome { checkpoint, result })
}
