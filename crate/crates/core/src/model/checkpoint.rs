//! Versioned JSON checkpoints and the inference bundle built from them.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, Model, ModelConfig, ModelError, ModelParams};
use crate::chunking::{ChunkSample, ChunkingError, FeatureSet, PreparedDocument, SamplerConfig};
use crate::corpus::Document;
use crate::tokenizer::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "chunkwise-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint has {labels} labels but the model has {classes} classes")]
    Labels { labels: usize, classes: usize },
}

/// Everything needed to classify new documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// Free-form identifier written into predictions.
    pub model_version: String,
    pub config: ModelConfig,
    pub features: FeatureSet,
    pub sampler: SamplerConfig,
    /// Class names indexed by class id.
    pub labels: Vec<String>,
    pub vocabulary: Vocabulary,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(ckpt.format));
        }
        Ok(ckpt)
    }
}

/// A loaded model ready for inference; shareable across threads.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub model: Model,
    pub params: ModelParams,
    pub vocabulary: Vocabulary,
    pub features: FeatureSet,
    pub sampler: SamplerConfig,
    pub labels: Vec<String>,
    pub model_version: String,
}

impl Classifier {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, CheckpointError> {
        let model = Model::new(ckpt.config)?;
        if ckpt.labels.len() != model.config().n_classes {
            return Err(CheckpointError::Labels {
                labels: ckpt.labels.len(),
                classes: model.config().n_classes,
            });
        }
        if ckpt.params.values.len() != model.param_count() {
            return Err(ModelError::ParamCount {
                expected: model.param_count(),
                got: ckpt.params.values.len(),
            }
            .into());
        }
        Ok(Self {
            model,
            params: ckpt.params,
            vocabulary: ckpt.vocabulary,
            features: ckpt.features,
            sampler: ckpt.sampler,
            labels: ckpt.labels,
            model_version: ckpt.model_version,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model_version: self.model_version.clone(),
            config: self.model.config().clone(),
            features: self.features,
            sampler: self.sampler.clone(),
            labels: self.labels.clone(),
            vocabulary: self.vocabulary.clone(),
            params: self.params.clone(),
        }
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    /// Chunks and features of `doc`; the label is resolved when known.
    pub fn prepare(&self, doc: &Document) -> Result<PreparedDocument, ChunkingError> {
        let label = doc.label.as_deref().and_then(|l| self.label_id(l));
        PreparedDocument::new(doc, &self.vocabulary, &self.sampler, self.features, label)
    }

    pub fn predict_sample(&self, sample: &ChunkSample) -> Result<Vec<f64>, ModelError> {
        Ok(self.model.classify(&self.params, sample, Mode::Eval)?.probabilities)
    }

    /// Samples `doc` once with `rng` and returns class probabilities.
    pub fn predict<R: Rng + ?Sized>(&self, doc: &PreparedDocument, rng: &mut R) -> Result<Vec<f64>, ModelError> {
        self.predict_sample(&doc.sample(self.sampler.sample_size, rng))
    }
}
