//! Placement of every parameter tensor inside one flat vector.

use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// A row-major matrix (or vector, with `rows == 1`) inside the flat
/// parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    #[inline]
    pub fn of<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.range()]
    }

    #[inline]
    pub fn of_mut<'a>(&self, data: &'a mut [f64]) -> &'a mut [f64] {
        &mut data[self.range()]
    }
}

/// Parameter families reported separately by gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Embeddings,
    Attention,
    FeedForward,
    LayerNorm,
    Pooler,
    Lstm,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Scaled { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    /// Weight decay applies (false for biases and layer-norm parameters).
    pub decay: bool,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerTensors {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<EncoderLayerTensors>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub pool_w: Tensor,
    pub pool_b: Tensor,
    /// Input-to-gates weights, `4H x d`, gate order input, forget, cell, output.
    pub lstm_wx: Tensor,
    /// Hidden-to-gates weights, `4H x H`.
    pub lstm_wh: Tensor,
    pub lstm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub specs: Vec<TensorSpec>,
    pub total: usize,
}

struct Builder {
    specs: Vec<TensorSpec>,
    next: usize,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, init: Init) -> Tensor {
        let tensor = Tensor {
            offset: self.next,
            rows,
            cols,
        };
        self.next += tensor.len();
        let decay = matches!(init, Init::Scaled { .. }) && rows > 1 && group != ParamGroup::LayerNorm;
        self.specs.push(TensorSpec {
            name,
            group,
            tensor,
            decay,
            init,
        });
        tensor
    }

    fn weight(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize) -> Tensor {
        self.add(name, group, rows, cols, Init::Scaled { fan_in: cols })
    }

    fn bias(&mut self, name: String, group: ParamGroup, len: usize, fan_in: usize) -> Tensor {
        self.add(name, group, 1, len, Init::Scaled { fan_in })
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use ParamGroup::*;
        let d = cfg.embed_dim;
        let h = cfg.lstm_hidden;
        let mut b = Builder {
            specs: Vec::new(),
            next: 0,
        };
        let tok_emb = b.add("tok_emb".into(), Embeddings, cfg.vocab_size, d, Init::Scaled { fan_in: d });
        let pos_emb = b.add("pos_emb".into(), Embeddings, cfg.max_chunk_len, d, Init::Scaled { fan_in: d });
        let layers = (0..cfg.encoder_layers)
            .map(|l| {
                let n = |s: &str| format!("layer{l}.{s}");
                EncoderLayerTensors {
                    ln1_g: b.add(n("ln1_g"), LayerNorm, 1, d, Init::Ones),
                    ln1_b: b.add(n("ln1_b"), LayerNorm, 1, d, Init::Zeros),
                    wq: b.weight(n("wq"), Attention, d, d),
                    bq: b.bias(n("bq"), Attention, d, d),
                    wk: b.weight(n("wk"), Attention, d, d),
                    bk: b.bias(n("bk"), Attention, d, d),
                    wv: b.weight(n("wv"), Attention, d, d),
                    bv: b.bias(n("bv"), Attention, d, d),
                    wo: b.weight(n("wo"), Attention, d, d),
                    bo: b.bias(n("bo"), Attention, d, d),
                    ln2_g: b.add(n("ln2_g"), LayerNorm, 1, d, Init::Ones),
                    ln2_b: b.add(n("ln2_b"), LayerNorm, 1, d, Init::Zeros),
                    w1: b.weight(n("w1"), FeedForward, cfg.encoder_ff_dim, d),
                    b1: b.bias(n("b1"), FeedForward, cfg.encoder_ff_dim, d),
                    w2: b.weight(n("w2"), FeedForward, d, cfg.encoder_ff_dim),
                    b2: b.bias(n("b2"), FeedForward, d, cfg.encoder_ff_dim),
                }
            })
            .collect();
        let lnf_g = b.add("lnf_g".into(), LayerNorm, 1, d, Init::Ones);
        let lnf_b = b.add("lnf_b".into(), LayerNorm, 1, d, Init::Zeros);
        let pool_w = b.weight("pool_w".into(), Pooler, d, d);
        let pool_b = b.bias("pool_b".into(), Pooler, d, d);
        let lstm_wx = b.add("lstm_wx".into(), Lstm, 4 * h, d, Init::Scaled { fan_in: h });
        let lstm_wh = b.weight("lstm_wh".into(), Lstm, 4 * h, h);
        let lstm_b = b.bias("lstm_b".into(), Lstm, 4 * h, h);
        let head_in = h + cfg.n_features;
        let head_w = b.weight("head_w".into(), Head, cfg.n_classes, head_in);
        let head_b = b.bias("head_b".into(), Head, cfg.n_classes, head_in);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            pool_w,
            pool_b,
            lstm_wx,
            lstm_wh,
            lstm_b,
            head_w,
            head_b,
            total: b.next,
            specs: b.specs,
        }
    }

    /// Per-element weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for spec in &self.specs {
            if spec.decay {
                mask[spec.tensor.range()].fill(true);
            }
        }
        mask
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}
