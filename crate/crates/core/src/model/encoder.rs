//! Pre-norm transformer encoder over one chunk, returning the contextual
//! embedding at the CLS position.

use super::layout::{EncoderLayerTensors, Layout, Tensor};
use super::ops::{
    dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows,
    LayerNormCache,
};
use super::ModelError;

/// Maps a chunk to one vector; the classifier is written against this trait
/// so the encoder can be replaced.
pub trait ChunkEncoder: Send + Sync {
    type Cache: Send;

    fn output_dim(&self) -> usize;

    fn forward(&self, params: &[f64], token_ids: &[u32]) -> Result<(Vec<f64>, Self::Cache), ModelError>;

    /// Adds `d loss / d params` to `grads` given the gradient of the output.
    fn backward(&self, params: &[f64], cache: &Self::Cache, d_out: &[f64], grads: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub(crate) tok_emb: Tensor,
    pub(crate) pos_emb: Tensor,
    pub(crate) layers: Vec<EncoderLayerTensors>,
    pub(crate) lnf_g: Tensor,
    pub(crate) lnf_b: Tensor,
    pub(crate) dim: usize,
    pub(crate) heads: usize,
    pub(crate) ff_dim: usize,
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: LayerNormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, `heads x L x L`.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LayerNormCache,
    b: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
}

pub struct EncoderCache {
    token_ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
}

impl TransformerEncoder {
    pub fn new(layout: &Layout, dim: usize, heads: usize, ff_dim: usize) -> Self {
        Self {
            tok_emb: layout.tok_emb,
            pos_emb: layout.pos_emb,
            layers: layout.layers.clone(),
            lnf_g: layout.lnf_g,
            lnf_b: layout.lnf_b,
            dim,
            heads,
            ff_dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn layer_forward(&self, p: &[f64], t: &EncoderLayerTensors, x: Vec<f64>, len: usize) -> (Vec<f64>, LayerCache) {
        let d = self.dim;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let (a, ln1) = layer_norm(&x, d, t.ln1_g.of(p), t.ln1_b.of(p));
        let q = linear(&a, d, t.wq.of(p), t.bq.of(p));
        let k = linear(&a, d, t.wk.of(p), t.bk.of(p));
        let v = linear(&a, d, t.wv.of(p), t.bv.of(p));

        let mut probs = vec![0.0; self.heads * len * len];
        let mut o = vec![0.0; len * d];
        for h in 0..self.heads {
            let cols = h * hd..(h + 1) * hd;
            let ph = &mut probs[h * len * len..(h + 1) * len * len];
            for i in 0..len {
                let qi = &q[i * d..][cols.clone()];
                for j in 0..len {
                    ph[i * len + j] = dot(qi, &k[j * d..][cols.clone()]) * scale;
                }
            }
            softmax_rows(ph, len);
            for i in 0..len {
                for j in 0..len {
                    let w = ph[i * len + j];
                    let vj = &v[j * d..][cols.clone()];
                    for (c, val) in cols.clone().zip(vj) {
                        o[i * d + c] += w * val;
                    }
                }
            }
        }
        let attn = linear(&o, d, t.wo.of(p), t.bo.of(p));
        let x_mid: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();

        let (b, ln2) = layer_norm(&x_mid, d, t.ln2_g.of(p), t.ln2_b.of(p));
        let u = linear(&b, d, t.w1.of(p), t.b1.of(p));
        let z: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let f = linear(&z, self.ff_dim, t.w2.of(p), t.b2.of(p));
        let out: Vec<f64> = x_mid.iter().zip(&f).map(|(a, b)| a + b).collect();

        let cache = LayerCache {
            x_in: x,
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            b,
            u,
            z,
        };
        (out, cache)
    }

    /// Backpropagates through one layer; `dx` holds the output gradient on
    /// entry and the input gradient on exit.
    fn layer_backward(&self, p: &[f64], t: &EncoderLayerTensors, c: &LayerCache, dx: &mut [f64], g: &mut [f64]) {
        let d = self.dim;
        let ff = self.ff_dim;
        let len = c.x_in.len() / d;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        // Feed-forward block; the residual passes dx through unchanged.
        let mut dz = vec![0.0; len * ff];
        {
            let (dw2, db2) = split2(g, t.w2, t.b2);
            linear_backward(&c.z, ff, t.w2.of(p), dx, Some(&mut dz), dw2, db2);
        }
        let du: Vec<f64> = dz.iter().zip(&c.u).map(|(d, &u)| d * gelu_grad(u)).collect();
        let mut db_in = vec![0.0; len * d];
        {
            let (dw1, db1) = split2(g, t.w1, t.b1);
            linear_backward(&c.b, d, t.w1.of(p), &du, Some(&mut db_in), dw1, db1);
        }
        {
            let (dg, dbeta) = split2(g, t.ln2_g, t.ln2_b);
            layer_norm_backward(&c.ln2, d, t.ln2_g.of(p), &db_in, dx, dg, dbeta);
        }

        // Attention block.
        let mut d_o = vec![0.0; len * d];
        {
            let (dwo, dbo) = split2(g, t.wo, t.bo);
            linear_backward(&c.o, d, t.wo.of(p), dx, Some(&mut d_o), dwo, dbo);
        }
        let mut dq = vec![0.0; len * d];
        let mut dk = vec![0.0; len * d];
        let mut dv = vec![0.0; len * d];
        let mut dp = vec![0.0; len * len];
        for h in 0..self.heads {
            let cols = h * hd..(h + 1) * hd;
            let ph = &c.probs[h * len * len..(h + 1) * len * len];
            for i in 0..len {
                let doi = &d_o[i * d..][cols.clone()];
                for j in 0..len {
                    dp[i * len + j] = dot(doi, &c.v[j * d..][cols.clone()]);
                    let w = ph[i * len + j];
                    for (cc, val) in cols.clone().zip(doi) {
                        dv[j * d + cc] += w * val;
                    }
                }
            }
            for i in 0..len {
                let row = i * len..(i + 1) * len;
                let inner = dot(&dp[row.clone()], &ph[row.clone()]);
                for j in 0..len {
                    let ds = ph[i * len + j] * (dp[i * len + j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for cc in cols.clone() {
                        dq[i * d + cc] += ds * c.k[j * d + cc];
                        dk[j * d + cc] += ds * c.q[i * d + cc];
                    }
                }
            }
        }
        let mut da = vec![0.0; len * d];
        for (w, b, grad) in [(t.wq, t.bq, &dq), (t.wk, t.bk, &dk), (t.wv, t.bv, &dv)] {
            let (dw, dbias) = split2(g, w, b);
            linear_backward(&c.a, d, w.of(p), grad, Some(&mut da), dw, dbias);
        }
        let (dg, dbeta) = split2(g, t.ln1_g, t.ln1_b);
        layer_norm_backward(&c.ln1, d, t.ln1_g.of(p), &da, dx, dg, dbeta);
    }
}

/// Disjoint mutable views of two tensors, `a` laid out before `b`.
pub(crate) fn split2(g: &mut [f64], a: Tensor, b: Tensor) -> (&mut [f64], &mut [f64]) {
    assert!(a.offset + a.len() <= b.offset, "tensors must be ordered and disjoint");
    let (left, right) = g.split_at_mut(b.offset);
    (&mut left[a.range()], &mut right[..b.len()])
}

impl ChunkEncoder for TransformerEncoder {
    type Cache = EncoderCache;

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, p: &[f64], token_ids: &[u32]) -> Result<(Vec<f64>, EncoderCache), ModelError> {
        let d = self.dim;
        let len = token_ids.len();
        if len == 0 {
            return Err(ModelError::EmptyChunk);
        }
        if len > self.pos_emb.rows {
            return Err(ModelError::ChunkTooLong {
                len,
                max: self.pos_emb.rows,
            });
        }
        let emb = self.tok_emb.of(p);
        let pos = self.pos_emb.of(p);
        let mut x = Vec::with_capacity(len * d);
        for (t, &id) in token_ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.tok_emb.rows {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab_size: self.tok_emb.rows,
                });
            }
            x.extend(emb[id * d..(id + 1) * d].iter().zip(&pos[t * d..(t + 1) * d]).map(|(a, b)| a + b));
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        for t in &self.layers {
            let (next, cache) = self.layer_forward(p, t, x, len);
            layers.push(cache);
            x = next;
        }
        // Only the CLS row leaves the encoder.
        let (y, lnf) = layer_norm(&x[..d], d, self.lnf_g.of(p), self.lnf_b.of(p));
        Ok((
            y,
            EncoderCache {
                token_ids: token_ids.to_vec(),
                layers,
                lnf,
            },
        ))
    }

    fn backward(&self, p: &[f64], cache: &EncoderCache, d_out: &[f64], g: &mut [f64]) {
        let d = self.dim;
        let len = cache.token_ids.len();
        let mut dx = vec![0.0; len * d];
        {
            let (dg, db) = split2(g, self.lnf_g, self.lnf_b);
            layer_norm_backward(&cache.lnf, d, self.lnf_g.of(p), d_out, &mut dx[..d], dg, db);
        }
        for (t, c) in self.layers.iter().zip(&cache.layers).rev() {
            self.layer_backward(p, t, c, &mut dx, g);
        }
        for (pos, &id) in cache.token_ids.iter().enumerate() {
            let id = id as usize;
            let row = &dx[pos * d..(pos + 1) * d];
            let te = self.tok_emb.offset + id * d;
            for (gv, r) in g[te..te + d].iter_mut().zip(row) {
                *gv += r;
            }
            let pe = self.pos_emb.offset + pos * d;
            for (gv, r) in g[pe..pe + d].iter_mut().zip(row) {
                *gv += r;
            }
        }
    }
}
