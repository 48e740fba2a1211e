//! Single-layer unidirectional LSTM with backpropagation through time.

use super::ops::{dot, sigmoid};

/// Activations of one step: gates `i, f, g, o` (each `H` long) after their
/// nonlinearities, the cell state and `tanh(c)`.
#[derive(Debug, Clone)]
pub struct LstmStep {
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    pub inputs: Vec<Vec<f64>>,
    pub steps: Vec<LstmStep>,
}

impl LstmCache {
    pub fn final_hidden(&self) -> &[f64] {
        &self.steps.last().expect("at least one step").h
    }
}

/// Weight views. `wx` is `4H x in_dim`, `wh` is `4H x H`, `b` is `4H`.
pub struct LstmWeights<'a> {
    pub wx: &'a [f64],
    pub wh: &'a [f64],
    pub b: &'a [f64],
    pub hidden: usize,
    pub in_dim: usize,
}

pub struct LstmGrads<'a> {
    pub wx: &'a mut [f64],
    pub wh: &'a mut [f64],
    pub b: &'a mut [f64],
}

/// Runs the recurrence from `h0 = c0 = 0`. `inputs` must be non-empty.
pub fn forward(w: &LstmWeights<'_>, inputs: Vec<Vec<f64>>) -> LstmCache {
    let hid = w.hidden;
    let mut h_prev = vec![0.0; hid];
    let mut c_prev = vec![0.0; hid];
    let mut steps = Vec::with_capacity(inputs.len());
    for x in &inputs {
        let mut gates = Vec::with_capacity(4 * hid);
        for r in 0..4 * hid {
            let z = dot(&w.wx[r * w.in_dim..(r + 1) * w.in_dim], x)
                + dot(&w.wh[r * hid..(r + 1) * hid], &h_prev)
                + w.b[r];
            let gate = r / hid;
            gates.push(if gate == 2 { z.tanh() } else { sigmoid(z) });
        }
        let (i, rest) = gates.split_at(hid);
        let (f, rest) = rest.split_at(hid);
        let (g, o) = rest.split_at(hid);
        let c: Vec<f64> = (0..hid).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hid).map(|j| o[j] * tanh_c[j]).collect();
        h_prev.clone_from(&h);
        c_prev.clone_from(&c);
        steps.push(LstmStep { gates, c, tanh_c, h });
    }
    LstmCache { inputs, steps }
}

/// Which gate derivative to corrupt; used to prove the gradient checker
/// catches a broken backward pass.
#[cfg(test)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GateFault {
    None,
    ForgetGate,
}

/// BPTT from `dh_last`. Returns the gradients of every input.
#[cfg_attr(test, allow(dead_code))]
pub fn backward(w: &LstmWeights<'_>, cache: &LstmCache, dh_last: &[f64], grads: LstmGrads<'_>) -> Vec<Vec<f64>> {
    backward_impl(
        w,
        cache,
        dh_last,
        grads,
        #[cfg(test)]
        GateFault::None,
    )
}

#[cfg(test)]
pub(crate) fn backward_with_fault(
    w: &LstmWeights<'_>,
    cache: &LstmCache,
    dh_last: &[f64],
    grads: LstmGrads<'_>,
    fault: GateFault,
) -> Vec<Vec<f64>> {
    backward_impl(w, cache, dh_last, grads, fault)
}

fn backward_impl(
    w: &LstmWeights<'_>,
    cache: &LstmCache,
    dh_last: &[f64],
    grads: LstmGrads<'_>,
    #[cfg(test)] fault: GateFault,
) -> Vec<Vec<f64>> {
    let hid = w.hidden;
    let steps = cache.steps.len();
    let mut dh = dh_last.to_vec();
    let mut dc_next = vec![0.0; hid];
    let mut dz = vec![0.0; 4 * hid];
    let mut d_inputs = vec![Vec::new(); steps];
    let zeros = vec![0.0; hid];

    for t in (0..steps).rev() {
        let step = &cache.steps[t];
        let (c_prev, h_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (&cache.steps[t - 1].c, &cache.steps[t - 1].h)
        };
        let (i, rest) = step.gates.split_at(hid);
        let (f, rest) = rest.split_at(hid);
        let (g, o) = rest.split_at(hid);
        for j in 0..hid {
            let d_o = dh[j] * step.tanh_c[j];
            let dc = dc_next[j] + dh[j] * o[j] * (1.0 - step.tanh_c[j] * step.tanh_c[j]);
            let d_i = dc * g[j];
            let d_g = dc * i[j];
            let d_f = dc * c_prev[j];
            dc_next[j] = dc * f[j];
            dz[j] = d_i * i[j] * (1.0 - i[j]);
            #[allow(unused_mut)]
            let mut f_slope = f[j] * (1.0 - f[j]);
            #[cfg(test)]
            if fault == GateFault::ForgetGate {
                f_slope = f[j];
            }
            dz[hid + j] = d_f * f_slope;
            dz[2 * hid + j] = d_g * (1.0 - g[j] * g[j]);
            dz[3 * hid + j] = d_o * o[j] * (1.0 - o[j]);
        }

        let x = &cache.inputs[t];
        let mut dx = vec![0.0; w.in_dim];
        let mut dh_prev = vec![0.0; hid];
        for (r, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b[r] += g;
            let wx_row = &w.wx[r * w.in_dim..(r + 1) * w.in_dim];
            let gwx = &mut grads.wx[r * w.in_dim..(r + 1) * w.in_dim];
            for k in 0..w.in_dim {
                gwx[k] += g * x[k];
                dx[k] += g * wx_row[k];
            }
            let wh_row = &w.wh[r * hid..(r + 1) * hid];
            let gwh = &mut grads.wh[r * hid..(r + 1) * hid];
            for k in 0..hid {
                gwh[k] += g * h_prev[k];
                dh_prev[k] += g * wh_row[k];
            }
        }
        d_inputs[t] = dx;
        dh = dh_prev;
    }
    d_inputs
}
