//! Small neural primitives: linear layers, layer normalization, softmax and
//! multi-head attention, each with a hand-written backward kernel.
//!
//! The kernels operate on raw `f64` slices so the decoder can run them over
//! parameter-store views without copies. Every backward kernel accumulates
//! (`+=`) into its gradient outputs; callers own zeroing.

use crate::error::{Error, Result};
use crate::rng::{normal, ChaCha8Rng};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = W x + b` with `W` row-major `[out_dim x in_dim]`.
pub fn linear_forward(w: &[f64], b: &[f64], x: &[f64], out_dim: usize, in_dim: usize, y: &mut [f64]) {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(b.len(), out_dim);
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(y.len(), out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
}

/// Backward of [`linear_forward`]. `gx` is optional so input-layer calls can
/// skip the input gradient.
pub fn linear_backward(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    out_dim: usize,
    in_dim: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    for o in 0..out_dim {
        let g = gy[o];
        gb[o] += g;
        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] += g * x[i];
        }
    }
    if let Some(gx) = gx {
        for o in 0..out_dim {
            let g = gy[o];
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gx[i] += g * row[i];
            }
        }
    }
}

/// Weight matrix plus bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        weight.require_rank(2, "LinearLayer weight")?;
        bias.require_rank(1, "LinearLayer bias")?;
        if weight.shape()[0] != bias.shape()[0] {
            return Err(Error::shape(
                "LinearLayer",
                format!("bias dim {}", weight.shape()[0]),
                format!("{}", bias.shape()[0]),
            ));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Seeded init: normal weights scaled by `1/sqrt(in_dim)`, zero bias.
    pub fn seeded(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::from_fn(&[out_dim, in_dim], |_| s * normal(rng));
        let bias = Tensor::zeros(&[out_dim]);
        LinearLayer { weight, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim()];
        linear_forward(
            self.weight.data(),
            self.bias.data(),
            x,
            self.out_dim(),
            self.in_dim(),
            &mut y,
        );
        y
    }
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

/// Normalizes `x` over its length, then applies `gamma`/`beta`.
/// Returns `(mean, rstd)` for the backward pass.
pub fn layer_norm_forward(gamma: &[f64], beta: &[f64], x: &[f64], y: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        y[i] = gamma[i] * (x[i] - mean) * rstd + beta[i];
    }
    (mean, rstd)
}

pub fn layer_norm_backward(
    gamma: &[f64],
    x: &[f64],
    mean: f64,
    rstd: f64,
    gy: &[f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
    gx: &mut [f64],
) {
    let n = x.len();
    let d = n as f64;
    let mut m1 = 0.0; // mean of gamma .* gy
    let mut m2 = 0.0; // mean of gamma .* gy .* xhat
    for i in 0..n {
        let xh = (x[i] - mean) * rstd;
        let gg = gamma[i] * gy[i];
        m1 += gg;
        m2 += gg * xh;
        ggamma[i] += gy[i] * xh;
        gbeta[i] += gy[i];
    }
    m1 /= d;
    m2 /= d;
    for i in 0..n {
        let xh = (x[i] - mean) * rstd;
        gx[i] += rstd * (gamma[i] * gy[i] - m1 - xh * m2);
    }
}

/// Layer normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::from_fn(&[dim], |_| 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        layer_norm_forward(self.gamma.data(), self.beta.data(), x, &mut y);
        y
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Softmax of one contiguous lane, in place. Subtracts the max first.
pub fn softmax_lane(x: &mut [f64]) {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `gx += y .* (gy - sum(y .* gy))` for one lane of softmax outputs `y`.
pub fn softmax_backward_lane(y: &[f64], gy: &[f64], gx: &mut [f64]) {
    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    for i in 0..y.len() {
        gx[i] += y[i] * (gy[i] - dot);
    }
}

/// Softmax of `x` along `axis`. Outputs are positive and sum to 1 along the
/// axis; the max is subtracted per lane for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let shape = x.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for j in 0..n {
                lane[j] = data[base + j * inner];
            }
            softmax_lane(&mut lane);
            for j in 0..n {
                data[base + j * inner] = lane[j];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MhaDims {
    pub q_rows: usize,
    pub k_rows: usize,
    pub dim: usize,
    pub heads: usize,
}

impl MhaDims {
    pub fn head_dim(&self) -> Result<usize> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(self.dim / self.heads)
    }
}

/// Borrowed q/k/v/out projection parameters, each `[dim x dim]` + `[dim]`.
pub struct MhaParams<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

pub struct MhaParamGrads<'a> {
    pub wq: &'a mut [f64],
    pub bq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub bk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub bv: &'a mut [f64],
    pub wo: &'a mut [f64],
    pub bo: &'a mut [f64],
}

/// Forward intermediates needed by [`mha_backward`].
pub struct MhaCache {
    pub q: Vec<f64>,       // q_rows x dim (projected)
    pub k: Vec<f64>,       // k_rows x dim
    pub v: Vec<f64>,       // k_rows x dim
    pub probs: Vec<f64>,   // heads x q_rows x k_rows
    pub attended: Vec<f64>, // q_rows x dim (pre output projection)
}

/// Scaled dot-product multi-head attention with input/output projections.
/// `out` must hold `q_rows * dim`.
pub fn mha_forward(
    dims: MhaDims,
    p: &MhaParams,
    q_in: &[f64],
    k_in: &[f64],
    v_in: &[f64],
    out: &mut [f64],
) -> Result<MhaCache> {
    let dh = dims.head_dim()?;
    let (mq, mk, d) = (dims.q_rows, dims.k_rows, dims.dim);
    if q_in.len() != mq * d || k_in.len() != mk * d || v_in.len() != mk * d || out.len() != mq * d {
        return Err(Error::shape(
            "mha_forward",
            format!("q {}x{d}, k/v {}x{d}", mq, mk),
            format!("q={}, k={}, v={}, out={}", q_in.len(), k_in.len(), v_in.len(), out.len()),
        ));
    }
    let scale = 1.0 / (dh as f64).sqrt();

    let mut q = vec![0.0; mq * d];
    let mut k = vec![0.0; mk * d];
    let mut v = vec![0.0; mk * d];
    for m in 0..mq {
        linear_forward(p.wq, p.bq, &q_in[m * d..(m + 1) * d], d, d, &mut q[m * d..(m + 1) * d]);
    }
    for m in 0..mk {
        linear_forward(p.wk, p.bk, &k_in[m * d..(m + 1) * d], d, d, &mut k[m * d..(m + 1) * d]);
        linear_forward(p.wv, p.bv, &v_in[m * d..(m + 1) * d], d, d, &mut v[m * d..(m + 1) * d]);
    }

    let mut probs = vec![0.0; dims.heads * mq * mk];
    let mut attended = vec![0.0; mq * d];
    for a in 0..dims.heads {
        let hoff = a * dh;
        for i in 0..mq {
            let lane = &mut probs[(a * mq + i) * mk..(a * mq + i + 1) * mk];
            for j in 0..mk {
                let mut s = 0.0;
                for t in 0..dh {
                    s += q[i * d + hoff + t] * k[j * d + hoff + t];
                }
                lane[j] = s * scale;
            }
            softmax_lane(lane);
            for j in 0..mk {
                let pij = lane[j];
                for t in 0..dh {
                    attended[i * d + hoff + t] += pij * v[j * d + hoff + t];
                }
            }
        }
    }

    for m in 0..mq {
        linear_forward(p.wo, p.bo, &attended[m * d..(m + 1) * d], d, d, &mut out[m * d..(m + 1) * d]);
    }
    Ok(MhaCache { q, k, v, probs, attended })
}

/// Backward of [`mha_forward`]. Accumulates parameter grads and grads w.r.t.
/// the three inputs.
#[allow(clippy::too_many_arguments)]
pub fn mha_backward(
    dims: MhaDims,
    p: &MhaParams,
    cache: &MhaCache,
    q_in: &[f64],
    k_in: &[f64],
    v_in: &[f64],
    g_out: &[f64],
    grads: &mut MhaParamGrads,
    gq_in: &mut [f64],
    gk_in: &mut [f64],
    gv_in: &mut [f64],
) -> Result<()> {
    let dh = dims.head_dim()?;
    let (mq, mk, d) = (dims.q_rows, dims.k_rows, dims.dim);
    let scale = 1.0 / (dh as f64).sqrt();

    // output projection
    let mut g_att = vec![0.0; mq * d];
    for m in 0..mq {
        linear_backward(
            p.wo,
            &cache.attended[m * d..(m + 1) * d],
            &g_out[m * d..(m + 1) * d],
            d,
            d,
            grads.wo,
            grads.bo,
            Some(&mut g_att[m * d..(m + 1) * d]),
        );
    }

    let mut gq = vec![0.0; mq * d];
    let mut gk = vec![0.0; mk * d];
    let mut gv = vec![0.0; mk * d];
    let mut gp_lane = vec![0.0; mk];
    let mut gs_lane = vec![0.0; mk];
    for a in 0..dims.heads {
        let hoff = a * dh;
        for i in 0..mq {
            let lane = &cache.probs[(a * mq + i) * mk..(a * mq + i + 1) * mk];
            for j in 0..mk {
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += g_att[i * d + hoff + t] * cache.v[j * d + hoff + t];
                }
                gp_lane[j] = acc;
                let pij = lane[j];
                for t in 0..dh {
                    gv[j * d + hoff + t] += pij * g_att[i * d + hoff + t];
                }
            }
            gs_lane.iter_mut().for_each(|g| *g = 0.0);
            softmax_backward_lane(lane, &gp_lane, &mut gs_lane);
            for j in 0..mk {
                let gs = gs_lane[j] * scale;
                for t in 0..dh {
                    gq[i * d + hoff + t] += gs * cache.k[j * d + hoff + t];
                    gk[j * d + hoff + t] += gs * cache.q[i * d + hoff + t];
                }
            }
        }
    }

    for m in 0..mq {
        linear_backward(
            p.wq,
            &q_in[m * d..(m + 1) * d],
            &gq[m * d..(m + 1) * d],
            d,
            d,
            grads.wq,
            grads.bq,
            Some(&mut gq_in[m * d..(m + 1) * d]),
        );
    }
    for m in 0..mk {
        linear_backward(
            p.wk,
            &k_in[m * d..(m + 1) * d],
            &gk[m * d..(m + 1) * d],
            d,
            d,
            grads.wk,
            grads.bk,
            Some(&mut gk_in[m * d..(m + 1) * d]),
        );
        linear_backward(
            p.wv,
            &v_in[m * d..(m + 1) * d],
            &gv[m * d..(m + 1) * d],
            d,
            d,
            grads.wv,
            grads.bv,
            Some(&mut gv_in[m * d..(m + 1) * d]),
        );
    }
    Ok(())
}

/// Owned multi-head attention block (q/k/v/out projections).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn seeded(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        MhaDims { q_rows: 1, k_rows: 1, dim, heads }.head_dim()?;
        Ok(MultiHeadAttention {
            wq: LinearLayer::seeded(dim, dim, rng),
            wk: LinearLayer::seeded(dim, dim, rng),
            wv: LinearLayer::seeded(dim, dim, rng),
            wo: LinearLayer::seeded(dim, dim, rng),
            heads,
        })
    }

    fn params(&self) -> MhaParams<'_> {
        MhaParams {
            wq: self.wq.weight.data(),
            bq: self.wq.bias.data(),
            wk: self.wk.weight.data(),
            bk: self.wk.bias.data(),
            wv: self.wv.weight.data(),
            bv: self.wv.bias.data(),
            wo: self.wo.weight.data(),
            bo: self.wo.bias.data(),
        }
    }

    /// `q: [Q x D]`, `k, v: [M x D]` -> `[Q x D]`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.forward_detailed(q, k, v)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns the attention
    /// probabilities as a `[heads x Q x M]` tensor.
    pub fn forward_detailed(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        q.require_rank(2, "mha q")?;
        k.require_rank(2, "mha k")?;
        v.require_rank(2, "mha v")?;
        let d = self.wq.in_dim();
        if q.shape()[1] != d || k.shape()[1] != d || v.shape()[1] != d || k.shape()[0] != v.shape()[0] {
            return Err(Error::shape(
                "MultiHeadAttention::forward",
                format!("last dim {d}, k rows == v rows"),
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let dims = MhaDims {
            q_rows: q.shape()[0],
            k_rows: k.shape()[0],
            dim: d,
            heads: self.heads,
        };
        let mut out = vec![0.0; dims.q_rows * d];
        let cache = mha_forward(dims, &self.params(), q.data(), k.data(), v.data(), &mut out)?;
        let probs = Tensor::new(vec![self.heads, dims.q_rows, dims.k_rows], cache.probs)?;
        Ok((Tensor::new(vec![dims.q_rows, d], out)?, probs))
    }
}
