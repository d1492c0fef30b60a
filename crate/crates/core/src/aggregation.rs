//! Deformable feature aggregation across views and scales.
//!
//! Two implementations of the same mathematical operator:
//!
//! * [`basic_aggregate`] follows the reference recipe literally: it
//!   materializes the per-scale sampled features, stacks them into a
//!   `K x N x S x C` buffer, multiplies by the broadcast weights into a second
//!   buffer of the same size and only then reduces. Every intermediate buffer
//!   is real and charged to the [`TrafficLedger`].
//! * [`efficient_aggregate`] fuses sampling and weighting into a single pass
//!   over `(keypoint, channel)` work items. Its only intermediate allocation
//!   is the `C`-length output accumulator, and non-visible `(k, n)` pairs are
//!   skipped outright, which on outward-facing rigs caps the per-item work at
//!   two views' worth of scales.
//!
//! Point coordinates are pixels at the scale-0 resolution; coarser scales
//! rescale by `(W_s - 1)/(W_0 - 1)` (corner-aligned), so a pixel inside the
//! image bounds is sampleable at every scale. Summation order is fixed:
//! scales innermost, views outside them, keypoints accumulated last. Any
//! partitioning of the work items reproduces that order bit for bit.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::bilinear::footprint;
use crate::tensor::Tensor;

const F64_BYTES: u64 = std::mem::size_of::<f64>() as u64;

// ---------------------------------------------------------------------------
// Traffic ledger
// ---------------------------------------------------------------------------

/// Byte accounting for intermediate buffers: a buffer is intermediate if it
/// is neither an operator input nor the final output. Counters are atomic so
/// parallel work items can share one ledger.
#[derive(Debug, Default)]
pub struct TrafficLedger {
    bytes_written: AtomicU64,
    bytes_read: AtomicU64,
    current_intermediate: AtomicU64,
    peak_intermediate: AtomicU64,
    aggregate_calls: AtomicU64,
    sample_visits: AtomicU64,
    max_visits_per_keypoint: AtomicU64,
}

/// Point-in-time copy of the ledger counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct LedgerSnapshot {
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub peak_intermediate_bytes: u64,
    pub aggregate_calls: u64,
    pub sample_visits: u64,
    pub max_visits_per_keypoint: u64,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc_intermediate(&self, bytes: u64) {
        let cur = self.current_intermediate.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak_intermediate.fetch_max(cur, Ordering::Relaxed);
    }

    pub fn free_intermediate(&self, bytes: u64) {
        self.current_intermediate.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub fn record_write(&self, bytes: u64) {
        self.bytes_written.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn record_read(&self, bytes: u64) {
        self.bytes_read.fetch_add(bytes, Ordering::Relaxed);
    }

    fn record_call(&self) {
        self.aggregate_calls.fetch_add(1, Ordering::Relaxed);
    }

    fn record_visits(&self, per_keypoint: &[u64]) {
        let total: u64 = per_keypoint.iter().sum();
        self.sample_visits.fetch_add(total, Ordering::Relaxed);
        if let Some(&m) = per_keypoint.iter().max() {
            self.max_visits_per_keypoint.fetch_max(m, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            bytes_written: self.bytes_written.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            peak_intermediate_bytes: self.peak_intermediate.load(Ordering::Relaxed),
            aggregate_calls: self.aggregate_calls.load(Ordering::Relaxed),
            sample_visits: self.sample_visits.load(Ordering::Relaxed),
            max_visits_per_keypoint: self.max_visits_per_keypoint.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.bytes_written.store(0, Ordering::Relaxed);
        self.bytes_read.store(0, Ordering::Relaxed);
        self.current_intermediate.store(0, Ordering::Relaxed);
        self.peak_intermediate.store(0, Ordering::Relaxed);
        self.aggregate_calls.store(0, Ordering::Relaxed);
        self.sample_visits.store(0, Ordering::Relaxed);
        self.max_visits_per_keypoint.store(0, Ordering::Relaxed);
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Multi-view, multi-scale dense feature maps: `S` tensors of shape
/// `N x C x H_s x W_s` sharing the view and channel counts.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    maps: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("feature pyramid needs >= 1 scale".to_string()));
        }
        let (n, c) = (maps[0].shape()[0], maps[0].shape()[1]);
        for (s, m) in maps.iter().enumerate() {
            m.require_rank(4, "FeaturePyramid map")?;
            let sh = m.shape();
            if sh[0] != n || sh[1] != c {
                return Err(Error::shape(
                    "FeaturePyramid",
                    format!("N={n}, C={c} at every scale"),
                    format!("scale {s} has N={}, C={}", sh[0], sh[1]),
                ));
            }
            if sh[2] < 2 || sh[3] < 2 {
                return Err(Error::InvalidArgument(format!(
                    "feature maps must be at least 2x2, scale {s} is {}x{}",
                    sh[2], sh[3]
                )));
            }
        }
        Ok(FeaturePyramid { maps })
    }

    pub fn scales(&self) -> usize {
        self.maps.len()
    }

    pub fn views(&self) -> usize {
        self.maps[0].shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.maps[0].shape()[1]
    }

    pub fn map(&self, s: usize) -> &Tensor {
        &self.maps[s]
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Tensor] {
        &mut self.maps
    }

    /// Corner-aligned coordinate ratios from scale 0 to scale `s`: `(ru, rv)`.
    pub fn scale_ratio(&self, s: usize) -> (f64, f64) {
        let s0 = self.maps[0].shape();
        let ss = self.maps[s].shape();
        let ru = if s0[3] > 1 { (ss[3] - 1) as f64 / (s0[3] - 1) as f64 } else { 1.0 };
        let rv = if s0[2] > 1 { (ss[2] - 1) as f64 / (s0[2] - 1) as f64 } else { 1.0 };
        (ru, rv)
    }

    /// Zero maps with the same shapes; gradient buffer for the backward pass.
    pub fn zeros_like(&self) -> FeaturePyramid {
        FeaturePyramid {
            maps: self.maps.iter().map(|m| Tensor::zeros(m.shape())).collect(),
        }
    }
}

/// One instance's aggregation inputs: projected points, visibility, and
/// normalized weights.
///
/// `points` is `K x N x 2` scale-0 pixel coordinates with `(-1, -1)`
/// sentinels on non-visible entries; `visible` is row-major `K x N`;
/// `weights` is `K x N x S x G`, finite and non-negative, normalized to unit
/// mass per keypoint over `(N, S, G)` by [`normalize_weights`].
#[derive(Debug, Clone)]
pub struct AggregationRequest {
    pub points: Tensor,
    pub visible: Vec<bool>,
    pub weights: Tensor,
}

impl AggregationRequest {
    pub fn new(points: Tensor, visible: Vec<bool>, weights: Tensor) -> Result<Self> {
        points.require_rank(3, "AggregationRequest points")?;
        weights.require_rank(4, "AggregationRequest weights")?;
        let (k, n) = (points.shape()[0], points.shape()[1]);
        if points.shape()[2] != 2 {
            return Err(Error::shape(
                "AggregationRequest points",
                "K x N x 2".to_string(),
                format!("{:?}", points.shape()),
            ));
        }
        if visible.len() != k * n {
            return Err(Error::shape(
                "AggregationRequest visible",
                format!("{}", k * n),
                format!("{}", visible.len()),
            ));
        }
        if weights.shape()[0] != k || weights.shape()[1] != n {
            return Err(Error::shape(
                "AggregationRequest weights",
                format!("K={k}, N={n} leading dims"),
                format!("{:?}", weights.shape()),
            ));
        }
        if weights.data().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "aggregation weights must be finite and non-negative".to_string(),
            ));
        }
        Ok(AggregationRequest { points, visible, weights })
    }

    pub fn keypoints(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn scales(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn groups(&self) -> usize {
        self.weights.shape()[3]
    }

    fn check_against(&self, pyr: &FeaturePyramid) -> Result<usize> {
        if self.views() != pyr.views() {
            return Err(Error::shape(
                "aggregate views",
                format!("{}", pyr.views()),
                format!("{}", self.views()),
            ));
        }
        if self.scales() != pyr.scales() {
            return Err(Error::shape(
                "aggregate scales",
                format!("{}", pyr.scales()),
                format!("{}", self.scales()),
            ));
        }
        let c = pyr.channels();
        if c % self.groups() != 0 {
            return Err(Error::InvalidArgument(format!(
                "channel count {c} not divisible by group count {}",
                self.groups()
            )));
        }
        Ok(c / self.groups())
    }
}

// ---------------------------------------------------------------------------
// Basic (reference) implementation
// ---------------------------------------------------------------------------

/// Reference deformable aggregation with materialized intermediates.
///
/// For each scale the sampled features form a real `N x C x K` buffer; the
/// buffers are stacked and reshaped to `K x N x S x C`, multiplied by the
/// weights broadcast over channel groups, then reduced over everything but
/// the channel axis. Non-visible samples contribute zero.
pub fn basic_aggregate(
    pyr: &FeaturePyramid,
    req: &AggregationRequest,
    ledger: &TrafficLedger,
) -> Result<Tensor> {
    let group_width = req.check_against(pyr)?;
    let (k, n, s_count, g_count) = (req.keypoints(), req.views(), req.scales(), req.groups());
    let c = pyr.channels();
    ledger.record_call();

    // stage 1: per-scale sampling into real N x C x K buffers
    let mut sampled: Vec<Vec<f64>> = Vec::with_capacity(s_count);
    let scale_bytes = (n * c * k) as u64 * F64_BYTES;
    for s in 0..s_count {
        let map = pyr.map(s);
        let (h, w) = (map.shape()[2], map.shape()[3]);
        let (ru, rv) = pyr.scale_ratio(s);
        let plane = h * w;
        let mut buf = vec![0.0; n * c * k];
        ledger.alloc_intermediate(scale_bytes);
        for ki in 0..k {
            for ni in 0..n {
                if !req.visible[ki * n + ni] {
                    continue;
                }
                let u = req.points.data()[(ki * n + ni) * 2] * ru;
                let v = req.points.data()[(ki * n + ni) * 2 + 1] * rv;
                let fp = footprint(u, v, h, w);
                for ci in 0..c {
                    let src = &map.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    buf[(ni * c + ci) * k + ki] = fp.sample(src);
                }
            }
        }
        ledger.record_write(scale_bytes);
        sampled.push(buf);
    }

    // stage 2: stack and reshape to K x N x S x C
    let stacked_bytes = (k * n * s_count * c) as u64 * F64_BYTES;
    ledger.alloc_intermediate(stacked_bytes);
    let mut stacked = vec![0.0; k * n * s_count * c];
    for si in 0..s_count {
        let buf = &sampled[si];
        ledger.record_read(scale_bytes);
        for ni in 0..n {
            for ci in 0..c {
                for ki in 0..k {
                    stacked[((ki * n + ni) * s_count + si) * c + ci] = buf[(ni * c + ci) * k + ki];
                }
            }
        }
    }
    ledger.record_write(stacked_bytes);
    for _ in 0..s_count {
        ledger.free_intermediate(scale_bytes);
    }
    drop(sampled);

    // stage 3: broadcast-multiply by the weights into a same-size buffer
    ledger.alloc_intermediate(stacked_bytes);
    let mut weighted = vec![0.0; k * n * s_count * c];
    ledger.record_read(stacked_bytes);
    let wdata = req.weights.data();
    for ki in 0..k {
        for ni in 0..n {
            for si in 0..s_count {
                let base = ((ki * n + ni) * s_count + si) * c;
                let wbase = ((ki * n + ni) * s_count + si) * g_count;
                for gi in 0..g_count {
                    let wv = wdata[wbase + gi];
                    for t in 0..group_width {
                        let ci = gi * group_width + t;
                        weighted[base + ci] = stacked[base + ci] * wv;
                    }
                }
            }
        }
    }
    ledger.record_write(stacked_bytes);
    ledger.free_intermediate(stacked_bytes);
    drop(stacked);

    // stage 4: reduce over keypoints, views, scales
    ledger.record_read(stacked_bytes);
    let mut out = vec![0.0; c];
    for ki in 0..k {
        for ni in 0..n {
            for si in 0..s_count {
                let base = ((ki * n + ni) * s_count + si) * c;
                for ci in 0..c {
                    out[ci] += weighted[base + ci];
                }
            }
        }
    }
    ledger.free_intermediate(stacked_bytes);

    Tensor::new(vec![c], out)
}

// ---------------------------------------------------------------------------
// Fused implementation
// ---------------------------------------------------------------------------

/// Per-keypoint partial for the `(k, c)` work item: views outer, scales
/// inner, non-visible views skipped. Pure; touches no shared state.
#[inline]
fn fused_work_item(
    pyr: &FeaturePyramid,
    req: &AggregationRequest,
    group_width: usize,
    ki: usize,
    ci: usize,
) -> f64 {
    let n = req.views();
    let s_count = pyr.scales();
    let g_count = req.groups();
    let gi = ci / group_width;
    let wdata = req.weights.data();
    let mut acc = 0.0;
    for ni in 0..n {
        if !req.visible[ki * n + ni] {
            continue;
        }
        let u = req.points.data()[(ki * n + ni) * 2];
        let v = req.points.data()[(ki * n + ni) * 2 + 1];
        for si in 0..s_count {
            let map = pyr.map(si);
            let (h, w) = (map.shape()[2], map.shape()[3]);
            let (ru, rv) = pyr.scale_ratio(si);
            let fp = footprint(u * ru, v * rv, h, w);
            let plane = h * w;
            let src = &map.data()[(ni * map.shape()[1] + ci) * plane..(ni * map.shape()[1] + ci + 1) * plane];
            acc += wdata[((ki * n + ni) * s_count + si) * g_count + gi] * fp.sample(src);
        }
    }
    acc
}

/// Fused single-pass aggregation: same result as [`basic_aggregate`] up to
/// summation reassociation (bounded by 1e-10 on valid inputs), with the
/// `C`-length accumulator as the only intermediate allocation.
pub fn efficient_aggregate(
    pyr: &FeaturePyramid,
    req: &AggregationRequest,
    ledger: &TrafficLedger,
) -> Result<Tensor> {
    let group_width = req.check_against(pyr)?;
    let (k, n) = (req.keypoints(), req.views());
    let c = pyr.channels();
    let s_count = pyr.scales();
    ledger.record_call();

    let mut visits = vec![0u64; k];
    for ki in 0..k {
        let vis = (0..n).filter(|ni| req.visible[ki * n + ni]).count() as u64;
        visits[ki] = vis * s_count as u64;
    }
    ledger.record_visits(&visits);

    let acc_bytes = c as u64 * F64_BYTES;
    ledger.alloc_intermediate(acc_bytes);
    let mut acc = vec![0.0; c];
    // keypoints accumulated last, in index order, so any work-item
    // partitioning reproduces this result exactly
    for ki in 0..k {
        for (ci, slot) in acc.iter_mut().enumerate() {
            *slot += fused_work_item(pyr, req, group_width, ki, ci);
        }
    }
    ledger.record_write(acc_bytes);
    ledger.free_intermediate(acc_bytes);
    Tensor::new(vec![c], acc)
}

/// Pre-reduction variant: the `K x C` per-keypoint features, before the final
/// keypoint sum. The decoder consumes the summed form; this one is for
/// consumers that want multi-point features directly.
pub fn efficient_aggregate_per_point(
    pyr: &FeaturePyramid,
    req: &AggregationRequest,
    ledger: &TrafficLedger,
) -> Result<Tensor> {
    let group_width = req.check_against(pyr)?;
    let k = req.keypoints();
    let c = pyr.channels();
    ledger.record_call();
    let mut out = vec![0.0; k * c];
    for ki in 0..k {
        for ci in 0..c {
            out[ki * c + ci] = fused_work_item(pyr, req, group_width, ki, ci);
        }
    }
    Tensor::new(vec![k, c], out)
}

/// Test surface for the scheduling contract: executes an explicit partition
/// of the `(k, c)` work-item grid (each item exactly once, any order), then
/// merges per-keypoint partials in fixed keypoint order. Produces the same
/// output as [`efficient_aggregate`] for every valid partition.
pub fn efficient_aggregate_partitioned(
    pyr: &FeaturePyramid,
    req: &AggregationRequest,
    partition: &[Vec<(usize, usize)>],
) -> Result<Tensor> {
    let group_width = req.check_against(pyr)?;
    let (k, c) = (req.keypoints(), pyr.channels());
    let mut seen = vec![false; k * c];
    let mut partials = vec![0.0; k * c];
    for chunk in partition {
        for &(ki, ci) in chunk {
            if ki >= k || ci >= c {
                return Err(Error::InvalidArgument(format!(
                    "work item ({ki}, {ci}) outside {k} x {c} grid"
                )));
            }
            if seen[ki * c + ci] {
                return Err(Error::InvalidArgument(format!(
                    "work item ({ki}, {ci}) assigned twice"
                )));
            }
            seen[ki * c + ci] = true;
            partials[ki * c + ci] = fused_work_item(pyr, req, group_width, ki, ci);
        }
    }
    if !seen.iter().all(|s| *s) {
        return Err(Error::InvalidArgument("partition does not cover the work grid".to_string()));
    }
    let mut out = vec![0.0; c];
    for ki in 0..k {
        for ci in 0..c {
            out[ci] += partials[ki * c + ci];
        }
    }
    Tensor::new(vec![c], out)
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients of the fused forward. Samples are recomputed rather than read
/// from a cached `K x N x S x C` buffer, mirroring the forward's memory
/// behavior. Returns `(grad_pyramid, grad_points, grad_weights)`; gradients
/// of non-visible entries are zero.
pub fn efficient_aggregate_backward(
    pyr: &FeaturePyramid,
    req: &AggregationRequest,
    upstream: &Tensor,
    ledger: &TrafficLedger,
) -> Result<(FeaturePyramid, Tensor, Tensor)> {
    let group_width = req.check_against(pyr)?;
    let (k, n, s_count, g_count) = (req.keypoints(), req.views(), req.scales(), req.groups());
    let c = pyr.channels();
    if upstream.len() != c {
        return Err(Error::shape(
            "efficient_aggregate_backward upstream",
            format!("{c}"),
            format!("{}", upstream.len()),
        ));
    }
    ledger.record_call();

    let mut grad_pyr = pyr.zeros_like();
    let mut grad_points = Tensor::zeros(req.points.shape());
    let mut grad_weights = Tensor::zeros(req.weights.shape());
    let up = upstream.data();
    let wdata = req.weights.data();

    for ki in 0..k {
        for ni in 0..n {
            if !req.visible[ki * n + ni] {
                continue;
            }
            let u = req.points.data()[(ki * n + ni) * 2];
            let v = req.points.data()[(ki * n + ni) * 2 + 1];
            let (mut gu, mut gv) = (0.0, 0.0);
            for si in 0..s_count {
                let map = pyr.map(si);
                let (h, w) = (map.shape()[2], map.shape()[3]);
                let (ru, rv) = pyr.scale_ratio(si);
                let fp = footprint(u * ru, v * rv, h, w);
                let plane = h * w;
                let gmap = grad_pyr.maps_mut()[si].data_mut();
                let (mut gus, mut gvs) = (0.0, 0.0);
                for ci in 0..c {
                    let gi = ci / group_width;
                    let wv = wdata[((ki * n + ni) * s_count + si) * g_count + gi];
                    let src = &map.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    // weight gradient: upstream dot the (recomputed) sample
                    let sample = fp.sample(src);
                    grad_weights.data_mut()[((ki * n + ni) * s_count + si) * g_count + gi] +=
                        up[ci] * sample;
                    // feature and point gradients share the up * w coefficient
                    let coef = up[ci] * wv;
                    if coef != 0.0 {
                        fp.scatter(coef, &mut gmap[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]);
                        let (du, dv) = fp.sample_grad_uv(src);
                        gus += coef * du;
                        gvs += coef * dv;
                    }
                }
                gu += gus * ru;
                gv += gvs * rv;
            }
            grad_points.data_mut()[(ki * n + ni) * 2] = gu;
            grad_points.data_mut()[(ki * n + ni) * 2 + 1] = gv;
        }
    }
    Ok((grad_pyr, grad_points, grad_weights))
}

// ---------------------------------------------------------------------------
// Weight normalization
// ---------------------------------------------------------------------------

/// Joint softmax over the flattened `(N, S, G)` axes per keypoint, with
/// non-visible `(k, n)` logits masked out. A keypoint with every entry
/// masked gets all-zero weights.
pub fn normalize_weights(raw: &Tensor, visible: &[bool]) -> Result<Tensor> {
    raw.require_rank(4, "normalize_weights logits")?;
    let sh = raw.shape();
    let (k, n, s_count, g_count) = (sh[0], sh[1], sh[2], sh[3]);
    if visible.len() != k * n {
        return Err(Error::shape(
            "normalize_weights visible",
            format!("{}", k * n),
            format!("{}", visible.len()),
        ));
    }
    let mut out = Tensor::zeros(sh);
    let lane = n * s_count * g_count;
    for ki in 0..k {
        let base = ki * lane;
        let mut max = f64::NEG_INFINITY;
        for ni in 0..n {
            if !visible[ki * n + ni] {
                continue;
            }
            for j in 0..s_count * g_count {
                max = max.max(raw.data()[base + ni * s_count * g_count + j]);
            }
        }
        if max == f64::NEG_INFINITY {
            continue; // fully masked keypoint
        }
        let mut sum = 0.0;
        for ni in 0..n {
            if !visible[ki * n + ni] {
                continue;
            }
            for j in 0..s_count * g_count {
                let idx = base + ni * s_count * g_count + j;
                let e = (raw.data()[idx] - max).exp();
                out.data_mut()[idx] = e;
                sum += e;
            }
        }
        for ni in 0..n {
            if !visible[ki * n + ni] {
                continue;
            }
            for j in 0..s_count * g_count {
                out.data_mut()[base + ni * s_count * g_count + j] /= sum;
            }
        }
    }
    Ok(out)
}

/// Backward of [`normalize_weights`]: masked-softmax backward per keypoint.
/// Accumulates into `grad_logits` (same shape as the logits).
pub fn normalize_weights_backward(
    weights: &Tensor,
    visible: &[bool],
    grad_weights: &Tensor,
    grad_logits: &mut Tensor,
) {
    let sh = weights.shape();
    let (k, n, s_count, g_count) = (sh[0], sh[1], sh[2], sh[3]);
    let lane = n * s_count * g_count;
    for ki in 0..k {
        let base = ki * lane;
        let mut dot = 0.0;
        for ni in 0..n {
            if !visible[ki * n + ni] {
                continue;
            }
            for j in 0..s_count * g_count {
                let idx = base + ni * s_count * g_count + j;
                dot += weights.data()[idx] * grad_weights.data()[idx];
            }
        }
        for ni in 0..n {
            if !visible[ki * n + ni] {
                continue;
            }
            for j in 0..s_count * g_count {
                let idx = base + ni * s_count * g_count + j;
                grad_logits.data_mut()[idx] +=
                    weights.data()[idx] * (grad_weights.data()[idx] - dot);
            }
        }
    }
}
