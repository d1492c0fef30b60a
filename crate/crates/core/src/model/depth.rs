//! Dense depth head with focal rescaling.
//!
//! Per scale a 1x1 channel-mixing layer predicts depth at a pre-defined
//! equivalent focal length; each view's prediction is then multiplied by
//! `fx / equivalent_focal`. Supervision is a plain L1 against camera-space
//! depths of ground-truth points, averaged over valid (point, view, scale)
//! triples. The branch shares no parameters with the decoder.

use crate::aggregation::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};
use crate::model::params::{Grads, LinearIds, ParamStore};
use crate::numerics::nn::{sigmoid, softplus};
use crate::rng::ChaCha8Rng;
use crate::tensor::Tensor;

/// Raw-bias initialization: softplus of this is the initial depth estimate
/// at the equivalent focal length, a rough scene prior.
pub const DEPTH_BIAS_PRIOR: f64 = 12.0;

#[derive(Debug, Clone)]
pub struct DepthHeadIds {
    pub convs: Vec<LinearIds>, // one 1 x C mixer per scale
    pub equivalent_focal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthLossResult {
    pub loss: f64,
    pub valid_triples: usize,
    /// Set when no ground-truth point projected into any view; the loss is
    /// defined as 0 in that case.
    pub no_valid_projection: bool,
}

impl DepthHeadIds {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        scales: usize,
        channels: usize,
        equivalent_focal: f64,
    ) -> Self {
        let convs: Vec<LinearIds> = (0..scales)
            .map(|s| LinearIds::register(store, rng, &format!("depth_head.scale{s}"), 1, channels, false))
            .collect();
        for conv in &convs {
            store.slice_mut(conv.b)[0] = DEPTH_BIAS_PRIOR;
        }
        DepthHeadIds { convs, equivalent_focal }
    }

    fn raw_depth_at(
        &self,
        store: &ParamStore,
        pyr: &FeaturePyramid,
        s: usize,
        view: usize,
        y: usize,
        x: usize,
    ) -> f64 {
        let map = pyr.map(s);
        let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
        let plane = h * w;
        let wts = store.slice(self.convs[s].w);
        let b = store.slice(self.convs[s].b)[0];
        let mut acc = b;
        for ci in 0..c {
            acc += wts[ci] * map.data()[(view * c + ci) * plane + y * w + x];
        }
        acc
    }

    /// Per-scale `N x 1 x H_s x W_s` depth maps: softplus of the channel mix,
    /// scaled by each view's `fx / equivalent_focal`.
    pub fn predict_depth(
        &self,
        store: &ParamStore,
        pyr: &FeaturePyramid,
        cams: &[CameraModel],
    ) -> Result<Vec<Tensor>> {
        if cams.len() != pyr.views() {
            return Err(Error::shape(
                "predict_depth cams",
                format!("{}", pyr.views()),
                format!("{}", cams.len()),
            ));
        }
        let mut out = Vec::with_capacity(pyr.scales());
        for s in 0..pyr.scales() {
            let map = pyr.map(s);
            let (n, h, w) = (map.shape()[0], map.shape()[2], map.shape()[3]);
            let mut depth = Tensor::zeros(&[n, 1, h, w]);
            for ni in 0..n {
                let ratio = cams[ni].fx / self.equivalent_focal;
                for y in 0..h {
                    for x in 0..w {
                        let raw = self.raw_depth_at(store, pyr, s, ni, y, x);
                        *depth.at_mut(&[ni, 0, y, x]) = softplus(raw) * ratio;
                    }
                }
            }
            out.push(depth);
        }
        Ok(out)
    }

    /// Valid `(point, view, scale)` triples with their pixel and target
    /// depth. Nearest-pixel lookup at each scale via corner-aligned ratios.
    fn valid_triples(
        &self,
        pyr: &FeaturePyramid,
        cams: &[CameraModel],
        points: &[Vec3],
    ) -> Vec<(usize, usize, usize, usize, f64)> {
        // (scale, view, y, x, target_depth)
        let mut triples = Vec::new();
        for p in points {
            for (ni, cam) in cams.iter().enumerate() {
                let (u, v, z) = cam.project(p);
                if z <= 1e-6 || !cam.contains_pixel(u, v) {
                    continue;
                }
                for s in 0..pyr.scales() {
                    let (ru, rv) = pyr.scale_ratio(s);
                    let map = pyr.map(s);
                    let (h, w) = (map.shape()[2], map.shape()[3]);
                    let x = (u * ru).round().clamp(0.0, (w - 1) as f64) as usize;
                    let y = (v * rv).round().clamp(0.0, (h - 1) as f64) as usize;
                    triples.push((s, ni, y, x, z));
                }
            }
        }
        triples
    }

    /// Mean L1 between predicted and camera-space depths over all valid
    /// triples; 0 with a warning flag when nothing projects.
    pub fn depth_loss(
        &self,
        store: &ParamStore,
        pyr: &FeaturePyramid,
        cams: &[CameraModel],
        points: &[Vec3],
    ) -> Result<DepthLossResult> {
        let triples = self.valid_triples(pyr, cams, points);
        if triples.is_empty() {
            return Ok(DepthLossResult { loss: 0.0, valid_triples: 0, no_valid_projection: true });
        }
        let mut acc = 0.0;
        for &(s, ni, y, x, z) in &triples {
            let raw = self.raw_depth_at(store, pyr, s, ni, y, x);
            let pred = softplus(raw) * cams[ni].fx / self.equivalent_focal;
            acc += (pred - z).abs();
        }
        Ok(DepthLossResult {
            loss: acc / triples.len() as f64,
            valid_triples: triples.len(),
            no_valid_projection: false,
        })
    }

    /// Accumulates parameter gradients of [`depth_loss`], recomputing the
    /// per-triple activations instead of caching full maps.
    pub fn depth_loss_backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        pyr: &FeaturePyramid,
        cams: &[CameraModel],
        points: &[Vec3],
        upstream: f64,
    ) -> Result<DepthLossResult> {
        let triples = self.valid_triples(pyr, cams, points);
        if triples.is_empty() {
            return Ok(DepthLossResult { loss: 0.0, valid_triples: 0, no_valid_projection: true });
        }
        let count = triples.len() as f64;
        let mut acc = 0.0;
        for &(s, ni, y, x, z) in &triples {
            let raw = self.raw_depth_at(store, pyr, s, ni, y, x);
            let ratio = cams[ni].fx / self.equivalent_focal;
            let pred = softplus(raw) * ratio;
            acc += (pred - z).abs();
            let d_pred = upstream * (pred - z).signum() / count;
            let d_raw = d_pred * ratio * sigmoid(raw);
            // linear backward against the feature column at (y, x)
            let map = pyr.map(s);
            let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
            let plane = h * w;
            let gw = grads.slice_mut(self.convs[s].w);
            for ci in 0..c {
                gw[ci] += d_raw * map.data()[(ni * c + ci) * plane + y * w + x];
            }
            grads.slice_mut(self.convs[s].b)[0] += d_raw;
        }
        Ok(DepthLossResult {
            loss: acc / count,
            valid_triples: triples.len(),
            no_valid_projection: false,
        })
    }
}
