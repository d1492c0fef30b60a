//! Decoder layers.
//!
//! A single-frame layer runs deformable aggregation, an FFN and the
//! refinement/classification output stage. Multi-frame layers prepend
//! instance self-attention and temporal cross-attention against the
//! propagated instances. Anchor embeddings are added to the features for
//! every query/key formation and for the output heads; values carry the
//! features alone.
//!
//! Within a frame the backward pass differentiates the full anchor chain:
//! refinement deltas, the yaw renormalization, keypoint generation (through
//! the projection Jacobian, for both the anchor state and the learnable
//! sampling offsets) and the anchor-encoder input. Only the frame boundary
//! detaches: the bank carried between frames is a constant input.

use crate::aggregation::{
    efficient_aggregate, efficient_aggregate_backward, normalize_weights,
    normalize_weights_backward, AggregationRequest, FeaturePyramid, TrafficLedger,
};
use crate::error::Result;
use crate::geometry::{
    generate_keypoints, mat3_mul_vec, mat3_transpose, project_keypoints, Anchor3D, CameraModel,
    KeypointSet,
};
use crate::model::encoders::{AnchorEncoderIds, PsiCache};
use crate::model::params::{Grads, LayerNormIds, LinearIds, ParamId, ParamStore};
use crate::numerics::nn::{
    mha_backward, mha_forward, relu, relu_grad, sigmoid, MhaCache, MhaDims, MhaParamGrads,
    MhaParams,
};
use crate::rng::ChaCha8Rng;
use crate::tensor::Tensor;

pub const ANCHOR_COMPONENTS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Single,
    Multi,
}

// ---------------------------------------------------------------------------
// Attention parameter block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MhaIds {
    pub wq: LinearIds,
    pub wk: LinearIds,
    pub wv: LinearIds,
    pub wo: LinearIds,
    pub heads: usize,
    pub dim: usize,
}

impl MhaIds {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        MhaIds {
            wq: LinearIds::register(store, rng, &format!("{name}.wq"), dim, dim, false),
            wk: LinearIds::register(store, rng, &format!("{name}.wk"), dim, dim, false),
            wv: LinearIds::register(store, rng, &format!("{name}.wv"), dim, dim, false),
            wo: LinearIds::register(store, rng, &format!("{name}.wo"), dim, dim, false),
            heads,
            dim,
        }
    }

    fn params<'a>(&self, store: &'a ParamStore) -> MhaParams<'a> {
        MhaParams {
            wq: store.slice(self.wq.w),
            bq: store.slice(self.wq.b),
            wk: store.slice(self.wk.w),
            bk: store.slice(self.wk.b),
            wv: store.slice(self.wv.w),
            bv: store.slice(self.wv.b),
            wo: store.slice(self.wo.w),
            bo: store.slice(self.wo.b),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        q_in: &[f64],
        k_in: &[f64],
        v_in: &[f64],
        q_rows: usize,
        k_rows: usize,
    ) -> Result<(Vec<f64>, MhaCache)> {
        let dims = MhaDims { q_rows, k_rows, dim: self.dim, heads: self.heads };
        let mut out = vec![0.0; q_rows * self.dim];
        let cache = mha_forward(dims, &self.params(store), q_in, k_in, v_in, &mut out)?;
        Ok((out, cache))
    }

    /// Accumulates into local buffers first, then folds into the flat grad
    /// vector (the eight slices alias the same allocation).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &MhaCache,
        q_in: &[f64],
        k_in: &[f64],
        v_in: &[f64],
        g_out: &[f64],
        gq_in: &mut [f64],
        gk_in: &mut [f64],
        gv_in: &mut [f64],
        q_rows: usize,
        k_rows: usize,
    ) -> Result<()> {
        let d = self.dim;
        let dims = MhaDims { q_rows, k_rows, dim: d, heads: self.heads };
        let mut tmp = vec![vec![0.0; d * d], vec![0.0; d], vec![0.0; d * d], vec![0.0; d],
                           vec![0.0; d * d], vec![0.0; d], vec![0.0; d * d], vec![0.0; d]];
        {
            let [a, b, c, e, f, g, h, i] = tmp.as_mut_slice() else { unreachable!() };
            let mut pg = MhaParamGrads {
                wq: a, bq: b, wk: c, bk: e, wv: f, bv: g, wo: h, bo: i,
            };
            mha_backward(
                dims,
                &self.params(store),
                cache,
                q_in,
                k_in,
                v_in,
                g_out,
                &mut pg,
                gq_in,
                gk_in,
                gv_in,
            )?;
        }
        let ids = [
            self.wq.w, self.wq.b, self.wk.w, self.wk.b, self.wv.w, self.wv.b, self.wo.w, self.wo.b,
        ];
        for (id, local) in ids.iter().zip(&tmp) {
            let dst = grads.slice_mut(*id);
            for (d, s) in dst.iter_mut().zip(local) {
                *d += s;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIds {
    pub kind: LayerKind,
    pub self_attn: Option<MhaIds>,
    pub ln_self: Option<LayerNormIds>,
    pub cross_attn: Option<MhaIds>,
    pub ln_cross: Option<LayerNormIds>,
    pub weight_head: LinearIds,
    pub agg_proj: LinearIds,
    pub ln_agg: LayerNormIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub ln_ffn: LayerNormIds,
    pub refine: LinearIds,
    pub cls: LinearIds,
}

/// Static dimensions shared by every layer of one decoder.
#[derive(Debug, Clone, Copy)]
pub struct LayerDims {
    pub feature_dim: usize,   // D
    pub channels: usize,      // C
    pub keypoints: usize,     // K = 7 + K_l
    pub k_learnable: usize,
    pub scales: usize,        // S
    pub groups: usize,        // G
    pub ffn_hidden: usize,
    pub heads: usize,
}

impl DecoderLayerIds {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: LayerKind,
        dims: &LayerDims,
    ) -> Self {
        let d = dims.feature_dim;
        let (self_attn, ln_self, cross_attn, ln_cross) = if kind == LayerKind::Multi {
            (
                Some(MhaIds::register(store, rng, &format!("{name}.self_attn"), d, dims.heads)),
                Some(LayerNormIds::register(store, rng, &format!("{name}.ln_self"), d)),
                Some(MhaIds::register(store, rng, &format!("{name}.cross_attn"), d, dims.heads)),
                Some(LayerNormIds::register(store, rng, &format!("{name}.ln_cross"), d)),
            )
        } else {
            (None, None, None, None)
        };
        let ksg = dims.keypoints * dims.scales * dims.groups;
        DecoderLayerIds {
            kind,
            self_attn,
            ln_self,
            cross_attn,
            ln_cross,
            weight_head: LinearIds::register(store, rng, &format!("{name}.weight_head"), ksg, d, false),
            agg_proj: LinearIds::register(store, rng, &format!("{name}.agg_proj"), d, dims.channels, false),
            ln_agg: LayerNormIds::register(store, rng, &format!("{name}.ln_agg"), d),
            ffn1: LinearIds::register(store, rng, &format!("{name}.ffn1"), dims.ffn_hidden, d, false),
            ffn2: LinearIds::register(store, rng, &format!("{name}.ffn2"), d, dims.ffn_hidden, false),
            ln_ffn: LayerNormIds::register(store, rng, &format!("{name}.ln_ffn"), d),
            // zero-initialized output stage: layer 0 passes anchors through
            refine: LinearIds::register(store, rng, &format!("{name}.refine"), ANCHOR_COMPONENTS, d, true),
            cls: LinearIds::register(store, rng, &format!("{name}.cls"), 1, d, true),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Propagated instances serving as cross-attention memory.
pub struct TemporalRef<'a> {
    pub features: &'a [f64],   // M_T x D
    pub embeddings: &'a [f64], // M_T x D
    pub rows: usize,
}

pub struct LayerInput<'a> {
    pub anchors: &'a [Anchor3D],
    pub features: &'a [f64],
    pub embeddings: &'a [f64],
    pub temporal: Option<TemporalRef<'a>>,
    pub pyr: &'a FeaturePyramid,
    pub cams: &'a [CameraModel],
    pub cam_encs: &'a [f64], // N x D
}

pub struct LayerOutput {
    pub anchors: Vec<Anchor3D>,
    pub features: Vec<f64>,
    pub embeddings: Vec<f64>,
    pub confidences: Vec<f64>,
    pub cls_logits: Vec<f64>,
}

struct AttnBlockCache {
    q_in: Vec<f64>,
    k_in: Vec<f64>,
    v_in: Vec<f64>,
    mha: MhaCache,
    y_pre: Vec<f64>,
    ln_stats: Vec<(f64, f64)>,
    k_rows: usize,
}

struct InstanceAggCache {
    keypoints: KeypointSet,
    req: AggregationRequest,
    agg_out: Vec<f64>, // C
}

pub struct LayerCache {
    rows: usize,
    sa: Option<AttnBlockCache>,
    ca: Option<AttnBlockCache>,
    f_at_agg: Vec<f64>,
    agg: Vec<InstanceAggCache>,
    x_agg_pre: Vec<f64>,
    ln_agg_stats: Vec<(f64, f64)>,
    f_post_agg: Vec<f64>,
    ffn_h_pre: Vec<f64>,
    ffn_h_act: Vec<f64>,
    x_ffn_pre: Vec<f64>,
    ln_ffn_stats: Vec<(f64, f64)>,
    o_in: Vec<f64>,
    yaw_pre: Vec<(f64, f64)>,
    psi_refresh: PsiCache,
}

fn add_rows(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl DecoderLayerIds {
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        store: &ParamStore,
        psi: &AnchorEncoderIds,
        offsets: ParamId,
        dims: &LayerDims,
        input: &LayerInput,
        ledger: &TrafficLedger,
    ) -> Result<(LayerOutput, LayerCache)> {
        let m = input.anchors.len();
        let d = dims.feature_dim;
        let n = input.cams.len();

        // attention stage (multi-frame layers only)
        let mut features = input.features.to_vec();
        let sa = if let Some(ids) = &self.self_attn {
            let qk = add_rows(&features, input.embeddings);
            let (attn, mha) = ids.forward(store, &qk, &qk, &features, m, m)?;
            let y_pre = add_rows(&features, &attn);
            let ln = self.ln_self.as_ref().unwrap();
            let mut out = vec![0.0; m * d];
            let mut stats = Vec::with_capacity(m);
            for i in 0..m {
                stats.push(ln.forward(store, &y_pre[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]));
            }
            let cache = AttnBlockCache {
                q_in: qk.clone(),
                k_in: qk,
                v_in: features.clone(),
                mha,
                y_pre,
                ln_stats: stats,
                k_rows: m,
            };
            features = out;
            Some(cache)
        } else {
            None
        };

        let ca = match (&self.cross_attn, &input.temporal) {
            (Some(ids), Some(t)) if t.rows > 0 => {
                let q_in = add_rows(&features, input.embeddings);
                let k_in = add_rows(t.features, t.embeddings);
                let v_in = t.features.to_vec();
                let (attn, mha) = ids.forward(store, &q_in, &k_in, &v_in, m, t.rows)?;
                let y_pre = add_rows(&features, &attn);
                let ln = self.ln_cross.as_ref().unwrap();
                let mut out = vec![0.0; m * d];
                let mut stats = Vec::with_capacity(m);
                for i in 0..m {
                    stats.push(ln.forward(store, &y_pre[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]));
                }
                let cache = AttnBlockCache { q_in, k_in, v_in, mha, y_pre, ln_stats: stats, k_rows: t.rows };
                features = out;
                Some(cache)
            }
            _ => None,
        };

        let f_at_agg = features.clone();

        // deformable aggregation per instance
        let offsets_tensor = Tensor::new(
            vec![dims.k_learnable.max(1), 3],
            if dims.k_learnable > 0 {
                store.slice(offsets).to_vec()
            } else {
                vec![0.0; 3]
            },
        )?;
        let offsets_opt = if dims.k_learnable > 0 { Some(&offsets_tensor) } else { None };
        let ksg = dims.keypoints * dims.scales * dims.groups;
        let mut agg_caches = Vec::with_capacity(m);
        let mut x_agg_pre = vec![0.0; m * d];
        let mut f_post_agg = vec![0.0; m * d];
        let mut ln_agg_stats = Vec::with_capacity(m);
        let mut head_out = vec![0.0; ksg];
        for i in 0..m {
            let kps = generate_keypoints(&input.anchors[i], offsets_opt)?;
            let (points, visible) = project_keypoints(&kps, input.cams)?;
            let mut logits = Tensor::zeros(&[dims.keypoints, n, dims.scales, dims.groups]);
            let f_i = &f_at_agg[i * d..(i + 1) * d];
            for ni in 0..n {
                let head_in = add_rows(f_i, &input.cam_encs[ni * d..(ni + 1) * d]);
                self.weight_head.forward(store, &head_in, &mut head_out);
                for ki in 0..dims.keypoints {
                    for si in 0..dims.scales {
                        for gi in 0..dims.groups {
                            *logits.at_mut(&[ki, ni, si, gi]) =
                                head_out[(ki * dims.scales + si) * dims.groups + gi];
                        }
                    }
                }
            }
            let weights = normalize_weights(&logits, &visible)?;
            let req = AggregationRequest::new(points, visible, weights)?;
            let agg_out = efficient_aggregate(input.pyr, &req, ledger)?.into_data();
            let mut proj = vec![0.0; d];
            self.agg_proj.forward(store, &agg_out, &mut proj);
            for j in 0..d {
                x_agg_pre[i * d + j] = f_i[j] + proj[j];
            }
            ln_agg_stats.push(self.ln_agg.forward(
                store,
                &x_agg_pre[i * d..(i + 1) * d],
                &mut f_post_agg[i * d..(i + 1) * d],
            ));
            agg_caches.push(InstanceAggCache { keypoints: kps, req, agg_out });
        }

        // feedforward
        let hid = dims.ffn_hidden;
        let mut ffn_h_pre = vec![0.0; m * hid];
        let mut ffn_h_act = vec![0.0; m * hid];
        let mut x_ffn_pre = vec![0.0; m * d];
        let mut f_final = vec![0.0; m * d];
        let mut ln_ffn_stats = Vec::with_capacity(m);
        let mut ff = vec![0.0; d];
        for i in 0..m {
            self.ffn1.forward(store, &f_post_agg[i * d..(i + 1) * d], &mut ffn_h_pre[i * hid..(i + 1) * hid]);
            for j in 0..hid {
                ffn_h_act[i * hid + j] = relu(ffn_h_pre[i * hid + j]);
            }
            self.ffn2.forward(store, &ffn_h_act[i * hid..(i + 1) * hid], &mut ff);
            for j in 0..d {
                x_ffn_pre[i * d + j] = f_post_agg[i * d + j] + ff[j];
            }
            ln_ffn_stats.push(self.ln_ffn.forward(
                store,
                &x_ffn_pre[i * d..(i + 1) * d],
                &mut f_final[i * d..(i + 1) * d],
            ));
        }

        // output stage: anchor refinement and classification on F + E
        let o_in = add_rows(&f_final, input.embeddings);
        let mut anchors_out = Vec::with_capacity(m);
        let mut cls_logits = vec![0.0; m];
        let mut confidences = vec![0.0; m];
        let mut yaw_pre = Vec::with_capacity(m);
        let mut delta = [0.0; ANCHOR_COMPONENTS];
        for i in 0..m {
            let oi = &o_in[i * d..(i + 1) * d];
            self.refine.forward(store, oi, &mut delta);
            let mut logit = [0.0];
            self.cls.forward(store, oi, &mut logit);
            cls_logits[i] = logit[0];
            confidences[i] = sigmoid(logit[0]);
            let a = &input.anchors[i];
            let arr = a.to_array();
            let mut out = [0.0; ANCHOR_COMPONENTS];
            for c in 0..ANCHOR_COMPONENTS {
                out[c] = arr[c] + delta[c];
            }
            yaw_pre.push((out[6], out[7]));
            let mut anchor = Anchor3D::from_array(&out);
            anchor.renormalize_yaw();
            anchors_out.push(anchor);
        }

        let (embeddings, psi_refresh) = psi.encode_batch(store, &anchors_out);

        Ok((
            LayerOutput {
                anchors: anchors_out,
                features: f_final,
                embeddings,
                confidences,
                cls_logits,
            },
            LayerCache {
                rows: m,
                sa,
                ca,
                f_at_agg,
                agg: agg_caches,
                x_agg_pre,
                ln_agg_stats,
                f_post_agg,
                ffn_h_pre,
                ffn_h_act,
                x_ffn_pre,
                ln_ffn_stats,
                o_in,
                yaw_pre,
                psi_refresh,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

pub struct LayerGradInput<'a> {
    /// Gradient w.r.t. this layer's output features from downstream layers.
    pub d_features_out: &'a [f64],
    /// Gradient w.r.t. this layer's refreshed embeddings.
    pub d_embeddings_out: &'a [f64],
    /// Gradient w.r.t. the post-renormalization output anchors: per-layer
    /// box loss plus the chained gradient from the next layer, `M x 11`.
    pub d_anchors_out: &'a [f64],
    /// Gradient w.r.t. the classification logits.
    pub d_cls_logits: &'a [f64],
}

pub struct LayerGradOutput {
    pub d_features_in: Vec<f64>,
    pub d_embeddings_in: Vec<f64>,
    pub d_anchors_in: Vec<f64>,
    pub d_temporal_embeddings: Option<Vec<f64>>,
    pub d_cam_encs: Vec<f64>,
}

/// Jacobian of `(s, c) -> (s, c) / |(s, c)|` applied to an upstream pair.
fn yaw_renorm_backward(s: f64, c: f64, gs_out: f64, gc_out: f64) -> (f64, f64) {
    let r2 = s * s + c * c;
    let r = r2.sqrt();
    let r3 = r2 * r;
    let gs = gs_out * (c * c / r3) + gc_out * (-s * c / r3);
    let gc = gs_out * (-s * c / r3) + gc_out * (s * s / r3);
    (gs, gc)
}

impl DecoderLayerIds {
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        psi: &AnchorEncoderIds,
        offsets: ParamId,
        dims: &LayerDims,
        input: &LayerInput,
        cache: &LayerCache,
        ledger: &TrafficLedger,
        g: &LayerGradInput,
    ) -> Result<LayerGradOutput> {
        let m = cache.rows;
        let d = dims.feature_dim;
        let n = input.cams.len();
        let hid = dims.ffn_hidden;
        let ksg = dims.keypoints * dims.scales * dims.groups;

        // 1. embedding refresh: parameter grads plus the gradient into the
        // refreshed anchors (the encoder input)
        let mut d_anchors_total = g.d_anchors_out.to_vec();
        psi.backward_batch(
            store,
            grads,
            &cache.psi_refresh,
            g.d_embeddings_out,
            Some(&mut d_anchors_total),
        );

        // 2. output heads; the pre-renormalization gradient serves both the
        // refinement delta and the pass-through into the input anchor
        let mut d_f4 = g.d_features_out.to_vec();
        let mut d_e_in = vec![0.0; m * d];
        let mut d_anchors_in = vec![0.0; m * ANCHOR_COMPONENTS];
        let mut d_o_in = vec![0.0; d];
        let mut d_delta = [0.0; ANCHOR_COMPONENTS];
        for i in 0..m {
            for c in 0..ANCHOR_COMPONENTS {
                d_delta[c] = d_anchors_total[i * ANCHOR_COMPONENTS + c];
            }
            let (s, c) = cache.yaw_pre[i];
            let (gs, gc) = yaw_renorm_backward(s, c, d_delta[6], d_delta[7]);
            d_delta[6] = gs;
            d_delta[7] = gc;
            for c in 0..ANCHOR_COMPONENTS {
                d_anchors_in[i * ANCHOR_COMPONENTS + c] += d_delta[c];
            }
            d_o_in.iter_mut().for_each(|v| *v = 0.0);
            let oi = &cache.o_in[i * d..(i + 1) * d];
            self.refine.backward(store, grads, oi, &d_delta, Some(&mut d_o_in));
            self.cls
                .backward(store, grads, oi, &[g.d_cls_logits[i]], Some(&mut d_o_in));
            for j in 0..d {
                d_f4[i * d + j] += d_o_in[j];
                d_e_in[i * d + j] += d_o_in[j];
            }
        }

        // 3. feedforward block
        let mut d_f3 = vec![0.0; m * d];
        let mut d_x_ffn = vec![0.0; d];
        let mut d_h = vec![0.0; hid];
        for i in 0..m {
            d_x_ffn.iter_mut().for_each(|v| *v = 0.0);
            self.ln_ffn.backward(
                store,
                grads,
                &cache.x_ffn_pre[i * d..(i + 1) * d],
                cache.ln_ffn_stats[i],
                &d_f4[i * d..(i + 1) * d],
                &mut d_x_ffn,
            );
            for j in 0..d {
                d_f3[i * d + j] += d_x_ffn[j];
            }
            d_h.iter_mut().for_each(|v| *v = 0.0);
            self.ffn2
                .backward(store, grads, &cache.ffn_h_act[i * hid..(i + 1) * hid], &d_x_ffn, Some(&mut d_h));
            for j in 0..hid {
                d_h[j] *= relu_grad(cache.ffn_h_pre[i * hid + j]);
            }
            self.ffn1.backward(
                store,
                grads,
                &cache.f_post_agg[i * d..(i + 1) * d],
                &d_h,
                Some(&mut d_f3[i * d..(i + 1) * d]),
            );
        }

        // 4. aggregation block
        let mut d_f2 = vec![0.0; m * d];
        let mut d_cam_encs = vec![0.0; n * d];
        let mut d_x_pre = vec![0.0; d];
        let mut d_agg = vec![0.0; dims.channels];
        let mut head_gy = vec![0.0; ksg];
        let mut d_head_in = vec![0.0; d];
        for i in 0..m {
            let ac = &cache.agg[i];
            d_x_pre.iter_mut().for_each(|v| *v = 0.0);
            self.ln_agg.backward(
                store,
                grads,
                &cache.x_agg_pre[i * d..(i + 1) * d],
                cache.ln_agg_stats[i],
                &d_f3[i * d..(i + 1) * d],
                &mut d_x_pre,
            );
            for j in 0..d {
                d_f2[i * d + j] += d_x_pre[j];
            }
            d_agg.iter_mut().for_each(|v| *v = 0.0);
            self.agg_proj
                .backward(store, grads, &ac.agg_out, &d_x_pre, Some(&mut d_agg));

            let up = Tensor::new(vec![dims.channels], d_agg.clone())?;
            let (_, grad_points, grad_weights) =
                efficient_aggregate_backward(input.pyr, &ac.req, &up, ledger)?;
            let mut grad_logits = Tensor::zeros(ac.req.weights.shape());
            normalize_weights_backward(&ac.req.weights, &ac.req.visible, &grad_weights, &mut grad_logits);

            // weight head, one call per view
            let f_i = &cache.f_at_agg[i * d..(i + 1) * d];
            for ni in 0..n {
                for ki in 0..dims.keypoints {
                    for si in 0..dims.scales {
                        for gi in 0..dims.groups {
                            head_gy[(ki * dims.scales + si) * dims.groups + gi] =
                                grad_logits.at(&[ki, ni, si, gi]);
                        }
                    }
                }
                let head_in = add_rows(f_i, &input.cam_encs[ni * d..(ni + 1) * d]);
                d_head_in.iter_mut().for_each(|v| *v = 0.0);
                self.weight_head
                    .backward(store, grads, &head_in, &head_gy, Some(&mut d_head_in));
                for j in 0..d {
                    d_f2[i * d + j] += d_head_in[j];
                    d_cam_encs[ni * d + j] += d_head_in[j];
                }
            }

            // keypoint geometry through the projection Jacobian: gradients
            // reach the anchor state (center, extent, yaw pair) for every
            // keypoint and the learnable offsets for theirs
            {
                let a = &input.anchors[i];
                let ryaw = a.yaw_rotation();
                let ryaw_t = mat3_transpose(&ryaw);
                let ext = a.extent();
                let off_data = store.slice(offsets);
                for ki in 0..dims.keypoints {
                    let o_k: [f64; 3] = if ki < 7 {
                        crate::geometry::FIXED_KEYPOINT_OFFSETS[ki]
                    } else {
                        let j = ki - 7;
                        [off_data[j * 3], off_data[j * 3 + 1], off_data[j * 3 + 2]]
                    };
                    let p_ego = ac.keypoints.points()[ki];
                    let q = [o_k[0] * ext[0], o_k[1] * ext[1], o_k[2] * ext[2]];
                    for ni in 0..n {
                        if !ac.req.visible[ki * n + ni] {
                            continue;
                        }
                        let Some(jac) = input.cams[ni].projection_jacobian(&p_ego) else {
                            continue;
                        };
                        let gu = grad_points.at(&[ki, ni, 0]);
                        let gv = grad_points.at(&[ki, ni, 1]);
                        let d_p = [
                            jac[0][0] * gu + jac[1][0] * gv,
                            jac[0][1] * gu + jac[1][1] * gv,
                            jac[0][2] * gu + jac[1][2] * gv,
                        ];
                        let da = &mut d_anchors_in[i * ANCHOR_COMPONENTS..(i + 1) * ANCHOR_COMPONENTS];
                        // center
                        da[0] += d_p[0];
                        da[1] += d_p[1];
                        da[2] += d_p[2];
                        // extent: d p / d ext_j = o_j * R[:, j]
                        let local = mat3_mul_vec(&ryaw_t, &d_p);
                        da[3] += o_k[0] * local[0];
                        da[4] += o_k[1] * local[1];
                        da[5] += o_k[2] * local[2];
                        // yaw pair: dR/ds q = (-q_y, q_x, 0), dR/dc q = (q_x, q_y, 0)
                        da[6] += -q[1] * d_p[0] + q[0] * d_p[1];
                        da[7] += q[0] * d_p[0] + q[1] * d_p[1];
                        if ki >= 7 {
                            let j = ki - 7;
                            let g_off = grads.slice_mut(offsets);
                            g_off[j * 3] += ext[0] * local[0];
                            g_off[j * 3 + 1] += ext[1] * local[1];
                            g_off[j * 3 + 2] += ext[2] * local[2];
                        }
                    }
                }
            }
        }

        // 5. attention blocks, in reverse
        let mut d_temporal_e = None;
        let mut d_current = d_f2;
        if let (Some(cac), Some(ids)) = (&cache.ca, &self.cross_attn) {
            let ln = self.ln_cross.as_ref().unwrap();
            let mut d_y = vec![0.0; m * d];
            for i in 0..m {
                ln.backward(
                    store,
                    grads,
                    &cac.y_pre[i * d..(i + 1) * d],
                    cac.ln_stats[i],
                    &d_current[i * d..(i + 1) * d],
                    &mut d_y[i * d..(i + 1) * d],
                );
            }
            let mut d_f1 = d_y.clone(); // residual path
            let mut gq = vec![0.0; m * d];
            let mut gk = vec![0.0; cac.k_rows * d];
            let mut gv = vec![0.0; cac.k_rows * d];
            ids.backward(
                store, grads, &cac.mha, &cac.q_in, &cac.k_in, &cac.v_in, &d_y, &mut gq, &mut gk,
                &mut gv, m, cac.k_rows,
            )?;
            for j in 0..m * d {
                d_f1[j] += gq[j];
                d_e_in[j] += gq[j];
            }
            // k = F_T + E_T, v = F_T: temporal features are detached at the
            // frame boundary, so only the embedding part propagates
            let mut d_te = gk;
            let _ = gv;
            d_temporal_e = Some(std::mem::take(&mut d_te));
            d_current = d_f1;
        }

        if let (Some(sac), Some(ids)) = (&cache.sa, &self.self_attn) {
            let ln = self.ln_self.as_ref().unwrap();
            let mut d_y = vec![0.0; m * d];
            for i in 0..m {
                ln.backward(
                    store,
                    grads,
                    &sac.y_pre[i * d..(i + 1) * d],
                    sac.ln_stats[i],
                    &d_current[i * d..(i + 1) * d],
                    &mut d_y[i * d..(i + 1) * d],
                );
            }
            let mut d_f_in = d_y.clone();
            let mut gq = vec![0.0; m * d];
            let mut gk = vec![0.0; m * d];
            let mut gv = vec![0.0; m * d];
            ids.backward(
                store, grads, &sac.mha, &sac.q_in, &sac.k_in, &sac.v_in, &d_y, &mut gq, &mut gk,
                &mut gv, m, m,
            )?;
            for j in 0..m * d {
                d_f_in[j] += gq[j] + gk[j] + gv[j];
                d_e_in[j] += gq[j] + gk[j];
            }
            d_current = d_f_in;
        }

        Ok(LayerGradOutput {
            d_features_in: d_current,
            d_embeddings_in: d_e_in,
            d_anchors_in,
            d_temporal_embeddings: d_temporal_e,
            d_cam_encs,
        })
    }
}

// ---------------------------------------------------------------------------
// Multi-frame sampling variant (benchmark baseline)
// ---------------------------------------------------------------------------

/// One cached historical frame for the multi-frame sampling baseline: its
/// feature pyramid and the current anchors re-expressed in that frame's ego
/// coordinates.
pub struct MultiFrameView<'a> {
    pub pyr: &'a FeaturePyramid,
    pub anchors: &'a [Anchor3D],
}

pub struct MultiFrameLayerInput<'a> {
    pub anchors: &'a [Anchor3D],
    pub features: &'a [f64],
    pub embeddings: &'a [f64],
    pub views: &'a [MultiFrameView<'a>],
    pub cams: &'a [CameraModel],
    pub cam_encs: &'a [f64],
}

impl DecoderLayerIds {
    /// Forward-only layer pass that samples every cached frame and fuses by
    /// averaging, the way the pre-recurrent lineage did. Aggregation runs
    /// once per (instance, cached frame), so per-frame call counts scale
    /// linearly with the window length.
    pub fn forward_multiframe(
        &self,
        store: &ParamStore,
        psi: &AnchorEncoderIds,
        offsets: ParamId,
        dims: &LayerDims,
        input: &MultiFrameLayerInput,
        ledger: &TrafficLedger,
    ) -> Result<LayerOutput> {
        let m = input.anchors.len();
        let d = dims.feature_dim;
        let n = input.cams.len();
        assert!(!input.views.is_empty(), "multi-frame pass needs >= 1 cached frame");

        // self-attention only; there is no temporal instance memory in this
        // mode
        let mut features = input.features.to_vec();
        if let (Some(ids), Some(ln)) = (&self.self_attn, &self.ln_self) {
            let qk = add_rows(&features, input.embeddings);
            let (attn, _) = ids.forward(store, &qk, &qk, &features, m, m)?;
            let y = add_rows(&features, &attn);
            let mut out = vec![0.0; m * d];
            for i in 0..m {
                ln.forward(store, &y[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
            }
            features = out;
        }

        let offsets_tensor = Tensor::new(
            vec![dims.k_learnable.max(1), 3],
            if dims.k_learnable > 0 {
                store.slice(offsets).to_vec()
            } else {
                vec![0.0; 3]
            },
        )?;
        let offsets_opt = if dims.k_learnable > 0 { Some(&offsets_tensor) } else { None };
        let ksg = dims.keypoints * dims.scales * dims.groups;
        let mut head_out = vec![0.0; ksg];
        let mut f_out = vec![0.0; m * d];
        for i in 0..m {
            let f_i = &features[i * d..(i + 1) * d];
            // per-view logits depend only on the current features
            let mut logits = Tensor::zeros(&[dims.keypoints, n, dims.scales, dims.groups]);
            for ni in 0..n {
                let head_in = add_rows(f_i, &input.cam_encs[ni * d..(ni + 1) * d]);
                self.weight_head.forward(store, &head_in, &mut head_out);
                for ki in 0..dims.keypoints {
                    for si in 0..dims.scales {
                        for gi in 0..dims.groups {
                            *logits.at_mut(&[ki, ni, si, gi]) =
                                head_out[(ki * dims.scales + si) * dims.groups + gi];
                        }
                    }
                }
            }
            // sample every cached frame, fuse by averaging
            let mut fused = vec![0.0; dims.channels];
            for view in input.views {
                let kps = generate_keypoints(&view.anchors[i], offsets_opt)?;
                let (points, visible) = project_keypoints(&kps, input.cams)?;
                let weights = normalize_weights(&logits, &visible)?;
                let req = AggregationRequest::new(points, visible, weights)?;
                let agg = efficient_aggregate(view.pyr, &req, ledger)?;
                for (dst, src) in fused.iter_mut().zip(agg.data()) {
                    *dst += src / input.views.len() as f64;
                }
            }
            let mut proj = vec![0.0; d];
            self.agg_proj.forward(store, &fused, &mut proj);
            let x: Vec<f64> = f_i.iter().zip(&proj).map(|(a, b)| a + b).collect();
            self.ln_agg.forward(store, &x, &mut f_out[i * d..(i + 1) * d]);
        }

        // feedforward and output stage, same as the recurrent path
        let hid = dims.ffn_hidden;
        let mut h = vec![0.0; hid];
        let mut ff = vec![0.0; d];
        let mut f_final = vec![0.0; m * d];
        for i in 0..m {
            self.ffn1.forward(store, &f_out[i * d..(i + 1) * d], &mut h);
            h.iter_mut().for_each(|v| *v = relu(*v));
            self.ffn2.forward(store, &h, &mut ff);
            let x2: Vec<f64> = f_out[i * d..(i + 1) * d]
                .iter()
                .zip(&ff)
                .map(|(a, b)| a + b)
                .collect();
            self.ln_ffn.forward(store, &x2, &mut f_final[i * d..(i + 1) * d]);
        }

        let o_in = add_rows(&f_final, input.embeddings);
        let mut anchors_out = Vec::with_capacity(m);
        let mut cls_logits = vec![0.0; m];
        let mut confidences = vec![0.0; m];
        let mut delta = [0.0; ANCHOR_COMPONENTS];
        for i in 0..m {
            let oi = &o_in[i * d..(i + 1) * d];
            self.refine.forward(store, oi, &mut delta);
            let mut logit = [0.0];
            self.cls.forward(store, oi, &mut logit);
            cls_logits[i] = logit[0];
            confidences[i] = sigmoid(logit[0]);
            let arr = input.anchors[i].to_array();
            let mut out = [0.0; ANCHOR_COMPONENTS];
            for c in 0..ANCHOR_COMPONENTS {
                out[c] = arr[c] + delta[c];
            }
            let mut anchor = Anchor3D::from_array(&out);
            anchor.renormalize_yaw();
            anchors_out.push(anchor);
        }
        let (embeddings, _) = psi.encode_batch(store, &anchors_out);

        Ok(LayerOutput {
            anchors: anchors_out,
            features: f_final,
            embeddings,
            confidences,
            cls_logits,
        })
    }
}
