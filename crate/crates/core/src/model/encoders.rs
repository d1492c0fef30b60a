//! Anchor and camera-parameter encoders.
//!
//! The anchor encoder maps the 11-component anchor state to a feature-dim
//! embedding through a two-layer perceptron with a final layer norm; it runs
//! after every anchor update so embeddings never go stale. The camera encoder
//! flattens the intrinsic-times-extrinsic `3 x 4` transform, normalizes by
//! the image width and runs a two-layer perceptron; its output is added to
//! instance features when computing that view's aggregation weights.

use crate::geometry::{Anchor3D, CameraModel};
use crate::model::params::{Grads, LayerNormIds, LinearIds, ParamStore};
use crate::numerics::nn::{relu, relu_grad};
use crate::rng::ChaCha8Rng;

pub const ANCHOR_DIM: usize = 11;
pub const CAMERA_INPUT_DIM: usize = 12;

#[derive(Debug, Clone, Copy)]
pub struct AnchorEncoderIds {
    pub l1: LinearIds,
    pub l2: LinearIds,
    pub ln: LayerNormIds,
    pub dim: usize,
}

/// Forward intermediates for one batch of anchor encodings.
pub struct PsiCache {
    pub inputs: Vec<f64>,  // M x 11
    pub h_pre: Vec<f64>,   // M x D (before relu)
    pub h_act: Vec<f64>,   // M x D
    pub y_pre: Vec<f64>,   // M x D (before layer norm)
    pub ln_stats: Vec<(f64, f64)>,
    pub rows: usize,
}

impl AnchorEncoderIds {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        AnchorEncoderIds {
            l1: LinearIds::register(store, rng, "anchor_encoder.l1", dim, ANCHOR_DIM, false),
            l2: LinearIds::register(store, rng, "anchor_encoder.l2", dim, dim, false),
            ln: LayerNormIds::register(store, rng, "anchor_encoder.ln", dim),
            dim,
        }
    }

    /// Encodes a batch of anchors to `M x D` embeddings.
    pub fn encode_batch(&self, store: &ParamStore, anchors: &[Anchor3D]) -> (Vec<f64>, PsiCache) {
        let m = anchors.len();
        let d = self.dim;
        let mut cache = PsiCache {
            inputs: Vec::with_capacity(m * ANCHOR_DIM),
            h_pre: vec![0.0; m * d],
            h_act: vec![0.0; m * d],
            y_pre: vec![0.0; m * d],
            ln_stats: Vec::with_capacity(m),
            rows: m,
        };
        let mut out = vec![0.0; m * d];
        for (i, a) in anchors.iter().enumerate() {
            cache.inputs.extend_from_slice(&a.to_array());
            let x = &cache.inputs[i * ANCHOR_DIM..(i + 1) * ANCHOR_DIM];
            self.l1.forward(store, x, &mut cache.h_pre[i * d..(i + 1) * d]);
            for j in 0..d {
                cache.h_act[i * d + j] = relu(cache.h_pre[i * d + j]);
            }
            let (h_act, y_pre) = (&cache.h_act[i * d..(i + 1) * d], &mut cache.y_pre[i * d..(i + 1) * d]);
            self.l2.forward(store, h_act, y_pre);
            let stats = self.ln.forward(store, &cache.y_pre[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
            cache.ln_stats.push(stats);
        }
        (out, cache)
    }

    /// Single-anchor convenience used by the public encode operation.
    pub fn encode_one(&self, store: &ParamStore, a: &Anchor3D) -> Vec<f64> {
        self.encode_batch(store, std::slice::from_ref(a)).0
    }

    /// Accumulates parameter gradients for a batch; when `d_inputs` is given
    /// (`M x 11`, accumulated) the gradient w.r.t. the anchor components is
    /// produced as well.
    pub fn backward_batch(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &PsiCache,
        d_out: &[f64],
        mut d_inputs: Option<&mut [f64]>,
    ) {
        let d = self.dim;
        let mut gy_pre = vec![0.0; d];
        let mut gh_act = vec![0.0; d];
        for i in 0..cache.rows {
            let row = i * d;
            gy_pre.iter_mut().for_each(|g| *g = 0.0);
            self.ln.backward(
                store,
                grads,
                &cache.y_pre[row..row + d],
                cache.ln_stats[i],
                &d_out[row..row + d],
                &mut gy_pre,
            );
            gh_act.iter_mut().for_each(|g| *g = 0.0);
            self.l2.backward(store, grads, &cache.h_act[row..row + d], &gy_pre, Some(&mut gh_act));
            for j in 0..d {
                gh_act[j] *= relu_grad(cache.h_pre[row + j]);
            }
            let gx = d_inputs
                .as_deref_mut()
                .map(|g| &mut g[i * ANCHOR_DIM..(i + 1) * ANCHOR_DIM]);
            self.l1
                .backward(store, grads, &cache.inputs[i * ANCHOR_DIM..(i + 1) * ANCHOR_DIM], &gh_act, gx);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CameraEncoderIds {
    pub l1: LinearIds,
    pub l2: LinearIds,
    pub dim: usize,
}

pub struct CameraEncoderCache {
    pub inputs: Vec<f64>, // N x 12
    pub h_pre: Vec<f64>,  // N x D
    pub h_act: Vec<f64>,  // N x D
    pub views: usize,
}

/// Flattened `intrinsic * extrinsic` top `3 x 4` block, normalized by image
/// width.
pub fn camera_input_vector(cam: &CameraModel) -> [f64; CAMERA_INPUT_DIM] {
    let k = cam.intrinsic();
    let e = cam.extrinsic34();
    let mut out = [0.0; CAMERA_INPUT_DIM];
    for i in 0..3 {
        for j in 0..4 {
            let mut acc = 0.0;
            for t in 0..3 {
                acc += k[i][t] * e[t][j];
            }
            out[i * 4 + j] = acc / cam.width as f64;
        }
    }
    out
}

impl CameraEncoderIds {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        CameraEncoderIds {
            l1: LinearIds::register(store, rng, "camera_encoder.l1", dim, CAMERA_INPUT_DIM, false),
            l2: LinearIds::register(store, rng, "camera_encoder.l2", dim, dim, false),
            dim,
        }
    }

    pub fn encode_all(&self, store: &ParamStore, cams: &[CameraModel]) -> (Vec<f64>, CameraEncoderCache) {
        let n = cams.len();
        let d = self.dim;
        let mut cache = CameraEncoderCache {
            inputs: Vec::with_capacity(n * CAMERA_INPUT_DIM),
            h_pre: vec![0.0; n * d],
            h_act: vec![0.0; n * d],
            views: n,
        };
        let mut out = vec![0.0; n * d];
        for (i, cam) in cams.iter().enumerate() {
            cache.inputs.extend_from_slice(&camera_input_vector(cam));
            let x = &cache.inputs[i * CAMERA_INPUT_DIM..(i + 1) * CAMERA_INPUT_DIM];
            self.l1.forward(store, x, &mut cache.h_pre[i * d..(i + 1) * d]);
            for j in 0..d {
                cache.h_act[i * d + j] = relu(cache.h_pre[i * d + j]);
            }
            let (h_act, o) = (&cache.h_act[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
            self.l2.forward(store, h_act, o);
        }
        (out, cache)
    }

    pub fn encode_one(&self, store: &ParamStore, cam: &CameraModel) -> Vec<f64> {
        self.encode_all(store, std::slice::from_ref(cam)).0
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &CameraEncoderCache,
        d_out: &[f64],
    ) {
        let d = self.dim;
        let mut gh_act = vec![0.0; d];
        for i in 0..cache.views {
            let row = i * d;
            gh_act.iter_mut().for_each(|g| *g = 0.0);
            self.l2.backward(store, grads, &cache.h_act[row..row + d], &d_out[row..row + d], Some(&mut gh_act));
            for j in 0..d {
                gh_act[j] *= relu_grad(cache.h_pre[row + j]);
            }
            self.l1.backward(
                store,
                grads,
                &cache.inputs[i * CAMERA_INPUT_DIM..(i + 1) * CAMERA_INPUT_DIM],
                &gh_act,
                None,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::outward_rig;
    use crate::model::params::ParamStore;
    use crate::numerics::gradcheck::finite_diff_check_flat;
    use crate::rng::{normal, stream};

    #[test]
    fn anchor_encoding_is_deterministic_and_sensitive() {
        let mut rng = stream(80, "psi");
        let mut store = ParamStore::new();
        let psi = AnchorEncoderIds::register(&mut store, &mut rng, 16);
        let a = Anchor3D::at(3.0, -1.0, 0.5, 0.3);
        let e1 = psi.encode_one(&store, &a);
        let e2 = psi.encode_one(&store, &a);
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 16);
        // moving 10 m in x must change the embedding
        let b = Anchor3D::at(13.0, -1.0, 0.5, 0.3);
        let eb = psi.encode_one(&store, &b);
        let dist: f64 = e1.iter().zip(&eb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn camera_encodings_distinct_across_rig() {
        let mut rng = stream(81, "camenc");
        let mut store = ParamStore::new();
        let enc = CameraEncoderIds::register(&mut store, &mut rng, 16);
        let rig = outward_rig(6, 70.0, 64, 40, 1.6).unwrap();
        let (encs, _) = enc.encode_all(&store, &rig);
        let c0 = enc.encode_one(&store, &rig[0]);
        assert_eq!(&encs[..16], &c0[..]);
        for i in 1..6 {
            let d: f64 = encs[..16]
                .iter()
                .zip(&encs[i * 16..(i + 1) * 16])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(d > 0.0, "cameras 0 and {i} encode identically");
        }
    }

    #[test]
    fn encoder_backwards_match_fd() {
        let mut rng = stream(82, "psi-fd");
        let mut store = ParamStore::new();
        let psi = AnchorEncoderIds::register(&mut store, &mut rng, 6);
        let cam_enc = CameraEncoderIds::register(&mut store, &mut rng, 6);
        let anchors = vec![Anchor3D::at(2.0, 1.0, 0.0, 0.4), Anchor3D::at(-3.0, 4.0, 1.0, -0.2)];
        let rig = outward_rig(2, 70.0, 32, 24, 1.5).unwrap();
        let up_a: Vec<f64> = (0..12).map(|_| normal(&mut rng)).collect();
        let up_c: Vec<f64> = (0..12).map(|_| normal(&mut rng)).collect();

        let f = |flat: &[f64]| -> f64 {
            let mut s = store.clone();
            s.data_mut().copy_from_slice(flat);
            let (ea, _) = psi.encode_batch(&s, &anchors);
            let (ec, _) = cam_enc.encode_all(&s, &rig);
            ea.iter().zip(&up_a).map(|(a, b)| a * b).sum::<f64>()
                + ec.iter().zip(&up_c).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut grads = Grads::zeros_like(&store);
        let (_, pc) = psi.encode_batch(&store, &anchors);
        psi.backward_batch(&store, &mut grads, &pc, &up_a, None);
        let (_, cc) = cam_enc.encode_all(&store, &rig);
        cam_enc.backward(&store, &mut grads, &cc, &up_c);

        let err = finite_diff_check_flat(f, store.data(), grads.data(), 1e-5).unwrap();
        assert!(err < 1e-6, "encoder gradient error {err}");
    }
}
