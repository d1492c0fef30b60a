//! The runtime property suite behind the `verify` subcommand: oracle
//! equivalence sweeps, gradient checks and geometry round trips, reported as
//! structured pass/fail results with a serializable failing case.

use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{
    basic_aggregate, efficient_aggregate, efficient_aggregate_backward, normalize_weights,
    AggregationRequest, FeaturePyramid, TrafficLedger,
};
use crate::geometry::{project_anchor, rot_z, Anchor3D, EgoMotion};
use crate::model::{DecoderConfig, Grads, Model, ModelConfig, PerLayerGrads, SceneBounds};
use crate::numerics::gradcheck::finite_diff_check_flat;
use crate::rng::{normal, stream, ChaCha8Rng};
use crate::tensor::Tensor;

/// Deliberate fault hooks used to prove the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Multiplies one aggregation weight by `1 + 1e-3` on the fused side
    /// only, breaking the equivalence sweep.
    PerturbAggregationWeight,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failing_case: Option<serde_json::Value>,
}

impl PropertyResult {
    fn pass(name: &str, detail: String) -> Self {
        PropertyResult { name: name.to_string(), pass: true, detail, failing_case: None }
    }

    fn fail(name: &str, detail: String, case: Option<serde_json::Value>) -> Self {
        PropertyResult { name: name.to_string(), pass: false, detail, failing_case: case }
    }
}

struct RandomInstance {
    pyr: FeaturePyramid,
    req: AggregationRequest,
    descriptor: serde_json::Value,
}

fn random_instance(rng: &mut ChaCha8Rng, index: usize) -> RandomInstance {
    let k = rng.gen_range(1..=16);
    let n = rng.gen_range(1..=6);
    let s_count = rng.gen_range(1..=4);
    let g_count = rng.gen_range(1..=4usize);
    let c = g_count * rng.gen_range(1..=(32 / g_count));
    let h0 = rng.gen_range(4..=32);
    let w0 = rng.gen_range(4..=32);
    let mut maps = Vec::new();
    for si in 0..s_count {
        let h = (h0 >> si).max(2);
        let w = (w0 >> si).max(2);
        maps.push(Tensor::from_fn(&[n, c, h, w], |_| normal(rng)));
    }
    let pyr = FeaturePyramid::new(maps).unwrap();
    let mut visible = vec![false; k * n];
    let mut points = vec![-1.0; k * n * 2];
    for i in 0..k * n {
        if rng.gen_bool(0.75) {
            visible[i] = true;
            points[i * 2] = rng.gen_range(0.0..(w0 - 1) as f64);
            points[i * 2 + 1] = rng.gen_range(0.0..(h0 - 1) as f64);
        }
    }
    let logits = Tensor::from_fn(&[k, n, s_count, g_count], |_| normal(rng));
    let weights = normalize_weights(&logits, &visible).unwrap();
    let req = AggregationRequest::new(Tensor::new(vec![k, n, 2], points).unwrap(), visible, weights)
        .unwrap();
    RandomInstance {
        pyr,
        req,
        descriptor: serde_json::json!({
            "index": index, "K": k, "N": n, "S": s_count, "G": g_count, "C": c,
            "H0": h0, "W0": w0,
        }),
    }
}

/// Fused-vs-reference equivalence over 100 seeded random instances.
pub fn check_aggregation_equivalence(seed: u64, fault: Option<FaultInjection>) -> PropertyResult {
    let name = "aggregation-equivalence";
    let instances: Vec<RandomInstance> = {
        let mut rng = stream(seed, "verify-agg-equiv");
        (0..100).map(|i| random_instance(&mut rng, i)).collect()
    };
    let results: Vec<(f64, &serde_json::Value)> = instances
        .par_iter()
        .map(|inst| {
            let ledger = TrafficLedger::new();
            let basic = basic_aggregate(&inst.pyr, &inst.req, &ledger).unwrap();
            let mut fused_req = inst.req.clone();
            if fault == Some(FaultInjection::PerturbAggregationWeight) {
                if let Some(w) = fused_req
                    .weights
                    .data_mut()
                    .iter_mut()
                    .find(|w| **w > 0.0)
                {
                    *w *= 1.0 + 1e-3;
                }
            }
            let fused = efficient_aggregate(&inst.pyr, &fused_req, &ledger).unwrap();
            let diff = basic
                .data()
                .iter()
                .zip(fused.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            (diff, &inst.descriptor)
        })
        .collect();
    let (worst, case) = results
        .iter()
        .fold((0.0f64, None), |(m, c), (d, desc)| if *d > m { (*d, Some(*desc)) } else { (m, c) });
    if worst < 1e-10 {
        PropertyResult::pass(name, format!("100 instances, max |fused - basic| = {worst:.3e}"))
    } else {
        PropertyResult::fail(
            name,
            format!("max |fused - basic| = {worst:.3e} exceeds 1e-10"),
            case.cloned(),
        )
    }
}

/// Finite-difference check of the fused backward on a random instance.
pub fn check_aggregation_gradients(seed: u64) -> PropertyResult {
    let name = "aggregation-gradients";
    let mut rng = stream(seed, "verify-agg-grad");
    let (k, n, s_count, g_count, c) = (4, 3, 2, 2, 4);
    let maps = vec![
        Tensor::from_fn(&[n, c, 7, 8], |_| normal(&mut rng)),
        Tensor::from_fn(&[n, c, 4, 4], |_| normal(&mut rng)),
    ];
    let pyr = FeaturePyramid::new(maps).unwrap();
    let mut visible = vec![true; k * n];
    visible[2] = false;
    let mut pts = vec![-1.0; k * n * 2];
    for i in 0..k * n {
        if visible[i] {
            pts[i * 2] = rng.gen_range(1.0f64..6.0).floor() + rng.gen_range(0.2..0.8);
            pts[i * 2 + 1] = rng.gen_range(1.0f64..5.0).floor() + rng.gen_range(0.2..0.8);
        }
    }
    let logits = Tensor::from_fn(&[k, n, s_count, g_count], |_| normal(&mut rng));
    let weights = normalize_weights(&logits, &visible).unwrap();
    let req = AggregationRequest::new(Tensor::new(vec![k, n, 2], pts).unwrap(), visible, weights)
        .unwrap();
    let up = Tensor::from_fn(&[c], |_| normal(&mut rng));
    let ledger = TrafficLedger::new();
    let (gp, gpts, gw) = efficient_aggregate_backward(&pyr, &req, &up, &ledger).unwrap();

    let eval = |pyr: &FeaturePyramid, req: &AggregationRequest| -> f64 {
        let out = efficient_aggregate(pyr, req, &ledger).unwrap();
        out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for si in 0..s_count {
        for i in 0..pyr.map(si).len() {
            let mut pp = pyr.clone();
            pp.maps_mut()[si].data_mut()[i] += h;
            let mut pm = pyr.clone();
            pm.maps_mut()[si].data_mut()[i] -= h;
            let fd = (eval(&pp, &req) - eval(&pm, &req)) / (2.0 * h);
            worst = worst.max(crate::numerics::rel_error(fd, gp.map(si).data()[i]));
        }
    }
    for i in 0..k * n * 2 {
        if !req.visible[i / 2] {
            continue;
        }
        let mut rp = req.clone();
        rp.points.data_mut()[i] += h;
        let mut rm = req.clone();
        rm.points.data_mut()[i] -= h;
        let fd = (eval(&pyr, &rp) - eval(&pyr, &rm)) / (2.0 * h);
        worst = worst.max(crate::numerics::rel_error(fd, gpts.data()[i]));
    }
    for i in 0..req.weights.len() {
        let mut rp = req.clone();
        rp.weights.data_mut()[i] += h;
        let mut rm = req.clone();
        rm.weights.data_mut()[i] -= h;
        let fd = (eval(&pyr, &rp) - eval(&pyr, &rm)) / (2.0 * h);
        worst = worst.max(crate::numerics::rel_error(fd, gw.data()[i]));
    }
    if worst < 1e-5 {
        PropertyResult::pass(name, format!("max relative error {worst:.3e}"))
    } else {
        PropertyResult::fail(name, format!("max relative error {worst:.3e} exceeds 1e-5"), None)
    }
}

/// Rigid-motion fidelity: round trips, stationary-object consistency, speed
/// and extent preservation over 10^4 random planar motions.
pub fn check_geometry_roundtrips(seed: u64) -> PropertyResult {
    let name = "geometry-roundtrips";
    let mut rng = stream(seed, "verify-geom");
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let yaw = rng.gen_range(-3.0f64..3.0);
        let mut a = Anchor3D {
            x: rng.gen_range(-30.0..30.0),
            y: rng.gen_range(-30.0..30.0),
            z: rng.gen_range(-2.0..2.0),
            w: rng.gen_range(0.5..4.0),
            l: rng.gen_range(0.5..6.0),
            h: rng.gen_range(0.5..3.0),
            sin_yaw: yaw.sin(),
            cos_yaw: yaw.cos(),
            vx: rng.gen_range(-8.0..8.0),
            vy: rng.gen_range(-8.0..8.0),
            vz: rng.gen_range(-1.0..1.0),
        };
        let m = EgoMotion::new(
            rot_z(rng.gen_range(-3.0f64..3.0)),
            [normal(&mut rng) * 3.0, normal(&mut rng) * 3.0, normal(&mut rng) * 0.2],
            rng.gen_range(0.0..1.0),
        )
        .unwrap();
        // speed and extent preservation under the full motion
        let b = project_anchor(&a, &m);
        let speed_drift = (crate::geometry::norm3(&b.velocity()) - crate::geometry::norm3(&a.velocity())).abs();
        worst = worst.max(speed_drift);
        if b.extent() != a.extent() {
            return PropertyResult::fail(name, "extent changed under projection".to_string(), None);
        }
        // round trip with zero velocity
        a.vx = 0.0;
        a.vy = 0.0;
        a.vz = 0.0;
        let m0 = EgoMotion { dt: 0.0, ..m };
        let back = project_anchor(&project_anchor(&a, &m0), &m0.inverse());
        for (x, y) in back.to_array().iter().zip(a.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    if worst < 1e-9 {
        PropertyResult::pass(name, format!("10^4 cases, max drift {worst:.3e}"))
    } else {
        PropertyResult::fail(name, format!("max drift {worst:.3e} exceeds 1e-9"), None)
    }
}

/// Feature carry through propagation is bytewise; embeddings are exactly the
/// encoder output.
pub fn check_propagation_fidelity(seed: u64) -> PropertyResult {
    let name = "propagation-fidelity";
    let cfg = ModelConfig {
        decoder: DecoderConfig {
            num_single_frame_layers: 1,
            num_multi_frame_layers: 1,
            total_instances: 4,
            temporal_instances: 2,
            feature_dim: 16,
            heads: 2,
            k_learnable: 2,
        },
        channels: 8,
        scales: 1,
        groups: 2,
        ffn_hidden: 16,
        equivalent_focal: 30.0,
        scene_bounds: SceneBounds::default(),
        seed,
    };
    let model = Model::new(cfg).unwrap();
    let mut rng = stream(seed, "verify-prop");
    let d = model.feature_dim();
    let anchors: Vec<Anchor3D> = (0..3)
        .map(|_| {
            let mut a = Anchor3D::at(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(-3.0f64..3.0),
            );
            a.vx = rng.gen_range(-3.0..3.0);
            a.vy = rng.gen_range(-3.0..3.0);
            a
        })
        .collect();
    let set = crate::model::InstanceSet {
        features: Tensor::from_fn(&[3, d], |_| normal(&mut rng)),
        embeddings: Tensor::zeros(&[3, d]),
        confidences: vec![0.3, 0.9, 0.5],
        anchors,
    };
    let m = EgoMotion::new(rot_z(0.3), [1.0, -0.5, 0.0], 0.5).unwrap();
    let out = model.propagate_instances(&set, &m);
    if out.features.data() != set.features.data() {
        return PropertyResult::fail(name, "features not carried bytewise".to_string(), None);
    }
    for (i, a) in out.anchors.iter().enumerate() {
        let emb = model.anchor_encode(a);
        if emb.data() != &out.embeddings.data()[i * d..(i + 1) * d] {
            return PropertyResult::fail(name, format!("embedding {i} stale"), None);
        }
    }
    PropertyResult::pass(name, "features bytewise, embeddings re-encoded".to_string())
}

/// End-to-end decoder gradient check on a 2-instance, 1-camera micro
/// configuration.
pub fn check_micro_decoder_gradients(seed: u64) -> PropertyResult {
    let name = "micro-decoder-gradients";
    let cfg = ModelConfig {
        decoder: DecoderConfig {
            num_single_frame_layers: 1,
            num_multi_frame_layers: 1,
            total_instances: 2,
            temporal_instances: 1,
            feature_dim: 8,
            heads: 2,
            k_learnable: 1,
        },
        channels: 4,
        scales: 1,
        groups: 2,
        ffn_hidden: 12,
        equivalent_focal: 20.0,
        scene_bounds: SceneBounds { x_min: 8.0, x_max: 14.0, y_min: -2.0, y_max: 2.0 },
        seed,
    };
    let mut model = Model::new(cfg.clone()).unwrap();
    let mut wrng = stream(seed, "verify-micro-heads");
    for layer in &model.layers {
        for id in [layer.refine.w, layer.refine.b, layer.cls.w, layer.cls.b] {
            for v in model.store.slice_mut(id) {
                *v = 0.15 * normal(&mut wrng);
            }
        }
    }
    let mut rng = stream(seed, "verify-micro-scene");
    let cams =
        vec![crate::geometry::CameraModel::facing([0.0, 0.0, 1.0], 0.0, 22.9, 22.9, 15.5, 11.5, 32, 24)
            .unwrap()];
    let pyr = FeaturePyramid::new(vec![Tensor::from_fn(&[1, 4, 24, 32], |_| 0.5 * normal(&mut rng))])
        .unwrap();
    let mut bank_anchor = Anchor3D::at(10.0, 0.5, 1.0, 0.1);
    bank_anchor.vx = 0.4;
    let bank = crate::model::InstanceSet {
        anchors: vec![bank_anchor],
        features: Tensor::from_fn(&[1, 8], |_| 0.3 * normal(&mut rng)),
        embeddings: Tensor::zeros(&[1, 8]),
        confidences: vec![0.8],
    };
    let motion = EgoMotion::new(rot_z(0.02), [0.1, 0.0, 0.0], 0.5).unwrap();
    let ledger = TrafficLedger::new();

    let loss_of = |out: &crate::model::FrameOutput| -> f64 {
        let mut acc = 0.0;
        for rec in &out.per_layer {
            for a in &rec.anchors {
                acc += 0.01 * a.to_array().iter().map(|v| v * v).sum::<f64>();
            }
            acc += rec.cls_logits.iter().map(|v| v * v).sum::<f64>();
        }
        acc
    };

    let mut grads = Grads::zeros_like(&model.store);
    let (out, cache) = model.forward_frame(Some(&bank), &pyr, &cams, &motion, &ledger).unwrap();
    let layer_grads: Vec<PerLayerGrads> = out
        .per_layer
        .iter()
        .map(|rec| PerLayerGrads {
            d_anchors: rec
                .anchors
                .iter()
                .flat_map(|a| a.to_array().into_iter().map(|v| 0.02 * v))
                .collect(),
            d_cls_logits: rec.cls_logits.iter().map(|v| 2.0 * v).collect(),
        })
        .collect();
    model
        .backward_frame(&mut grads, &pyr, &cams, &cache, &layer_grads, &ledger)
        .unwrap();

    let base = model.store.clone();
    let f = |flat: &[f64]| -> f64 {
        let mut m2 = Model::new(cfg.clone()).unwrap();
        m2.store.data_mut().copy_from_slice(flat);
        let (o, _) = m2.forward_frame(Some(&bank), &pyr, &cams, &motion, &ledger).unwrap();
        loss_of(&o)
    };
    match finite_diff_check_flat(f, base.data(), grads.data(), 1e-5) {
        Ok(err) if err < 1e-4 => {
            PropertyResult::pass(name, format!("max relative error {err:.3e} over {} parameters", base.total_len()))
        }
        Ok(err) => PropertyResult::fail(name, format!("max relative error {err:.3e} exceeds 1e-4"), None),
        Err(e) => PropertyResult::fail(name, format!("check failed to run: {e}"), None),
    }
}

/// The whole suite, in a fixed order.
pub fn run_property_suite(seed: u64, fault: Option<FaultInjection>) -> Vec<PropertyResult> {
    vec![
        check_aggregation_equivalence(seed, fault),
        check_aggregation_gradients(seed),
        check_geometry_roundtrips(seed),
        check_propagation_fidelity(seed),
        check_micro_decoder_gradients(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_clean_and_catches_the_injected_fault() {
        let results = run_property_suite(0, None);
        for r in &results {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
        let faulted = run_property_suite(0, Some(FaultInjection::PerturbAggregationWeight));
        assert!(
            faulted.iter().any(|r| !r.pass),
            "fault injection must break at least one property"
        );
        assert!(faulted.iter().any(|r| r.failing_case.is_some()));
    }
}
