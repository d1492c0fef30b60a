//! Acceptance suite: every shipped claim, one pass/fail line per criterion.
//!
//! Criteria run serially inside a single test so wall-time measurements are
//! not distorted by sibling tests on small machines.

use std::time::Instant;

use sparse_fuse::aggregation::{
    basic_aggregate, efficient_aggregate, normalize_weights, AggregationRequest, FeaturePyramid,
    TrafficLedger,
};
use sparse_fuse::config::RunConfig;
use sparse_fuse::geometry::{outward_rig, project_anchor, rot_z, Anchor3D, EgoMotion};
use sparse_fuse::harness::{
    bench_recurrent, evaluate_scene, run_multiframe_baseline, train_toy, verify, Scene,
    TrainConfig,
};
use sparse_fuse::model::{Model, ModelConfig};
use sparse_fuse::rng::{derive_seed, normal, stream};
use sparse_fuse::tensor::Tensor;

struct Criterion {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed_s: f64,
    budget_s: f64,
}

fn run_criterion(
    id: usize,
    name: &'static str,
    budget_s: f64,
    f: impl FnOnce() -> (bool, String),
) -> Criterion {
    let start = Instant::now();
    let (pass, detail) = f();
    let elapsed_s = start.elapsed().as_secs_f64();
    Criterion { id, name, pass, detail, elapsed_s, budget_s }
}

// -- criterion 1: fused kernel equivalence ---------------------------------

fn kernel_equivalence() -> (bool, String) {
    let r = verify::check_aggregation_equivalence(0, None);
    (r.pass, r.detail)
}

// -- criterion 2: gradient correctness --------------------------------------

fn gradient_correctness() -> (bool, String) {
    let a = verify::check_aggregation_gradients(0);
    let b = verify::check_micro_decoder_gradients(0);
    (
        a.pass && b.pass,
        format!("aggregation backward: {}; micro decoder: {}", a.detail, b.detail),
    )
}

// -- criterion 3: memory-traffic property -----------------------------------

fn memory_traffic() -> (bool, String) {
    let mut rng = stream(0, "acceptance-ledger");
    // default-shape instance: N=6 views, S=2 scales, all points visible
    let (k, n, s_count, g_count, c) = (13, 6, 2, 4, 32);
    let maps = vec![
        Tensor::from_fn(&[n, c, 40, 64], |_| normal(&mut rng)),
        Tensor::from_fn(&[n, c, 20, 32], |_| normal(&mut rng)),
    ];
    let pyr = FeaturePyramid::new(maps).unwrap();
    let visible = vec![true; k * n];
    let mut pts = vec![0.0; k * n * 2];
    for i in 0..k * n {
        pts[i * 2] = rng.gen_range(0.0..63.0);
        pts[i * 2 + 1] = rng.gen_range(0.0..39.0);
    }
    let logits = Tensor::from_fn(&[k, n, s_count, g_count], |_| normal(&mut rng));
    let weights = normalize_weights(&logits, &visible).unwrap();
    let req = AggregationRequest::new(Tensor::new(vec![k, n, 2], pts).unwrap(), visible, weights)
        .unwrap();

    let basic_ledger = TrafficLedger::new();
    basic_aggregate(&pyr, &req, &basic_ledger).unwrap();
    let eff_ledger = TrafficLedger::new();
    efficient_aggregate(&pyr, &req, &eff_ledger).unwrap();
    let bp = basic_ledger.snapshot().peak_intermediate_bytes as f64;
    let ep = eff_ledger.snapshot().peak_intermediate_bytes as f64;
    let ratio = bp / ep;
    let floor = (n * s_count) as f64 / 2.0;
    let pass = ratio >= floor && ratio >= 6.0;
    (
        pass,
        format!("peak ratio basic/efficient = {ratio:.1} (floor N*S/2 = {floor:.1}, default-config floor 6)"),
    )
}

use rand::Rng;

// -- criterion 4: O(T) -> O(1) -----------------------------------------------

fn complexity_scaling() -> (bool, String) {
    let cfg = RunConfig::load(None, Some(0), &[]).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let scene = Scene::generate(&cfg.scene, cfg.model.channels, derive_seed(0, "bench-scene"))
        .unwrap();
    let layers = model.layers.len() as u64;
    let instances = cfg.model.decoder.total_instances as u64;

    // exact linearity of steady-state call counts in T
    let t_list = [1usize, 2, 4, 8];
    let frames = 12;
    let mut steady_calls = Vec::new();
    let mut steady_walls = Vec::new();
    for &t in &t_list {
        let rep = run_multiframe_baseline(&model, &scene, t, frames, 1).unwrap();
        let last = rep.records.last().unwrap();
        steady_calls.push(last.agg_calls);
        let walls: Vec<u64> = rep
            .records
            .iter()
            .filter(|r| r.frame + 1 >= 8)
            .map(|r| r.wall_ns)
            .collect();
        steady_walls.push(walls.iter().sum::<u64>() as f64 / walls.len() as f64);
    }
    let linear_exact = t_list
        .iter()
        .zip(&steady_calls)
        .all(|(&t, &c)| c == layers * instances * t as u64);
    let wall_ratio = steady_walls[3] / steady_walls[0];

    // recurrent mode: constant calls, flat per-frame wall time over 40 frames
    let rec = bench_recurrent(&model, &scene, 40, 5).unwrap();
    let calls_constant = rec.records[1..].windows(2).all(|w| w[0].agg_calls == w[1].agg_calls);
    let wall_f2 = rec.records[1].wall_ns as f64;
    let wall_f40 = rec.records[39].wall_ns as f64;
    let rec_ratio = wall_f40 / wall_f2;

    let pass = linear_exact && wall_ratio >= 4.0 && rec_ratio <= 1.2 && calls_constant;
    (
        pass,
        format!(
            "calls exactly linear in T: {linear_exact}; wall(T=8)/wall(T=1) = {wall_ratio:.2} (>= 4); \
             recurrent wall(frame 40)/wall(frame 2) = {rec_ratio:.3} (<= 1.2); calls constant: {calls_constant}"
        ),
    )
}

// -- criterion 5: instance propagation fidelity ------------------------------

fn propagation_fidelity() -> (bool, String) {
    use sparse_fuse::geometry::{ego_motion_between, norm3, WorldPose};
    let geom = verify::check_geometry_roundtrips(0);
    let prop = verify::check_propagation_fidelity(0);

    // stationary-object ego-frame consistency over random planar poses
    let mut rng = stream(0, "acceptance-stationary");
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p_world = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-1.0..3.0)];
        let prev = WorldPose {
            rotation: rot_z(rng.gen_range(-3.0f64..3.0)),
            translation: [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0],
        };
        let next = WorldPose {
            rotation: rot_z(rng.gen_range(-3.0f64..3.0)),
            translation: [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0],
        };
        let pe = prev.to_ego(&p_world);
        let a = Anchor3D::at(pe[0], pe[1], pe[2], 0.0);
        let m = ego_motion_between(&prev, &next, 0.5).unwrap();
        let b = project_anchor(&a, &m);
        let want = next.to_ego(&p_world);
        worst = worst.max(norm3(&[b.x - want[0], b.y - want[1], b.z - want[2]]));
    }
    let pass = geom.pass && prop.pass && worst < 1e-9;
    (
        pass,
        format!(
            "{}; {}; stationary-object drift {worst:.3e} (< 1e-9)",
            geom.detail, prop.detail
        ),
    )
}

// -- criterion 6: camera-order permutation invariance ------------------------

fn camera_permutation() -> (bool, String) {
    let cfg = RunConfig::load(None, Some(0), &[]).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let rig = outward_rig(
        cfg.scene.cameras,
        cfg.scene.hfov_deg,
        cfg.scene.image_width,
        cfg.scene.image_height,
        cfg.scene.camera_height,
    )
    .unwrap();
    let mut rng = stream(0, "acceptance-perm");
    let maps: Vec<Tensor> = (0..cfg.model.scales)
        .map(|s| {
            Tensor::from_fn(
                &[
                    cfg.scene.cameras,
                    cfg.model.channels,
                    cfg.scene.image_height >> s,
                    cfg.scene.image_width >> s,
                ],
                |_| normal(&mut rng),
            )
        })
        .collect();
    let pyr = FeaturePyramid::new(maps.clone()).unwrap();
    let ledger = TrafficLedger::new();
    let motion = EgoMotion::new(rot_z(0.02), [0.4, 0.1, 0.0], 0.5).unwrap();

    let run = |rig: &[sparse_fuse::geometry::CameraModel], pyr: &FeaturePyramid| {
        let o0 = model.run_frame(None, pyr, rig, &motion, &ledger).unwrap();
        model.run_frame(Some(&o0.bank), pyr, rig, &motion, &ledger).unwrap()
    };
    let base = run(&rig, &pyr);

    let perm = [3usize, 5, 0, 2, 4, 1];
    let rig_p: Vec<_> = perm.iter().map(|&i| rig[i].clone()).collect();
    let maps_p: Vec<Tensor> = maps
        .iter()
        .map(|m| {
            let sh = m.shape().to_vec();
            let mut t = Tensor::zeros(&sh);
            let plane = sh[1] * sh[2] * sh[3];
            for (new_n, &old_n) in perm.iter().enumerate() {
                t.data_mut()[new_n * plane..(new_n + 1) * plane]
                    .copy_from_slice(&m.data()[old_n * plane..(old_n + 1) * plane]);
            }
            t
        })
        .collect();
    let permuted = run(&rig_p, &FeaturePyramid::new(maps_p).unwrap());

    let mut worst: f64 = 0.0;
    for (a, b) in base.detections.anchors.iter().zip(&permuted.detections.anchors) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    for (a, b) in base.detections.confidences.iter().zip(&permuted.detections.confidences) {
        worst = worst.max((a - b).abs());
    }
    (worst < 1e-9, format!("max output change under camera permutation {worst:.3e} (< 1e-9)"))
}

// -- criterion 7: temporal fusion helps velocity -----------------------------

fn velocity_mae_for(seed: u64, ablate: bool) -> f64 {
    let mut cfg = RunConfig::load(None, Some(seed), &[]).unwrap();
    cfg.train.steps = Some(200);
    cfg.train.ablate_temporal = ablate;
    let mut model = Model::new(cfg.model.clone()).unwrap();
    let scenes: Vec<Scene> = (0..cfg.scenes)
        .map(|i| {
            Scene::generate(&cfg.scene, cfg.model.channels, derive_seed(seed, &format!("scene-{i}")))
                .unwrap()
        })
        .collect();
    train_toy(&mut model, &scenes, &cfg.train).unwrap();
    let (mut vel_sum, mut matched) = (0.0, 0usize);
    for scene in &scenes {
        let m = evaluate_scene(&model, scene, ablate).unwrap();
        if let Some(v) = m.velocity_mae {
            vel_sum += v * m.matched as f64;
            matched += m.matched;
        }
    }
    if matched == 0 {
        f64::INFINITY
    } else {
        vel_sum / matched as f64
    }
}

fn temporal_fusion_helps() -> (bool, String) {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let rec = velocity_mae_for(seed, false);
        let abl = velocity_mae_for(seed, true);
        if rec < abl {
            wins += 1;
        }
        rows.push(format!("seed {seed}: recurrent {rec:.3} vs ablated {abl:.3}"));
    }
    (wins >= 4, format!("{} wins in 5 paired runs ({})", wins, rows.join("; ")))
}

// -- criterion 8: depth supervision trains ------------------------------------

fn depth_supervision_trains() -> (bool, String) {
    let mut cfg = RunConfig::load(None, Some(0), &[]).unwrap();
    cfg.train.steps = Some(200);
    let mut model = Model::new(cfg.model.clone()).unwrap();
    let scenes: Vec<Scene> = (0..cfg.scenes)
        .map(|i| {
            Scene::generate(&cfg.scene, cfg.model.channels, derive_seed(0, &format!("scene-{i}")))
                .unwrap()
        })
        .collect();
    let log = match train_toy(&mut model, &scenes, &cfg.train) {
        Ok(log) => log,
        Err(e) => return (false, format!("training aborted: {e}")),
    };
    let finite = log.entries.iter().all(|e| e.total.is_finite());
    let ma20 = log.depth_moving_average(20, 20).unwrap();
    let ma100 = log.depth_moving_average(100, 20).unwrap();
    (
        finite && ma100 < ma20,
        format!(
            "depth-loss 20-step MA at step 100 = {ma100:.3} vs step 20 = {ma20:.3}; all 200 losses finite: {finite}"
        ),
    )
}

// -- criterion 9: selection arithmetic ----------------------------------------

fn selection_arithmetic() -> (bool, String) {
    // paper-scale arithmetic on the selection operator itself
    use sparse_fuse::model::{select_and_merge, InstanceSet};
    let d = 4;
    let mk = |m: usize| InstanceSet {
        anchors: (0..m).map(|i| Anchor3D::at(i as f64, 0.0, 0.0, 0.0)).collect(),
        features: Tensor::zeros(&[m, d]),
        embeddings: Tensor::zeros(&[m, d]),
        confidences: (0..m).map(|i| i as f64 / m as f64).collect(),
    };
    let fresh = mk(900);
    let temporal = mk(600);
    let (merged, sel) = select_and_merge(&fresh, Some(&temporal), 900, 600).unwrap();
    let paper_ok =
        merged.len() == 900 && sel.temporal_indices.len() == 600 && sel.fresh_indices.len() == 300;

    // desk scale, asserted on every frame of a short run
    let cfg = RunConfig::load(None, Some(0), &[]).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let scene = Scene::generate(&cfg.scene, cfg.model.channels, derive_seed(0, "scene-0")).unwrap();
    let ledger = TrafficLedger::new();
    let mut bank = None;
    let mut desk_ok = true;
    let mut counts = Vec::new();
    for frame in 0..6.min(scene.frames()) {
        let (pyr, _) = sparse_fuse::harness::render_features(
            &scene,
            frame,
            cfg.model.channels,
            cfg.model.scales,
            scene.cfg.noise_level,
        )
        .unwrap();
        let ego = scene.ego_motion(frame).unwrap();
        let out = model.run_frame(bank.as_ref(), &pyr, &scene.rig, &ego, &ledger).unwrap();
        for &m in &out.stats.multi_layer_instances {
            desk_ok &= m == cfg.model.decoder.total_instances;
        }
        if frame > 0 {
            desk_ok &= out.stats.temporal_used == cfg.model.decoder.temporal_instances;
            desk_ok &= out.stats.fresh_used
                == cfg.model.decoder.total_instances - cfg.model.decoder.temporal_instances;
            counts.push((out.stats.temporal_used, out.stats.fresh_used));
        }
        bank = Some(out.bank);
    }
    (
        paper_ok && desk_ok,
        format!(
            "paper scale 600+300=900: {paper_ok}; desk scale 60+30=90 every frame: {desk_ok} {counts:?}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria = vec![
        run_criterion(1, "kernel equivalence (reference vs fused)", 10.0, kernel_equivalence),
        run_criterion(2, "gradient correctness", 60.0, gradient_correctness),
        run_criterion(3, "memory-traffic ledger ratio", 10.0, memory_traffic),
        run_criterion(4, "O(T) baseline vs O(1) recurrent", 300.0, complexity_scaling),
        run_criterion(5, "propagation fidelity", 10.0, propagation_fidelity),
        run_criterion(6, "camera-order permutation invariance", 60.0, camera_permutation),
        run_criterion(7, "temporal fusion helps velocity", 900.0, temporal_fusion_helps),
        run_criterion(8, "depth supervision trains", 300.0, depth_supervision_trains),
        run_criterion(9, "selection arithmetic", 60.0, selection_arithmetic),
    ];
    let mut all_pass = true;
    for c in &criteria {
        let state = if c.pass { "PASS" } else { "FAIL" };
        let budget = if c.elapsed_s <= c.budget_s { "" } else { " [OVER BUDGET]" };
        println!(
            "criterion {}: {state} — {} ({:.1}s / {:.0}s budget){budget} — {}",
            c.id, c.name, c.elapsed_s, c.budget_s, c.detail
        );
        all_pass &= c.pass && c.elapsed_s <= c.budget_s;
    }
    assert!(all_pass, "one or more acceptance criteria failed");
}
