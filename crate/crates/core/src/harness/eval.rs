//! Detection metrics at desk scale: greedy center matching within a radius,
//! center and velocity mean errors over matched pairs, and recall.

use crate::aggregation::TrafficLedger;
use crate::error::Result;
use crate::geometry::{Anchor3D, Vec3};
use crate::harness::render::render_features;
use crate::harness::scene::Scene;
use crate::harness::train::greedy_match;
use crate::model::Model;

pub const MATCH_RADIUS_M: f64 = 2.0;

/// Instances below this confidence do not count as detections.
pub const MIN_DETECTION_CONFIDENCE: f64 = 0.3;

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct EvalMetrics {
    /// Mean center distance over matched pairs; absent when nothing matched.
    pub center_mae: Option<f64>,
    /// Mean velocity-vector distance over matched pairs; absent when nothing
    /// matched.
    pub velocity_mae: Option<f64>,
    pub recall: f64,
    pub matched: usize,
    pub gt_total: usize,
    pub frames: usize,
}

/// Matches one frame's detections against ground truth within
/// [`MATCH_RADIUS_M`] and returns `(pairs, center_error_sum, velocity_error_sum)`.
pub fn score_frame(dets: &[Anchor3D], gts: &[Anchor3D]) -> (usize, f64, f64) {
    let det_centers: Vec<Vec3> = dets.iter().map(|a| a.center()).collect();
    let gt_centers: Vec<Vec3> = gts.iter().map(|a| a.center()).collect();
    let pairs = greedy_match(&det_centers, &gt_centers, Some(MATCH_RADIUS_M));
    let mut center_sum = 0.0;
    let mut vel_sum = 0.0;
    for &(di, gi) in &pairs {
        let d = &dets[di];
        let g = &gts[gi];
        center_sum += ((d.x - g.x).powi(2) + (d.y - g.y).powi(2) + (d.z - g.z).powi(2)).sqrt();
        vel_sum +=
            ((d.vx - g.vx).powi(2) + (d.vy - g.vy).powi(2) + (d.vz - g.vz).powi(2)).sqrt();
    }
    (pairs.len(), center_sum, vel_sum)
}

/// Runs the model over a scene (recurrently unless `ablate_temporal`) and
/// accumulates metrics across frames.
pub fn evaluate_scene(
    model: &Model,
    scene: &Scene,
    ablate_temporal: bool,
) -> Result<EvalMetrics> {
    let ledger = TrafficLedger::new();
    let mut bank = None;
    let mut matched = 0usize;
    let mut gt_total = 0usize;
    let mut center_sum = 0.0;
    let mut vel_sum = 0.0;
    for frame in 0..scene.frames() {
        let (pyr, _) = render_features(
            scene,
            frame,
            model.cfg.channels,
            model.cfg.scales,
            scene.cfg.noise_level,
        )?;
        let ego = scene.ego_motion(frame)?;
        let out = model.run_frame(bank.as_ref(), &pyr, &scene.rig, &ego, &ledger)?;
        let gts = scene.gt_anchors(frame);
        let dets: Vec<Anchor3D> = out
            .detections
            .anchors
            .iter()
            .zip(&out.detections.confidences)
            .filter(|(_, c)| **c >= MIN_DETECTION_CONFIDENCE)
            .map(|(a, _)| *a)
            .collect();
        let (m, cs, vs) = score_frame(&dets, &gts);
        matched += m;
        gt_total += gts.len();
        center_sum += cs;
        vel_sum += vs;
        bank = if ablate_temporal { None } else { Some(out.bank) };
    }
    Ok(EvalMetrics {
        center_mae: (matched > 0).then(|| center_sum / matched as f64),
        velocity_mae: (matched > 0).then(|| vel_sum / matched as f64),
        recall: if gt_total > 0 { matched as f64 / gt_total as f64 } else { 0.0 },
        matched,
        gt_total,
        frames: scene.frames(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxes(centers: &[[f64; 3]]) -> Vec<Anchor3D> {
        centers
            .iter()
            .map(|c| Anchor3D::at(c[0], c[1], c[2], 0.0))
            .collect()
    }

    #[test]
    fn perfect_detections_score_zero_error_full_recall() {
        let gt = boxes(&[[1.0, 2.0, 0.0], [5.0, -3.0, 0.5]]);
        let (m, cs, vs) = score_frame(&gt, &gt);
        assert_eq!(m, 2);
        assert_eq!(cs, 0.0);
        assert_eq!(vs, 0.0);
    }

    #[test]
    fn no_detections_within_radius_means_no_matches() {
        let gt = boxes(&[[0.0, 0.0, 0.0]]);
        let dets = boxes(&[[10.0, 10.0, 0.0]]);
        let (m, _, _) = score_frame(&dets, &gt);
        assert_eq!(m, 0);
    }

    #[test]
    fn unit_shift_gives_unit_center_error() {
        let gt = boxes(&[[2.0, 1.0, 0.0], [-4.0, 3.0, 0.0], [7.0, 7.0, 0.0]]);
        let dets: Vec<Anchor3D> = gt
            .iter()
            .map(|a| {
                let mut b = *a;
                b.x += 1.0;
                b
            })
            .collect();
        let (m, cs, _) = score_frame(&dets, &gt);
        assert_eq!(m, 3);
        assert!((cs / m as f64 - 1.0).abs() < 1e-12);
    }
}
