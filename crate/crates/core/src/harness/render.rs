//! Synthetic feature rendering: stands in for an image backbone.
//!
//! Each object splats its seeded channel signature as a Gaussian blob at its
//! projected center in every view that sees it, at every scale, with
//! amplitude falling off with camera distance; Gaussian pixel noise goes on
//! top. The ground-truth point cloud for depth supervision is the object's
//! fixed surface samples expressed in the current ego frame.

use crate::aggregation::FeaturePyramid;
use crate::error::Result;
use crate::geometry::Vec3;
use crate::harness::scene::{surface_point_to_ego, Scene};
use crate::rng::{normal, stream};
use crate::tensor::Tensor;

/// Reference distance at which the splat amplitude equals the configured
/// value.
const AMPLITUDE_REF_DEPTH: f64 = 10.0;

/// Renders the feature pyramid and ground-truth depth points for one frame.
/// Deterministic in `(scene.seed, frame)`.
pub fn render_features(
    scene: &Scene,
    frame: usize,
    channels: usize,
    scales: usize,
    noise_level: f64,
) -> Result<(FeaturePyramid, Vec<Vec3>)> {
    assert!(frame < scene.frames(), "frame {frame} out of range");
    let n = scene.rig.len();
    let (w0, h0) = (scene.cfg.image_width, scene.cfg.image_height);
    let mut maps: Vec<Tensor> = (0..scales)
        .map(|s| Tensor::zeros(&[n, channels, (h0 >> s).max(2), (w0 >> s).max(2)]))
        .collect();

    let gt = scene.gt_anchors(frame);
    for (oi, anchor) in gt.iter().enumerate() {
        let sig = &scene.signatures[oi];
        for (ni, cam) in scene.rig.iter().enumerate() {
            let (u, v, z) = cam.project(&anchor.center());
            if z <= 1e-6 || !cam.contains_pixel(u, v) {
                continue;
            }
            let amp = scene.cfg.splat_amplitude * (AMPLITUDE_REF_DEPTH / z.max(1.0));
            for map in maps.iter_mut() {
                let (hs, ws) = (map.shape()[2], map.shape()[3]);
                let ru = if w0 > 1 { (ws - 1) as f64 / (w0 - 1) as f64 } else { 1.0 };
                let rv = if h0 > 1 { (hs - 1) as f64 / (h0 - 1) as f64 } else { 1.0 };
                let (us, vs) = (u * ru, v * rv);
                let sigma = (scene.cfg.splat_sigma_px * ru).max(0.8);
                let reach = (3.0 * sigma).ceil() as i64;
                let (uc, vc) = (us.round() as i64, vs.round() as i64);
                let plane = hs * ws;
                let data = map.data_mut();
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let (px, py) = (uc + dx, vc + dy);
                        if px < 0 || py < 0 || px >= ws as i64 || py >= hs as i64 {
                            continue;
                        }
                        let du = (px as f64 - us) / sigma;
                        let dv = (py as f64 - vs) / sigma;
                        let g = amp * (-(du * du + dv * dv) / 2.0).exp();
                        let at = py as usize * ws + px as usize;
                        for c in 0..channels {
                            data[(ni * channels + c) * plane + at] +=
                                g * (sig.value[c] + du * sig.du[c] + dv * sig.dv[c]);
                        }
                    }
                }
            }
        }
    }

    if noise_level > 0.0 {
        let mut rng = stream(scene.seed, &format!("render-noise-{frame}"));
        for map in &mut maps {
            for v in map.data_mut() {
                *v += noise_level * normal(&mut rng);
            }
        }
    }

    let mut cloud = Vec::new();
    for (oi, anchor) in gt.iter().enumerate() {
        for local in &scene.surface_points[oi] {
            cloud.push(surface_point_to_ego(anchor, local));
        }
    }

    Ok((FeaturePyramid::new(maps)?, cloud))
}
