//! Synthetic scene generation: world-frame objects with constant planar
//! velocity, a smooth ego trajectory, and an outward-facing camera rig.

use crate::error::Result;
use crate::geometry::{
    ego_motion_between, outward_rig, rot_z, Anchor3D, CameraModel, EgoMotion, Vec3, WorldPose,
};
use crate::rng::{normal, stream, ChaCha8Rng};
use rand::Rng;

/// Scene-shape knobs; all distances meters, angles degrees where noted.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub objects: usize,
    pub frames: usize,
    pub fps: f64,
    pub cameras: usize,
    pub hfov_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub camera_height: f64,
    pub spawn_radius_min: f64,
    pub spawn_radius_max: f64,
    pub object_speed_min: f64,
    pub object_speed_max: f64,
    pub ego_speed_max: f64,
    pub ego_yaw_rate_max: f64,
    pub noise_level: f64,
    pub splat_amplitude: f64,
    pub splat_sigma_px: f64,
    pub depth_points_per_object: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            objects: 8,
            frames: 40,
            fps: 2.0,
            cameras: 6,
            hfov_deg: 70.0,
            image_width: 64,
            image_height: 40,
            camera_height: 1.6,
            spawn_radius_min: 7.0,
            spawn_radius_max: 22.0,
            object_speed_min: 0.5,
            object_speed_max: 2.5,
            ego_speed_max: 1.5,
            ego_yaw_rate_max: 0.04,
            noise_level: 0.03,
            splat_amplitude: 6.0,
            splat_sigma_px: 5.0,
            depth_points_per_object: 4,
        }
    }
}

/// One moving box: world-frame anchor at t = 0 whose velocity components are
/// the constant world-frame planar velocity.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub world_anchor: Anchor3D,
}

/// A generated scene: objects, per-frame ego poses, rig, and the seeded
/// per-object feature signatures used by the renderer.
#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub ego_poses: Vec<WorldPose>,
    pub rig: Vec<CameraModel>,
    pub cfg: SceneConfig,
    pub seed: u64,
    pub signatures: Vec<ObjectSignature>,
    pub surface_points: Vec<Vec<Vec3>>, // objects x P, box-local coords
}

/// Per-object channel signatures: a radial component plus two
/// derivative-of-Gaussian components that make sub-splat offsets linearly
/// decodable from the features.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSignature {
    pub value: Vec<f64>,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

impl Scene {
    /// Deterministic scene from a seed. `channels` fixes the signature width
    /// (must match the feature pyramid the renderer will emit).
    pub fn generate(cfg: &SceneConfig, channels: usize, seed: u64) -> Result<Scene> {
        let mut rng = stream(seed, "scene-objects");
        let objects: Vec<SceneObject> = (0..cfg.objects)
            .map(|_| {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(cfg.spawn_radius_min..cfg.spawn_radius_max);
                let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let speed = rng.gen_range(cfg.object_speed_min..cfg.object_speed_max);
                let heading = rng.gen_range(0.0..std::f64::consts::TAU);
                let h = rng.gen_range(1.2..2.2);
                SceneObject {
                    world_anchor: Anchor3D {
                        x: r * ang.cos(),
                        y: r * ang.sin(),
                        z: h / 2.0,
                        w: rng.gen_range(1.6..3.0),
                        l: rng.gen_range(2.5..5.0),
                        h,
                        sin_yaw: yaw.sin(),
                        cos_yaw: yaw.cos(),
                        vx: speed * heading.cos(),
                        vy: speed * heading.sin(),
                        vz: 0.0,
                    },
                }
            })
            .collect();

        // constant-control ego trajectory: fixed speed and yaw rate
        let mut erng = stream(seed, "scene-ego");
        let speed = erng.gen_range(0.0..cfg.ego_speed_max.max(1e-9));
        let yaw_rate = erng.gen_range(-cfg.ego_yaw_rate_max..=cfg.ego_yaw_rate_max);
        let dt = 1.0 / cfg.fps;
        let mut ego_poses = Vec::with_capacity(cfg.frames);
        let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..cfg.frames {
            ego_poses.push(WorldPose { rotation: rot_z(yaw), translation: [x, y, 0.0] });
            x += speed * yaw.cos() * dt;
            y += speed * yaw.sin() * dt;
            yaw += yaw_rate * dt;
        }

        let rig = outward_rig(
            cfg.cameras,
            cfg.hfov_deg,
            cfg.image_width,
            cfg.image_height,
            cfg.camera_height,
        )?;

        let mut srng = stream(seed, "scene-signatures");
        let signatures = (0..cfg.objects)
            .map(|_| ObjectSignature {
                value: (0..channels).map(|_| normal(&mut srng)).collect(),
                du: (0..channels).map(|_| normal(&mut srng)).collect(),
                dv: (0..channels).map(|_| normal(&mut srng)).collect(),
            })
            .collect();

        let mut prng = stream(seed, "scene-surface-points");
        let surface_points = objects
            .iter()
            .map(|_| sample_box_surface(cfg.depth_points_per_object, &mut prng))
            .collect();

        Ok(Scene {
            objects,
            ego_poses,
            rig,
            cfg: cfg.clone(),
            seed,
            signatures,
            surface_points,
        })
    }

    pub fn frames(&self) -> usize {
        self.cfg.frames
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.cfg.fps
    }

    /// World-frame anchor of object `i` at frame `f` (constant velocity).
    pub fn world_anchor_at(&self, i: usize, frame: usize) -> Anchor3D {
        let mut a = self.objects[i].world_anchor;
        let t = frame as f64 * self.dt();
        a.x += a.vx * t;
        a.y += a.vy * t;
        a.z += a.vz * t;
        a
    }

    /// Ground-truth anchors in the ego frame of `frame`, velocities included.
    pub fn gt_anchors(&self, frame: usize) -> Vec<Anchor3D> {
        let pose = &self.ego_poses[frame];
        (0..self.objects.len())
            .map(|i| {
                let w = self.world_anchor_at(i, frame);
                let p = pose.to_ego(&w.center());
                let yv = pose.dir_to_ego(&[w.cos_yaw, w.sin_yaw, 0.0]);
                let vv = pose.dir_to_ego(&w.velocity());
                let mut a = Anchor3D {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    w: w.w,
                    l: w.l,
                    h: w.h,
                    sin_yaw: yv[1],
                    cos_yaw: yv[0],
                    vx: vv[0],
                    vy: vv[1],
                    vz: vv[2],
                };
                a.renormalize_yaw();
                a
            })
            .collect()
    }

    /// Rigid ego motion from `frame - 1` into `frame`; identity for frame 0.
    pub fn ego_motion(&self, frame: usize) -> Result<EgoMotion> {
        if frame == 0 {
            return Ok(EgoMotion::identity(self.dt()));
        }
        ego_motion_between(&self.ego_poses[frame - 1], &self.ego_poses[frame], self.dt())
    }
}

/// Fixed box-local surface samples (normalized cube faces).
fn sample_box_surface(count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..count)
        .map(|_| {
            let face = rng.gen_range(0..6usize);
            let a = rng.gen_range(-0.5..0.5);
            let b = rng.gen_range(-0.5..0.5);
            match face {
                0 => [0.5, a, b],
                1 => [-0.5, a, b],
                2 => [a, 0.5, b],
                3 => [a, -0.5, b],
                4 => [a, b, 0.5],
                _ => [a, b, -0.5],
            }
        })
        .collect()
}

/// Box-local point to the ego frame through a ground-truth anchor.
pub fn surface_point_to_ego(anchor: &Anchor3D, local: &Vec3) -> Vec3 {
    crate::geometry::offset_to_ego(anchor, local)
}
