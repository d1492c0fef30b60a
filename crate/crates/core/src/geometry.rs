//! Anchor state, rigid ego-motion transforms, temporal anchor projection and
//! pinhole projection from anchor (ego) space into image coordinates.
//!
//! All functions are pure; nothing here holds mutable state.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn mat3_mul_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Max deviation of `m^T m` from the identity.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    let mtm = mat3_mul(&mat3_transpose(m), m);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((mtm[i][j] - want).abs());
        }
    }
    worst
}

/// Rotation about the z axis by `angle` radians.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[inline]
fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm3(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

// ---------------------------------------------------------------------------
// Anchor
// ---------------------------------------------------------------------------

/// Structured 11-component instance state: center, extent, yaw as
/// `(sin, cos)`, and velocity. Positions and extents are meters in the ego
/// (anchor) frame; velocities are meters/second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub sin_yaw: f64,
    pub cos_yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl Anchor3D {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x: f64,
        y: f64,
        z: f64,
        w: f64,
        l: f64,
        h: f64,
        sin_yaw: f64,
        cos_yaw: f64,
        vx: f64,
        vy: f64,
        vz: f64,
    ) -> Result<Self> {
        let a = Anchor3D { x, y, z, w, l, h, sin_yaw, cos_yaw, vx, vy, vz };
        a.validate()?;
        Ok(a)
    }

    /// Unit-extent box at a position with a yaw angle, zero velocity.
    pub fn at(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Anchor3D {
            x,
            y,
            z,
            w: 1.0,
            l: 1.0,
            h: 1.0,
            sin_yaw: yaw.sin(),
            cos_yaw: yaw.cos(),
            vx: 0.0,
            vy: 0.0,
            vz: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "anchor extent must be positive, got ({}, {}, {})",
                self.w, self.l, self.h
            )));
        }
        let n = self.sin_yaw * self.sin_yaw + self.cos_yaw * self.cos_yaw;
        if !(0.999999..=1.000001).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "anchor yaw (sin, cos) not unit: sin^2+cos^2 = {n}"
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    pub fn velocity(&self) -> Vec3 {
        [self.vx, self.vy, self.vz]
    }

    pub fn extent(&self) -> Vec3 {
        [self.w, self.l, self.h]
    }

    /// Layout: `[x, y, z, w, l, h, sin_yaw, cos_yaw, vx, vy, vz]`.
    pub fn to_array(&self) -> [f64; 11] {
        [
            self.x, self.y, self.z, self.w, self.l, self.h, self.sin_yaw, self.cos_yaw,
            self.vx, self.vy, self.vz,
        ]
    }

    pub fn from_array(a: &[f64; 11]) -> Self {
        Anchor3D {
            x: a[0],
            y: a[1],
            z: a[2],
            w: a[3],
            l: a[4],
            h: a[5],
            sin_yaw: a[6],
            cos_yaw: a[7],
            vx: a[8],
            vy: a[9],
            vz: a[10],
        }
    }

    /// Divides `(sin, cos)` by their norm so drift cannot accumulate across
    /// repeated projections.
    pub fn renormalize_yaw(&mut self) {
        let n = (self.sin_yaw * self.sin_yaw + self.cos_yaw * self.cos_yaw).sqrt();
        if n > 0.0 {
            self.sin_yaw /= n;
            self.cos_yaw /= n;
        } else {
            self.sin_yaw = 0.0;
            self.cos_yaw = 1.0;
        }
    }

    /// Rotation of anchor-local offsets into the ego frame.
    pub fn yaw_rotation(&self) -> Mat3 {
        let (s, c) = (self.sin_yaw, self.cos_yaw);
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }
}

// ---------------------------------------------------------------------------
// Ego motion
// ---------------------------------------------------------------------------

/// Rigid transform of the ego vehicle between two frames plus the elapsed
/// time: maps coordinates expressed in the previous frame's ego system into
/// the current one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoMotion {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub dt: f64,
}

impl EgoMotion {
    pub fn new(rotation: Mat3, translation: Vec3, dt: f64) -> Result<Self> {
        if orthonormality_error(&rotation) > 1e-9 {
            return Err(Error::InvalidArgument(
                "ego rotation is not orthonormal within 1e-9".to_string(),
            ));
        }
        if (mat3_det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "ego rotation determinant is not +1 within 1e-9".to_string(),
            ));
        }
        if !(dt >= 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be >= 0, got {dt}")));
        }
        Ok(EgoMotion { rotation, translation, dt })
    }

    pub fn identity(dt: f64) -> Self {
        EgoMotion {
            rotation: MAT3_IDENTITY,
            translation: [0.0; 3],
            dt,
        }
    }

    /// Exact inverse rigid motion with `dt = 0`.
    pub fn inverse(&self) -> EgoMotion {
        let rt = mat3_transpose(&self.rotation);
        let t = mat3_mul_vec(&rt, &self.translation);
        EgoMotion {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
            dt: 0.0,
        }
    }

    /// `self` after `other`: applies `other` first, then `self`, `dt = 0`.
    pub fn compose_after(&self, other: &EgoMotion) -> EgoMotion {
        EgoMotion {
            rotation: mat3_mul(&self.rotation, &other.rotation),
            translation: add3(&mat3_mul_vec(&self.rotation, &other.translation), &self.translation),
            dt: 0.0,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        add3(&mat3_mul_vec(&self.rotation, p), &self.translation)
    }
}

/// Projects an anchor from the previous frame's ego system into the current
/// one: dead-reckon the center by `dt * velocity`, apply the rigid motion,
/// rotate the embedded yaw vector and the velocity, keep the extent.
pub fn project_anchor(a: &Anchor3D, m: &EgoMotion) -> Anchor3D {
    project_anchor_signed_dt(a, &m.rotation, &m.translation, m.dt)
}

/// Internal form used by the multi-frame baseline, which walks backwards in
/// time and needs a negative time step.
pub(crate) fn project_anchor_signed_dt(
    a: &Anchor3D,
    rotation: &Mat3,
    translation: &Vec3,
    dt: f64,
) -> Anchor3D {
    let advanced = [
        a.x + dt * a.vx,
        a.y + dt * a.vy,
        a.z + dt * a.vz,
    ];
    let center = add3(&mat3_mul_vec(rotation, &advanced), translation);
    // Eq-style yaw update: rotate [cos, sin, 0], read back (cos, sin)
    let yaw_vec = mat3_mul_vec(rotation, &[a.cos_yaw, a.sin_yaw, 0.0]);
    let vel = mat3_mul_vec(rotation, &[a.vx, a.vy, a.vz]);
    let mut out = Anchor3D {
        x: center[0],
        y: center[1],
        z: center[2],
        w: a.w,
        l: a.l,
        h: a.h,
        sin_yaw: yaw_vec[1],
        cos_yaw: yaw_vec[0],
        vx: vel[0],
        vy: vel[1],
        vz: vel[2],
    };
    out.renormalize_yaw();
    out
}

// ---------------------------------------------------------------------------
// Cameras
// ---------------------------------------------------------------------------

/// Pinhole camera: rigid transform from the ego (anchor) frame into camera
/// coordinates plus intrinsics. Camera convention: `z` forward (depth),
/// `x` right, `y` down.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if orthonormality_error(&rotation) > 1e-9 {
            return Err(Error::InvalidArgument(
                "camera extrinsic rotation not orthonormal within 1e-9".to_string(),
            ));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width < 1 || height < 1 {
            return Err(Error::InvalidArgument(format!(
                "image size must be >= 1, got {width}x{height}"
            )));
        }
        Ok(CameraModel { rotation, translation, fx, fy, cx, cy, width, height })
    }

    /// Camera mounted at `position` (ego frame), optical axis horizontal at
    /// `yaw` radians, `x` right, `y` down.
    #[allow(clippy::too_many_arguments)]
    pub fn facing(
        position: Vec3,
        yaw: f64,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        let forward = [c, s, 0.0];
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        // rows of the ego->camera rotation are the camera axes in ego coords
        let rotation = [right, down, forward];
        let translation = {
            let t = mat3_mul_vec(&rotation, &position);
            [-t[0], -t[1], -t[2]]
        };
        CameraModel::new(rotation, translation, fx, fy, cx, cy, width, height)
    }

    /// The `3x4` ego-to-camera transform (rotation | translation).
    pub fn extrinsic34(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&self.rotation[i]);
            m[i][3] = self.translation[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn intrinsic(&self) -> Mat3 {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    pub fn to_camera(&self, p_ego: &Vec3) -> Vec3 {
        add3(&mat3_mul_vec(&self.rotation, p_ego), &self.translation)
    }

    /// Projects an ego-frame point. Returns `(u, v, depth)`; callers decide
    /// visibility from the depth and image bounds.
    pub fn project(&self, p_ego: &Vec3) -> (f64, f64, f64) {
        let pc = self.to_camera(p_ego);
        let z = pc[2];
        if z.abs() < 1e-12 {
            return (f64::INFINITY, f64::INFINITY, z);
        }
        (
            self.fx * pc[0] / z + self.cx,
            self.fy * pc[1] / z + self.cy,
            z,
        )
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// `d(u, v) / d(p_ego)` at an ego-frame point; `None` behind the camera.
    pub fn projection_jacobian(&self, p_ego: &Vec3) -> Option<[[f64; 3]; 2]> {
        let pc = self.to_camera(p_ego);
        let z = pc[2];
        if z <= 1e-6 {
            return None;
        }
        let jp = [
            [self.fx / z, 0.0, -self.fx * pc[0] / (z * z)],
            [0.0, self.fy / z, -self.fy * pc[1] / (z * z)],
        ];
        let mut j = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                j[r][c] = jp[r][0] * self.rotation[0][c]
                    + jp[r][1] * self.rotation[1][c]
                    + jp[r][2] * self.rotation[2][c];
            }
        }
        Some(j)
    }
}

/// Evenly spaced outward-facing rig of `n` cameras sharing intrinsics.
/// Camera `i` faces yaw `i * 2pi/n`.
pub fn outward_rig(
    n: usize,
    hfov_deg: f64,
    width: usize,
    height: usize,
    mount_height: f64,
) -> Result<Vec<CameraModel>> {
    if n == 0 {
        return Err(Error::InvalidArgument("rig needs >= 1 camera".to_string()));
    }
    let half = (hfov_deg.to_radians() / 2.0).tan();
    let fx = (width as f64) / 2.0 / half;
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let yaw = i as f64 * std::f64::consts::TAU / n as f64;
            CameraModel::facing([0.0, 0.0, mount_height], yaw, fx, fx, cx, cy, width, height)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Keypoints
// ---------------------------------------------------------------------------

/// Ego-frame 3D sampling points attached to one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points3d: Vec<Vec3>,
}

impl KeypointSet {
    pub fn new(points3d: Vec<Vec3>) -> Result<Self> {
        if points3d.is_empty() {
            return Err(Error::InvalidArgument("keypoint set must be non-empty".to_string()));
        }
        Ok(KeypointSet { points3d })
    }

    pub fn len(&self) -> usize {
        self.points3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3d.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points3d
    }
}

/// Normalized box-frame offsets of the 7 fixed keypoints: the center plus
/// the 6 face centers.
pub const FIXED_KEYPOINT_OFFSETS: [[f64; 3]; 7] = [
    [0.0, 0.0, 0.0],
    [0.5, 0.0, 0.0],
    [-0.5, 0.0, 0.0],
    [0.0, 0.5, 0.0],
    [0.0, -0.5, 0.0],
    [0.0, 0.0, 0.5],
    [0.0, 0.0, -0.5],
];

/// Maps a normalized box-frame offset to the ego frame for one anchor.
#[inline]
pub fn offset_to_ego(a: &Anchor3D, offset: &Vec3) -> Vec3 {
    let scaled = [offset[0] * a.w, offset[1] * a.l, offset[2] * a.h];
    let rotated = mat3_mul_vec(&a.yaw_rotation(), &scaled);
    add3(&rotated, &a.center())
}

/// Fixed keypoints (center + 6 face centers) followed by the learnable
/// offsets, all scaled by the box extent and rotated into the ego frame.
/// `learnable_offsets` is `[K_l x 3]` in normalized box coordinates; `None`
/// yields the 7 fixed points only.
pub fn generate_keypoints(a: &Anchor3D, learnable_offsets: Option<&Tensor>) -> Result<KeypointSet> {
    if let Some(off) = learnable_offsets {
        off.require_rank(2, "generate_keypoints offsets")?;
        if off.shape()[1] != 3 {
            return Err(Error::shape(
                "generate_keypoints offsets",
                "K_l x 3".to_string(),
                format!("{:?}", off.shape()),
            ));
        }
    }
    let k_l = learnable_offsets.map_or(0, |t| t.shape()[0]);
    let mut pts = Vec::with_capacity(7 + k_l);
    for off in &FIXED_KEYPOINT_OFFSETS {
        pts.push(offset_to_ego(a, off));
    }
    if let Some(t) = learnable_offsets {
        let od = t.data();
        for i in 0..k_l {
            let off = [od[i * 3], od[i * 3 + 1], od[i * 3 + 2]];
            pts.push(offset_to_ego(a, &off));
        }
    }
    KeypointSet::new(pts)
}

/// Pixel coordinates of every keypoint in every camera plus a visibility
/// mask. Non-visible entries carry the sentinel `(-1, -1)`; visible means
/// positive depth and a pixel inside the image bounds.
pub fn project_keypoints(
    ks: &KeypointSet,
    cams: &[CameraModel],
) -> Result<(Tensor, Vec<bool>)> {
    if cams.is_empty() {
        return Err(Error::InvalidArgument("project_keypoints needs >= 1 camera".to_string()));
    }
    let k = ks.len();
    let n = cams.len();
    let mut coords = vec![-1.0; k * n * 2];
    let mut visible = vec![false; k * n];
    for (ki, p) in ks.points().iter().enumerate() {
        for (ni, cam) in cams.iter().enumerate() {
            let (u, v, depth) = cam.project(p);
            if depth > 1e-6 && cam.contains_pixel(u, v) {
                coords[(ki * n + ni) * 2] = u;
                coords[(ki * n + ni) * 2 + 1] = v;
                visible[ki * n + ni] = true;
            }
        }
    }
    Ok((Tensor::new(vec![k, n, 2], coords)?, visible))
}

// ---------------------------------------------------------------------------
// World poses (harness support)
// ---------------------------------------------------------------------------

/// Ego pose in the world frame (`rotation` maps ego coords to world coords).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl WorldPose {
    pub fn identity() -> Self {
        WorldPose { rotation: MAT3_IDENTITY, translation: [0.0; 3] }
    }

    pub fn to_world(&self, p_ego: &Vec3) -> Vec3 {
        add3(&mat3_mul_vec(&self.rotation, p_ego), &self.translation)
    }

    pub fn to_ego(&self, p_world: &Vec3) -> Vec3 {
        mat3_mul_vec(&mat3_transpose(&self.rotation), &sub3(p_world, &self.translation))
    }

    /// Rotates a world-frame direction (no translation) into the ego frame.
    pub fn dir_to_ego(&self, d_world: &Vec3) -> Vec3 {
        mat3_mul_vec(&mat3_transpose(&self.rotation), d_world)
    }
}

/// Rigid motion mapping the previous pose's ego coordinates into the next
/// pose's: `R = R_next^T R_prev`, `T = R_next^T (t_prev - t_next)`.
pub fn ego_motion_between(prev: &WorldPose, next: &WorldPose, dt: f64) -> Result<EgoMotion> {
    let rn_t = mat3_transpose(&next.rotation);
    let rotation = mat3_mul(&rn_t, &prev.rotation);
    let translation = mat3_mul_vec(&rn_t, &sub3(&prev.translation, &next.translation));
    EgoMotion::new(rotation, translation, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_rotation(rng: &mut crate::rng::ChaCha8Rng) -> Mat3 {
        // compose three axis rotations; orthonormal by construction
        let a = rng.gen_range(-3.0f64..3.0);
        let b = rng.gen_range(-1.5f64..1.5);
        let c = rng.gen_range(-3.0f64..3.0);
        let rx = [
            [1.0, 0.0, 0.0],
            [0.0, b.cos(), -b.sin()],
            [0.0, b.sin(), b.cos()],
        ];
        mat3_mul(&rot_z(a), &mat3_mul(&rx, &rot_z(c)))
    }

    fn random_anchor(rng: &mut crate::rng::ChaCha8Rng) -> Anchor3D {
        let yaw = rng.gen_range(-3.0f64..3.0);
        Anchor3D {
            x: rng.gen_range(-20.0..20.0),
            y: rng.gen_range(-20.0..20.0),
            z: rng.gen_range(-2.0..2.0),
            w: rng.gen_range(0.5..4.0),
            l: rng.gen_range(0.5..6.0),
            h: rng.gen_range(0.5..3.0),
            sin_yaw: yaw.sin(),
            cos_yaw: yaw.cos(),
            vx: rng.gen_range(-5.0..5.0),
            vy: rng.gen_range(-5.0..5.0),
            vz: rng.gen_range(-1.0..1.0),
        }
    }

    /// Independent oracle: 4x4 homogeneous transform of the dead-reckoned
    /// center.
    fn homogeneous_center_oracle(a: &Anchor3D, m: &EgoMotion) -> Vec3 {
        let mut h = [[0.0f64; 4]; 4];
        for i in 0..3 {
            h[i][..3].copy_from_slice(&m.rotation[i]);
            h[i][3] = m.translation[i];
        }
        h[3][3] = 1.0;
        let p = [
            a.x + m.dt * a.vx,
            a.y + m.dt * a.vy,
            a.z + m.dt * a.vz,
            1.0,
        ];
        let mut out = [0.0f64; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i] += h[i][j] * p[j];
            }
        }
        [out[0], out[1], out[2]]
    }

    #[test]
    fn identity_motion_is_a_no_op() {
        let mut a = Anchor3D::at(3.0, -2.0, 0.5, 0.7);
        a.w = 2.0;
        let m = EgoMotion::identity(1.7);
        let b = project_anchor(&a, &m);
        assert_abs_diff_eq!(b.x, a.x, epsilon = 1e-12);
        assert_abs_diff_eq!(b.y, a.y, epsilon = 1e-12);
        assert_abs_diff_eq!(b.sin_yaw, a.sin_yaw, epsilon = 1e-12);
        assert_eq!(b.extent(), a.extent());
    }

    #[test]
    fn pure_dead_reckoning() {
        let mut a = Anchor3D::at(2.0, 0.0, 0.0, 0.0);
        a.vx = 1.0;
        let m = EgoMotion::identity(0.5);
        let b = project_anchor(&a, &m);
        assert_abs_diff_eq!(b.x, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.y, 0.0, epsilon = 1e-12);
        assert_eq!(b.vx, 1.0);
    }

    #[test]
    fn quarter_turn_hand_case() {
        // 90 degrees about z (x -> y), T = (1,0,0), dt = 0.5
        let mut a = Anchor3D::at(2.0, 0.0, 0.0, 0.0);
        a.vx = 1.0;
        let m = EgoMotion::new(rot_z(FRAC_PI_2), [1.0, 0.0, 0.0], 0.5).unwrap();
        let b = project_anchor(&a, &m);
        assert_abs_diff_eq!(b.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.y, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.z, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.vx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.vy, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.sin_yaw, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cos_yaw, 0.0, epsilon = 1e-12);
        // same center through the homogeneous oracle
        let want = homogeneous_center_oracle(&a, &m);
        assert_abs_diff_eq!(b.x, want[0], epsilon = 1e-12);
        assert_abs_diff_eq!(b.y, want[1], epsilon = 1e-12);
    }

    #[test]
    fn random_cases_match_homogeneous_oracle() {
        let mut rng = stream(20, "geom-oracle");
        for _ in 0..200 {
            let a = random_anchor(&mut rng);
            let m = EgoMotion::new(
                random_rotation(&mut rng),
                [normal(&mut rng), normal(&mut rng), normal(&mut rng)],
                rng.gen_range(0.0..2.0),
            )
            .unwrap();
            let b = project_anchor(&a, &m);
            let want = homogeneous_center_oracle(&a, &m);
            for (got, want) in b.center().iter().zip(&want) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-9);
            }
            // extent exact, speed preserved
            assert_eq!(b.extent(), a.extent());
            assert!((norm3(&b.velocity()) - norm3(&a.velocity())).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_through_inverse() {
        // planar (vehicle-like) rotations: the yaw embedding lives in the
        // ground plane, so only in-plane motions round-trip exactly
        let mut rng = stream(21, "geom-round");
        for _ in 0..100 {
            let mut a = random_anchor(&mut rng);
            a.vx = 0.0;
            a.vy = 0.0;
            a.vz = 0.0;
            let m = EgoMotion::new(
                rot_z(rng.gen_range(-3.0f64..3.0)),
                [normal(&mut rng), normal(&mut rng), normal(&mut rng)],
                0.0,
            )
            .unwrap();
            let b = project_anchor(&project_anchor(&a, &m), &m.inverse());
            for (got, want) in b.to_array().iter().zip(a.to_array()) {
                assert!((got - want).abs() < 1e-9, "round trip drift: {got} vs {want}");
            }
        }
    }

    #[test]
    fn composition_matches_two_steps() {
        let mut rng = stream(22, "geom-compose");
        for _ in 0..100 {
            let mut a = random_anchor(&mut rng);
            a.vx = 0.0;
            a.vy = 0.0;
            a.vz = 0.0;
            let m1 = EgoMotion::new(rot_z(rng.gen_range(-3.0f64..3.0)), [1.0, -2.0, 0.3], 0.0).unwrap();
            let m2 = EgoMotion::new(rot_z(rng.gen_range(-3.0f64..3.0)), [0.2, 0.9, -1.0], 0.0).unwrap();
            let two = project_anchor(&project_anchor(&a, &m1), &m2);
            let one = project_anchor(&a, &m2.compose_after(&m1));
            for (got, want) in one.to_array().iter().zip(two.to_array()) {
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stationary_object_consistent_across_ego_frames() {
        let mut rng = stream(23, "geom-stationary");
        for _ in 0..100 {
            let p_world = [normal(&mut rng) * 10.0, normal(&mut rng) * 10.0, normal(&mut rng)];
            let yaw_world = rng.gen_range(-3.0f64..3.0);
            let prev = WorldPose {
                rotation: rot_z(rng.gen_range(-3.0f64..3.0)),
                translation: [normal(&mut rng) * 5.0, normal(&mut rng) * 5.0, 0.0],
            };
            let next = WorldPose {
                rotation: rot_z(rng.gen_range(-3.0f64..3.0)),
                translation: [normal(&mut rng) * 5.0, normal(&mut rng) * 5.0, 0.0],
            };
            // object expressed in the previous ego frame, zero velocity
            let pe = prev.to_ego(&p_world);
            let ye = prev.dir_to_ego(&[yaw_world.cos(), yaw_world.sin(), 0.0]);
            let a = Anchor3D {
                x: pe[0], y: pe[1], z: pe[2],
                w: 1.0, l: 1.0, h: 1.0,
                sin_yaw: ye[1], cos_yaw: ye[0],
                vx: 0.0, vy: 0.0, vz: 0.0,
            };
            let m = ego_motion_between(&prev, &next, 0.5).unwrap();
            let b = project_anchor(&a, &m);
            // the same object expressed directly in the next ego frame
            let pn = next.to_ego(&p_world);
            let yn = next.dir_to_ego(&[yaw_world.cos(), yaw_world.sin(), 0.0]);
            assert!((b.x - pn[0]).abs() < 1e-9);
            assert!((b.y - pn[1]).abs() < 1e-9);
            assert!((b.z - pn[2]).abs() < 1e-9);
            assert!((b.cos_yaw - yn[0]).abs() < 1e-9);
            assert!((b.sin_yaw - yn[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn principal_point_projection() {
        // camera at origin facing +x, object 10 m ahead on the optical axis
        let cam = CameraModel::facing([0.0, 0.0, 0.0], 0.0, 100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
        let ks = KeypointSet::new(vec![[10.0, 0.0, 0.0]]).unwrap();
        let (p, vis) = project_keypoints(&ks, std::slice::from_ref(&cam)).unwrap();
        assert!(vis[0]);
        assert_abs_diff_eq!(p.at(&[0, 0, 0]), 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.at(&[0, 0, 1]), 50.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_not_visible() {
        let cam = CameraModel::facing([0.0, 0.0, 0.0], 0.0, 100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
        let ks = KeypointSet::new(vec![[-5.0, 0.0, 0.0]]).unwrap();
        let (p, vis) = project_keypoints(&ks, std::slice::from_ref(&cam)).unwrap();
        assert!(!vis[0]);
        assert_eq!(p.at(&[0, 0, 0]), -1.0);
        assert_eq!(p.at(&[0, 0, 1]), -1.0);
    }

    #[test]
    fn random_projection_matches_matrix_chain_oracle() {
        let mut rng = stream(24, "proj-oracle");
        for _ in 0..100 {
            let cam = CameraModel::facing(
                [normal(&mut rng), normal(&mut rng), 1.5],
                rng.gen_range(-3.0f64..3.0),
                80.0,
                90.0,
                31.5,
                23.5,
                64,
                48,
            )
            .unwrap();
            let p: Vec3 = [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-2.0..4.0),
            ];
            let (u, v, z) = cam.project(&p);
            // independent chain: K * [R|t] * homogeneous point
            let e = cam.extrinsic34();
            let hp = [p[0], p[1], p[2], 1.0];
            let mut pc = [0.0f64; 3];
            for i in 0..3 {
                for j in 0..4 {
                    pc[i] += e[i][j] * hp[j];
                }
            }
            let k = cam.intrinsic();
            let proj = mat3_mul_vec(&k, &pc);
            if pc[2].abs() > 1e-9 {
                assert_abs_diff_eq!(u, proj[0] / proj[2], epsilon = 1e-9);
                assert_abs_diff_eq!(v, proj[1] / proj[2], epsilon = 1e-9);
                assert_abs_diff_eq!(z, pc[2], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn unit_cube_fixed_keypoints() {
        let a = Anchor3D::at(0.0, 0.0, 0.0, 0.0);
        let ks = generate_keypoints(&a, None).unwrap();
        assert_eq!(ks.len(), 7);
        let want: [[f64; 3]; 7] = [
            [0.0, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            [-0.5, 0.0, 0.0],
            [0.0, 0.5, 0.0],
            [0.0, -0.5, 0.0],
            [0.0, 0.0, 0.5],
            [0.0, 0.0, -0.5],
        ];
        for (got, want) in ks.points().iter().zip(&want) {
            for c in 0..3 {
                assert_abs_diff_eq!(got[c], want[c], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn keypoints_scale_with_extent() {
        let mut a = Anchor3D::at(0.0, 0.0, 0.0, 0.0);
        a.w = 2.0;
        a.l = 4.0;
        a.h = 2.0;
        let ks = generate_keypoints(&a, None).unwrap();
        assert_abs_diff_eq!(ks.points()[1][0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ks.points()[3][1], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ks.points()[5][2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn keypoints_rotate_with_yaw() {
        // 90 degree yaw moves the +x face onto the +y axis
        let a = Anchor3D::at(0.0, 0.0, 0.0, FRAC_PI_2);
        let ks = generate_keypoints(&a, None).unwrap();
        let p = ks.points()[1];
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn outward_rig_sees_points_in_at_most_two_views() {
        // 6 cameras, 60 degree spacing, 70 degree hfov: overlap wedges are
        // shared by exactly two neighbors
        let rig = outward_rig(6, 70.0, 64, 40, 1.6).unwrap();
        let mut rng = stream(25, "rig-vis");
        let mut saw_two = false;
        for _ in 0..2000 {
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(3.0..40.0);
            let p: Vec3 = [r * ang.cos(), r * ang.sin(), rng.gen_range(0.0..3.0)];
            let ks = KeypointSet::new(vec![p]).unwrap();
            let (_, vis) = project_keypoints(&ks, &rig).unwrap();
            let count = vis.iter().filter(|v| **v).count();
            assert!(count <= 2, "point {p:?} visible in {count} views");
            if count == 2 {
                saw_two = true;
            }
        }
        assert!(saw_two, "overlap regions should exist");
    }

    #[test]
    fn projection_jacobian_matches_fd() {
        let cam = CameraModel::facing([0.3, -0.2, 1.5], 0.4, 80.0, 90.0, 31.5, 19.5, 64, 40).unwrap();
        let p: Vec3 = [12.0, 4.0, 0.8];
        let j = cam.projection_jacobian(&p).unwrap();
        let h = 1e-6;
        for c in 0..3 {
            let mut pp = p;
            pp[c] += h;
            let mut pm = p;
            pm[c] -= h;
            let (up, vp, _) = cam.project(&pp);
            let (um, vm, _) = cam.project(&pm);
            assert_abs_diff_eq!((up - um) / (2.0 * h), j[0][c], epsilon = 1e-5);
            assert_abs_diff_eq!((vp - vm) / (2.0 * h), j[1][c], epsilon = 1e-5);
        }
    }
}
