//! Adaptive pose encoding: trainable canonical key points brought into the
//! camera frame by the inverse head pose and projected onto the plane z = 1.

use crate::error::{Error, Result};
use crate::geom::{HeadPose, Mat3, Vec3};
use crate::params::{ParamGroup, Parameters};

pub const NUM_KEYS: usize = 3;
/// Minimum camera-frame depth of a key point.
pub const MIN_DEPTH: f64 = 1e-4;

/// Projected key points, one `(x, y)` pair per key point.
pub type PoseCode = [[f64; 2]; NUM_KEYS];

pub const POSE_CODE_DIM: usize = 2 * NUM_KEYS;

#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoints {
    /// Ordinary coordinates of each key point; the homogeneous coordinate is
    /// always 1 and is not stored.
    pub points: [[f64; 3]; NUM_KEYS],
    pub gamma: f64,
}

impl Default for KeyPoints {
    fn default() -> Self {
        KeyPoints {
            points: [[0.0, -0.5, 0.3], [-0.2, -0.6, 0.3], [0.2, -0.6, 0.3]],
            gamma: 1.0,
        }
    }
}

impl KeyPoints {
    /// The 4×3 homogeneous matrix, one column per key point.
    pub fn homogeneous(&self) -> [[f64; NUM_KEYS]; 4] {
        let mut m = [[1.0; NUM_KEYS]; 4];
        for (j, p) in self.points.iter().enumerate() {
            for i in 0..3 {
                m[i][j] = p[i];
            }
        }
        m
    }
}

impl Parameters for KeyPoints {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        f(ParamGroup::Network, self.points.as_flattened());
        f(ParamGroup::Network, std::slice::from_ref(&self.gamma));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        f(ParamGroup::Network, self.points.as_flattened_mut());
        f(ParamGroup::Network, std::slice::from_mut(&mut self.gamma));
    }
}

fn camera_frame(keys: &KeyPoints, pose: &HeadPose) -> [Vec3; NUM_KEYS] {
    keys.points.map(|p| pose.apply_inverse(&Vec3::from(p)))
}

/// `X̄(i, j) = γ X̂(i, j) / ẑ(j)` with `X̂ = P⁻¹ X`.
pub fn adaptive_pose_encoding(keys: &KeyPoints, pose: &HeadPose) -> Result<PoseCode> {
    let cam = camera_frame(keys, pose);
    let mut out = [[0.0; 2]; NUM_KEYS];
    for (j, x) in cam.iter().enumerate() {
        if !(x.z.abs() > MIN_DEPTH) {
            return Err(Error::DegeneratePose { index: j, depth: x.z });
        }
        out[j] = [keys.gamma * x.x / x.z, keys.gamma * x.y / x.z];
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGrads {
    pub keys: KeyPoints,
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Adjoint of [`adaptive_pose_encoding`]. The returned `keys` holds the key
/// point and γ gradients.
pub fn adaptive_pose_encoding_backward(keys: &KeyPoints, pose: &HeadPose, upstream: &PoseCode) -> PoseGrads {
    let cam = camera_frame(keys, pose);
    let mut g = PoseGrads {
        keys: KeyPoints {
            points: [[0.0; 3]; NUM_KEYS],
            gamma: 0.0,
        },
        rotation: Mat3::zeros(),
        translation: Vec3::zeros(),
    };
    for (j, x) in cam.iter().enumerate() {
        let [dx, dy] = upstream[j];
        let inv_z = 1.0 / x.z;
        let gz = keys.gamma * inv_z;
        g.keys.gamma += (x.x * dx + x.y * dy) * inv_z;
        let d_hat = Vec3::new(gz * dx, gz * dy, -gz * inv_z * (x.x * dx + x.y * dy));
        let d_world = pose.rotation * d_hat;
        g.keys.points[j] = [d_world.x, d_world.y, d_world.z];
        g.translation -= d_world;
        let v = Vec3::from(keys.points[j]) - pose.translation;
        g.rotation += v * d_hat.transpose();
    }
    g
}
