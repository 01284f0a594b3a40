//! Geometric value types shared by every other module.
//!
//! Camera frame convention: right-handed, +x right, +y down, +z forward
//! (the viewing axis). Points in front of a camera have positive depth, which
//! is what the key-point projection onto the plane `Z = 1` expects.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Axis-aligned bounding box in scene units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        for k in 0..3 {
            if !(min[k] < max[k]) {
                return Err(Error::Geometry(format!(
                    "aabb axis {k}: min {} must be below max {}",
                    min[k], max[k]
                )));
            }
        }
        Ok(Aabb { min, max })
    }

    /// The `[-1, 1]^3` box used by the synthetic scenes.
    pub fn unit() -> Self {
        Aabb {
            min: Vec3::repeat(-1.0),
            max: Vec3::repeat(1.0),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|k| x[k] >= self.min[k] && x[k] <= self.max[k])
    }

    /// Slab test. Returns the parametric entry/exit distances along the
    /// line `origin + t * dir`, without clipping to `t >= 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let mut a = (self.min[k] - origin[k]) * inv;
            let mut b = (self.max[k] - origin[k]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Result of mapping a point into the unit cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalized {
    pub coords: Vec3,
    /// Set when the input lay outside the box and was clamped.
    pub clamped: bool,
}

pub fn normalize_to_unit_cube(x: &Vec3, aabb: &Aabb) -> Normalized {
    let mut clamped = false;
    let mut u = Vec3::zeros();
    for k in 0..3 {
        let v = (x[k] - aabb.min[k]) / (aabb.max[k] - aabb.min[k]);
        if !(0.0..=1.0).contains(&v) {
            clamped = true;
        }
        u[k] = v.clamp(0.0, 1.0);
    }
    Normalized { coords: u, clamped }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let n = dir.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!("ray direction norm {n} is not 1")));
        }
        if !(t_near >= 0.0 && t_far > t_near) {
            return Err(Error::Geometry(format!(
                "ray bounds [{t_near}, {t_far}] are not ordered"
            )));
        }
        Ok(Ray {
            origin,
            dir,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Geometry(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Square image with the principal point at the center.
    pub fn centered(size: u32, focal: f64) -> Self {
        CameraIntrinsics {
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        }
    }

    /// Continuous image coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center(&self, col: u32, row: u32) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Unit direction in camera coordinates through image point `(u, v)`.
    pub fn camera_dir(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    /// Pinhole projection of a camera-space point. `None` behind the camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        (p_cam.z > 0.0).then(|| {
            (
                self.fx * p_cam.x / p_cam.z + self.cx,
                self.fy * p_cam.y / p_cam.z + self.cy,
            )
        })
    }
}

/// Rigid transform from camera coordinates to canonical (head) coordinates.
///
/// `apply` maps camera-space points to canonical space; `apply_inverse` is
/// the `P^-1` used to bring canonical key points into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl HeadPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-8 || (det - 1.0).abs() > 1e-8 {
            return Err(Error::Geometry(format!(
                "rotation is not proper orthonormal (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry("non-finite translation".into()));
        }
        Ok(HeadPose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        HeadPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with image "down" as close to
    /// `down` as possible.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = down.cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::Geometry("look_at: degenerate down vector".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        HeadPose::new(rotation, eye)
    }

    /// Rotation by Euler angles (radians) about x, then y, then z, applied to
    /// a base pose.
    pub fn perturbed(&self, yaw: f64, pitch: f64, roll: f64, shift: Vec3) -> Result<Self> {
        let r = nalgebra::Rotation3::from_euler_angles(pitch, yaw, roll).into_inner();
        let rotation = r * self.rotation;
        let translation = r * self.translation + shift;
        let rotation = orthonormalize(&rotation);
        HeadPose::new(rotation, translation)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn apply_inverse(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation)
    }

    pub fn inverse(&self) -> HeadPose {
        let rt = self.rotation.transpose();
        HeadPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &HeadPose) -> HeadPose {
        HeadPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_rows(&self) -> PoseRecord {
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.rotation[(r, c)];
            }
        }
        PoseRecord {
            rotation,
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }
}

fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * vt
}

/// Plain-array form of a pose for manifests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<HeadPose> {
        let r = Mat3::from_fn(|i, j| self.rotation[i][j]);
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry("non-finite rotation".into()));
        }
        HeadPose::new(r, Vec3::from(self.translation))
    }
}

/// Backproject image point `px` (continuous coordinates; pixel centers sit
/// at `+0.5`) through `pose` and clip against `aabb`. `None` on a miss.
pub fn ray_for_pixel(
    cam: &CameraIntrinsics,
    pose: &HeadPose,
    px: (f64, f64),
    aabb: &Aabb,
) -> Option<Ray> {
    let dir = (pose.rotation * cam.camera_dir(px.0, px.1)).normalize();
    let origin = pose.translation;
    let (t0, t1) = aabb.intersect(&origin, &dir)?;
    let t_near = t0.max(0.0);
    (t1 > t_near).then_some(Ray {
        origin,
        dir,
        t_near,
        t_far: t1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f64; 3]>,
}

impl FrameBuffer {
    pub fn new(width: u32, height: u32, fill: [f64; 3]) -> Self {
        FrameBuffer {
            width,
            height,
            rgb: vec![fill; width as usize * height as usize],
        }
    }

    pub fn get(&self, col: u32, row: u32) -> [f64; 3] {
        self.rgb[row as usize * self.width as usize + col as usize]
    }

    /// Writes clamp each channel into `[0, 1]`; NaN is stored as 0.
    pub fn set(&mut self, col: u32, row: u32, v: [f64; 3]) {
        let idx = row as usize * self.width as usize + col as usize;
        self.rgb[idx] = v.map(clamp_unit);
    }

    pub fn pixels(&self) -> usize {
        self.rgb.len()
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> HeadPose {
        let axis = Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5);
        let angle = rng.random_range(-3.0..3.0);
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let t = Vec3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        HeadPose::new(r.into_inner(), t).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let aabb = Aabb::unit();
        let n = normalize_to_unit_cube(&aabb.min, &aabb);
        assert_eq!(n.coords, Vec3::zeros());
        assert!(!n.clamped);
        let n = normalize_to_unit_cube(&Vec3::zeros(), &aabb);
        assert_eq!(n.coords, Vec3::repeat(0.5));
        let n = normalize_to_unit_cube(&Vec3::new(0.5, -0.5, 0.0), &aabb);
        assert_eq!(n.coords, Vec3::new(0.75, 0.25, 0.5));
        assert_eq!(normalize_to_unit_cube(&aabb.max, &aabb).coords, Vec3::repeat(1.0));
    }

    #[test]
    fn normalize_clamps_and_flags() {
        let n = normalize_to_unit_cube(&Vec3::new(1.5, 0.0, -3.0), &Aabb::unit());
        assert!(n.clamped);
        assert_eq!(n.coords, Vec3::new(1.0, 0.5, 0.0));
    }

    #[test]
    fn aabb_rejects_inverted_axes() {
        assert!(Aabb::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn principal_ray_points_down_the_view_axis() {
        let cam = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let pose = HeadPose::new(Mat3::identity(), Vec3::new(0.0, 0.0, -3.0)).unwrap();
        let ray = ray_for_pixel(&cam, &pose, (64.0, 64.0), &Aabb::unit()).unwrap();
        assert_eq!(ray.dir, Vec3::new(0.0, 0.0, 1.0));
        assert!((ray.t_near - 2.0).abs() < 1e-12);
        assert!((ray.t_far - 4.0).abs() < 1e-12);
    }

    #[test]
    fn box_behind_camera_misses() {
        let cam = CameraIntrinsics::centered(128, 100.0);
        let pose = HeadPose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 3.0)).unwrap();
        assert!(ray_for_pixel(&cam, &pose, (64.0, 64.0), &Aabb::unit()).is_none());
    }

    #[test]
    fn one_focal_length_off_axis_is_45_degrees() {
        let cam = CameraIntrinsics::new(40.0, 40.0, 64.0, 64.0, 128, 128).unwrap();
        let pose = HeadPose::new(Mat3::identity(), Vec3::new(0.0, 0.0, -1.5)).unwrap();
        let ray = ray_for_pixel(&cam, &pose, (64.0 + 40.0, 64.0), &Aabb::unit()).unwrap();
        let azimuth = ray.dir.x.atan2(ray.dir.z);
        assert!((azimuth - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        // Scalar projector: the point at depth 1 along the ray lands back on px.
        let p = ray.dir / ray.dir.z;
        let u = cam.fx * p.x + cam.cx;
        let v = cam.fy * p.y + cam.cy;
        assert!((u - 104.0).abs() < 1e-12 && (v - 64.0).abs() < 1e-12);
    }

    #[test]
    fn entry_point_lies_on_a_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = CameraIntrinsics::centered(64, 60.0);
        let aabb = Aabb::unit();
        let mut hits = 0;
        for _ in 0..200 {
            let eye = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize()
                * 3.5;
            let pose = HeadPose::look_at(eye, Vec3::zeros(), Vec3::new(0.0, -1.0, 0.3)).unwrap();
            let px = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            if let Some(ray) = ray_for_pixel(&cam, &pose, px, &aabb) {
                hits += 1;
                assert!((ray.dir.norm() - 1.0).abs() < 1e-12);
                let p = ray.at(ray.t_near);
                let on_face = (0..3).any(|k| {
                    (p[k] - aabb.min[k]).abs() < 1e-9 || (p[k] - aabb.max[k]).abs() < 1e-9
                });
                assert!(on_face, "{p:?}");
            }
        }
        assert!(hits > 50);
    }

    #[test]
    fn pose_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let pose = random_pose(&mut rng);
            let x = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            assert!((pose.apply_inverse(&pose.apply(&x)) - x).norm() < 1e-10);
            assert!((pose.inverse().apply(&pose.apply(&x)) - x).norm() < 1e-10);
            let other = random_pose(&mut rng);
            assert!((pose.compose(&other).apply(&x) - pose.apply(&other.apply(&x))).norm() < 1e-10);
        }
    }

    #[test]
    fn pose_validation() {
        let mut r = Mat3::identity();
        r[(0, 0)] = -1.0;
        assert!(HeadPose::new(r, Vec3::zeros()).is_err());
        assert!(HeadPose::new(Mat3::identity() * 1.01, Vec3::zeros()).is_err());
    }

    #[test]
    fn framebuffer_clamps_on_write() {
        let mut fb = FrameBuffer::new(2, 2, [1.0; 3]);
        fb.set(1, 0, [1.5, -0.2, f64::NAN]);
        assert_eq!(fb.get(1, 0), [1.0, 0.0, 0.0]);
    }
}
