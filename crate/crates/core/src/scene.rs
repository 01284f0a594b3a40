//! Synthetic condition-driven portrait scene, its analytic renderer and the
//! on-disk dataset format.
//!
//! The "head" is a sphere whose mouth region dents and darkens with the
//! audio openness `o = clamp(w · a, 0, 1)` and whose eye regions close with
//! the blink value `e`. A striped quad below the head, rigid in canonical
//! space, stands in for the torso.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, CameraIntrinsics, FrameBuffer, HeadPose, PoseRecord, Vec3};
use crate::nets::FrameCondition;
use crate::ppm;
use crate::regionattn::{AudioCondition, EyeCondition, AUDIO_DIM};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Bound on the SDF gradient norm; the tracer divides steps by it.
pub const LIPSCHITZ: f64 = 1.1;
/// `max |∇ (1 - s²)²|` over `s = |x - m| / ρ`, times `ρ`.
const BUMP_SLOPE: f64 = 1.539_600_717_839_002; // 8 / (3 sqrt 3)
const HIT_EPS: f64 = 1e-7;
const MAX_STEPS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Ball {
    pub fn contains(&self, x: &Vec3) -> bool {
        (x - Vec3::from(self.center)).norm() < self.radius
    }

    /// `(1 - s²)²` for `s = |x - c| / r < 1`, else 0.
    fn bump(&self, x: &Vec3) -> f64 {
        let s2 = (x - Vec3::from(self.center)).norm_squared() / (self.radius * self.radius);
        if s2 >= 1.0 {
            0.0
        } else {
            (1.0 - s2) * (1.0 - s2)
        }
    }

    fn bump_grad(&self, x: &Vec3) -> Vec3 {
        let r2 = self.radius * self.radius;
        let d = x - Vec3::from(self.center);
        let s2 = d.norm_squared() / r2;
        if s2 >= 1.0 {
            Vec3::zeros()
        } else {
            d * (-4.0 * (1.0 - s2) / r2)
        }
    }

    /// Whether the line `o + t d`, `t > 0`, passes through the ball.
    fn hit_by(&self, o: &Vec3, d: &Vec3) -> bool {
        let c = Vec3::from(self.center) - o;
        let t = c.dot(d);
        t > 0.0 && (c - d * t).norm() < self.radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorsoQuad {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z: f64,
}

impl TorsoQuad {
    pub fn corners(&self) -> [Vec3; 4] {
        let [x0, x1] = self.x_range;
        let [y0, y1] = self.y_range;
        [
            Vec3::new(x0, y0, self.z),
            Vec3::new(x1, y0, self.z),
            Vec3::new(x1, y1, self.z),
            Vec3::new(x0, y1, self.z),
        ]
    }

    fn color(&self, p: &Vec3) -> [f64; 3] {
        let u = (p.x - self.x_range[0]) / (self.x_range[1] - self.x_range[0]);
        let v = (p.y - self.y_range[0]) / (self.y_range[1] - self.y_range[0]);
        let s = (std::f64::consts::TAU * 3.0 * u).sin();
        [0.22 + 0.1 * s, 0.32 + 0.1 * s + 0.08 * v, 0.72 + 0.05 * s]
    }
}

/// Which conditioned region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Mouth,
    Eyes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub center: [f64; 3],
    pub radius: f64,
    pub mouth: Ball,
    /// Dent depth at full openness.
    pub mouth_amplitude: f64,
    /// Audio direction `w`; openness is `clamp(w · a, 0, 1)`.
    pub mouth_direction: Vec<f64>,
    pub eyes: [Ball; 2],
    /// Outward lid bulge at a full blink.
    pub eye_amplitude: f64,
    /// Unit vector toward the light, canonical frame.
    pub light: [f64; 3],
    pub torso: TorsoQuad,
}

fn surface_point(center: Vec3, radius: f64, dir: Vec3) -> [f64; 3] {
    let p = center + dir.normalize() * radius;
    [p.x, p.y, p.z]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| a[k] + (b[k] - a[k]) * t)
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl SyntheticScene {
    /// The standard scene; `seed` only picks the audio direction `w`.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: Vec<f64> = (0..AUDIO_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().for_each(|v| *v /= n);
        let center = Vec3::zeros();
        let radius = 0.55;
        // The face looks toward -z; +y is up.
        let light = Vec3::new(-0.4, 0.5, -1.0).normalize();
        SyntheticScene {
            center: [0.0; 3],
            radius,
            mouth: Ball {
                center: surface_point(center, radius, Vec3::new(0.0, -0.45, -0.9)),
                radius: 0.2,
            },
            mouth_amplitude: 0.012,
            mouth_direction: w,
            eyes: [
                Ball {
                    center: surface_point(center, radius, Vec3::new(-0.35, 0.3, -0.9)),
                    radius: 0.12,
                },
                Ball {
                    center: surface_point(center, radius, Vec3::new(0.35, 0.3, -0.9)),
                    radius: 0.12,
                },
            ],
            eye_amplitude: 0.0075,
            light: [light.x, light.y, light.z],
            torso: TorsoQuad {
                x_range: [-0.6, 0.6],
                y_range: [-1.0, -0.62],
                z: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("scene: {m}")));
        if self.mouth_direction.len() != AUDIO_DIM {
            return Err(Error::Dimension {
                context: "scene audio direction".into(),
                expected: AUDIO_DIM,
                actual: self.mouth_direction.len(),
            });
        }
        let finite = self.mouth_direction.iter().chain(&self.center).chain(&self.light).all(|v| v.is_finite());
        if !finite || !(self.radius > 0.0) {
            return bad("non-finite or non-positive shape parameters".into());
        }
        let balls = [self.mouth, self.eyes[0], self.eyes[1]];
        if balls.iter().any(|b| !(b.radius > 0.0) || !b.center.iter().all(|v| v.is_finite())) {
            return bad("region balls need finite centers and positive radii".into());
        }
        let slope = (self.mouth_amplitude.abs() / self.mouth.radius)
            .max(self.eye_amplitude.abs() / self.eyes[0].radius)
            .max(self.eye_amplitude.abs() / self.eyes[1].radius)
            * BUMP_SLOPE;
        if 1.0 + slope > LIPSCHITZ {
            return bad(format!("deformations too steep (Lipschitz {:.3})", 1.0 + slope));
        }
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let d = (Vec3::from(balls[i].center) - Vec3::from(balls[j].center)).norm();
            if d < balls[i].radius + balls[j].radius {
                return bad("conditioned regions overlap".into());
            }
        }
        let t = &self.torso;
        if !(t.x_range[0] < t.x_range[1] && t.y_range[0] < t.y_range[1] && t.z.is_finite()) {
            return bad("empty torso quad".into());
        }
        Ok(())
    }

    pub fn openness(&self, a: &AudioCondition) -> f64 {
        let o: f64 = self.mouth_direction.iter().zip(&a.0).map(|(w, a)| w * a).sum();
        o.clamp(0.0, 1.0)
    }

    /// Audio vector with openness `o` plus `noise` with its `w` component
    /// removed.
    pub fn audio_for(&self, o: f64, noise: &[f64; AUDIO_DIM]) -> AudioCondition {
        let w = &self.mouth_direction;
        let along: f64 = w.iter().zip(noise).map(|(w, n)| w * n).sum();
        AudioCondition(std::array::from_fn(|k| o * w[k] + noise[k] - along * w[k]))
    }

    pub fn ball(&self, region: Region) -> Vec<Ball> {
        match region {
            Region::Mouth => vec![self.mouth],
            Region::Eyes => self.eyes.to_vec(),
        }
    }

    pub fn sdf(&self, x: &Vec3, o: f64, e: f64) -> f64 {
        (x - Vec3::from(self.center)).norm() - self.radius + self.mouth_amplitude * o * self.mouth.bump(x)
            - self.eye_amplitude * e * (self.eyes[0].bump(x) + self.eyes[1].bump(x))
    }

    fn sdf_grad(&self, x: &Vec3, o: f64, e: f64) -> Vec3 {
        let r = x - Vec3::from(self.center);
        let base = if r.norm() > 0.0 { r.normalize() } else { Vec3::z() };
        base + self.mouth.bump_grad(x) * (self.mouth_amplitude * o)
            - (self.eyes[0].bump_grad(x) + self.eyes[1].bump_grad(x)) * (self.eye_amplitude * e)
    }

    pub fn albedo(&self, x: &Vec3, o: f64, e: f64) -> [f64; 3] {
        let skin = [
            0.86 + 0.05 * (3.0 * x.x + 0.5).sin(),
            0.66 + 0.05 * (3.0 * x.y).sin(),
            0.54 + 0.04 * (2.0 * x.z).cos(),
        ];
        let km = self.mouth.bump(x);
        let mut c = lerp(skin, [0.72, 0.32, 0.32], 0.6 * smoothstep(0.0, 0.4, km));
        c = lerp(c, [0.25, 0.05, 0.08], o * smoothstep(0.1, 0.6, km));
        for eye in &self.eyes {
            let ke = eye.bump(x);
            if ke > 0.0 {
                let open = lerp([0.95, 0.95, 0.93], [0.12, 0.1, 0.16], smoothstep(0.35, 0.65, ke));
                c = lerp(c, open, (1.0 - e) * smoothstep(0.0, 0.3, ke));
            }
        }
        c
    }

    /// First surface hit of the canonical-frame ray `origin + t dir`.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3, o: f64, e: f64) -> Option<Vec3> {
        let bound = self.radius + self.eye_amplitude.abs() + self.mouth_amplitude.abs() + 1e-3;
        let oc = origin - Vec3::from(self.center);
        let b = oc.dot(dir);
        let disc = b * b - (oc.norm_squared() - bound * bound);
        if disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let (t0, t1) = (-b - sq, -b + sq);
        if t1 <= 0.0 {
            return None;
        }
        let mut t = t0.max(0.0);
        for _ in 0..MAX_STEPS {
            let p = origin + dir * t;
            let f = self.sdf(&p, o, e);
            if f < HIT_EPS {
                return Some(p);
            }
            t += f / LIPSCHITZ;
            if t > t1 {
                return None;
            }
        }
        None
    }

    /// Head-only color along a canonical ray, `None` on a miss.
    pub fn shade(&self, origin: &Vec3, dir: &Vec3, o: f64, e: f64) -> Option<[f64; 3]> {
        let p = self.trace(origin, dir, o, e)?;
        let n = self.sdf_grad(&p, o, e).normalize();
        let lambert = n.dot(&Vec3::from(self.light)).max(0.0);
        let shade = 0.35 + 0.65 * lambert;
        Some(self.albedo(&p, o, e).map(|c| (c * shade).clamp(0.0, 1.0)))
    }

    /// Torso color along a canonical ray, `None` when it misses the quad.
    pub fn torso_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<[f64; 3]> {
        let q = &self.torso;
        if dir.z.abs() < 1e-12 {
            return None;
        }
        let t = (q.z - origin.z) / dir.z;
        if t <= 0.0 {
            return None;
        }
        let p = origin + dir * t;
        let inside = p.x >= q.x_range[0] && p.x <= q.x_range[1] && p.y >= q.y_range[0] && p.y <= q.y_range[1];
        inside.then(|| q.color(&p))
    }

    fn canonical_ray(cam: &CameraIntrinsics, view: &HeadPose, col: u32, row: u32) -> (Vec3, Vec3) {
        let (u, v) = cam.pixel_center(col, row);
        let dir = (view.rotation * cam.camera_dir(u, v)).normalize();
        (view.translation, dir)
    }

    /// Renders `(full frame, head only)` on a white background. `view` maps
    /// camera coordinates to canonical coordinates.
    pub fn oracle_render(
        &self,
        cam: &CameraIntrinsics,
        view: &HeadPose,
        cond: &FrameCondition,
    ) -> (FrameBuffer, FrameBuffer) {
        let o = self.openness(&cond.audio);
        let e = cond.eye.value();
        let mut full = FrameBuffer::new(cam.width, cam.height, [1.0; 3]);
        let mut head = full.clone();
        for row in 0..cam.height {
            for col in 0..cam.width {
                let (org, dir) = Self::canonical_ray(cam, view, col, row);
                let h = self.shade(&org, &dir, o, e).unwrap_or([1.0; 3]);
                head.set(col, row, h);
                full.set(col, row, self.torso_hit(&org, &dir).unwrap_or(h));
            }
        }
        (full, head)
    }

    /// Pixels whose center ray passes through a region ball, dilated by a
    /// square of `dilate` pixels.
    pub fn projected_region_mask(&self, cam: &CameraIntrinsics, view: &HeadPose, region: Region, dilate: u32) -> Vec<bool> {
        let (w, h) = (cam.width as i64, cam.height as i64);
        let balls = self.ball(region);
        let mut mask = vec![false; (w * h) as usize];
        for row in 0..cam.height {
            for col in 0..cam.width {
                let (org, dir) = Self::canonical_ray(cam, view, col, row);
                mask[(row * cam.width + col) as usize] = balls.iter().any(|b| b.hit_by(&org, &dir));
            }
        }
        if dilate == 0 {
            return mask;
        }
        let d = dilate as i64;
        let mut out = vec![false; mask.len()];
        for r in 0..h {
            for c in 0..w {
                out[(r * w + c) as usize] = (-d..=d).any(|dr| {
                    (-d..=d).any(|dc| {
                        let (rr, cc) = (r + dr, c + dc);
                        rr >= 0 && cc >= 0 && rr < h && cc < w && mask[(rr * w + cc) as usize]
                    })
                });
            }
        }
        out
    }

    /// Pixels whose first head-surface hit lies inside the region.
    pub fn surface_region_mask(
        &self,
        cam: &CameraIntrinsics,
        view: &HeadPose,
        cond: &FrameCondition,
        region: Region,
    ) -> Vec<bool> {
        let o = self.openness(&cond.audio);
        let e = cond.eye.value();
        let balls = self.ball(region);
        let mut mask = Vec::with_capacity(cam.width as usize * cam.height as usize);
        for row in 0..cam.height {
            for col in 0..cam.width {
                let (org, dir) = Self::canonical_ray(cam, view, col, row);
                let hit = self.trace(&org, &dir, o, e);
                mask.push(hit.is_some_and(|p| balls.iter().any(|b| b.contains(&p))));
            }
        }
        mask
    }

    /// Image-space bounding box `[x0, y0, x1, y1]` of the projected torso
    /// quad, clipped to the image. `None` if it is not visible.
    pub fn torso_bbox(&self, cam: &CameraIntrinsics, view: &HeadPose) -> Option<[f64; 4]> {
        let inv = view.inverse();
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for c in self.torso.corners() {
            let (u, v) = cam.project(&inv.apply(&c))?;
            b = [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)];
        }
        let clipped = [
            b[0].max(0.0),
            b[1].max(0.0),
            b[2].min(cam.width as f64),
            b[3].min(cam.height as f64),
        ];
        (clipped[0] < clipped[2] && clipped[1] < clipped[3]).then_some(clipped)
    }

    /// Random visible surface points of the undeformed head, split by
    /// whether they lie in `region`. Points face a camera on the -z side.
    pub fn surface_samples(&self, region: Region, n: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let balls = self.ball(region);
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        let c = Vec3::from(self.center);
        while inside.len() < n || outside.len() < n {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let norm = d.norm();
            if !(0.1..=1.0).contains(&norm) || d.z / norm > -0.4 {
                continue;
            }
            let p = c + d * (self.radius / norm);
            if balls.iter().any(|b| b.contains(&p)) {
                if inside.len() < n {
                    inside.push(p);
                }
            } else if outside.len() < n {
                outside.push(p);
            }
        }
        (inside, outside)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AabbRecord {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub image: String,
    pub head_image: String,
    /// Camera to world.
    pub camera_pose: PoseRecord,
    /// Canonical head frame to world.
    pub head_pose: PoseRecord,
    pub audio: Vec<f64>,
    pub eye: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub intrinsics: CameraIntrinsics,
    pub aabb: AabbRecord,
    pub scene: SyntheticScene,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub camera_pose: HeadPose,
    pub head_pose: HeadPose,
    pub condition: FrameCondition,
    pub split: Split,
    pub image: FrameBuffer,
    pub head_image: FrameBuffer,
}

impl Frame {
    /// Camera to canonical head coordinates.
    pub fn view(&self) -> HeadPose {
        self.head_pose.inverse().compose(&self.camera_pose)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub aabb: Aabb,
    pub scene: SyntheticScene,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.split == Split::Train)
    }

    pub fn val_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.split == Split::Val)
    }
}

/// How a synthetic sequence moves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub shift: f64,
    pub camera_distance: f64,
    /// Scale of the audio component orthogonal to `w`.
    pub audio_noise: f64,
    /// Mean frames between blinks.
    pub blink_period: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory {
            yaw: 0.25,
            pitch: 0.08,
            roll: 0.04,
            shift: 0.04,
            camera_distance: 3.0,
            audio_noise: 0.3,
            blink_period: 8.0,
        }
    }
}

impl Trajectory {
    /// Head rotation and shift amplitudes multiplied by `k`.
    pub fn with_motion(self, k: f64) -> Self {
        Trajectory {
            yaw: self.yaw * k,
            pitch: self.pitch * k,
            roll: self.roll * k,
            shift: self.shift * k,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub frames: usize,
    pub size: u32,
    pub focal: f64,
    pub seed: u64,
    pub trajectory: Trajectory,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            frames: 100,
            size: 128,
            focal: 160.0,
            seed: 0,
            trajectory: Trajectory::default(),
        }
    }
}

/// Band-limited series in `[-1, 1]`: a few random low-frequency sinusoids.
fn smooth_series(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let parts: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0)))
        .collect();
    let total: f64 = parts.iter().map(|p| p.2).sum();
    (0..n)
        .map(|i| {
            let x = i as f64 / n.max(1) as f64 * std::f64::consts::TAU;
            parts.iter().map(|&(f, ph, a)| a * (f * x + ph).sin()).sum::<f64>() / total
        })
        .collect()
}

pub fn split_for(index: usize) -> Split {
    if index.is_multiple_of(10) {
        Split::Val
    } else {
        Split::Train
    }
}

/// Per-frame `(camera_pose, head_pose, condition)` for a sequence.
pub fn sequence(scene: &SyntheticScene, opts: &GenerateOptions) -> Result<Vec<(HeadPose, HeadPose, FrameCondition)>> {
    let n = opts.frames;
    let tr = &opts.trajectory;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_f4a3e5);
    let yaw = smooth_series(&mut rng, n);
    let pitch = smooth_series(&mut rng, n);
    let roll = smooth_series(&mut rng, n);
    let shifts: Vec<Vec<f64>> = (0..3).map(|_| smooth_series(&mut rng, n)).collect();
    let open = smooth_series(&mut rng, n);
    let noise: Vec<Vec<f64>> = (0..AUDIO_DIM).map(|_| smooth_series(&mut rng, n)).collect();
    let mut blinks = Vec::new();
    let mut t = rng.random_range(0.0..tr.blink_period);
    while t < n as f64 + 3.0 {
        blinks.push(t);
        t += tr.blink_period * rng.random_range(0.5..1.5);
    }
    // Camera fixed at the world origin looking down +z; the head sits in
    // front of it, rotated and shifted.
    let base = HeadPose::new(
        crate::geom::Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0)),
        Vec3::new(0.0, 0.0, tr.camera_distance),
    )?;
    (0..n)
        .map(|i| {
            let shift = Vec3::new(shifts[0][i], shifts[1][i], shifts[2][i]) * tr.shift;
            let head_rot = nalgebra::Rotation3::from_euler_angles(tr.pitch * pitch[i], tr.yaw * yaw[i], tr.roll * roll[i]);
            let head_pose = HeadPose::new(base.rotation * head_rot.into_inner(), base.translation + shift)?;
            let o = (0.5 + 0.65 * open[i]).clamp(0.0, 1.0);
            let nz: [f64; AUDIO_DIM] = std::array::from_fn(|k| tr.audio_noise * noise[k][i]);
            let e = blinks
                .iter()
                .map(|&b| (-((i as f64 - b) / 1.2).powi(2)).exp())
                .fold(0.0, f64::max)
                .clamp(0.0, 1.0);
            let cond = FrameCondition {
                audio: scene.audio_for(o, &nz),
                eye: EyeCondition::new(e)?,
            };
            Ok((HeadPose::identity(), head_pose, cond))
        })
        .collect()
}

/// Renders a sequence and writes `manifest.json`, `frames/NNNN.ppm` (head
/// and torso) and `head/NNNN.ppm` (head only) under `out`.
pub fn generate_dataset(scene: &SyntheticScene, opts: &GenerateOptions, out: &Path) -> Result<Manifest> {
    scene.validate()?;
    if opts.frames < 2 {
        return Err(Error::Config(format!("need at least 2 frames, got {}", opts.frames)));
    }
    let cam = CameraIntrinsics::centered(opts.size, opts.focal);
    cam.validate()?;
    let seq = sequence(scene, opts)?;
    for sub in ["frames", "head"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let indices: Vec<usize> = (0..seq.len()).collect();
    let written = crate::parallel::map_chunks(&indices, 1, |_, idx| -> Result<FrameRecord> {
        let i = idx[0];
        let (camera_pose, head_pose, cond) = &seq[i];
        let view = head_pose.inverse().compose(camera_pose);
        let (full, head) = scene.oracle_render(&cam, &view, cond);
        let image = format!("frames/{i:04}.ppm");
        let head_image = format!("head/{i:04}.ppm");
        ppm::write(&out.join(&image), &full)?;
        ppm::write(&out.join(&head_image), &head)?;
        Ok(FrameRecord {
            index: i,
            image,
            head_image,
            camera_pose: camera_pose.to_rows(),
            head_pose: head_pose.to_rows(),
            audio: cond.audio.0.to_vec(),
            eye: cond.eye.value(),
            split: split_for(i),
        })
    });
    let frames = written.into_iter().collect::<Result<Vec<_>>>()?;
    let aabb = Aabb::unit();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        intrinsics: cam,
        aabb: AabbRecord {
            min: [aabb.min.x, aabb.min.y, aabb.min.z],
            max: [aabb.max.x, aabb.max.y, aabb.max.z],
        },
        scene: scene.clone(),
        frames,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Parses and validates a manifest without touching images.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    m.intrinsics.validate().map_err(|e| Error::Dataset(format!("intrinsics: {e}")))?;
    Aabb::new(Vec3::from(m.aabb.min), Vec3::from(m.aabb.max)).map_err(|e| Error::Dataset(format!("aabb: {e}")))?;
    m.scene.validate()?;
    if m.frames.is_empty() {
        return Err(Error::Dataset("manifest lists no frames".into()));
    }
    for f in &m.frames {
        let ctx = |what: &str, e: Error| Error::Dataset(format!("frame {}: {what}: {e}", f.index));
        if f.audio.len() != AUDIO_DIM {
            return Err(Error::Dimension {
                context: format!("frame {} audio vector", f.index).into(),
                expected: AUDIO_DIM,
                actual: f.audio.len(),
            });
        }
        AudioCondition::new(&f.audio).map_err(|e| ctx("audio", e))?;
        EyeCondition::new(f.eye).map_err(|e| ctx("eye", e))?;
        f.camera_pose.to_pose().map_err(|e| ctx("camera pose", e))?;
        f.head_pose.to_pose().map_err(|e| ctx("head pose", e))?;
        for p in [&f.image, &f.head_image] {
            if Path::new(p).is_absolute() || p.split(['/', '\\']).any(|c| c == "..") {
                return Err(Error::Dataset(format!("frame {}: image path {p:?} escapes the dataset", f.index)));
            }
        }
    }
    if !m.frames.iter().any(|f| f.split == Split::Val) {
        return Err(Error::Dataset("manifest has no validation frame".into()));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m = parse_manifest(&text)?;
    let cam = m.intrinsics;
    let mut frames = Vec::with_capacity(m.frames.len());
    for f in &m.frames {
        let load = |rel: &str| -> Result<FrameBuffer> {
            let p = dir.join(rel);
            if !p.is_file() {
                return Err(Error::Dataset(format!("frame {}: missing image file {}", f.index, p.display())));
            }
            let img = ppm::read(&p)?;
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::Dataset(format!(
                    "frame {}: {} is {}x{}, expected {}x{}",
                    f.index,
                    p.display(),
                    img.width,
                    img.height,
                    cam.width,
                    cam.height
                )));
            }
            Ok(img)
        };
        frames.push(Frame {
            index: f.index,
            camera_pose: f.camera_pose.to_pose()?,
            head_pose: f.head_pose.to_pose()?,
            condition: FrameCondition {
                audio: AudioCondition::new(&f.audio)?,
                eye: EyeCondition::new(f.eye)?,
            },
            split: f.split,
            image: load(&f.image)?,
            head_image: load(&f.head_image)?,
        });
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        intrinsics: cam,
        aabb: Aabb::new(Vec3::from(m.aabb.min), Vec3::from(m.aabb.max))?,
        scene: m.scene,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::centered(64, 80.0)
    }

    fn front_view() -> HeadPose {
        let base = HeadPose::new(crate::geom::Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0)), Vec3::new(0.0, 0.0, 3.0)).unwrap();
        base.inverse()
    }

    fn cond(scene: &SyntheticScene, o: f64, e: f64, seed: u64) -> FrameCondition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nz: [f64; AUDIO_DIM] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        FrameCondition {
            audio: scene.audio_for(o, &nz),
            eye: EyeCondition::new(e).unwrap(),
        }
    }

    #[test]
    fn standard_scene_is_valid() {
        let s = SyntheticScene::standard(3);
        s.validate().unwrap();
        let w2: f64 = s.mouth_direction.iter().map(|v| v * v).sum();
        assert!((w2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn openness_reads_back() {
        let s = SyntheticScene::standard(3);
        for o in [0.0, 0.3, 1.0] {
            assert!((s.openness(&cond(&s, o, 0.0, 1).audio) - o).abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_render_is_a_shaded_disc() {
        let s = SyntheticScene::standard(0);
        let zero = FrameCondition {
            audio: AudioCondition::zeros(),
            eye: EyeCondition::new(0.0).unwrap(),
        };
        let (_, head) = s.oracle_render(&cam(), &front_view(), &zero);
        assert_ne!(head.get(32, 32), [1.0; 3]);
        assert_eq!(head.get(0, 0), [1.0; 3]);
        // Disc radius ≈ f r / sqrt(d² - r²) pixels.
        let r_px = 80.0 * 0.55 / (9.0f64 - 0.55 * 0.55).sqrt();
        let edge = (32.0 + r_px + 1.5) as u32;
        assert_eq!(head.get(edge, 32), [1.0; 3]);
        assert_ne!(head.get((32.0 + r_px - 1.5) as u32, 32), [1.0; 3]);
    }

    #[test]
    fn audio_orthogonal_to_w_changes_nothing() {
        let s = SyntheticScene::standard(1);
        let a = cond(&s, 0.7, 0.2, 1);
        let b = cond(&s, 0.7, 0.2, 2);
        assert_ne!(a.audio, b.audio);
        let (fa, _) = s.oracle_render(&cam(), &front_view(), &a);
        let (fb, _) = s.oracle_render(&cam(), &front_view(), &b);
        // w · a agrees to rounding, so frames agree far below one 8-bit step.
        for (x, y) in fa.rgb.iter().zip(&fb.rgb) {
            assert!((0..3).all(|k| (x[k] - y[k]).abs() < 1e-9));
        }
        assert_eq!(crate::ppm::encode(&fa), crate::ppm::encode(&fb));
    }

    #[test]
    fn condition_changes_stay_in_their_regions() {
        let s = SyntheticScene::standard(1);
        let (c, v) = (cam(), front_view());
        for (region, x, y) in [
            (Region::Mouth, cond(&s, 0.0, 0.3, 1), cond(&s, 1.0, 0.3, 1)),
            (Region::Eyes, cond(&s, 0.4, 0.0, 1), cond(&s, 0.4, 1.0, 1)),
        ] {
            let (fx, _) = s.oracle_render(&c, &v, &x);
            let (fy, _) = s.oracle_render(&c, &v, &y);
            let mask = s.projected_region_mask(&c, &v, region, 2);
            let mut changed = 0;
            for i in 0..fx.pixels() {
                let diff = (0..3).map(|k| (fx.rgb[i][k] - fy.rgb[i][k]).abs()).fold(0.0, f64::max);
                if diff > 1e-6 {
                    changed += 1;
                    assert!(mask[i], "{region:?}: pixel {i} changed outside the region");
                }
            }
            assert!(changed > 5, "{region:?}: condition had no visible effect");
        }
    }

    #[test]
    fn torso_bbox_matches_rendered_quad() {
        let s = SyntheticScene::standard(0);
        let (c, v) = (cam(), front_view());
        let zero = cond(&s, 0.0, 0.0, 0);
        let (full, head) = s.oracle_render(&c, &v, &zero);
        let bb = s.torso_bbox(&c, &v).unwrap();
        let mut found = [u32::MAX, u32::MAX, 0, 0];
        for row in 0..c.height {
            for col in 0..c.width {
                if full.get(col, row) != head.get(col, row) {
                    found = [found[0].min(col), found[1].min(row), found[2].max(col + 1), found[3].max(row + 1)];
                }
            }
        }
        for k in 0..4 {
            assert!((found[k] as f64 - bb[k]).abs() <= 1.0, "edge {k}: {found:?} vs {bb:?}");
        }
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticScene::standard(0);
        let opts = GenerateOptions {
            frames: 2,
            size: 16,
            focal: 20.0,
            ..Default::default()
        };
        let m = generate_dataset(&s, &opts, dir.path()).unwrap();
        let d = load_dataset(dir.path()).unwrap();
        assert_eq!(d.frames.len(), 2);
        assert_eq!(d.frames[0].split, Split::Val);
        assert_eq!(d.frames[1].split, Split::Train);
        assert_eq!(d.scene, s);
        for (f, r) in d.frames.iter().zip(&m.frames) {
            assert_eq!(f.condition.audio.0.to_vec(), r.audio);
            assert_eq!(f.head_pose.to_rows(), r.head_pose);
        }
    }

    #[test]
    fn manifest_is_stable_across_runs() {
        let s = SyntheticScene::standard(0);
        let opts = GenerateOptions {
            frames: 3,
            size: 16,
            focal: 20.0,
            seed: 5,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&s, &opts, a.path()).unwrap();
        generate_dataset(&s, &opts, b.path()).unwrap();
        for f in ["manifest.json", "frames/0001.ppm", "head/0002.ppm"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn every_tenth_frame_is_held_out() {
        let val: Vec<usize> = (0..25).filter(|&i| split_for(i) == Split::Val).collect();
        assert_eq!(val, vec![0, 10, 20]);
    }

    #[test]
    fn loader_names_the_first_violation() {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticScene::standard(0);
        let opts = GenerateOptions {
            frames: 2,
            size: 8,
            focal: 10.0,
            ..Default::default()
        };
        generate_dataset(&s, &opts, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let original = std::fs::read_to_string(&mpath).unwrap();

        std::fs::remove_file(dir.path().join("frames/0001.ppm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frames/0001.ppm"), "{err}");

        let mut m: Manifest = serde_json::from_str(&original).unwrap();
        m.frames[0].audio.pop();
        std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 32, actual: 31, .. }), "{err}");

        let mut m: Manifest = serde_json::from_str(&original).unwrap();
        m.version = 9;
        assert!(parse_manifest(&serde_json::to_string(&m).unwrap()).is_err());
    }
}
