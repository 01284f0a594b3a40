//! Quadrature volume rendering and its adjoint.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::fieldrepr::{skip_empty, stratum_fraction, OccupancyGrid};
use crate::geom::{normalize_to_unit_cube, ray_for_pixel, Aabb, CameraIntrinsics, FrameBuffer, HeadPose, Ray};
use crate::nets::{FrameCondition, GateOverride, HeadBatch, HeadField, TorsoBatch, TorsoField};
use crate::parallel;

pub const DEFAULT_SAMPLES: usize = 16;
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    pub sigma: Vec<f64>,
}

impl RaySamples {
    /// Sample positions from `(t, delta)` pairs, with zero color and density.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        RaySamples {
            t: pairs.iter().map(|p| p.0).collect(),
            deltas: pairs.iter().map(|p| p.1).collect(),
            rgb: vec![[0.0; 3]; pairs.len()],
            sigma: vec![0.0; pairs.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.deltas.len() != n || self.rgb.len() != n || self.sigma.len() != n {
            return Err(Error::Geometry("ray sample arrays have different lengths".into()));
        }
        if self.t.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Geometry("ray samples are not sorted by t".into()));
        }
        if let Some(i) = self.deltas.iter().position(|&d| !(d >= 0.0)) {
            return Err(Error::Geometry(format!("negative interval at sample {i}")));
        }
        if let Some(i) = self.sigma.iter().position(|&s| !(s >= 0.0)) {
            return Err(Error::Geometry(format!("negative density at sample {i}")));
        }
        Ok(())
    }
}

/// `n` stratified positions over `[t_near, t_far]`; bin midpoints when
/// `jitter` is `None`.
pub fn stratified_samples(ray: &Ray, n: usize, mut jitter: Option<&mut dyn RngCore>) -> RaySamples {
    assert!(n >= 1, "sample count must be positive");
    let len = ray.t_far - ray.t_near;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let j = match jitter.as_deref_mut() {
                Some(r) => rand::Rng::random::<f64>(r),
                None => 0.5,
            };
            ray.t_near + len * stratum_fraction(i, n, j)
        })
        .collect();
    let deltas = (0..n)
        .map(|i| t.get(i + 1).copied().unwrap_or(ray.t_far) - t[i])
        .collect();
    RaySamples {
        t,
        deltas,
        rgb: vec![[0.0; 3]; n],
        sigma: vec![0.0; n],
    }
}

/// Sample positions for one ray: occupancy-restricted when a grid is given.
pub fn sample_positions(
    ray: &Ray,
    n: usize,
    occupancy: Option<&OccupancyGrid>,
    jitter: Option<&mut dyn RngCore>,
) -> Vec<(f64, f64)> {
    match occupancy {
        Some(g) => skip_empty(ray, g, n, jitter),
        None => {
            let s = stratified_samples(ray, n, jitter);
            s.t.into_iter().zip(s.deltas).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T_0 .. T_n`; the last entry is the final transmittance.
    pub transmittance: Vec<f64>,
}

impl Composite {
    pub fn final_transmittance(&self) -> f64 {
        *self.transmittance.last().expect("T_0 always present")
    }
}

/// `w_i = T_i (1 - exp(-σ_i δ_i))`, `Ĉ = Σ w_i c_i + T_n · background`.
pub fn composite(s: &RaySamples, background: [f64; 3]) -> Result<Composite> {
    s.validate()?;
    let n = s.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut color = [0.0; 3];
    let mut optical = 0.0;
    let mut t_i = 1.0;
    transmittance.push(t_i);
    for i in 0..n {
        optical += s.sigma[i] * s.deltas[i];
        let t_next = (-optical).exp();
        let w = t_i - t_next;
        for k in 0..3 {
            color[k] += w * s.rgb[i][k];
        }
        weights.push(w);
        transmittance.push(t_next);
        t_i = t_next;
    }
    for k in 0..3 {
        color[k] += t_i * background[k];
    }
    Ok(Composite {
        color,
        opacity: 1.0 - t_i,
        weights,
        transmittance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeGrads {
    pub d_rgb: Vec<[f64; 3]>,
    pub d_sigma: Vec<f64>,
    pub d_background: [f64; 3],
}

/// Adjoint of [`composite`] for an upstream gradient on `Ĉ`.
///
/// `∂Ĉ/∂σ_k = δ_k (T_{k+1} c_k - Σ_{i>k} w_i c_i - T_n bg)`.
pub fn composite_backward(s: &RaySamples, background: [f64; 3], c: &Composite, upstream: [f64; 3]) -> CompositeGrads {
    let n = s.len();
    let dot = |v: &[f64; 3]| v[0] * upstream[0] + v[1] * upstream[1] + v[2] * upstream[2];
    let t_final = c.final_transmittance();
    let mut d_sigma = vec![0.0; n];
    let mut tail = t_final * dot(&background);
    for k in (0..n).rev() {
        let gc = dot(&s.rgb[k]);
        d_sigma[k] = s.deltas[k] * (c.transmittance[k + 1] * gc - tail);
        tail += c.weights[k] * gc;
    }
    CompositeGrads {
        d_rgb: c.weights.iter().map(|&w| upstream.map(|g| g * w)).collect(),
        d_sigma,
        d_background: upstream.map(|g| g * t_final),
    }
}

/// Anything that maps normalized positions and view directions to color and
/// density.
pub trait RadianceField: Sync {
    fn radiance(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<(Vec<[f64; 3]>, Vec<f64>)>;
}

/// The head field under a fixed frame condition.
pub struct ConditionedHead<'a> {
    pub field: &'a HeadField,
    pub condition: FrameCondition,
    pub gates: GateOverride,
}

impl RadianceField for ConditionedHead<'_> {
    fn radiance(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
        let batch = HeadBatch {
            points: points.to_vec(),
            dirs: dirs.to_vec(),
            cond: vec![0; points.len()],
            conditions: vec![self.condition],
        };
        let tape = self.field.forward(&batch, self.gates)?;
        let rgb = (0..points.len()).map(|i| tape.rgb(i)).collect();
        Ok((rgb, tape.sigma))
    }
}

#[derive(Clone, Debug)]
pub struct RenderOptions<'a> {
    pub aabb: Aabb,
    pub samples: usize,
    pub background: [f64; 3],
    /// Sub-pixel grid side; 1 renders pixel centers only.
    pub supersample: u32,
    pub occupancy: Option<&'a OccupancyGrid>,
}

impl RenderOptions<'_> {
    pub fn new(aabb: Aabb) -> Self {
        RenderOptions {
            aabb,
            samples: DEFAULT_SAMPLES,
            background: WHITE,
            supersample: 1,
            occupancy: None,
        }
    }
}

/// Renders one color per image point (continuous coordinates).
pub fn render_points(
    field: &dyn RadianceField,
    cam: &CameraIntrinsics,
    pose: &HeadPose,
    image_points: &[(f64, f64)],
    opts: &RenderOptions,
) -> Result<Vec<[f64; 3]>> {
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut spans = Vec::with_capacity(image_points.len());
    let mut pairs_all = Vec::with_capacity(image_points.len());
    for &px in image_points {
        let start = points.len();
        let pairs = match ray_for_pixel(cam, pose, px, &opts.aabb) {
            Some(ray) => {
                let pairs = sample_positions(&ray, opts.samples, opts.occupancy, None);
                let d = [ray.dir.x, ray.dir.y, ray.dir.z];
                for &(t, _) in &pairs {
                    let u = normalize_to_unit_cube(&ray.at(t), &opts.aabb).coords;
                    points.push([u.x, u.y, u.z]);
                    dirs.push(d);
                }
                pairs
            }
            None => Vec::new(),
        };
        spans.push(start..points.len());
        pairs_all.push(pairs);
    }
    let (rgb, sigma) = if points.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        field.radiance(&points, &dirs)?
    };
    spans
        .into_iter()
        .zip(pairs_all)
        .map(|(span, pairs)| {
            let mut s = RaySamples::from_pairs(&pairs);
            s.rgb.copy_from_slice(&rgb[span.clone()]);
            s.sigma.copy_from_slice(&sigma[span]);
            Ok(composite(&s, opts.background)?.color)
        })
        .collect()
}

/// Renders a full frame. Rows are processed in fixed chunks and gathered in
/// order, so the result does not depend on the worker count.
pub fn render_frame(
    field: &dyn RadianceField,
    cam: &CameraIntrinsics,
    pose: &HeadPose,
    opts: &RenderOptions,
) -> Result<FrameBuffer> {
    let ss = opts.supersample.max(1);
    let rows: Vec<u32> = (0..cam.height).collect();
    let chunks = parallel::map_chunks(&rows, 4, |_, rows| -> Result<Vec<[f64; 3]>> {
        let mut image_points = Vec::with_capacity(rows.len() * cam.width as usize * (ss * ss) as usize);
        for &row in rows {
            for col in 0..cam.width {
                for a in 0..ss {
                    for b in 0..ss {
                        image_points.push((
                            col as f64 + (b as f64 + 0.5) / ss as f64,
                            row as f64 + (a as f64 + 0.5) / ss as f64,
                        ));
                    }
                }
            }
        }
        let colors = render_points(field, cam, pose, &image_points, opts)?;
        let per = (ss * ss) as usize;
        Ok(colors
            .chunks(per)
            .map(|c| {
                let mut m = [0.0; 3];
                for v in c {
                    for k in 0..3 {
                        m[k] += v[k];
                    }
                }
                m.map(|x| x / per as f64)
            })
            .collect())
    });
    let mut fb = FrameBuffer::new(cam.width, cam.height, opts.background);
    let mut i = 0usize;
    for chunk in chunks {
        for v in chunk? {
            fb.set(i as u32 % cam.width, i as u32 / cam.width, v);
            i += 1;
        }
    }
    Ok(fb)
}

/// Normalized torso-field coordinate of a pixel center.
pub fn torso_pixel(cam: &CameraIntrinsics, col: u32, row: u32) -> [f64; 2] {
    [(col as f64 + 0.5) / cam.width as f64, (row as f64 + 0.5) / cam.height as f64]
}

/// Composites the torso over a rendered head frame:
/// `α c_t + (1 - α) head`. Also returns the per-pixel α.
pub fn render_torso(
    torso: &TorsoField,
    cam: &CameraIntrinsics,
    pose: &HeadPose,
    head: &FrameBuffer,
) -> Result<(FrameBuffer, Vec<f64>)> {
    if head.width != cam.width || head.height != cam.height {
        return Err(Error::Dimension {
            context: "head frame".into(),
            expected: cam.width as usize * cam.height as usize,
            actual: head.pixels(),
        });
    }
    let code = torso.pose_codes(std::slice::from_ref(pose))?;
    let rows: Vec<u32> = (0..cam.height).collect();
    let chunks = parallel::map_chunks(&rows, 8, |_, rows| -> Result<Vec<([f64; 3], f64)>> {
        let mut batch = TorsoBatch {
            poses: vec![*pose],
            ..Default::default()
        };
        for &row in rows {
            for col in 0..cam.width {
                batch.pixels.push(torso_pixel(cam, col, row));
                batch.cond.push(0);
            }
        }
        let tape = torso.forward_with_codes(&batch, code.clone())?;
        Ok((0..batch.len()).map(|i| tape.output(i)).collect())
    });
    let mut fb = head.clone();
    let mut alpha = Vec::with_capacity(head.pixels());
    let mut i = 0usize;
    for chunk in chunks {
        for (c, a) in chunk? {
            let h = head.rgb[i];
            fb.rgb[i] = std::array::from_fn(|k| crate::geom::clamp_unit(a * c[k] + (1.0 - a) * h[k]));
            alpha.push(a);
            i += 1;
        }
    }
    Ok((fb, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ray01() -> Ray {
        Ray::new(Vec3::zeros(), Vec3::z(), 0.0, 1.0).unwrap()
    }

    fn samples(rgb: Vec<[f64; 3]>, sigma: Vec<f64>, deltas: Vec<f64>) -> RaySamples {
        let mut acc = 0.0;
        let t = deltas
            .iter()
            .map(|d| {
                let t = acc;
                acc += d;
                t
            })
            .collect();
        RaySamples { t, deltas, rgb, sigma }
    }

    #[test]
    fn midpoints_without_jitter() {
        let s = stratified_samples(&ray01(), 2, None);
        assert_eq!(s.t, vec![0.25, 0.75]);
        assert_eq!(s.deltas, vec![0.5, 0.25]);
        assert_eq!(stratified_samples(&ray01(), 1, None).t, vec![0.5]);
    }

    #[test]
    fn jittered_samples_stay_in_bins_and_repeat() {
        let ray = Ray::new(Vec3::zeros(), Vec3::x(), 2.0, 5.0).unwrap();
        let a = stratified_samples(&ray, 16, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        let b = stratified_samples(&ray, 16, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        assert_eq!(a, b);
        for (i, &t) in a.t.iter().enumerate() {
            assert!(t >= 2.0 + 3.0 * i as f64 / 16.0 && t <= 2.0 + 3.0 * (i + 1) as f64 / 16.0);
        }
    }

    #[test]
    fn empty_medium_returns_background_exactly() {
        let s = samples(vec![[0.3, 0.2, 0.9]; 8], vec![0.0; 8], vec![0.1; 8]);
        let bg = [0.123, 0.456, 0.789];
        let c = composite(&s, bg).unwrap();
        assert_eq!(c.color, bg);
        assert_eq!(c.opacity, 0.0);
    }

    #[test]
    fn half_opacity_sample() {
        let s = samples(vec![[1.0, 0.0, 0.5]], vec![std::f64::consts::LN_2], vec![1.0]);
        let c = composite(&s, [0.0, 1.0, 1.0]).unwrap();
        assert!((c.weights[0] - 0.5).abs() < 1e-15);
        let want = [0.5, 0.5, 0.75];
        for k in 0..3 {
            assert!((c.color[k] - want[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_first_sample_wins() {
        let s = samples(vec![[0.2, 0.4, 0.6], [1.0, 1.0, 1.0]], vec![1e9, 1.0], vec![0.1, 0.1]);
        let c = composite(&s, WHITE).unwrap();
        for k in 0..3 {
            assert!((c.color[k] - s.rgb[0][k]).abs() < 1e-6);
        }
    }

    #[test]
    fn shuffled_samples_are_rejected() {
        let mut s = samples(vec![[0.0; 3]; 3], vec![1.0; 3], vec![0.1; 3]);
        s.t.swap(0, 2);
        assert!(composite(&s, WHITE).is_err());
    }

    proptest! {
        #[test]
        fn weights_and_transmittance_sum_to_one(
            sigma in proptest::collection::vec(0.0f64..50.0, 1..32),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = sigma.len();
            let s = samples(
                (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
                sigma,
                (0..n).map(|_| rng.random_range(0.0..0.3)).collect(),
            );
            let c = composite(&s, WHITE).unwrap();
            let total: f64 = c.weights.iter().sum::<f64>() + c.final_transmittance();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(c.color.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = samples(vec![[0.5; 3]; 4], vec![1.0, 2.0, 0.0, 3.0], vec![0.2; 4]);
        let c = composite(&s, WHITE).unwrap();
        let g = composite_backward(&s, WHITE, &c, [0.0; 3]);
        assert!(g.d_sigma.iter().all(|&v| v == 0.0));
        assert!(g.d_rgb.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(g.d_background, [0.0; 3]);
    }

    #[test]
    fn single_sample_density_gradient_closed_form() {
        let (sigma, delta) = (1.7, 0.3);
        let col = [0.9, 0.1, 0.4];
        let bg = [0.2, 0.6, 1.0];
        let s = samples(vec![col], vec![sigma], vec![delta]);
        let c = composite(&s, bg).unwrap();
        for k in 0..3 {
            let mut up = [0.0; 3];
            up[k] = 1.0;
            let g = composite_backward(&s, bg, &c, up);
            let want = delta * (-sigma * delta).exp() * (col[k] - bg[k]);
            assert!((g.d_sigma[0] - want).abs() < 1e-15);
        }
    }

    struct ConstantField(f64);

    impl RadianceField for ConstantField {
        fn radiance(&self, p: &[[f64; 3]], _: &[[f64; 3]]) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
            Ok((vec![[0.0; 3]; p.len()], vec![self.0; p.len()]))
        }
    }

    /// Opaque sphere of normalized radius `r` about the cube center, with a
    /// smooth color.
    struct Sphere {
        r: f64,
        sharp: f64,
    }

    impl RadianceField for Sphere {
        fn radiance(&self, p: &[[f64; 3]], _: &[[f64; 3]]) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
            let rgb = p.iter().map(|x| [x[0], 0.5 * x[1] + 0.25, 1.0 - x[2]]).collect();
            let sigma = p
                .iter()
                .map(|x| {
                    let d = ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2) + (x[2] - 0.5).powi(2)).sqrt();
                    self.sharp * crate::nets::dense::sigmoid((self.r - d) * self.sharp)
                })
                .collect();
            Ok((rgb, sigma))
        }
    }

    fn front_camera() -> (CameraIntrinsics, HeadPose) {
        let cam = CameraIntrinsics::centered(48, 60.0);
        let pose = HeadPose::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y()).unwrap();
        (cam, pose)
    }

    #[test]
    fn empty_field_renders_white() {
        let (cam, pose) = front_camera();
        let fb = render_frame(&ConstantField(0.0), &cam, &pose, &RenderOptions::new(Aabb::unit())).unwrap();
        assert!(fb.rgb.iter().all(|&c| c == WHITE));
    }

    #[test]
    fn opaque_sphere_silhouette_matches_projection() {
        let (cam, pose) = front_camera();
        let r_world = 0.5;
        let field = Sphere {
            r: r_world / 2.0,
            sharp: 2000.0,
        };
        let opts = RenderOptions {
            samples: 256,
            background: [1.0, 0.0, 1.0],
            ..RenderOptions::new(Aabb::unit())
        };
        let fb = render_frame(&field, &cam, &pose, &opts).unwrap();
        let analytic = |col: i64, row: i64| {
            let (u, v) = cam.pixel_center(col as u32, row as u32);
            let d = pose.rotation * cam.camera_dir(u, v);
            let o = pose.translation;
            let closest = (o - d * o.dot(&d)).norm();
            closest < r_world
        };
        for row in 0..cam.height as i64 {
            for col in 0..cam.width as i64 {
                let px = fb.get(col as u32, row as u32);
                let rendered = !(px[0] > 0.99 && px[1] < 0.01 && px[2] > 0.99);
                if rendered != analytic(col, row) {
                    let near = (-1..=1).any(|dr| {
                        (-1..=1).any(|dc| {
                            let (c, r) = (col + dc, row + dr);
                            c >= 0 && r >= 0 && c < 48 && r < 48 && analytic(c, r) == rendered
                        })
                    });
                    assert!(near, "pixel ({col},{row}) off by more than 1 px");
                }
            }
        }
    }

    #[test]
    fn supersampling_agrees_on_smooth_scene() {
        let (cam, pose) = front_camera();
        let field = Sphere { r: 0.3, sharp: 6.0 };
        let mut opts = RenderOptions::new(Aabb::unit());
        opts.samples = 64;
        let a = render_frame(&field, &cam, &pose, &opts).unwrap();
        opts.supersample = 2;
        let b = render_frame(&field, &cam, &pose, &opts).unwrap();
        let p = crate::eval::psnr(&a, &b).unwrap();
        assert!(p >= 30.0, "psnr {p}");
    }
}
