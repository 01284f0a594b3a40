//! Tri-plane hash representation, the 3D hash baseline, and the occupancy
//! grid used to skip empty space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Ray, Vec3};
use crate::hashenc::{HashGrid, HashGridConfig};
use crate::params::{ParamGroup, Parameters};

/// Three orthogonal planar hash grids. Channel layout is fixed as
/// `XY | YZ | XZ`, each block `L * F` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneEncoder {
    pub plane_xy: HashGrid,
    pub plane_yz: HashGrid,
    pub plane_xz: HashGrid,
}

/// Coordinate pairs fed to the XY, YZ and XZ planes.
const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [1, 2], [0, 2]];

impl TriPlaneEncoder {
    pub fn new(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.dims != 2 {
            return Err(Error::Config("tri-plane encoder needs 2D plane configs".into()));
        }
        Ok(TriPlaneEncoder {
            plane_xy: HashGrid::new(config, rng)?,
            plane_yz: HashGrid::new(config, rng)?,
            plane_xz: HashGrid::new(config, rng)?,
        })
    }

    /// Splits a `2^log2` entry budget evenly over the three planes.
    pub fn budget_config(template: HashGridConfig, table_size_log2: u32) -> HashGridConfig {
        let per_plane = ((1u64 << table_size_log2) as f64 / 3.0).round() as usize;
        HashGridConfig {
            dims: 2,
            table_size: per_plane.max(1),
            ..template
        }
    }

    pub fn config(&self) -> &HashGridConfig {
        self.plane_xy.config()
    }

    pub fn output_dim(&self) -> usize {
        3 * self.plane_xy.output_dim()
    }

    fn planes(&self) -> [&HashGrid; 3] {
        [&self.plane_xy, &self.plane_yz, &self.plane_xz]
    }

    fn planes_mut(&mut self) -> [&mut HashGrid; 3] {
        [&mut self.plane_xy, &mut self.plane_yz, &mut self.plane_xz]
    }

    pub fn encode(&self, x: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out);
        out
    }

    pub fn encode_into(&self, x: &[f64; 3], out: &mut [f64]) -> bool {
        let block = self.plane_xy.output_dim();
        let mut clamped = false;
        for (p, (grid, axes)) in self.planes().into_iter().zip(PLANE_AXES).enumerate() {
            let uv = [x[axes[0]], x[axes[1]]];
            clamped |= grid.encode_into(&uv, &mut out[p * block..(p + 1) * block]);
        }
        clamped
    }

    /// Sum of the three planar adjoints. `dL/dy` collects from XY and YZ.
    pub fn encode_backward(&self, x: &[f64; 3], upstream: &[f64], grads: &mut TriPlaneEncoder) -> [f64; 3] {
        let mut dx = [0.0; 3];
        self.backward_into(x, upstream, grads, Some(&mut dx));
        dx
    }

    pub fn backward_into(
        &self,
        x: &[f64; 3],
        upstream: &[f64],
        grads: &mut TriPlaneEncoder,
        mut dx: Option<&mut [f64; 3]>,
    ) {
        let block = self.plane_xy.output_dim();
        for (p, ((grid, g), axes)) in self
            .planes()
            .into_iter()
            .zip(grads.planes_mut())
            .zip(PLANE_AXES)
            .enumerate()
        {
            let uv = [x[axes[0]], x[axes[1]]];
            let up = &upstream[p * block..(p + 1) * block];
            match dx.as_deref_mut() {
                Some(dx) => {
                    let mut duv = [0.0; 2];
                    grid.backward_into(&uv, up, &mut g.tables, Some(&mut duv));
                    dx[axes[0]] += duv[0];
                    dx[axes[1]] += duv[1];
                }
                None => grid.backward_into(&uv, up, &mut g.tables, None),
            }
        }
    }

    pub fn cell_signature(&self, x: &[f64; 3]) -> Vec<u32> {
        let mut sig = Vec::new();
        for (grid, axes) in self.planes().into_iter().zip(PLANE_AXES) {
            sig.extend(grid.cell_signature(&[x[axes[0]], x[axes[1]]]));
        }
        sig
    }
}

impl Parameters for TriPlaneEncoder {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        for g in self.planes() {
            g.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        for g in self.planes_mut() {
            g.visit_mut(f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Trihash,
    Hash3d,
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trihash" => Ok(Backbone::Trihash),
            "hash3d" => Ok(Backbone::Hash3d),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::Trihash => "trihash",
            Backbone::Hash3d => "hash3d",
        })
    }
}

/// Geometry encoder behind the head field: tri-plane hash or a single 3D
/// hash grid, exposing the same interface.
#[derive(Clone, Debug, PartialEq)]
pub enum GeometryEncoder {
    TriPlane(TriPlaneEncoder),
    Hash3d(HashGrid),
}

impl GeometryEncoder {
    /// Encoders with (near) equal parameter counts: the tri-plane splits a
    /// `2^log2` table three ways, the 3D grid keeps it whole.
    pub fn with_budget(
        backbone: Backbone,
        template: HashGridConfig,
        table_size_log2: u32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match backbone {
            Backbone::Trihash => {
                let cfg = TriPlaneEncoder::budget_config(template, table_size_log2);
                Ok(GeometryEncoder::TriPlane(TriPlaneEncoder::new(cfg, rng)?))
            }
            Backbone::Hash3d => {
                let cfg = HashGridConfig {
                    dims: 3,
                    table_size: 1 << table_size_log2,
                    ..template
                };
                Ok(GeometryEncoder::Hash3d(HashGrid::new(cfg, rng)?))
            }
        }
    }

    pub fn backbone(&self) -> Backbone {
        match self {
            GeometryEncoder::TriPlane(_) => Backbone::Trihash,
            GeometryEncoder::Hash3d(_) => Backbone::Hash3d,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            GeometryEncoder::TriPlane(t) => t.output_dim(),
            GeometryEncoder::Hash3d(g) => g.output_dim(),
        }
    }

    pub fn encode_into(&self, x: &[f64; 3], out: &mut [f64]) -> bool {
        match self {
            GeometryEncoder::TriPlane(t) => t.encode_into(x, out),
            GeometryEncoder::Hash3d(g) => g.encode_into(x, out),
        }
    }

    pub fn encode(&self, x: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out);
        out
    }

    pub fn backward_into(
        &self,
        x: &[f64; 3],
        upstream: &[f64],
        grads: &mut GeometryEncoder,
        dx: Option<&mut [f64; 3]>,
    ) {
        match (self, grads) {
            (GeometryEncoder::TriPlane(t), GeometryEncoder::TriPlane(g)) => t.backward_into(x, upstream, g, dx),
            (GeometryEncoder::Hash3d(h), GeometryEncoder::Hash3d(g)) => match dx {
                Some(dx) => h.backward_into(x, upstream, &mut g.tables, Some(&mut dx[..])),
                None => h.backward_into(x, upstream, &mut g.tables, None),
            },
            _ => panic!("gradient buffer backbone does not match encoder"),
        }
    }

    pub fn cell_signature(&self, x: &[f64; 3]) -> Vec<u32> {
        match self {
            GeometryEncoder::TriPlane(t) => t.cell_signature(x),
            GeometryEncoder::Hash3d(g) => g.cell_signature(x),
        }
    }
}

impl Parameters for GeometryEncoder {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        match self {
            GeometryEncoder::TriPlane(t) => t.visit(f),
            GeometryEncoder::Hash3d(g) => g.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        match self {
            GeometryEncoder::TriPlane(t) => t.visit_mut(f),
            GeometryEncoder::Hash3d(g) => g.visit_mut(f),
        }
    }
}

pub const OCCUPANCY_DECAY: f64 = 0.95;
pub const OCCUPANCY_REFRESH: usize = 16;

/// Default occupancy threshold: optical thickness 0.01 over one default
/// sample spacing (box diagonal extent 2 split into 16 samples).
pub const DEFAULT_OCCUPANCY_THRESHOLD: f64 = 0.01 / (2.0 / 16.0);

/// Binary occupancy over the scene box, backed by a decaying density cache.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub threshold: f64,
    pub aabb: Aabb,
    pub density_cache: Vec<f64>,
}

impl OccupancyGrid {
    /// Empty cache: nothing is occupied until an update sees density.
    pub fn new(resolution: usize, threshold: f64, aabb: Aabb) -> Result<Self> {
        if resolution == 0 || resolution > 1024 {
            return Err(Error::Config(format!("occupancy resolution {resolution} out of range")));
        }
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::Config(format!("occupancy threshold {threshold} must be positive")));
        }
        Ok(OccupancyGrid {
            resolution,
            threshold,
            aabb,
            density_cache: vec![0.0; resolution * resolution * resolution],
        })
    }

    /// Every cell marked occupied; used before the first refresh.
    pub fn all_occupied(resolution: usize, threshold: f64, aabb: Aabb) -> Result<Self> {
        let mut g = OccupancyGrid::new(resolution, threshold, aabb)?;
        g.density_cache.fill(threshold * 1e6);
        Ok(g)
    }

    pub fn cell_count(&self) -> usize {
        self.density_cache.len()
    }

    pub fn index(&self, cell: [usize; 3]) -> usize {
        (cell[2] * self.resolution + cell[1]) * self.resolution + cell[0]
    }

    pub fn is_occupied(&self, cell: [usize; 3]) -> bool {
        self.density_cache[self.index(cell)] >= self.threshold
    }

    pub fn occupied_count(&self) -> usize {
        self.density_cache.iter().filter(|&&d| d >= self.threshold).count()
    }

    /// Cell containing a world point (clamped to the box).
    pub fn cell_of(&self, x: &Vec3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let u = (x[k] - self.aabb.min[k]) / (self.aabb.max[k] - self.aabb.min[k]);
            c[k] = ((u * self.resolution as f64).floor().max(0.0) as usize).min(self.resolution - 1);
        }
        c
    }

    /// Normalized `[0,1]^3` center of a cell, optionally jittered within it.
    pub fn cell_point(&self, cell: [usize; 3], jitter: Option<[f64; 3]>) -> [f64; 3] {
        let j = jitter.unwrap_or([0.5; 3]);
        let r = self.resolution as f64;
        [
            (cell[0] as f64 + j[0]) / r,
            (cell[1] as f64 + j[1]) / r,
            (cell[2] as f64 + j[2]) / r,
        ]
    }

    /// One maintenance pass: `cache <- max(decay * cache, fresh)`, where
    /// `fresh` is whatever `density` returns for each cell's (jittered,
    /// normalized) sample point. Callers fold the max over conditions into
    /// `density`.
    pub fn update(
        &mut self,
        rng: Option<&mut dyn rand::RngCore>,
        density: impl FnOnce(&[[f64; 3]]) -> Vec<f64>,
    ) {
        let n = self.resolution;
        let mut points = Vec::with_capacity(self.cell_count());
        let mut rng = rng;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let jitter = rng.as_deref_mut().map(|r| {
                        [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]
                    });
                    points.push(self.cell_point([x, y, z], jitter));
                }
            }
        }
        let fresh = density(&points);
        assert_eq!(fresh.len(), points.len(), "density query returned wrong count");
        for (c, f) in self.density_cache.iter_mut().zip(fresh) {
            let f = if f.is_finite() { f.max(0.0) } else { 0.0 };
            *c = (*c * OCCUPANCY_DECAY).max(f);
        }
    }

    /// Occupied `[t0, t1]` intervals along the ray within its bounds,
    /// adjacent cells merged.
    pub fn occupied_segments(&self, ray: &Ray) -> Vec<(f64, f64)> {
        let n = self.resolution;
        let cell_size: Vec3 = self.aabb.extent() / n as f64;
        let start = ray.at(ray.t_near);
        let mut cell = self.cell_of(&start);
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            let d = ray.dir[k];
            if d > 0.0 {
                step[k] = 1;
                let boundary = self.aabb.min[k] + (cell[k] + 1) as f64 * cell_size[k];
                t_max[k] = ray.t_near + (boundary - start[k]) / d;
                t_delta[k] = cell_size[k] / d;
            } else if d < 0.0 {
                step[k] = -1;
                let boundary = self.aabb.min[k] + cell[k] as f64 * cell_size[k];
                t_max[k] = ray.t_near + (boundary - start[k]) / d;
                t_delta[k] = -cell_size[k] / d;
            }
        }
        let mut segments: Vec<(f64, f64)> = Vec::new();
        let mut t = ray.t_near;
        while t < ray.t_far {
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            let next = t_max[axis].min(ray.t_far).max(t);
            if self.is_occupied(cell) && next > t {
                match segments.last_mut() {
                    Some(last) if last.1 == t => last.1 = next,
                    _ => segments.push((t, next)),
                }
            }
            t = next;
            if t >= ray.t_far {
                break;
            }
            let c = cell[axis] as i64 + step[axis];
            if c < 0 || c >= n as i64 {
                // Leaving the grid before t_far is rounding; stay in the
                // boundary cell.
                t_max[axis] = f64::INFINITY;
                continue;
            }
            cell[axis] = c as usize;
            t_max[axis] += t_delta[axis];
        }
        segments
    }
}

/// Position of sample `i` of `n` inside its stratum, as a fraction of the
/// total length. `jitter` in `[0, 1)`; 0.5 gives bin midpoints.
pub(crate) fn stratum_fraction(i: usize, n: usize, jitter: f64) -> f64 {
    (i as f64 + jitter) / n as f64
}

/// Up to `n` stratified samples restricted to occupied cells, as `(t, delta)`
/// pairs sorted by `t`. A sample's delta runs to the next sample in the same
/// occupied segment, or to the end of its segment. With every cell occupied
/// this reproduces plain stratified sampling over `[t_near, t_far]`.
pub fn skip_empty(
    ray: &Ray,
    grid: &OccupancyGrid,
    n: usize,
    mut jitter: Option<&mut dyn rand::RngCore>,
) -> Vec<(f64, f64)> {
    assert!(n >= 1, "sample count must be positive");
    let segments = grid.occupied_segments(ray);
    let total: f64 = segments.iter().map(|s| s.1 - s.0).sum();
    if segments.is_empty() || total <= 0.0 {
        return Vec::new();
    }
    let mut out: Vec<(f64, f64, usize)> = Vec::with_capacity(n);
    let mut seg = 0;
    let mut acc = 0.0;
    for i in 0..n {
        let j = match jitter.as_deref_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let s = total * stratum_fraction(i, n, j);
        while seg + 1 < segments.len() && s >= acc + (segments[seg].1 - segments[seg].0) {
            acc += segments[seg].1 - segments[seg].0;
            seg += 1;
        }
        let t = (segments[seg].0 + (s - acc)).min(segments[seg].1);
        out.push((t, 0.0, seg));
    }
    for i in 0..out.len() {
        let (t, _, s) = out[i];
        let end = match out.get(i + 1) {
            Some(&(tn, _, sn)) if sn == s => tn,
            _ => segments[s].1,
        };
        out[i].1 = (end - t).max(0.0);
    }
    out.into_iter().map(|(t, d, _)| (t, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashenc::INIT_SCALE;
    use crate::render::stratified_samples;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HashGridConfig {
        HashGridConfig::new(2, 4, 2, 1 << 10, 4, 32).unwrap()
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let mut enc = TriPlaneEncoder::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        enc.fill(0.0);
        assert_eq!(enc.encode(&[0.2, 0.5, 0.9]), vec![0.0; 24]);
    }

    #[test]
    fn default_output_is_42_channels() {
        let enc = TriPlaneEncoder::new(HashGridConfig::planar_default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(enc.output_dim(), 42);
        assert_eq!(enc.encode(&[0.5; 3]).len(), 42);
    }

    #[test]
    fn blocks_depend_only_on_their_plane() {
        let enc = TriPlaneEncoder::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let a = enc.encode(&[0.31, 0.52, 0.13]);
        let z = enc.encode(&[0.31, 0.52, 0.77]);
        let x = enc.encode(&[0.91, 0.52, 0.13]);
        let y = enc.encode(&[0.31, 0.02, 0.13]);
        assert_eq!(a[..8], z[..8]);
        assert_eq!(a[8..16], x[8..16]);
        assert_eq!(a[16..], y[16..]);
        assert_ne!(a[8..], z[8..]);
    }

    #[test]
    fn xy_only_upstream_gives_zero_z_gradient() {
        let enc = TriPlaneEncoder::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut grads = enc.zeros_like();
        let mut up = vec![0.0; 24];
        up[..8].fill(1.0);
        let dx = enc.encode_backward(&[0.3, 0.6, 0.45], &up, &mut grads);
        assert_eq!(dx[2], 0.0);
        assert!(dx[0] != 0.0 && dx[1] != 0.0);
        let mut grads = enc.zeros_like();
        let dx = enc.encode_backward(&[0.3, 0.6, 0.45], &[0.0; 24], &mut grads);
        assert_eq!(dx, [0.0; 3]);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn equal_budget_parameter_counts() {
        let template = HashGridConfig::planar_default();
        for b in [12u32, 14, 16, 19] {
            let mut rng = ChaCha8Rng::seed_from_u64(b as u64);
            let tri = GeometryEncoder::with_budget(Backbone::Trihash, template, b, &mut rng).unwrap();
            let h3 = GeometryEncoder::with_budget(Backbone::Hash3d, template, b, &mut rng).unwrap();
            let (a, c) = (tri.param_count() as f64, h3.param_count() as f64);
            assert!((a / c - 1.0).abs() < 0.02, "b={b}: {a} vs {c}");
        }
    }

    #[test]
    fn init_range() {
        let enc = TriPlaneEncoder::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(enc.max_abs() <= INIT_SCALE);
    }

    fn frontal_ray() -> Ray {
        Ray::new(Vec3::new(0.1, -0.2, -3.0), Vec3::new(0.0, 0.0, 1.0), 2.0, 4.0).unwrap()
    }

    #[test]
    fn zero_field_leaves_everything_empty() {
        let mut g = OccupancyGrid::new(8, DEFAULT_OCCUPANCY_THRESHOLD, Aabb::unit()).unwrap();
        for _ in 0..3 {
            g.update(None, |pts| vec![0.0; pts.len()]);
        }
        assert_eq!(g.occupied_count(), 0);
        assert!(skip_empty(&frontal_ray(), &g, 16, None).is_empty());
    }

    #[test]
    fn large_field_fills_everything() {
        let mut g = OccupancyGrid::new(8, DEFAULT_OCCUPANCY_THRESHOLD, Aabb::unit()).unwrap();
        g.update(None, |pts| vec![1e3; pts.len()]);
        assert_eq!(g.occupied_count(), g.cell_count());
    }

    #[test]
    fn cache_decays_and_fresh_density_reoccupies() {
        let mut g = OccupancyGrid::new(2, 1.0, Aabb::unit()).unwrap();
        g.update(None, |pts| vec![1.0; pts.len()]);
        assert_eq!(g.occupied_count(), 8);
        g.update(None, |pts| vec![0.0; pts.len()]);
        assert_eq!(g.occupied_count(), 0);
        assert!(g.density_cache.iter().all(|&d| (d - 0.95).abs() < 1e-15));
        // Fresh density above the decayed cache wins.
        g.update(None, |pts| pts.iter().map(|p| if p[0] > 0.5 { 2.0 } else { 0.0 }).collect());
        assert_eq!(g.occupied_count(), 4);
    }

    #[test]
    fn half_space_matches_brute_force_cells() {
        let res = 16;
        let mut g = OccupancyGrid::new(res, 0.5, Aabb::unit()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // density 1 where world x + 0.5 y > 0.1
        let plane = |p: &[f64; 3]| {
            let w = [p[0] * 2.0 - 1.0, p[1] * 2.0 - 1.0];
            if w[0] + 0.5 * w[1] > 0.1 {
                1.0
            } else {
                0.0
            }
        };
        g.update(Some(&mut rng), |pts| pts.iter().map(plane).collect());
        let h = 2.0 / res as f64;
        for z in 0..res {
            for y in 0..res {
                for x in 0..res {
                    // Signed distance of the cell center to the plane, in world units.
                    let cx = -1.0 + (x as f64 + 0.5) * h;
                    let cy = -1.0 + (y as f64 + 0.5) * h;
                    let d = (cx + 0.5 * cy - 0.1) / 1.25f64.sqrt();
                    let occ = g.is_occupied([x, y, z]);
                    if d > h {
                        assert!(occ, "cell {x},{y},{z} should be occupied");
                    } else if d < -h {
                        assert!(!occ, "cell {x},{y},{z} should be empty");
                    }
                }
            }
        }
    }

    #[test]
    fn all_occupied_matches_stratified_sampling() {
        let g = OccupancyGrid::all_occupied(16, 1.0, Aabb::unit()).unwrap();
        let ray = crate::geom::ray_for_pixel(
            &crate::geom::CameraIntrinsics::centered(64, 50.0),
            &crate::geom::HeadPose::new(crate::geom::Mat3::identity(), Vec3::new(0.3, -0.4, -3.0)).unwrap(),
            (40.3, 21.7),
            &Aabb::unit(),
        )
        .unwrap();
        for seed in [None, Some(3u64)] {
            let mut r1 = seed.map(ChaCha8Rng::seed_from_u64);
            let mut r2 = seed.map(ChaCha8Rng::seed_from_u64);
            let a = skip_empty(&ray, &g, 16, r1.as_mut().map(|r| r as &mut dyn rand::RngCore));
            let b = stratified_samples(&ray, 16, r2.as_mut().map(|r| r as &mut dyn rand::RngCore));
            let ta: Vec<f64> = a.iter().map(|s| s.0).collect();
            assert_eq!(ta, b.t);
            let da: Vec<f64> = a.iter().map(|s| s.1).collect();
            assert_eq!(da, b.deltas);
        }
    }

    #[test]
    fn single_slab_confines_samples() {
        let res = 8;
        let mut g = OccupancyGrid::new(res, 0.5, Aabb::unit()).unwrap();
        // Occupy the z-slab of cells with index 5 (world z in [0.25, 0.5]).
        g.update(None, |pts| {
            pts.iter()
                .map(|p| if (p[2] * res as f64).floor() as usize == 5 { 1.0 } else { 0.0 })
                .collect()
        });
        let ray = frontal_ray();
        // Interval oracle: the ray travels along +z from z=-1 at t=2.
        let (lo, hi) = (2.0 + 1.25, 2.0 + 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = skip_empty(&ray, &g, 16, Some(&mut rng));
        assert_eq!(s.len(), 16);
        for w in s.windows(2) {
            assert!(w[0].0 <= w[1].0);
        }
        for &(t, d) in &s {
            assert!(t >= lo - 1e-12 && t <= hi + 1e-12, "t={t}");
            assert!(d >= 0.0);
            assert!(g.is_occupied(g.cell_of(&ray.at(t))));
        }
        let total: f64 = s.iter().map(|x| x.1).sum::<f64>() + (s[0].0 - lo);
        assert!((total - 0.25).abs() < 1e-12);
    }

    #[test]
    fn emitted_samples_land_in_occupied_cells() {
        let res = 12;
        let mut g = OccupancyGrid::new(res, 0.5, Aabb::unit()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        g.update(None, |pts| pts.iter().map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect());
        let cam = crate::geom::CameraIntrinsics::centered(32, 30.0);
        let pose = crate::geom::HeadPose::look_at(Vec3::new(1.0, 2.0, -3.0), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0)).unwrap();
        let mut checked = 0;
        for row in 0..32 {
            for col in 0..32 {
                let Some(ray) = crate::geom::ray_for_pixel(&cam, &pose, cam.pixel_center(col, row), &Aabb::unit()) else {
                    continue;
                };
                let samples = skip_empty(&ray, &g, 16, Some(&mut rng));
                assert!(samples.len() <= 16);
                for &(t, _) in &samples {
                    assert!(g.is_occupied(g.cell_of(&ray.at(t))));
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000);
    }
}
