//! Hash-collision counting and the image-size / samples-per-ray sweep
//! comparing a single 3D hash grid with the tri-plane factorization.
//!
//! A collision is counted per table slot as `max(0, n_s - 1)`, where `n_s`
//! is the number of distinct lattice vertices (all interpolation corners of
//! all queries) hashed to that slot.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fieldrepr::TriPlaneEncoder;
use crate::hashenc::{hash_vertex, HashGridConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Hash3d,
    Trihash,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Hash3d => "hash3d",
            GridKind::Trihash => "trihash",
        }
    }
}

/// Plane names in the tri-plane channel order.
pub const PLANES: [&str; 3] = ["xy", "yz", "xz"];
const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [1, 2], [0, 2]];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaneCount {
    pub plane: &'static str,
    pub distinct_vertices: u64,
    pub collisions: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollisionReport {
    pub grid: GridKind,
    pub resolution: u32,
    /// Entries per table (per plane for the tri-plane).
    pub table_size: usize,
    pub distinct_vertices: u64,
    pub occupied_slots: u64,
    pub collisions: u64,
    /// XY, YZ, XZ counts for the tri-plane; empty otherwise.
    pub planes: Vec<PlaneCount>,
}

/// Table size per grid for a `2^log2` entry budget: whole for the 3D grid,
/// split three ways for the tri-plane.
pub fn table_size_for(kind: GridKind, table_size_log2: u32) -> usize {
    match kind {
        GridKind::Hash3d => 1 << table_size_log2,
        GridKind::Trihash => TriPlaneEncoder::budget_config(HashGridConfig::planar_default(), table_size_log2).table_size,
    }
}

const COORD_BITS: u32 = 21;

fn pack(v: &[u32]) -> u64 {
    v.iter().fold(0u64, |acc, &c| (acc << COORD_BITS) | c as u64)
}

fn unpack(key: u64, dims: usize) -> [u32; 3] {
    let mask = (1u64 << COORD_BITS) - 1;
    let mut out = [0u32; 3];
    for k in 0..dims {
        out[dims - 1 - k] = ((key >> (COORD_BITS * k as u32)) & mask) as u32;
    }
    out
}

/// Sorted distinct interpolation corners of `points` projected on `axes`.
fn distinct_corners(points: &[[f64; 3]], axes: &[usize], resolution: u32) -> Vec<u64> {
    let dims = axes.len();
    let res = resolution as f64;
    let mut keys: Vec<u64> = points
        .par_chunks(4096)
        .flat_map_iter(|chunk| {
            let mut out = Vec::with_capacity(chunk.len() << dims);
            for p in chunk {
                let mut cell = [0u32; 3];
                for (k, &a) in axes.iter().enumerate() {
                    let u = p[a].clamp(0.0, 1.0);
                    cell[k] = ((u * res).floor() as u32).min(resolution - 1);
                }
                for corner in 0..(1usize << dims) {
                    let mut v = [0u32; 3];
                    for k in 0..dims {
                        v[k] = cell[k] + ((corner >> k) & 1) as u32;
                    }
                    out.push(pack(&v[..dims]));
                }
            }
            out
        })
        .collect();
    keys.par_sort_unstable();
    keys.dedup();
    keys
}

fn count_slots(keys: &[u64], dims: usize, table_size: usize) -> (u64, u64) {
    let mut counts = vec![0u32; table_size];
    for &k in keys {
        let v = unpack(k, dims);
        counts[hash_vertex(&v[..dims], table_size)] += 1;
    }
    let occupied = counts.iter().filter(|&&c| c > 0).count() as u64;
    (keys.len() as u64 - occupied, occupied)
}

/// Collisions of one lookup step at a single level resolution.
pub fn count_collisions(kind: GridKind, table_size_log2: u32, points: &[[f64; 3]], resolution: u32) -> Result<CollisionReport> {
    if resolution == 0 || resolution >= (1 << (COORD_BITS - 1)) {
        return Err(Error::Config(format!("collision resolution {resolution} out of range")));
    }
    if table_size_log2 > 30 {
        return Err(Error::Config(format!("table size 2^{table_size_log2} too large")));
    }
    let table_size = table_size_for(kind, table_size_log2);
    match kind {
        GridKind::Hash3d => {
            let keys = distinct_corners(points, &[0, 1, 2], resolution);
            let (collisions, occupied) = count_slots(&keys, 3, table_size);
            Ok(CollisionReport {
                grid: kind,
                resolution,
                table_size,
                distinct_vertices: keys.len() as u64,
                occupied_slots: occupied,
                collisions,
                planes: Vec::new(),
            })
        }
        GridKind::Trihash => {
            let mut report = CollisionReport {
                grid: kind,
                resolution,
                table_size,
                distinct_vertices: 0,
                occupied_slots: 0,
                collisions: 0,
                planes: Vec::new(),
            };
            for (name, axes) in PLANES.into_iter().zip(PLANE_AXES) {
                let keys = distinct_corners(points, &axes, resolution);
                let (collisions, occupied) = count_slots(&keys, 2, table_size);
                report.distinct_vertices += keys.len() as u64;
                report.occupied_slots += occupied;
                report.collisions += collisions;
                report.planes.push(PlaneCount {
                    plane: name,
                    distinct_vertices: keys.len() as u64,
                    collisions,
                });
            }
            Ok(report)
        }
    }
}

/// Query points of an `r × r` frontal orthographic camera looking along +z
/// through the unit cube, `n` midpoint-stratified depths per ray.
pub fn frontal_points(r: u32, n: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(r as usize * r as usize * n);
    for j in 0..r {
        for i in 0..r {
            for k in 0..n {
                pts.push([
                    (i as f64 + 0.5) / r as f64,
                    (j as f64 + 0.5) / r as f64,
                    (k as f64 + 0.5) / n as f64,
                ]);
            }
        }
    }
    pts
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub encoder: GridKind,
    pub r: u32,
    pub n: usize,
    pub level_res: u32,
    pub table_size: usize,
    pub distinct_vertices: u64,
    pub collisions: u64,
    /// `all`, or one of [`PLANES`] for tri-plane breakdown rows.
    pub plane: &'static str,
}

/// Collision counts for both encoders over every `(R, N)` pair.
pub fn complexity_sweep(rs: &[u32], ns: &[usize], level_res: u32, table_size_log2: u32) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &r in rs {
        for &n in ns {
            if r == 0 || n == 0 {
                return Err(Error::Config("sweep sizes must be positive".into()));
            }
            let pts = frontal_points(r, n);
            for kind in [GridKind::Hash3d, GridKind::Trihash] {
                let rep = count_collisions(kind, table_size_log2, &pts, level_res)?;
                let row = |plane, distinct_vertices, collisions| SweepRow {
                    encoder: kind,
                    r,
                    n,
                    level_res,
                    table_size: rep.table_size,
                    distinct_vertices,
                    collisions,
                    plane,
                };
                rows.push(row("all", rep.distinct_vertices, rep.collisions));
                for p in &rep.planes {
                    rows.push(row(p.plane, p.distinct_vertices, p.collisions));
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[SweepRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "encoder,R,N,level_res,table_size,distinct_vertices,collisions,plane")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.encoder.name(),
            r.r,
            r.n,
            r.level_res,
            r.table_size,
            r.distinct_vertices,
            r.collisions,
            r.plane
        )?;
    }
    Ok(())
}

/// Least-squares `(slope, intercept)` of `y` on `x`. Errors on a constant
/// `x` or `y` series.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("fit needs at least two points".into()));
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config("degenerate fit: constant series".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

fn totals(rows: &[SweepRow], kind: GridKind, pick: impl Fn(&SweepRow) -> bool) -> Vec<&SweepRow> {
    rows.iter().filter(|r| r.encoder == kind && r.plane == "all" && pick(r)).collect()
}

/// Slope of total collisions against `N` at fixed `R`.
pub fn slope_vs_n(rows: &[SweepRow], kind: GridKind, r: u32) -> Result<f64> {
    let sel = totals(rows, kind, |row| row.r == r);
    let x: Vec<f64> = sel.iter().map(|s| s.n as f64).collect();
    let y: Vec<f64> = sel.iter().map(|s| s.collisions as f64).collect();
    Ok(linear_fit(&x, &y)?.0)
}

/// Exponent `k` of `collisions ∝ R^k` at fixed `N` (log-log fit).
pub fn exponent_vs_r(rows: &[SweepRow], kind: GridKind, n: usize) -> Result<f64> {
    let sel = totals(rows, kind, |row| row.n == n);
    if sel.iter().any(|s| s.collisions == 0) {
        return Err(Error::Config("degenerate fit: zero collisions".into()));
    }
    let x: Vec<f64> = sel.iter().map(|s| (s.r as f64).ln()).collect();
    let y: Vec<f64> = sel.iter().map(|s| (s.collisions as f64).ln()).collect();
    Ok(linear_fit(&x, &y)?.0)
}

/// `total(3D) / total(tri-plane)` at one `(R, N)`.
pub fn collision_ratio(rows: &[SweepRow], r: u32, n: usize) -> Option<f64> {
    let get = |k| totals(rows, k, |row| row.r == r && row.n == n).first().map(|s| s.collisions as f64);
    let (a, b) = (get(GridKind::Hash3d)?, get(GridKind::Trihash)?);
    (b > 0.0).then(|| a / b)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub r: u32,
    pub n: usize,
    pub ratio: f64,
    pub slope_ratio: f64,
    pub exponent_3d: f64,
}

/// Headline numbers of a sweep that contains `(r, n)`, several `N` at `r`
/// and several `R` at `n`.
pub fn summarize(rows: &[SweepRow], r: u32, n: usize) -> Result<SweepSummary> {
    let ratio = collision_ratio(rows, r, n).ok_or_else(|| Error::Config(format!("sweep lacks R={r}, N={n}")))?;
    let slope_ratio = slope_vs_n(rows, GridKind::Hash3d, r)? / slope_vs_n(rows, GridKind::Trihash, r)?;
    Ok(SweepSummary {
        r,
        n,
        ratio,
        slope_ratio,
        exponent_3d: exponent_vs_r(rows, GridKind::Hash3d, n)?,
    })
}
