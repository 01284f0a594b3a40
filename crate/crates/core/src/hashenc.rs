//! Multiresolution hashed feature grids in two and three dimensions.
//!
//! Every level scales the normalized coordinate by its resolution `N_l`,
//! looks up the `2^dims` surrounding lattice vertices through an XOR-prime
//! spatial hash and interpolates them multilinearly. Levels are concatenated
//! level-major, features innermost. Levels are always hashed, even when the
//! dense lattice would fit in the table, so the collision analysis sees
//! exactly the lookups the field performs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, Parameters};

/// Per-axis hash multipliers (the first axis is left unscrambled).
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

pub const INIT_SCALE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub dims: usize,
    pub levels: usize,
    pub features: usize,
    /// Entries per level. Usually a power of two, but the tri-plane split of
    /// a power-of-two budget is not, so any positive size is accepted.
    pub table_size: usize,
    pub res_min: u32,
    pub res_max: u32,
}

impl HashGridConfig {
    pub fn new(
        dims: usize,
        levels: usize,
        features: usize,
        table_size: usize,
        res_min: u32,
        res_max: u32,
    ) -> Result<Self> {
        let cfg = HashGridConfig {
            dims,
            levels,
            features,
            table_size,
            res_min,
            res_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The per-plane configuration used for the head: 14 levels, one feature
    /// per entry, resolutions 64 to 512, 2^14 entries.
    pub fn planar_default() -> Self {
        HashGridConfig {
            dims: 2,
            levels: 14,
            features: 1,
            table_size: 1 << 14,
            res_min: 64,
            res_max: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dims != 2 && self.dims != 3 {
            return fail(format!("hash grid dims must be 2 or 3, got {}", self.dims));
        }
        if self.levels == 0 || self.features == 0 || self.table_size == 0 {
            return fail("hash grid levels, features and table size must be positive".into());
        }
        if self.res_min == 0 || self.res_min > self.res_max {
            return fail(format!(
                "hash grid resolutions must satisfy 1 <= min <= max, got {}..{}",
                self.res_min, self.res_max
            ));
        }
        // Lattice coordinates (up to N_l) must fit the u32 hash domain.
        if self.res_max > (1 << 24) {
            return fail(format!("hash grid resolution {} too large", self.res_max));
        }
        if self.table_size > (1 << 30) {
            return fail(format!("hash table size {} too large", self.table_size));
        }
        Ok(())
    }

    /// `N_l = floor(res_min * b^l)` with `b = (res_max / res_min)^(1 / (L - 1))`.
    pub fn resolutions(&self) -> Vec<u32> {
        if self.levels == 1 {
            return vec![self.res_min];
        }
        let growth = ((self.res_max as f64 / self.res_min as f64).ln() / (self.levels - 1) as f64).exp();
        (0..self.levels)
            .map(|l| {
                let r = self.res_min as f64 * growth.powi(l as i32);
                // Guard against b^(L-1) landing a hair under res_max/res_min.
                ((r + 1e-9).floor() as u32).clamp(self.res_min, self.res_max)
            })
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.features
    }
}

/// XOR-prime spatial hash of a lattice vertex, reduced modulo the table size.
pub fn hash_vertex(v: &[u32], table_size: usize) -> usize {
    let mut h: u32 = 0;
    for (c, p) in v.iter().zip(HASH_PRIMES) {
        h ^= c.wrapping_mul(p);
    }
    h as usize % table_size
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    resolutions: Vec<u32>,
    /// `levels * table_size * features` entries, level-major.
    pub tables: Vec<f64>,
}

/// Corner lookup of one level: slots, weights and the fractional position.
#[derive(Clone, Copy, Debug)]
struct LevelLookup {
    slots: [usize; 8],
    weights: [f64; 8],
    frac: [f64; 3],
}

impl HashGrid {
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        Ok(HashGrid {
            resolutions: config.resolutions(),
            tables: vec![0.0; config.param_count()],
            config,
        })
    }

    /// Entries drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn new(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut grid = HashGrid::zeros(config)?;
        for v in grid.tables.iter_mut() {
            *v = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        Ok(grid)
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn entry_index(&self, level: usize, slot: usize) -> usize {
        (level * self.config.table_size + slot) * self.config.features
    }

    /// Clamp `u` into the unit box; returns whether anything moved.
    fn clamp_coords(&self, u: &[f64]) -> ([f64; 3], [bool; 3]) {
        let mut c = [0.0; 3];
        let mut clamped = [false; 3];
        for k in 0..self.config.dims {
            let v = if u[k].is_nan() { 0.0 } else { u[k] };
            c[k] = v.clamp(0.0, 1.0);
            clamped[k] = c[k] != v;
        }
        (c, clamped)
    }

    fn lookup(&self, level: usize, u: &[f64; 3]) -> LevelLookup {
        let dims = self.config.dims;
        let res = self.resolutions[level];
        let mut cell = [0u32; 3];
        let mut frac = [0.0; 3];
        for k in 0..dims {
            let pos = u[k] * res as f64;
            let c = (pos.floor() as u32).min(res - 1);
            cell[k] = c;
            frac[k] = pos - c as f64;
        }
        let mut out = LevelLookup {
            slots: [0; 8],
            weights: [0.0; 8],
            frac,
        };
        for corner in 0..(1usize << dims) {
            let mut v = [0u32; 3];
            let mut w = 1.0;
            for k in 0..dims {
                let bit = (corner >> k) & 1;
                v[k] = cell[k] + bit as u32;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            out.slots[corner] = hash_vertex(&v[..dims], self.config.table_size);
            out.weights[corner] = w;
        }
        out
    }

    /// Interpolation weights of every level's corners; each level sums to 1.
    pub fn corner_weights(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let (c, _) = self.clamp_coords(u);
        (0..self.config.levels)
            .map(|l| self.lookup(l, &c).weights[..1 << self.config.dims].to_vec())
            .collect()
    }

    /// Lattice cell index per level and axis; changes exactly where the
    /// encoding has a kink.
    pub fn cell_signature(&self, u: &[f64]) -> Vec<u32> {
        let (c, _) = self.clamp_coords(u);
        let mut sig = Vec::with_capacity(self.config.levels * self.config.dims);
        for &res in &self.resolutions {
            for &v in c.iter().take(self.config.dims) {
                sig.push(((v * res as f64).floor() as u32).min(res - 1));
            }
        }
        sig
    }

    pub fn encode(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(u, &mut out);
        out
    }

    /// Writes `L * F` features into `out`; returns true when `u` was clamped.
    pub fn encode_into(&self, u: &[f64], out: &mut [f64]) -> bool {
        debug_assert_eq!(u.len(), self.config.dims);
        let (c, clamped) = self.clamp_coords(u);
        let f_dim = self.config.features;
        let corners = 1usize << self.config.dims;
        for level in 0..self.config.levels {
            let lk = self.lookup(level, &c);
            let dst = &mut out[level * f_dim..(level + 1) * f_dim];
            dst.fill(0.0);
            for corner in 0..corners {
                let base = self.entry_index(level, lk.slots[corner]);
                let w = lk.weights[corner];
                for (d, t) in dst.iter_mut().zip(&self.tables[base..base + f_dim]) {
                    *d += w * t;
                }
            }
        }
        clamped.iter().any(|&c| c)
    }

    /// Adjoint of [`encode`](Self::encode): accumulates `weight * upstream`
    /// into `grads.tables` and returns `dL/du` (zero along clamped axes).
    pub fn encode_backward(&self, u: &[f64], upstream: &[f64], grads: &mut HashGrid) -> Vec<f64> {
        let mut du = vec![0.0; self.config.dims];
        self.backward_into(u, upstream, &mut grads.tables, Some(&mut du));
        du
    }

    pub fn backward_into(
        &self,
        u: &[f64],
        upstream: &[f64],
        grad_tables: &mut [f64],
        mut du: Option<&mut [f64]>,
    ) {
        let dims = self.config.dims;
        let f_dim = self.config.features;
        let corners = 1usize << dims;
        let (c, clamped) = self.clamp_coords(u);
        if let Some(du) = du.as_deref_mut() {
            du.fill(0.0);
        }
        for level in 0..self.config.levels {
            let g = &upstream[level * f_dim..(level + 1) * f_dim];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let lk = self.lookup(level, &c);
            let res = self.resolutions[level] as f64;
            for corner in 0..corners {
                let base = self.entry_index(level, lk.slots[corner]);
                let w = lk.weights[corner];
                for (t, gv) in grad_tables[base..base + f_dim].iter_mut().zip(g) {
                    *t += w * gv;
                }
                if let Some(du) = du.as_deref_mut() {
                    let dot: f64 = self.tables[base..base + f_dim]
                        .iter()
                        .zip(g)
                        .map(|(a, b)| a * b)
                        .sum();
                    if dot == 0.0 {
                        continue;
                    }
                    for k in 0..dims {
                        if clamped[k] {
                            continue;
                        }
                        // d(weight)/d(frac_k): replace factor k with +-1.
                        let mut dw = if (corner >> k) & 1 == 1 { 1.0 } else { -1.0 };
                        for j in 0..dims {
                            if j != k {
                                let bit = (corner >> j) & 1;
                                dw *= if bit == 1 { lk.frac[j] } else { 1.0 - lk.frac[j] };
                            }
                        }
                        du[k] += dot * dw * res;
                    }
                }
            }
        }
    }

    /// Slot used by `vertex` at `level`; exposed for collision analysis.
    pub fn slot(&self, vertex: &[u32]) -> usize {
        hash_vertex(vertex, self.config.table_size)
    }
}

impl Parameters for HashGrid {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        f(ParamGroup::Grid, &self.tables);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        f(ParamGroup::Grid, &mut self.tables);
    }
}
