//! The 2D deformable torso field, conditioned on projected key points.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::HeadPose;
use crate::hashenc::{HashGrid, HashGridConfig};
use crate::nets::dense::{Activation, DenseStack, DenseTape};
use crate::nets::pose::{adaptive_pose_encoding, adaptive_pose_encoding_backward, KeyPoints, PoseCode, POSE_CODE_DIM};
use crate::params::{ParamGroup, Parameters};

pub const TORSO_HIDDEN: usize = 64;
/// Deformed coordinates are clamped to this range before encoding.
pub const DEFORM_RANGE: (f64, f64) = (-0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorsoFieldConfig {
    pub grid: HashGridConfig,
}

impl Default for TorsoFieldConfig {
    fn default() -> Self {
        TorsoFieldConfig {
            grid: HashGridConfig {
                dims: 2,
                levels: 8,
                features: 2,
                table_size: 1 << 14,
                res_min: 16,
                res_max: 256,
            },
        }
    }
}

/// Pixel queries; each refers to one entry of `poses`.
#[derive(Clone, Debug, Default)]
pub struct TorsoBatch {
    /// Normalized pixel coordinates in `[0,1]^2`.
    pub pixels: Vec<[f64; 2]>,
    pub cond: Vec<u32>,
    pub poses: Vec<HeadPose>,
}

impl TorsoBatch {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TorsoField {
    pub keys: KeyPoints,
    /// `x_pixel ⊕ X̄_keys -> Δx`.
    pub deform_mlp: DenseStack,
    pub tex_grid: HashGrid,
    /// `H^t(x + Δx) -> (c_t, α)`.
    pub head_mlp: DenseStack,
}

#[derive(Clone, Debug)]
pub struct TorsoTape {
    pub codes: Vec<PoseCode>,
    pub deform_tape: DenseTape,
    /// Encoder coordinates `(clamp(x + Δx) + 0.5) / 2`.
    pub coords: Vec<[f64; 2]>,
    pub clamped: Vec<[bool; 2]>,
    pub head_tape: DenseTape,
}

impl TorsoTape {
    pub fn output(&self, i: usize) -> ([f64; 3], f64) {
        let o = &self.head_tape.output;
        ([o[(i, 0)], o[(i, 1)], o[(i, 2)]], o[(i, 3)])
    }
}

impl TorsoField {
    pub fn new(config: &TorsoFieldConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.grid.dims != 2 {
            return Err(Error::Config("torso texture grid must be 2D".into()));
        }
        let tex_grid = HashGrid::new(config.grid, rng)?;
        let mut deform_mlp = DenseStack::new(
            &[2 + POSE_CODE_DIM, TORSO_HIDDEN, TORSO_HIDDEN, 2],
            &[Activation::Relu, Activation::Relu, Activation::None],
            rng,
        );
        // Start from the identity warp.
        deform_mlp.layers.last_mut().expect("layers").weight.fill(0.0);
        let head_mlp = DenseStack::new(
            &[tex_grid.output_dim(), TORSO_HIDDEN, TORSO_HIDDEN, 4],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            rng,
        );
        Ok(TorsoField {
            keys: KeyPoints::default(),
            deform_mlp,
            tex_grid,
            head_mlp,
        })
    }

    pub fn config(&self) -> TorsoFieldConfig {
        TorsoFieldConfig {
            grid: *self.tex_grid.config(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Checkpoint(format!("torso field: {m}")));
        if !self.deform_mlp.dims_chain() || !self.head_mlp.dims_chain() {
            return bad("layers do not chain");
        }
        if self.deform_mlp.inputs() != 2 + POSE_CODE_DIM || self.deform_mlp.outputs() != 2 {
            return bad("deformation network shape");
        }
        if self.head_mlp.inputs() != self.tex_grid.output_dim() || self.head_mlp.outputs() != 4 {
            return bad("output network shape");
        }
        if self.tex_grid.config().dims != 2 {
            return bad("texture grid must be 2D");
        }
        Ok(())
    }

    pub fn pose_codes(&self, poses: &[HeadPose]) -> Result<Vec<PoseCode>> {
        poses.iter().map(|p| adaptive_pose_encoding(&self.keys, p)).collect()
    }

    pub fn forward(&self, batch: &TorsoBatch) -> Result<TorsoTape> {
        let codes = self.pose_codes(&batch.poses)?;
        self.forward_with_codes(batch, codes)
    }

    pub fn forward_with_codes(&self, batch: &TorsoBatch, codes: Vec<PoseCode>) -> Result<TorsoTape> {
        let n = batch.len();
        let mut din = Array2::zeros((n, 2 + POSE_CODE_DIM));
        for i in 0..n {
            let code = codes
                .get(batch.cond[i] as usize)
                .ok_or_else(|| Error::Config(format!("pixel {i} refers to missing pose {}", batch.cond[i])))?;
            din[(i, 0)] = batch.pixels[i][0];
            din[(i, 1)] = batch.pixels[i][1];
            for (k, v) in code.as_flattened().iter().enumerate() {
                din[(i, 2 + k)] = *v;
            }
        }
        let deform_tape = self.deform_mlp.forward_tape(din);
        if !deform_tape.output.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage: "torso deformation" });
        }
        let lf = self.tex_grid.output_dim();
        let mut feats = Array2::zeros((n, lf));
        let mut coords = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        let (lo, hi) = DEFORM_RANGE;
        for i in 0..n {
            let mut flag = [false; 2];
            let c: [f64; 2] = std::array::from_fn(|k| {
                let u = batch.pixels[i][k] + deform_tape.output[(i, k)];
                flag[k] = !(lo..=hi).contains(&u);
                (u.clamp(lo, hi) - lo) / (hi - lo)
            });
            self.tex_grid.encode_into(&c, feats.row_mut(i).into_slice().expect("row-major"));
            coords.push(c);
            clamped.push(flag);
        }
        let head_tape = self.head_mlp.forward_tape(feats);
        if !head_tape.output.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage: "torso output" });
        }
        Ok(TorsoTape {
            codes,
            deform_tape,
            coords,
            clamped,
            head_tape,
        })
    }

    /// Adjoint of [`forward`](Self::forward); `d_out` is `S × 4` over
    /// `(c_t, α)`. Key point and γ gradients flow through every pose.
    pub fn backward(&self, batch: &TorsoBatch, tape: &TorsoTape, d_out: &Array2<f64>, grads: &mut TorsoField) {
        let d_codes = self.backward_to_codes(batch, tape, d_out, grads);
        for (pose, d) in batch.poses.iter().zip(&d_codes) {
            if d.as_flattened().iter().any(|&v| v != 0.0) {
                let g = adaptive_pose_encoding_backward(&self.keys, pose, d);
                grads.keys.accumulate(&g.keys);
            }
        }
    }

    /// Backward down to the per-pose codes; returns `∂L/∂X̄` per pose.
    pub fn backward_to_codes(
        &self,
        batch: &TorsoBatch,
        tape: &TorsoTape,
        d_out: &Array2<f64>,
        grads: &mut TorsoField,
    ) -> Vec<PoseCode> {
        let n = batch.len();
        let d_feats = self.head_mlp.backward(&tape.head_tape, d_out, &mut grads.head_mlp);
        let scale = 1.0 / (DEFORM_RANGE.1 - DEFORM_RANGE.0);
        let mut d_delta = Array2::zeros((n, 2));
        for i in 0..n {
            let row = d_feats.row(i);
            let mut du = [0.0; 2];
            self.tex_grid
                .backward_into(&tape.coords[i], row.as_slice().expect("row-major"), &mut grads.tex_grid.tables, Some(&mut du));
            for k in 0..2 {
                if !tape.clamped[i][k] {
                    d_delta[(i, k)] = du[k] * scale;
                }
            }
        }
        let d_din = self.deform_mlp.backward(&tape.deform_tape, &d_delta, &mut grads.deform_mlp);
        let mut d_codes = vec![[[0.0; 2]; crate::nets::pose::NUM_KEYS]; batch.poses.len()];
        for i in 0..n {
            let dc = d_codes[batch.cond[i] as usize].as_flattened_mut();
            for (k, v) in d_din.slice(s![i, 2..]).iter().enumerate() {
                dc[k] += v;
            }
        }
        d_codes
    }

    /// One query: `(c_t, α)`.
    pub fn query(&self, x_pixel: [f64; 2], pose: &HeadPose) -> Result<([f64; 3], f64)> {
        let b = TorsoBatch {
            pixels: vec![x_pixel],
            cond: vec![0],
            poses: vec![*pose],
        };
        Ok(self.forward(&b)?.output(0))
    }
}

impl Parameters for TorsoField {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        self.keys.visit(f);
        self.deform_mlp.visit(f);
        self.tex_grid.visit(f);
        self.head_mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        self.keys.visit_mut(f);
        self.deform_mlp.visit_mut(f);
        self.tex_grid.visit_mut(f);
        self.head_mlp.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pose() -> HeadPose {
        HeadPose::identity().perturbed(0.1, -0.05, 0.02, Vec3::new(0.0, 0.1, -3.0)).unwrap()
    }

    #[test]
    fn zeroed_deformation_encodes_pixel_directly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tf = TorsoField::new(&TorsoFieldConfig::default(), &mut rng).unwrap();
        tf.deform_mlp.fill(0.0);
        let x = [0.3, 0.7];
        let (c, a) = tf.query(x, &pose()).unwrap();
        let u = [(x[0] + 0.5) / 2.0, (x[1] + 0.5) / 2.0];
        let out = tf.head_mlp.forward_one(&tf.tex_grid.encode(&u));
        assert_eq!([c[0], c[1], c[2], a], [out[0], out[1], out[2], out[3]]);
    }

    #[test]
    fn saturated_alpha_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tf = TorsoField::new(&TorsoFieldConfig::default(), &mut rng).unwrap();
        tf.head_mlp.layers.last_mut().unwrap().bias[3] = f64::NEG_INFINITY;
        let (_, a) = tf.query([0.5, 0.5], &pose()).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn matches_stage_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tf = TorsoField::new(&TorsoFieldConfig::default(), &mut rng).unwrap();
        for v in tf.deform_mlp.layers.last_mut().unwrap().weight.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        let p = pose();
        for _ in 0..10 {
            let x = [rng.random(), rng.random()];
            let code = adaptive_pose_encoding(&tf.keys, &p).unwrap();
            let mut din = x.to_vec();
            din.extend_from_slice(code.as_flattened());
            let dx = tf.deform_mlp.forward_one(&din);
            let u = [(x[0] + dx[0]).clamp(-0.5, 1.5), (x[1] + dx[1]).clamp(-0.5, 1.5)];
            let g = [(u[0] + 0.5) / 2.0, (u[1] + 0.5) / 2.0];
            let out = tf.head_mlp.forward_one(&tf.tex_grid.encode(&g));
            let (c, a) = tf.query(x, &p).unwrap();
            for k in 0..3 {
                assert!((c[k] - out[k]).abs() <= 1e-12);
            }
            assert!((a - out[3]).abs() <= 1e-12);
            assert!(c.iter().chain(std::iter::once(&a)).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn out_of_range_deformation_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tf = TorsoField::new(&TorsoFieldConfig::default(), &mut rng).unwrap();
        tf.deform_mlp.layers.last_mut().unwrap().bias[0] = 5.0;
        let b = TorsoBatch {
            pixels: vec![[0.5, 0.5]],
            cond: vec![0],
            poses: vec![pose()],
        };
        let t = tf.forward(&b).unwrap();
        assert_eq!(t.clamped[0], [true, false]);
        assert_eq!(t.coords[0][0], 1.0);
    }

    #[test]
    fn degenerate_pose_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tf = TorsoField::new(&TorsoFieldConfig::default(), &mut rng).unwrap();
        let p = HeadPose::new(crate::geom::Mat3::identity(), Vec3::new(0.0, -0.5, 0.3)).unwrap();
        assert!(matches!(tf.query([0.5, 0.5], &p), Err(Error::DegeneratePose { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tf = TorsoField::new(&TorsoFieldConfig::default(), &mut rng).unwrap();
        let b = TorsoBatch {
            pixels: vec![[0.2, 0.4], [0.8, 0.1]],
            cond: vec![0, 0],
            poses: vec![pose()],
        };
        let t = tf.forward(&b).unwrap();
        let mut g = tf.zeros_like();
        tf.backward(&b, &t, &Array2::zeros((2, 4)), &mut g);
        assert_eq!(g.max_abs(), 0.0);
    }
}
