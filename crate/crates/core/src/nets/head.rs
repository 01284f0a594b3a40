//! The conditioned head field: geometry feature, region attention over the
//! audio and eye conditions, a density decoder and a view-dependent color
//! decoder.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldrepr::{Backbone, GeometryEncoder};
use crate::hashenc::HashGridConfig;
use crate::nets::dense::{sigmoid, Activation, DenseStack, DenseTape};
use crate::params::{ParamGroup, Parameters};
use crate::regionattn::{
    AttentionKind, AttentionMlp, AudioCondition, EyeCondition, AUDIO_DIM, AUDIO_HIDDEN, EYE_HIDDEN,
};

pub const HIDDEN: usize = 64;
pub const LATENT_DIM: usize = 32;
/// Pre-activation cap of the exponential density activation.
pub const SIGMA_CLAMP: f64 = 15.0;
pub const DIR_OCTAVES: usize = 4;
pub const DIR_ENC_DIM: usize = 3 + 6 * DIR_OCTAVES;

/// `d ⊕ sin(2^k π d) ⊕ cos(2^k π d)` for `k < 4`.
pub fn encode_direction(d: &[f64; 3], out: &mut [f64]) {
    out[..3].copy_from_slice(d);
    let mut i = 3;
    for k in 0..DIR_OCTAVES {
        let f = (1u32 << k) as f64 * std::f64::consts::PI;
        for &v in d {
            out[i] = (f * v).sin();
            out[i + 1] = (f * v).cos();
            i += 2;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadFieldConfig {
    pub backbone: Backbone,
    pub attention: AttentionKind,
    /// Per-grid configuration; `dims` is set from the backbone.
    pub grid: HashGridConfig,
    pub detach_attention: bool,
}

impl Default for HeadFieldConfig {
    fn default() -> Self {
        HeadFieldConfig {
            backbone: Backbone::Trihash,
            attention: AttentionKind::Channel,
            grid: HashGridConfig::planar_default(),
            detach_attention: false,
        }
    }
}

impl HeadFieldConfig {
    /// Table sizes chosen so both backbones hold the same number of entries:
    /// `2^log2 / 3` per plane, or `2^log2` for the single 3D grid.
    pub fn with_budget(backbone: Backbone, attention: AttentionKind, table_size_log2: u32) -> Self {
        let template = HashGridConfig::planar_default();
        let grid = match backbone {
            Backbone::Trihash => crate::fieldrepr::TriPlaneEncoder::budget_config(template, table_size_log2),
            Backbone::Hash3d => HashGridConfig {
                dims: 3,
                table_size: 1 << table_size_log2,
                ..template
            },
        };
        HeadFieldConfig {
            backbone,
            attention,
            grid,
            detach_attention: false,
        }
    }
}

/// Forces the attention outputs; `Zero` makes `a_r = 0` and `e_r = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    None,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameCondition {
    pub audio: AudioCondition,
    pub eye: EyeCondition,
}

/// A batch of field queries. Each sample refers to one of `conditions`.
#[derive(Clone, Debug, Default)]
pub struct HeadBatch {
    /// Normalized positions in `[0,1]^3`.
    pub points: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub cond: Vec<u32>,
    pub conditions: Vec<FrameCondition>,
}

impl HeadBatch {
    pub fn single(x: [f64; 3], d: [f64; 3], c: FrameCondition) -> Self {
        HeadBatch {
            points: vec![x],
            dirs: vec![d],
            cond: vec![0],
            conditions: vec![c],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, x: [f64; 3], d: [f64; 3], cond: u32) {
        self.points.push(x);
        self.dirs.push(d);
        self.cond.push(cond);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadField {
    pub encoder: GeometryEncoder,
    pub attention: AttentionKind,
    pub audio_attn: Option<AttentionMlp>,
    pub eye_attn: Option<AttentionMlp>,
    /// `f_x ⊕ a_r ⊕ e_r -> [sigma pre-activation, latent]`.
    pub density_mlp: DenseStack,
    /// `latent ⊕ dir_enc(d) -> rgb`.
    pub color_mlp: DenseStack,
    pub detach_attention: bool,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct HeadTape {
    pub feats: Array2<f64>,
    pub audio: Array2<f64>,
    pub eye: Vec<f64>,
    pub audio_tape: Option<DenseTape>,
    pub eye_tape: Option<DenseTape>,
    pub gate: Vec<f64>,
    pub density_tape: DenseTape,
    pub color_tape: Option<DenseTape>,
    pub sigma: Vec<f64>,
    pub gates: GateOverride,
}

impl HeadTape {
    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let c = &self.color_tape.as_ref().expect("color decoded").output;
        [c[(i, 0)], c[(i, 1)], c[(i, 2)]]
    }

    /// Per-sample audio attention vectors (empty for the concat variant).
    pub fn audio_attention(&self) -> Option<&Array2<f64>> {
        self.audio_tape.as_ref().map(|t| &t.output)
    }
}

fn check_finite(a: impl IntoIterator<Item = f64>, stage: &'static str) -> Result<()> {
    if a.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

impl HeadField {
    pub fn new(config: &HeadFieldConfig, rng: &mut impl Rng) -> Result<Self> {
        let grid = HashGridConfig {
            dims: match config.backbone {
                Backbone::Trihash => 2,
                Backbone::Hash3d => 3,
            },
            ..config.grid
        };
        let encoder = match config.backbone {
            Backbone::Trihash => GeometryEncoder::TriPlane(crate::fieldrepr::TriPlaneEncoder::new(grid, rng)?),
            Backbone::Hash3d => GeometryEncoder::Hash3d(crate::hashenc::HashGrid::new(grid, rng)?),
        };
        let n = encoder.output_dim();
        let (audio_attn, eye_attn) = match config.attention {
            AttentionKind::Concat => (None, None),
            kind => (
                Some(AttentionMlp::new(n, AUDIO_HIDDEN, kind.audio_outputs(), rng)),
                Some(AttentionMlp::new(n, EYE_HIDDEN, 1, rng)),
            ),
        };
        let density_mlp = DenseStack::new(
            &[n + AUDIO_DIM + 1, HIDDEN, HIDDEN, 1 + LATENT_DIM],
            &[Activation::Relu, Activation::Relu, Activation::None],
            rng,
        );
        let color_mlp = DenseStack::new(
            &[LATENT_DIM + DIR_ENC_DIM, HIDDEN, 3],
            &[Activation::Relu, Activation::Sigmoid],
            rng,
        );
        Ok(HeadField {
            encoder,
            attention: config.attention,
            audio_attn,
            eye_attn,
            density_mlp,
            color_mlp,
            detach_attention: config.detach_attention,
        })
    }

    pub fn config(&self) -> HeadFieldConfig {
        let grid = match &self.encoder {
            GeometryEncoder::TriPlane(t) => *t.config(),
            GeometryEncoder::Hash3d(g) => *g.config(),
        };
        HeadFieldConfig {
            backbone: self.encoder.backbone(),
            attention: self.attention,
            grid,
            detach_attention: self.detach_attention,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Structural checks after loading from an untrusted source.
    pub fn validate(&self) -> Result<()> {
        let n = self.feature_dim();
        let bad = |m: &str| Err(Error::Checkpoint(format!("head field: {m}")));
        if !self.density_mlp.dims_chain() || !self.color_mlp.dims_chain() {
            return bad("decoder layers do not chain");
        }
        if self.density_mlp.inputs() != n + AUDIO_DIM + 1 || self.density_mlp.outputs() != 1 + LATENT_DIM {
            return bad("density decoder shape");
        }
        if self.color_mlp.inputs() != LATENT_DIM + DIR_ENC_DIM || self.color_mlp.outputs() != 3 {
            return bad("color decoder shape");
        }
        match (self.attention, &self.audio_attn, &self.eye_attn) {
            (AttentionKind::Concat, None, None) => {}
            (kind, Some(a), Some(e)) if kind != AttentionKind::Concat => {
                if !a.net.dims_chain() || !e.net.dims_chain() {
                    return bad("attention layers do not chain");
                }
                if a.input_dim() != n || a.output_dim() != kind.audio_outputs() || e.input_dim() != n || e.output_dim() != 1 {
                    return bad("attention shape");
                }
            }
            _ => return bad("attention networks do not match attention kind"),
        }
        Ok(())
    }

    pub fn forward(&self, batch: &HeadBatch, gates: GateOverride) -> Result<HeadTape> {
        self.forward_impl(batch, gates, true)
    }

    /// Density only; skips the color decoder.
    pub fn density(&self, batch: &HeadBatch) -> Result<Vec<f64>> {
        Ok(self.forward_impl(batch, GateOverride::None, false)?.sigma)
    }

    fn forward_impl(&self, batch: &HeadBatch, gates: GateOverride, with_color: bool) -> Result<HeadTape> {
        let s_count = batch.len();
        let n = self.feature_dim();
        let mut feats = Array2::zeros((s_count, n));
        for (i, p) in batch.points.iter().enumerate() {
            let row = feats.row_mut(i).into_slice().expect("row-major");
            self.encoder.encode_into(p, row);
        }
        check_finite(feats.iter().copied(), "geometry encoding")?;

        let mut audio = Array2::zeros((s_count, AUDIO_DIM));
        let mut eye = vec![0.0; s_count];
        for (i, &c) in batch.cond.iter().enumerate() {
            let cond = batch
                .conditions
                .get(c as usize)
                .ok_or_else(|| Error::Config(format!("sample {i} refers to missing condition {c}")))?;
            audio.row_mut(i).as_slice_mut().expect("row").copy_from_slice(&cond.audio.0);
            eye[i] = cond.eye.value();
        }

        let zeroed = gates == GateOverride::Zero;
        let mut din = Array2::zeros((s_count, n + AUDIO_DIM + 1));
        din.slice_mut(s![.., ..n]).assign(&feats);
        let mut audio_tape = None;
        let mut eye_tape = None;
        let mut gate = vec![1.0; s_count];
        match self.attention {
            AttentionKind::Concat => {
                if !zeroed {
                    din.slice_mut(s![.., n..n + AUDIO_DIM]).assign(&audio);
                    for i in 0..s_count {
                        din[(i, n + AUDIO_DIM)] = eye[i];
                    }
                }
            }
            kind => {
                let at = self.audio_attn.as_ref().expect("attention network").net.forward_tape(feats.clone());
                check_finite(at.output.iter().copied(), "audio attention")?;
                let et = self.eye_attn.as_ref().expect("attention network").net.forward_tape(feats.clone());
                check_finite(et.output.iter().copied(), "eye attention")?;
                for i in 0..s_count {
                    gate[i] = sigmoid(et.output[(i, 0)]);
                }
                if !zeroed {
                    for i in 0..s_count {
                        for k in 0..AUDIO_DIM {
                            let v = if kind == AttentionKind::Channel {
                                at.output[(i, k)]
                            } else {
                                at.output[(i, 0)]
                            };
                            din[(i, n + k)] = v * audio[(i, k)];
                        }
                        din[(i, n + AUDIO_DIM)] = eye[i] * gate[i];
                    }
                }
                audio_tape = Some(at);
                eye_tape = Some(et);
            }
        }

        let density_tape = self.density_mlp.forward_tape(din);
        let out = &density_tape.output;
        let sigma: Vec<f64> = (0..s_count).map(|i| out[(i, 0)].min(SIGMA_CLAMP).exp()).collect();
        check_finite(out.iter().copied(), "density decoder")?;

        let color_tape = if with_color {
            let mut cin = Array2::zeros((s_count, LATENT_DIM + DIR_ENC_DIM));
            cin.slice_mut(s![.., ..LATENT_DIM]).assign(&out.slice(s![.., 1..]));
            for (i, d) in batch.dirs.iter().enumerate() {
                let row = cin.row_mut(i).into_slice().expect("row-major");
                encode_direction(d, &mut row[LATENT_DIM..]);
            }
            let ct = self.color_mlp.forward_tape(cin);
            check_finite(ct.output.iter().copied(), "color decoder")?;
            Some(ct)
        } else {
            None
        };

        Ok(HeadTape {
            feats,
            audio,
            eye,
            audio_tape,
            eye_tape,
            gate,
            density_tape,
            color_tape,
            sigma,
            gates,
        })
    }

    /// Adjoint of [`forward`](Self::forward). Accumulates into `grads`.
    pub fn backward(
        &self,
        batch: &HeadBatch,
        tape: &HeadTape,
        d_rgb: &Array2<f64>,
        d_sigma: &[f64],
        grads: &mut HeadField,
    ) {
        let s_count = batch.len();
        let n = self.feature_dim();
        let color_tape = tape.color_tape.as_ref().expect("backward needs the color decoder tape");
        let d_cin = self.color_mlp.backward(color_tape, d_rgb, &mut grads.color_mlp);

        let mut d_dout = Array2::zeros((s_count, 1 + LATENT_DIM));
        d_dout.slice_mut(s![.., 1..]).assign(&d_cin.slice(s![.., ..LATENT_DIM]));
        for i in 0..s_count {
            let z = tape.density_tape.output[(i, 0)];
            d_dout[(i, 0)] = if z < SIGMA_CLAMP { d_sigma[i] * tape.sigma[i] } else { 0.0 };
        }
        let d_din = self.density_mlp.backward(&tape.density_tape, &d_dout, &mut grads.density_mlp);
        let mut d_feats = d_din.slice(s![.., ..n]).to_owned();

        let zeroed = tape.gates == GateOverride::Zero;
        if let (Some(at), Some(et), false) = (&tape.audio_tape, &tape.eye_tape, zeroed) {
            let kind = self.attention;
            let mut d_va = Array2::zeros((s_count, kind.audio_outputs()));
            let mut d_ve = Array2::zeros((s_count, 1));
            for i in 0..s_count {
                for k in 0..AUDIO_DIM {
                    let g = d_din[(i, n + k)] * tape.audio[(i, k)];
                    if kind == AttentionKind::Channel {
                        d_va[(i, k)] = g;
                    } else {
                        d_va[(i, 0)] += g;
                    }
                }
                let g = tape.gate[i];
                d_ve[(i, 0)] = d_din[(i, n + AUDIO_DIM)] * tape.eye[i] * g * (1.0 - g);
            }
            let audio = self.audio_attn.as_ref().expect("attention network");
            let eye = self.eye_attn.as_ref().expect("attention network");
            let da = audio.net.backward(at, &d_va, &mut grads.audio_attn.as_mut().expect("grad buffer").net);
            let de = eye.net.backward(et, &d_ve, &mut grads.eye_attn.as_mut().expect("grad buffer").net);
            if !self.detach_attention {
                d_feats += &da;
                d_feats += &de;
            }
        }

        for (i, p) in batch.points.iter().enumerate() {
            let row = d_feats.row(i);
            let row = row.as_slice().expect("row-major");
            if row.iter().any(|&v| v != 0.0) {
                self.encoder.backward_into(p, row, &mut grads.encoder, None);
            }
        }
    }

    /// One query: `(rgb, sigma)`.
    pub fn query(&self, x: [f64; 3], d: [f64; 3], cond: FrameCondition, gates: GateOverride) -> Result<([f64; 3], f64)> {
        let b = HeadBatch::single(x, d, cond);
        let t = self.forward(&b, gates)?;
        Ok((t.rgb(0), t.sigma[0]))
    }

    /// Region-attention state at normalized points: audio attention vectors
    /// and eye gates `sigmoid(v_e)`. `None` for the concat variant.
    pub fn attention_at(&self, points: &[[f64; 3]]) -> Option<(Array2<f64>, Vec<f64>)> {
        let (audio, eye) = (self.audio_attn.as_ref()?, self.eye_attn.as_ref()?);
        let n = self.feature_dim();
        let mut feats = Array2::zeros((points.len(), n));
        for (i, p) in points.iter().enumerate() {
            self.encoder.encode_into(p, feats.row_mut(i).into_slice().expect("row-major"));
        }
        let va = audio.net.forward(&feats);
        let ve = eye.net.forward(&feats);
        Some((va, ve.iter().map(|&v| sigmoid(v)).collect()))
    }
}

impl Parameters for HeadField {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        self.encoder.visit(f);
        if let Some(a) = &self.audio_attn {
            a.visit(f);
        }
        if let Some(e) = &self.eye_attn {
            e.visit(f);
        }
        self.density_mlp.visit(f);
        self.color_mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        self.encoder.visit_mut(f);
        if let Some(a) = &mut self.audio_attn {
            a.visit_mut(f);
        }
        if let Some(e) = &mut self.eye_attn {
            e.visit_mut(f);
        }
        self.density_mlp.visit_mut(f);
        self.color_mlp.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regionattn::{attention_vector, gate_eye, reweight_audio};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cond(seed: u64) -> FrameCondition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameCondition {
            audio: AudioCondition(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
            eye: EyeCondition::new(rng.random()).unwrap(),
        }
    }

    fn small_config(backbone: Backbone, attention: AttentionKind) -> HeadFieldConfig {
        HeadFieldConfig {
            backbone,
            attention,
            grid: HashGridConfig::new(2, 4, 2, 1 << 10, 8, 64).unwrap(),
            detach_attention: false,
        }
    }

    #[test]
    fn direction_encoding_separates_antipodes() {
        let d = [0.6, -0.48, 0.64];
        let mut a = [0.0; DIR_ENC_DIM];
        let mut b = [0.0; DIR_ENC_DIM];
        encode_direction(&d, &mut a);
        encode_direction(&d.map(|v| -v), &mut b);
        assert_ne!(a, b);
        assert_eq!(DIR_ENC_DIM, 27);
    }

    #[test]
    fn outputs_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hf = HeadField::new(&HeadFieldConfig::default(), &mut rng).unwrap();
        for i in 0..20 {
            let x = [rng.random(), rng.random(), rng.random()];
            let (c, s) = hf.query(x, [0.0, 0.0, 1.0], cond(i), GateOverride::None).unwrap();
            assert!(s >= 0.0);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn fresh_density_is_nearly_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hf = HeadField::new(&HeadFieldConfig::default(), &mut rng).unwrap();
        let c = cond(3);
        let sig: Vec<f64> = (0..50)
            .map(|_| hf.query([rng.random(), rng.random(), rng.random()], [1.0, 0.0, 0.0], c, GateOverride::None).unwrap().1)
            .collect();
        let (lo, hi) = sig.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo < 1e-3, "spread {}", hi - lo);
    }

    #[test]
    fn zero_gates_make_output_condition_independent() {
        for attention in [AttentionKind::Channel, AttentionKind::Feature, AttentionKind::Concat] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let hf = HeadField::new(&small_config(Backbone::Trihash, attention), &mut rng).unwrap();
            let mut batch = HeadBatch {
                conditions: vec![cond(10), cond(11)],
                ..Default::default()
            };
            for i in 0..30 {
                let x = [rng.random(), rng.random(), rng.random()];
                batch.push(x, [0.0, 0.6, 0.8], 0);
                batch.push(x, [0.0, 0.6, 0.8], 1);
                let _ = i;
            }
            let t = hf.forward(&batch, GateOverride::Zero).unwrap();
            for i in (0..60).step_by(2) {
                assert_eq!(t.rgb(i), t.rgb(i + 1));
                assert_eq!(t.sigma[i], t.sigma[i + 1]);
            }
            let t = hf.forward(&batch, GateOverride::None).unwrap();
            assert!((0..60).step_by(2).any(|i| t.sigma[i] != t.sigma[i + 1]));
        }
    }

    #[test]
    fn pipeline_matches_composed_module_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hf = HeadField::new(&small_config(Backbone::Trihash, AttentionKind::Channel), &mut rng).unwrap();
        for i in 0..10 {
            let x = [rng.random(), rng.random(), rng.random()];
            let d = crate::geom::Vec3::new(rng.random(), rng.random(), rng.random()).normalize();
            let d = [d.x, d.y, d.z];
            let c = cond(100 + i);
            let f = hf.encoder.encode(&x);
            let va = attention_vector(hf.audio_attn.as_ref().unwrap(), &f).unwrap();
            let ve = attention_vector(hf.eye_attn.as_ref().unwrap(), &f).unwrap();
            let ar = reweight_audio(&va, &c.audio).unwrap();
            let er = gate_eye(ve[0], c.eye);
            let mut din = f.clone();
            din.extend_from_slice(&ar);
            din.push(er);
            let out = hf.density_mlp.forward_one(&din);
            let sigma = out[0].min(SIGMA_CLAMP).exp();
            let mut cin = out[1..].to_vec();
            let mut enc = [0.0; DIR_ENC_DIM];
            encode_direction(&d, &mut enc);
            cin.extend_from_slice(&enc);
            let rgb = hf.color_mlp.forward_one(&cin);
            let (c2, s2) = hf.query(x, d, c, GateOverride::None).unwrap();
            assert!((s2 - sigma).abs() <= 1e-12 * sigma.max(1.0));
            for k in 0..3 {
                assert!((c2[k] - rgb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validate_rejects_mismatched_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut hf = HeadField::new(&small_config(Backbone::Hash3d, AttentionKind::Channel), &mut rng).unwrap();
        assert!(hf.validate().is_ok());
        hf.attention = AttentionKind::Concat;
        assert!(hf.validate().is_err());
    }

    #[test]
    fn missing_condition_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hf = HeadField::new(&small_config(Backbone::Trihash, AttentionKind::Channel), &mut rng).unwrap();
        let mut b = HeadBatch::single([0.5; 3], [0.0, 0.0, 1.0], cond(1));
        b.cond[0] = 3;
        assert!(hf.forward(&b, GateOverride::None).is_err());
    }

    #[test]
    fn non_finite_parameters_name_the_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut hf = HeadField::new(&small_config(Backbone::Trihash, AttentionKind::Channel), &mut rng).unwrap();
        hf.color_mlp.layers[1].bias[0] = f64::NAN;
        let err = hf.query([0.5; 3], [0.0, 0.0, 1.0], cond(1), GateOverride::None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { stage: "color decoder" }), "{err}");
    }
}
