//! Finite-difference checks of every hand-written adjoint.
//!
//! Each instance draws a random model, input and direction `v` over all
//! differentiable quantities, then compares the analytic directional
//! derivative `<grad, v>` against a fourth-order central difference of the scalar
//! `r · output` for random `r`. Instances whose stencil crosses a kink
//! (ReLU sign flip, hash cell change, clamp boundary) are redrawn.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fieldrepr::{Backbone, TriPlaneEncoder};
use crate::geom::{HeadPose, Mat3, Vec3};
use crate::hashenc::{HashGrid, HashGridConfig};
use crate::nets::pose::{adaptive_pose_encoding, adaptive_pose_encoding_backward, KeyPoints, NUM_KEYS};
use crate::nets::{
    FrameCondition, GateOverride, HeadBatch, HeadField, HeadFieldConfig, TorsoBatch, TorsoField, TorsoFieldConfig,
};
use crate::params::Parameters;
use crate::regionattn::{
    attention_vector, audio_branch_backward, eye_branch_backward, feature_wise_variant, gate_eye, reweight_audio,
    AttentionKind, AttentionMlp, AudioCondition, EyeCondition, AUDIO_DIM,
};
use crate::render::{composite, composite_backward, RaySamples};

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 100;
const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-6;
const MAX_REDRAWS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradModule {
    Hash2d,
    Hash3d,
    TriPlane,
    AudioAttention,
    EyeAttention,
    HeadField,
    TorsoField,
    PoseEncoding,
    Compositor,
}

impl GradModule {
    pub const ALL: [GradModule; 9] = [
        GradModule::Hash2d,
        GradModule::Hash3d,
        GradModule::TriPlane,
        GradModule::AudioAttention,
        GradModule::EyeAttention,
        GradModule::HeadField,
        GradModule::TorsoField,
        GradModule::PoseEncoding,
        GradModule::Compositor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Hash2d => "hash2d",
            GradModule::Hash3d => "hash3d",
            GradModule::TriPlane => "triplane",
            GradModule::AudioAttention => "audio-attention",
            GradModule::EyeAttention => "eye-attention",
            GradModule::HeadField => "head",
            GradModule::TorsoField => "torso",
            GradModule::PoseEncoding => "pose",
            GradModule::Compositor => "composite",
        }
    }
}

impl std::str::FromStr for GradModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient module `{s}`")))
    }
}

impl std::fmt::Display for GradModule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub module: GradModule,
    pub instances: usize,
    /// Instances redrawn because a kink fell inside the difference stencil.
    pub redrawn: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One draw: the analytic directional derivative and an evaluator of the
/// perturbed scalar plus its kink signature.
struct Probe<S> {
    analytic: f64,
    eval: Box<dyn Fn(f64) -> (f64, S)>,
}

fn run_module<S: PartialEq>(
    module: GradModule,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Probe<S>,
) -> Result<GradReport> {
    let mut max = 0.0f64;
    let mut redrawn = 0;
    for i in 0..instances {
        let mut tries = 0;
        loop {
            let probe = draw(rng);
            let (_, s0) = (probe.eval)(0.0);
            let evals: Vec<(f64, S)> = [STEP, -STEP, 2.0 * STEP, -2.0 * STEP].into_iter().map(|t| (probe.eval)(t)).collect();
            if evals.iter().any(|(_, s)| *s != s0) {
                redrawn += 1;
                tries += 1;
                if tries > MAX_REDRAWS {
                    return Err(Error::Config(format!("{module}: instance {i} kept landing on kinks")));
                }
                continue;
            }
            // Fourth-order central stencil.
            let numeric = (8.0 * (evals[0].0 - evals[1].0) - (evals[2].0 - evals[3].0)) / (12.0 * STEP);
            max = max.max(rel_err(probe.analytic, numeric));
            break;
        }
    }
    Ok(GradReport {
        module,
        instances,
        redrawn,
        max_rel_err: max,
    })
}

fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn randomize<P: Parameters>(p: &mut P, rng: &mut impl Rng, scale: f64) {
    p.visit_mut(&mut |_, s| {
        for v in s {
            *v = rng.random_range(-scale..scale);
        }
    });
}

fn shifted<P: Parameters + Clone>(p: &P, v: &[f64], t: f64) -> P {
    let mut out = p.clone();
    let mut off = 0;
    out.visit_mut(&mut |_, s| {
        for (x, d) in s.iter_mut().zip(&v[off..]) {
            *x += t * d;
        }
        off += s.len();
    });
    out
}

fn axpy<const N: usize>(x: &[f64; N], v: &[f64], t: f64) -> [f64; N] {
    std::array::from_fn(|k| x[k] + t * v[k])
}

fn hash_probe(rng: &mut ChaCha8Rng, dims: usize) -> Probe<Vec<u32>> {
    let cfg = HashGridConfig::new(dims, 3, 2, 37, 3, 17).expect("valid config");
    let mut grid = HashGrid::zeros(cfg).expect("valid config");
    randomize(&mut grid, rng, 1.0);
    let u: Vec<f64> = (0..dims).map(|_| rng.random_range(0.02..0.98)).collect();
    let vu = uniform(rng, dims, 1.0);
    let vt = uniform(rng, grid.param_count(), 1.0);
    let r = uniform(rng, grid.output_dim(), 1.0);
    let mut g = grid.zeros_like();
    let du = grid.encode_backward(&u, &r, &mut g);
    let analytic = dot(&g.tables, &vt) + dot(&du, &vu);
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let gp = shifted(&grid, &vt, t);
            let up: Vec<f64> = u.iter().zip(&vu).map(|(a, b)| a + t * b).collect();
            (dot(&gp.encode(&up), &r), grid.cell_signature(&up))
        }),
    }
}

fn triplane_probe(rng: &mut ChaCha8Rng) -> Probe<Vec<u32>> {
    let cfg = HashGridConfig::new(2, 3, 2, 41, 3, 13).expect("valid config");
    let mut enc = TriPlaneEncoder::new(cfg, rng).expect("valid config");
    randomize(&mut enc, rng, 1.0);
    let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.98));
    let vx = uniform(rng, 3, 1.0);
    let vt = uniform(rng, enc.param_count(), 1.0);
    let r = uniform(rng, enc.output_dim(), 1.0);
    let mut g = enc.zeros_like();
    let dx = enc.encode_backward(&x, &r, &mut g);
    let analytic = dot(&g.flatten(), &vt) + dot(&dx, &vx);
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let e = shifted(&enc, &vt, t);
            let xp = axpy(&x, &vx, t);
            (dot(&e.encode(&xp), &r), enc.cell_signature(&xp))
        }),
    }
}

const FEAT: usize = 10;

fn relu_sig(mlp: &AttentionMlp, f: &[f64]) -> Vec<bool> {
    let x = Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("row");
    mlp.net.forward_tape(x).relu_signature(&mlp.net)
}

fn audio_probe(rng: &mut ChaCha8Rng, kind: AttentionKind) -> Probe<Vec<bool>> {
    let mut mlp = AttentionMlp::new(FEAT, 16, kind.audio_outputs(), rng);
    randomize(&mut mlp, rng, 0.5);
    let f = uniform(rng, FEAT, 1.0);
    let a = AudioCondition(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let (vp, vf, va) = (uniform(rng, mlp.param_count(), 1.0), uniform(rng, FEAT, 1.0), uniform(rng, AUDIO_DIM, 1.0));
    let r: [f64; AUDIO_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let mut g = mlp.zeros_like();
    let b = audio_branch_backward(&mlp, kind, &f, &a, &r, &mut g).expect("shapes match");
    let analytic = dot(&g.flatten(), &vp) + dot(&b.d_feature, &vf) + dot(&b.d_condition, &va);
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let m = shifted(&mlp, &vp, t);
            let fp: Vec<f64> = f.iter().zip(&vf).map(|(x, d)| x + t * d).collect();
            let ap = AudioCondition(axpy(&a.0, &va, t));
            let v = attention_vector(&m, &fp).expect("shapes match");
            let out = match kind {
                AttentionKind::Channel => reweight_audio(&v, &ap).expect("shapes match"),
                _ => feature_wise_variant(v[0], &ap),
            };
            (dot(&out, &r), relu_sig(&m, &fp))
        }),
    }
}

fn eye_probe(rng: &mut ChaCha8Rng) -> Probe<Vec<bool>> {
    let mut mlp = AttentionMlp::new(FEAT, 16, 1, rng);
    randomize(&mut mlp, rng, 0.5);
    let f = uniform(rng, FEAT, 1.0);
    let e = rng.random_range(0.1..0.9);
    let (vp, vf, ve) = (uniform(rng, mlp.param_count(), 1.0), uniform(rng, FEAT, 1.0), rng.random_range(-1.0..1.0));
    let r = rng.random_range(-1.0..1.0);
    let mut g = mlp.zeros_like();
    let b = eye_branch_backward(&mlp, &f, EyeCondition::new(e).expect("in range"), r, &mut g).expect("shapes match");
    let analytic = dot(&g.flatten(), &vp) + dot(&b.d_feature, &vf) + b.d_condition[0] * ve;
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let m = shifted(&mlp, &vp, t);
            let fp: Vec<f64> = f.iter().zip(&vf).map(|(x, d)| x + t * d).collect();
            let v = attention_vector(&m, &fp).expect("shapes match");
            let ec = EyeCondition::new(e + t * ve).expect("in range");
            (r * gate_eye(v[0], ec), relu_sig(&m, &fp))
        }),
    }
}

fn random_condition(rng: &mut impl Rng) -> FrameCondition {
    FrameCondition {
        audio: AudioCondition(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
        eye: EyeCondition::new(rng.random_range(0.0..1.0)).expect("in range"),
    }
}

fn head_probe(rng: &mut ChaCha8Rng, index: usize) -> Probe<Vec<bool>> {
    let kinds = [AttentionKind::Channel, AttentionKind::Feature, AttentionKind::Concat];
    let backbone = if index.is_multiple_of(2) { Backbone::Trihash } else { Backbone::Hash3d };
    let cfg = HeadFieldConfig {
        backbone,
        attention: kinds[index % 3],
        grid: HashGridConfig::new(2, 2, 2, 31, 4, 9).expect("valid config"),
        detach_attention: false,
    };
    let mut field = HeadField::new(&cfg, rng).expect("valid config");
    randomize(&mut field, rng, 0.3);
    let mut batch = HeadBatch {
        conditions: vec![random_condition(rng), random_condition(rng)],
        ..Default::default()
    };
    for i in 0..4 {
        let x = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
        batch.push(x, [d.x, d.y, d.z], (i % 2) as u32);
    }
    let n = batch.len();
    let r_rgb = Array2::from_shape_vec((n, 3), uniform(rng, 3 * n, 1.0)).expect("shape");
    let r_sigma = uniform(rng, n, 1.0);
    let v = uniform(rng, field.param_count(), 1.0);
    let tape = field.forward(&batch, GateOverride::None).expect("finite");
    let mut g = field.zeros_like();
    field.backward(&batch, &tape, &r_rgb, &r_sigma, &mut g);
    let analytic = dot(&g.flatten(), &v);
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let f = shifted(&field, &v, t);
            let tape = f.forward(&batch, GateOverride::None).expect("finite");
            let mut value = 0.0;
            for i in 0..n {
                let c = tape.rgb(i);
                value += (0..3).map(|k| c[k] * r_rgb[(i, k)]).sum::<f64>() + tape.sigma[i] * r_sigma[i];
            }
            let mut sig = tape.density_tape.relu_signature(&f.density_mlp);
            sig.extend(tape.color_tape.as_ref().expect("color").relu_signature(&f.color_mlp));
            if let (Some(a), Some(m)) = (&tape.audio_tape, &f.audio_attn) {
                sig.extend(a.relu_signature(&m.net));
            }
            if let (Some(e), Some(m)) = (&tape.eye_tape, &f.eye_attn) {
                sig.extend(e.relu_signature(&m.net));
            }
            sig.extend((0..n).map(|i| tape.density_tape.output[(i, 0)] < crate::nets::head::SIGMA_CLAMP));
            (value, sig)
        }),
    }
}

fn view_pose(rng: &mut impl Rng) -> HeadPose {
    let base = HeadPose::new(Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0)), Vec3::new(0.0, 0.0, 3.0))
        .expect("proper rotation")
        .inverse();
    let shift = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    base.perturbed(
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.2..0.2),
        shift,
    )
    .expect("proper rotation")
}

#[derive(PartialEq)]
struct TorsoSig(Vec<bool>, Vec<u32>);

fn torso_probe(rng: &mut ChaCha8Rng) -> Probe<TorsoSig> {
    let cfg = TorsoFieldConfig {
        grid: HashGridConfig::new(2, 2, 2, 29, 4, 8).expect("valid config"),
    };
    let mut field = TorsoField::new(&cfg, rng).expect("valid config");
    let keys = field.keys.clone();
    randomize(&mut field, rng, 0.3);
    field.keys = KeyPoints {
        points: keys.points.map(|p| p.map(|c| c + rng.random_range(-0.1..0.1))),
        gamma: rng.random_range(0.5..1.5),
    };
    let batch = TorsoBatch {
        pixels: (0..5).map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]).collect(),
        cond: vec![0, 1, 0, 1, 1],
        poses: vec![view_pose(rng), view_pose(rng)],
    };
    let n = batch.len();
    let r = Array2::from_shape_vec((n, 4), uniform(rng, 4 * n, 1.0)).expect("shape");
    let v = uniform(rng, field.param_count(), 1.0);
    let tape = field.forward(&batch).expect("valid poses");
    let mut g = field.zeros_like();
    field.backward(&batch, &tape, &r, &mut g);
    let analytic = dot(&g.flatten(), &v);
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let f = shifted(&field, &v, t);
            let tape = f.forward(&batch).expect("valid poses");
            let value = (0..n)
                .map(|i| {
                    let (c, a) = tape.output(i);
                    (0..3).map(|k| c[k] * r[(i, k)]).sum::<f64>() + a * r[(i, 3)]
                })
                .sum();
            let mut sig = tape.deform_tape.relu_signature(&f.deform_mlp);
            sig.extend(tape.head_tape.relu_signature(&f.head_mlp));
            sig.extend(tape.clamped.iter().flatten());
            let cells = tape.coords.iter().flat_map(|c| field.tex_grid.cell_signature(c)).collect();
            (value, TorsoSig(sig, cells))
        }),
    }
}

fn pose_probe(rng: &mut ChaCha8Rng) -> Probe<()> {
    let keys = KeyPoints {
        points: std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.6..0.6))),
        gamma: rng.random_range(0.5..1.5),
    };
    let pose = view_pose(rng);
    let (vk, vr, vt) = (uniform(rng, 3 * NUM_KEYS + 1, 1.0), uniform(rng, 9, 1.0), uniform(rng, 3, 1.0));
    let r: [[f64; 2]; NUM_KEYS] = std::array::from_fn(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    let g = adaptive_pose_encoding_backward(&keys, &pose, &r);
    let analytic = dot(&g.keys.flatten(), &vk) + dot(g.rotation.as_slice(), &vr) + dot(g.translation.as_slice(), &vt);
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let k = shifted(&keys, &vk, t);
            // The adjoint treats the rotation as a free matrix.
            let p = HeadPose {
                rotation: pose.rotation + Mat3::from_column_slice(&vr) * t,
                translation: pose.translation + Vec3::from_column_slice(&vt) * t,
            };
            let code = adaptive_pose_encoding(&k, &p).expect("positive depth");
            (dot(code.as_flattened(), r.as_flattened()), ())
        }),
    }
}

fn composite_probe(rng: &mut ChaCha8Rng) -> Probe<()> {
    let n = rng.random_range(1..=12);
    let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.3)).collect();
    let mut acc = 0.0;
    let t: Vec<f64> = deltas
        .iter()
        .map(|d| {
            let x = acc;
            acc += d;
            x
        })
        .collect();
    let samples = RaySamples {
        t,
        deltas,
        rgb: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect(),
        sigma: (0..n).map(|_| rng.random_range(0.1..5.0)).collect(),
    };
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let (vc, vs, vb) = (uniform(rng, 3 * n, 1.0), uniform(rng, n, 1.0), uniform(rng, 3, 1.0));
    let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let c = composite(&samples, bg).expect("valid samples");
    let g = composite_backward(&samples, bg, &c, r);
    let analytic = dot(g.d_rgb.as_flattened(), &vc) + dot(&g.d_sigma, &vs) + dot(&g.d_background, &vb);
    Probe {
        analytic,
        eval: Box::new(move |t| {
            let mut s = samples.clone();
            for (i, px) in s.rgb.iter_mut().enumerate() {
                *px = axpy(px, &vc[3 * i..], t);
            }
            for (x, d) in s.sigma.iter_mut().zip(&vs) {
                *x += t * d;
            }
            let c = composite(&s, axpy(&bg, &vb, t)).expect("valid samples");
            (dot(&c.color, &r), ())
        }),
    }
}

/// Checks one adjoint over `instances` random draws.
pub fn check(module: GradModule, instances: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(module as u64);
    let mut index = 0usize;
    match module {
        GradModule::Hash2d => run_module(module, instances, &mut rng, |r| hash_probe(r, 2)),
        GradModule::Hash3d => run_module(module, instances, &mut rng, |r| hash_probe(r, 3)),
        GradModule::TriPlane => run_module(module, instances, &mut rng, triplane_probe),
        GradModule::AudioAttention => run_module(module, instances, &mut rng, |r| {
            index += 1;
            audio_probe(r, if index.is_multiple_of(2) { AttentionKind::Channel } else { AttentionKind::Feature })
        }),
        GradModule::EyeAttention => run_module(module, instances, &mut rng, eye_probe),
        GradModule::HeadField => run_module(module, instances, &mut rng, |r| {
            index += 1;
            head_probe(r, index)
        }),
        GradModule::TorsoField => run_module(module, instances, &mut rng, torso_probe),
        GradModule::PoseEncoding => run_module(module, instances, &mut rng, pose_probe),
        GradModule::Compositor => run_module(module, instances, &mut rng, composite_probe),
    }
}

pub fn check_all(instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    GradModule::ALL.into_iter().map(|m| check(m, instances, seed)).collect()
}
