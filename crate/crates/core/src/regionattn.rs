//! Region attention: a two-layer network over the geometry feature yields a
//! per-point attention vector that reweights the audio condition channel by
//! channel, or gates the scalar eye condition through a sigmoid.
//!
//! The two layers play the role of the external memories: the first layer's
//! weights are the key memory (`A = ReLU(F M_k^T)`), the second layer's the
//! value memory (`V = A M_v`).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::dense::{sigmoid, Activation, Dense, DenseStack};
use crate::params::{ParamGroup, Parameters};

pub const AUDIO_DIM: usize = 32;
pub const AUDIO_HIDDEN: usize = 64;
pub const EYE_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AudioCondition(pub [f64; AUDIO_DIM]);

impl AudioCondition {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.len() != AUDIO_DIM {
            return Err(Error::Dimension {
                context: "audio condition".into(),
                expected: AUDIO_DIM,
                actual: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage: "audio condition" });
        }
        let mut a = [0.0; AUDIO_DIM];
        a.copy_from_slice(values);
        Ok(AudioCondition(a))
    }

    pub fn zeros() -> Self {
        AudioCondition([0.0; AUDIO_DIM])
    }
}

/// Blink degree in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeCondition(f64);

impl EyeCondition {
    pub fn new(e: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&e) {
            Ok(EyeCondition(e))
        } else {
            Err(Error::Config(format!("eye condition {e} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Per-channel reweighting `v ⊙ a`.
    #[default]
    Channel,
    /// One scalar scales the whole audio feature.
    Feature,
    /// No attention: conditions are concatenated as-is.
    Concat,
}

impl AttentionKind {
    pub fn code(self) -> u32 {
        match self {
            AttentionKind::Channel => 0,
            AttentionKind::Feature => 1,
            AttentionKind::Concat => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(AttentionKind::Channel),
            1 => Some(AttentionKind::Feature),
            2 => Some(AttentionKind::Concat),
            _ => None,
        }
    }

    /// Width of the audio attention vector for this kind.
    pub fn audio_outputs(self) -> usize {
        match self {
            AttentionKind::Channel => AUDIO_DIM,
            AttentionKind::Feature => 1,
            AttentionKind::Concat => 0,
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(AttentionKind::Channel),
            "feature" => Ok(AttentionKind::Feature),
            "concat" => Ok(AttentionKind::Concat),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::Channel => "channel",
            AttentionKind::Feature => "feature",
            AttentionKind::Concat => "concat",
        })
    }
}

/// `v = W2^T ReLU(W1^T f + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMlp {
    pub net: DenseStack,
}

impl AttentionMlp {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        AttentionMlp {
            net: DenseStack::new(&[inputs, hidden, outputs], &[Activation::Relu, Activation::None], rng),
        }
    }

    pub fn from_parts(w1: Array2<f64>, b1: Vec<f64>, w2: Array2<f64>, b2: Vec<f64>) -> Result<Self> {
        if w1.ncols() != b1.len() || w2.nrows() != w1.ncols() || w2.ncols() != b2.len() {
            return Err(Error::Config("attention mlp shapes do not chain".into()));
        }
        Ok(AttentionMlp {
            net: DenseStack {
                layers: vec![
                    Dense {
                        weight: w1,
                        bias: b1.into(),
                        activation: Activation::Relu,
                    },
                    Dense {
                        weight: w2,
                        bias: b2.into(),
                        activation: Activation::None,
                    },
                ],
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.inputs()
    }

    pub fn hidden_dim(&self) -> usize {
        self.net.layers[0].outputs()
    }

    pub fn output_dim(&self) -> usize {
        self.net.outputs()
    }
}

impl Parameters for AttentionMlp {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        self.net.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        self.net.visit_mut(f)
    }
}

fn check_feature(mlp: &AttentionMlp, f_x: &[f64]) -> Result<()> {
    if f_x.len() != mlp.input_dim() {
        return Err(Error::Dimension {
            context: "attention input".into(),
            expected: mlp.input_dim(),
            actual: f_x.len(),
        });
    }
    Ok(())
}

pub fn attention_vector(mlp: &AttentionMlp, f_x: &[f64]) -> Result<Vec<f64>> {
    check_feature(mlp, f_x)?;
    Ok(mlp.net.forward_one(f_x))
}

pub fn reweight_audio(v_a: &[f64], a: &AudioCondition) -> Result<[f64; AUDIO_DIM]> {
    if v_a.len() != AUDIO_DIM {
        return Err(Error::Dimension {
            context: "audio attention vector".into(),
            expected: AUDIO_DIM,
            actual: v_a.len(),
        });
    }
    let mut out = [0.0; AUDIO_DIM];
    for (o, (v, x)) in out.iter_mut().zip(v_a.iter().zip(&a.0)) {
        *o = v * x;
    }
    Ok(out)
}

/// `e_r = e * sigmoid(v_e)`, always inside `[0, e]`.
pub fn gate_eye(v_e: f64, e: EyeCondition) -> f64 {
    e.0 * sigmoid(v_e)
}

pub fn feature_wise_variant(v: f64, a: &AudioCondition) -> [f64; AUDIO_DIM] {
    a.0.map(|x| v * x)
}

/// Gradients of one region-attention evaluation.
#[derive(Clone, Debug)]
pub struct BranchGrads {
    pub d_feature: Vec<f64>,
    /// Gradient w.r.t. the condition (audio channels, or the single eye value).
    pub d_condition: Vec<f64>,
}

/// Adjoint of `a_r = attn(f) ⊙ a` (channel) or `a_r = attn(f) * a`
/// (feature-wise). Parameter gradients accumulate into `grads`.
pub fn audio_branch_backward(
    mlp: &AttentionMlp,
    kind: AttentionKind,
    f_x: &[f64],
    a: &AudioCondition,
    upstream: &[f64; AUDIO_DIM],
    grads: &mut AttentionMlp,
) -> Result<BranchGrads> {
    check_feature(mlp, f_x)?;
    let tape = mlp.net.forward_tape(Array2::from_shape_vec((1, f_x.len()), f_x.to_vec()).expect("row"));
    let v = tape.output.row(0).to_vec();
    let (d_v, d_a): (Vec<f64>, Vec<f64>) = match kind {
        AttentionKind::Channel => (
            upstream.iter().zip(&a.0).map(|(g, x)| g * x).collect(),
            upstream.iter().zip(&v).map(|(g, v)| g * v).collect(),
        ),
        AttentionKind::Feature => (
            vec![upstream.iter().zip(&a.0).map(|(g, x)| g * x).sum()],
            upstream.iter().map(|g| g * v[0]).collect(),
        ),
        AttentionKind::Concat => {
            return Err(Error::Config("concat variant has no attention branch".into()));
        }
    };
    let d_v = Array2::from_shape_vec((1, d_v.len()), d_v).expect("row");
    let d_f = mlp.net.backward(&tape, &d_v, &mut grads.net);
    Ok(BranchGrads {
        d_feature: d_f.row(0).to_vec(),
        d_condition: d_a,
    })
}

/// Adjoint of `e_r = e * sigmoid(attn(f))`.
pub fn eye_branch_backward(
    mlp: &AttentionMlp,
    f_x: &[f64],
    e: EyeCondition,
    upstream: f64,
    grads: &mut AttentionMlp,
) -> Result<BranchGrads> {
    check_feature(mlp, f_x)?;
    let tape = mlp.net.forward_tape(Array2::from_shape_vec((1, f_x.len()), f_x.to_vec()).expect("row"));
    let s = sigmoid(tape.output[(0, 0)]);
    let d_v = Array2::from_elem((1, 1), upstream * e.0 * s * (1.0 - s));
    let d_f = mlp.net.backward(&tape, &d_v, &mut grads.net);
    Ok(BranchGrads {
        d_feature: d_f.row(0).to_vec(),
        d_condition: vec![upstream * s],
    })
}
