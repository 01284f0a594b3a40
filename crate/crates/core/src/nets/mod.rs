//! Dense networks with hand-written adjoints and the two fields built on them.

pub mod dense;
pub mod head;
pub mod pose;
pub mod torso;

pub use dense::{Activation, Dense, DenseStack, DenseTape};
pub use head::{FrameCondition, GateOverride, HeadBatch, HeadField, HeadFieldConfig, HeadTape};
pub use pose::{adaptive_pose_encoding, adaptive_pose_encoding_backward, KeyPoints, PoseCode};
pub use torso::{TorsoBatch, TorsoField, TorsoFieldConfig, TorsoTape};
