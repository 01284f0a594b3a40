//! Conditioned neural radiance fields for talking-portrait synthesis: a
//! tri-plane hash-encoded head field with region attention over audio and
//! eye conditions, a pose-conditioned 2D torso field, a volume renderer with
//! hand-written adjoints, and the training, data and evaluation tooling
//! around them.

pub mod checkpoint;
pub mod collide;
pub mod config;
pub mod error;
pub mod eval;
pub mod fieldrepr;
pub mod geom;
pub mod gradcheck;
pub mod hashenc;
pub mod nets;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod perceptual;
pub mod ppm;
pub mod regionattn;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
