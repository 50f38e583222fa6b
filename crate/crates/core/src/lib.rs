//! Two-stage human motion recovery: a deterministic regressor for the
//! structural anchor (torso, shape, camera trajectory) followed by masked
//! conditional flow matching over the remaining articulation and world motion.

pub mod camera;
pub mod config;
pub mod error;
pub mod flowmatch;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod rotation;
pub mod seed;
pub mod skeleton;
pub mod synthdata;
pub mod worldmotion;

pub use error::{Error, Result};
