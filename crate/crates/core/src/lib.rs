//! Motion-based identification of XR users from head and hand tracking data.
//!
//! The crate covers the whole pipeline:
//!
//! * [`motion`]: loading, resampling and trimming 6-DoF tracking recordings.
//! * [`encoding`]: body-relative (BR), velocity (BRV) and acceleration (BRA)
//!   feature encodings built on the quaternion helpers in [`quat`].
//! * [`sampling`]: train/validation/test splits, enrollment slicing,
//!   feature standardization and fixed-length windows.
//! * [`nn`]: a small reverse-mode tensor engine with GRU and 1D-CNN
//!   classifiers, cross-entropy, Adam, training and checkpoints.
//! * [`identify`]: sliding-window majority voting, macro/minimum accuracy and
//!   the enrollment-time by use-time accuracy grid.
//! * [`synth`]: a deterministic generator of per-user synthetic motion.
//! * [`cli`]: the batch entry point behind the `xrid` binary.

pub mod cli;
pub mod encoding;
pub mod error;
pub mod identify;
pub mod motion;
pub mod nn;
pub mod quat;
pub mod sampling;
pub mod synth;

pub use error::{Error, Result};
