//! PointCaps: a convolutional capsule autoencoder for raw point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense tensors and a reverse-mode tape.
//! * [`routing`] — dynamic routing (dot-product agreement) and dynamic
//!   Euclidean routing (squared-distance agreement).
//! * [`layers`] — the PointCapA / PointCapB / PointCapC convolutional capsule
//!   layers and the fully-connected DigitCap layer.
//! * [`model`] — encoder/decoder assembly, losses, checkpoints and
//!   parameter/FLOP accounting.
//! * [`data`] — synthetic shapes, noise protocols and on-disk formats.
//! * [`train`] — RAdam, the training loop and evaluation protocols.
//! * [`verify`] — independent reference implementations and the
//!   self-check battery behind `pointcaps verify`.

pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod routing;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
