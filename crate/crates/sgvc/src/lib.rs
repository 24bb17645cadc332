//! A desk-scale variable-rate learned image codec.
//!
//! The encoder gates its features with learned spatial importance masks and
//! scales them per pixel according to a requested rate-distortion tradeoff,
//! so one trained model covers a continuous range of bit-rates. A small set
//! of shallow encoder channels travels with the latent and is fused back in
//! on the decoder side to restore detail. Entropy coding uses a mean-scale
//! hyperprior over a range-coded integer latent.

pub mod blocks;
pub mod check;
pub mod cli;
pub mod codec;
pub mod error;
pub mod evaluation;
pub mod ndutil;
pub mod training;

pub use error::{Error, Result};
