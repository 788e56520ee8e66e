//! Cyclic two-network training for sequence-set identity recognition under
//! label noise.
//!
//! A forgetting network is trained with supervised and contrastive losses
//! while a memorizing network tracks it through an exponential moving
//! average. A consistency loss couples the two, and an adaptive filter
//! drops samples whose predictions look noisy.

pub mod analysis;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod numeric;
pub mod sieve;
pub mod synth;
pub mod trainer;

pub use encoder::{
    ema_transfer, Encoder, GradVector, LayerShape, ModelParams, NetOutputs, SetEncoder,
};
pub use error::{Error, Result};
pub use numeric::{RngStream, Vec64};
