//! Sequence generation trained with maximum-entropy inverse reinforcement
//! learning.
//!
//! A reward approximator `r_phi(s, a)` is fit to a training corpus with
//! self-normalized importance sampling while an LSTM generator is optimized
//! with an entropy-regularized policy gradient. The two updates alternate
//! (r-steps and g-steps) after an MLE warm start.
//!
//! Module map:
//!
//! - [`numerics`]: matrices, parameter stores, Adam, seeded streams, gradient checks
//! - [`policy`]: the LSTM generator (sampling, scoring, MLE gradients, entropy)
//! - [`reward`]: the reward approximator and the r-step gradient
//! - [`trainer`]: return estimation, the g-step gradient and the alternating loop
//! - [`oracle`]: synthetic-oracle data and NLL scoring
//! - [`metrics`]: sentence BLEU, forward/backward BLEU and their harmonic mean
//! - [`corpus`]: vocabulary, frequency filtering and token files
//! - [`checkpoint`], [`config`], [`cli`]: persistence and the command line
//!
//! All gradients are hand-derived. Every optimizer in this crate performs
//! gradient *ascent* on an objective; losses shown to users are negated
//! objectives.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
mod error;
pub(crate) mod lstm;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{AdamConfig, AdamState, Mat, ParamStore, RngStream};
pub use policy::{GeneratorDims, GeneratorParams, LstmState, SeqMode, Trajectory};
pub use reward::{ImportanceWeights, RewardDims, RewardParams};
pub use trainer::{Baseline, TrainConfig, TrainReport};

/// Reserved id of the start-of-sequence symbol.
pub const BOS: usize = 0;
/// Reserved id of the end-of-sequence symbol.
pub const EOS: usize = 1;
/// Number of reserved ids at the bottom of every vocabulary.
pub const NUM_RESERVED: usize = 2;
