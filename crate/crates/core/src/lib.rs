//! Variational recurrent sequence models with adversarial domain adaptation
//! for irregular multivariate time series.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors on a reverse-mode tape that supports
//!   gradients of gradients (required by the critic's gradient penalty).
//! - [`nn`]: dense layers, LSTM cells, seeded initialization, checkpoints.
//! - [`vrnn`]: the variational RNN (per-step prior/posterior/decoder,
//!   sequence ELBO, last-step classifier).
//! - [`adversarial`]: LSTM sequence critic and Wasserstein losses with
//!   gradient penalty.
//! - [`frameworks`]: the trainable model variants, from plain VRNNs to
//!   adversarial domain unification and global/local domain separation.
//! - [`trainer`]: NAdam, the rotating three-optimizer schedule, early
//!   stopping, and cross-validation.
//! - [`data`]: synthetic two-domain generator with controllable covariate
//!   shift and systematic bias, plus the aggregation / carry-forward /
//!   imputation pipeline.
//! - [`report`]: classification metrics and result emission.

pub mod adversarial;
pub mod data;
pub mod error;
pub mod frameworks;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod trainer;
pub mod vrnn;

pub use error::{Error, Result};
pub use tensor::{grad, Tape, Tensor};
