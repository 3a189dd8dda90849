//! Cross-modal knowledge distillation with mutual learning.
//!
//! A teacher trained on one modality labels paired samples of a second
//! modality; one or more students on that second modality learn from the
//! teacher's predictions (KL on softened distributions or hard-label
//! cross-entropy) and, optionally, from each other.
//!
//! * [`nn`]: dense networks, softened softmax, backpropagation, SGD, gradient checks.
//! * [`losses`]: KL, hard-label cross-entropy and mutual-learning losses with logit gradients.
//! * [`data`]: synthetic paired datasets, subject-disjoint splits, label noise, teacher caching.
//! * [`trainer`]: supervised, distillation and mutual training loops; ensembles; evaluation.
//! * [`experiment`]: configuration, sweeps and CSV/summary reports behind the `xmodal` binary.

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
