//! Conditional densities of missing values.
//!
//! Two estimators of `p(x_m | x_o)` are provided:
//!
//! * a classical mixture of factor analyzers ([`mfa`]) trained on complete
//!   data and conditioned in closed form ([`conditional`]);
//! * a deep model ([`dmfa`]) whose network maps a masked input to the
//!   parameters of a factor Gaussian over the full data space and is trained
//!   on the negative log-likelihood of the missing coordinates only.
//!
//! Both share the low-rank Gaussian algebra in [`lowrank`].

// `!(x > 0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod conditional;
pub mod dmfa;
pub mod error;
pub mod eval;
pub mod lowrank;
pub mod masking;
pub mod mfa;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensorio;
pub mod trainer;

pub use conditional::{conditional_gaussian, conditional_mixture, mixture_imputation, Imputation, SplitIndex};
pub use error::{Error, Result};
pub use lowrank::FactorGaussian;
pub use masking::{apply_mask, random_patch_mask, Mask, MaskedSample};
pub use mfa::{MfaModel, MfaTrainConfig};
pub use scalar::Real;
pub use tensorio::{Dataset, ImageShape};
