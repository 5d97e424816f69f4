//! Estimation of age-specific incidence, case fatality and remission for a
//! three-state illness-death process from aggregate count data (mortality,
//! prevalence, incidence, remission), with penalized-spline age curves,
//! optional hierarchical area and additive gender effects, calendar-time
//! trends, posterior-mode and MCMC inference, and model checking.

pub mod check;
pub mod error;
pub mod infer;
pub mod markov;
pub mod model;
pub mod prep;
pub mod simulate;
pub mod spline;

mod dual;
mod par;
mod special;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
