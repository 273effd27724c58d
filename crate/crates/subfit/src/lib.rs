//! Bayesian fine-tuning in projected low-rank subspaces.
//!
//! A pretrained weight matrix `W0` is adapted through a frozen projection
//! pair `(A, B)` and a small trainable core `R`, giving effective weights
//! `W = W0 + (alpha/r) * A R B`. Gaussian posteriors over the cores are
//! fitted either from the optimizer trajectory (SWAG) or post hoc around a
//! MAP checkpoint (Laplace, diagonal or Kronecker-factored curvature), and
//! used for model-averaged prediction with entropy-decomposed uncertainty.
//!
//! Modules mirror the pipeline: [`numerics`] (dense linear algebra, seeded
//! randomness), [`projections`] (the four subspace constructions plus
//! hybrids), [`net`] (adapted classifier and MAP training), [`swag`] and
//! [`laplace`] (posteriors), [`predictive`] (model averaging and metrics),
//! [`data`] (CSV datasets and synthetic generators), and [`cli`]
//! (experiment orchestration used by the `subfit` binary).

pub mod cli;
pub mod data;
pub mod error;
pub mod laplace;
pub mod net;
pub mod numerics;
pub mod predictive;
pub mod projections;
pub mod swag;

pub use error::{Error, Result};
