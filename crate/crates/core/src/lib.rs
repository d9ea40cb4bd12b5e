//! Orthogonalized multidimensional Teugel martingales and the stochastic
//! maximum principle for systems driven by them.
//!
//! The crate is organized bottom-up:
//!
//! - [`multiindex`], [`levy`]: multi-indices, finite-activity Lévy models and
//!   the moments of their jump measure.
//! - [`basis`]: Gram matrix of compensated power-jump processes, monic
//!   Gram-Schmidt, and path-wise evaluation of the resulting martingales.
//! - [`pathsim`]: path sampling, controls, controlled forward SDEs, cost and
//!   terminal constraints.
//! - [`bsde`]: regression-based backward solver for BSDEs driven by the
//!   truncated martingale family.
//! - [`smp`]: Hamiltonian, adjoint equations, variational equations, rate
//!   experiments, constraint geometry and the maximum-condition checker.
//! - [`config`], [`cli`]: JSON configuration, the problem catalog and the
//!   subcommands behind the `teugel-smp` binary.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod basis;
pub mod bsde;
pub mod cli;
pub mod config;
pub mod error;
pub mod levy;
pub mod lq;
pub mod multiindex;
pub mod pathsim;
pub mod poly;
pub mod quadrature;
pub mod smp;
pub mod stats;

pub use basis::{BasisEvaluator, JumpPath, TeugelBasis};
pub use error::{Error, Result};
pub use levy::{LevyModel, MomentTable};
pub use multiindex::MultiIndex;
