//! Stochastic maximum principle: Hamiltonian, adjoints, variational
//! expansions, constraint geometry and the maximum-condition check.

pub mod adjoint;
pub mod geometry;
pub mod hamiltonian;
pub mod variational;
pub mod maximum;
