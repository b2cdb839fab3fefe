//! Wasserstein tube MPC (WT-MPC) for stochastic LTI systems with
//! distributionally robust CVaR state constraints, plus the robust tube MPC
//! (RT-MPC) baseline and a Monte Carlo experiment harness.
//!
//! The crate is layered bottom-up:
//!
//! * [`geometry`] — exact polytope arithmetic in dimension `d <= 3`
//!   (Minkowski sum, Pontryagin difference, support functions, hulls).
//! * [`lti`] — the plant, its nominal/error decomposition, stacked error
//!   matrices, tube supports and noise sample management.
//! * [`ambiguity`] — Wasserstein ambiguity sets over noise and state:
//!   empirical centers, pseudoinverse-weighted transport costs, exact
//!   propagation through the error dynamics.
//! * [`drcvar`] — CVaR, the exact convex reformulation of the worst-case
//!   CVaR constraint into affine + second-order cone blocks, and the
//!   recursive-feasibility tightening.
//! * [`conic`] — solver-agnostic conic program representation backed by an
//!   interior-point solver.
//! * [`mpc`] — the receding-horizon controllers (WT-MPC and RT-MPC) and the
//!   terminal invariant set.
//! * [`harness`] — Monte Carlo open-/closed-loop studies, CSV emission and
//!   the configuration surface of the `wtmpc` CLI.

pub mod ambiguity;
pub mod conic;
pub mod drcvar;
pub mod geometry;
pub mod harness;
pub mod lti;
pub mod mpc;
#[cfg(test)]
pub(crate) mod testutil;

pub use geometry::Polytope;
