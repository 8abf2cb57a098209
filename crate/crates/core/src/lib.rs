//! Finite-horizon stochastic optimal control with an observable parameter
//! process given as a scenario tree.
//!
//! The state follows a controlled diffusion on a box domain, killed at the
//! boundary; an exogenous process Z, visible to the controller, is specified
//! only through a finite scenario tree of values and transition
//! probabilities.  The value function conditioned on the observations,
//!
//!   V(x, t_k | node) = E[ integral of phi(X_s, u_s, Z_s, s) ds | F^Z ],
//!
//! satisfies a backward fixed-point equation over the tree: a
//! Hamilton-Jacobi-Bellman step on each edge, with the continuation value
//! given by the conditional expectation over the node's children.  This
//! crate discretizes that equation with a monotone upwind scheme and a
//! theta-weighted time step, extracts feedback policies by Howard's policy
//! iteration, and cross-validates the result two independent ways: a
//! forward Fokker-Planck sweep whose discrete duality with the backward
//! sweep is exact to solver precision, and a Monte-Carlo path engine with
//! an explicit discretization-bias allowance.
//!
//! Well-posedness of the underlying equation (the Cordes conditions for
//! strong solutions with control-dependent second-order coefficients) is
//! certified numerically per problem; solver entry points refuse a problem
//! whose certificate fails unless explicitly overridden.
//!
//! Modules, bottom up: [`error`], [`linalg`] and [`expr`] are plumbing;
//! [`grid`], [`tree`] and [`problem`] define the inputs; [`pde`] holds the
//! stencils, sweeps and duality pairing; [`cordes`] the certification;
//! [`hjb`] the policy-iteration solver; [`mc`] the sampling oracle and
//! chattering mixtures; [`fields`], [`report`], [`config`] and [`preset`]
//! the I/O surface.

pub mod config;
pub mod cordes;
pub mod error;
pub mod expr;
pub mod fields;
pub mod grid;
pub mod hjb;
pub mod linalg;
pub mod mc;
pub mod pde;
pub mod preset;
pub mod problem;
pub mod report;
pub mod tree;
