//! Correct-by-design controller synthesis for discrete-time stochastic
//! nonlinear systems over finite horizons.
//!
//! The pipeline turns a continuous-state stochastic system into a finite
//! Markov decision process by gridding the state space and lattice-sampling
//! the input space, then searches for a finite-state controller that
//! maximizes the probability of satisfying a safety or reach-avoid task.
//! Exhaustive dynamic programming over every lattice input is replaced by a
//! guided search: a small policy network, trained by imitation on expert
//! demonstrations, proposes an input per abstract state and the backward
//! recursion only scores a local lattice window around that proposal.
//! Between rounds the synthesized table is lifted back into a training set
//! and the network is refit, so the proposals and the table improve
//! together until the average satisfaction probability clears a threshold.
//!
//! Module map:
//! - [`geom`]: axis-aligned boxes shared by every layer.
//! - [`model`]: system descriptions and their Gaussian transition kernels.
//! - [`gp`]: per-dimension Gaussian-process regression for model error.
//! - [`bench`]: the built-in benchmark systems.
//! - [`grid`]: the state/input discretization and transition rows.
//! - [`dataset`]: timed state/input training pairs and their CSV form.
//! - [`policy`]: the squashed multilayer perceptron and its training loop.
//! - [`controller`]: task descriptions and synthesized controller tables.
//! - [`synth`]: guided and exhaustive value iteration, the refinement loop.
//! - [`sim`]: closed-loop simulation, empirical estimates, expert data.

pub mod bench;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod gp;
pub mod grid;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};
