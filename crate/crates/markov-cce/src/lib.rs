//! Decentralized learning of coarse correlated equilibria in multi-player
//! general-sum layered Markov games with independent linear function
//! approximation.
//!
//! The crate is organized bottom-up:
//!
//! * [`rng`] — counter-based reproducible random streams;
//! * [`game_core`] — layered games, policies, trajectory sampling, and the
//!   exact Q-kernel;
//! * [`matstat`] — covariance inverses, magnitude reduction, martingale
//!   deviation bounds, and PSD concentration checks;
//! * [`exp3`] — per-state exponential-weights learners with a deterministic
//!   regret certificate;
//! * [`cce_approx`] — the one-layer equilibrium learner with its
//!   data-dependent pessimistic gap table;
//! * [`v_approx`] — optimistic value refitting by ridge regression;
//! * [`avlpr`] — the epoch-level driver with potential-tracked lazy policy
//!   reuse;
//! * [`evaluation`] — the exact best-response oracle and regret metrics;
//! * [`selftest`] — Monte-Carlo verification suites for the statistical
//!   building blocks;
//! * [`config`] / [`cli`] — experiment configuration, synthetic game
//!   generators, and the command implementations behind the binary.
//!
//! Sample complexity scales with the feature dimension and per-agent action
//! counts, never with the joint action space: every estimator consumes only
//! one agent's own features and losses.

pub mod avlpr;
pub mod cce_approx;
pub mod cli;
pub mod config;
pub mod evaluation;
pub mod exp3;
pub mod game_core;
pub mod matstat;
pub mod rng;
pub mod selftest;
pub mod v_approx;
