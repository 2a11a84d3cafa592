//! Adversarial evasion attacks for classifiers with high-dimensional
//! categorical inputs.
//!
//! The crate ships a bandit-driven attack (gradient-ranked candidate
//! features explored with a variance-aware UCB policy), the standard
//! domain-agnostic baselines (forward stepwise greedy search, its
//! gradient-restricted variant, single-flip gradient attack, random-subset
//! UCB), an exhaustive oracle, query-accounting formulas, a regret-bound
//! checker with a stationary-bandit simulator, and a benchmark runner that
//! reports success rate, query counts, changed-feature counts and runtimes.

pub mod analysis;
pub mod attacks;
pub mod bandit;
pub mod bench;
pub mod categorical;
pub mod classifier;
pub mod error;
pub mod io;

pub use error::{Error, Result};
