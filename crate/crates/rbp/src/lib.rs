//! Discrete graphical-model inference with pluggable message-passing
//! schedulers.
//!
//! The engine runs loopy belief propagation (sum-product or max-product) on a
//! cluster graph under one of five scheduling strategies — synchronous,
//! round-robin, naive asynchronous, tree-based, and residual-greedy — so the
//! strategies can be compared on convergence success, message cost, and
//! marginal quality. Exact oracles (enumeration, variable elimination) and
//! contraction-rate estimation support the comparisons.

pub mod analysis;
pub mod bench;
pub mod heap;
pub mod model;
pub mod oracle;
pub mod propagation;
pub mod rng;
pub mod schedulers;
