//! Doubly robust estimation of the average treatment effect on the treated
//! (ATT) that is consistent under *either* a conditional parallel-trends
//! assumption or a conditional synthetic-control assumption.
//!
//! The estimator combines three cross-fitted nuisance components — outcome
//! surfaces m̂_{g,t}(x) from kernel local-polynomial least squares, group
//! propensity ratios r̂_{1,g}(x) = p̂₁(x)/p̂_g(x) from a direct local-polynomial
//! ratio regression, and synthetic-control weight functions ŵ_g(x) solved by
//! least squares on the pre-treatment outcome surfaces — into the moment
//!
//! ```text
//! φ(S) = (1/π₁) · (𝒢₁ − Σ_{g≥2} ŵ_g(X)·r̂_{1,g}(X)·𝒢_g) · (ΔY − m̂_Δ(X)),
//! ```
//!
//! whose sample average is θ̂. Inference is by a multiplier bootstrap that
//! refits every nuisance under mean-1/variance-1 random weights, plus plug-in
//! influence-function variance diagnostics.
//!
//! Module map:
//! - [`data`] — dataset containers, CSV ingestion, validation, and
//!   cross-fitting fold assignment.
//! - [`kernel_regression`] — kernels, weighted local-polynomial least squares,
//!   and the undersmoothed bandwidth rule.
//! - [`nuisance`] — cross-fitted outcome and propensity-ratio surfaces with
//!   discrete-covariate stratification.
//! - [`weights`] — synthetic-control weight systems and solves.
//! - [`estimator`] — moment evaluation and ATT estimation for panel,
//!   repeated-cross-section, and staggered-adoption designs.
//! - [`inference`] — multiplier bootstrap and influence diagnostics.
//! - [`simulation`] — calibrated data-generating processes and a Monte Carlo
//!   harness.

// Guards written as `!(x > 0.0)` are deliberate: unlike `x <= 0.0`, the
// negated form also rejects NaN, which is exactly what every such validity
// check here wants.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod kernel_regression;
pub mod nuisance;
pub mod simulation;
pub mod weights;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// FNV-1a 64-bit hash. Used to derive RNG salts from string labels so that
/// seeding depends on *what* a group is called, never on the order groups
/// happen to be listed in.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a base seed with two salts into an independent 64-bit seed
/// (splitmix64 finalizer). Used to derive per-replication and per-purpose RNG
/// seeds so that execution order and parallel scheduling can never affect
/// results.
pub(crate) fn mix_seed(seed: u64, salt_a: u64, salt_b: u64) -> u64 {
    let mut z = seed
        ^ salt_a.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ salt_b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
