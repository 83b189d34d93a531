//! Option-implied variance measures and the cross-section of stock returns.
//!
//! This crate implements an end-to-end empirical pipeline for studying
//! common firm-level "fear" in equity option markets:
//!
//! 1. [`market_data`] — loading and filtering raw option chains, forward
//!    prices via put-call parity, and the supporting equity/rate inputs.
//! 2. [`implied_variance`] — model-free total implied variance per firm-day,
//!    decomposed into an upside ("good") and a downside ("bad") component.
//! 3. [`factor_extraction`] — rolling EM-PCA over the firm-level variance
//!    panel, producing common-fear factor levels and innovations.
//! 4. [`exposures`] — rolling regressions of stock returns on factor
//!    innovations, producing month-end beta estimates.
//! 5. [`portfolio`] — eligibility screens, quantile portfolio sorts,
//!    spread returns, and factor-model alphas.
//! 6. [`cross_section`] — Newey-West/Shanken inference, Fama-MacBeth
//!    regressions, factor-mimicking portfolios, and a three-pass latent
//!    factor estimator with a weak-factor test.
//! 7. [`synth`] — a deterministic synthetic market generator used for
//!    oracle testing and reproducible end-to-end runs.
//! 8. [`report`] — plain-text summary tables for the main estimation
//!    outputs.
//!
//! All randomness is counter-based and seeded; every pipeline stage is
//! deterministic for a fixed input, independent of thread count.

pub mod cross_section;
pub mod exposures;
pub mod factor_extraction;
pub mod implied_variance;
pub mod linalg;
pub mod market_data;
pub mod portfolio;
pub mod report;
pub mod series;
pub mod synth;
