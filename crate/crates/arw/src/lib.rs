//! Simulation and exact-computation laboratory for activated random walk
//! (ARW) on `Z^d`.
//!
//! Active particles perform random walks governed by a translation-invariant
//! jump kernel and fall asleep at rate `lambda`; sleeping particles wake when
//! visited. Everything here is built on the site-wise (Diaconis–Fulton)
//! representation: each site carries a deterministic stack of instructions,
//! so stabilization outcomes are independent of toppling order and every
//! experiment is replayable from a single seed.
//!
//! Module map:
//!
//! * [`kernel`] — jump kernels, volumes, single-walk analytics (Green's
//!   function, escape and sleep-at-origin probabilities).
//! * [`randomness`] — counter-based instruction stacks.
//! * [`engine`] — configurations, odometers, toppling, and legal / weak /
//!   strong stabilization, including strong-via-weak with chance counting.
//! * [`procedures`] — composite experiments: the carpet procedure,
//!   gambler's-ruin escape odds, hole statistics, single-excursion chances.
//! * [`oracle`] — exact stabilization distributions on tiny volumes via an
//!   absorbing-Markov-chain solve.
//! * [`estimators`] — Monte Carlo campaigns: occupation curves, critical
//!   density estimation, lambda sweeps, mass-conservation checks.

pub mod engine;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod oracle;
pub mod parallel;
pub mod procedures;
pub mod randomness;
pub mod report;

pub use engine::{Configuration, Mode, OdometerMap, SchedulerPolicy, StabilizationRecord};
pub use error::{ArwError, Result};
pub use kernel::{JumpKernel, Params, Volume, WalkAnalytics};
pub use randomness::{Instruction, InstructionStream, SleepRegime};
pub use report::EstimateReport;

/// Crate version embedded in every emitted report for replay provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
