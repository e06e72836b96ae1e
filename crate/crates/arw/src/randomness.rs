//! Deterministic, order-independent instruction stacks.
//!
//! Every site `x` carries an i.i.d. stack of instructions: sleep with
//! probability `lambda_s`, or jump by offset `o` with probability
//! `lambda_j * P(o)`. The stack entry at `(site, k)` is a pure function of
//! `(seed, site, k)` via a counter-based pseudorandom function, so any
//! toppling order reads identical stacks — which is what makes the abelian
//! property a runnable test instead of a trusted assumption.
//!
//! The mixing chain is fixed and portable: fold the seed and each packed
//! coordinate through the SplitMix64 finalizer, then fold the stack index
//! (multiplied by the golden-ratio constant) through two more rounds. The
//! high 53 bits become a uniform in `[0, 1)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ArwError, Result};
use crate::kernel::{JumpKernel, Params, MAX_COORD};
use crate::parallel::{mix64, GOLDEN};

// ---------------------------------------------------------------------------
// Sleep regime
// ---------------------------------------------------------------------------

/// Sleep behavior of a stream: a finite rate, or one of the two degenerate
/// modes. The degenerate modes are explicit flags rather than limits because
/// weak and strong stabilization are themselves characterized by degenerate
/// sleep dynamics on the frozen set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SleepRegime {
    Normal(Params),
    /// `lambda = infinity`: every instruction is a sleep. Sites that cannot
    /// sleep (multiple active particles, or forced jump-outs) consume their
    /// next stack entry as a jump with the offset drawn by the kernel's
    /// inverse CDF — the limit dynamics, in which sleep instructions at such
    /// sites are no-ops executed infinitely fast.
    AlwaysSleep,
    /// `lambda = 0`: sleeping disabled, every instruction is a jump.
    NeverSleep,
}

impl SleepRegime {
    pub fn normal(lambda: f64) -> Result<Self> {
        Ok(SleepRegime::Normal(Params::new(lambda)?))
    }

    #[inline]
    pub fn lambda_s(&self) -> f64 {
        match self {
            SleepRegime::Normal(p) => p.lambda_s(),
            SleepRegime::AlwaysSleep => 1.0,
            SleepRegime::NeverSleep => 0.0,
        }
    }

    #[inline]
    pub fn lambda_j(&self) -> f64 {
        1.0 - self.lambda_s()
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            SleepRegime::Normal(p) => Some(p.lambda()),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<&Params> {
        match self {
            SleepRegime::Normal(p) => Some(p),
            _ => None,
        }
    }

    pub fn degenerate_name(&self) -> Option<String> {
        match self {
            SleepRegime::Normal(_) => None,
            SleepRegime::AlwaysSleep => Some("always-sleep".into()),
            SleepRegime::NeverSleep => Some("never-sleep".into()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SleepRegime::Normal(p) => format!("lambda={}", p.lambda()),
            SleepRegime::AlwaysSleep => "lambda=inf".into(),
            SleepRegime::NeverSleep => "lambda=0".into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Instructions
// ---------------------------------------------------------------------------

/// A single stack entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Instruction {
    Sleep,
    Jump { offset: Vec<i64> },
}

/// Internal zero-allocation form; the jump carries a support index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RawInstruction {
    Sleep,
    Jump(usize),
}

/// Deterministic instruction stacks for one `(seed, kernel, regime)` triple.
///
/// Immutable and cheaply cloneable; safe to share across worker threads.
#[derive(Debug, Clone)]
pub struct InstructionStream {
    seed: u64,
    kernel: Arc<JumpKernel>,
    regime: SleepRegime,
    /// `lambda_s + lambda_j * cdf` per support atom: decoding an entry is a
    /// threshold scan on the raw uniform, with no division in the hot loop.
    thresholds: Vec<f64>,
}

impl InstructionStream {
    pub fn new(seed: u64, kernel: Arc<JumpKernel>, regime: SleepRegime) -> Self {
        let ls = regime.lambda_s();
        let lj = regime.lambda_j();
        let mut acc = ls;
        let thresholds = kernel
            .support()
            .iter()
            .map(|a| {
                acc += lj * a.prob;
                acc
            })
            .collect();
        InstructionStream { seed, kernel, regime, thresholds }
    }

    #[inline]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn kernel(&self) -> &JumpKernel {
        &self.kernel
    }

    #[inline]
    pub fn kernel_arc(&self) -> Arc<JumpKernel> {
        Arc::clone(&self.kernel)
    }

    #[inline]
    pub fn regime(&self) -> &SleepRegime {
        &self.regime
    }

    /// Per-site hash; hot loops cache one per volume slot.
    #[inline]
    pub fn site_key(&self, site: &[i64]) -> u64 {
        let mut h = mix64(self.seed ^ 0x4152_575f_5354_4b31);
        for &c in site {
            h = mix64(h ^ (c as u64).wrapping_mul(GOLDEN));
        }
        h
    }

    /// Uniform in `[0, 1)` for stack entry `k` at a hashed site.
    #[inline(always)]
    pub fn uniform_at(&self, site_key: u64, k: u64) -> f64 {
        let h = mix64(mix64(site_key ^ k.wrapping_mul(GOLDEN)));
        (h >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Decode stack entry `k` at a hashed site.
    #[inline(always)]
    pub(crate) fn raw_instruction(&self, site_key: u64, k: u64) -> RawInstruction {
        match self.regime {
            SleepRegime::Normal(p) => {
                let u = self.uniform_at(site_key, k);
                if u < p.lambda_s() {
                    RawInstruction::Sleep
                } else {
                    let last = self.thresholds.len() - 1;
                    let mut idx = last;
                    for i in 0..last {
                        if u < self.thresholds[i] {
                            idx = i;
                            break;
                        }
                    }
                    RawInstruction::Jump(idx)
                }
            }
            SleepRegime::AlwaysSleep => RawInstruction::Sleep,
            SleepRegime::NeverSleep => {
                RawInstruction::Jump(self.kernel.offset_index_by_cdf(self.uniform_at(site_key, k)))
            }
        }
    }

    /// Jump offset for a toppling that cannot sleep, consuming entry `k`.
    /// Agrees with the jump marginal of `raw_instruction` conditioned on
    /// jumping, and is the only way entries are read in the `AlwaysSleep`
    /// regime at multi-particle sites.
    #[inline(always)]
    pub(crate) fn forced_jump(&self, site_key: u64, k: u64) -> usize {
        self.kernel.offset_index_by_cdf(self.uniform_at(site_key, k))
    }

    /// Public stack query with range validation.
    pub fn instruction(&self, site: &[i64], k: u64) -> Result<Instruction> {
        if site.len() != self.kernel.dim() {
            return Err(ArwError::InvalidArgument(format!(
                "site arity {} does not match kernel dimension {}",
                site.len(),
                self.kernel.dim()
            )));
        }
        if site.iter().any(|c| c.abs() >= MAX_COORD) {
            return Err(ArwError::SiteRange(format!("{site:?}")));
        }
        let key = self.site_key(site);
        Ok(match self.raw_instruction(key, k) {
            RawInstruction::Sleep => Instruction::Sleep,
            RawInstruction::Jump(i) => Instruction::Jump {
                offset: self.kernel.offset(i).to_vec(),
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Chi-square self-test
// ---------------------------------------------------------------------------

/// Outcome of the marginal self-test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ChiSquareStatus {
    Passed,
    Failed,
    /// Degenerate regimes have a single outcome; nothing to test.
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub status: ChiSquareStatus,
    pub statistic: f64,
    pub degrees_of_freedom: u64,
    pub p_value: f64,
    pub samples: u64,
}

/// Chi-square test of empirical sleep/jump-offset frequencies against
/// `(lambda_s, lambda_j * P(o))`, pooling `depth` stack entries from each
/// listed site.
pub fn chi_square_marginals(
    stream: &InstructionStream,
    sites: &[Vec<i64>],
    depth: u64,
) -> Result<ChiSquareReport> {
    if depth < 1000 {
        return Err(ArwError::InvalidArgument("depth must be >= 1000".into()));
    }
    if sites.is_empty() {
        return Err(ArwError::InvalidArgument("need at least one site".into()));
    }
    let regime = stream.regime();
    if regime.params().is_none() {
        return Ok(ChiSquareReport {
            status: ChiSquareStatus::Skipped,
            statistic: 0.0,
            degrees_of_freedom: 0,
            p_value: 1.0,
            samples: 0,
        });
    }
    let ls = regime.lambda_s();
    let lj = regime.lambda_j();
    let kernel = stream.kernel();
    let bins = 1 + kernel.support().len();
    let mut counts = vec![0u64; bins];
    for site in sites {
        if site.iter().any(|c| c.abs() >= MAX_COORD) {
            return Err(ArwError::SiteRange(format!("{site:?}")));
        }
        let key = stream.site_key(site);
        for k in 0..depth {
            match stream.raw_instruction(key, k) {
                RawInstruction::Sleep => counts[0] += 1,
                RawInstruction::Jump(i) => counts[1 + i] += 1,
            }
        }
    }
    let total = (sites.len() as u64 * depth) as f64;
    let mut expected = Vec::with_capacity(bins);
    expected.push(ls * total);
    for atom in kernel.support() {
        expected.push(lj * atom.prob * total);
    }
    let statistic: f64 = counts
        .iter()
        .zip(&expected)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&c, &e)| (c as f64 - e).powi(2) / e)
        .sum();
    let df = (expected.iter().filter(|&&e| e > 0.0).count() - 1) as u64;
    let p_value = chi_square_sf(statistic, df as f64);
    Ok(ChiSquareReport {
        status: if p_value > 1e-3 {
            ChiSquareStatus::Passed
        } else {
            ChiSquareStatus::Failed
        },
        statistic,
        degrees_of_freedom: df,
        p_value,
        samples: sites.len() as u64 * depth,
    })
}

/// Survival function of the chi-square distribution.
fn chi_square_sf(x: f64, df: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if x <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df) {
        Ok(d) => 1.0 - d.cdf(x),
        Err(_) => 1.0,
    }
}
