//! Monte Carlo campaigns: occupation-probability curves, critical-density
//! estimation by bisection on a mass-retention criterion, lambda sweeps,
//! and mass-conservation checks.
//!
//! Every campaign derives replica seeds from `(root_seed, cell, replica)`
//! and merges results in replica order, so outputs are bit-identical for a
//! fixed seed regardless of worker count.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::engine::{stabilize, Configuration, Mode, SchedulerPolicy, SiteContent};
use crate::error::{ArwError, Result};
use crate::kernel::{JumpKernel, Volume};
use crate::parallel::{self, domain};
use crate::randomness::{InstructionStream, SleepRegime};
use crate::report::{EstimateReport, ReportMeta};

/// Spec defaults for the critical-density estimator.
pub const DEFAULT_EPSILON: f64 = 0.02;
pub const DEFAULT_TOL: f64 = 0.01;
pub const DEFAULT_REPLICAS_PER_POINT: u64 = 2000;

/// Budget-exhausted replica rate above which a campaign fails outright.
const MAX_BUDGET_FAILURE_RATE: f64 = 0.001;

// ---------------------------------------------------------------------------
// Initial laws
// ---------------------------------------------------------------------------

/// Law of the initial configuration.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    /// One active particle per site independently with probability `rho`.
    Bernoulli(f64),
    /// I.i.d. Poisson(`rho`) active particles per site.
    Poisson(f64),
    /// One active particle at every site of the centered ball.
    FilledBall(i64),
    /// A fixed configuration.
    Literal(Configuration),
}

impl InitialLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Bernoulli(rho) if !(0.0..=1.0).contains(rho) => Err(
                ArwError::InvalidArgument(format!("Bernoulli density {rho} outside [0, 1]")),
            ),
            InitialLaw::Poisson(rho) if !(*rho >= 0.0) => Err(ArwError::InvalidArgument(
                format!("Poisson density {rho} must be nonnegative"),
            )),
            _ => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            InitialLaw::Bernoulli(rho) => format!("bernoulli({rho})"),
            InitialLaw::Poisson(rho) => format!("poisson({rho})"),
            InitialLaw::FilledBall(r) => format!("filled-ball({r})"),
            InitialLaw::Literal(_) => "literal".into(),
        }
    }

    pub fn density(&self) -> Option<f64> {
        match self {
            InitialLaw::Bernoulli(rho) | InitialLaw::Poisson(rho) => Some(*rho),
            _ => None,
        }
    }

    /// Sample an initial configuration. Sites are visited in index order so
    /// the draw is reproducible.
    pub fn sample(&self, volume: &Arc<Volume>, rng: &mut ChaCha8Rng) -> Result<Configuration> {
        self.validate()?;
        match self {
            InitialLaw::Bernoulli(rho) => {
                let mut c = Configuration::empty(Arc::clone(volume));
                for idx in 0..volume.len() {
                    if rng.random::<f64>() < *rho {
                        c.set_index(idx, SiteContent::Active(1));
                    }
                }
                Ok(c)
            }
            InitialLaw::Poisson(rho) => {
                let mut c = Configuration::empty(Arc::clone(volume));
                if *rho == 0.0 {
                    return Ok(c);
                }
                let poisson = rand_distr::Poisson::new(*rho).map_err(|e| {
                    ArwError::InvalidArgument(format!("bad Poisson density: {e}"))
                })?;
                for idx in 0..volume.len() {
                    let draw: f64 = poisson.sample(rng);
                    let n = draw.min(u32::MAX as f64 - 2.0) as u32;
                    if n > 0 {
                        c.set_index(idx, SiteContent::Active(n));
                    }
                }
                Ok(c)
            }
            InitialLaw::FilledBall(r) => Configuration::fill_ball(Arc::clone(volume), *r),
            InitialLaw::Literal(c) => {
                if c.volume() != volume {
                    return Err(ArwError::InvalidArgument(
                        "literal configuration built on a different volume".into(),
                    ));
                }
                Ok(c.clone())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Occupation probability
// ---------------------------------------------------------------------------

/// Estimate `P(0 in Stab_V eta)` under legal stabilization for one initial
/// law. Budget-exhausted replicas are excluded from the point estimate and
/// counted in the report; a rate above 0.1% fails the run.
pub fn occupation_point(
    kernel: &Arc<JumpKernel>,
    regime: &SleepRegime,
    volume: &Arc<Volume>,
    law: &InitialLaw,
    replicas: u64,
    seed: u64,
    cell: u64,
) -> Result<EstimateReport> {
    if replicas == 0 {
        return Err(ArwError::InvalidArgument("replicas must be >= 1".into()));
    }
    law.validate()?;
    let outcomes: Vec<Option<bool>> = parallel::replica_map(replicas, |rep| {
        let mut init_rng =
            ChaCha8Rng::seed_from_u64(parallel::derive_seed(seed, domain::INITIAL, cell, rep));
        let config = law.sample(volume, &mut init_rng).expect("validated law samples");
        if config.total_mass() == 0 {
            return Some(false);
        }
        let stream = InstructionStream::new(
            parallel::derive_seed(seed, domain::INSTRUCTIONS, cell, rep),
            Arc::clone(kernel),
            *regime,
        );
        match stabilize(
            &config,
            &stream,
            &Mode::Legal,
            SchedulerPolicy::DepthFirst,
            crate::engine::DEFAULT_MAX_TOPPLINGS,
        ) {
            Ok(record) => Some(record.final_config.origin_occupied()),
            Err(ArwError::BudgetExhausted { .. }) => None,
            Err(e) => panic!("stabilization failed: {e}"),
        }
    });
    let excluded = outcomes.iter().filter(|o| o.is_none()).count() as u64;
    if (excluded as f64) > MAX_BUDGET_FAILURE_RATE * replicas as f64 {
        return Err(ArwError::EstimatorUnstable(format!(
            "{excluded} of {replicas} replicas exhausted the toppling budget"
        )));
    }
    let effective = replicas - excluded;
    let successes = outcomes.iter().filter(|o| **o == Some(true)).count() as u64;
    let meta = ReportMeta {
        lambda: regime.lambda(),
        regime: regime.degenerate_name(),
        kernel: Some(kernel.describe()),
        volume: Some(volume.describe()),
        density: law.density(),
        initial_law: Some(law.describe()),
        excluded,
        ..ReportMeta::default()
    };
    Ok(EstimateReport::proportion(successes, effective.max(1), seed, meta))
}

/// Occupation-probability curve over a density grid.
pub fn occupation_curve(
    kernel: &Arc<JumpKernel>,
    regime: &SleepRegime,
    volume: &Arc<Volume>,
    poisson: bool,
    rho_grid: &[f64],
    replicas: u64,
    seed: u64,
) -> Result<Vec<EstimateReport>> {
    if rho_grid.is_empty() {
        return Err(ArwError::InvalidArgument("density grid is empty".into()));
    }
    rho_grid
        .iter()
        .enumerate()
        .map(|(i, &rho)| {
            let law = if poisson {
                InitialLaw::Poisson(rho)
            } else {
                InitialLaw::Bernoulli(rho)
            };
            occupation_point(kernel, regime, volume, &law, replicas, seed, i as u64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Critical density
// ---------------------------------------------------------------------------

/// One probed point of the bisection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rho: f64,
    pub p: f64,
    pub stderr: f64,
    /// Replicas actually spent; decisive probes stop early.
    pub replicas: u64,
    /// Whether the mass-retention criterion `p >= rho - epsilon` held.
    pub criterion_holds: bool,
}

const PROBE_BATCH: u64 = 200;

/// Estimate one bisection probe in replica batches, stopping as soon as the
/// criterion margin reaches five standard errors (with at least two batches
/// spent). Replica seeds depend only on `(seed, probe, replica)`, so an
/// early stop evaluates a prefix of the same deterministic sequence.
#[allow(clippy::too_many_arguments)]
fn probe_criterion(
    kernel: &Arc<JumpKernel>,
    regime: &SleepRegime,
    volume: &Arc<Volume>,
    rho: f64,
    epsilon: f64,
    replicas_per_point: u64,
    seed: u64,
    probe: u64,
) -> Result<CurvePoint> {
    let threshold = rho - epsilon;
    let mut successes = 0u64;
    let mut excluded = 0u64;
    let mut done = 0u64;
    while done < replicas_per_point {
        let batch = PROBE_BATCH.min(replicas_per_point - done);
        let outcomes: Vec<Option<bool>> = parallel::replica_map(batch, |i| {
            let rep = done + i;
            let mut init_rng = ChaCha8Rng::seed_from_u64(parallel::derive_seed(
                seed,
                domain::INITIAL,
                probe,
                rep,
            ));
            let config = InitialLaw::Bernoulli(rho)
                .sample(volume, &mut init_rng)
                .expect("valid density");
            if config.total_mass() == 0 {
                return Some(false);
            }
            let stream = InstructionStream::new(
                parallel::derive_seed(seed, domain::INSTRUCTIONS, probe, rep),
                Arc::clone(kernel),
                *regime,
            );
            match stabilize(
                &config,
                &stream,
                &Mode::Legal,
                SchedulerPolicy::DepthFirst,
                crate::engine::DEFAULT_MAX_TOPPLINGS,
            ) {
                Ok(record) => Some(record.final_config.origin_occupied()),
                Err(ArwError::BudgetExhausted { .. }) => None,
                Err(e) => panic!("stabilization failed: {e}"),
            }
        });
        done += batch;
        excluded += outcomes.iter().filter(|o| o.is_none()).count() as u64;
        successes += outcomes.iter().filter(|o| **o == Some(true)).count() as u64;
        if (excluded as f64) > MAX_BUDGET_FAILURE_RATE * replicas_per_point as f64 {
            return Err(ArwError::EstimatorUnstable(format!(
                "{excluded} replicas exhausted the toppling budget at rho = {rho}"
            )));
        }
        let effective = (done - excluded).max(1) as f64;
        let p = successes as f64 / effective;
        let se = (p.max(1e-9) * (1.0 - p).max(1e-9) / effective).sqrt();
        if done >= 2 * PROBE_BATCH && (p - threshold).abs() > 5.0 * se {
            break;
        }
    }
    let effective = (done - excluded).max(1) as f64;
    let p = successes as f64 / effective;
    Ok(CurvePoint {
        rho,
        p,
        stderr: (p.max(1e-9) * (1.0 - p).max(1e-9) / effective).sqrt(),
        replicas: done - excluded,
        criterion_holds: p >= threshold,
    })
}

/// Critical-density estimate with its audit trail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoCEstimate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub regime: String,
    /// Volume radius: the estimate runs on `B_n`.
    pub n: i64,
    pub rho_hat: f64,
    pub bracket: (f64, f64),
    pub epsilon: f64,
    pub tol: f64,
    pub replicas_per_point: u64,
    pub root_seed: u64,
    /// Every probed point, in probe order.
    pub curve: Vec<CurvePoint>,
}

/// Bisection on `rho in [0, 1]` against the fixed-point criterion
/// `p_n(rho) >= rho - epsilon` (mass retained means subcritical side),
/// stopping when the bracket is narrower than `tol`.
///
/// Probes run in fixed-size replica batches and stop early once the
/// criterion margin is decisive at five standard errors; borderline probes
/// spend the full `replicas_per_point` budget. Batching is a prefix of the
/// same seeded replica sequence, so results stay deterministic and
/// worker-count independent. Finite-volume bias is acknowledged and
/// reported through the bracket and the probed curve, not hidden.
pub fn estimate_rho_c(
    kernel: &Arc<JumpKernel>,
    regime: &SleepRegime,
    n: i64,
    epsilon: f64,
    replicas_per_point: u64,
    tol: f64,
    seed: u64,
) -> Result<RhoCEstimate> {
    if !(epsilon > 0.0) {
        return Err(ArwError::InvalidArgument("epsilon must be positive".into()));
    }
    if !(tol > 0.0) {
        return Err(ArwError::InvalidArgument("tol must be positive".into()));
    }
    let volume = Arc::new(Volume::centered_box(kernel.dim(), n)?);
    let mut lo = 0.0f64; // criterion holds trivially at rho = 0
    let mut hi = 1.0f64;
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut probe_index = 0u64;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let report = probe_criterion(
            kernel,
            regime,
            &volume,
            mid,
            epsilon,
            replicas_per_point,
            seed,
            probe_index,
        )?;
        probe_index += 1;
        let holds = report.p >= mid - epsilon;
        curve.push(report);
        if holds {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // The probed occupation curve should be nondecreasing in rho up to
    // Monte Carlo noise; a decisive inversion means the criterion cannot be
    // trusted at this resolution.
    let mut sorted: Vec<&CurvePoint> = curve.iter().collect();
    sorted.sort_by(|a, b| a.rho.partial_cmp(&b.rho).unwrap());
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.p > b.p + 4.0 * (a.stderr + b.stderr) {
            return Err(ArwError::EstimatorUnstable(format!(
                "occupation curve inverted beyond noise: p({}) = {} vs p({}) = {}",
                a.rho, a.p, b.rho, b.p
            )));
        }
    }

    Ok(RhoCEstimate {
        lambda: regime.lambda(),
        regime: regime.describe(),
        n,
        rho_hat: 0.5 * (lo + hi),
        bracket: (lo, hi),
        epsilon,
        tol,
        replicas_per_point,
        root_seed: seed,
        curve,
    })
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

/// Per-cell estimator settings for a sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub n: i64,
    pub epsilon: f64,
    pub tol: f64,
    pub replicas_per_point: u64,
}

/// One sweep row; regime-diagnostic columns are derived from the estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub n: i64,
    pub rho_hat: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    pub replicas_per_point: u64,
    pub rho_over_lambda: f64,
    pub rho_over_sqrt_lambda: f64,
    pub gap_times_lambda: f64,
    /// Per-cell failures are recorded and the sweep continues.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub root_seed: u64,
}

/// Seed for sweep cell `index`; exposed so a single-cell sweep reproduces a
/// standalone `estimate_rho_c` call exactly.
pub fn sweep_cell_seed(root_seed: u64, index: u64) -> u64 {
    parallel::derive_seed(root_seed, domain::INITIAL ^ domain::INSTRUCTIONS, index, 0)
}

/// Run the critical-density estimator across a lambda grid.
pub fn lambda_sweep(kernel: &Arc<JumpKernel>, cells: &[SweepCell], seed: u64) -> Result<SweepTable> {
    if cells.is_empty() {
        return Err(ArwError::InvalidArgument("sweep grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let cell_seed = sweep_cell_seed(seed, i as u64);
        let regime = SleepRegime::normal(cell.lambda)?;
        match estimate_rho_c(
            kernel,
            &regime,
            cell.n,
            cell.epsilon,
            cell.replicas_per_point,
            cell.tol,
            cell_seed,
        ) {
            Ok(est) => rows.push(SweepRow {
                lambda: cell.lambda,
                n: cell.n,
                rho_hat: est.rho_hat,
                bracket_lo: est.bracket.0,
                bracket_hi: est.bracket.1,
                replicas_per_point: cell.replicas_per_point,
                rho_over_lambda: est.rho_hat / cell.lambda,
                rho_over_sqrt_lambda: est.rho_hat / cell.lambda.sqrt(),
                gap_times_lambda: (1.0 - est.rho_hat) * cell.lambda,
                error: None,
            }),
            Err(e) => rows.push(SweepRow {
                lambda: cell.lambda,
                n: cell.n,
                rho_hat: f64::NAN,
                bracket_lo: f64::NAN,
                bracket_hi: f64::NAN,
                replicas_per_point: cell.replicas_per_point,
                rho_over_lambda: f64::NAN,
                rho_over_sqrt_lambda: f64::NAN,
                gap_times_lambda: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(SweepTable { rows, root_seed: seed })
}

/// Format a float with 17 significant digits, the CSV serialization rule.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.16e}")
    }
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "lambda,n,rho_hat,bracket_lo,bracket_hi,replicas_per_point,rho_over_lambda,rho_over_sqrt_lambda,gap_times_lambda,error\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                fmt_f64(r.lambda),
                r.n,
                fmt_f64(r.rho_hat),
                fmt_f64(r.bracket_lo),
                fmt_f64(r.bracket_hi),
                r.replicas_per_point,
                fmt_f64(r.rho_over_lambda),
                fmt_f64(r.rho_over_sqrt_lambda),
                fmt_f64(r.gap_times_lambda),
                r.error.clone().unwrap_or_default()
            ));
        }
        out
    }

    /// Least-squares slope of `log rho_hat` against `log lambda` over the
    /// successful rows.
    pub fn log_log_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.error.is_none() && r.rho_hat > 0.0)
            .map(|r| (r.lambda.ln(), r.rho_hat.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        Some((n * sxy - sx * sy) / (n * sxx - sx * sx))
    }
}

// ---------------------------------------------------------------------------
// Mass conservation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassCheckRow {
    pub n: i64,
    pub p: f64,
    /// `|p_n(rho) - rho|`.
    pub deviation: f64,
    pub stderr: f64,
    pub replicas: u64,
}

/// For each radius, report how far the occupation probability sits from the
/// initial density. Subcriticality must be guaranteed up front: `rho` has
/// to sit strictly below the universal lower bound `lambda_s`.
pub fn mass_conservation_check(
    kernel: &Arc<JumpKernel>,
    regime: &SleepRegime,
    rho: f64,
    n_list: &[i64],
    replicas: u64,
    seed: u64,
) -> Result<Vec<MassCheckRow>> {
    if n_list.is_empty() {
        return Err(ArwError::InvalidArgument("radius list is empty".into()));
    }
    if rho >= regime.lambda_s() {
        return Err(ArwError::InvalidArgument(format!(
            "density {rho} is not strictly below lambda_s = {}; subcriticality not guaranteed",
            regime.lambda_s()
        )));
    }
    n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let volume = Arc::new(Volume::centered_box(kernel.dim(), n)?);
            let report = occupation_point(
                kernel,
                regime,
                &volume,
                &InitialLaw::Bernoulli(rho),
                replicas,
                seed,
                i as u64,
            )?;
            Ok(MassCheckRow {
                n,
                p: report.point,
                deviation: (report.point - rho).abs(),
                stderr: report.stderr,
                replicas,
            })
        })
        .collect()
}
