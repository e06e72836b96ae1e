//! Subcommand implementations.
//!
//! Every `Args` struct keeps its fields optional so values can be resolved
//! with the precedence: CLI flag, then config-file entry, then default. The
//! resolved parameters are echoed into each output.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, ValueEnum};
use serde::Serialize;

use arw::engine::{
    occupation_probability_pgf, stabilize, strong_via_weak, Configuration, Mode, SchedulerPolicy,
    StrongViaWeakOptions, USet,
};
use arw::estimators::{
    self, estimate_rho_c, lambda_sweep, mass_conservation_check, occupation_curve, SweepCell,
};
use arw::kernel::{
    green_function_with, make_ssrw_kernel, single_particle_q, GreenOptions, JumpKernel, Volume,
};
use arw::oracle::{exact_stab_distribution, OracleArithmetic, OracleOptions, OraclePolicy};
use arw::parallel::{derive_seed, domain};
use arw::procedures::{carpet_procedure, hole_statistics, CarpetEnd};
use arw::randomness::{InstructionStream, SleepRegime};

use crate::output::{csv_provenance, emit, Envelope, FileConfig};
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    LexMin,
    LexMax,
    DepthFirst,
    BreadthFirst,
    Random,
}

impl PolicyArg {
    fn to_policy(self, seed: u64) -> SchedulerPolicy {
        match self {
            PolicyArg::LexMin => SchedulerPolicy::LexMin,
            PolicyArg::LexMax => SchedulerPolicy::LexMax,
            PolicyArg::DepthFirst => SchedulerPolicy::DepthFirst,
            PolicyArg::BreadthFirst => SchedulerPolicy::BreadthFirst,
            PolicyArg::Random => SchedulerPolicy::RandomOrder(seed),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared resolution helpers
// ---------------------------------------------------------------------------

fn load_kernel(dim: Option<usize>, path: Option<&PathBuf>) -> Result<Arc<JumpKernel>, Failure> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Failure::Validation(format!("cannot read kernel file {}: {e}", p.display()))
            })?;
            Ok(Arc::new(JumpKernel::from_json(&text)?))
        }
        None => {
            let d = dim.ok_or_else(|| {
                Failure::Validation("need --dim (for the built-in ssrw kernel) or --kernel FILE".into())
            })?;
            Ok(Arc::new(make_ssrw_kernel(d)?))
        }
    }
}

fn resolve_regime(lambda: Option<f64>, regime: Option<&str>) -> Result<SleepRegime, Failure> {
    match (lambda, regime) {
        (Some(_), Some(_)) => Err(Failure::Validation(
            "--lambda and --regime are mutually exclusive".into(),
        )),
        (Some(l), None) => Ok(SleepRegime::normal(l)?),
        (None, Some("always-sleep")) => Ok(SleepRegime::AlwaysSleep),
        (None, Some("never-sleep")) => Ok(SleepRegime::NeverSleep),
        (None, Some(other)) => Err(Failure::Validation(format!(
            "unknown regime {other:?}; expected always-sleep or never-sleep"
        ))),
        (None, None) => Err(Failure::Validation("need --lambda or --regime".into())),
    }
}

fn parse_f64_grid(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Validation(format!("bad grid entry {t:?}")))
        })
        .collect()
}

fn parse_i64_grid(text: &str) -> Result<Vec<i64>, Failure> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<i64>()
                .map_err(|_| Failure::Validation(format!("bad list entry {t:?}")))
        })
        .collect()
}

fn read_configuration(path: &PathBuf) -> Result<Configuration, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::Validation(format!("cannot read configuration {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn fmt(x: f64) -> String {
    estimators::fmt_f64(x)
}

// ---------------------------------------------------------------------------
// stabilize
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct StabilizeArgs {
    /// Configuration literal JSON file.
    #[arg(long)]
    pub initial: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// legal | weak | strong
    #[arg(long)]
    pub mode: Option<String>,
    /// Radius of the frozen ball U for weak/strong; omit for U = {origin}.
    #[arg(long)]
    pub u_ball: Option<i64>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long)]
    pub max_topplings: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct StabilizeConfig {
    initial: String,
    regime: String,
    seed: u64,
    mode: String,
    u_ball: Option<i64>,
    policy: PolicyArg,
    max_topplings: u64,
}

pub fn run_stabilize(args: StabilizeArgs, file: &FileConfig) -> Result<(), Failure> {
    let initial_path: PathBuf = file.resolve_required("stabilize", "initial", args.initial)?;
    let lambda = file.resolve("stabilize", "lambda", args.lambda.map(Some), None)?;
    let regime_name = file.resolve("stabilize", "regime", args.regime.map(Some), None)?;
    let regime = resolve_regime(lambda, regime_name.as_deref())?;
    let seed = file.resolve("stabilize", "seed", args.seed, 0)?;
    let mode_name: String = file.resolve("stabilize", "mode", args.mode, "legal".into())?;
    let u_ball = file.resolve("stabilize", "u_ball", args.u_ball.map(Some), None)?;
    let policy = file.resolve("stabilize", "policy", args.policy, PolicyArg::LexMin)?;
    let max_topplings = file.resolve(
        "stabilize",
        "max_topplings",
        args.max_topplings,
        arw::engine::DEFAULT_MAX_TOPPLINGS,
    )?;

    let config = read_configuration(&initial_path)?;
    let volume = Arc::clone(config.volume());
    let kernel = Arc::new(make_ssrw_kernel(volume.dim())?);
    let uset = match u_ball {
        Some(r) => USet::ball(&volume, r)?,
        None => USet::origin(&volume),
    };
    let mode = match mode_name.as_str() {
        "legal" => Mode::Legal,
        "weak" => Mode::Weak(uset),
        "strong" => Mode::Strong(uset),
        other => {
            return Err(Failure::Validation(format!(
                "unknown mode {other:?}; expected legal, weak, or strong"
            )))
        }
    };
    let stream = InstructionStream::new(seed, Arc::clone(&kernel), regime);
    let record = stabilize(&config, &stream, &mode, policy.to_policy(seed), max_topplings)?;

    let envelope = Envelope::new(
        "stabilize",
        StabilizeConfig {
            initial: initial_path.display().to_string(),
            regime: regime.describe(),
            seed,
            mode: mode_name,
            u_ball,
            policy,
            max_topplings,
        },
        Some(seed),
        record,
    );
    emit(args.out.as_deref(), &envelope.to_json()?)
}

// ---------------------------------------------------------------------------
// chances
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ChancesArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub volume_radius: Option<i64>,
    /// Fill B_r with one active particle per site instead of a single
    /// particle at the origin.
    #[arg(long)]
    pub fill_radius: Option<i64>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ChancesConfig {
    kernel: String,
    regime: String,
    volume_radius: i64,
    fill_radius: Option<i64>,
    replicas: u64,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct ChancesResult {
    replicas: u64,
    mean_ch: f64,
    /// Plug-in occupation estimate `1 - mean(lambda_j^Ch)`; absent for
    /// degenerate regimes.
    pgf_occupation: Option<f64>,
    /// Pooled frequency of successful sleep trials.
    b_frequency: Option<f64>,
    histogram: BTreeMap<u64, u64>,
}

pub fn run_chances(args: ChancesArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("chances", "dim", args.dim.map(Some), None)?,
        file.resolve("chances", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let lambda = file.resolve("chances", "lambda", args.lambda.map(Some), None)?;
    let regime_name = file.resolve("chances", "regime", args.regime.map(Some), None)?;
    let regime = resolve_regime(lambda, regime_name.as_deref())?;
    let volume_radius: i64 = file.resolve_required("chances", "volume_radius", args.volume_radius)?;
    let fill_radius = file.resolve("chances", "fill_radius", args.fill_radius.map(Some), None)?;
    let replicas = file.resolve("chances", "replicas", args.replicas, 10_000)?;
    let seed = file.resolve("chances", "seed", args.seed, 0)?;
    if replicas == 0 {
        return Err(Failure::Validation("replicas must be >= 1".into()));
    }

    let volume = Arc::new(Volume::centered_box(kernel.dim(), volume_radius)?);
    let base = match fill_radius {
        Some(r) => Configuration::fill_ball(Arc::clone(&volume), r)?,
        None => Configuration::single_at_origin(Arc::clone(&volume)),
    };
    let runs: Vec<(u64, Vec<bool>)> = arw::parallel::replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(seed, domain::INSTRUCTIONS, 0, rep),
            Arc::clone(&kernel),
            regime,
        );
        let record = strong_via_weak(&base, &stream, StrongViaWeakOptions::default())
            .expect("strong-via-weak on a valid instance");
        (record.chances.unwrap(), record.sleep_trials.unwrap())
    });

    let ch_samples: Vec<u64> = runs.iter().map(|(ch, _)| *ch).collect();
    let mut histogram = BTreeMap::new();
    for &ch in &ch_samples {
        *histogram.entry(ch).or_insert(0u64) += 1;
    }
    let mean_ch = ch_samples.iter().sum::<u64>() as f64 / replicas as f64;
    let pgf_occupation = regime
        .params()
        .map(|p| occupation_probability_pgf(&ch_samples, p))
        .transpose()?;
    let total_trials: u64 = runs.iter().map(|(_, b)| b.len() as u64).sum();
    let b_frequency = if total_trials > 0 {
        Some(
            runs.iter().map(|(_, b)| b.iter().filter(|&&x| x).count() as u64).sum::<u64>() as f64
                / total_trials as f64,
        )
    } else {
        None
    };

    let envelope = Envelope::new(
        "chances",
        ChancesConfig {
            kernel: kernel.describe(),
            regime: regime.describe(),
            volume_radius,
            fill_radius,
            replicas,
            seed,
        },
        Some(seed),
        ChancesResult { replicas, mean_ch, pgf_occupation, b_frequency, histogram },
    );
    emit(args.out.as_deref(), &envelope.to_json()?)
}

// ---------------------------------------------------------------------------
// carpet
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CarpetArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub regime: Option<String>,
    /// Carpet ball radius.
    #[arg(long)]
    pub r: Option<i64>,
    #[arg(long)]
    pub volume_radius: Option<i64>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Base path: writes BASE.jsonl and BASE.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CarpetConfig {
    kernel: String,
    regime: String,
    r: i64,
    volume_radius: i64,
    replicas: u64,
    max_iters: u64,
    seed: u64,
}

pub fn run_carpet(args: CarpetArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("carpet", "dim", args.dim.map(Some), None)?,
        file.resolve("carpet", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let lambda = file.resolve("carpet", "lambda", args.lambda.map(Some), None)?;
    let regime_name = file.resolve("carpet", "regime", args.regime.map(Some), None)?;
    let regime = resolve_regime(lambda, regime_name.as_deref())?;
    let r: i64 = file.resolve_required("carpet", "r", args.r)?;
    let volume_radius = file.resolve("carpet", "volume_radius", args.volume_radius, r)?;
    let replicas = file.resolve("carpet", "replicas", args.replicas, 10_000)?;
    let max_iters = file.resolve("carpet", "max_iters", args.max_iters, 100_000)?;
    let seed = file.resolve("carpet", "seed", args.seed, 0)?;

    let volume = Arc::new(Volume::centered_box(kernel.dim(), volume_radius)?);
    let records: Vec<arw::procedures::CarpetRunRecord> =
        arw::parallel::replica_map(replicas, |rep| {
            let stream = InstructionStream::new(
                derive_seed(seed, domain::INSTRUCTIONS, 0, rep),
                Arc::clone(&kernel),
                regime,
            );
            carpet_procedure(&stream, &volume, r, max_iters).expect("validated carpet instance")
        });

    let config = CarpetConfig {
        kernel: kernel.describe(),
        regime: regime.describe(),
        r,
        volume_radius,
        replicas,
        max_iters,
        seed,
    };

    let mut jsonl = String::new();
    for (rep, record) in records.iter().enumerate() {
        let row = serde_json::json!({
            "root_seed": seed,
            "replica": rep as u64,
            "record": record,
        });
        jsonl.push_str(&serde_json::to_string(&row)?);
        jsonl.push('\n');
    }

    let mut csv = csv_provenance("carpet", &config, Some(seed))?;
    csv.push_str("r,lambda,ch_prime,end_reason\n");
    let lambda_col = regime
        .lambda()
        .map(fmt)
        .unwrap_or_else(|| regime.describe());
    for record in &records {
        let reason = match record.end_reason {
            CarpetEnd::Step1Jump => "step1_jump",
            CarpetEnd::Escaped => "escaped",
            CarpetEnd::Budget => "budget",
        };
        csv.push_str(&format!("{},{},{},{}\n", record.r, lambda_col, record.ch_prime, reason));
    }

    match &args.out {
        Some(base) => {
            emit(Some(&base.with_extension("jsonl")), &jsonl)?;
            emit(Some(&base.with_extension("csv")), &csv)?;
            Ok(())
        }
        None => emit(None, &csv),
    }
}

// ---------------------------------------------------------------------------
// holes
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct HolesArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub tracked_radius: Option<i64>,
    #[arg(long)]
    pub volume_radius: Option<i64>,
    #[arg(long)]
    pub max_j: Option<u64>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Base path: writes BASE.jsonl and BASE.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct HolesConfig {
    kernel: String,
    regime: String,
    tracked_radius: i64,
    volume_radius: i64,
    max_j: u64,
    replicas: u64,
    seed: u64,
}

pub fn run_holes(args: HolesArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("holes", "dim", args.dim.map(Some), None)?,
        file.resolve("holes", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let lambda = file.resolve("holes", "lambda", args.lambda.map(Some), None)?;
    let regime_name = file.resolve("holes", "regime", args.regime.map(Some), None)?;
    let regime = resolve_regime(lambda, regime_name.as_deref())?;
    let tracked_radius: i64 = file.resolve_required("holes", "tracked_radius", args.tracked_radius)?;
    let volume_radius = file.resolve("holes", "volume_radius", args.volume_radius, tracked_radius)?;
    let max_j = file.resolve("holes", "max_j", args.max_j, 8)?;
    let replicas = file.resolve("holes", "replicas", args.replicas, 1000)?;
    let seed = file.resolve("holes", "seed", args.seed, 0)?;

    let volume = Arc::new(Volume::centered_box(kernel.dim(), volume_radius)?);
    let all: Vec<Vec<arw::procedures::HoleStats>> = arw::parallel::replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(seed, domain::INSTRUCTIONS, 0, rep),
            Arc::clone(&kernel),
            regime,
        );
        hole_statistics(&stream, &volume, tracked_radius, max_j)
            .expect("validated holes instance")
    });

    let config = HolesConfig {
        kernel: kernel.describe(),
        regime: regime.describe(),
        tracked_radius,
        volume_radius,
        max_j,
        replicas,
        seed,
    };

    let mut jsonl = String::new();
    for (rep, stats) in all.iter().enumerate() {
        let row = serde_json::json!({
            "root_seed": seed,
            "replica": rep as u64,
            "stats": stats,
        });
        jsonl.push_str(&serde_json::to_string(&row)?);
        jsonl.push('\n');
    }

    // Pooled hole rates per (j, site); the denominator for level j counts
    // the replicas that reached it (Ch >= j).
    let mut totals: BTreeMap<(u64, Vec<i64>), u64> = BTreeMap::new();
    let mut denominators: BTreeMap<u64, u64> = BTreeMap::new();
    for stats in &all {
        for level in stats {
            *denominators.entry(level.j).or_insert(0) += 1;
            for (site, hole) in &level.hole_indicators {
                if *hole {
                    *totals.entry((level.j, site.clone())).or_insert(0) += 1;
                }
            }
        }
    }
    let mut csv = csv_provenance("holes", &config, Some(seed))?;
    csv.push_str("j,x,hole_rate,samples\n");
    for (j, denom) in &denominators {
        for idx in 0..volume.len() {
            if volume.inf_norm(idx) > tracked_radius {
                continue;
            }
            let site = volume.site(idx).to_vec();
            let count = totals.get(&(*j, site.clone())).copied().unwrap_or(0);
            let rate = count as f64 / *denom as f64;
            let coord = site.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
            csv.push_str(&format!("{j},({coord}),{},{denom}\n", fmt(rate)));
        }
    }

    match &args.out {
        Some(base) => {
            emit(Some(&base.with_extension("jsonl")), &jsonl)?;
            emit(Some(&base.with_extension("csv")), &csv)?;
            Ok(())
        }
        None => emit(None, &csv),
    }
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Configuration literal JSON file.
    #[arg(long)]
    pub initial: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub regime: Option<String>,
    /// legal | weak | strong (U = origin).
    #[arg(long)]
    pub mode: Option<String>,
    /// lexmin | lexmax site-selection policy.
    #[arg(long)]
    pub policy: Option<String>,
    /// auto | float | rational
    #[arg(long)]
    pub arithmetic: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct OracleConfig {
    initial: String,
    regime: String,
    mode: String,
    policy: String,
    arithmetic: String,
}

pub fn run_oracle(args: OracleArgs, file: &FileConfig) -> Result<(), Failure> {
    let initial_path: PathBuf = file.resolve_required("oracle", "initial", args.initial)?;
    let lambda = file.resolve("oracle", "lambda", args.lambda.map(Some), None)?;
    let regime_name = file.resolve("oracle", "regime", args.regime.map(Some), None)?;
    let regime = resolve_regime(lambda, regime_name.as_deref())?;
    let mode_name: String = file.resolve("oracle", "mode", args.mode, "legal".into())?;
    let policy_name: String = file.resolve("oracle", "policy", args.policy, "lexmin".into())?;
    let arithmetic_name: String = file.resolve("oracle", "arithmetic", args.arithmetic, "auto".into())?;

    let initial = read_configuration(&initial_path)?;
    let volume = Arc::clone(initial.volume());
    let kernel = make_ssrw_kernel(volume.dim())?;
    let mode = match mode_name.as_str() {
        "legal" => Mode::Legal,
        "weak" => Mode::Weak(USet::origin(&volume)),
        "strong" => Mode::Strong(USet::origin(&volume)),
        other => return Err(Failure::Validation(format!("unknown mode {other:?}"))),
    };
    let policy = match policy_name.as_str() {
        "lexmin" => OraclePolicy::LexMin,
        "lexmax" => OraclePolicy::LexMax,
        other => return Err(Failure::Validation(format!("unknown policy {other:?}"))),
    };
    let arithmetic = match arithmetic_name.as_str() {
        "auto" => OracleArithmetic::Auto,
        "float" => OracleArithmetic::Float,
        "rational" => OracleArithmetic::Rational,
        other => return Err(Failure::Validation(format!("unknown arithmetic {other:?}"))),
    };
    let dist = exact_stab_distribution(
        &initial,
        &kernel,
        &regime,
        &mode,
        &OracleOptions { policy, arithmetic, ..Default::default() },
    )?;

    #[derive(Serialize)]
    struct Entry {
        configuration: Configuration,
        probability: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        exact: Option<String>,
    }
    #[derive(Serialize)]
    struct OracleResult {
        origin_occupied: f64,
        residual: f64,
        transient_states: usize,
        rational: bool,
        entries: Vec<Entry>,
    }
    let result = OracleResult {
        origin_occupied: dist.origin_occupied(),
        residual: dist.residual,
        transient_states: dist.transient_states,
        rational: dist.rational,
        entries: dist
            .entries
            .iter()
            .map(|e| Entry {
                configuration: e.config.clone(),
                probability: e.probability,
                exact: e.exact.as_ref().map(|r| r.to_string()),
            })
            .collect(),
    };
    let envelope = Envelope::new(
        "oracle",
        OracleConfig {
            initial: initial_path.display().to_string(),
            regime: regime.describe(),
            mode: mode_name,
            policy: policy_name,
            arithmetic: arithmetic_name,
        },
        None,
        result,
    );
    emit(args.out.as_deref(), &envelope.to_json()?)
}

// ---------------------------------------------------------------------------
// green / q
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GreenArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub truncation_n: Option<u64>,
    #[arg(long)]
    pub tail_samples: Option<u64>,
    #[arg(long)]
    pub tail_horizon: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct GreenConfig {
    kernel: String,
    truncation_n: u64,
    tail_samples: u64,
    tail_horizon: u64,
    seed: u64,
}

pub fn run_green(args: GreenArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("green", "dim", args.dim.map(Some), None)?,
        file.resolve("green", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let truncation_n = file.resolve("green", "truncation_n", args.truncation_n, 400)?;
    let tail_samples = file.resolve("green", "tail_samples", args.tail_samples, 20_000)?;
    let tail_horizon = file.resolve("green", "tail_horizon", args.tail_horizon, 20_000)?;
    let seed = file.resolve("green", "seed", args.seed, 0)?;
    let analytics = green_function_with(
        &kernel,
        truncation_n,
        tail_samples,
        seed,
        GreenOptions { tail_horizon, ..Default::default() },
    )?;
    let envelope = Envelope::new(
        "green",
        GreenConfig {
            kernel: kernel.describe(),
            truncation_n,
            tail_samples,
            tail_horizon,
            seed,
        },
        Some(seed),
        analytics,
    );
    emit(args.out.as_deref(), &envelope.to_json()?)
}

#[derive(Debug, Args)]
pub struct QArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub truncation_n: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct QConfig {
    kernel: String,
    lambda: f64,
    truncation_n: u64,
}

pub fn run_q(args: QArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("q", "dim", args.dim.map(Some), None)?,
        file.resolve("q", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let lambda: f64 = file.resolve_required("q", "lambda", args.lambda)?;
    let truncation_n = file.resolve("q", "truncation_n", args.truncation_n, 2000)?;
    let params = arw::kernel::Params::new(lambda)?;
    let q = single_particle_q(&kernel, &params, truncation_n)?;
    let envelope = Envelope::new(
        "q",
        QConfig { kernel: kernel.describe(), lambda, truncation_n },
        None,
        q,
    );
    emit(args.out.as_deref(), &envelope.to_json()?)
}

// ---------------------------------------------------------------------------
// curve
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub regime: Option<String>,
    /// Volume radius: the curve runs on B_n.
    #[arg(long)]
    pub n: Option<i64>,
    /// Comma-separated densities.
    #[arg(long)]
    pub rho_grid: Option<String>,
    /// Sample Poisson multiplicities instead of Bernoulli indicators.
    #[arg(long)]
    pub poisson: bool,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CurveConfig {
    kernel: String,
    regime: String,
    n: i64,
    rho_grid: Vec<f64>,
    poisson: bool,
    replicas: u64,
    seed: u64,
}

pub fn run_curve(args: CurveArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("curve", "dim", args.dim.map(Some), None)?,
        file.resolve("curve", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let lambda = file.resolve("curve", "lambda", args.lambda.map(Some), None)?;
    let regime_name = file.resolve("curve", "regime", args.regime.map(Some), None)?;
    let regime = resolve_regime(lambda, regime_name.as_deref())?;
    let n: i64 = file.resolve_required("curve", "n", args.n)?;
    let grid_text: String = file.resolve_required("curve", "rho_grid", args.rho_grid)?;
    let rho_grid = parse_f64_grid(&grid_text)?;
    let replicas = file.resolve("curve", "replicas", args.replicas, 2000)?;
    let seed = file.resolve("curve", "seed", args.seed, 0)?;
    let format = file.resolve("curve", "format", args.format, Format::Json)?;

    let volume = Arc::new(Volume::centered_box(kernel.dim(), n)?);
    let reports = occupation_curve(&kernel, &regime, &volume, args.poisson, &rho_grid, replicas, seed)?;

    let config = CurveConfig {
        kernel: kernel.describe(),
        regime: regime.describe(),
        n,
        rho_grid: rho_grid.clone(),
        poisson: args.poisson,
        replicas,
        seed,
    };
    match format {
        Format::Json => {
            let envelope = Envelope::new("curve", config, Some(seed), reports);
            emit(args.out.as_deref(), &envelope.to_json()?)
        }
        Format::Csv => {
            let mut csv = csv_provenance("curve", &config, Some(seed))?;
            csv.push_str("rho,point,stderr,ci_lo,ci_hi,replicas,excluded\n");
            for (rho, r) in rho_grid.iter().zip(&reports) {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    fmt(*rho),
                    fmt(r.point),
                    fmt(r.stderr),
                    fmt(r.ci95.0),
                    fmt(r.ci95.1),
                    r.replicas,
                    r.meta.excluded
                ));
            }
            emit(args.out.as_deref(), &csv)
        }
    }
}

// ---------------------------------------------------------------------------
// rhoc
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct RhocArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n: Option<i64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RhocConfig {
    kernel: String,
    lambda: f64,
    n: i64,
    eps: f64,
    tol: f64,
    replicas: u64,
    seed: u64,
}

pub fn run_rhoc(args: RhocArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("rhoc", "dim", args.dim.map(Some), None)?,
        file.resolve("rhoc", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let lambda: f64 = file.resolve_required("rhoc", "lambda", args.lambda)?;
    let n: i64 = file.resolve_required("rhoc", "n", args.n)?;
    let eps = file.resolve("rhoc", "eps", args.eps, estimators::DEFAULT_EPSILON)?;
    let tol = file.resolve("rhoc", "tol", args.tol, estimators::DEFAULT_TOL)?;
    let replicas = file.resolve("rhoc", "replicas", args.replicas, estimators::DEFAULT_REPLICAS_PER_POINT)?;
    let seed = file.resolve("rhoc", "seed", args.seed, 0)?;

    let regime = SleepRegime::normal(lambda)?;
    let estimate = estimate_rho_c(&kernel, &regime, n, eps, replicas, tol, seed)?;
    let envelope = Envelope::new(
        "rhoc",
        RhocConfig { kernel: kernel.describe(), lambda, n, eps, tol, replicas, seed },
        Some(seed),
        estimate,
    );
    emit(args.out.as_deref(), &envelope.to_json()?)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Comma-separated lambda grid.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub n: Option<i64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SweepConfig {
    kernel: String,
    cells: Vec<SweepCell>,
    seed: u64,
}

pub fn run_sweep(args: SweepArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("sweep", "dim", args.dim.map(Some), None)?,
        file.resolve("sweep", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let seed = file.resolve("sweep", "seed", args.seed, 0)?;
    let format = file.resolve("sweep", "format", args.format, Format::Csv)?;

    // Per-cell settings can come whole from the config file; a CLI grid
    // with shared settings overrides them.
    let cells: Vec<SweepCell> = match file.resolve::<Option<String>>(
        "sweep",
        "lambda_grid",
        args.lambda_grid.clone().map(Some),
        None,
    )? {
        Some(grid_text) => {
            let grid = parse_f64_grid(&grid_text)?;
            let n: i64 = file.resolve_required("sweep", "n", args.n)?;
            let eps = file.resolve("sweep", "eps", args.eps, estimators::DEFAULT_EPSILON)?;
            let tol = file.resolve("sweep", "tol", args.tol, estimators::DEFAULT_TOL)?;
            let replicas =
                file.resolve("sweep", "replicas", args.replicas, estimators::DEFAULT_REPLICAS_PER_POINT)?;
            grid.into_iter()
                .map(|lambda| SweepCell {
                    lambda,
                    n,
                    epsilon: eps,
                    tol,
                    replicas_per_point: replicas,
                })
                .collect()
        }
        None => file.resolve_required::<Vec<SweepCell>>("sweep", "cells", None)?,
    };

    let table = lambda_sweep(&kernel, &cells, seed)?;
    let config = SweepConfig { kernel: kernel.describe(), cells, seed };
    match format {
        Format::Csv => {
            let mut csv = csv_provenance("sweep", &config, Some(seed))?;
            csv.push_str(&table.to_csv());
            emit(args.out.as_deref(), &csv)
        }
        Format::Json => {
            let envelope = Envelope::new("sweep", config, Some(seed), table);
            emit(args.out.as_deref(), &envelope.to_json()?)
        }
    }
}

// ---------------------------------------------------------------------------
// masscheck
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct MasscheckArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Comma-separated volume radii.
    #[arg(long)]
    pub n_list: Option<String>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct MasscheckConfig {
    kernel: String,
    lambda: f64,
    rho: f64,
    n_list: Vec<i64>,
    replicas: u64,
    seed: u64,
}

pub fn run_masscheck(args: MasscheckArgs, file: &FileConfig) -> Result<(), Failure> {
    let kernel = load_kernel(
        file.resolve("masscheck", "dim", args.dim.map(Some), None)?,
        file.resolve("masscheck", "kernel", args.kernel.map(Some), None)?.as_ref(),
    )?;
    let lambda: f64 = file.resolve_required("masscheck", "lambda", args.lambda)?;
    let rho: f64 = file.resolve_required("masscheck", "rho", args.rho)?;
    let list_text: String = file.resolve_required("masscheck", "n_list", args.n_list)?;
    let n_list = parse_i64_grid(&list_text)?;
    let replicas = file.resolve("masscheck", "replicas", args.replicas, 20_000)?;
    let seed = file.resolve("masscheck", "seed", args.seed, 0)?;
    let format = file.resolve("masscheck", "format", args.format, Format::Csv)?;

    let regime = SleepRegime::normal(lambda)?;
    let rows = mass_conservation_check(&kernel, &regime, rho, &n_list, replicas, seed)?;
    let config = MasscheckConfig {
        kernel: kernel.describe(),
        lambda,
        rho,
        n_list,
        replicas,
        seed,
    };
    match format {
        Format::Csv => {
            let mut csv = csv_provenance("masscheck", &config, Some(seed))?;
            csv.push_str("n,p,deviation,stderr,replicas\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.n,
                    fmt(r.p),
                    fmt(r.deviation),
                    fmt(r.stderr),
                    r.replicas
                ));
            }
            emit(args.out.as_deref(), &csv)
        }
        Format::Json => {
            let envelope = Envelope::new("masscheck", config, Some(seed), rows);
            emit(args.out.as_deref(), &envelope.to_json()?)
        }
    }
}

// ---------------------------------------------------------------------------
// misc: escape probability is available through `q`-adjacent tooling
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Smaller replica counts for a fast smoke run.
    #[arg(long)]
    pub quick: bool,
}
