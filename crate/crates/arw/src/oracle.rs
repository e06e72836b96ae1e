//! Exact distribution of stabilization outcomes on tiny volumes.
//!
//! The toppling process under a fixed site-selection policy is an absorbing
//! Markov chain: each toppling branches over the instruction marginals
//! (sleep with probability `lambda_s`, jump by `o` with `lambda_j * P(o)`).
//! Branching over marginals is valid because every stack entry is consumed
//! exactly once and entries are i.i.d. — the odometer index never revisits
//! an entry. The abelian property makes the resulting distribution over
//! stable configurations independent of the policy, which is itself checked
//! as a property test.
//!
//! State spaces are built breadth-first with memoization; cycles (a particle
//! bouncing without sleeping) are handled by the linear solve, not by path
//! enumeration. Small instances can be solved in exact rational arithmetic;
//! larger ones use floats with a residual check.

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Sub};
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};

use crate::engine::{Configuration, Mode};
use crate::error::{ArwError, Result};
use crate::kernel::{JumpKernel, Volume};
use crate::randomness::SleepRegime;

const SLEEPING: u32 = u32::MAX;

// ---------------------------------------------------------------------------
// Scalars
// ---------------------------------------------------------------------------

/// Arithmetic the chain solver runs in.
pub(crate) trait ChainScalar:
    Clone
    + PartialEq
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn is_zero(&self) -> bool;
    /// Exact embedding of the (binary) value of an `f64`.
    fn from_f64_exact(x: f64) -> Self;
    fn to_f64_lossy(&self) -> f64;
    /// Pivot preference for Gaussian elimination.
    fn pivot_score(&self) -> f64;
}

impl ChainScalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn from_f64_exact(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(&self) -> f64 {
        *self
    }
    fn pivot_score(&self) -> f64 {
        self.abs()
    }
}

impl ChainScalar for BigRational {
    fn zero() -> Self {
        <BigRational as Zero>::zero()
    }
    fn one() -> Self {
        <BigRational as One>::one()
    }
    fn is_zero(&self) -> bool {
        <BigRational as Zero>::is_zero(self)
    }
    fn from_f64_exact(x: f64) -> Self {
        BigRational::from_f64(x).expect("finite probability")
    }
    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
    fn pivot_score(&self) -> f64 {
        // Exact arithmetic needs any nonzero pivot.
        if <BigRational as Zero>::is_zero(self) {
            0.0
        } else {
            1.0
        }
    }
}

// ---------------------------------------------------------------------------
// Options and outputs
// ---------------------------------------------------------------------------

/// Site-selection policies for the chain; fixed and deterministic so the
/// chain is well-defined. Abelianness makes the answers agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OraclePolicy {
    LexMin,
    LexMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleArithmetic {
    /// Rational when the instance is small enough, float otherwise.
    Auto,
    Float,
    Rational,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub policy: OraclePolicy,
    pub arithmetic: OracleArithmetic,
    /// Instance caps; exceeding them is a resource error.
    pub max_sites: usize,
    pub max_mass: u64,
    /// Cap on explored chain states.
    pub max_states: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            policy: OraclePolicy::LexMin,
            arithmetic: OracleArithmetic::Auto,
            max_sites: 10,
            max_mass: 4,
            max_states: 20_000,
        }
    }
}

/// One stable configuration and its absorption probability.
#[derive(Debug, Clone)]
pub struct DistEntry {
    pub config: Configuration,
    pub probability: f64,
    /// Present in rational mode.
    pub exact: Option<BigRational>,
}

/// Exact distribution over stable configurations.
#[derive(Debug, Clone)]
pub struct StabDistribution {
    /// Sorted by decreasing probability, ties broken by configuration order.
    pub entries: Vec<DistEntry>,
    /// `|1 - sum of probabilities|`.
    pub residual: f64,
    pub transient_states: usize,
    pub rational: bool,
}

impl StabDistribution {
    /// Probability that the origin is occupied after stabilization.
    pub fn origin_occupied(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.config.origin_occupied())
            .map(|e| e.probability)
            .sum()
    }
}

/// Functional of the stabilization computed exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantity {
    /// `P(0 in Stab_V eta)` under legal stabilization.
    OriginOccupied,
    /// Expected number of strong-via-weak chances.
    MeanCh,
    /// `E[s^Ch]` at the given argument.
    ChPgf(f64),
    /// Expected particle count retained after legal stabilization.
    MassRetained,
}

#[derive(Debug, Clone)]
pub struct QuantityValue {
    pub value: f64,
    pub exact: Option<BigRational>,
}

// ---------------------------------------------------------------------------
// Chain construction
// ---------------------------------------------------------------------------

const PH_PLAIN: u8 = 0;
const PH_WEAK: u8 = 1;
const PH_JUMPOUT: u8 = 2;

#[derive(Clone, Copy, PartialEq, Eq)]
enum ChainKind {
    /// Stabilize under a fixed mode until stable.
    Plain,
    /// The strong-via-weak procedure with respect to the origin.
    StrongViaWeak,
}

#[derive(Clone, Copy)]
enum Target {
    Transient(u32),
    Absorbing(u32),
}

struct Chain<S: ChainScalar> {
    /// Per transient state: (target, weight, jump-out completed).
    transitions: Vec<Vec<(Target, S, bool)>>,
    absorbing: Vec<Vec<u32>>,
    /// The initial state, which may already be absorbed.
    initial: Target,
}

struct Builder<'a, S: ChainScalar> {
    volume: Arc<Volume>,
    kernel: &'a JumpKernel,
    kind: ChainKind,
    mode: Mode,
    policy: OraclePolicy,
    regime: &'a SleepRegime,
    /// Branches for a toppling whose sleep can apply.
    with_sleep: Vec<(Option<usize>, S)>,
    /// Branches for a toppling that can only jump (degenerate regimes).
    jump_only: Vec<(Option<usize>, S)>,
    origin: usize,
    max_states: usize,
}

impl<'a, S: ChainScalar> Builder<'a, S> {
    fn new(
        volume: &Arc<Volume>,
        kernel: &'a JumpKernel,
        regime: &'a SleepRegime,
        kind: ChainKind,
        mode: Mode,
        policy: OraclePolicy,
        max_states: usize,
    ) -> Self {
        let mut with_sleep: Vec<(Option<usize>, S)> = Vec::new();
        let mut jump_only: Vec<(Option<usize>, S)> = Vec::new();
        match regime {
            SleepRegime::Normal(p) => {
                let lambda = S::from_f64_exact(p.lambda());
                let ls = lambda.clone() / (S::one() + lambda);
                let lj = S::one() - ls.clone();
                with_sleep.push((None, ls));
                for (i, atom) in kernel.support().iter().enumerate() {
                    with_sleep.push((Some(i), lj.clone() * S::from_f64_exact(atom.prob)));
                }
                // jump_only is never used in the normal regime
            }
            SleepRegime::AlwaysSleep => {
                with_sleep.push((None, S::one()));
                for (i, atom) in kernel.support().iter().enumerate() {
                    jump_only.push((Some(i), S::from_f64_exact(atom.prob)));
                }
            }
            SleepRegime::NeverSleep => {
                for (i, atom) in kernel.support().iter().enumerate() {
                    let w = (Some(i), S::from_f64_exact(atom.prob));
                    with_sleep.push(w.clone());
                    jump_only.push(w);
                }
            }
        }
        Builder {
            origin: volume.origin_index(),
            volume: Arc::clone(volume),
            kernel,
            kind,
            mode,
            policy,
            regime,
            with_sleep,
            jump_only,
            max_states,
        }
    }

    fn is_unstable(&self, cells: &[u32], idx: usize) -> bool {
        let cell = cells[idx];
        match (&self.kind, &self.mode) {
            (ChainKind::StrongViaWeak, _) => {
                // weak instability with respect to the origin
                if cell == 0 || cell == SLEEPING {
                    false
                } else if idx == self.origin {
                    cell >= 2
                } else {
                    true
                }
            }
            (ChainKind::Plain, Mode::Legal) => cell != 0 && cell != SLEEPING,
            (ChainKind::Plain, Mode::Weak(u)) => {
                if cell == 0 || cell == SLEEPING {
                    false
                } else if u.site_indices().binary_search(&idx).is_ok() {
                    cell >= 2
                } else {
                    true
                }
            }
            (ChainKind::Plain, Mode::Strong(u)) => {
                if u.site_indices().binary_search(&idx).is_ok() {
                    cell != 0
                } else {
                    cell != 0 && cell != SLEEPING
                }
            }
        }
    }

    fn select_site(&self, cells: &[u32]) -> Option<usize> {
        match self.policy {
            OraclePolicy::LexMin => (0..cells.len()).find(|&i| self.is_unstable(cells, i)),
            OraclePolicy::LexMax => (0..cells.len()).rev().find(|&i| self.is_unstable(cells, i)),
        }
    }

    /// Resolve phase bookkeeping: a weakly stable state either enters a
    /// jump-out or is done.
    fn normalize(&self, cells: Vec<u32>, phase: u8) -> (Vec<u32>, Option<u8>) {
        match self.kind {
            ChainKind::Plain => {
                if self.select_site(&cells).is_some() {
                    (cells, Some(PH_PLAIN))
                } else {
                    (cells, None)
                }
            }
            ChainKind::StrongViaWeak => match phase {
                PH_JUMPOUT => (cells, Some(PH_JUMPOUT)),
                _ => {
                    if self.select_site(&cells).is_some() {
                        (cells, Some(PH_WEAK))
                    } else if cells[self.origin] != 0 {
                        (cells, Some(PH_JUMPOUT))
                    } else {
                        (cells, None)
                    }
                }
            },
        }
    }

    /// Apply one instruction effect at `idx` to a copy of `cells`. `None`
    /// is a sleep, `Some(oi)` a jump by support offset `oi`. Mirrors the
    /// engine's toppling semantics exactly.
    fn apply(&self, cells: &[u32], idx: usize, effect: Option<usize>) -> Vec<u32> {
        let mut next = cells.to_vec();
        let mut cell = next[idx];
        let was_sleeping = cell == SLEEPING;
        if was_sleeping {
            cell = 1; // acceptable toppling wakes first
        }
        match effect {
            None => {
                if cell == 1 {
                    next[idx] = SLEEPING;
                } else {
                    next[idx] = cell; // sleep no-op with >= 2 active
                }
            }
            Some(oi) => {
                next[idx] = cell - 1;
                let src = self.volume.site(idx);
                let off = self.kernel.offset(oi);
                let target: Vec<i64> = src.iter().zip(off).map(|(a, b)| a + b).collect();
                if let Some(t) = self.volume.index_of(&target) {
                    next[t] = if next[t] == SLEEPING { 2 } else { next[t] + 1 };
                } // else the particle is killed
            }
        }
        next
    }

    /// Branch set for toppling `idx` in the current cells.
    fn branch_set(&self, cells: &[u32], idx: usize) -> &[(Option<usize>, S)] {
        match self.regime {
            SleepRegime::Normal(_) | SleepRegime::NeverSleep => &self.with_sleep,
            SleepRegime::AlwaysSleep => {
                let cell = cells[idx];
                if cell == SLEEPING || cell >= 2 {
                    &self.jump_only
                } else {
                    &self.with_sleep
                }
            }
        }
    }

    fn build(&self, initial: &Configuration) -> Result<Chain<S>> {
        let mut transient_index: HashMap<(Vec<u32>, u8), u32> = HashMap::new();
        let mut absorbing_index: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut absorbing: Vec<Vec<u32>> = Vec::new();
        let mut transitions: Vec<Vec<(Target, S, bool)>> = Vec::new();
        let mut frontier: Vec<(Vec<u32>, u8)> = Vec::new();

        fn intern_absorbing(
            cells: Vec<u32>,
            absorbing: &mut Vec<Vec<u32>>,
            absorbing_index: &mut HashMap<Vec<u32>, u32>,
        ) -> u32 {
            if let Some(&id) = absorbing_index.get(&cells) {
                return id;
            }
            let id = absorbing.len() as u32;
            absorbing_index.insert(cells.clone(), id);
            absorbing.push(cells);
            id
        }

        let start_phase = match self.kind {
            ChainKind::Plain => PH_PLAIN,
            ChainKind::StrongViaWeak => PH_WEAK,
        };
        let (cells0, phase0) = self.normalize(initial.cells().to_vec(), start_phase);
        let initial_target = match phase0 {
            None => Target::Absorbing(intern_absorbing(cells0, &mut absorbing, &mut absorbing_index)),
            Some(ph) => {
                transient_index.insert((cells0.clone(), ph), 0);
                transitions.push(Vec::new());
                frontier.push((cells0, ph));
                Target::Transient(0)
            }
        };

        let mut cursor = 0usize;
        while cursor < frontier.len() {
            let (cells, phase) = frontier[cursor].clone();
            let state_id = transient_index[&(cells.clone(), phase)] as usize;
            cursor += 1;

            let (site, branches): (usize, &[(Option<usize>, S)]) = match phase {
                PH_JUMPOUT => {
                    let br = match self.regime {
                        SleepRegime::Normal(_) => &self.with_sleep[..],
                        _ => &self.jump_only[..],
                    };
                    (self.origin, br)
                }
                _ => {
                    let site = self
                        .select_site(&cells)
                        .expect("transient state has an unstable site");
                    (site, self.branch_set(&cells, site))
                }
            };

            let mut outgoing: Vec<(Target, S, bool)> = Vec::with_capacity(branches.len());
            for (effect, weight) in branches {
                let (next_cells, next_phase, ch_inc) = match phase {
                    PH_JUMPOUT => match effect {
                        // The particle sleeps and the next acceptable
                        // toppling wakes it: a self-loop.
                        None => (cells.clone(), Some(PH_JUMPOUT), false),
                        Some(_) => {
                            let moved = self.apply(&cells, site, *effect);
                            let (c, p) = self.normalize(moved, PH_WEAK);
                            (c, p, true)
                        }
                    },
                    _ => {
                        let moved = self.apply(&cells, site, *effect);
                        let (c, p) = self.normalize(moved, phase);
                        (c, p, false)
                    }
                };
                let target = match next_phase {
                    None => Target::Absorbing(intern_absorbing(
                        next_cells,
                        &mut absorbing,
                        &mut absorbing_index,
                    )),
                    Some(ph) => {
                        let key = (next_cells, ph);
                        let id = match transient_index.get(&key) {
                            Some(&id) => id,
                            None => {
                                let id = transient_index.len() as u32;
                                if id as usize >= self.max_states {
                                    return Err(ArwError::ResourceLimit(format!(
                                        "chain exceeded {} states",
                                        self.max_states
                                    )));
                                }
                                transient_index.insert(key.clone(), id);
                                transitions.push(Vec::new());
                                frontier.push(key);
                                id
                            }
                        };
                        Target::Transient(id)
                    }
                };
                outgoing.push((target, weight.clone(), ch_inc));
            }

            // outgoing weights must form a probability distribution
            let total = outgoing
                .iter()
                .fold(S::zero(), |acc, (_, w, _)| acc + w.clone());
            if (total.to_f64_lossy() - 1.0).abs() > 1e-12 {
                return Err(ArwError::OracleModel(format!(
                    "outgoing weights sum to {}",
                    total.to_f64_lossy()
                )));
            }
            transitions[state_id] = outgoing;
        }

        if absorbing.is_empty() {
            return Err(ArwError::OracleModel(
                "no stable state reachable (impossible with killing; flags a bug)".into(),
            ));
        }
        Ok(Chain { transitions, absorbing, initial: initial_target })
    }
}

// ---------------------------------------------------------------------------
// Linear solves
// ---------------------------------------------------------------------------

const DENSE_CAP: usize = 2500;

/// Exact rational solve, shared with the gambler's-ruin hitting system.
pub(crate) fn solve_dense_rational(
    a: Vec<BigRational>,
    b: Vec<BigRational>,
    n: usize,
) -> Result<Vec<BigRational>> {
    solve_dense(a, b, n)
}

/// Dense Gaussian elimination with partial pivoting. Exact for rationals.
fn solve_dense<S: ChainScalar>(mut a: Vec<S>, mut b: Vec<S>, n: usize) -> Result<Vec<S>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .pivot_score()
                    .partial_cmp(&a[j * n + col].pivot_score())
                    .unwrap()
            })
            .unwrap();
        if a[pivot * n + col].is_zero() {
            return Err(ArwError::OracleModel("singular chain system".into()));
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            if a[row * n + col].is_zero() {
                continue;
            }
            let f = a[row * n + col].clone() / a[col * n + col].clone();
            for c in col..n {
                a[row * n + c] = a[row * n + c].clone() - f.clone() * a[col * n + c].clone();
            }
            b[row] = b[row].clone() - f * b[col].clone();
        }
    }
    let mut x = vec![S::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row].clone();
        for c in row + 1..n {
            acc = acc - a[row * n + c].clone() * x[c].clone();
        }
        x[row] = acc / a[row * n + row].clone();
    }
    Ok(x)
}

impl<S: ChainScalar> Chain<S> {
    fn n_transient(&self) -> usize {
        self.transitions.len()
    }

    fn check_dense_cap(&self) -> Result<()> {
        let n = self.n_transient();
        if n > DENSE_CAP {
            Err(ArwError::ResourceLimit(format!(
                "chain has {n} transient states; dense solve capped at {DENSE_CAP}"
            )))
        } else {
            Ok(())
        }
    }

    /// Expected visit counts per transient state from the initial state:
    /// solves `(I - Q)^T x = e_init`.
    fn expected_visits(&self) -> Result<Vec<S>> {
        self.check_dense_cap()?;
        let n = self.n_transient();
        let init = match self.initial {
            Target::Transient(i) => i as usize,
            Target::Absorbing(_) => return Ok(Vec::new()),
        };
        let mut a = vec![S::zero(); n * n];
        for i in 0..n {
            a[i * n + i] = S::one();
        }
        for (u, out) in self.transitions.iter().enumerate() {
            for (target, w, _) in out {
                if let Target::Transient(v) = target {
                    let v = *v as usize;
                    // (I - Q)^T entry (v, u)
                    a[v * n + u] = a[v * n + u].clone() - w.clone();
                }
            }
        }
        let mut b = vec![S::zero(); n];
        b[init] = S::one();
        solve_dense(a, b, n)
    }

    /// Absorption probability per absorbing state.
    fn absorption_distribution(&self) -> Result<Vec<S>> {
        let mut dist = vec![S::zero(); self.absorbing.len()];
        if let Target::Absorbing(a) = self.initial {
            dist[a as usize] = S::one();
            return Ok(dist);
        }
        let visits = self.expected_visits()?;
        for (u, out) in self.transitions.iter().enumerate() {
            for (target, w, _) in out {
                if let Target::Absorbing(aid) = target {
                    let aid = *aid as usize;
                    dist[aid] = dist[aid].clone() + visits[u].clone() * w.clone();
                }
            }
        }
        Ok(dist)
    }

    /// `E[#future jump-out completions]` from the initial state: solves
    /// `(I - Q) h = d` with `d_u` the weight of Ch-marking branches.
    fn mean_ch(&self) -> Result<S> {
        let init = match self.initial {
            Target::Transient(i) => i as usize,
            Target::Absorbing(_) => return Ok(S::zero()),
        };
        self.check_dense_cap()?;
        let n = self.n_transient();
        let mut a = vec![S::zero(); n * n];
        for i in 0..n {
            a[i * n + i] = S::one();
        }
        let mut d = vec![S::zero(); n];
        for (u, out) in self.transitions.iter().enumerate() {
            for (target, w, ch) in out {
                if *ch {
                    d[u] = d[u].clone() + w.clone();
                }
                if let Target::Transient(v) = target {
                    let v = *v as usize;
                    a[u * n + v] = a[u * n + v].clone() - w.clone();
                }
            }
        }
        Ok(solve_dense(a, d, n)?[init].clone())
    }

    /// `E[s^Ch]`: solves `(I - Q_s) g = b_s`, where a branch completing a
    /// jump-out carries an extra factor `s`.
    fn ch_pgf(&self, s: S) -> Result<S> {
        let init = match self.initial {
            Target::Transient(i) => i as usize,
            Target::Absorbing(_) => return Ok(S::one()),
        };
        self.check_dense_cap()?;
        let n = self.n_transient();
        let mut a = vec![S::zero(); n * n];
        for i in 0..n {
            a[i * n + i] = S::one();
        }
        let mut b = vec![S::zero(); n];
        for (u, out) in self.transitions.iter().enumerate() {
            for (target, w, ch) in out {
                let w_eff = if *ch { w.clone() * s.clone() } else { w.clone() };
                match target {
                    Target::Transient(v) => {
                        let v = *v as usize;
                        a[u * n + v] = a[u * n + v].clone() - w_eff;
                    }
                    Target::Absorbing(_) => {
                        b[u] = b[u].clone() + w_eff;
                    }
                }
            }
        }
        Ok(solve_dense(a, b, n)?[init].clone())
    }
}

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

fn check_caps(initial: &Configuration, opts: &OracleOptions) -> Result<()> {
    let sites = initial.volume().len();
    if sites > opts.max_sites {
        return Err(ArwError::ResourceLimit(format!(
            "volume has {sites} sites, oracle cap is {}",
            opts.max_sites
        )));
    }
    let mass = initial.total_mass();
    if mass > opts.max_mass {
        return Err(ArwError::ResourceLimit(format!(
            "initial mass {mass} exceeds oracle cap {}",
            opts.max_mass
        )));
    }
    Ok(())
}

fn use_rational(initial: &Configuration, opts: &OracleOptions) -> bool {
    match opts.arithmetic {
        OracleArithmetic::Float => false,
        OracleArithmetic::Rational => true,
        OracleArithmetic::Auto => initial.total_mass() <= 2 && initial.volume().len() <= 5,
    }
}

fn distribution_generic<S: ChainScalar>(
    initial: &Configuration,
    kernel: &JumpKernel,
    regime: &SleepRegime,
    mode: Mode,
    opts: &OracleOptions,
) -> Result<(Vec<(Vec<u32>, S)>, usize)> {
    let builder: Builder<S> = Builder::new(
        initial.volume(),
        kernel,
        regime,
        ChainKind::Plain,
        mode,
        opts.policy,
        opts.max_states,
    );
    let chain = builder.build(initial)?;
    let dist = chain.absorption_distribution()?;
    let n = chain.n_transient();
    Ok((
        chain
            .absorbing
            .into_iter()
            .zip(dist)
            .filter(|(_, p)| !p.is_zero())
            .collect(),
        n,
    ))
}

/// Exact distribution over stable configurations for `initial` under the
/// given mode, by the absorbing-chain linear solve.
pub fn exact_stab_distribution(
    initial: &Configuration,
    kernel: &JumpKernel,
    regime: &SleepRegime,
    mode: &Mode,
    opts: &OracleOptions,
) -> Result<StabDistribution> {
    check_caps(initial, opts)?;
    if kernel.dim() != initial.volume().dim() {
        return Err(ArwError::InvalidArgument("kernel/volume dimension mismatch".into()));
    }
    let volume = Arc::clone(initial.volume());
    let rational = use_rational(initial, opts);
    let (raw, states): (Vec<(Vec<u32>, f64, Option<BigRational>)>, usize) = if rational {
        let (entries, n) =
            distribution_generic::<BigRational>(initial, kernel, regime, mode.clone(), opts)?;
        (
            entries
                .into_iter()
                .map(|(c, p)| {
                    let f = p.to_f64_lossy();
                    (c, f, Some(p))
                })
                .collect(),
            n,
        )
    } else {
        let (entries, n) = distribution_generic::<f64>(initial, kernel, regime, mode.clone(), opts)?;
        (entries.into_iter().map(|(c, p)| (c, p, None)).collect(), n)
    };

    let mut entries: Vec<DistEntry> = raw
        .into_iter()
        .map(|(cells, probability, exact)| DistEntry {
            config: Configuration::from_cells(Arc::clone(&volume), cells),
            probability,
            exact,
        })
        .collect();
    let total: f64 = entries.iter().map(|e| e.probability).sum();
    let residual = (1.0 - total).abs();
    if residual > 1e-10 {
        return Err(ArwError::OracleModel(format!(
            "absorption probabilities sum to {total}; residual beyond 1e-10"
        )));
    }
    entries.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap()
            .then_with(|| a.config.cells().cmp(b.config.cells()))
    });
    Ok(StabDistribution { entries, residual, transient_states: states, rational })
}

/// Exact expectation of the requested functional. `MeanCh` and `ChPgf` run
/// the strong-via-weak chain (the phase marker lives in the state space);
/// the others run the legal-stabilization chain.
pub fn exact_quantity(
    initial: &Configuration,
    kernel: &JumpKernel,
    regime: &SleepRegime,
    quantity: Quantity,
    opts: &OracleOptions,
) -> Result<QuantityValue> {
    check_caps(initial, opts)?;
    if kernel.dim() != initial.volume().dim() {
        return Err(ArwError::InvalidArgument("kernel/volume dimension mismatch".into()));
    }
    match quantity {
        Quantity::OriginOccupied => {
            let dist = exact_stab_distribution(initial, kernel, regime, &Mode::Legal, opts)?;
            let value = dist.origin_occupied();
            let exact = if dist.rational {
                Some(
                    dist.entries
                        .iter()
                        .filter(|e| e.config.origin_occupied())
                        .map(|e| e.exact.clone().expect("rational mode"))
                        .fold(<BigRational as Zero>::zero(), |a, b| a + b),
                )
            } else {
                None
            };
            Ok(QuantityValue { value, exact })
        }
        Quantity::MassRetained => {
            let dist = exact_stab_distribution(initial, kernel, regime, &Mode::Legal, opts)?;
            let value = dist
                .entries
                .iter()
                .map(|e| e.probability * e.config.total_mass() as f64)
                .sum();
            let exact = if dist.rational {
                Some(
                    dist.entries
                        .iter()
                        .map(|e| {
                            e.exact.clone().expect("rational mode")
                                * BigRational::from_integer(BigInt::from(e.config.total_mass()))
                        })
                        .fold(<BigRational as Zero>::zero(), |a, b| a + b),
                )
            } else {
                None
            };
            Ok(QuantityValue { value, exact })
        }
        Quantity::MeanCh | Quantity::ChPgf(_) => {
            if initial.has_sleeper() {
                return Err(ArwError::InvalidConfiguration(
                    "chance quantities need an all-active initial configuration".into(),
                ));
            }
            if use_rational(initial, opts) {
                let builder: Builder<BigRational> = Builder::new(
                    initial.volume(),
                    kernel,
                    regime,
                    ChainKind::StrongViaWeak,
                    Mode::Legal,
                    opts.policy,
                    opts.max_states,
                );
                let chain = builder.build(initial)?;
                let exact = match quantity {
                    Quantity::MeanCh => chain.mean_ch()?,
                    Quantity::ChPgf(s) => chain.ch_pgf(
                        BigRational::from_f64(s).ok_or_else(|| {
                            ArwError::InvalidArgument("pgf argument must be finite".into())
                        })?,
                    )?,
                    _ => unreachable!(),
                };
                Ok(QuantityValue { value: exact.to_f64_lossy(), exact: Some(exact) })
            } else {
                let builder: Builder<f64> = Builder::new(
                    initial.volume(),
                    kernel,
                    regime,
                    ChainKind::StrongViaWeak,
                    Mode::Legal,
                    opts.policy,
                    opts.max_states,
                );
                let chain = builder.build(initial)?;
                let value = match quantity {
                    Quantity::MeanCh => chain.mean_ch()?,
                    Quantity::ChPgf(s) => chain.ch_pgf(s)?,
                    _ => unreachable!(),
                };
                Ok(QuantityValue { value, exact: None })
            }
        }
    }
}
