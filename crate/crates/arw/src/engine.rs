//! Configurations, odometers, toppling, and the three stabilization modes
//! on a finite volume with killing at the boundary.
//!
//! A site holds either a count of active particles or a single sleeping
//! particle. Toppling an unstable site consumes the next entry of its
//! instruction stack: a sleep puts a lone active particle to sleep (and is a
//! no-op when two or more are present — the sleeper is immediately
//! reactivated), a jump moves one particle, waking any sleeper it lands on;
//! jumps off the volume kill the particle.
//!
//! Stability is mode-dependent. `Legal`: no site holds an active particle.
//! `Weak(U)`: a single active particle may rest frozen on sites of `U`.
//! `Strong(U)`: no particle at all, sleeping or active, may rest on `U`;
//! sleepers on `U` are acceptably toppled (woken, then the next instruction
//! executes). The abelian property makes the final state independent of the
//! toppling order, which the pluggable scheduler policies exist to test.
//!
//! In the `AlwaysSleep` regime a toppling whose sleep can never resolve —
//! a multi-particle site, a woken sleeper on `U`, a forced jump-out —
//! consumes its stack entry as a jump with the offset drawn through the
//! kernel inverse CDF. That is the `lambda -> infinity` limit dynamics:
//! sleeps at such sites are no-ops executed infinitely fast, and only the
//! eventual jump changes the configuration.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArwError, Result};
use crate::kernel::{Params, Volume};
use crate::parallel::{self, domain};
use crate::randomness::{Instruction, InstructionStream, RawInstruction, SleepRegime};

/// Cell encoding: `0` empty, `u32::MAX` a sleeping particle, anything else
/// a count of active particles.
const SLEEPING: u32 = u32::MAX;

/// Default toppling budget per run. Exhaustion is a defect signal, never a
/// silent truncation.
pub const DEFAULT_MAX_TOPPLINGS: u64 = 1_000_000_000;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// What one site holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteContent {
    Empty,
    Sleeping,
    Active(u32),
}

/// Particle state over a finite volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigFile", into = "ConfigFile")]
pub struct Configuration {
    volume: Arc<Volume>,
    cells: Vec<u32>,
}

/// Literal format: `{"volume": {...}, "sites": {"(x,..)": count | "s"}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigFile {
    volume: Volume,
    sites: BTreeMap<String, serde_json::Value>,
}

fn site_key_string(site: &[i64]) -> String {
    let inner = site.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    format!("({inner})")
}

fn parse_site_key(s: &str) -> Result<Vec<i64>> {
    let inner = s
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| ArwError::InvalidConfiguration(format!("bad site key {s:?}")))?;
    inner
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<i64>()
                .map_err(|_| ArwError::InvalidConfiguration(format!("bad coordinate in {s:?}")))
        })
        .collect()
}

impl TryFrom<ConfigFile> for Configuration {
    type Error = ArwError;
    fn try_from(f: ConfigFile) -> Result<Self> {
        let volume = Arc::new(f.volume);
        let mut config = Configuration::empty(Arc::clone(&volume));
        for (key, value) in &f.sites {
            let site = parse_site_key(key)?;
            let content = match value {
                serde_json::Value::String(s) if s == "s" => SiteContent::Sleeping,
                serde_json::Value::Number(n) => {
                    let c = n.as_u64().ok_or_else(|| {
                        ArwError::InvalidConfiguration(format!("bad count at {key}"))
                    })?;
                    if c >= SLEEPING as u64 {
                        return Err(ArwError::InvalidConfiguration("count too large".into()));
                    }
                    if c == 0 {
                        SiteContent::Empty
                    } else {
                        SiteContent::Active(c as u32)
                    }
                }
                _ => {
                    return Err(ArwError::InvalidConfiguration(format!(
                        "site {key} must hold a count or \"s\""
                    )))
                }
            };
            config.set_site(&site, content)?;
        }
        Ok(config)
    }
}

impl From<Configuration> for ConfigFile {
    fn from(c: Configuration) -> Self {
        let mut sites = BTreeMap::new();
        for idx in 0..c.volume.len() {
            match c.content(idx) {
                SiteContent::Empty => {}
                SiteContent::Sleeping => {
                    sites.insert(site_key_string(c.volume.site(idx)), "s".into());
                }
                SiteContent::Active(n) => {
                    sites.insert(site_key_string(c.volume.site(idx)), n.into());
                }
            }
        }
        ConfigFile { volume: (*c.volume).clone(), sites }
    }
}

impl Configuration {
    pub fn empty(volume: Arc<Volume>) -> Self {
        let cells = vec![0; volume.len()];
        Configuration { volume, cells }
    }

    /// One active particle at every site of the centered ball `B_r`.
    pub fn fill_ball(volume: Arc<Volume>, r: i64) -> Result<Self> {
        if !volume.contains_ball(r) {
            return Err(ArwError::InvalidConfiguration(format!(
                "volume {} does not contain B_{r}",
                volume.describe()
            )));
        }
        let mut c = Configuration::empty(volume);
        for idx in 0..c.volume.len() {
            if c.volume.inf_norm(idx) <= r {
                c.cells[idx] = 1;
            }
        }
        Ok(c)
    }

    /// A single active particle at the origin.
    pub fn single_at_origin(volume: Arc<Volume>) -> Self {
        let mut c = Configuration::empty(volume);
        let o = c.volume.origin_index();
        c.cells[o] = 1;
        c
    }

    #[inline]
    pub fn volume(&self) -> &Arc<Volume> {
        &self.volume
    }

    #[inline]
    pub fn content(&self, index: usize) -> SiteContent {
        match self.cells[index] {
            0 => SiteContent::Empty,
            SLEEPING => SiteContent::Sleeping,
            n => SiteContent::Active(n),
        }
    }

    pub fn set_site(&mut self, site: &[i64], content: SiteContent) -> Result<()> {
        let idx = self
            .volume
            .index_of(site)
            .ok_or_else(|| ArwError::InvalidConfiguration(format!("site {site:?} outside volume")))?;
        self.set_index(idx, content);
        Ok(())
    }

    pub fn set_index(&mut self, index: usize, content: SiteContent) {
        self.cells[index] = match content {
            SiteContent::Empty => 0,
            SiteContent::Sleeping => SLEEPING,
            SiteContent::Active(n) => n,
        };
    }

    /// Total particle count; a sleeper counts one.
    pub fn total_mass(&self) -> u64 {
        self.cells
            .iter()
            .map(|&c| if c == SLEEPING { 1 } else { c as u64 })
            .sum()
    }

    pub fn has_sleeper(&self) -> bool {
        self.cells.iter().any(|&c| c == SLEEPING)
    }

    /// Anything, active or sleeping, at the origin.
    pub fn origin_occupied(&self) -> bool {
        self.cells[self.volume.origin_index()] != 0
    }

    pub fn is_stable_for(&self, mode: &Mode) -> bool {
        let view = ModeView::new(mode);
        (0..self.cells.len()).all(|i| !view.is_unstable(&self.cells, i))
    }

    pub(crate) fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub(crate) fn from_cells(volume: Arc<Volume>, cells: Vec<u32>) -> Self {
        Configuration { volume, cells }
    }
}

// ---------------------------------------------------------------------------
// Odometer
// ---------------------------------------------------------------------------

/// Per-site count of consumed instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometerMap {
    counts: Vec<u64>,
}

impl OdometerMap {
    pub fn zeros(len: usize) -> Self {
        OdometerMap { counts: vec![0; len] }
    }

    #[inline]
    pub fn get(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

// ---------------------------------------------------------------------------
// Modes and scheduler policies
// ---------------------------------------------------------------------------

/// Frozen set `U` for weak/strong stabilization, aligned to a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct USet {
    volume: Arc<Volume>,
    mask: Vec<bool>,
    sites: Vec<usize>,
}

impl USet {
    pub fn origin(volume: &Arc<Volume>) -> Self {
        let idx = volume.origin_index();
        let mut mask = vec![false; volume.len()];
        mask[idx] = true;
        USet { volume: Arc::clone(volume), mask, sites: vec![idx] }
    }

    /// All sites with `|x|_inf <= r`.
    pub fn ball(volume: &Arc<Volume>, r: i64) -> Result<Self> {
        if !volume.contains_ball(r) {
            return Err(ArwError::InvalidVolume(format!(
                "volume {} does not contain B_{r}",
                volume.describe()
            )));
        }
        let mut mask = vec![false; volume.len()];
        let mut sites = Vec::new();
        for idx in 0..volume.len() {
            if volume.inf_norm(idx) <= r {
                mask[idx] = true;
                sites.push(idx);
            }
        }
        Ok(USet { volume: Arc::clone(volume), mask, sites })
    }

    pub fn from_sites(volume: &Arc<Volume>, coords: &[Vec<i64>]) -> Result<Self> {
        let mut mask = vec![false; volume.len()];
        let mut sites = Vec::new();
        for c in coords {
            let idx = volume
                .index_of(c)
                .ok_or_else(|| ArwError::InvalidVolume(format!("U site {c:?} outside volume")))?;
            if !mask[idx] {
                mask[idx] = true;
                sites.push(idx);
            }
        }
        sites.sort_unstable();
        Ok(USet { volume: Arc::clone(volume), mask, sites })
    }

    pub fn site_indices(&self) -> &[usize] {
        &self.sites
    }
}

/// Stabilization mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Legal,
    Weak(USet),
    Strong(USet),
}

impl Mode {
    fn check_volume(&self, volume: &Arc<Volume>) -> Result<()> {
        let u = match self {
            Mode::Legal => return Ok(()),
            Mode::Weak(u) | Mode::Strong(u) => u,
        };
        if Arc::ptr_eq(&u.volume, volume) || *u.volume == **volume {
            Ok(())
        } else {
            Err(ArwError::InvalidArgument("mode U-set built on a different volume".into()))
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Mode::Legal => "legal".into(),
            Mode::Weak(u) => format!("weak(|U|={})", u.sites.len()),
            Mode::Strong(u) => format!("strong(|U|={})", u.sites.len()),
        }
    }
}

#[derive(Clone, Copy)]
enum ModeKind {
    Legal,
    Weak,
    Strong,
}

struct ModeView<'a> {
    kind: ModeKind,
    mask: Option<&'a [bool]>,
}

impl<'a> ModeView<'a> {
    fn new(mode: &'a Mode) -> Self {
        match mode {
            Mode::Legal => ModeView { kind: ModeKind::Legal, mask: None },
            Mode::Weak(u) => ModeView { kind: ModeKind::Weak, mask: Some(&u.mask) },
            Mode::Strong(u) => ModeView { kind: ModeKind::Strong, mask: Some(&u.mask) },
        }
    }

    #[inline(always)]
    fn in_u(&self, idx: usize) -> bool {
        self.mask.map_or(false, |m| m[idx])
    }

    #[inline(always)]
    fn is_unstable(&self, cells: &[u32], idx: usize) -> bool {
        let cell = cells[idx];
        match self.kind {
            ModeKind::Legal => cell != 0 && cell != SLEEPING,
            ModeKind::Weak => {
                if cell == 0 || cell == SLEEPING {
                    false
                } else if self.in_u(idx) {
                    cell >= 2
                } else {
                    true
                }
            }
            ModeKind::Strong => {
                if self.in_u(idx) {
                    cell != 0
                } else {
                    cell != 0 && cell != SLEEPING
                }
            }
        }
    }
}

/// Order in which unstable sites are toppled. The final state does not
/// depend on the choice (abelian property); the alternatives exist to make
/// that claim testable. `LexMin` is the default for replays; `DepthFirst`
/// is the fastest and is what the Monte Carlo campaigns use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerPolicy {
    LexMin,
    LexMax,
    DepthFirst,
    BreadthFirst,
    RandomOrder(u64),
}

enum Worklist {
    LexMin(BTreeSet<u32>),
    LexMax(BTreeSet<u32>),
    Stack(Vec<u32>, Vec<bool>),
    Queue(VecDeque<u32>, Vec<bool>),
    Random(Vec<u32>, Vec<bool>, ChaCha8Rng),
}

impl Worklist {
    fn new(policy: SchedulerPolicy, len: usize) -> Self {
        match policy {
            SchedulerPolicy::LexMin => Worklist::LexMin(BTreeSet::new()),
            SchedulerPolicy::LexMax => Worklist::LexMax(BTreeSet::new()),
            SchedulerPolicy::DepthFirst => Worklist::Stack(Vec::new(), vec![false; len]),
            SchedulerPolicy::BreadthFirst => Worklist::Queue(VecDeque::new(), vec![false; len]),
            SchedulerPolicy::RandomOrder(seed) => Worklist::Random(
                Vec::new(),
                vec![false; len],
                ChaCha8Rng::seed_from_u64(parallel::derive_seed(seed, domain::SCHEDULER, 0, 0)),
            ),
        }
    }

    #[inline]
    fn push(&mut self, idx: u32) {
        match self {
            Worklist::LexMin(set) | Worklist::LexMax(set) => {
                set.insert(idx);
            }
            Worklist::Stack(v, mask) => {
                if !mask[idx as usize] {
                    mask[idx as usize] = true;
                    v.push(idx);
                }
            }
            Worklist::Queue(q, mask) => {
                if !mask[idx as usize] {
                    mask[idx as usize] = true;
                    q.push_back(idx);
                }
            }
            Worklist::Random(v, mask, _) => {
                if !mask[idx as usize] {
                    mask[idx as usize] = true;
                    v.push(idx);
                }
            }
        }
    }

    #[inline]
    fn pop(&mut self) -> Option<u32> {
        match self {
            Worklist::LexMin(set) => set.pop_first(),
            Worklist::LexMax(set) => set.pop_last(),
            Worklist::Stack(v, mask) => {
                let idx = v.pop()?;
                mask[idx as usize] = false;
                Some(idx)
            }
            Worklist::Queue(q, mask) => {
                let idx = q.pop_front()?;
                mask[idx as usize] = false;
                Some(idx)
            }
            Worklist::Random(v, mask, rng) => {
                if v.is_empty() {
                    return None;
                }
                let i = rng.random_range(0..v.len());
                let idx = v.swap_remove(i);
                mask[idx as usize] = false;
                Some(idx)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// Summary taken after one weak stabilization inside the strong-via-weak
/// procedure: origin occupancy plus, when a tracked ball is configured, the
/// set of empty sites ("holes") inside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakSnapshot {
    /// 1-based weak stabilization index; `j = Ch + 1` is the final one.
    pub j: u64,
    pub origin_occupied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holes: Option<Vec<Vec<i64>>>,
}

/// Outcome of a stabilization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilizationRecord {
    pub final_config: Configuration,
    pub odometer: OdometerMap,
    pub mode: String,
    pub topplings: u64,
    pub killed: u64,
    pub initial_mass: u64,
    /// Strong-via-weak only: number of completed jump-out iterations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chances: Option<u64>,
    /// Strong-via-weak only: `b_j` = whether the first instruction of the
    /// j-th jump-out was a sleep. Length equals `chances`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sleep_trials: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_snapshots: Option<Vec<WeakSnapshot>>,
    /// Full weakly stable configurations, kept only when explicitly
    /// requested (reconstruction tests); never serialized.
    #[serde(skip)]
    pub weak_configs: Option<Vec<Configuration>>,
}

impl StabilizationRecord {
    /// Mass balance of the run: initial = retained + killed, exactly.
    pub fn mass_balanced(&self) -> bool {
        self.final_config.total_mass() + self.killed == self.initial_mass
    }
}

/// State captured when a toppling budget runs out.
#[derive(Debug)]
pub struct PartialState {
    pub config: Configuration,
    pub odometer: OdometerMap,
}

/// What a single toppling did.
#[derive(Debug, Clone, PartialEq)]
pub struct ToppleEvent {
    pub instruction: Instruction,
    /// The toppled particle went to sleep.
    pub slept: bool,
    /// The jump left the volume.
    pub killed: bool,
    /// The jump landed on a sleeper and woke it.
    pub woke_target: bool,
}

// ---------------------------------------------------------------------------
// The toppling engine
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub(crate) struct ExecOutcome {
    pub(crate) jumped: bool,
    /// Landing index when the jump stayed inside the volume.
    pub(crate) target: Option<u32>,
    /// The landing site held a sleeper.
    woke: bool,
    /// Offset index of the executed jump.
    offset_index: usize,
}

pub(crate) struct Engine<'a> {
    pub(crate) volume: Arc<Volume>,
    stream: &'a InstructionStream,
    always_sleep: bool,
    pub(crate) cells: Vec<u32>,
    pub(crate) odometer: Vec<u64>,
    site_keys: Vec<u64>,
    scratch: Vec<i64>,
    /// Box volumes: per-support-offset dense index delta.
    box_deltas: Vec<isize>,
    /// Box volumes: per-axis radii for the bounds check.
    box_radii: Vec<i64>,
    pub(crate) killed: u64,
    pub(crate) topplings: u64,
    budget: u64,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(config: &Configuration, stream: &'a InstructionStream, budget: u64) -> Result<Engine<'a>> {
        if stream.kernel().dim() != config.volume().dim() {
            return Err(ArwError::InvalidArgument(
                "stream kernel dimension does not match volume".into(),
            ));
        }
        let volume = Arc::clone(config.volume());
        let site_keys = (0..volume.len())
            .map(|i| stream.site_key(volume.site(i)))
            .collect();
        let (box_deltas, box_radii) = match volume.box_geometry() {
            Some((radii, strides)) => (
                stream
                    .kernel()
                    .support()
                    .iter()
                    .map(|a| {
                        a.offset
                            .iter()
                            .zip(strides)
                            .map(|(&o, &s)| o as isize * s as isize)
                            .sum()
                    })
                    .collect(),
                radii.to_vec(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        Ok(Engine {
            box_deltas,
            box_radii,
            scratch: vec![0; volume.dim()],
            site_keys,
            always_sleep: matches!(stream.regime(), SleepRegime::AlwaysSleep),
            cells: config.cells().to_vec(),
            odometer: vec![0; volume.len()],
            volume,
            stream,
            killed: 0,
            topplings: 0,
            budget,
        })
    }

    pub(crate) fn budget_error(&self) -> ArwError {
        ArwError::BudgetExhausted {
            topplings: self.topplings,
            partial: Box::new(PartialState {
                config: Configuration::from_cells(Arc::clone(&self.volume), self.cells.clone()),
                odometer: OdometerMap { counts: self.odometer.clone() },
            }),
        }
    }

    /// Landing index of a jump from `idx` by support offset `oi`, or
    /// `None` when it leaves the volume. Box volumes resolve this with a
    /// precomputed index delta and a per-axis bounds check.
    #[inline(always)]
    fn jump_target(&mut self, idx: usize, oi: usize) -> Option<usize> {
        if !self.box_deltas.is_empty() {
            let src = self.volume.site(idx);
            let off = self.stream.kernel().offset(oi);
            for a in 0..src.len() {
                let c = src[a] + off[a];
                if c < -self.box_radii[a] || c > self.box_radii[a] {
                    return None;
                }
            }
            Some((idx as isize + self.box_deltas[oi]) as usize)
        } else {
            let src = self.volume.site(idx);
            let off = self.stream.kernel().offset(oi);
            for a in 0..src.len() {
                self.scratch[a] = src[a] + off[a];
            }
            self.volume.index_of(&self.scratch)
        }
    }

    /// Execute one instruction at `idx`. The caller guarantees the site is
    /// unstable for its mode (a sleeper here means an acceptable toppling:
    /// wake first, then execute).
    #[inline]
    pub(crate) fn execute(&mut self, idx: usize) -> Result<ExecOutcome> {
        if self.topplings >= self.budget {
            return Err(self.budget_error());
        }
        let mut cell = self.cells[idx];
        let was_sleeping = cell == SLEEPING;
        if was_sleeping {
            cell = 1;
        }
        let key = self.site_keys[idx];
        let k = self.odometer[idx];
        let raw = if self.always_sleep && (cell >= 2 || was_sleeping) {
            // The sleep branch can never resolve here; limit dynamics jump.
            RawInstruction::Jump(self.stream.forced_jump(key, k))
        } else {
            self.stream.raw_instruction(key, k)
        };
        self.odometer[idx] = k + 1;
        self.topplings += 1;
        match raw {
            RawInstruction::Sleep => {
                if cell == 1 {
                    self.cells[idx] = SLEEPING;
                } // two or more active: immediately reactivated, no change
                Ok(ExecOutcome { jumped: false, target: None, woke: false, offset_index: 0 })
            }
            RawInstruction::Jump(oi) => {
                self.cells[idx] = cell - 1;
                match self.jump_target(idx, oi) {
                    Some(t) => {
                        let woke = self.cells[t] == SLEEPING;
                        self.cells[t] = if woke { 2 } else { self.cells[t] + 1 };
                        Ok(ExecOutcome { jumped: true, target: Some(t as u32), woke, offset_index: oi })
                    }
                    None => {
                        self.killed += 1;
                        Ok(ExecOutcome { jumped: true, target: None, woke: false, offset_index: oi })
                    }
                }
            }
        }
    }

    /// Topple until no site is unstable for `mode`, visiting sites in the
    /// order given by `policy`.
    pub(crate) fn stabilize_pass(&mut self, mode: &Mode, policy: SchedulerPolicy) -> Result<()> {
        let view = ModeView::new(mode);
        let mut work = Worklist::new(policy, self.cells.len());
        for i in 0..self.cells.len() {
            if view.is_unstable(&self.cells, i) {
                work.push(i as u32);
            }
        }
        let drain = matches!(policy, SchedulerPolicy::DepthFirst);
        while let Some(idx) = work.pop() {
            let mut idx = idx as usize;
            if !view.is_unstable(&self.cells, idx) {
                continue;
            }
            if drain {
                // Process the site to stability, then follow the moved
                // particle directly instead of round-tripping the stack;
                // order is immaterial by the abelian property, and this
                // keeps the stream reads per site contiguous.
                loop {
                    let out = self.execute(idx)?;
                    if view.is_unstable(&self.cells, idx) {
                        if let Some(t) = out.target {
                            if view.is_unstable(&self.cells, t as usize) {
                                work.push(t);
                            }
                        }
                        continue;
                    }
                    match out.target {
                        Some(t) if view.is_unstable(&self.cells, t as usize) => {
                            idx = t as usize;
                        }
                        _ => break,
                    }
                }
            } else {
                let out = self.execute(idx)?;
                if let Some(t) = out.target {
                    if view.is_unstable(&self.cells, t as usize) {
                        work.push(t);
                    }
                }
                if view.is_unstable(&self.cells, idx) {
                    work.push(idx as u32);
                }
            }
        }
        Ok(())
    }

    /// Consume instructions at `origin` until one jump executes, moving the
    /// lone particle out. Returns the sleep trial (whether the first
    /// instruction was a sleep) and the landing index if it stayed inside.
    pub(crate) fn jump_out(&mut self, origin: usize) -> Result<(bool, Option<u32>)> {
        debug_assert_eq!(self.cells[origin], 1);
        let key = self.site_keys[origin];
        let b = matches!(
            self.stream.raw_instruction(key, self.odometer[origin]),
            RawInstruction::Sleep
        );
        loop {
            if self.topplings >= self.budget {
                return Err(self.budget_error());
            }
            let k = self.odometer[origin];
            let raw = if self.always_sleep {
                RawInstruction::Jump(self.stream.forced_jump(key, k))
            } else {
                self.stream.raw_instruction(key, k)
            };
            self.odometer[origin] = k + 1;
            self.topplings += 1;
            match raw {
                // The particle sleeps; the next acceptable toppling wakes it
                // again, so the configuration is unchanged in net.
                RawInstruction::Sleep => continue,
                RawInstruction::Jump(oi) => {
                    self.cells[origin] = 0;
                    match self.jump_target(origin, oi) {
                        Some(t) => {
                            let tc = self.cells[t];
                            self.cells[t] = if tc == SLEEPING { 2 } else { tc + 1 };
                            return Ok((b, Some(t as u32)));
                        }
                        None => {
                            self.killed += 1;
                            return Ok((b, None));
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn holes_within(&self, tracked_radius: i64) -> Vec<Vec<i64>> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i] == 0 && self.volume.inf_norm(i) <= tracked_radius)
            .map(|i| self.volume.site(i).to_vec())
            .collect()
    }

    pub(crate) fn into_record(self, mode: String, initial_mass: u64) -> StabilizationRecord {
        debug_assert_eq!(self.odometer.iter().sum::<u64>(), self.topplings);
        StabilizationRecord {
            final_config: Configuration::from_cells(Arc::clone(&self.volume), self.cells),
            odometer: OdometerMap { counts: self.odometer },
            mode,
            topplings: self.topplings,
            killed: self.killed,
            initial_mass,
            chances: None,
            sleep_trials: None,
            weak_snapshots: None,
            weak_configs: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Topple a single site, consuming one instruction. Errors if the site is
/// stable for `mode` — that guards scheduler bugs.
pub fn topple(
    config: &mut Configuration,
    odometer: &mut OdometerMap,
    site: &[i64],
    stream: &InstructionStream,
    mode: &Mode,
) -> Result<ToppleEvent> {
    mode.check_volume(config.volume())?;
    let idx = config
        .volume()
        .index_of(site)
        .ok_or_else(|| ArwError::InvalidArgument(format!("site {site:?} outside volume")))?;
    let view = ModeView::new(mode);
    if !view.is_unstable(config.cells(), idx) {
        return Err(ArwError::IllegalToppling(format!(
            "site {site:?} is stable for mode {}",
            mode.describe()
        )));
    }
    let mut engine = Engine::new(config, stream, u64::MAX)?;
    engine.odometer.copy_from_slice(odometer.counts());
    let out = engine.execute(idx)?;
    let event = ToppleEvent {
        instruction: if out.jumped {
            Instruction::Jump { offset: stream.kernel().offset(out.offset_index).to_vec() }
        } else {
            Instruction::Sleep
        },
        slept: !out.jumped && engine.cells[idx] == SLEEPING,
        killed: out.jumped && out.target.is_none(),
        woke_target: out.woke,
    };
    config.cells.copy_from_slice(&engine.cells);
    odometer.counts.copy_from_slice(&engine.odometer);
    Ok(event)
}

/// Repeatedly topple mode-unstable sites, chosen by `policy`, until none
/// remain. The abelian property guarantees the result agrees across
/// policies for a fixed stream.
pub fn stabilize(
    config: &Configuration,
    stream: &InstructionStream,
    mode: &Mode,
    policy: SchedulerPolicy,
    max_topplings: u64,
) -> Result<StabilizationRecord> {
    if max_topplings == 0 {
        return Err(ArwError::InvalidArgument("toppling budget must be positive".into()));
    }
    mode.check_volume(config.volume())?;
    let initial_mass = config.total_mass();
    let mut engine = Engine::new(config, stream, max_topplings)?;
    engine.stabilize_pass(mode, policy)?;
    Ok(engine.into_record(mode.describe(), initial_mass))
}

/// Options for [`strong_via_weak`].
#[derive(Debug, Clone, Copy)]
pub struct StrongViaWeakOptions {
    pub max_topplings: u64,
    pub policy: SchedulerPolicy,
    /// Record hole sets within this radius after each weak stabilization.
    pub tracked_radius: Option<i64>,
    /// Cap on recorded snapshots; deeper ones are astronomically rare at
    /// large lambda.
    pub max_snapshots: u64,
    /// Keep full weakly stable configurations (reconstruction tests only).
    pub record_weak_configs: bool,
}

impl Default for StrongViaWeakOptions {
    fn default() -> Self {
        StrongViaWeakOptions {
            max_topplings: DEFAULT_MAX_TOPPLINGS,
            policy: SchedulerPolicy::DepthFirst,
            tracked_radius: None,
            max_snapshots: 8,
            record_weak_configs: false,
        }
    }
}

/// Strong stabilization with respect to the origin via successive weak
/// stabilizations.
///
/// Pre-step: weakly stabilize with respect to `0`. Then, while the origin
/// holds a particle, iterate: jump it out (recording the sleep trial `b_j`
/// from the first consumed instruction), weakly stabilize, and check the
/// origin again. `Ch` is the number of completed iterations and the final
/// configuration is the strongly stable one.
pub fn strong_via_weak(
    config: &Configuration,
    stream: &InstructionStream,
    opts: StrongViaWeakOptions,
) -> Result<StabilizationRecord> {
    if config.has_sleeper() {
        return Err(ArwError::InvalidConfiguration(
            "strong-via-weak starts from an all-active configuration".into(),
        ));
    }
    if let Some(r) = opts.tracked_radius {
        if !config.volume().contains_ball(r) {
            return Err(ArwError::InvalidVolume(format!("tracked ball B_{r} exceeds the volume")));
        }
    }
    let initial_mass = config.total_mass();
    let volume = Arc::clone(config.volume());
    let origin = volume.origin_index();
    let weak = Mode::Weak(USet::origin(&volume));
    let mut engine = Engine::new(config, stream, opts.max_topplings)?;

    let mut snapshots: Vec<WeakSnapshot> = Vec::new();
    let mut weak_configs: Vec<Configuration> = Vec::new();
    let mut trials: Vec<bool> = Vec::new();

    fn take_snapshot(
        engine: &Engine,
        origin: usize,
        j: u64,
        opts: &StrongViaWeakOptions,
        snapshots: &mut Vec<WeakSnapshot>,
        weak_configs: &mut Vec<Configuration>,
    ) {
        if j <= opts.max_snapshots {
            snapshots.push(WeakSnapshot {
                j,
                origin_occupied: engine.cells[origin] != 0,
                holes: opts.tracked_radius.map(|r| engine.holes_within(r)),
            });
        }
        if opts.record_weak_configs {
            weak_configs.push(Configuration::from_cells(
                Arc::clone(&engine.volume),
                engine.cells.clone(),
            ));
        }
    }

    engine.stabilize_pass(&weak, opts.policy)?;
    take_snapshot(&engine, origin, 1, &opts, &mut snapshots, &mut weak_configs);

    let mut chances = 0u64;
    while engine.cells[origin] != 0 {
        debug_assert_eq!(engine.cells[origin], 1);
        let (b, _target) = engine.jump_out(origin)?;
        trials.push(b);
        chances += 1;
        engine.stabilize_pass(&weak, opts.policy)?;
        take_snapshot(&engine, origin, chances + 1, &opts, &mut snapshots, &mut weak_configs);
    }

    let mut record = engine.into_record("strong(origin) via weak".into(), initial_mass);
    record.chances = Some(chances);
    record.sleep_trials = Some(trials);
    record.weak_snapshots = Some(snapshots);
    if opts.record_weak_configs {
        record.weak_configs = Some(weak_configs);
    }
    Ok(record)
}

/// Plug-in estimate of `P(0 in Stab_V eta)` from chance samples:
/// `1 - mean(lambda_j ^ Ch_i)`.
pub fn occupation_probability_pgf(ch_samples: &[u64], params: &Params) -> Result<f64> {
    if ch_samples.is_empty() {
        return Err(ArwError::InvalidArgument("need at least one chance sample".into()));
    }
    let lj = params.lambda_j();
    let mean: f64 = ch_samples
        .iter()
        .map(|&ch| lj.powi(ch.min(i32::MAX as u64) as i32))
        .sum::<f64>()
        / ch_samples.len() as f64;
    Ok(1.0 - mean)
}
