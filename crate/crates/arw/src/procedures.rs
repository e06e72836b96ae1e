//! Composite experiments built on the engine: the carpet procedure with its
//! geometric escape sandwich, exact gambler's-ruin odds, hole statistics
//! after successive weak stabilizations, and single-excursion chances.

use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::engine::{
    strong_via_weak, Configuration, Engine, Mode, SchedulerPolicy, StrongViaWeakOptions, USet,
};
use crate::error::{ArwError, Result};
use crate::kernel::{JumpKernel, Volume};
use crate::randomness::InstructionStream;

// ---------------------------------------------------------------------------
// Carpet procedure
// ---------------------------------------------------------------------------

/// Why a carpet run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarpetEnd {
    /// Some carpet-establishment toppling drew a jump instruction.
    Step1Jump,
    /// The excursion exited the carpet ball.
    Escaped,
    /// Iteration cap reached; campaign wrappers record this as data.
    Budget,
}

/// Per-iteration flags of the carpet procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarpetIteration {
    /// Step 1 put every woken particle back to sleep.
    pub step1_all_sleep: bool,
    /// Step 2 returned the excursion to the origin.
    pub returned: bool,
}

/// Outcome of one carpet run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarpetRunRecord {
    pub r: i64,
    /// Iteration index at which the procedure ended; always `>= 1`.
    pub ch_prime: u64,
    pub end_reason: CarpetEnd,
    pub iterations: Vec<CarpetIteration>,
    pub topplings: u64,
}

/// The iterative carpet procedure on `B_r`, starting from one active
/// particle per site of the ball.
///
/// Pre-step: weakly stabilize with respect to `B_r` (a no-op for the filled
/// start). Each iteration then (1) topples every active particle on
/// `B_r \ {0}` once, in lexicographic order, quitting if any jumps — success
/// re-establishes a fully sleeping carpet — and (2) jumps the origin
/// particle out and legally topples the walker until it returns to the
/// origin (next iteration) or exits `B_r` (end). The walker always sits on
/// a doubly-occupied site, so sleep instructions cannot stop it: its path is
/// a pure kernel walk, which is what makes the escape probability
/// independent of the sleep rate.
pub fn carpet_procedure(
    stream: &InstructionStream,
    volume: &Arc<Volume>,
    r: i64,
    max_iters: u64,
) -> Result<CarpetRunRecord> {
    if r < 0 {
        return Err(ArwError::InvalidArgument("carpet radius must be >= 0".into()));
    }
    if max_iters == 0 {
        return Err(ArwError::InvalidArgument("max_iters must be >= 1".into()));
    }
    if !volume.contains_ball(r) {
        return Err(ArwError::InvalidVolume(format!(
            "volume {} does not contain B_{r}",
            volume.describe()
        )));
    }
    let config = Configuration::fill_ball(Arc::clone(volume), r)?;
    let mut engine = Engine::new(&config, stream, crate::engine::DEFAULT_MAX_TOPPLINGS)?;
    let origin = volume.origin_index();

    // Pre-step: weakly stabilize with respect to B_r. The filled ball is
    // already weakly stable, but arbitrary volumes may hold mass outside.
    let u_ball = USet::ball(volume, r)?;
    engine.stabilize_pass(&Mode::Weak(u_ball), SchedulerPolicy::DepthFirst)?;

    // Carpet sites in lexicographic order, origin excluded.
    let carpet_sites: Vec<usize> = (0..volume.len())
        .filter(|&i| i != origin && volume.inf_norm(i) <= r)
        .collect();

    let mut iterations: Vec<CarpetIteration> = Vec::new();
    let mut j = 0u64;
    loop {
        if j >= max_iters {
            return Ok(CarpetRunRecord {
                r,
                ch_prime: j,
                end_reason: CarpetEnd::Budget,
                iterations,
                topplings: engine.topplings,
            });
        }
        j += 1;

        // Step 1: establish the carpet. Each active particle on the ball is
        // toppled exactly once; any jump quits the procedure.
        let mut all_sleep = true;
        for &idx in &carpet_sites {
            let cell = engine.cells[idx];
            if cell == 0 || cell == u32::MAX {
                continue; // already sleeping; only woken sites need toppling
            }
            debug_assert_eq!(cell, 1, "carpet site holds one woken particle");
            let out = engine.execute(idx)?;
            if out.jumped {
                all_sleep = false;
                break;
            }
        }
        if !all_sleep {
            iterations.push(CarpetIteration { step1_all_sleep: false, returned: false });
            return Ok(CarpetRunRecord {
                r,
                ch_prime: j,
                end_reason: CarpetEnd::Step1Jump,
                iterations,
                topplings: engine.topplings,
            });
        }

        // Step 2: jump the origin particle out and walk it over the carpet.
        debug_assert_eq!(engine.cells[origin], 1);
        let (_trial, landing) = engine.jump_out(origin)?;
        let mut walker = match landing {
            Some(t) if volume.inf_norm(t as usize) <= r => t as usize,
            // Left the ball (or the volume) on the jump-out itself.
            _ => {
                iterations.push(CarpetIteration { step1_all_sleep: true, returned: false });
                return Ok(CarpetRunRecord {
                    r,
                    ch_prime: j,
                    end_reason: CarpetEnd::Escaped,
                    iterations,
                    topplings: engine.topplings,
                });
            }
        };
        let returned = loop {
            debug_assert!(
                engine.cells[walker] >= 2 && engine.cells[walker] != u32::MAX,
                "walker shares its site with a woken carpet particle"
            );
            let out = engine.execute(walker)?;
            if !out.jumped {
                continue; // sleep no-op on a doubly occupied site
            }
            match out.target {
                Some(t) => {
                    let t = t as usize;
                    if t == origin {
                        break true;
                    }
                    if volume.inf_norm(t) > r {
                        break false;
                    }
                    walker = t;
                }
                None => break false, // killed at the volume boundary
            }
        };
        iterations.push(CarpetIteration { step1_all_sleep: true, returned });
        if !returned {
            return Ok(CarpetRunRecord {
                r,
                ch_prime: j,
                end_reason: CarpetEnd::Escaped,
                iterations,
                topplings: engine.topplings,
            });
        }
        // Returned: the origin holds the walker again; the next iteration
        // puts the woken trail back to sleep.
    }
}

// ---------------------------------------------------------------------------
// Gambler's ruin
// ---------------------------------------------------------------------------

/// Exact probability that a simple symmetric walk on `Z` started at `±1`
/// reaches `±(r+1)` before `0`, by solving the hitting linear system in
/// rational arithmetic. Equals `1/(r+1)`, but computed, not hard-coded.
pub fn gamblers_ruin_escape(kernel: &JumpKernel, r: i64) -> Result<BigRational> {
    if !kernel.is_ssrw_d1() {
        return Err(ArwError::Unsupported(
            "gambler's ruin escape is defined for the d=1 simple symmetric walk".into(),
        ));
    }
    if r < 0 {
        return Err(ArwError::InvalidArgument("radius must be >= 0".into()));
    }
    if r == 0 {
        return Ok(<BigRational as One>::one()); // absorbers adjacent
    }
    let n = r as usize; // unknowns h(1)..h(r)
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    // h(i) = (h(i-1) + h(i+1)) / 2 with h(0) = 0, h(r+1) = 1.
    let mut a = vec![<BigRational as Zero>::zero(); n * n];
    let mut b = vec![<BigRational as Zero>::zero(); n];
    for i in 0..n {
        a[i * n + i] = <BigRational as One>::one();
        if i > 0 {
            a[i * n + i - 1] = -half.clone();
        }
        if i + 1 < n {
            a[i * n + i + 1] = -half.clone();
        } else {
            b[i] = half.clone(); // h(r+1) = 1 boundary term
        }
    }
    let h = crate::oracle::solve_dense_rational(a, b, n)?;
    Ok(h[0].clone())
}

// ---------------------------------------------------------------------------
// Hole statistics
// ---------------------------------------------------------------------------

/// Hole indicators after the j-th weak stabilization, over a tracked ball.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoleStats {
    /// 1-based weak stabilization index, `j <= Ch`.
    pub j: u64,
    /// Per tracked site: whether it was empty in the j-th weakly stable
    /// configuration.
    pub hole_indicators: Vec<(Vec<i64>, bool)>,
    /// Maximal integer `i <= tracked_radius` with no hole in `B_i`.
    pub carpet_radius: i64,
}

/// Run strong-via-weak from a filled tracked ball, recording hole events
/// and carpet radii after each weak stabilization `j <= min(Ch, max_j)`.
/// Replicas with `Ch < j` simply contribute no entry for that `j`.
pub fn hole_statistics(
    stream: &InstructionStream,
    volume: &Arc<Volume>,
    tracked_radius: i64,
    max_j: u64,
) -> Result<Vec<HoleStats>> {
    if !volume.contains_ball(tracked_radius) {
        return Err(ArwError::InvalidVolume(format!(
            "volume {} does not contain the tracked ball B_{tracked_radius}",
            volume.describe()
        )));
    }
    let config = Configuration::fill_ball(Arc::clone(volume), tracked_radius)?;
    let record = strong_via_weak(
        &config,
        stream,
        StrongViaWeakOptions {
            tracked_radius: Some(tracked_radius),
            max_snapshots: max_j.saturating_add(1),
            ..Default::default()
        },
    )?;
    let ch = record.chances.unwrap_or(0);
    let tracked_sites: Vec<Vec<i64>> = (0..volume.len())
        .filter(|&i| volume.inf_norm(i) <= tracked_radius)
        .map(|i| volume.site(i).to_vec())
        .collect();
    let mut out = Vec::new();
    for snap in record.weak_snapshots.iter().flatten() {
        if snap.j > ch.min(max_j) {
            continue;
        }
        let holes = snap.holes.clone().unwrap_or_default();
        let hole_set: std::collections::HashSet<&Vec<i64>> = holes.iter().collect();
        let hole_indicators: Vec<(Vec<i64>, bool)> = tracked_sites
            .iter()
            .map(|s| (s.clone(), hole_set.contains(s)))
            .collect();
        let carpet_radius = holes
            .iter()
            .map(|s| s.iter().map(|c| c.abs()).max().unwrap_or(0) - 1)
            .min()
            .unwrap_or(tracked_radius)
            .min(tracked_radius);
        out.push(HoleStats { j: snap.j, hole_indicators, carpet_radius });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Single-excursion chances
// ---------------------------------------------------------------------------

/// Chances of a single particle: run strong-via-weak with one particle at
/// the origin and return `Ch`. Its law stochastically dominates
/// `Geom(pesc_{lambda,V})`, which the estimator campaigns verify.
pub fn single_excursion_chances(
    stream: &InstructionStream,
    volume: &Arc<Volume>,
    max_topplings: u64,
) -> Result<u64> {
    let config = Configuration::single_at_origin(Arc::clone(volume));
    let record = strong_via_weak(
        &config,
        stream,
        StrongViaWeakOptions { max_topplings, ..Default::default() },
    )?;
    Ok(record.chances.expect("strong-via-weak records chances"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::make_ssrw_kernel;
    use crate::parallel::{self, domain};
    use crate::randomness::SleepRegime;

    fn stream(lambda: f64, seed: u64) -> InstructionStream {
        InstructionStream::new(
            seed,
            Arc::new(make_ssrw_kernel(1).unwrap()),
            SleepRegime::normal(lambda).unwrap(),
        )
    }

    #[test]
    fn gamblers_ruin_matches_closed_form() {
        let k = make_ssrw_kernel(1).unwrap();
        assert_eq!(gamblers_ruin_escape(&k, 0).unwrap(), <BigRational as One>::one());
        for r in 1..=20i64 {
            let p = gamblers_ruin_escape(&k, r).unwrap();
            let expected = BigRational::new(BigInt::from(1), BigInt::from(r + 1));
            assert_eq!(p, expected, "r = {r}");
        }
    }

    #[test]
    fn gamblers_ruin_rejects_other_kernels() {
        let k = make_ssrw_kernel(2).unwrap();
        assert!(matches!(
            gamblers_ruin_escape(&k, 3),
            Err(ArwError::Unsupported(_))
        ));
    }

    #[test]
    fn carpet_radius_zero_always_escapes_first_iteration() {
        let v = Arc::new(Volume::centered_box(1, 2).unwrap());
        for seed in 0..50 {
            let s = stream(1.0, seed);
            let rec = carpet_procedure(&s, &v, 0, 100).unwrap();
            assert_eq!(rec.ch_prime, 1);
            assert_eq!(rec.end_reason, CarpetEnd::Escaped);
        }
    }

    #[test]
    fn carpet_always_sleep_escape_rate_is_gamblers_ruin() {
        // At lambda_s = 1 step 1 always succeeds, so Ch' counts pure
        // escape attempts: P(escape) = 1/(r+1) = 1/4 at r = 3.
        let k = Arc::new(make_ssrw_kernel(1).unwrap());
        let v = Arc::new(Volume::centered_box(1, 3).unwrap());
        let replicas = 10_000u64;
        let mut escapes_at_first = 0u64;
        let mut total_iters = 0u64;
        for rep in 0..replicas {
            let s = InstructionStream::new(
                parallel::derive_seed(5, domain::INSTRUCTIONS, 0, rep),
                Arc::clone(&k),
                SleepRegime::AlwaysSleep,
            );
            let rec = carpet_procedure(&s, &v, 3, 10_000).unwrap();
            assert!(rec.iterations.iter().all(|it| it.step1_all_sleep));
            assert_eq!(rec.end_reason, CarpetEnd::Escaped);
            if rec.ch_prime == 1 {
                escapes_at_first += 1;
            }
            total_iters += rec.ch_prime;
        }
        let p = escapes_at_first as f64 / replicas as f64;
        let se = (0.25 * 0.75 / replicas as f64).sqrt();
        assert!((p - 0.25).abs() < 4.0 * se, "escape rate {p}");
        // mean Ch' should be near 1/p = 4
        let mean = total_iters as f64 / replicas as f64;
        assert!((mean - 4.0).abs() < 0.2, "mean Ch' {mean}");
    }

    #[test]
    fn carpet_is_pathwise_below_chances() {
        // Same stream, same filled ball: Ch' <= Ch on every run.
        let v = Arc::new(Volume::centered_box(1, 5).unwrap());
        for rep in 0..300u64 {
            let s = stream(10.0, parallel::derive_seed(7, domain::INSTRUCTIONS, 1, rep));
            let rec = carpet_procedure(&s, &v, 5, 100_000).unwrap();
            let config = Configuration::fill_ball(Arc::clone(&v), 5).unwrap();
            let svw = strong_via_weak(&config, &s, StrongViaWeakOptions::default()).unwrap();
            let ch = svw.chances.unwrap();
            assert!(
                rec.ch_prime <= ch,
                "rep {rep}: ch_prime {} > Ch {ch}",
                rec.ch_prime
            );
            assert!(rec.ch_prime >= 1);
        }
    }

    #[test]
    fn hole_stats_always_sleep_has_no_holes() {
        let k = Arc::new(make_ssrw_kernel(1).unwrap());
        let v = Arc::new(Volume::centered_box(1, 6).unwrap());
        for seed in 0..30 {
            let s = InstructionStream::new(seed, Arc::clone(&k), SleepRegime::AlwaysSleep);
            let stats = hole_statistics(&s, &v, 4, 8).unwrap();
            assert!(!stats.is_empty());
            let first = &stats[0];
            assert_eq!(first.j, 1);
            assert!(first.hole_indicators.iter().all(|(_, hole)| !hole));
            assert_eq!(first.carpet_radius, 4);
        }
    }

    #[test]
    fn hole_stats_respect_max_j_and_ch() {
        let v = Arc::new(Volume::centered_box(1, 8).unwrap());
        let s = stream(2.0, 12);
        let stats = hole_statistics(&s, &v, 4, 3).unwrap();
        for w in stats.windows(2) {
            assert_eq!(w[1].j, w[0].j + 1);
        }
        assert!(stats.iter().all(|h| h.j <= 3));
    }

    #[test]
    fn single_excursion_singleton_is_one() {
        let k = Arc::new(make_ssrw_kernel(1).unwrap());
        let v = Arc::new(Volume::explicit(1, vec![vec![0]]).unwrap());
        for seed in 0..50 {
            let s = InstructionStream::new(seed, Arc::clone(&k), SleepRegime::normal(0.7).unwrap());
            assert_eq!(single_excursion_chances(&s, &v, 1 << 20).unwrap(), 1);
        }
    }

    #[test]
    fn single_excursion_b1_geometric_mean() {
        let v = Arc::new(Volume::centered_box(1, 1).unwrap());
        let n = 30_000u64;
        let mut total = 0u64;
        for rep in 0..n {
            let s = stream(1.0, parallel::derive_seed(3, domain::INSTRUCTIONS, 2, rep));
            total += single_excursion_chances(&s, &v, 1 << 20).unwrap();
        }
        let mean = total as f64 / n as f64;
        let se = (4.0 / 9.0 / n as f64).sqrt();
        assert!((mean - 4.0 / 3.0).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn carpet_budget_is_reported() {
        // AlwaysSleep with max_iters = 1: escape probability is 1/4, so
        // most seeds need more than one iteration and hit the cap.
        let k = Arc::new(make_ssrw_kernel(1).unwrap());
        let v = Arc::new(Volume::centered_box(1, 3).unwrap());
        let mut budgeted = 0;
        for seed in 0..200 {
            let s = InstructionStream::new(seed, Arc::clone(&k), SleepRegime::AlwaysSleep);
            let rec = carpet_procedure(&s, &v, 3, 1).unwrap();
            if rec.end_reason == CarpetEnd::Budget {
                budgeted += 1;
                assert_eq!(rec.ch_prime, 1);
            }
        }
        assert!(budgeted > 0);
    }
}
