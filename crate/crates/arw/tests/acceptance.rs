//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).
//!
//! The checks rest on exact identities, agreement with the exact
//! tiny-volume solver, inequality sandwiches, and first-order trend
//! checks, each at an explicit tolerance.

use std::sync::Arc;

use arw::engine::{
    occupation_probability_pgf, stabilize, strong_via_weak, Configuration, Mode, SchedulerPolicy,
    SiteContent, StrongViaWeakOptions,
};
use arw::estimators::{estimate_rho_c, lambda_sweep, mass_conservation_check, SweepCell};
use arw::kernel::{
    green_function_with, make_ssrw_kernel, single_particle_q, GreenEstimate, GreenOptions,
    JumpKernel, Params, Volume,
};
use arw::oracle::{exact_quantity, exact_stab_distribution, OracleOptions, Quantity};
use arw::parallel::{derive_seed, domain, replica_map};
use arw::procedures::{carpet_procedure, gamblers_ruin_escape, CarpetEnd};
use arw::randomness::{InstructionStream, SleepRegime};

fn pass(id: u32, name: &str, detail: String) {
    println!("ACCEPTANCE {id} ({name}): PASS - {detail}");
}

fn prop_se(p: f64, n: f64) -> f64 {
    (p.max(1e-12) * (1.0 - p).max(1e-12) / n).sqrt()
}

// ---------------------------------------------------------------------------
// 1. Abelian property
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_abelian_property() {
    let policies = [
        SchedulerPolicy::LexMin,
        SchedulerPolicy::LexMax,
        SchedulerPolicy::DepthFirst,
        SchedulerPolicy::BreadthFirst,
        SchedulerPolicy::RandomOrder(4242),
    ];
    let volumes = [
        Arc::new(Volume::centered_box(1, 24).unwrap()), // 49 sites
        Arc::new(Volume::centered_box(2, 3).unwrap()),  // 49 sites
    ];
    let kernels = [
        Arc::new(make_ssrw_kernel(1).unwrap()),
        Arc::new(make_ssrw_kernel(2).unwrap()),
    ];
    for inst in 0..100u64 {
        let which = (inst % 2) as usize;
        let volume = &volumes[which];
        let lambda = if inst % 4 < 2 { 0.5 } else { 2.0 };
        let seed = derive_seed(101, domain::INSTRUCTIONS, 1, inst);
        let stream = InstructionStream::new(
            seed,
            Arc::clone(&kernels[which]),
            SleepRegime::normal(lambda).unwrap(),
        );
        // deterministic random instance with mass <= 20
        let mut config = Configuration::empty(Arc::clone(volume));
        let mut h = seed;
        let mass = 1 + (arw::parallel::mix64(seed ^ 7) % 20) as u32;
        for _ in 0..mass {
            h = arw::parallel::mix64(h);
            let idx = (h % volume.len() as u64) as usize;
            let cur = match config.content(idx) {
                SiteContent::Active(n) => n,
                _ => 0,
            };
            config.set_index(idx, SiteContent::Active(cur + 1));
        }
        let base = stabilize(&config, &stream, &Mode::Legal, policies[0], 1 << 28).unwrap();
        for &policy in &policies[1..] {
            let other = stabilize(&config, &stream, &Mode::Legal, policy, 1 << 28).unwrap();
            assert_eq!(base.final_config, other.final_config, "instance {inst}, {policy:?}");
            assert_eq!(base.odometer, other.odometer, "instance {inst}, {policy:?}");
        }
    }
    pass(1, "abelian property", "100 instances x 5 policies, (final, odometer) identical".into());
}

// ---------------------------------------------------------------------------
// 2 & 3. Oracle equivalence and PGF identity
// ---------------------------------------------------------------------------

/// The shared tiny-instance set: (volume, placements, lambda).
fn tiny_instances() -> Vec<(Arc<Volume>, Vec<(Vec<i64>, u32)>, f64)> {
    let b1 = || Arc::new(Volume::centered_box(1, 1).unwrap());
    let b2 = || Arc::new(Volume::centered_box(1, 2).unwrap());
    let c1 = || Arc::new(Volume::centered_box(2, 1).unwrap());
    let ex = || Arc::new(Volume::explicit(1, vec![vec![-1], vec![0], vec![1], vec![3]]).unwrap());
    vec![
        (b1(), vec![(vec![0], 1)], 1.0), // the exact-4/7 instance
        (b1(), vec![(vec![0], 2)], 0.5),
        (b2(), vec![(vec![1], 1), (vec![-2], 1)], 1.0),
        (b2(), vec![(vec![0], 3)], 2.0),
        (ex(), vec![(vec![3], 1), (vec![0], 1)], 1.0),
        (c1(), vec![(vec![0, 0], 1)], 1.0),
        (c1(), vec![(vec![1, 1], 2)], 0.5),
        (c1(), vec![(vec![0, 0], 1), (vec![-1, 1], 1)], 2.0),
        (b2(), vec![(vec![-1], 4)], 0.5),
        (b1(), vec![(vec![1], 1)], 10.0),
    ]
}

fn build(volume: &Arc<Volume>, placements: &[(Vec<i64>, u32)]) -> Configuration {
    let mut config = Configuration::empty(Arc::clone(volume));
    for (site, n) in placements {
        config.set_site(site, SiteContent::Active(*n)).unwrap();
    }
    config
}

#[test]
fn acceptance_02_oracle_equivalence() {
    let replicas: u64 = 100_000;
    let mut worst = 0.0f64;
    for (inst, (volume, placements, lambda)) in tiny_instances().into_iter().enumerate() {
        let kernel = Arc::new(make_ssrw_kernel(volume.dim()).unwrap());
        let regime = SleepRegime::normal(lambda).unwrap();
        let config = build(&volume, &placements);
        let dist = exact_stab_distribution(
            &config,
            &kernel,
            &regime,
            &Mode::Legal,
            &OracleOptions::default(),
        )
        .unwrap();
        let exact = dist.origin_occupied();
        if inst == 0 {
            // exact value 4/7 on the B_1 single-particle instance
            let occ: num_rational::BigRational = dist
                .entries
                .iter()
                .filter(|e| e.config.origin_occupied())
                .map(|e| e.exact.clone().expect("rational mode"))
                .sum();
            assert_eq!(
                occ,
                num_rational::BigRational::new(4.into(), 7.into()),
                "B_1 instance must give exactly 4/7"
            );
        }
        let hits: u64 = replica_map(replicas, |rep| {
            let stream = InstructionStream::new(
                derive_seed(202, domain::INSTRUCTIONS, inst as u64, rep),
                Arc::clone(&kernel),
                regime,
            );
            let record =
                stabilize(&config, &stream, &Mode::Legal, SchedulerPolicy::DepthFirst, 1 << 26)
                    .unwrap();
            u64::from(record.final_config.origin_occupied())
        })
        .into_iter()
        .sum();
        let p = hits as f64 / replicas as f64;
        let se = prop_se(exact, replicas as f64);
        let dev = (p - exact).abs() / se.max(1e-9);
        worst = worst.max(dev);
        assert!(
            dev <= 4.0,
            "instance {inst}: MC {p} vs exact {exact} deviates {dev:.2} se"
        );
    }
    pass(2, "oracle equivalence", format!("10 instances x 1e5 replicas, worst deviation {worst:.2} se"));
}

#[test]
fn acceptance_03_pgf_identity() {
    // Exact: ORIGIN_OCCUPIED = 1 - CH_PGF(lambda_j) within 1e-10 everywhere.
    let mut worst_exact = 0.0f64;
    for (inst, (volume, placements, lambda)) in tiny_instances().into_iter().enumerate() {
        let kernel = Arc::new(make_ssrw_kernel(volume.dim()).unwrap());
        let params = Params::new(lambda).unwrap();
        let regime = SleepRegime::Normal(params);
        let config = build(&volume, &placements);
        let occupied = exact_quantity(
            &config,
            &kernel,
            &regime,
            Quantity::OriginOccupied,
            &OracleOptions::default(),
        )
        .unwrap()
        .value;
        let pgf = exact_quantity(
            &config,
            &kernel,
            &regime,
            Quantity::ChPgf(params.lambda_j()),
            &OracleOptions::default(),
        )
        .unwrap()
        .value;
        let gap = (occupied - (1.0 - pgf)).abs();
        worst_exact = worst_exact.max(gap);
        assert!(gap <= 1e-10, "instance {inst}: |occupied - (1 - pgf)| = {gap}");
    }

    // Monte Carlo version on B_10, d = 1, lambda = 1, independent streams.
    let volume = Arc::new(Volume::centered_box(1, 10).unwrap());
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let params = Params::new(1.0).unwrap();
    let regime = SleepRegime::Normal(params);
    let config = build(&volume, &[(vec![-5], 1), (vec![0], 2), (vec![7], 1)]);
    let replicas: u64 = 100_000;

    let occupied_hits: u64 = replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(303, domain::INSTRUCTIONS, 0, rep),
            Arc::clone(&kernel),
            regime,
        );
        let record =
            stabilize(&config, &stream, &Mode::Legal, SchedulerPolicy::DepthFirst, 1 << 26).unwrap();
        u64::from(record.final_config.origin_occupied())
    })
    .into_iter()
    .sum();
    let p_direct = occupied_hits as f64 / replicas as f64;

    let ch_samples: Vec<u64> = replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(303, domain::INSTRUCTIONS, 1, rep), // independent cell
            Arc::clone(&kernel),
            regime,
        );
        strong_via_weak(&config, &stream, StrongViaWeakOptions::default())
            .unwrap()
            .chances
            .unwrap()
    });
    let p_pgf = occupation_probability_pgf(&ch_samples, &params).unwrap();
    let lj = params.lambda_j();
    let pow_samples: Vec<f64> = ch_samples.iter().map(|&c| lj.powi(c as i32)).collect();
    let mean_pow = pow_samples.iter().sum::<f64>() / replicas as f64;
    let var_pow = pow_samples.iter().map(|x| (x - mean_pow).powi(2)).sum::<f64>() / (replicas as f64 - 1.0);
    let se_pgf = (var_pow / replicas as f64).sqrt();
    let se_direct = prop_se(p_direct, replicas as f64);
    let pooled = (se_pgf.powi(2) + se_direct.powi(2)).sqrt();
    let dev = (p_direct - p_pgf).abs() / pooled;
    assert!(dev <= 4.0, "MC pgf identity: direct {p_direct} vs pgf {p_pgf}, {dev:.2} pooled se");
    pass(
        3,
        "pgf identity",
        format!("exact gap <= {worst_exact:.2e}; MC direct {p_direct:.4} vs pgf {p_pgf:.4} ({dev:.2} se)"),
    );
}

// ---------------------------------------------------------------------------
// 4. Sleep-trial law
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_sleep_trial_law() {
    let volume = Arc::new(Volume::centered_box(1, 5).unwrap());
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let params = Params::new(1.0).unwrap();
    let regime = SleepRegime::Normal(params);
    let config = Configuration::fill_ball(Arc::clone(&volume), 5).unwrap();
    let replicas: u64 = 100_000;
    let trials: Vec<Vec<bool>> = replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(404, domain::INSTRUCTIONS, 0, rep),
            Arc::clone(&kernel),
            regime,
        );
        strong_via_weak(&config, &stream, StrongViaWeakOptions::default())
            .unwrap()
            .sleep_trials
            .unwrap()
    });

    let total: u64 = trials.iter().map(|t| t.len() as u64).sum();
    let ones: u64 = trials
        .iter()
        .map(|t| t.iter().filter(|&&b| b).count() as u64)
        .sum();
    let freq = ones as f64 / total as f64;
    let se = prop_se(params.lambda_s(), total as f64);
    assert!(
        (freq - params.lambda_s()).abs() <= 4.0 * se,
        "pooled b frequency {freq} vs lambda_s {}",
        params.lambda_s()
    );

    // lag-1 correlation of consecutive trials within a run
    let mut pairs = 0u64;
    let mut both = 0u64;
    for t in &trials {
        for w in t.windows(2) {
            pairs += 1;
            if w[0] && w[1] {
                both += 1;
            }
        }
    }
    let p11 = both as f64 / pairs as f64;
    let corr = (p11 - freq * freq) / (freq * (1.0 - freq));
    let corr_se = 1.0 / (pairs as f64).sqrt();
    assert!(
        corr.abs() <= 4.0 * corr_se,
        "lag-1 correlation {corr} vs se {corr_se}"
    );
    pass(
        4,
        "sleep-trial law",
        format!("pooled frequency {freq:.4} (target 0.5), lag-1 correlation {corr:.5} over {pairs} pairs"),
    );
}

// ---------------------------------------------------------------------------
// 5. Chance bound
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_chance_bound() {
    const G3: f64 = 1.516386059151978;
    let kernel = Arc::new(make_ssrw_kernel(3).unwrap());
    let analytics = green_function_with(
        &kernel,
        300,
        20_000,
        505,
        GreenOptions { tail_horizon: 20_000, ..Default::default() },
    )
    .unwrap();
    let g3 = match analytics.green {
        GreenEstimate::Finite(v) => v,
        GreenEstimate::Divergent => panic!("d=3 SSRW classified divergent"),
    };
    assert!(
        (g3 - G3).abs() <= analytics.error_bound,
        "green estimate {g3} vs frozen oracle {G3} beyond bound {}",
        analytics.error_bound
    );

    let volume = Arc::new(Volume::centered_box(3, 4).unwrap());
    let config = Configuration::fill_ball(Arc::clone(&volume), 4).unwrap();
    let regime = SleepRegime::normal(1.0).unwrap();
    let replicas: u64 = 10_000;
    let chances: Vec<u64> = replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(505, domain::INSTRUCTIONS, 1, rep),
            Arc::clone(&kernel),
            regime,
        );
        strong_via_weak(&config, &stream, StrongViaWeakOptions::default())
            .unwrap()
            .chances
            .unwrap()
    });
    let mean = chances.iter().sum::<u64>() as f64 / replicas as f64;
    let var = chances
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / (replicas as f64 - 1.0);
    let se = (var / replicas as f64).sqrt();
    assert!(
        mean <= g3 + 4.0 * se,
        "mean Ch {mean} exceeds G3 estimate {g3} + 4 se ({se})"
    );
    pass(
        5,
        "chance bound",
        format!("mean Ch {mean:.4} <= G3 {g3:.4} + 4se ({se:.4}); |G3 - oracle| <= {:.2e}", analytics.error_bound),
    );
}

// ---------------------------------------------------------------------------
// 6. q closed form
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_q_closed_form() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let mut details = Vec::new();
    for lambda in [0.1, 1.0, 10.0] {
        let params = Params::new(lambda).unwrap();
        let closed = params.lambda_s() / (1.0 - params.lambda_j().powi(2)).sqrt();
        let q = single_particle_q(&kernel, &params, 300).unwrap();
        assert!(q.truncation_error <= 1e-8, "truncation bound {} at lambda {lambda}", q.truncation_error);
        assert!(
            (q.value - closed).abs() <= q.truncation_error.max(1e-12),
            "lambda {lambda}: series {} vs closed form {closed}",
            q.value
        );

        // Monte Carlo sleep-at-origin frequency.
        let replicas: u64 = 200_000;
        let regime = SleepRegime::Normal(params);
        let hits: u64 = replica_map(replicas, |rep| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                606,
                domain::WALK,
                lambda.to_bits(),
                rep,
            ));
            let ls = regime.lambda_s();
            let mut pos: i64 = 0;
            loop {
                let u: f64 = rng.random();
                if u < ls {
                    return u64::from(pos == 0);
                }
                let v = (u - ls) / (1.0 - ls);
                pos += if v < 0.5 { -1 } else { 1 };
            }
        })
        .into_iter()
        .sum();
        let p = hits as f64 / replicas as f64;
        let se = prop_se(closed, replicas as f64);
        assert!(
            (p - closed).abs() <= 4.0 * se,
            "lambda {lambda}: MC {p} vs closed form {closed}"
        );
        details.push(format!("lambda={lambda}: series={:.8}, mc={p:.5}", q.value));
    }
    pass(6, "q closed form", details.join("; "));
}

// ---------------------------------------------------------------------------
// 7. Gambler's ruin
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_gamblers_ruin() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    for r in 0..=100i64 {
        let p = gamblers_ruin_escape(&kernel, r).unwrap();
        let product = p * num_rational::BigRational::from_integer((r + 1).into());
        assert!(
            product == num_rational::BigRational::from_integer(1.into()),
            "gamblers_ruin_escape({r}) * (r+1) != 1"
        );
    }

    // Carpet step 2 at lambda_s = 1, r = 3: escape probability 1/4.
    let volume = Arc::new(Volume::centered_box(1, 3).unwrap());
    let replicas: u64 = 10_000;
    let first_escapes: u64 = replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(707, domain::INSTRUCTIONS, 0, rep),
            Arc::clone(&kernel),
            SleepRegime::AlwaysSleep,
        );
        let record = carpet_procedure(&stream, &volume, 3, 100_000).unwrap();
        assert_eq!(record.end_reason, CarpetEnd::Escaped);
        u64::from(record.ch_prime == 1)
    })
    .into_iter()
    .sum();
    let p = first_escapes as f64 / replicas as f64;
    let se = prop_se(0.25, replicas as f64);
    assert!((p - 0.25).abs() <= 4.0 * se, "step-2 escape rate {p} vs 1/4");
    pass(
        7,
        "gamblers ruin",
        format!("exact identity for r <= 100; carpet escape rate {p:.4} vs 0.25"),
    );
}

// ---------------------------------------------------------------------------
// 8. Geometric sandwich
// ---------------------------------------------------------------------------

#[test]
fn acceptance_08_geometric_sandwich() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let replicas: u64 = 10_000;
    let mut cells_checked = 0;
    for &r in &[2i64, 5, 10] {
        let pesc_r: f64 = {
            let exact = gamblers_ruin_escape(&kernel, r).unwrap();
            use num_traits::ToPrimitive;
            exact.to_f64().unwrap()
        };
        let ball_sites = (2 * r + 1) as f64;
        for &lambda in &[10.0f64, 50.0] {
            let pesc_r_lambda = (((ball_sites - 1.0) / lambda) + pesc_r).min(1.0);
            let volume = Arc::new(Volume::centered_box(1, r).unwrap());
            let regime = SleepRegime::normal(lambda).unwrap();
            let cell = (r as u64) << 8 | lambda as u64;

            let outcomes: Vec<(u64, u64)> = replica_map(replicas, |rep| {
                let stream = InstructionStream::new(
                    derive_seed(808, domain::INSTRUCTIONS, cell, rep),
                    Arc::clone(&kernel),
                    regime,
                );
                let carpet = carpet_procedure(&stream, &volume, r, 1_000_000).unwrap();
                let config = Configuration::fill_ball(Arc::clone(&volume), r).unwrap();
                let svw = strong_via_weak(&config, &stream, StrongViaWeakOptions::default()).unwrap();
                (carpet.ch_prime, svw.chances.unwrap())
            });

            // Pathwise coupling on the shared stream.
            for (rep, (ch_prime, ch)) in outcomes.iter().enumerate() {
                assert!(
                    ch_prime <= ch,
                    "r={r} lambda={lambda} rep {rep}: Ch' {ch_prime} > Ch {ch}"
                );
            }

            // Pointwise CDF bracket on {1..20}.
            for k in 1..=20u64 {
                let f_hat = outcomes.iter().filter(|(cp, _)| *cp <= k).count() as f64
                    / replicas as f64;
                let se = prop_se(f_hat, replicas as f64).max(1e-6);
                let f_upper = 1.0 - (1.0 - pesc_r_lambda).powi(k as i32); // Geom(pesc_{r,lambda})
                let f_lower = 1.0 - (1.0 - pesc_r).powi(k as i32); // Geom(pesc_r)
                assert!(
                    f_hat <= f_upper + 4.0 * se,
                    "r={r} lambda={lambda} k={k}: F {f_hat} above Geom(pesc_r_lambda) {f_upper}"
                );
                assert!(
                    f_hat >= f_lower - 4.0 * se,
                    "r={r} lambda={lambda} k={k}: F {f_hat} below Geom(pesc_r) {f_lower}"
                );
            }
            cells_checked += 1;
        }
    }
    pass(
        8,
        "geometric sandwich",
        format!("{cells_checked} (r, lambda) cells, CDF bracketed on 1..20, Ch' <= Ch pathwise"),
    );
}

// ---------------------------------------------------------------------------
// 9. Hole-rate bound
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_hole_rate_bound() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let params = Params::new(20.0).unwrap();
    let regime = SleepRegime::Normal(params);
    let tracked = 20i64;
    let volume = Arc::new(Volume::centered_box(1, 22).unwrap());
    let config = Configuration::fill_ball(Arc::clone(&volume), tracked).unwrap();
    let replicas: u64 = 100_000;
    let hole_lists: Vec<Vec<i64>> = replica_map(replicas, |rep| {
        let stream = InstructionStream::new(
            derive_seed(909, domain::INSTRUCTIONS, 0, rep),
            Arc::clone(&kernel),
            regime,
        );
        let record = strong_via_weak(
            &config,
            &stream,
            StrongViaWeakOptions {
                tracked_radius: Some(tracked),
                max_snapshots: 1,
                ..Default::default()
            },
        )
        .unwrap();
        // first weak stabilization always exists; flatten its hole set
        record.weak_snapshots.unwrap()[0]
            .holes
            .clone()
            .unwrap()
            .into_iter()
            .map(|site| site[0])
            .collect()
    });

    let mut counts = std::collections::HashMap::new();
    for list in &hole_lists {
        for &x in list {
            *counts.entry(x).or_insert(0u64) += 1;
        }
    }
    let lj = params.lambda_j();
    let mut worst_rate = 0.0f64;
    for x in -tracked..=tracked {
        if x == 0 {
            continue;
        }
        let rate = counts.get(&x).copied().unwrap_or(0) as f64 / replicas as f64;
        let se = prop_se(rate.max(1e-6), replicas as f64);
        worst_rate = worst_rate.max(rate);
        assert!(
            rate <= lj + 4.0 * se,
            "P(E_({x}),1) = {rate} exceeds lambda_j {lj} + 4 se"
        );
    }
    pass(
        9,
        "hole-rate bound",
        format!("max site rate {worst_rate:.5} <= lambda_j {lj:.5} + 4se over {replicas} replicas"),
    );
}

// ---------------------------------------------------------------------------
// 10. Critical-density sandwich
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_rho_c_sandwich() {
    // d = 1, lambda = 1, n = 500: rho_hat >= 0.5 - 0.03.
    let kernel1 = Arc::new(make_ssrw_kernel(1).unwrap());
    let regime1 = SleepRegime::normal(1.0).unwrap();
    let est1 = estimate_rho_c(&kernel1, &regime1, 500, 0.025, 1200, 0.04, 1010).unwrap();
    assert!(
        est1.rho_hat >= 0.5 - 0.03,
        "d=1 rho_hat {} below 0.47",
        est1.rho_hat
    );

    // d = 3, lambda = 0.2, n = 12: rho_hat <= G3 * lambda_s + 0.05.
    const G3: f64 = 1.516;
    let kernel3 = Arc::new(make_ssrw_kernel(3).unwrap());
    let regime3 = SleepRegime::normal(0.2).unwrap();
    let est3 = estimate_rho_c(&kernel3, &regime3, 12, 0.02, 2000, 0.01, 1030).unwrap();
    let bound = G3 * regime3.lambda_s() + 0.05;
    assert!(
        est3.rho_hat <= bound,
        "d=3 rho_hat {} above {bound}",
        est3.rho_hat
    );
    pass(
        10,
        "rho_c sandwich",
        format!("d=1 rho_hat {:.4} >= 0.47; d=3 rho_hat {:.4} <= {bound:.4}", est1.rho_hat, est3.rho_hat),
    );
}

// ---------------------------------------------------------------------------
// 11. Low-lambda scaling
// ---------------------------------------------------------------------------

#[test]
fn acceptance_11_low_lambda_scaling() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let cells: Vec<SweepCell> = [0.01, 0.04, 0.16]
        .into_iter()
        .map(|lambda| SweepCell {
            lambda,
            n: 256,
            epsilon: 0.01,
            tol: 0.004,
            replicas_per_point: 3000,
        })
        .collect();
    let table = lambda_sweep(&kernel, &cells, 1111).unwrap();
    for row in &table.rows {
        assert!(row.error.is_none(), "cell lambda={} failed: {:?}", row.lambda, row.error);
    }
    let slope = table.log_log_slope().expect("three successful cells");
    assert!(
        (0.35..=0.65).contains(&slope),
        "log-log slope {slope} outside [0.35, 0.65]; rows: {:?}",
        table.rows.iter().map(|r| (r.lambda, r.rho_hat)).collect::<Vec<_>>()
    );
    pass(
        11,
        "low-lambda scaling",
        format!(
            "slope {slope:.3} in [0.35, 0.65]; rho_hat = {:?}",
            table.rows.iter().map(|r| (r.lambda, r.rho_hat)).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// 12. Mass conservation trend
// ---------------------------------------------------------------------------

#[test]
fn acceptance_12_mass_conservation_trend() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let regime = SleepRegime::normal(1.0).unwrap();
    let rows = mass_conservation_check(&kernel, &regime, 0.25, &[50, 100, 200, 400], 50_000, 1212)
        .unwrap();
    let first = &rows[0];
    let last = rows.last().unwrap();
    let combined = (first.stderr.powi(2) + last.stderr.powi(2)).sqrt();
    assert!(
        last.deviation <= first.deviation + 4.0 * combined,
        "deviation grew: n=50 {} -> n=400 {}",
        first.deviation,
        last.deviation
    );
    assert!(last.deviation <= 0.02, "n=400 deviation {} above 0.02", last.deviation);
    pass(
        12,
        "mass conservation trend",
        format!(
            "|p - rho|: n=50 {:.5}, n=400 {:.5} (<= 0.02)",
            first.deviation, last.deviation
        ),
    );
}

// ---------------------------------------------------------------------------
// 13. High-lambda direction
// ---------------------------------------------------------------------------

#[test]
fn acceptance_13_high_lambda_direction() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let cells: Vec<SweepCell> = [4.0, 16.0]
        .into_iter()
        .map(|lambda| SweepCell {
            lambda,
            n: 300,
            epsilon: 0.01,
            tol: 0.004,
            replicas_per_point: 3000,
        })
        .collect();
    let table = lambda_sweep(&kernel, &cells, 1313).unwrap();
    for row in &table.rows {
        assert!(row.error.is_none(), "cell lambda={} failed: {:?}", row.lambda, row.error);
    }
    let probe_se = (0.25f64 / 3000.0).sqrt();
    let val = |row: &arw::estimators::SweepRow| row.gap_times_lambda;
    let err = |row: &arw::estimators::SweepRow| {
        row.lambda * ((row.bracket_hi - row.bracket_lo) / 2.0 + 4.0 * probe_se)
    };
    let (r4, r16) = (&table.rows[0], &table.rows[1]);
    assert!(
        val(r16) <= val(r4) + err(r4) + err(r16),
        "(1 - rho_hat) * lambda increased: {} at 4 -> {} at 16 (brackets {} / {})",
        val(r4),
        val(r16),
        err(r4),
        err(r16)
    );
    pass(
        13,
        "high-lambda direction",
        format!(
            "(1-rho)*lambda: {:.4} at lambda=4 vs {:.4} at lambda=16 (errors {:.4}/{:.4})",
            val(r4), val(r16), err(r4), err(r16)
        ),
    );
}
