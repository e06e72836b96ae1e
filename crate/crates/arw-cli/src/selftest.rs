//! `arw selftest` — abelian shuffle suite, oracle agreement, stream purity,
//! and marginal checks, printing one line per check.

use std::sync::Arc;

use arw::engine::{stabilize, Configuration, Mode, SchedulerPolicy, SiteContent};
use arw::kernel::{make_ssrw_kernel, Volume};
use arw::oracle::{exact_stab_distribution, OracleOptions};
use arw::parallel::{derive_seed, domain, mix64, replica_map};
use arw::randomness::{chi_square_marginals, ChiSquareStatus, InstructionStream, SleepRegime};

use crate::commands::SelftestArgs;
use crate::Failure;

fn check(name: &str, passed: bool, detail: String) -> bool {
    if passed {
        println!("selftest {name}: ok ({detail})");
    } else {
        println!("selftest {name}: FAILED ({detail})");
    }
    passed
}

pub fn run(args: SelftestArgs) -> Result<(), Failure> {
    let mut all_ok = true;

    // Abelian shuffle: five scheduler policies must agree exactly.
    let instances = if args.quick { 10 } else { 40 };
    let policies = [
        SchedulerPolicy::LexMin,
        SchedulerPolicy::LexMax,
        SchedulerPolicy::DepthFirst,
        SchedulerPolicy::BreadthFirst,
        SchedulerPolicy::RandomOrder(13),
    ];
    let mut abelian_ok = true;
    for inst in 0..instances {
        let dim = if inst % 2 == 0 { 1 } else { 2 };
        let radius = if dim == 1 { 4 } else { 2 };
        let volume = Arc::new(Volume::centered_box(dim, radius).unwrap());
        let kernel = Arc::new(make_ssrw_kernel(dim).unwrap());
        let lambda = if inst % 4 < 2 { 0.5 } else { 2.0 };
        let seed = derive_seed(2024, domain::INSTRUCTIONS, 77, inst);
        let stream = InstructionStream::new(seed, kernel, SleepRegime::normal(lambda).unwrap());
        let mut config = Configuration::empty(Arc::clone(&volume));
        let mut h = seed;
        for _ in 0..(3 + inst % 5) {
            h = mix64(h);
            let idx = (h % volume.len() as u64) as usize;
            let cur = match config.content(idx) {
                SiteContent::Active(n) => n,
                _ => 0,
            };
            config.set_index(idx, SiteContent::Active(cur + 1));
        }
        let base = stabilize(&config, &stream, &Mode::Legal, policies[0], 1 << 26).unwrap();
        for &p in &policies[1..] {
            let other = stabilize(&config, &stream, &Mode::Legal, p, 1 << 26).unwrap();
            if other.final_config != base.final_config || other.odometer != base.odometer {
                abelian_ok = false;
            }
        }
    }
    all_ok &= check(
        "abelian-shuffle",
        abelian_ok,
        format!("{instances} instances x {} policies", policies.len()),
    );

    // Oracle agreement: Monte Carlo frequencies against the exact solve.
    let replicas: u64 = if args.quick { 4000 } else { 20_000 };
    let mut oracle_ok = true;
    let mut worst = 0.0f64;
    for (inst, (radius, lambda, mass)) in
        [(1i64, 1.0, 1u32), (2, 0.5, 2), (1, 2.0, 2)].iter().enumerate()
    {
        let volume = Arc::new(Volume::centered_box(1, *radius).unwrap());
        let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
        let regime = SleepRegime::normal(*lambda).unwrap();
        let mut config = Configuration::empty(Arc::clone(&volume));
        config.set_site(&[0], SiteContent::Active(*mass)).unwrap();
        let dist =
            exact_stab_distribution(&config, &kernel, &regime, &Mode::Legal, &OracleOptions::default())
                .unwrap();
        let exact = dist.origin_occupied();
        let hits: u64 = replica_map(replicas, |rep| {
            let stream = InstructionStream::new(
                derive_seed(9, domain::INSTRUCTIONS, inst as u64, rep),
                Arc::new(make_ssrw_kernel(1).unwrap()),
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
        let se = (exact * (1.0 - exact) / replicas as f64).sqrt().max(1e-9);
        let dev = (p - exact).abs() / se;
        worst = worst.max(dev);
        if dev > 4.0 {
            oracle_ok = false;
        }
    }
    all_ok &= check(
        "oracle-agreement",
        oracle_ok,
        format!("3 instances x {replicas} replicas, worst deviation {worst:.2} se"),
    );

    // Stream purity: repeated queries agree exactly.
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let stream = InstructionStream::new(5, Arc::clone(&kernel), SleepRegime::normal(1.0).unwrap());
    let purity_ok = (0..10_000u64).all(|i| {
        let site = [((mix64(i) % 2001) as i64) - 1000];
        let k = mix64(i ^ 0xabcd) % 100_000;
        stream.instruction(&site, k).unwrap() == stream.instruction(&site, k).unwrap()
    });
    all_ok &= check("stream-purity", purity_ok, "10000 repeated queries".into());

    // Instruction marginals.
    let depth = if args.quick { 20_000 } else { 100_000 };
    let report = chi_square_marginals(&stream, &[vec![0], vec![17]], depth).unwrap();
    let chi_ok = matches!(report.status, ChiSquareStatus::Passed);
    all_ok &= check(
        "chi-square-marginals",
        chi_ok,
        format!("p-value {:.4} over {} draws", report.p_value, report.samples),
    );

    if all_ok {
        println!("selftest: all checks passed");
        Ok(())
    } else {
        Err(Failure::Runtime("selftest failed".into()))
    }
}
