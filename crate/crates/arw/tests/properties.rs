//! Property tests for exact invariants: abelianness, mass balance,
//! canonicalization, and round-trips. Statistical checks live in the unit
//! and acceptance suites with pinned seeds; everything here must hold
//! exactly for every generated instance.

use std::sync::Arc;

use proptest::prelude::*;

use arw::engine::{
    stabilize, Configuration, Mode, OdometerMap, SchedulerPolicy, SiteContent, USet,
};
use arw::kernel::{make_ssrw_kernel, JumpKernel, Params, SupportAtom, Volume};
use arw::randomness::{InstructionStream, SleepRegime};

fn policy_strategy() -> impl Strategy<Value = SchedulerPolicy> {
    prop_oneof![
        Just(SchedulerPolicy::LexMin),
        Just(SchedulerPolicy::LexMax),
        Just(SchedulerPolicy::DepthFirst),
        Just(SchedulerPolicy::BreadthFirst),
        any::<u64>().prop_map(SchedulerPolicy::RandomOrder),
    ]
}

/// A small d=1 instance: volume radius, particle placements, lambda, seed.
#[derive(Debug, Clone)]
struct SmallInstance {
    radius: i64,
    placements: Vec<(i64, u32)>,
    lambda: f64,
    seed: u64,
}

fn instance_strategy() -> impl Strategy<Value = SmallInstance> {
    (
        2i64..6,
        prop::collection::vec(((-5i64..=5), 1u32..4), 1..5),
        prop_oneof![Just(0.3), Just(1.0), Just(3.0)],
        any::<u64>(),
    )
        .prop_map(|(radius, mut placements, lambda, seed)| {
            for (site, _) in &mut placements {
                *site = (*site).clamp(-radius, radius);
            }
            SmallInstance { radius, placements, lambda, seed }
        })
}

fn build_instance(inst: &SmallInstance) -> (Configuration, InstructionStream) {
    let volume = Arc::new(Volume::centered_box(1, inst.radius).unwrap());
    let mut config = Configuration::empty(Arc::clone(&volume));
    for &(site, n) in &inst.placements {
        let cur = match config.content(volume.index_of(&[site]).unwrap()) {
            SiteContent::Active(k) => k,
            _ => 0,
        };
        config.set_site(&[site], SiteContent::Active(cur + n)).unwrap();
    }
    let stream = InstructionStream::new(
        inst.seed,
        Arc::new(make_ssrw_kernel(1).unwrap()),
        SleepRegime::normal(inst.lambda).unwrap(),
    );
    (config, stream)
}

proptest! {
    #[test]
    fn params_rates_sum_to_one(lambda in 1e-6f64..1e6) {
        let p = Params::new(lambda).unwrap();
        prop_assert_eq!(p.lambda_s() + p.lambda_j(), 1.0);
        prop_assert!((p.lambda_s() - lambda / (1.0 + lambda)).abs() <= f64::EPSILON);
    }

    #[test]
    fn kernel_canonicalization(probs in prop::collection::vec(0.05f64..1.0, 2..6)) {
        let total: f64 = probs.iter().sum();
        let support: Vec<SupportAtom> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| SupportAtom {
                // distinct nonzero offsets in scrambled order
                offset: vec![if i % 2 == 0 { (i as i64 / 2) + 1 } else { -(i as i64 / 2) - 1 }],
                prob: p / total,
            })
            .collect();
        let k = JumpKernel::new(1, support).unwrap();
        let offsets: Vec<i64> = k.support().iter().map(|a| a.offset[0]).collect();
        let mut sorted = offsets.clone();
        sorted.sort_unstable();
        prop_assert_eq!(offsets, sorted);
        let sum: f64 = k.support().iter().map(|a| a.prob).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn instruction_purity(inst in instance_strategy(), site in -5i64..=5, k in 0u64..10_000) {
        let (_, stream) = build_instance(&inst);
        prop_assert_eq!(
            stream.instruction(&[site], k).unwrap(),
            stream.instruction(&[site], k).unwrap()
        );
    }

    #[test]
    fn stabilization_balances_mass_and_odometer(inst in instance_strategy(), policy in policy_strategy()) {
        let (config, stream) = build_instance(&inst);
        let record = stabilize(&config, &stream, &Mode::Legal, policy, 1 << 26).unwrap();
        prop_assert!(record.mass_balanced());
        prop_assert_eq!(record.odometer.total(), record.topplings);
        prop_assert!(record.final_config.is_stable_for(&Mode::Legal));
    }

    #[test]
    fn abelian_pairs_agree(inst in instance_strategy(), a in policy_strategy(), b in policy_strategy()) {
        let (config, stream) = build_instance(&inst);
        let ra = stabilize(&config, &stream, &Mode::Legal, a, 1 << 26).unwrap();
        let rb = stabilize(&config, &stream, &Mode::Legal, b, 1 << 26).unwrap();
        prop_assert_eq!(ra.final_config, rb.final_config);
        prop_assert_eq!(ra.odometer, rb.odometer);
    }

    #[test]
    fn weak_stabilization_agrees_across_policies(inst in instance_strategy(), a in policy_strategy(), b in policy_strategy()) {
        let (config, stream) = build_instance(&inst);
        let u = USet::origin(config.volume());
        let mode = Mode::Weak(u);
        let ra = stabilize(&config, &stream, &mode, a, 1 << 26).unwrap();
        let rb = stabilize(&config, &stream, &mode, b, 1 << 26).unwrap();
        prop_assert_eq!(ra.final_config, rb.final_config);
        prop_assert!(ra.final_config.is_stable_for(&mode));
    }

    #[test]
    fn configuration_json_round_trips(inst in instance_strategy()) {
        let (config, _) = build_instance(&inst);
        let text = serde_json::to_string(&config).unwrap();
        let back: Configuration = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(config, back);
    }

    #[test]
    fn topple_odometer_increases_by_one(inst in instance_strategy()) {
        let (mut config, stream) = build_instance(&inst);
        let volume = Arc::clone(config.volume());
        let mut odometer = OdometerMap::zeros(volume.len());
        // topple the first unstable site, if any
        let unstable = (0..volume.len())
            .find(|&i| matches!(config.content(i), SiteContent::Active(n) if n >= 1));
        if let Some(idx) = unstable {
            let site = volume.site(idx).to_vec();
            arw::engine::topple(&mut config, &mut odometer, &site, &stream, &Mode::Legal).unwrap();
            prop_assert_eq!(odometer.get(idx), 1);
            prop_assert_eq!(odometer.total(), 1);
        }
    }
}
