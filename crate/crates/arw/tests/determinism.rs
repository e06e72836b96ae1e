//! Worker-count independence and replay determinism of the Monte Carlo
//! campaigns: identical seeds and settings must give bit-identical results
//! no matter how the replicas are scheduled.

#![cfg(feature = "parallel")]

use std::sync::Arc;

use arw::estimators::{lambda_sweep, occupation_point, InitialLaw, SweepCell};
use arw::kernel::{make_ssrw_kernel, Volume};
use arw::randomness::SleepRegime;

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn occupation_point_is_worker_count_independent() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let volume = Arc::new(Volume::centered_box(1, 30).unwrap());
    let regime = SleepRegime::normal(1.0).unwrap();
    let law = InitialLaw::Bernoulli(0.4);
    let one = with_pool(1, || {
        occupation_point(&kernel, &regime, &volume, &law, 3000, 77, 0).unwrap()
    });
    let four = with_pool(4, || {
        occupation_point(&kernel, &regime, &volume, &law, 3000, 77, 0).unwrap()
    });
    assert_eq!(one, four);
}

#[test]
fn sweep_table_is_bit_identical_across_pools() {
    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let cells = [SweepCell {
        lambda: 1.0,
        n: 12,
        epsilon: 0.05,
        tol: 0.05,
        replicas_per_point: 400,
    }];
    let csv_one = with_pool(1, || lambda_sweep(&kernel, &cells, 5).unwrap().to_csv());
    let csv_three = with_pool(3, || lambda_sweep(&kernel, &cells, 5).unwrap().to_csv());
    assert_eq!(csv_one, csv_three);
    // and across repeated runs in the same pool
    let again = lambda_sweep(&kernel, &cells, 5).unwrap().to_csv();
    assert_eq!(csv_one, again);
}

#[test]
fn carpet_campaign_replays_exactly() {
    use arw::parallel::{derive_seed, domain, replica_map};
    use arw::procedures::carpet_procedure;
    use arw::randomness::InstructionStream;

    let kernel = Arc::new(make_ssrw_kernel(1).unwrap());
    let volume = Arc::new(Volume::centered_box(1, 4).unwrap());
    let run = |threads: usize| {
        with_pool(threads, || {
            replica_map(500, |rep| {
                let stream = InstructionStream::new(
                    derive_seed(9, domain::INSTRUCTIONS, 0, rep),
                    Arc::clone(&kernel),
                    SleepRegime::normal(8.0).unwrap(),
                );
                let record = carpet_procedure(&stream, &volume, 4, 10_000).unwrap();
                (record.ch_prime, record.end_reason)
            })
        })
    };
    assert_eq!(run(1), run(2));
}
