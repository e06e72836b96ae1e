// Rough timing pilot for estimator campaigns.
use std::sync::Arc;
use std::time::Instant;

use arw::estimators::{estimate_rho_c, occupation_point, InitialLaw};
use arw::kernel::{make_ssrw_kernel, Volume};
use arw::randomness::SleepRegime;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("probe");
    match which {
        "probe" => {
            // single occupation probe at several rho, d=1 n=500 lambda=1
            let k = Arc::new(make_ssrw_kernel(1).unwrap());
            let v = Arc::new(Volume::centered_box(1, 500).unwrap());
            let regime = SleepRegime::normal(1.0).unwrap();
            for rho in [0.5, 0.75, 0.875, 0.9375, 0.97, 0.99] {
                let t = Instant::now();
                let r = occupation_point(&k, &regime, &v, &InitialLaw::Bernoulli(rho), 500, 42, 0).unwrap();
                println!("rho={rho}: p={:.4} ({:?} for 500 reps)", r.point, t.elapsed());
            }
        }
        "rhoc1" => {
            let k = Arc::new(make_ssrw_kernel(1).unwrap());
            let regime = SleepRegime::normal(1.0).unwrap();
            let t = Instant::now();
            let est = estimate_rho_c(&k, &regime, 500, 0.02, 2000, 0.01, 42).unwrap();
            println!("d=1 lambda=1 n=500: rho_hat={:.4} bracket=({:.4},{:.4}) in {:?}",
                est.rho_hat, est.bracket.0, est.bracket.1, t.elapsed());
            for p in &est.curve {
                println!("  probe rho={:.5} p={:.5} holds={}", p.rho, p.p, p.criterion_holds);
            }
        }
        "rhoc3" => {
            let k = Arc::new(make_ssrw_kernel(3).unwrap());
            let regime = SleepRegime::normal(0.2).unwrap();
            let t = Instant::now();
            let est = estimate_rho_c(&k, &regime, 12, 0.02, 2000, 0.01, 42).unwrap();
            println!("d=3 lambda=0.2 n=12: rho_hat={:.4} bracket=({:.4},{:.4}) in {:?}",
                est.rho_hat, est.bracket.0, est.bracket.1, t.elapsed());
            for p in &est.curve {
                println!("  probe rho={:.5} p={:.5} holds={}", p.rho, p.p, p.criterion_holds);
            }
        }
        "low" => {
            let k = Arc::new(make_ssrw_kernel(1).unwrap());
            for lambda in [0.01, 0.04, 0.16] {
                let regime = SleepRegime::normal(lambda).unwrap();
                let t = Instant::now();
                let est = estimate_rho_c(&k, &regime, 256, 0.01, 3000, 0.004, 42).unwrap();
                println!("lambda={lambda}: rho_hat={:.5} in {:?}", est.rho_hat, t.elapsed());
            }
        }
        "high" => {
            let k = Arc::new(make_ssrw_kernel(1).unwrap());
            for lambda in [4.0, 16.0] {
                let regime = SleepRegime::normal(lambda).unwrap();
                let t = Instant::now();
                let est = estimate_rho_c(&k, &regime, 300, 0.01, 3000, 0.002, 42).unwrap();
                println!("lambda={lambda}: rho_hat={:.5} gap*lambda={:.4} in {:?}",
                    est.rho_hat, (1.0 - est.rho_hat) * lambda, t.elapsed());
            }
        }
        _ => eprintln!("unknown pilot"),
    }
}
