//! Monte Carlo estimate reports with confidence intervals and seed
//! provenance.

use serde::{Deserialize, Serialize};

/// Context echoed into a report so every output file is self-describing.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ReportMeta {
    /// Sleep rate, when the run used a finite one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Degenerate regime name when `lambda` is absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume: Option<String>,
    /// Initial density for density-parameterized campaigns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_law: Option<String>,
    /// Upper bound on systematic bias from a step horizon, when one applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_bound: Option<f64>,
    /// Replicas dropped because they exceeded a toppling budget.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub excluded: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

/// Point estimate with a 95% confidence interval and full seed provenance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimateReport {
    pub point: f64,
    pub stderr: f64,
    /// Wilson interval for proportions, normal interval for means.
    pub ci95: (f64, f64),
    pub replicas: u64,
    pub root_seed: u64,
    #[serde(default)]
    pub meta: ReportMeta,
}

impl EstimateReport {
    /// Report for a binomial proportion: `successes / replicas` with a
    /// Wilson score interval (well-behaved at the 0 and 1 edges).
    pub fn proportion(successes: u64, replicas: u64, root_seed: u64, meta: ReportMeta) -> Self {
        assert!(replicas > 0, "proportion report needs at least one replica");
        let n = replicas as f64;
        let p = successes as f64 / n;
        let stderr = (p * (1.0 - p) / n).sqrt();
        EstimateReport {
            point: p,
            stderr,
            ci95: wilson_interval(successes, replicas),
            replicas,
            root_seed,
            meta,
        }
    }

    /// Report for a sample mean with a normal-approximation interval.
    pub fn mean(samples: &[f64], root_seed: u64, meta: ReportMeta) -> Self {
        assert!(!samples.is_empty(), "mean report needs at least one sample");
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let stderr = (var / n).sqrt();
        EstimateReport {
            point: mean,
            stderr,
            ci95: (mean - Z95 * stderr, mean + Z95 * stderr),
            replicas: samples.len() as u64,
            root_seed,
            meta,
        }
    }
}

const Z95: f64 = 1.959963984540054;

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (Z95 / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}
