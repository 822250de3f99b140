//! Synthetic price traces and workloads for trace-free, desk-scale runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::market::{InstanceType, PriceTrace};
use crate::money::Money;
use crate::workload::{augment, AugmentConfig, Job, RawJob, WorkloadError};

/// Parameters for the synthetic spot-price process: a mean-reverting random
/// walk around a fraction of the on-demand price, clamped to stay positive
/// and at most the on-demand price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTraceConfig {
    /// Seconds between price points.
    pub step: u64,
    /// Total seconds of trace to generate.
    pub span: u64,
    /// Walk mean as a fraction of the on-demand price.
    pub mean_fraction: f64,
    /// Per-step noise amplitude as a fraction of the mean; 0 gives a
    /// constant trace with a single point.
    pub volatility: f64,
    /// Pull toward the mean per step.
    pub reversion: f64,
}

impl Default for SyntheticTraceConfig {
    fn default() -> Self {
        SyntheticTraceConfig {
            step: 300,
            span: 7 * 86_400,
            mean_fraction: 1.0 / 3.0,
            volatility: 0.05,
            reversion: 0.25,
        }
    }
}

/// Generates one price trace for an instance type. Consecutive equal prices
/// collapse into one point.
pub fn synthetic_trace(ty: &InstanceType, config: &SyntheticTraceConfig, seed: u64) -> PriceTrace {
    let mean = ty.ondemand_price.micros() as f64 * config.mean_fraction;
    let floor = (mean * 0.2).max(1.0);
    let cap = ty.ondemand_price.micros() as f64;
    if config.volatility == 0.0 {
        let price = Money::from_micros(mean.round().max(1.0) as i64);
        return PriceTrace::new(vec![(0, price)], &ty.name).expect("positive constant price");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<(u64, Money)> = Vec::new();
    let mut p = mean;
    let mut t = 0u64;
    while t <= config.span {
        let clamped = Money::from_micros(p.round().clamp(floor, cap) as i64);
        if points.last().map(|(_, m)| *m) != Some(clamped) {
            points.push((t, clamped));
        }
        let noise = rng.random_range(-1.0..1.0) * config.volatility * mean;
        p = (p + config.reversion * (mean - p) + noise).clamp(floor, cap);
        t += config.step;
    }
    PriceTrace::new(points, &ty.name).expect("generated trace is valid")
}

/// Generates traces for a whole catalog, one independent stream per type.
pub fn synthetic_traces(
    catalog: &[InstanceType],
    config: &SyntheticTraceConfig,
    seed: u64,
) -> Vec<PriceTrace> {
    catalog
        .iter()
        .enumerate()
        .map(|(i, ty)| synthetic_trace(ty, config, seed.wrapping_add(i as u64 + 1)))
        .collect()
}

/// Parameters for the synthetic job stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorkloadConfig {
    pub jobs: usize,
    /// Submission window in seconds.
    pub duration: u64,
    pub users: u64,
    /// Base runtimes are log-uniform over this range.
    pub runtime_range: (u64, u64),
    pub aug: AugmentConfig,
}

impl Default for SyntheticWorkloadConfig {
    fn default() -> Self {
        SyntheticWorkloadConfig {
            jobs: 1000,
            duration: 86_400,
            users: 20,
            runtime_range: (60, 4 * 3600),
            aug: AugmentConfig::default(),
        }
    }
}

/// Generates a job stream: uniform submissions over the window, log-uniform
/// runtimes, no user-supplied estimates (the augmentation multiplier family
/// synthesizes them), deadlines and profiles per the augmentation config.
pub fn synthetic_workload<R: Rng>(
    config: &SyntheticWorkloadConfig,
    rng: &mut R,
) -> Result<Vec<Job>, WorkloadError> {
    let (lo, hi) = config.runtime_range;
    assert!(lo >= 1 && lo <= hi, "invalid runtime range");
    let mut submits: Vec<u64> = (0..config.jobs)
        .map(|_| rng.random_range(0..=config.duration))
        .collect();
    submits.sort_unstable();
    let raws: Vec<RawJob> = submits
        .iter()
        .enumerate()
        .map(|(i, &submit)| {
            let runtime = if lo == hi {
                lo
            } else {
                let ln = rng.random_range((lo as f64).ln()..(hi as f64).ln());
                (ln.exp().round() as u64).clamp(lo, hi)
            };
            let user_id = if config.users <= 1 {
                0
            } else {
                rng.random_range(0..config.users)
            };
            RawJob {
                trace_id: i as u64 + 1,
                submit_time: submit,
                runtime,
                estimate: None,
                user_id,
            }
        })
        .collect();
    augment(&raws, rng, &config.aug)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::default_catalog;

    #[test]
    fn zero_volatility_gives_a_single_constant_point() {
        let catalog = default_catalog();
        let cfg = SyntheticTraceConfig {
            volatility: 0.0,
            ..SyntheticTraceConfig::default()
        };
        let trace = synthetic_trace(&catalog[0], &cfg, 1);
        assert_eq!(trace.points().len(), 1);
        // m1.small $0.085 / 3 = $0.028333...
        assert_eq!(trace.points()[0].1.micros(), 28_333);
    }

    #[test]
    fn walk_stays_within_bounds_and_replays() {
        let catalog = default_catalog();
        let cfg = SyntheticTraceConfig {
            span: 86_400,
            ..SyntheticTraceConfig::default()
        };
        let a = synthetic_trace(&catalog[3], &cfg, 9);
        let b = synthetic_trace(&catalog[3], &cfg, 9);
        assert_eq!(a, b);
        assert!(a.points().len() > 10);
        let cap = catalog[3].ondemand_price;
        for (_, p) in a.points() {
            assert!(p.is_positive() && *p <= cap);
        }
    }

    #[test]
    fn workload_is_sorted_and_within_ranges() {
        let cfg = SyntheticWorkloadConfig {
            jobs: 500,
            ..SyntheticWorkloadConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jobs = synthetic_workload(&cfg, &mut rng).unwrap();
        assert_eq!(jobs.len(), 500);
        for pair in jobs.windows(2) {
            assert!(pair[0].submit_time <= pair[1].submit_time);
        }
        for job in &jobs {
            assert!(job.base_runtime >= 60 && job.base_runtime <= 4 * 3600);
            assert!(job.submit_time.secs() <= cfg.duration);
            assert!(job.deadline > job.submit_time);
        }
    }
}
