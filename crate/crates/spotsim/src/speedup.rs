//! Moldable-job performance model: Downey's analytical speedup function and
//! generation of per-job parallelism parameters.
//!
//! A job's trace runtime is interpreted as its runtime on a 1-compute-unit
//! reference machine; `runtime_on` scales it to an instance size through the
//! speedup curve. Speedup saturates at the job's average parallelism, so a
//! sequential job gains nothing from a larger instance.

use rand::Rng;
use thiserror::Error;

/// Downey parallelism parameters: average parallelism `A` and an
/// approximation `sigma` to the coefficient of variance of parallelism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallelismProfile {
    pub a: f64,
    pub sigma: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpeedupError {
    #[error("invalid parallelism profile: A={a}, sigma={sigma}")]
    InvalidProfile { a: f64, sigma: f64 },
    #[error("processor count must be >= 1, got {0}")]
    InvalidProcessorCount(u32),
    #[error(
        "malformed distribution spec {0:?} (expected fixed:v | uniform:lo,hi | pow2uniform:lo,hi)"
    )]
    BadDistSpec(String),
    #[error("distribution bounds out of order in {0:?}")]
    BadDistBounds(String),
}

impl ParallelismProfile {
    pub fn new(a: f64, sigma: f64) -> Result<Self, SpeedupError> {
        if !(a.is_finite() && sigma.is_finite() && a >= 1.0 && sigma >= 0.0) {
            return Err(SpeedupError::InvalidProfile { a, sigma });
        }
        Ok(ParallelismProfile { a, sigma })
    }

    /// A sequential job: no useful parallelism.
    pub fn sequential() -> Self {
        ParallelismProfile { a: 1.0, sigma: 0.0 }
    }

    /// Processor count beyond which speedup has saturated at `A`.
    pub fn saturation_point(&self) -> f64 {
        let low = 2.0 * self.a - 1.0;
        let high = self.a + self.a * self.sigma - self.sigma;
        low.max(high)
    }
}

/// Downey speedup of a job with the given profile on `n` processors.
///
/// Low-variance regime (sigma <= 1):
///   S = An / (A + sigma(n-1)/2)            for 1 <= n <= A
///   S = An / (sigma(A - 1/2) + n(1 - sigma/2))  for A <= n <= 2A - 1
///   S = A                                  for n >= 2A - 1
/// High-variance regime (sigma >= 1):
///   S = nA(sigma+1) / (sigma(n + A - 1) + A)    for 1 <= n <= A + A*sigma - sigma
///   S = A                                  beyond
///
/// The result is clamped to [1, min(n, A)], which also smooths any float
/// noise at the region joins.
pub fn speedup(profile: ParallelismProfile, n: u32) -> Result<f64, SpeedupError> {
    if n < 1 {
        return Err(SpeedupError::InvalidProcessorCount(n));
    }
    ParallelismProfile::new(profile.a, profile.sigma)?;
    let a = profile.a;
    let sigma = profile.sigma;
    let nf = n as f64;

    let raw = if sigma <= 1.0 {
        if nf <= a {
            a * nf / (a + sigma * (nf - 1.0) / 2.0)
        } else if nf <= 2.0 * a - 1.0 {
            a * nf / (sigma * (a - 0.5) + nf * (1.0 - sigma / 2.0))
        } else {
            a
        }
    } else if nf <= a + a * sigma - sigma {
        nf * a * (sigma + 1.0) / (sigma * (nf + a - 1.0) + a)
    } else {
        a
    };

    Ok(raw.clamp(1.0, nf.min(a)))
}

/// Runtime of a job on an instance with `ecus` compute units, given its
/// 1-unit reference runtime. Whole seconds, rounded up.
pub fn runtime_on(
    base_runtime: f64,
    profile: ParallelismProfile,
    ecus: u32,
) -> Result<u64, SpeedupError> {
    assert!(base_runtime > 0.0, "base runtime must be positive");
    let s = speedup(profile, ecus)?;
    Ok((base_runtime / s).ceil() as u64)
}

/// A one-dimensional sampling spec for profile generation.
///
/// Config forms: `fixed:v`, `uniform:lo,hi`, `pow2uniform:lo,hi`
/// (2^X with X uniform on [lo, hi]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistSpec {
    Fixed(f64),
    Uniform(f64, f64),
    Pow2Uniform(f64, f64),
}

impl DistSpec {
    pub fn parse(s: &str) -> Result<DistSpec, SpeedupError> {
        let bad = || SpeedupError::BadDistSpec(s.to_string());
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        match (kind.trim(), nums.as_slice()) {
            ("fixed", [v]) => Ok(DistSpec::Fixed(*v)),
            ("uniform", [lo, hi]) => {
                if lo > hi {
                    Err(SpeedupError::BadDistBounds(s.to_string()))
                } else {
                    Ok(DistSpec::Uniform(*lo, *hi))
                }
            }
            ("pow2uniform", [lo, hi]) => {
                if lo > hi {
                    Err(SpeedupError::BadDistBounds(s.to_string()))
                } else {
                    Ok(DistSpec::Pow2Uniform(*lo, *hi))
                }
            }
            _ => Err(bad()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            DistSpec::Fixed(v) => v,
            DistSpec::Uniform(lo, hi) => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            }
            DistSpec::Pow2Uniform(lo, hi) => {
                let x = if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                };
                2f64.powf(x)
            }
        }
    }
}

impl std::fmt::Display for DistSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            DistSpec::Fixed(v) => write!(f, "fixed:{v}"),
            DistSpec::Uniform(lo, hi) => write!(f, "uniform:{lo},{hi}"),
            DistSpec::Pow2Uniform(lo, hi) => write!(f, "pow2uniform:{lo},{hi}"),
        }
    }
}

/// Distributions for drawing per-job parallelism parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileGenConfig {
    pub a_dist: DistSpec,
    pub sigma_dist: DistSpec,
}

impl Default for ProfileGenConfig {
    fn default() -> Self {
        // Spans sequential through highly parallel jobs and both Downey
        // variance regimes.
        ProfileGenConfig {
            a_dist: DistSpec::Pow2Uniform(0.0, 5.0),
            sigma_dist: DistSpec::Uniform(0.0, 2.0),
        }
    }
}

/// Draws a parallelism profile from the configured distributions.
pub fn generate_profile<R: Rng>(
    rng: &mut R,
    config: &ProfileGenConfig,
) -> Result<ParallelismProfile, SpeedupError> {
    let a = config.a_dist.sample(rng).max(1.0);
    let sigma = config.sigma_dist.sample(rng).max(0.0);
    ParallelismProfile::new(a, sigma)
}
