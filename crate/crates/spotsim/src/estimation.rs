//! Runtime estimation: the five estimation methods, per-user completion
//! history, and the estimate-doubling correction rule.
//!
//! Estimates are expressed in reference seconds (runtime on a 1-ECU machine)
//! and scaled to a concrete instance type through the speedup model. History
//! records observed runtimes back-scaled to the same reference so they stay
//! comparable across instance types.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::market::InstanceType;
use crate::speedup::{runtime_on, SpeedupError};
use crate::workload::Job;
use crate::JobId;

/// Direction of the synthetic error applied by `ActualRuntimeWithError`.
/// User estimates skew high in practice, so over-estimation is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorSign {
    Over,
    Under,
}

/// A runtime-estimation method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimationMethod {
    /// Ground truth from the trace (idealized reference method).
    ActualRuntime,
    /// Ground truth perturbed by a random 0-10% factor, drawn once per job.
    ActualRuntimeWithError(ErrorSign),
    /// The estimate the user supplied at submission.
    UserSupplied,
    /// A fixed fraction of the user-supplied estimate (default 1/3).
    FractionOfUserSupplied(f64),
    /// Mean of the user's `k` most recent completed runtimes (default 2),
    /// falling back to the user estimate while fewer than `k` exist.
    RecentAverage(usize),
}

pub const DEFAULT_USER_FRACTION: f64 = 1.0 / 3.0;
pub const DEFAULT_RECENT_K: usize = 2;
const ERROR_SPAN: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("unknown estimation method {0:?}")]
    UnknownMethod(String),
    #[error("invalid parameter in estimation method {0:?}")]
    BadParameter(String),
    #[error(transparent)]
    Speedup(#[from] SpeedupError),
}

impl EstimationMethod {
    /// Parses the `estimation_method` config key: `actual`, `actual_error`,
    /// `actual_error:under`, `user`, `user_fraction:<f>`, `recent_average:<k>`.
    pub fn parse(s: &str) -> Result<EstimationMethod, EstimationError> {
        let s = s.trim();
        match s {
            "actual" => return Ok(EstimationMethod::ActualRuntime),
            "actual_error" => return Ok(EstimationMethod::ActualRuntimeWithError(ErrorSign::Over)),
            "actual_error:under" => {
                return Ok(EstimationMethod::ActualRuntimeWithError(ErrorSign::Under))
            }
            "user" => return Ok(EstimationMethod::UserSupplied),
            "user_fraction" => {
                return Ok(EstimationMethod::FractionOfUserSupplied(
                    DEFAULT_USER_FRACTION,
                ))
            }
            "recent_average" => return Ok(EstimationMethod::RecentAverage(DEFAULT_RECENT_K)),
            _ => {}
        }
        if let Some(f) = s.strip_prefix("user_fraction:") {
            let f: f64 = f
                .parse()
                .map_err(|_| EstimationError::BadParameter(s.to_string()))?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(EstimationError::BadParameter(s.to_string()));
            }
            return Ok(EstimationMethod::FractionOfUserSupplied(f));
        }
        if let Some(k) = s.strip_prefix("recent_average:") {
            let k: usize = k
                .parse()
                .map_err(|_| EstimationError::BadParameter(s.to_string()))?;
            if k < 1 {
                return Err(EstimationError::BadParameter(s.to_string()));
            }
            return Ok(EstimationMethod::RecentAverage(k));
        }
        Err(EstimationError::UnknownMethod(s.to_string()))
    }
}

impl std::fmt::Display for EstimationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimationMethod::ActualRuntime => write!(f, "actual"),
            EstimationMethod::ActualRuntimeWithError(ErrorSign::Over) => write!(f, "actual_error"),
            EstimationMethod::ActualRuntimeWithError(ErrorSign::Under) => {
                write!(f, "actual_error:under")
            }
            EstimationMethod::UserSupplied => write!(f, "user"),
            EstimationMethod::FractionOfUserSupplied(v) => write!(f, "user_fraction:{v}"),
            EstimationMethod::RecentAverage(k) => write!(f, "recent_average:{k}"),
        }
    }
}

/// Per-user record of completed-job runtimes (1-ECU reference seconds),
/// append-only within a run.
#[derive(Debug, Default)]
pub struct UserHistory {
    per_user: HashMap<u64, Vec<f64>>,
}

impl UserHistory {
    pub fn new() -> UserHistory {
        UserHistory::default()
    }

    pub fn record_completion(&mut self, user_id: u64, observed_base_runtime: f64) {
        self.per_user
            .entry(user_id)
            .or_default()
            .push(observed_base_runtime);
    }

    pub fn completions(&self, user_id: u64) -> usize {
        self.per_user.get(&user_id).map_or(0, Vec::len)
    }

    /// Mean of the user's `k` most recent completions; `None` while fewer
    /// than `k` exist.
    pub fn recent_mean(&self, user_id: u64, k: usize) -> Option<f64> {
        let runs = self.per_user.get(&user_id)?;
        if runs.len() < k {
            return None;
        }
        let tail = &runs[runs.len() - k..];
        Some(tail.iter().sum::<f64>() / k as f64)
    }
}

/// The correction rule: a job observed to run past its expected finish gets
/// a working estimate of double the old one.
pub fn correct(old_estimate: f64) -> f64 {
    assert!(old_estimate > 0.0, "estimate must be positive");
    2.0 * old_estimate
}

/// Owns the configured method and the per-job error draws so repeated
/// queries for one job are stable.
pub struct Estimator {
    method: EstimationMethod,
    rng: ChaCha8Rng,
    error_draws: HashMap<JobId, f64>,
}

impl Estimator {
    pub fn new(method: EstimationMethod, seed: u64) -> Estimator {
        Estimator {
            method,
            rng: ChaCha8Rng::seed_from_u64(seed),
            error_draws: HashMap::new(),
        }
    }

    pub fn method(&self) -> EstimationMethod {
        self.method
    }

    /// Estimated runtime on the 1-ECU reference machine, in seconds.
    pub fn estimate_base(&mut self, job: &Job, history: &UserHistory) -> f64 {
        match self.method {
            EstimationMethod::ActualRuntime => job.base_runtime as f64,
            EstimationMethod::ActualRuntimeWithError(sign) => {
                let u = match self.error_draws.get(&job.id) {
                    Some(u) => *u,
                    None => {
                        let u = self.rng.random_range(0.0..ERROR_SPAN);
                        self.error_draws.insert(job.id, u);
                        u
                    }
                };
                let factor = match sign {
                    ErrorSign::Over => 1.0 + u,
                    ErrorSign::Under => 1.0 - u,
                };
                job.base_runtime as f64 * factor
            }
            EstimationMethod::UserSupplied => job.user_estimate as f64,
            EstimationMethod::FractionOfUserSupplied(fraction) => {
                job.user_estimate as f64 * fraction
            }
            EstimationMethod::RecentAverage(k) => history
                .recent_mean(job.user_id, k)
                .unwrap_or(job.user_estimate as f64),
        }
    }

    /// Estimated runtime of the job on a concrete instance type.
    pub fn estimate_on_type(
        &mut self,
        job: &Job,
        ty: &InstanceType,
        history: &UserHistory,
    ) -> Result<u64, EstimationError> {
        let base = self.estimate_base(job, history);
        Ok(runtime_on(base, job.profile, ty.ecus)?)
    }
}
