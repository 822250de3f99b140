//! Workload ingestion: Standard Workload Format parsing and augmentation of
//! each job with a user estimate, a deadline, and parallelism parameters.

use std::io::BufRead;

use rand::Rng;
use thiserror::Error;

use crate::kernel::SimTime;
use crate::speedup::{generate_profile, ParallelismProfile, ProfileGenConfig, SpeedupError};
use crate::{InstanceId, JobId};

/// Job lifecycle. `FailedResubmitted` marks a job returned to the unscheduled
/// list after its instance was reclaimed by the provider; it behaves like
/// `Pending` for scheduling purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Pending,
    Postponed,
    Queued,
    Running,
    Completed,
    FailedResubmitted,
}

impl JobState {
    /// Pending-equivalent states: job sits in the unscheduled list.
    pub fn is_unscheduled(self) -> bool {
        matches!(self, JobState::Pending | JobState::FailedResubmitted)
    }
}

/// A deadline-constrained moldable job.
///
/// `base_runtime` is ground truth (runtime on the 1-ECU reference machine);
/// `current_estimate` is the broker's working belief, refreshed from the
/// estimation method at allocation and doubled by corrections.
#[derive(Debug, Clone)]
pub struct Job {
    pub id: JobId,
    pub trace_id: u64,
    pub user_id: u64,
    pub submit_time: SimTime,
    pub base_runtime: u64,
    pub user_estimate: u64,
    pub deadline: SimTime,
    pub profile: ParallelismProfile,
    pub state: JobState,
    pub assigned_instance: Option<InstanceId>,
    pub current_estimate: f64,
    pub started_at: Option<SimTime>,
    pub completion_time: Option<SimTime>,
    pub postponed_once: bool,
    pub resubmissions: u32,
}

impl Job {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: JobId,
        trace_id: u64,
        user_id: u64,
        submit_time: SimTime,
        base_runtime: u64,
        user_estimate: u64,
        deadline: SimTime,
        profile: ParallelismProfile,
    ) -> Job {
        assert!(base_runtime > 0, "base runtime must be positive");
        assert!(user_estimate > 0, "user estimate must be positive");
        assert!(deadline > submit_time, "deadline must follow submission");
        Job {
            id,
            trace_id,
            user_id,
            submit_time,
            base_runtime,
            user_estimate,
            deadline,
            profile,
            state: JobState::Pending,
            assigned_instance: None,
            current_estimate: 0.0,
            started_at: None,
            completion_time: None,
            postponed_once: false,
            resubmissions: 0,
        }
    }

    pub fn missed_deadline(&self) -> bool {
        matches!(self.completion_time, Some(t) if t > self.deadline)
    }
}

/// All jobs of one run, indexed by their dense [`JobId`].
#[derive(Debug, Default)]
pub struct JobTable {
    jobs: Vec<Job>,
}

impl JobTable {
    /// Builds the table; job ids must equal their position.
    pub fn from_jobs(jobs: Vec<Job>) -> JobTable {
        for (i, job) in jobs.iter().enumerate() {
            assert_eq!(job.id, JobId(i), "job ids must be dense and in order");
        }
        JobTable { jobs }
    }

    pub fn get(&self, id: JobId) -> &Job {
        &self.jobs[id.0]
    }

    pub fn get_mut(&mut self, id: JobId) -> &mut Job {
        &mut self.jobs[id.0]
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Job> {
        self.jobs.iter()
    }

    /// Counts jobs per lifecycle bucket: (unscheduled, postponed, queued,
    /// running, completed). Unscheduled covers pending and failed-resubmitted.
    pub fn state_counts(&self) -> (usize, usize, usize, usize, usize) {
        let mut counts = (0, 0, 0, 0, 0);
        for job in &self.jobs {
            match job.state {
                JobState::Pending | JobState::FailedResubmitted => counts.0 += 1,
                JobState::Postponed => counts.1 += 1,
                JobState::Queued => counts.2 += 1,
                JobState::Running => counts.3 += 1,
                JobState::Completed => counts.4 += 1,
            }
        }
        counts
    }
}

/// A record straight out of an SWF trace, before augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawJob {
    pub trace_id: u64,
    pub submit_time: u64,
    pub runtime: u64,
    /// Field 9 (requested time), when present and positive.
    pub estimate: Option<u64>,
    pub user_id: u64,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: expected 18 fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: non-numeric field {field:?}")]
    BadField { line: usize, field: String },
    #[error("requested {requested} jobs but only {available} available")]
    NotEnoughJobs { requested: usize, available: usize },
    #[error("malformed multiplier list {0:?} (expected value:weight,...)")]
    BadMultiplierList(String),
    #[error("malformed deadline multiplier range {0:?} (expected lo,hi with 1 <= lo <= hi)")]
    BadDeadlineRange(String),
    #[error(transparent)]
    Speedup(#[from] SpeedupError),
    #[error("i/o error reading workload: {0}")]
    Io(#[from] std::io::Error),
}

const SWF_FIELDS: usize = 18;

/// Parses SWF text: `;`-prefixed header comments, then 18 whitespace-separated
/// fields per record. Keeps job id, submit time, run time, requested time and
/// user id; records with non-positive run time (cancelled jobs) are skipped.
pub fn parse_swf<R: BufRead>(reader: R) -> Result<Vec<RawJob>, WorkloadError> {
    let mut jobs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(';') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != SWF_FIELDS {
            return Err(WorkloadError::FieldCount {
                line: line_no,
                found: fields.len(),
            });
        }
        let num = |i: usize| -> Result<f64, WorkloadError> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| WorkloadError::BadField {
                    line: line_no,
                    field: fields[i].to_string(),
                })
        };
        let trace_id = num(0)?;
        let submit = num(1)?;
        let runtime = num(3)?;
        let estimate = num(8)?;
        let user = num(11)?;
        if runtime <= 0.0 {
            continue;
        }
        jobs.push(RawJob {
            trace_id: trace_id as u64,
            submit_time: submit.max(0.0).round() as u64,
            runtime: (runtime.round() as u64).max(1),
            estimate: (estimate > 0.0).then(|| (estimate.round() as u64).max(1)),
            user_id: user.max(0.0) as u64,
        });
    }
    Ok(jobs)
}

/// Weighted multiplier family standing in for a full user-estimate model:
/// estimates are mostly over-estimated, so small multipliers dominate.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// `(multiplier, weight)` pairs for missing user estimates.
    pub estimate_multipliers: Vec<(u64, u32)>,
    /// Deadline = submit + round(user_estimate * m), m uniform in this range.
    pub deadline_multiplier_range: (f64, f64),
    pub profile_gen: ProfileGenConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            estimate_multipliers: vec![(1, 5), (2, 4), (3, 3), (5, 2), (10, 1)],
            deadline_multiplier_range: (1.5, 4.0),
            profile_gen: ProfileGenConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// Parses the `estimate_multipliers` key: `"1:5,2:4,3:3,5:2,10:1"`.
    pub fn parse_multipliers(s: &str) -> Result<Vec<(u64, u32)>, WorkloadError> {
        let bad = || WorkloadError::BadMultiplierList(s.to_string());
        let mut out = Vec::new();
        for part in s.split(',') {
            let (v, w) = part.trim().split_once(':').ok_or_else(bad)?;
            let v: u64 = v.trim().parse().map_err(|_| bad())?;
            let w: u32 = w.trim().parse().map_err(|_| bad())?;
            if v == 0 {
                return Err(bad());
            }
            out.push((v, w));
        }
        if out.is_empty() || out.iter().all(|(_, w)| *w == 0) {
            return Err(bad());
        }
        Ok(out)
    }

    /// Parses the `deadline_multiplier_range` key: `"1.5,4"`.
    pub fn parse_deadline_range(s: &str) -> Result<(f64, f64), WorkloadError> {
        let bad = || WorkloadError::BadDeadlineRange(s.to_string());
        let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        if !(lo.is_finite() && hi.is_finite() && 1.0 <= lo && lo <= hi) {
            return Err(bad());
        }
        Ok((lo, hi))
    }
}

fn weighted_pick<R: Rng>(rng: &mut R, pairs: &[(u64, u32)]) -> u64 {
    let total: u64 = pairs.iter().map(|(_, w)| *w as u64).sum();
    let mut x = rng.random_range(0..total);
    for (v, w) in pairs {
        if x < *w as u64 {
            return *v;
        }
        x -= *w as u64;
    }
    pairs.last().unwrap().0
}

/// Deterministic core of `augment`, split out so exact draws can be injected
/// in tests: given the drawn multipliers and profile, builds the job.
pub fn augment_one(
    id: JobId,
    raw: &RawJob,
    estimate_multiplier: u64,
    deadline_multiplier: f64,
    profile: ParallelismProfile,
) -> Job {
    let user_estimate = raw.estimate.unwrap_or(raw.runtime * estimate_multiplier);
    let deadline = raw.submit_time + (user_estimate as f64 * deadline_multiplier).round() as u64;
    Job::new(
        id,
        raw.trace_id,
        raw.user_id,
        SimTime(raw.submit_time),
        raw.runtime,
        user_estimate,
        SimTime(deadline),
        profile,
    )
}

/// Augments raw trace records with user estimate, deadline, and parallelism
/// profile. Estimates already present in the trace are kept; missing ones are
/// synthesized as runtime times a weighted over-estimation multiplier.
pub fn augment<R: Rng>(
    raw_jobs: &[RawJob],
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<Vec<Job>, WorkloadError> {
    let (dl_lo, dl_hi) = config.deadline_multiplier_range;
    let mut jobs = Vec::with_capacity(raw_jobs.len());
    for (i, raw) in raw_jobs.iter().enumerate() {
        let m_est = if raw.estimate.is_some() {
            1
        } else {
            weighted_pick(rng, &config.estimate_multipliers)
        };
        let m_dl = if dl_lo == dl_hi {
            dl_lo
        } else {
            rng.random_range(dl_lo..dl_hi)
        };
        let profile = generate_profile(rng, &config.profile_gen)?;
        jobs.push(augment_one(JobId(i), raw, m_est, m_dl, profile));
    }
    Ok(jobs)
}

/// Takes the first `count` records and linearly rescales their submit times
/// to span `duration` seconds, preserving order.
pub fn scale_workload(
    raw_jobs: &[RawJob],
    count: usize,
    duration: u64,
) -> Result<Vec<RawJob>, WorkloadError> {
    if count > raw_jobs.len() {
        return Err(WorkloadError::NotEnoughJobs {
            requested: count,
            available: raw_jobs.len(),
        });
    }
    let slice = &raw_jobs[..count];
    if slice.is_empty() {
        return Ok(Vec::new());
    }
    let first = slice.iter().map(|j| j.submit_time).min().unwrap();
    let last = slice.iter().map(|j| j.submit_time).max().unwrap();
    let span = last - first;
    Ok(slice
        .iter()
        .map(|j| {
            let scaled = if span == 0 {
                0
            } else {
                ((j.submit_time - first) as u128 * duration as u128 / span as u128) as u64
            };
            RawJob {
                submit_time: scaled,
                ..j.clone()
            }
        })
        .collect())
}
