//! The client-side provisioning and scheduling policy.
//!
//! Each tick the broker walks the unscheduled list in order: try to reuse a
//! flagged-idle instance (free space), else postpone the job if its deadline
//! slack allows, else compare the incremental cost of extending an existing
//! lease against a fresh lease and take the cheaper, extension winning ties.
//! Idle instances are then matched against postponed jobs, earliest deadline
//! first. Completion events carry ground truth; correction events fire at a
//! job's believed finish and double the working estimate while it still runs,
//! requeueing everything scheduled behind it.

use std::collections::{HashMap, HashSet};
use std::mem;

use thiserror::Error;

use crate::analytics::RunAccounting;
use crate::estimation::{correct, EstimationMethod, Estimator, UserHistory};
use crate::kernel::{EventKind, Kernel, SimTime, HOUR};
use crate::market::{
    CloudManager, InstanceState, ReclaimedInstance, RequestOutcome, TerminationInitiator,
};
use crate::money::Money;
use crate::speedup::{runtime_on, speedup};
use crate::workload::{JobState, JobTable};
use crate::{EventHandle, InstanceId, JobId, TypeId};

/// How the broker chooses a bid for a new spot request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BidPolicy {
    /// Bid the type's on-demand price (rarely out-bid in practice).
    OnDemandPrice,
    /// Bid a multiplier over the current spot price.
    SpotMultiplier(f64),
}

impl BidPolicy {
    /// Parses the `bid_policy` config key: `ondemand` or `spot_multiplier:<m>`.
    pub fn parse(s: &str) -> Result<BidPolicy, BrokerError> {
        let s = s.trim();
        if s == "ondemand" {
            return Ok(BidPolicy::OnDemandPrice);
        }
        if let Some(m) = s.strip_prefix("spot_multiplier:") {
            let m: f64 = m
                .parse()
                .map_err(|_| BrokerError::BadBidPolicy(s.to_string()))?;
            if m <= 0.0 || !m.is_finite() {
                return Err(BrokerError::BadBidPolicy(s.to_string()));
            }
            return Ok(BidPolicy::SpotMultiplier(m));
        }
        Err(BrokerError::BadBidPolicy(s.to_string()))
    }
}

impl std::fmt::Display for BidPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BidPolicy::OnDemandPrice => write!(f, "ondemand"),
            BidPolicy::SpotMultiplier(m) => write!(f, "spot_multiplier:{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrokerConfig {
    /// Scheduling interval in seconds.
    pub tick_interval: u64,
    pub method: EstimationMethod,
    pub bid_policy: BidPolicy,
    /// Slack subtracted from a job's maximum wait time.
    pub safety_margin: u64,
    pub correction_enabled: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            tick_interval: 10,
            method: EstimationMethod::UserSupplied,
            bid_policy: BidPolicy::OnDemandPrice,
            safety_margin: 10,
            correction_enabled: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BrokerError {
    #[error("job {0} submitted twice")]
    DuplicateJob(JobId),
    #[error("unknown bid policy {0:?} (expected ondemand | spot_multiplier:<m>)")]
    BadBidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionKind {
    FreeSpace,
    Extension,
    NewLease,
    Postponed,
    Denied,
}

impl DecisionKind {
    pub fn label(self) -> &'static str {
        match self {
            DecisionKind::FreeSpace => "free_space",
            DecisionKind::Extension => "extension",
            DecisionKind::NewLease => "new_lease",
            DecisionKind::Postponed => "postponed",
            DecisionKind::Denied => "denied",
        }
    }
}

/// One allocation decision, as logged per job per pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationDecision {
    pub time: SimTime,
    pub job: JobId,
    pub kind: DecisionKind,
    pub instance: Option<InstanceId>,
    pub type_id: Option<TypeId>,
    pub cost_estimate: Money,
    /// No type could meet the deadline; allocated for earliest finish anyway.
    pub expected_miss: bool,
}

#[derive(Debug, Clone, Copy)]
struct ExtensionChoice {
    instance: InstanceId,
    cost: Money,
    projected_finish: SimTime,
}

#[derive(Debug, Clone, Copy)]
struct NewLeaseChoice {
    type_id: TypeId,
    cost: Money,
    est: u64,
    feasible: bool,
}

/// Broker state: the unscheduled and postponed job lists, the
/// estimation machinery, and the pending event handles it owns.
pub struct Broker {
    pub config: BrokerConfig,
    unscheduled: Vec<JobId>,
    postponed: Vec<JobId>,
    estimator: Estimator,
    pub history: UserHistory,
    seen: HashSet<JobId>,
    pending_tick: Option<SimTime>,
    postpone_handles: HashMap<JobId, EventHandle>,
    completion_handles: HashMap<JobId, EventHandle>,
    correction_handles: HashMap<JobId, EventHandle>,
    pub decisions: Vec<AllocationDecision>,
}

impl Broker {
    pub fn new(config: BrokerConfig, estimator_seed: u64) -> Broker {
        let estimator = Estimator::new(config.method, estimator_seed);
        Broker {
            config,
            unscheduled: Vec::new(),
            postponed: Vec::new(),
            estimator,
            history: UserHistory::new(),
            seen: HashSet::new(),
            pending_tick: None,
            postpone_handles: HashMap::new(),
            completion_handles: HashMap::new(),
            correction_handles: HashMap::new(),
            decisions: Vec::new(),
        }
    }

    pub fn unscheduled(&self) -> &[JobId] {
        &self.unscheduled
    }

    pub fn postponed(&self) -> &[JobId] {
        &self.postponed
    }

    pub fn has_work(&self) -> bool {
        !self.unscheduled.is_empty() || !self.postponed.is_empty()
    }

    /// Accepts a submitted job into the unscheduled list and arranges the
    /// next scheduling pass.
    pub fn submit(
        &mut self,
        id: JobId,
        now: SimTime,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
        acct: &mut RunAccounting,
    ) -> Result<(), BrokerError> {
        if !self.seen.insert(id) {
            return Err(BrokerError::DuplicateJob(id));
        }
        debug_assert_eq!(jobs.get(id).submit_time, now);
        jobs.get_mut(id).state = JobState::Pending;
        self.unscheduled.push(id);
        acct.submitted += 1;
        self.ensure_tick(now, kernel);
        Ok(())
    }

    /// Schedules the next tick-boundary pass if none is pending.
    pub fn ensure_tick(&mut self, now: SimTime, kernel: &mut Kernel<EventKind>) {
        if self.pending_tick.is_some() {
            return;
        }
        let t = self.config.tick_interval;
        let next = SimTime((now.secs() / t + 1) * t);
        kernel
            .schedule(next, EventKind::ScheduleTick)
            .expect("tick is in the future");
        self.pending_tick = Some(next);
    }

    fn bid_for(&self, market: &CloudManager, ty: TypeId, now: SimTime) -> Money {
        match self.config.bid_policy {
            BidPolicy::OnDemandPrice => market.instance_type(ty).ondemand_price,
            BidPolicy::SpotMultiplier(m) => market
                .current_price(ty, now)
                .expect("trace covers the run")
                .scale_f64(m),
        }
    }

    /// Best-fit search over flagged-idle instances: the job must fit before
    /// the instance's termination boundary and before its own deadline.
    /// Returns the chosen instance and the estimate used.
    pub fn find_free_space(
        &mut self,
        job_id: JobId,
        now: SimTime,
        market: &CloudManager,
        jobs: &JobTable,
    ) -> Option<(InstanceId, u64)> {
        let job = jobs.get(job_id);
        let mut best: Option<(u64, InstanceId, u64)> = None; // (remaining, id, est)
        for inst in market.live_instances() {
            if inst.state != InstanceState::FlaggedIdle {
                continue;
            }
            let remaining = inst.paid_until().saturating_since(now);
            let ty = market.instance_type(inst.type_id);
            let est = self
                .estimator
                .estimate_on_type(job, ty, &self.history)
                .expect("valid profile");
            if est > remaining || now.plus(est) > job.deadline {
                continue;
            }
            match best {
                Some((r, _, _)) if r <= remaining => {}
                _ => best = Some((remaining, inst.id, est)),
            }
        }
        best.map(|(_, id, est)| (id, est))
    }

    /// How long the job can wait and still (believably) meet its deadline:
    /// deadline slack minus the fastest-type estimate, boot delay, and the
    /// safety margin, floored at zero.
    pub fn max_wait_time(
        &mut self,
        job_id: JobId,
        now: SimTime,
        market: &CloudManager,
        jobs: &JobTable,
    ) -> u64 {
        let job = jobs.get(job_id);
        let fastest = market
            .catalog()
            .iter()
            .map(|ty| {
                self.estimator
                    .estimate_on_type(job, ty, &self.history)
                    .expect("valid profile")
            })
            .min()
            .expect("catalog is non-empty");
        job.deadline
            .saturating_since(now)
            .saturating_sub(fastest + market.boot_delay() + self.config.safety_margin)
    }

    /// A job may be postponed once, and only when it can wait at least one
    /// full tick.
    pub fn can_postpone(&self, job_id: JobId, mwt: u64, jobs: &JobTable) -> bool {
        mwt >= self.config.tick_interval && !jobs.get(job_id).postponed_once
    }

    /// Believed time at which an instance finishes everything currently
    /// assigned to it.
    fn believed_drain_time(
        &self,
        inst_id: InstanceId,
        now: SimTime,
        market: &CloudManager,
        jobs: &JobTable,
    ) -> SimTime {
        let inst = market.instance(inst_id);
        let ty = market.instance_type(inst.type_id);
        let mut at = now.max(inst.ready_at);
        if let Some(running) = inst.running_job {
            let job = jobs.get(running);
            let believed_total =
                runtime_on(job.current_estimate, job.profile, ty.ecus).expect("valid profile");
            let believed_finish = job
                .started_at
                .expect("running job has started")
                .plus(believed_total);
            at = at.max(believed_finish);
        }
        for &queued in &inst.queue {
            let job = jobs.get(queued);
            let believed =
                runtime_on(job.current_estimate, job.profile, ty.ecus).expect("valid profile");
            at = at.plus(believed);
        }
        at
    }

    /// Cheapest feasible lease extension: queue the job on a live instance,
    /// paying only the incremental whole hours beyond what is already
    /// committed there, priced at the current spot price.
    pub fn compute_lease_extension(
        &mut self,
        job_id: JobId,
        now: SimTime,
        market: &CloudManager,
        jobs: &JobTable,
    ) -> Option<AllocationDecision> {
        let job = jobs.get(job_id);
        let mut best: Option<ExtensionChoice> = None;
        for inst in market.live_instances() {
            let start = self.believed_drain_time(inst.id, now, market, jobs);
            let ty = market.instance_type(inst.type_id);
            let est = self
                .estimator
                .estimate_on_type(job, ty, &self.history)
                .expect("valid profile");
            let finish = start.plus(est);
            if finish > job.deadline {
                continue;
            }
            let locked = inst.hour_prices.len() as u64;
            let committed = locked.max(start.since(inst.lease_start).div_ceil(HOUR));
            let with_job = locked.max(finish.since(inst.lease_start).div_ceil(HOUR));
            let increment = with_job - committed;
            let cost = market
                .current_price(inst.type_id, now)
                .expect("trace covers the run")
                .times(increment);
            let better = match best {
                None => true,
                Some(b) => (cost, finish, inst.id) < (b.cost, b.projected_finish, b.instance),
            };
            if better {
                best = Some(ExtensionChoice {
                    instance: inst.id,
                    cost,
                    projected_finish: finish,
                });
            }
        }
        best.map(|b| AllocationDecision {
            time: now,
            job: job_id,
            kind: DecisionKind::Extension,
            instance: Some(b.instance),
            type_id: Some(market.instance(b.instance).type_id),
            cost_estimate: b.cost,
            expected_miss: false,
        })
    }

    /// Cheapest new lease: ceil-hour cost of the estimate at the current spot
    /// price, over the types that can still meet the deadline; ties prefer
    /// the shorter estimate. Falls back to the earliest-finishing type when
    /// no type is feasible (the job is an expected deadline miss).
    pub fn compute_cost_new(
        &mut self,
        job_id: JobId,
        now: SimTime,
        market: &CloudManager,
        jobs: &JobTable,
    ) -> AllocationDecision {
        let job = jobs.get(job_id);
        let boot = market.boot_delay();
        let slack = job.deadline.saturating_since(now);
        let mut choice: Option<NewLeaseChoice> = None;
        for ty in market.catalog() {
            let est = self
                .estimator
                .estimate_on_type(job, ty, &self.history)
                .expect("valid profile");
            let cost = market
                .current_price(ty.id, now)
                .expect("trace covers the run")
                .times(est.div_ceil(HOUR).max(1));
            let feasible = boot + est <= slack;
            let candidate = NewLeaseChoice {
                type_id: ty.id,
                cost,
                est,
                feasible,
            };
            let better = match choice {
                None => true,
                Some(c) => match (candidate.feasible, c.feasible) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => {
                        (candidate.cost, candidate.est, ty.ecus, ty.id)
                            < (
                                c.cost,
                                c.est,
                                market.instance_type(c.type_id).ecus,
                                c.type_id,
                            )
                    }
                    // neither feasible: minimize finish time, then cost
                    (false, false) => {
                        (candidate.est, candidate.cost, ty.id) < (c.est, c.cost, c.type_id)
                    }
                },
            };
            if better {
                choice = Some(candidate);
            }
        }
        let c = choice.expect("catalog is non-empty");
        AllocationDecision {
            time: now,
            job: job_id,
            kind: DecisionKind::NewLease,
            instance: None,
            type_id: Some(c.type_id),
            cost_estimate: c.cost,
            expected_miss: !c.feasible,
        }
    }

    /// Starts a job on an instance right now: schedules its ground-truth
    /// completion and, when correction is enabled, the correction event at
    /// its believed finish.
    fn start_job(
        &mut self,
        inst_id: InstanceId,
        job_id: JobId,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
    ) {
        let ecus = market.instance_type(market.instance(inst_id).type_id).ecus;
        {
            let inst = market.instance_mut(inst_id);
            debug_assert!(inst.running_job.is_none(), "one job per instance");
            inst.running_job = Some(job_id);
            inst.state = InstanceState::Running;
        }
        let job = jobs.get_mut(job_id);
        job.state = JobState::Running;
        job.started_at = Some(now);
        job.assigned_instance = Some(inst_id);
        let true_runtime =
            runtime_on(job.base_runtime as f64, job.profile, ecus).expect("valid profile");
        let believed = runtime_on(job.current_estimate, job.profile, ecus).expect("valid profile");
        // Completion is scheduled first so an exact believed estimate
        // resolves as completion-then-no-op-correction at the same instant.
        let completion = kernel
            .schedule(now.plus(true_runtime), EventKind::JobCompletion(job_id))
            .expect("future event");
        self.completion_handles.insert(job_id, completion);
        if self.config.correction_enabled {
            let correction = kernel
                .schedule(now.plus(believed), EventKind::Correction(job_id))
                .expect("future event");
            self.correction_handles.insert(job_id, correction);
        }
    }

    /// Places an allocated job on an instance: starts it immediately when the
    /// instance is ready and idle, else queues it.
    fn place_on_instance(
        &mut self,
        inst_id: InstanceId,
        job_id: JobId,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
    ) {
        let inst = market.instance(inst_id);
        let can_start = inst.running_job.is_none()
            && inst.ready_at <= now
            && inst.state != InstanceState::Booting
            && inst.queue.is_empty();
        if can_start {
            self.start_job(inst_id, job_id, now, market, jobs, kernel);
        } else {
            let job = jobs.get_mut(job_id);
            job.state = JobState::Queued;
            job.assigned_instance = Some(inst_id);
            market.instance_mut(inst_id).queue.push_back(job_id);
        }
    }

    /// One scheduling pass over the unscheduled list, then the idle-instance
    /// / postponed-job matching pass.
    pub fn schedule_tick(
        &mut self,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
        acct: &mut RunAccounting,
    ) -> Vec<AllocationDecision> {
        self.pending_tick = None;
        let mut pass_decisions = Vec::new();
        let batch = mem::take(&mut self.unscheduled);
        let mut still_unscheduled = Vec::new();

        for job_id in batch {
            let est_base = self
                .estimator
                .estimate_base(jobs.get(job_id), &self.history);

            if let Some((inst_id, _est)) = self.find_free_space(job_id, now, market, jobs) {
                jobs.get_mut(job_id).current_estimate = est_base;
                self.place_on_instance(inst_id, job_id, now, market, jobs, kernel);
                pass_decisions.push(AllocationDecision {
                    time: now,
                    job: job_id,
                    kind: DecisionKind::FreeSpace,
                    instance: Some(inst_id),
                    type_id: Some(market.instance(inst_id).type_id),
                    cost_estimate: Money::ZERO,
                    expected_miss: false,
                });
                continue;
            }

            let mwt = self.max_wait_time(job_id, now, market, jobs);
            if self.can_postpone(job_id, mwt, jobs) {
                let job = jobs.get_mut(job_id);
                job.state = JobState::Postponed;
                job.postponed_once = true;
                self.postponed.push(job_id);
                let handle = kernel
                    .schedule(now.plus(mwt), EventKind::PostponeExpiry(job_id))
                    .expect("future event");
                self.postpone_handles.insert(job_id, handle);
                pass_decisions.push(AllocationDecision {
                    time: now,
                    job: job_id,
                    kind: DecisionKind::Postponed,
                    instance: None,
                    type_id: None,
                    cost_estimate: Money::ZERO,
                    expected_miss: false,
                });
                continue;
            }

            let extension = self.compute_lease_extension(job_id, now, market, jobs);
            let new_lease = self.compute_cost_new(job_id, now, market, jobs);

            // Extension wins ties.
            if let Some(ext) = extension.filter(|e| e.cost_estimate <= new_lease.cost_estimate) {
                jobs.get_mut(job_id).current_estimate = est_base;
                self.place_on_instance(ext.instance.unwrap(), job_id, now, market, jobs, kernel);
                pass_decisions.push(ext);
                continue;
            }

            let ty = new_lease.type_id.unwrap();
            let bid = self.bid_for(market, ty, now);
            match market
                .request_instance(ty, bid, now)
                .expect("trace covers the run")
            {
                RequestOutcome::Granted {
                    id,
                    ready_at,
                    first_hour_boundary,
                } => {
                    kernel
                        .schedule(ready_at, EventKind::InstanceReady(id))
                        .expect("future event");
                    kernel
                        .schedule(first_hour_boundary, EventKind::HourBoundary(id))
                        .expect("future event");
                    acct.instances_launched += 1;
                    if new_lease.expected_miss {
                        acct.expected_misses += 1;
                    }
                    jobs.get_mut(job_id).current_estimate = est_base;
                    self.place_on_instance(id, job_id, now, market, jobs, kernel);
                    pass_decisions.push(AllocationDecision {
                        instance: Some(id),
                        ..new_lease
                    });
                }
                RequestOutcome::Denied => {
                    // Out-bid by the current price; retry at the next tick.
                    still_unscheduled.push(job_id);
                    pass_decisions.push(AllocationDecision {
                        time: now,
                        job: job_id,
                        kind: DecisionKind::Denied,
                        instance: None,
                        type_id: Some(ty),
                        cost_estimate: new_lease.cost_estimate,
                        expected_miss: false,
                    });
                }
            }
        }
        self.unscheduled = still_unscheduled;

        pass_decisions.extend(self.match_idle_to_postponed(now, market, jobs, kernel));

        if !self.unscheduled.is_empty() {
            self.ensure_tick(now, kernel);
        }
        self.decisions.extend(pass_decisions.iter().copied());
        pass_decisions
    }

    /// Matches flagged-idle instances to postponed jobs, earliest deadline
    /// first, reusing already-paid capacity early.
    fn match_idle_to_postponed(
        &mut self,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
    ) -> Vec<AllocationDecision> {
        let mut decisions = Vec::new();
        if self.postponed.is_empty() {
            return decisions;
        }
        let mut order: Vec<JobId> = self.postponed.clone();
        order.sort_by_key(|&id| (jobs.get(id).deadline, id));
        let mut matched: HashSet<JobId> = HashSet::new();
        for job_id in order {
            if let Some((inst_id, _est)) = self.find_free_space(job_id, now, market, jobs) {
                let est_base = self
                    .estimator
                    .estimate_base(jobs.get(job_id), &self.history);
                {
                    let job = jobs.get_mut(job_id);
                    job.state = JobState::Pending;
                    job.current_estimate = est_base;
                }
                if let Some(h) = self.postpone_handles.remove(&job_id) {
                    kernel.cancel(h);
                }
                self.place_on_instance(inst_id, job_id, now, market, jobs, kernel);
                matched.insert(job_id);
                decisions.push(AllocationDecision {
                    time: now,
                    job: job_id,
                    kind: DecisionKind::FreeSpace,
                    instance: Some(inst_id),
                    type_id: Some(market.instance(inst_id).type_id),
                    cost_estimate: Money::ZERO,
                    expected_miss: false,
                });
            }
        }
        self.postponed.retain(|id| !matched.contains(id));
        decisions
    }

    /// A postponed job's wait expired: it returns to the unscheduled list as
    /// urgent (it cannot be postponed again).
    pub fn on_postpone_expiry(
        &mut self,
        job_id: JobId,
        now: SimTime,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
    ) {
        self.postpone_handles.remove(&job_id);
        if jobs.get(job_id).state != JobState::Postponed {
            return; // matched to an idle instance earlier
        }
        self.postponed.retain(|&id| id != job_id);
        jobs.get_mut(job_id).state = JobState::Pending;
        self.unscheduled.push(job_id);
        self.ensure_tick(now, kernel);
    }

    /// Boot completed: start the first queued job, or flag the instance idle
    /// if everything assigned to it was pulled away meanwhile.
    pub fn on_instance_ready(
        &mut self,
        inst_id: InstanceId,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
        acct: &mut RunAccounting,
    ) {
        let inst = market.instance(inst_id);
        if !inst.is_live() {
            return;
        }
        debug_assert_eq!(inst.state, InstanceState::Booting);
        market.instance_mut(inst_id).state = InstanceState::Running;
        match market.instance_mut(inst_id).queue.pop_front() {
            Some(next) => self.start_job(inst_id, next, now, market, jobs, kernel),
            None => self.flag_idle(inst_id, now, market, acct),
        }
    }

    /// Flags an instance for termination at its next whole-hour boundary.
    /// Exactly on a boundary there is no partial hour, so it terminates
    /// immediately at the same cost.
    fn flag_idle(
        &mut self,
        inst_id: InstanceId,
        now: SimTime,
        market: &mut CloudManager,
        acct: &mut RunAccounting,
    ) {
        let inst = market.instance(inst_id);
        if now == inst.paid_until() {
            market
                .terminate(inst_id, now, TerminationInitiator::Client)
                .expect("instance was live");
            acct.record_instance(market.instance(inst_id), now, TerminationInitiator::Client);
        } else {
            market.instance_mut(inst_id).state = InstanceState::FlaggedIdle;
        }
    }

    /// Ground-truth completion: record history (back-scaled to the 1-ECU
    /// reference), account the job, and hand the instance to the next queued
    /// job or flag it idle.
    pub fn on_job_completion(
        &mut self,
        job_id: JobId,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
        acct: &mut RunAccounting,
    ) {
        self.completion_handles.remove(&job_id);
        if let Some(h) = self.correction_handles.remove(&job_id) {
            kernel.cancel(h);
        }
        let (inst_id, elapsed, user_id) = {
            let job = jobs.get_mut(job_id);
            debug_assert_eq!(job.state, JobState::Running);
            job.state = JobState::Completed;
            job.completion_time = Some(now);
            (
                job.assigned_instance.expect("running job is assigned"),
                now.since(job.started_at.expect("running job has started")),
                job.user_id,
            )
        };
        let type_id = market.instance(inst_id).type_id;
        let ecus = market.instance_type(type_id).ecus;
        let job = jobs.get(job_id);
        let observed_base = elapsed as f64 * speedup(job.profile, ecus).expect("valid profile");
        self.history.record_completion(user_id, observed_base);
        acct.record_completion(job, type_id);
        {
            let inst = market.instance_mut(inst_id);
            inst.busy_seconds += elapsed;
            inst.running_job = None;
        }
        match market.instance_mut(inst_id).queue.pop_front() {
            Some(next) => self.start_job(inst_id, next, now, market, jobs, kernel),
            None => self.flag_idle(inst_id, now, market, acct),
        }
        if !self.postponed.is_empty() {
            self.ensure_tick(now, kernel);
        }
    }

    /// The job's believed finish passed while it still runs: double the
    /// working estimate, keep the job where it is, re-arm the correction at
    /// the new believed finish, and resubmit everything queued behind it.
    pub fn on_correction(
        &mut self,
        job_id: JobId,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
        acct: &mut RunAccounting,
    ) {
        self.correction_handles.remove(&job_id);
        if jobs.get(job_id).state != JobState::Running {
            return; // already completed
        }
        acct.corrections += 1;
        let inst_id = jobs.get(job_id).assigned_instance.expect("running job");
        let ecus = market.instance_type(market.instance(inst_id).type_id).ecus;
        let remaining = {
            let job = jobs.get_mut(job_id);
            job.current_estimate = correct(job.current_estimate);
            let believed_total =
                runtime_on(job.current_estimate, job.profile, ecus).expect("valid profile");
            let elapsed = now.since(job.started_at.expect("running job"));
            believed_total.saturating_sub(elapsed).max(1)
        };
        let handle = kernel
            .schedule(now.plus(remaining), EventKind::Correction(job_id))
            .expect("future event");
        self.correction_handles.insert(job_id, handle);

        let displaced: Vec<JobId> = market.instance_mut(inst_id).queue.drain(..).collect();
        for q in displaced {
            let job = jobs.get_mut(q);
            job.state = JobState::Pending;
            job.assigned_instance = None;
            self.unscheduled.push(q);
        }
        if !self.unscheduled.is_empty() {
            self.ensure_tick(now, kernel);
        }
    }

    /// An instance was reclaimed by the provider: its running and queued jobs
    /// return to the unscheduled list; completed work is lost.
    pub fn on_instance_failure(
        &mut self,
        reclaimed: &ReclaimedInstance,
        now: SimTime,
        market: &mut CloudManager,
        jobs: &mut JobTable,
        kernel: &mut Kernel<EventKind>,
        acct: &mut RunAccounting,
    ) {
        acct.failures += 1;
        if let Some(running) = reclaimed.running_job {
            if let Some(h) = self.completion_handles.remove(&running) {
                kernel.cancel(h);
            }
            if let Some(h) = self.correction_handles.remove(&running) {
                kernel.cancel(h);
            }
            {
                let started = jobs.get(running).started_at.expect("running job");
                market.instance_mut(reclaimed.id).busy_seconds += now.since(started);
            }
            let job = jobs.get_mut(running);
            job.state = JobState::FailedResubmitted;
            job.assigned_instance = None;
            job.started_at = None;
            job.resubmissions += 1;
            self.unscheduled.push(running);
        }
        for &q in &reclaimed.queued_jobs {
            let job = jobs.get_mut(q);
            job.state = JobState::FailedResubmitted;
            job.assigned_instance = None;
            job.resubmissions += 1;
            self.unscheduled.push(q);
        }
        acct.record_instance(
            market.instance(reclaimed.id),
            now,
            TerminationInitiator::Provider,
        );
        if !self.unscheduled.is_empty() {
            self.ensure_tick(now, kernel);
        }
    }
}
