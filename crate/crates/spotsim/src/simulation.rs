//! Event wiring for one full simulation run: submissions, ticks, price
//! changes, hour boundaries, completions, corrections, and postpone expiries
//! dispatched through the kernel into the broker and the cloud manager.

use thiserror::Error;

use crate::analytics::RunAccounting;
use crate::broker::{Broker, BrokerError};
use crate::kernel::{EventKind, Kernel, KernelError, SimTime};
use crate::market::{CloudManager, MarketError, TerminationInitiator};
use crate::workload::{Job, JobState, JobTable};
use crate::{InstanceId, TypeId};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("run exceeded horizon {horizon}s with {unfinished} unfinished jobs")]
    HorizonExceeded { horizon: SimTime, unfinished: u64 },
    #[error("event queue drained with {unfinished} unfinished jobs")]
    Stalled { unfinished: u64 },
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Liveness guard: the run fails if jobs are still unfinished past this.
    pub horizon: SimTime,
    /// Collect the `time,seq,kind,payload` event log.
    pub log_events: bool,
    /// Re-check job-conservation invariants after every event (test runs).
    pub check_invariants: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            horizon: SimTime(u64::MAX / 4),
            log_events: false,
            check_invariants: false,
        }
    }
}

/// One simulation run: kernel, market, broker, job table, and accounting.
pub struct Simulation {
    pub kernel: Kernel<EventKind>,
    pub market: CloudManager,
    pub broker: Broker,
    pub jobs: JobTable,
    pub acct: RunAccounting,
    options: RunOptions,
}

impl Simulation {
    /// Prepares a run: seeds the submission events (in table order) and the
    /// price-change chains (one per type, lazily advanced point by point).
    pub fn new(
        market: CloudManager,
        broker: Broker,
        jobs: Vec<Job>,
        options: RunOptions,
    ) -> Result<Simulation, SimulationError> {
        let mut kernel = Kernel::new();
        if options.log_events {
            kernel.enable_log();
        }
        for job in &jobs {
            kernel.schedule(job.submit_time, EventKind::JobSubmission(job.id))?;
        }
        for ty in market.catalog() {
            let points = market.trace(ty.id).points();
            if let Some(point) = points.iter().position(|(t, _)| *t > 0) {
                kernel.schedule(
                    SimTime(points[point].0),
                    EventKind::PriceChange {
                        type_id: ty.id,
                        point,
                    },
                )?;
            }
        }
        let acct = RunAccounting::new(market.catalog().len());
        Ok(Simulation {
            kernel,
            market,
            broker,
            jobs: JobTable::from_jobs(jobs),
            acct,
            options,
        })
    }

    fn jobs_done(&self) -> bool {
        self.acct.completed as usize == self.jobs.len()
    }

    /// Runs to completion: all jobs completed and all instances terminated.
    pub fn run(&mut self) -> Result<(), SimulationError> {
        loop {
            if self.jobs_done() && self.market.live_count() == 0 {
                return Ok(());
            }
            let Some(ev) = self.kernel.pop_due(SimTime(u64::MAX)) else {
                return Err(SimulationError::Stalled {
                    unfinished: self.jobs.len() as u64 - self.acct.completed,
                });
            };
            if ev.time > self.options.horizon && !self.jobs_done() {
                return Err(SimulationError::HorizonExceeded {
                    horizon: self.options.horizon,
                    unfinished: self.jobs.len() as u64 - self.acct.completed,
                });
            }
            self.dispatch(ev.time, ev.payload)?;
            if self.options.check_invariants {
                self.assert_invariants();
            }
        }
    }

    fn dispatch(&mut self, now: SimTime, kind: EventKind) -> Result<(), SimulationError> {
        match kind {
            EventKind::JobSubmission(id) => {
                self.broker
                    .submit(id, now, &mut self.jobs, &mut self.kernel, &mut self.acct)?;
            }
            EventKind::ScheduleTick => {
                self.broker.schedule_tick(
                    now,
                    &mut self.market,
                    &mut self.jobs,
                    &mut self.kernel,
                    &mut self.acct,
                );
            }
            EventKind::Correction(id) => {
                self.broker.on_correction(
                    id,
                    now,
                    &mut self.market,
                    &mut self.jobs,
                    &mut self.kernel,
                    &mut self.acct,
                );
            }
            EventKind::JobCompletion(id) => {
                self.broker.on_job_completion(
                    id,
                    now,
                    &mut self.market,
                    &mut self.jobs,
                    &mut self.kernel,
                    &mut self.acct,
                );
            }
            EventKind::PriceChange { type_id, point } => {
                self.handle_price_change(type_id, point, now)?;
            }
            EventKind::HourBoundary(id) => self.handle_hour_boundary(id, now)?,
            EventKind::InstanceReady(id) => {
                self.broker.on_instance_ready(
                    id,
                    now,
                    &mut self.market,
                    &mut self.jobs,
                    &mut self.kernel,
                    &mut self.acct,
                );
            }
            EventKind::PostponeExpiry(id) => {
                self.broker
                    .on_postpone_expiry(id, now, &mut self.jobs, &mut self.kernel);
            }
        }
        Ok(())
    }

    fn handle_price_change(
        &mut self,
        type_id: TypeId,
        point: usize,
        now: SimTime,
    ) -> Result<(), SimulationError> {
        let points = self.market.trace(type_id).points();
        let (at, price) = points[point];
        debug_assert_eq!(SimTime(at), now, "price point fired off-schedule");
        let has_next = point + 1 < points.len();
        let next_at = has_next.then(|| points[point + 1].0);
        let reclaimed = self.market.apply_price_change(type_id, price, now);
        for r in &reclaimed {
            self.broker.on_instance_failure(
                r,
                now,
                &mut self.market,
                &mut self.jobs,
                &mut self.kernel,
                &mut self.acct,
            );
        }
        if let Some(next_at) = next_at {
            self.kernel.schedule(
                SimTime(next_at),
                EventKind::PriceChange {
                    type_id,
                    point: point + 1,
                },
            )?;
        }
        Ok(())
    }

    fn handle_hour_boundary(
        &mut self,
        id: InstanceId,
        now: SimTime,
    ) -> Result<(), SimulationError> {
        use crate::market::HourOutcome;
        match self.market.hour_boundary(id, now)? {
            HourOutcome::Extended { next_boundary } => {
                self.kernel
                    .schedule(next_boundary, EventKind::HourBoundary(id))?;
            }
            HourOutcome::TerminatedIdle { .. } => {
                self.acct.record_instance(
                    self.market.instance(id),
                    now,
                    TerminationInitiator::Client,
                );
            }
            HourOutcome::Stale => {}
        }
        Ok(())
    }

    /// Job conservation and assignment sanity, checked after every event in
    /// invariant-checking runs.
    pub fn assert_invariants(&self) {
        let mut queued = 0u64;
        let mut running = 0u64;
        let mut postponed = 0u64;
        for job in self.jobs.iter() {
            match job.state {
                JobState::Queued => queued += 1,
                JobState::Running => running += 1,
                JobState::Postponed => postponed += 1,
                _ => {}
            }
        }
        let in_lists =
            self.broker.unscheduled().len() as u64 + self.broker.postponed().len() as u64;
        assert_eq!(
            in_lists + queued + running + self.acct.completed,
            self.acct.submitted,
            "job conservation violated"
        );
        assert_eq!(
            postponed,
            self.broker.postponed().len() as u64,
            "postponed list out of sync"
        );
        for inst in self.market.live_instances() {
            if let Some(j) = inst.running_job {
                assert_eq!(self.jobs.get(j).state, JobState::Running);
                assert_eq!(self.jobs.get(j).assigned_instance, Some(inst.id));
            }
            for &j in &inst.queue {
                assert_eq!(self.jobs.get(j).state, JobState::Queued);
                assert_eq!(self.jobs.get(j).assigned_instance, Some(inst.id));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{BidPolicy, BrokerConfig};
    use crate::estimation::EstimationMethod;
    use crate::market::{default_catalog, PriceTrace};
    use crate::money::Money;
    use crate::speedup::ParallelismProfile;
    use crate::workload::Job;
    use crate::JobId;

    fn constant_market(price: &str) -> CloudManager {
        let catalog = default_catalog();
        let traces = catalog
            .iter()
            .map(|ty| {
                PriceTrace::new(vec![(0, Money::parse_dollars(price).unwrap())], &ty.name).unwrap()
            })
            .collect();
        CloudManager::new(catalog, traces, 0).unwrap()
    }

    fn seq_job(id: usize, submit: u64, base: u64, slack_factor: u64) -> Job {
        Job::new(
            JobId(id),
            id as u64,
            id as u64 % 3,
            SimTime(submit),
            base,
            base,
            SimTime(submit + base * slack_factor),
            ParallelismProfile::sequential(),
        )
    }

    fn run_simple(jobs: Vec<Job>, method: EstimationMethod) -> Simulation {
        let config = BrokerConfig {
            method,
            ..BrokerConfig::default()
        };
        let mut sim = Simulation::new(
            constant_market("0.05"),
            Broker::new(config, 7),
            jobs,
            RunOptions {
                check_invariants: true,
                log_events: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        sim.run().unwrap();
        sim
    }

    #[test]
    fn single_job_runs_and_instance_is_billed() {
        let sim = run_simple(vec![seq_job(0, 0, 600, 4)], EstimationMethod::ActualRuntime);
        assert_eq!(sim.acct.completed, 1);
        assert_eq!(sim.acct.misses, 0);
        assert_eq!(sim.acct.instances_launched, 1);
        // one hour of the cheapest type at $0.05
        assert_eq!(sim.acct.total_cost, Money::parse_dollars("0.05").unwrap());
        assert_eq!(sim.market.revenue(), sim.acct.total_cost);
    }

    #[test]
    fn staggered_jobs_reuse_the_idle_instance_for_free() {
        // Each job arrives after the previous one finished; the flagged-idle
        // instance still has paid time left, so all three ride one hour.
        let jobs = vec![
            seq_job(0, 0, 600, 10),
            seq_job(1, 700, 600, 10),
            seq_job(2, 1400, 600, 10),
        ];
        let sim = run_simple(jobs, EstimationMethod::ActualRuntime);
        assert_eq!(sim.acct.completed, 3);
        assert_eq!(sim.acct.misses, 0);
        assert_eq!(sim.acct.instances_launched, 1);
        assert_eq!(sim.acct.total_cost, Money::parse_dollars("0.05").unwrap());
    }

    #[test]
    fn exact_estimates_produce_no_corrections_or_misses() {
        let jobs: Vec<Job> = (0..40)
            .map(|i| seq_job(i, (i as u64) * 45, 300 + (i as u64 % 5) * 200, 3))
            .collect();
        let sim = run_simple(jobs, EstimationMethod::ActualRuntime);
        assert_eq!(sim.acct.completed, 40);
        assert_eq!(sim.acct.corrections, 0);
        assert_eq!(sim.acct.misses, 0);
        assert_eq!(sim.acct.failures, 0);
    }

    #[test]
    fn identical_runs_replay_byte_identical_event_logs() {
        let jobs = || {
            (0..25)
                .map(|i| seq_job(i, (i as u64) * 30, 200 + (i as u64 % 7) * 311, 3))
                .collect::<Vec<Job>>()
        };
        let mut a = run_simple(jobs(), EstimationMethod::UserSupplied);
        let mut b = run_simple(jobs(), EstimationMethod::UserSupplied);
        let log_a = a.kernel.take_log();
        let log_b = b.kernel.take_log();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn provider_reclaim_resubmits_and_job_still_completes() {
        // Spot price spikes above the bid mid-run, reclaiming the instance;
        // it drops again so the resubmitted job finishes on a fresh lease.
        let catalog = default_catalog();
        let cheap = Money::parse_dollars("0.05").unwrap();
        let spike = Money::parse_dollars("10.0").unwrap();
        let traces = catalog
            .iter()
            .map(|ty| {
                PriceTrace::new(vec![(0, cheap), (600, spike), (1200, cheap)], &ty.name).unwrap()
            })
            .collect();
        let market = CloudManager::new(catalog, traces, 0).unwrap();
        let config = BrokerConfig {
            method: EstimationMethod::ActualRuntime,
            bid_policy: BidPolicy::OnDemandPrice,
            ..BrokerConfig::default()
        };
        // 3000s job with a deadline tight enough to start before the spike:
        // postponed briefly, starts ~t=320, reclaimed at 600, denied while
        // the price exceeds the bid, then reruns from 1200 (missing its
        // deadline but still completing).
        let job = Job::new(
            JobId(0),
            0,
            0,
            SimTime(0),
            3000,
            3000,
            SimTime(3320),
            ParallelismProfile::sequential(),
        );
        let mut sim = Simulation::new(
            market,
            Broker::new(config, 7),
            vec![job],
            RunOptions {
                check_invariants: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        sim.run().unwrap();
        assert_eq!(sim.acct.failures, 1);
        assert_eq!(sim.acct.completed, 1);
        assert_eq!(sim.acct.misses, 1);
        assert_eq!(sim.jobs.get(JobId(0)).resubmissions, 1);
        // the reclaimed partial hour was free
        let first = sim.market.instance(InstanceId(0));
        assert_eq!(first.final_charge, Some(Money::ZERO));
        // full restart: no checkpointing, so the work was redone in full
        let done = sim.jobs.get(JobId(0)).completion_time.unwrap();
        assert_eq!(done, sim.jobs.get(JobId(0)).started_at.unwrap().plus(3000));
    }

    #[test]
    fn postponed_job_is_matched_to_an_idle_instance_early() {
        use crate::broker::DecisionKind;
        // jB has huge slack and is postponed for hours; jA has tight slack,
        // leases an instance, and finishes at 630, flagging it idle. The
        // idle-matching pass then gives jB the already-paid capacity at the
        // 640 tick, far before jB's postponement would have expired.
        let jb = seq_job(0, 0, 600, 33); // deadline 19800
        let ja = Job::new(
            JobId(1),
            1,
            1,
            SimTime(20),
            600,
            600,
            SimTime(645),
            ParallelismProfile::sequential(),
        );
        let config = BrokerConfig {
            method: EstimationMethod::ActualRuntime,
            ..BrokerConfig::default()
        };
        let mut sim = Simulation::new(
            constant_market("0.05"),
            Broker::new(config, 7),
            vec![jb, ja],
            RunOptions {
                check_invariants: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        sim.run().unwrap();
        assert_eq!(sim.acct.completed, 2);
        assert_eq!(sim.acct.misses, 0);
        assert_eq!(
            sim.acct.instances_launched, 1,
            "jB must reuse jA's instance"
        );
        assert_eq!(sim.acct.total_cost, Money::parse_dollars("0.05").unwrap());
        let jb_decisions: Vec<_> = sim
            .broker
            .decisions
            .iter()
            .filter(|d| d.job == JobId(0))
            .collect();
        assert_eq!(jb_decisions[0].kind, DecisionKind::Postponed);
        assert_eq!(jb_decisions[1].kind, DecisionKind::FreeSpace);
        assert_eq!(jb_decisions[1].time, SimTime(640));
        assert_eq!(sim.jobs.get(JobId(0)).completion_time, Some(SimTime(1240)));
    }

    #[test]
    fn duplicate_submission_errors() {
        let mut sim = Simulation::new(
            constant_market("0.05"),
            Broker::new(BrokerConfig::default(), 1),
            vec![seq_job(0, 0, 100, 4)],
            RunOptions::default(),
        )
        .unwrap();
        sim.broker
            .submit(
                JobId(0),
                SimTime(0),
                &mut sim.jobs,
                &mut sim.kernel,
                &mut sim.acct,
            )
            .unwrap();
        let err = sim
            .broker
            .submit(
                JobId(0),
                SimTime(0),
                &mut sim.jobs,
                &mut sim.kernel,
                &mut sim.acct,
            )
            .unwrap_err();
        assert_eq!(err, BrokerError::DuplicateJob(JobId(0)));
    }
}
