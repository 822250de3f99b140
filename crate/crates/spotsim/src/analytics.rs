//! Metric accounting, baseline cost tables, and report assembly.
//!
//! The worst-case baseline bills every job independently at on-demand prices
//! on its most cost-efficient type (ceil-hour billing); the best-case
//! baseline scales that table by the spot discount factor.

use crate::kernel::{SimTime, HOUR};
use crate::market::{InstanceType, SpotInstance, TerminationInitiator};
use crate::money::Money;
use crate::speedup::runtime_on;
use crate::workload::Job;
use crate::TypeId;

fn ceil_hours(seconds: u64) -> u64 {
    seconds.div_ceil(HOUR).max(1)
}

/// The instance type minimizing this job's ceil-hour cost at the given
/// hourly prices; ties prefer the shorter runtime, then fewer ECUs.
pub fn most_efficient_type(job: &Job, catalog: &[InstanceType]) -> TypeId {
    catalog
        .iter()
        .map(|ty| {
            let rt =
                runtime_on(job.base_runtime as f64, job.profile, ty.ecus).expect("valid profile");
            let cost = ty.ondemand_price.times(ceil_hours(rt));
            (cost, rt, ty.ecus, ty.id)
        })
        .min_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)))
        .map(|(_, _, _, id)| id)
        .expect("catalog is non-empty")
}

/// One row of a baseline cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub type_id: TypeId,
    pub type_name: String,
    pub jobs: u64,
    pub job_share: f64,
    pub cost: Money,
}

/// Per-type baseline costs plus the total.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTable {
    pub rows: Vec<BaselineRow>,
    pub total: Money,
}

/// Worst-case provisioning: every job billed independently at the on-demand
/// ceil-hour price of its most efficient type.
pub fn worst_case_cost(jobs: &[Job], catalog: &[InstanceType]) -> BaselineTable {
    let mut per_type_cost = vec![Money::ZERO; catalog.len()];
    let mut per_type_jobs = vec![0u64; catalog.len()];
    for job in jobs {
        let ty = most_efficient_type(job, catalog);
        let rt = runtime_on(job.base_runtime as f64, job.profile, catalog[ty.0].ecus)
            .expect("valid profile");
        per_type_cost[ty.0] += catalog[ty.0].ondemand_price.times(ceil_hours(rt));
        per_type_jobs[ty.0] += 1;
    }
    let total_jobs: u64 = per_type_jobs.iter().sum();
    let rows = catalog
        .iter()
        .map(|ty| BaselineRow {
            type_id: ty.id,
            type_name: ty.name.clone(),
            jobs: per_type_jobs[ty.id.0],
            job_share: if total_jobs == 0 {
                0.0
            } else {
                per_type_jobs[ty.id.0] as f64 / total_jobs as f64
            },
            cost: per_type_cost[ty.id.0],
        })
        .collect();
    BaselineTable {
        rows,
        total: per_type_cost.iter().copied().sum(),
    }
}

/// Best-case provisioning: the worst-case table scaled by an exact rational
/// discount (default 1/3). Rows are rounded to micro-dollars for display;
/// the total is scaled from the worst-case total directly so the
/// worst/best ratio is the inverse discount by construction.
pub fn best_case_cost(
    worst: &BaselineTable,
    discount_num: u64,
    discount_den: u64,
) -> BaselineTable {
    assert!(
        discount_num > 0 && discount_den > 0 && discount_num <= discount_den,
        "discount must be in (0, 1]"
    );
    BaselineTable {
        rows: worst
            .rows
            .iter()
            .map(|r| BaselineRow {
                cost: r.cost.scale_ratio(discount_num, discount_den),
                type_name: r.type_name.clone(),
                ..*r
            })
            .collect(),
        total: worst.total.scale_ratio(discount_num, discount_den),
    }
}

/// Running accounting for one simulation, updated by event handlers.
#[derive(Debug, Clone)]
pub struct RunAccounting {
    pub submitted: u64,
    pub completed: u64,
    pub misses: u64,
    /// Estimate-doubling operations actually performed.
    pub corrections: u64,
    /// Provider-initiated (out-of-bid) instance terminations.
    pub failures: u64,
    /// Allocations where no type could meet the deadline.
    pub expected_misses: u64,
    pub instances_launched: u64,
    pub per_type_jobs: Vec<u64>,
    pub per_type_cost: Vec<Money>,
    pub busy_seconds: u64,
    pub leased_seconds: u64,
    pub charged_hours: u64,
    pub total_cost: Money,
}

impl RunAccounting {
    pub fn new(n_types: usize) -> RunAccounting {
        RunAccounting {
            submitted: 0,
            completed: 0,
            misses: 0,
            corrections: 0,
            failures: 0,
            expected_misses: 0,
            instances_launched: 0,
            per_type_jobs: vec![0; n_types],
            per_type_cost: vec![Money::ZERO; n_types],
            busy_seconds: 0,
            leased_seconds: 0,
            charged_hours: 0,
            total_cost: Money::ZERO,
        }
    }

    /// Folds a terminated instance into the totals.
    pub fn record_instance(
        &mut self,
        inst: &SpotInstance,
        end: SimTime,
        initiator: TerminationInitiator,
    ) {
        let charge = inst.final_charge.expect("instance is finalized");
        let elapsed = end.since(inst.lease_start);
        self.leased_seconds += elapsed;
        self.busy_seconds += inst.busy_seconds;
        self.charged_hours += match initiator {
            TerminationInitiator::Client => elapsed.div_ceil(HOUR),
            TerminationInitiator::Provider => elapsed / HOUR,
        };
        self.per_type_cost[inst.type_id.0] += charge;
        self.total_cost += charge;
    }

    pub fn record_completion(&mut self, job: &Job, type_id: TypeId) {
        self.completed += 1;
        if job.missed_deadline() {
            self.misses += 1;
        }
        self.per_type_jobs[type_id.0] += 1;
    }
}

/// Wall-clock utilization: job-execution seconds over leased seconds.
/// An empty pool is vacuously fully utilized.
pub fn utilization(busy_seconds: u64, leased_seconds: u64) -> f64 {
    if leased_seconds == 0 {
        1.0
    } else {
        busy_seconds as f64 / leased_seconds as f64
    }
}

/// The per-run metrics emitted to reports.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub total_cost: Money,
    pub deadline_misses: u64,
    pub miss_fraction: f64,
    pub utilization: f64,
    /// Utilization against charged hours instead of wall-clock lease time.
    pub utilization_charged: f64,
    pub per_type_job_share: Vec<f64>,
    pub per_type_cost: Vec<Money>,
    pub instances_launched: u64,
    pub failures: u64,
    pub corrections: u64,
    pub submitted: u64,
    pub completed: u64,
}

/// Assembles the final report from a finished run's accounting.
pub fn assemble_report(acct: &RunAccounting) -> MetricsReport {
    let ran: u64 = acct.per_type_jobs.iter().sum();
    MetricsReport {
        total_cost: acct.total_cost,
        deadline_misses: acct.misses,
        miss_fraction: if acct.submitted == 0 {
            0.0
        } else {
            acct.misses as f64 / acct.submitted as f64
        },
        utilization: utilization(acct.busy_seconds, acct.leased_seconds),
        utilization_charged: utilization(acct.busy_seconds, acct.charged_hours * HOUR),
        per_type_job_share: acct
            .per_type_jobs
            .iter()
            .map(|&n| if ran == 0 { 0.0 } else { n as f64 / ran as f64 })
            .collect(),
        per_type_cost: acct.per_type_cost.clone(),
        instances_launched: acct.instances_launched,
        failures: acct.failures,
        corrections: acct.corrections,
        submitted: acct.submitted,
        completed: acct.completed,
    }
}
