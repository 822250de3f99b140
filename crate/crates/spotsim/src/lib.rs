//! Trace-driven discrete-event simulator of a cloud spot market and a broker
//! that assembles a cost-effective virtual cluster from biddable VM instances,
//! scheduling deadline-constrained moldable jobs.
//!
//! Module map:
//! - [`kernel`]: deterministic event queue and virtual clock
//! - [`market`]: provider side — price traces, bid admission, out-of-bid
//!   termination, hourly billing
//! - [`speedup`]: Downey speedup model and parallelism profile generation
//! - [`workload`]: SWF ingestion and job augmentation
//! - [`estimation`]: runtime-estimation methods, per-user history, correction
//! - [`broker`]: provisioning and scheduling policy
//! - [`analytics`]: baselines, metric accounting, report assembly
//! - [`simulation`]: event wiring for one full run
//! - [`synthetic`]: synthetic price traces and workloads for trace-free runs
//! - [`experiment`]: configuration, replication harness, aggregation

pub mod analytics;
pub mod broker;
pub mod estimation;
pub mod experiment;
pub mod kernel;
pub mod market;
pub mod money;
pub mod simulation;
pub mod speedup;
pub mod synthetic;
pub mod workload;

pub use kernel::{EventHandle, Kernel, SimTime, HOUR};
pub use money::Money;
pub use workload::{Job, JobState};

/// Dense per-run job identifier (index into the job table).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub usize);

impl std::fmt::Display for JobId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a leased spot instance, dense per run in creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub usize);

impl std::fmt::Display for InstanceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of an instance type in the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeId(pub usize);

impl std::fmt::Display for TypeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
