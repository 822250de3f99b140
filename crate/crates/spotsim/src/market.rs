//! Provider-side model: spot price traces, bid-based admission, out-of-bid
//! termination, and hourly billing.
//!
//! Billing rules follow the spot-market model: each instance-hour is charged
//! at the spot price in effect when that hour began, hours are measured from
//! each instance's lease start, the last partial hour is charged only when
//! the client initiates the termination (a partial hour costs the same as a
//! full one), and it is free when the provider reclaims the instance.

use std::collections::{BTreeMap, VecDeque};
use std::io::Read;

use thiserror::Error;

use crate::kernel::{SimTime, HOUR};
use crate::money::{Money, MoneyError};
use crate::{InstanceId, JobId, TypeId};

/// A VM size: name, compute units, and fixed on-demand hourly price.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceType {
    pub id: TypeId,
    pub name: String,
    pub ecus: u32,
    pub ondemand_price: Money,
}

/// The five standard and high-CPU types used throughout, with their 2010-era
/// on-demand prices.
pub fn default_catalog() -> Vec<InstanceType> {
    let spec: [(&str, u32, &str); 5] = [
        ("m1.small", 1, "0.085"),
        ("m1.large", 5, "0.34"),
        ("m1.xlarge", 8, "0.68"),
        ("c1.medium", 5, "0.17"),
        ("c1.xlarge", 20, "0.68"),
    ];
    spec.iter()
        .enumerate()
        .map(|(i, (name, ecus, price))| InstanceType {
            id: TypeId(i),
            name: name.to_string(),
            ecus: *ecus,
            ondemand_price: Money::parse_dollars(price).unwrap(),
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("price trace record {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("price trace record {line}: non-positive price {price}")]
    NonPositivePrice { line: usize, price: String },
    #[error("duplicate trace timestamp {at} for type {type_name}")]
    DuplicateTimestamp { type_name: String, at: u64 },
    #[error("price trace for {0} is empty")]
    EmptyTrace(String),
    #[error("no price trace for instance type {0}")]
    MissingTrace(String),
    #[error("price queried at {at} before first trace point {first}")]
    QueryBeforeTrace { at: SimTime, first: SimTime },
    #[error("trace origin {origin} precedes first trace point {first}")]
    OriginBeforeTrace { origin: u64, first: u64 },
    #[error("instance {0} already terminated")]
    AlreadyTerminated(InstanceId),
    #[error("invalid instance catalog: {0}")]
    BadCatalog(String),
    #[error(transparent)]
    Money(#[from] MoneyError),
    #[error("i/o error reading price trace: {0}")]
    Io(#[from] std::io::Error),
}

/// Time-ordered step function of spot prices: the price at `t` is the price
/// of the latest point at or before `t`, extending to infinity on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTrace {
    points: Vec<(u64, Money)>,
}

impl PriceTrace {
    /// Builds a trace from `(time, price)` points. Points may arrive
    /// unsorted; duplicates and non-positive prices are rejected.
    pub fn new(mut points: Vec<(u64, Money)>, type_name: &str) -> Result<PriceTrace, MarketError> {
        if points.is_empty() {
            return Err(MarketError::EmptyTrace(type_name.to_string()));
        }
        points.sort_by_key(|(t, _)| *t);
        for pair in points.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(MarketError::DuplicateTimestamp {
                    type_name: type_name.to_string(),
                    at: pair[0].0,
                });
            }
        }
        if let Some((_, p)) = points.iter().find(|(_, p)| !p.is_positive()) {
            return Err(MarketError::NonPositivePrice {
                line: 0,
                price: p.fmt_dollars(),
            });
        }
        Ok(PriceTrace { points })
    }

    pub fn points(&self) -> &[(u64, Money)] {
        &self.points
    }

    pub fn first_time(&self) -> u64 {
        self.points[0].0
    }

    pub fn last_time(&self) -> u64 {
        self.points[self.points.len() - 1].0
    }

    /// Latest price at or before `t`.
    pub fn price_at(&self, t: u64) -> Result<Money, MarketError> {
        if t < self.points[0].0 {
            return Err(MarketError::QueryBeforeTrace {
                at: SimTime(t),
                first: SimTime(self.points[0].0),
            });
        }
        let idx = self.points.partition_point(|(pt, _)| *pt <= t);
        Ok(self.points[idx - 1].1)
    }

    /// Re-bases the trace so absolute time `origin` becomes sim time 0.
    /// The price in effect at the origin becomes the point at time 0.
    pub fn shift_origin(&self, origin: u64, type_name: &str) -> Result<PriceTrace, MarketError> {
        if origin < self.points[0].0 {
            return Err(MarketError::OriginBeforeTrace {
                origin,
                first: self.points[0].0,
            });
        }
        let anchor = self.price_at(origin).expect("origin is covered");
        let mut shifted = vec![(0u64, anchor)];
        shifted.extend(
            self.points
                .iter()
                .filter(|(t, _)| *t > origin)
                .map(|(t, p)| (t - origin, *p)),
        );
        PriceTrace::new(shifted, type_name)
    }
}

/// Parses a price trace CSV with header `timestamp,instance_type,price` into
/// one trace per instance type. Timestamps are integer epoch seconds or
/// RFC 3339; prices are decimal dollars per hour.
pub fn load_price_traces<R: Read>(reader: R) -> Result<BTreeMap<String, PriceTrace>, MarketError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut per_type: BTreeMap<String, Vec<(u64, Money)>> = BTreeMap::new();
    for (idx, record) in csv_reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| MarketError::MalformedRecord {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(MarketError::MalformedRecord {
                line,
                reason: format!("expected 3 columns, found {}", record.len()),
            });
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| MarketError::MalformedRecord {
            line,
            reason: format!("bad timestamp {:?}", &record[0]),
        })?;
        let type_name = record[1].to_string();
        let price = Money::parse_dollars(&record[2])?;
        if !price.is_positive() {
            return Err(MarketError::NonPositivePrice {
                line,
                price: price.fmt_dollars(),
            });
        }
        per_type.entry(type_name).or_default().push((ts, price));
    }
    per_type
        .into_iter()
        .map(|(name, points)| PriceTrace::new(points, &name).map(|t| (name, t)))
        .collect()
}

fn parse_timestamp(s: &str) -> Option<u64> {
    if let Ok(secs) = s.parse::<u64>() {
        return Some(secs);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .and_then(|dt| u64::try_from(dt.timestamp()).ok())
}

/// Who initiated an instance termination; decides whether the last partial
/// hour is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationInitiator {
    Client,
    Provider,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Booting,
    Running,
    FlaggedIdle,
    Terminated,
}

/// A leased spot instance with its per-hour price ledger.
#[derive(Debug, Clone)]
pub struct SpotInstance {
    pub id: InstanceId,
    pub type_id: TypeId,
    pub bid: Money,
    pub lease_start: SimTime,
    pub ready_at: SimTime,
    /// Price locked at the start of each elapsed hour, in order.
    pub hour_prices: Vec<Money>,
    /// Sum of `hour_prices`; what the client owes if it terminates now.
    pub accrued_charge: Money,
    pub state: InstanceState,
    pub running_job: Option<JobId>,
    pub queue: VecDeque<JobId>,
    /// Seconds this instance spent executing jobs.
    pub busy_seconds: u64,
    pub terminated_at: Option<SimTime>,
    pub final_charge: Option<Money>,
}

impl SpotInstance {
    pub fn is_live(&self) -> bool {
        self.state != InstanceState::Terminated
    }

    /// End of the last locked (started) hour: `lease_start + hours * 3600`.
    pub fn paid_until(&self) -> SimTime {
        self.lease_start.plus(self.hour_prices.len() as u64 * HOUR)
    }

    /// Charge for the lease `[lease_start, end]` under the billing rules:
    /// every fully elapsed hour at its locked price, plus the last partial
    /// hour (at its locked price) iff the client initiated the termination.
    pub fn charge_until(&self, end: SimTime, initiator: TerminationInitiator) -> Money {
        let elapsed = end.since(self.lease_start);
        let full_hours = (elapsed / HOUR) as usize;
        let has_partial = !elapsed.is_multiple_of(HOUR);
        let mut charge: Money = self.hour_prices.iter().take(full_hours).copied().sum();
        if has_partial && initiator == TerminationInitiator::Client {
            charge += *self
                .hour_prices
                .get(full_hours)
                .expect("partial hour must have a locked price");
        }
        charge
    }
}

/// A provider-side termination caused by an out-of-bid price change, with
/// the work the broker must recover.
#[derive(Debug, Clone)]
pub struct ReclaimedInstance {
    pub id: InstanceId,
    pub running_job: Option<JobId>,
    pub queued_jobs: Vec<JobId>,
    pub charge: Money,
}

/// Outcome of an instance request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestOutcome {
    Granted {
        id: InstanceId,
        ready_at: SimTime,
        first_hour_boundary: SimTime,
    },
    Denied,
}

/// Outcome of an hour-boundary check on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HourOutcome {
    /// Instance had work; the new hour's price is locked and charged.
    Extended { next_boundary: SimTime },
    /// Instance was flagged idle; terminated client-side at the boundary.
    TerminatedIdle { charge: Money },
    /// Instance already terminated; stale event.
    Stale,
}

/// The provider ("cloud manager"): admission control on bids, spot instance
/// lifecycle, and billing. Capacity is unbounded.
pub struct CloudManager {
    catalog: Vec<InstanceType>,
    traces: Vec<PriceTrace>,
    boot_delay: u64,
    instances: Vec<SpotInstance>,
    revenue: Money,
}

impl CloudManager {
    /// `traces` must carry one entry per catalog type, on the simulation time
    /// axis (time 0 covered).
    pub fn new(
        catalog: Vec<InstanceType>,
        traces: Vec<PriceTrace>,
        boot_delay: u64,
    ) -> Result<CloudManager, MarketError> {
        if catalog.is_empty() {
            return Err(MarketError::BadCatalog("no instance types".into()));
        }
        for (i, ty) in catalog.iter().enumerate() {
            if ty.id != TypeId(i) {
                return Err(MarketError::BadCatalog(format!(
                    "type {} has id {:?}, expected {:?}",
                    ty.name,
                    ty.id,
                    TypeId(i)
                )));
            }
            if ty.ecus < 1 {
                return Err(MarketError::BadCatalog(format!(
                    "type {} has zero ecus",
                    ty.name
                )));
            }
            if !ty.ondemand_price.is_positive() {
                return Err(MarketError::BadCatalog(format!(
                    "type {} has non-positive on-demand price",
                    ty.name
                )));
            }
        }
        if traces.len() != catalog.len() {
            return Err(MarketError::MissingTrace(format!(
                "expected {} traces, got {}",
                catalog.len(),
                traces.len()
            )));
        }
        for trace in &traces {
            if trace.first_time() > 0 {
                return Err(MarketError::QueryBeforeTrace {
                    at: SimTime(0),
                    first: SimTime(trace.first_time()),
                });
            }
        }
        Ok(CloudManager {
            catalog,
            traces,
            boot_delay,
            instances: Vec::new(),
            revenue: Money::ZERO,
        })
    }

    pub fn catalog(&self) -> &[InstanceType] {
        &self.catalog
    }

    pub fn instance_type(&self, id: TypeId) -> &InstanceType {
        &self.catalog[id.0]
    }

    pub fn trace(&self, id: TypeId) -> &PriceTrace {
        &self.traces[id.0]
    }

    pub fn boot_delay(&self) -> u64 {
        self.boot_delay
    }

    /// Total of all finalized instance charges.
    pub fn revenue(&self) -> Money {
        self.revenue
    }

    pub fn instance(&self, id: InstanceId) -> &SpotInstance {
        &self.instances[id.0]
    }

    pub fn instance_mut(&mut self, id: InstanceId) -> &mut SpotInstance {
        &mut self.instances[id.0]
    }

    pub fn instances(&self) -> &[SpotInstance] {
        &self.instances
    }

    /// Live instances in creation order (deterministic).
    pub fn live_instances(&self) -> impl Iterator<Item = &SpotInstance> {
        self.instances.iter().filter(|i| i.is_live())
    }

    pub fn live_count(&self) -> usize {
        self.instances.iter().filter(|i| i.is_live()).count()
    }

    /// Spot price of a type at time `t`.
    pub fn current_price(&self, ty: TypeId, t: SimTime) -> Result<Money, MarketError> {
        self.traces[ty.0].price_at(t.secs())
    }

    /// Grants a spot instance iff the bid is strictly greater than the
    /// current price. The first hour's price is locked immediately.
    pub fn request_instance(
        &mut self,
        ty: TypeId,
        bid: Money,
        now: SimTime,
    ) -> Result<RequestOutcome, MarketError> {
        let price = self.current_price(ty, now)?;
        if bid <= price {
            return Ok(RequestOutcome::Denied);
        }
        let id = InstanceId(self.instances.len());
        self.instances.push(SpotInstance {
            id,
            type_id: ty,
            bid,
            lease_start: now,
            ready_at: now.plus(self.boot_delay),
            hour_prices: vec![price],
            accrued_charge: price,
            state: InstanceState::Booting,
            running_job: None,
            queue: VecDeque::new(),
            busy_seconds: 0,
            terminated_at: None,
            final_charge: None,
        });
        Ok(RequestOutcome::Granted {
            id,
            ready_at: now.plus(self.boot_delay),
            first_hour_boundary: now.plus(HOUR),
        })
    }

    /// Applies a trace point that just became effective: every live instance
    /// of the type whose bid is less than or equal to the new price is
    /// reclaimed immediately, its partial hour uncharged.
    pub fn apply_price_change(
        &mut self,
        ty: TypeId,
        new_price: Money,
        now: SimTime,
    ) -> Vec<ReclaimedInstance> {
        let ids: Vec<InstanceId> = self
            .instances
            .iter()
            .filter(|i| i.is_live() && i.type_id == ty && i.bid <= new_price)
            .map(|i| i.id)
            .collect();
        ids.into_iter()
            .map(|id| {
                let (running_job, queued_jobs) = {
                    let inst = &mut self.instances[id.0];
                    (inst.running_job.take(), inst.queue.drain(..).collect())
                };
                let charge = self
                    .terminate(id, now, TerminationInitiator::Provider)
                    .expect("instance was live");
                ReclaimedInstance {
                    id,
                    running_job,
                    queued_jobs,
                    charge,
                }
            })
            .collect()
    }

    /// Handles an instance's hour boundary: flagged-idle instances terminate
    /// client-side exactly at the boundary (no new hour starts); instances
    /// with work lock and owe the new hour at the current spot price.
    pub fn hour_boundary(
        &mut self,
        id: InstanceId,
        now: SimTime,
    ) -> Result<HourOutcome, MarketError> {
        let inst = &self.instances[id.0];
        match inst.state {
            InstanceState::Terminated => Ok(HourOutcome::Stale),
            InstanceState::FlaggedIdle => {
                debug_assert_eq!(inst.paid_until(), now, "idle termination off-boundary");
                let charge = self.terminate(id, now, TerminationInitiator::Client)?;
                Ok(HourOutcome::TerminatedIdle { charge })
            }
            InstanceState::Booting | InstanceState::Running => {
                debug_assert_eq!(inst.paid_until(), now, "hour lock off-boundary");
                let price = self.current_price(inst.type_id, now)?;
                let inst = &mut self.instances[id.0];
                inst.hour_prices.push(price);
                inst.accrued_charge += price;
                Ok(HourOutcome::Extended {
                    next_boundary: now.plus(HOUR),
                })
            }
        }
    }

    /// Finalizes an instance: computes the charge for the lease under the
    /// billing rules and records it as revenue.
    pub fn terminate(
        &mut self,
        id: InstanceId,
        now: SimTime,
        initiator: TerminationInitiator,
    ) -> Result<Money, MarketError> {
        let inst = &mut self.instances[id.0];
        if !inst.is_live() {
            return Err(MarketError::AlreadyTerminated(id));
        }
        let charge = inst.charge_until(now, initiator);
        inst.state = InstanceState::Terminated;
        inst.terminated_at = Some(now);
        inst.final_charge = Some(charge);
        self.revenue += charge;
        Ok(charge)
    }
}
