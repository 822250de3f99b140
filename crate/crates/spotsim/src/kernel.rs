//! Deterministic discrete-event simulation kernel: virtual clock, priority
//! event queue, and dispatch in strict `(fire_time, seq)` order.
//!
//! The kernel is policy-agnostic and RNG-free. Ties at the same fire time are
//! broken by insertion sequence, so whoever schedules first fires first.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use thiserror::Error;

use crate::{InstanceId, JobId, TypeId};

/// Simulation time in whole seconds since the simulation epoch.
///
/// One-second resolution keeps hourly billing boundaries exact; the clock
/// never decreases during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

/// Seconds per billing hour.
pub const HOUR: u64 = 3600;

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn secs(self) -> u64 {
        self.0
    }

    pub fn plus(self, seconds: u64) -> SimTime {
        SimTime(self.0 + seconds)
    }

    /// Seconds elapsed since `earlier`. Panics if `earlier` is in the future.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0
            .checked_sub(earlier.0)
            .expect("SimTime::since: earlier is in the future")
    }

    pub fn saturating_since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl std::fmt::Display for SimTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Handle to a scheduled event, usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    /// Scheduling an event before the current clock signals a policy bug.
    #[error("event scheduled in the past: fire_time {fire} < clock {clock}")]
    EventInPast { fire: SimTime, clock: SimTime },
}

/// A dispatched event: fire time, sequence number, and payload.
#[derive(Debug, Clone, Copy)]
pub struct SimEvent<E> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: E,
}

/// Labels used for the optional `time,seq,kind,payload` event log.
pub trait EventLabel {
    fn kind_label(&self) -> &'static str;
    fn payload_label(&self) -> String;
}

/// The event vocabulary of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    JobSubmission(JobId),
    ScheduleTick,
    Correction(JobId),
    JobCompletion(JobId),
    PriceChange { type_id: TypeId, point: usize },
    HourBoundary(InstanceId),
    InstanceReady(InstanceId),
    PostponeExpiry(JobId),
}

impl EventLabel for EventKind {
    fn kind_label(&self) -> &'static str {
        match self {
            EventKind::JobSubmission(_) => "job_submission",
            EventKind::ScheduleTick => "schedule_tick",
            EventKind::Correction(_) => "correction",
            EventKind::JobCompletion(_) => "job_completion",
            EventKind::PriceChange { .. } => "price_change",
            EventKind::HourBoundary(_) => "hour_boundary",
            EventKind::InstanceReady(_) => "instance_ready",
            EventKind::PostponeExpiry(_) => "postpone_expiry",
        }
    }

    fn payload_label(&self) -> String {
        match self {
            EventKind::JobSubmission(j)
            | EventKind::Correction(j)
            | EventKind::JobCompletion(j)
            | EventKind::PostponeExpiry(j) => format!("job:{j}"),
            EventKind::ScheduleTick => "-".to_string(),
            EventKind::PriceChange { type_id, .. } => format!("type:{type_id}"),
            EventKind::HourBoundary(i) | EventKind::InstanceReady(i) => format!("instance:{i}"),
        }
    }
}

struct Queued<E> {
    fire: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire == other.fire && self.seq == other.seq
    }
}
impl<E> Eq for Queued<E> {}
impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest (fire, seq).
        (other.fire, other.seq).cmp(&(self.fire, self.seq))
    }
}

/// The event queue and virtual clock for one simulation run.
///
/// Cancellation is lazy: cancelled entries stay in the heap and are skipped
/// at pop time, so `cancel` is O(1) and never perturbs dispatch order.
pub struct Kernel<E> {
    clock: SimTime,
    heap: BinaryHeap<Queued<E>>,
    pending: HashSet<u64>,
    next_seq: u64,
    dispatched: u64,
    log: Option<Vec<String>>,
}

impl<E> Kernel<E> {
    pub fn new() -> Self {
        Kernel {
            clock: SimTime::ZERO,
            heap: BinaryHeap::new(),
            pending: HashSet::new(),
            next_seq: 0,
            dispatched: 0,
            log: None,
        }
    }

    /// Enables the per-event CSV log (`time,seq,kind,payload`).
    pub fn enable_log(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn take_log(&mut self) -> Vec<String> {
        self.log.take().unwrap_or_default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn pending_events(&self) -> usize {
        self.pending.len()
    }

    pub fn events_dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Enqueues an event; rejects fire times before the current clock.
    pub fn schedule(&mut self, fire: SimTime, payload: E) -> Result<EventHandle, KernelError> {
        if fire < self.clock {
            return Err(KernelError::EventInPast {
                fire,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq);
        self.heap.push(Queued { fire, seq, payload });
        Ok(EventHandle(seq))
    }

    /// Removes a pending event. Returns false if it already fired or was
    /// already cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.pending.remove(&handle.0)
    }
}

impl<E: EventLabel> Kernel<E> {
    /// Pops and dispatches the next live event with `fire_time <= t_end`,
    /// advancing the clock to its fire time.
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<SimEvent<E>> {
        loop {
            match self.heap.peek() {
                Some(q) if q.fire <= t_end => {}
                _ => return None,
            }
            let q = self.heap.pop().unwrap();
            if !self.pending.remove(&q.seq) {
                continue; // cancelled; never dispatched
            }
            debug_assert!(q.fire >= self.clock, "clock must never decrease");
            self.clock = q.fire;
            self.dispatched += 1;
            if let Some(log) = &mut self.log {
                log.push(format!(
                    "{},{},{},{}",
                    q.fire,
                    q.seq,
                    q.payload.kind_label(),
                    q.payload.payload_label()
                ));
            }
            return Some(SimEvent {
                time: q.fire,
                seq: q.seq,
                payload: q.payload,
            });
        }
    }

    /// Dispatches every event with `fire_time <= t_end` through `handler`,
    /// in `(fire_time, seq)` order. Returns the number dispatched.
    ///
    /// If events remain beyond `t_end` the clock lands on `t_end`; if the
    /// queue drained, it stays at the last dispatched fire time.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Kernel<E>, SimEvent<E>),
    {
        if t_end < self.clock {
            return 0;
        }
        let mut count = 0;
        while let Some(ev) = self.pop_due(t_end) {
            handler(self, ev);
            count += 1;
        }
        if !self.heap.is_empty() {
            self.clock = self.clock.max(t_end);
        }
        count
    }
}

impl<E> Default for Kernel<E> {
    fn default() -> Self {
        Self::new()
    }
}
