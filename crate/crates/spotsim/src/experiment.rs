//! Experiment driver: TOML configuration, the N-replication protocol with
//! randomized trace offsets, paired method comparisons, baseline tables, and
//! CSV output.
//!
//! Replication `i` derives its seed as `derive_seed(master_seed, i)`, so
//! adding replications never perturbs earlier runs, and method comparisons
//! reuse identical `(seed, offset)` sequences (a paired design).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::analytics::{
    assemble_report, best_case_cost, worst_case_cost, BaselineTable, MetricsReport,
};
use crate::broker::{BidPolicy, Broker, BrokerConfig, BrokerError};
use crate::estimation::{EstimationError, EstimationMethod};
use crate::kernel::SimTime;
use crate::market::{
    default_catalog, load_price_traces, CloudManager, InstanceType, MarketError, PriceTrace,
};
use crate::money::{Money, MoneyError};
use crate::simulation::{RunOptions, Simulation, SimulationError};
use crate::speedup::{DistSpec, ProfileGenConfig, SpeedupError};
use crate::synthetic::{
    synthetic_traces, synthetic_workload, SyntheticTraceConfig, SyntheticWorkloadConfig,
};
use crate::workload::{augment, parse_swf, scale_workload, AugmentConfig, Job, WorkloadError};
use crate::TypeId;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read config {path}: {source}")]
    ReadConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config {path}: {reason}")]
    BadConfig { path: PathBuf, reason: String },
    #[error("invalid value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("offset window start {start} must not exceed end {end}")]
    BadOffsetWindow { start: u64, end: u64 },
    #[error(
        "price trace for {type_name} ends at {trace_end} but runs starting as late as \
         {window_end} need coverage through {needed} ({deficit}s short)"
    )]
    TraceTooShort {
        type_name: String,
        trace_end: u64,
        window_end: u64,
        needed: u64,
        deficit: u64,
    },
    #[error("offset window starts at {start} before the first {type_name} trace point {first}")]
    WindowBeforeTrace {
        type_name: String,
        start: u64,
        first: u64,
    },
    #[error("no price trace found for instance type {0}")]
    MissingTrace(String),
    #[error("no estimation methods given")]
    NoMethods,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Money(#[from] MoneyError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Speedup(#[from] SpeedupError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("replication {replication}: {source}")]
    Run {
        replication: u32,
        source: SimulationError,
    },
}

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable per-replication seed: independent of the replication count, so
/// run `i` is reproducible in isolation.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ index.wrapping_mul(0x9E3779B97F4A7C15))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Swf {
        path: PathBuf,
        count: Option<usize>,
        duration: Option<u64>,
        aug: AugmentConfig,
    },
    Synthetic(SyntheticWorkloadConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    /// CSV files: an optional shared file plus per-type overrides from the
    /// catalog entries. Every type must end up with one source file.
    Files {
        shared: Option<PathBuf>,
        per_type: Vec<Option<PathBuf>>,
    },
    Synthetic(SyntheticTraceConfig),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub replications: u32,
    pub output_dir: PathBuf,
    /// Spot discount as an exact rational (numerator, denominator).
    pub discount: (u64, u64),
    pub offset_window: (u64, u64),
    pub broker: BrokerConfig,
    pub boot_delay: u64,
    pub catalog: Vec<InstanceType>,
    pub workload: WorkloadSource,
    pub traces: TraceSource,
    /// Hard cap on simulated seconds per run (liveness guard).
    pub max_sim_seconds: Option<u64>,
    pub log_events: bool,
    pub log_decisions: bool,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    master_seed: Option<u64>,
    replications: Option<u32>,
    output_dir: Option<String>,
    discount: Option<String>,
    workload: Option<RawWorkload>,
    profiles: Option<RawProfiles>,
    market: Option<RawMarket>,
    broker: Option<RawBroker>,
    experiment: Option<RawExperiment>,
    synthetic: Option<RawSynthetic>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    swf: Option<String>,
    count: Option<usize>,
    duration: Option<u64>,
    estimate_multipliers: Option<String>,
    deadline_multiplier_range: Option<String>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawProfiles {
    #[serde(rename = "A_dist")]
    a_dist: Option<String>,
    sigma_dist: Option<String>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMarket {
    boot_delay: Option<u64>,
    traces: Option<String>,
    types: Option<Vec<RawType>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawType {
    name: String,
    ecus: u32,
    ondemand_price: String,
    /// Optional per-type price trace CSV, overriding `market.traces`.
    trace: Option<String>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawBroker {
    tick_interval: Option<u64>,
    estimation_method: Option<String>,
    bid_policy: Option<String>,
    safety_margin: Option<u64>,
    correction_enabled: Option<bool>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    offset_window: Option<String>,
    max_sim_seconds: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    jobs: Option<usize>,
    duration: Option<u64>,
    users: Option<u64>,
    runtime_min: Option<u64>,
    runtime_max: Option<u64>,
    trace_step: Option<u64>,
    trace_volatility: Option<f64>,
    trace_mean_fraction: Option<f64>,
    trace_reversion: Option<f64>,
}

/// Parses a discount like `1/3`, `0.25`, or `1` into an exact rational.
pub fn parse_discount(s: &str) -> Result<(u64, u64), ExperimentError> {
    let bad = |reason: &str| ExperimentError::BadValue {
        key: "discount".into(),
        reason: format!("{reason}: {s:?}"),
    };
    let s = s.trim();
    let (num, den) = if let Some((n, d)) = s.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| bad("bad numerator"))?;
        let d: u64 = d.trim().parse().map_err(|_| bad("bad denominator"))?;
        (n, d)
    } else if let Some((whole, frac)) = s.split_once('.') {
        if !frac.bytes().all(|b| b.is_ascii_digit()) || frac.is_empty() {
            return Err(bad("bad decimal"));
        }
        let whole: u64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| bad("bad decimal"))?
        };
        let digits = frac.len() as u32;
        let den = 10u64.pow(digits.min(9));
        let frac: u64 = frac[..digits.min(9) as usize]
            .parse()
            .map_err(|_| bad("bad decimal"))?;
        (whole * den + frac, den)
    } else {
        let n: u64 = s.parse().map_err(|_| bad("not a number"))?;
        (n, 1)
    };
    if num == 0 || den == 0 || num > den {
        return Err(bad("must be in (0, 1]"));
    }
    Ok((num, den))
}

fn parse_time_point(s: &str, key: &str) -> Result<u64, ExperimentError> {
    if let Ok(secs) = s.trim().parse::<u64>() {
        return Ok(secs);
    }
    chrono::DateTime::parse_from_rfc3339(s.trim())
        .ok()
        .and_then(|dt| u64::try_from(dt.timestamp()).ok())
        .ok_or_else(|| ExperimentError::BadValue {
            key: key.into(),
            reason: format!("expected epoch seconds or RFC 3339, got {s:?}"),
        })
}

fn parse_offset_window(s: &str) -> Result<(u64, u64), ExperimentError> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| ExperimentError::BadValue {
        key: "experiment.offset_window".into(),
        reason: format!("expected start,end, got {s:?}"),
    })?;
    let start = parse_time_point(lo, "experiment.offset_window")?;
    let end = parse_time_point(hi, "experiment.offset_window")?;
    if start > end {
        return Err(ExperimentError::BadOffsetWindow { start, end });
    }
    Ok((start, end))
}

/// Loads and resolves a config file. `force_synthetic` (the `--synthetic`
/// flag) replaces both the workload and the traces with generated ones;
/// either is also synthesized automatically when its input is not configured.
pub fn load_config(
    path: &Path,
    force_synthetic: bool,
) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::ReadConfig {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| ExperimentError::BadConfig {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    resolve_config(
        raw,
        path.parent().unwrap_or(Path::new(".")),
        force_synthetic,
    )
}

fn resolve_config(
    raw: RawConfig,
    base_dir: &Path,
    force_synthetic: bool,
) -> Result<ExperimentConfig, ExperimentError> {
    let raw_workload = raw.workload.unwrap_or_default();
    let raw_profiles = raw.profiles.unwrap_or_default();
    let raw_market = raw.market.unwrap_or_default();
    let raw_broker = raw.broker.unwrap_or_default();
    let raw_experiment = raw.experiment.unwrap_or_default();
    let raw_synth = raw.synthetic.unwrap_or_default();

    let (catalog, per_type_traces): (Vec<InstanceType>, Vec<Option<PathBuf>>) =
        match raw_market.types {
            Some(types) if !types.is_empty() => {
                let mut catalog = Vec::with_capacity(types.len());
                let mut paths = Vec::with_capacity(types.len());
                for (i, t) in types.into_iter().enumerate() {
                    catalog.push(InstanceType {
                        id: TypeId(i),
                        name: t.name,
                        ecus: t.ecus,
                        ondemand_price: Money::parse_dollars(&t.ondemand_price)?,
                    });
                    paths.push(t.trace.map(|p| base_dir.join(p)));
                }
                (catalog, paths)
            }
            _ => {
                let catalog = default_catalog();
                let paths = vec![None; catalog.len()];
                (catalog, paths)
            }
        };

    let profile_gen = ProfileGenConfig {
        a_dist: match &raw_profiles.a_dist {
            Some(s) => DistSpec::parse(s)?,
            None => ProfileGenConfig::default().a_dist,
        },
        sigma_dist: match &raw_profiles.sigma_dist {
            Some(s) => DistSpec::parse(s)?,
            None => ProfileGenConfig::default().sigma_dist,
        },
    };

    let mut aug = AugmentConfig {
        profile_gen,
        ..AugmentConfig::default()
    };
    if let Some(s) = &raw_workload.estimate_multipliers {
        aug.estimate_multipliers = AugmentConfig::parse_multipliers(s)?;
    }
    if let Some(s) = &raw_workload.deadline_multiplier_range {
        aug.deadline_multiplier_range = AugmentConfig::parse_deadline_range(s)?;
    }

    let synth_workload = SyntheticWorkloadConfig {
        jobs: raw_synth.jobs.unwrap_or(1000),
        duration: raw_synth.duration.unwrap_or(86_400),
        users: raw_synth.users.unwrap_or(20),
        runtime_range: (
            raw_synth.runtime_min.unwrap_or(60),
            raw_synth.runtime_max.unwrap_or(4 * 3600),
        ),
        aug: aug.clone(),
    };

    let workload = match (&raw_workload.swf, force_synthetic) {
        (Some(path), false) => WorkloadSource::Swf {
            path: base_dir.join(path),
            count: raw_workload.count,
            duration: raw_workload.duration,
            aug: aug.clone(),
        },
        _ => WorkloadSource::Synthetic(synth_workload.clone()),
    };

    let offset_window = match &raw_experiment.offset_window {
        Some(s) => parse_offset_window(s)?,
        None => (0, 0),
    };

    let workload_duration = match &workload {
        WorkloadSource::Swf { duration, .. } => duration.unwrap_or(7 * 86_400),
        WorkloadSource::Synthetic(s) => s.duration,
    };

    let any_trace_file = raw_market.traces.is_some() || per_type_traces.iter().any(Option::is_some);
    let traces = if any_trace_file && !force_synthetic {
        TraceSource::Files {
            shared: raw_market.traces.as_ref().map(|p| base_dir.join(p)),
            per_type: per_type_traces,
        }
    } else {
        TraceSource::Synthetic(SyntheticTraceConfig {
            step: raw_synth.trace_step.unwrap_or(300),
            span: offset_window.1 + 2 * workload_duration + 86_400,
            mean_fraction: raw_synth.trace_mean_fraction.unwrap_or(1.0 / 3.0),
            volatility: raw_synth.trace_volatility.unwrap_or(0.05),
            reversion: raw_synth.trace_reversion.unwrap_or(0.25),
        })
    };

    let tick_interval = raw_broker.tick_interval.unwrap_or(10);
    if tick_interval == 0 {
        return Err(ExperimentError::BadValue {
            key: "broker.tick_interval".into(),
            reason: "must be positive".into(),
        });
    }
    let broker = BrokerConfig {
        tick_interval,
        method: match &raw_broker.estimation_method {
            Some(s) => EstimationMethod::parse(s)?,
            None => EstimationMethod::RecentAverage(2),
        },
        bid_policy: match &raw_broker.bid_policy {
            Some(s) => BidPolicy::parse(s)?,
            None => BidPolicy::OnDemandPrice,
        },
        safety_margin: raw_broker.safety_margin.unwrap_or(tick_interval),
        correction_enabled: raw_broker.correction_enabled.unwrap_or(true),
    };

    let replications = raw.replications.unwrap_or(30);
    if replications == 0 {
        return Err(ExperimentError::BadValue {
            key: "replications".into(),
            reason: "must be at least 1".into(),
        });
    }

    Ok(ExperimentConfig {
        master_seed: raw.master_seed.unwrap_or(42),
        replications,
        output_dir: base_dir.join(raw.output_dir.as_deref().unwrap_or("out")),
        discount: match &raw.discount {
            Some(s) => parse_discount(s)?,
            None => (1, 3),
        },
        offset_window,
        broker,
        boot_delay: raw_market.boot_delay.unwrap_or(0),
        catalog,
        workload,
        traces,
        max_sim_seconds: raw_experiment.max_sim_seconds,
        log_events: false,
        log_decisions: false,
    })
}

// ---------------------------------------------------------------------------
// Inputs shared by all replications
// ---------------------------------------------------------------------------

/// Traces on the absolute time axis plus the parsed SWF records, loaded once.
pub struct ExperimentInputs {
    pub traces: Vec<PriceTrace>,
    pub swf_raw: Option<Vec<crate::workload::RawJob>>,
    /// Span of job submissions, for coverage validation and horizons.
    pub workload_duration: u64,
}

/// Loads traces and the workload file, generating synthetic inputs where
/// configured, and validates trace coverage of the offset window.
pub fn prepare_inputs(cfg: &ExperimentConfig) -> Result<ExperimentInputs, ExperimentError> {
    let traces: Vec<PriceTrace> = match &cfg.traces {
        TraceSource::Synthetic(tcfg) => {
            synthetic_traces(&cfg.catalog, tcfg, derive_seed(cfg.master_seed, 0))
        }
        TraceSource::Files { shared, per_type } => {
            // load each distinct file once
            let mut loaded: std::collections::BTreeMap<PathBuf, _> = Default::default();
            let mut load = |path: &PathBuf| -> Result<(), ExperimentError> {
                if !loaded.contains_key(path) {
                    let file = fs::File::open(path).map_err(|source| ExperimentError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    loaded.insert(path.clone(), load_price_traces(file)?);
                }
                Ok(())
            };
            for path in per_type.iter().flatten().chain(shared.iter()) {
                load(path)?;
            }
            cfg.catalog
                .iter()
                .zip(per_type)
                .map(|(ty, override_path)| {
                    let path = override_path
                        .as_ref()
                        .or(shared.as_ref())
                        .ok_or_else(|| ExperimentError::MissingTrace(ty.name.clone()))?;
                    loaded[path]
                        .get(&ty.name)
                        .cloned()
                        .ok_or_else(|| ExperimentError::MissingTrace(ty.name.clone()))
                })
                .collect::<Result<_, _>>()?
        }
    };

    let (swf_raw, workload_duration) = match &cfg.workload {
        WorkloadSource::Swf {
            path,
            count,
            duration,
            ..
        } => {
            let file = fs::File::open(path).map_err(|source| ExperimentError::Io {
                path: path.clone(),
                source,
            })?;
            let raw = parse_swf(std::io::BufReader::new(file))?;
            let raw = match (count, duration) {
                (Some(c), Some(d)) => scale_workload(&raw, *c, *d)?,
                (Some(c), None) => raw.into_iter().take(*c).collect(),
                _ => raw,
            };
            let span = match (
                raw.iter().map(|j| j.submit_time).min(),
                raw.iter().map(|j| j.submit_time).max(),
            ) {
                (Some(lo), Some(hi)) => hi - lo,
                _ => 0,
            };
            (Some(raw), span)
        }
        WorkloadSource::Synthetic(s) => (None, s.duration),
    };

    let (win_start, win_end) = cfg.offset_window;
    for (ty, trace) in cfg.catalog.iter().zip(&traces) {
        if trace.first_time() > win_start {
            return Err(ExperimentError::WindowBeforeTrace {
                type_name: ty.name.clone(),
                start: win_start,
                first: trace.first_time(),
            });
        }
        // A single-point trace is constant forever; anything longer must
        // cover the latest run start plus the workload span.
        if trace.points().len() > 1 {
            let needed = win_end + workload_duration;
            if trace.last_time() < needed {
                return Err(ExperimentError::TraceTooShort {
                    type_name: ty.name.clone(),
                    trace_end: trace.last_time(),
                    window_end: win_end,
                    needed,
                    deficit: needed - trace.last_time(),
                });
            }
        }
    }

    Ok(ExperimentInputs {
        traces,
        swf_raw,
        workload_duration,
    })
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// Result of one replication.
#[derive(Debug)]
pub struct RunRow {
    pub replication: u32,
    pub seed: u64,
    pub offset: u64,
    pub method: String,
    pub report: MetricsReport,
    pub worst: BaselineTable,
    pub best: BaselineTable,
    pub event_log: Vec<String>,
    pub decisions: Vec<crate::broker::AllocationDecision>,
}

// Substream tags for per-replication randomness.
const STREAM_OFFSET: u64 = 1;
const STREAM_WORKLOAD: u64 = 2;
const STREAM_ESTIMATOR: u64 = 3;

/// Runs replication `rep` (1-based) with an optional estimation-method
/// override (used by paired comparisons).
pub fn run_single(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    rep: u32,
    method_override: Option<EstimationMethod>,
) -> Result<RunRow, ExperimentError> {
    let seed = derive_seed(cfg.master_seed, rep as u64);
    let (win_start, win_end) = cfg.offset_window;
    let mut offset_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_OFFSET));
    let offset = if win_start == win_end {
        win_start
    } else {
        offset_rng.random_range(win_start..=win_end)
    };

    let shifted: Vec<PriceTrace> = cfg
        .catalog
        .iter()
        .zip(&inputs.traces)
        .map(|(ty, trace)| trace.shift_origin(offset, &ty.name))
        .collect::<Result<_, _>>()?;
    let market = CloudManager::new(cfg.catalog.clone(), shifted, cfg.boot_delay)?;

    let mut workload_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_WORKLOAD));
    let jobs: Vec<Job> = match (&cfg.workload, &inputs.swf_raw) {
        (WorkloadSource::Swf { aug, .. }, Some(raw)) => augment(raw, &mut workload_rng, aug)?,
        (WorkloadSource::Synthetic(s), _) => synthetic_workload(s, &mut workload_rng)?,
        _ => unreachable!("swf raw records were prepared"),
    };

    let mut broker_config = cfg.broker;
    if let Some(m) = method_override {
        broker_config.method = m;
    }
    let method_label = broker_config.method.to_string();
    let broker = Broker::new(broker_config, derive_seed(seed, STREAM_ESTIMATOR));

    let worst = worst_case_cost(&jobs, &cfg.catalog);
    let best = best_case_cost(&worst, cfg.discount.0, cfg.discount.1);

    let last_submit = jobs.iter().map(|j| j.submit_time.secs()).max().unwrap_or(0);
    let horizon = cfg
        .max_sim_seconds
        .unwrap_or(last_submit + inputs.workload_duration.max(86_400) * 4 + 30 * 86_400);

    let mut sim = Simulation::new(
        market,
        broker,
        jobs,
        RunOptions {
            horizon: SimTime(horizon),
            log_events: cfg.log_events,
            check_invariants: false,
        },
    )
    .map_err(|source| ExperimentError::Run {
        replication: rep,
        source,
    })?;
    sim.run().map_err(|source| ExperimentError::Run {
        replication: rep,
        source,
    })?;

    debug_assert_eq!(sim.market.revenue(), sim.acct.total_cost);
    let report = assemble_report(&sim.acct);
    Ok(RunRow {
        replication: rep,
        seed,
        offset,
        method: method_label,
        report,
        worst,
        best,
        event_log: sim.kernel.take_log(),
        decisions: if cfg.log_decisions {
            std::mem::take(&mut sim.broker.decisions)
        } else {
            Vec::new()
        },
    })
}

/// All artifacts of a full experiment run.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<RunRow>,
    pub files: Vec<PathBuf>,
}

/// Runs the full replication protocol and writes `report.csv`,
/// `aggregate.csv`, and `breakdown.csv` (plus per-run logs when enabled)
/// into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let inputs = prepare_inputs(cfg)?;
    let mut rows = Vec::with_capacity(cfg.replications as usize);
    for rep in 1..=cfg.replications {
        rows.push(run_single(cfg, &inputs, rep, None)?);
    }
    let files = write_run_outputs(cfg, &rows)?;
    Ok(ExperimentOutput { rows, files })
}

/// Runs the protocol once per estimation method with identical seeds and
/// offsets, and writes `compare.csv` / `compare_summary.csv`.
pub fn compare_methods(
    cfg: &ExperimentConfig,
    methods: &[EstimationMethod],
) -> Result<ExperimentOutput, ExperimentError> {
    if methods.is_empty() {
        return Err(ExperimentError::NoMethods);
    }
    let inputs = prepare_inputs(cfg)?;
    let mut rows = Vec::new();
    for method in methods {
        for rep in 1..=cfg.replications {
            rows.push(run_single(cfg, &inputs, rep, Some(*method))?);
        }
    }
    let files = write_compare_outputs(cfg, methods, &rows)?;
    Ok(ExperimentOutput { rows, files })
}

/// Computes the baseline cost tables on replication 1's workload
/// and writes `baseline.csv`.
pub fn run_baselines(
    cfg: &ExperimentConfig,
) -> Result<(BaselineTable, BaselineTable, PathBuf), ExperimentError> {
    let inputs = prepare_inputs(cfg)?;
    let seed = derive_seed(cfg.master_seed, 1);
    let mut workload_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_WORKLOAD));
    let jobs: Vec<Job> = match (&cfg.workload, &inputs.swf_raw) {
        (WorkloadSource::Swf { aug, .. }, Some(raw)) => augment(raw, &mut workload_rng, aug)?,
        (WorkloadSource::Synthetic(s), _) => synthetic_workload(s, &mut workload_rng)?,
        _ => unreachable!(),
    };
    let worst = worst_case_cost(&jobs, &cfg.catalog);
    let best = best_case_cost(&worst, cfg.discount.0, cfg.discount.1);
    let path = write_baseline_csv(cfg, &worst, &best)?;
    Ok((worst, best, path))
}

/// Parses inputs and checks every validation rule without simulating.
pub fn validate_config(cfg: &ExperimentConfig) -> Result<String, ExperimentError> {
    let inputs = prepare_inputs(cfg)?;
    let n_jobs = match (&cfg.workload, &inputs.swf_raw) {
        (WorkloadSource::Swf { .. }, Some(raw)) => raw.len(),
        (WorkloadSource::Synthetic(s), _) => s.jobs,
        _ => 0,
    };
    let mut lines = vec![
        format!("catalog: {} instance types", cfg.catalog.len()),
        format!(
            "workload: {} jobs spanning {}s",
            n_jobs, inputs.workload_duration
        ),
        format!(
            "offset window: [{}, {}]",
            cfg.offset_window.0, cfg.offset_window.1
        ),
        format!(
            "replications: {} (master seed {})",
            cfg.replications, cfg.master_seed
        ),
    ];
    for (ty, trace) in cfg.catalog.iter().zip(&inputs.traces) {
        lines.push(format!(
            "trace {}: {} points over [{}, {}]",
            ty.name,
            trace.points().len(),
            trace.first_time(),
            trace.last_time()
        ));
    }
    Ok(lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

pub const REPORT_HEADER: &str = "seed,offset,method,total_cost,worst_case,best_case,misses,\
                                 miss_frac,utilization,utilization_charged,instances,failures";

fn report_line(row: &RunRow) -> String {
    let r = &row.report;
    format!(
        "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{}",
        row.seed,
        row.offset,
        row.method,
        r.total_cost.fmt_dollars(),
        row.worst.total.fmt_dollars(),
        row.best.total.fmt_dollars(),
        r.deadline_misses,
        r.miss_fraction,
        r.utilization,
        r.utilization_charged,
        r.instances_launched,
        r.failures
    )
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, ExperimentError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_run_outputs(
    cfg: &ExperimentConfig,
    rows: &[RunRow],
) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|source| ExperimentError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let mut files = Vec::new();

    let report_path = cfg.output_dir.join("report.csv");
    {
        let mut w = create(&report_path)?;
        writeln!(w, "{REPORT_HEADER}").map_err(io_err(&report_path))?;
        for row in rows {
            writeln!(w, "{}", report_line(row)).map_err(io_err(&report_path))?;
        }
    }
    files.push(report_path);

    let aggregate_path = cfg.output_dir.join("aggregate.csv");
    {
        let mut w = create(&aggregate_path)?;
        writeln!(w, "metric,mean,std,min,max").map_err(io_err(&aggregate_path))?;
        type Metric = fn(&RunRow) -> f64;
        let metrics: [(&str, Metric); 10] = [
            ("total_cost", |r| r.report.total_cost.dollars_f64()),
            ("worst_case", |r| r.worst.total.dollars_f64()),
            ("best_case", |r| r.best.total.dollars_f64()),
            ("misses", |r| r.report.deadline_misses as f64),
            ("miss_frac", |r| r.report.miss_fraction),
            ("utilization", |r| r.report.utilization),
            ("utilization_charged", |r| r.report.utilization_charged),
            ("instances", |r| r.report.instances_launched as f64),
            ("failures", |r| r.report.failures as f64),
            ("corrections", |r| r.report.corrections as f64),
        ];
        for (name, f) in metrics {
            let values: Vec<f64> = rows.iter().map(f).collect();
            let (mean, std, min, max) = summarize(&values);
            writeln!(w, "{name},{mean:.6},{std:.6},{min:.6},{max:.6}")
                .map_err(io_err(&aggregate_path))?;
        }
    }
    files.push(aggregate_path);

    let breakdown_path = cfg.output_dir.join("breakdown.csv");
    {
        let mut w = create(&breakdown_path)?;
        writeln!(
            w,
            "replication,type,job_share,worst_case,best_case,policy_cost"
        )
        .map_err(io_err(&breakdown_path))?;
        for row in rows {
            for (i, wr) in row.worst.rows.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{:.6},{},{},{}",
                    row.replication,
                    wr.type_name,
                    wr.job_share,
                    wr.cost.fmt_dollars(),
                    row.best.rows[i].cost.fmt_dollars(),
                    row.report.per_type_cost[i].fmt_dollars()
                )
                .map_err(io_err(&breakdown_path))?;
            }
        }
    }
    files.push(breakdown_path);

    files.extend(write_logs(cfg, rows)?);
    Ok(files)
}

fn write_logs(cfg: &ExperimentConfig, rows: &[RunRow]) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut files = Vec::new();
    if cfg.log_events {
        for row in rows {
            let path = cfg
                .output_dir
                .join(format!("events_rep{}.csv", row.replication));
            let mut w = create(&path)?;
            writeln!(w, "time,seq,kind,payload").map_err(io_err(&path))?;
            for line in &row.event_log {
                writeln!(w, "{line}").map_err(io_err(&path))?;
            }
            files.push(path);
        }
    }
    if cfg.log_decisions {
        for row in rows {
            let path = cfg
                .output_dir
                .join(format!("decisions_rep{}.csv", row.replication));
            let mut w = create(&path)?;
            writeln!(
                w,
                "time,job_id,decision_kind,instance_id,type,cost_estimate"
            )
            .map_err(io_err(&path))?;
            for d in &row.decisions {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    d.time,
                    d.job,
                    d.kind.label(),
                    d.instance.map_or("-".to_string(), |i| i.to_string()),
                    d.type_id
                        .map_or("-".to_string(), |t| cfg.catalog[t.0].name.clone()),
                    d.cost_estimate.fmt_dollars()
                )
                .map_err(io_err(&path))?;
            }
            files.push(path);
        }
    }
    Ok(files)
}

fn write_compare_outputs(
    cfg: &ExperimentConfig,
    methods: &[EstimationMethod],
    rows: &[RunRow],
) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|source| ExperimentError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let mut files = Vec::new();

    let compare_path = cfg.output_dir.join("compare.csv");
    {
        let mut w = create(&compare_path)?;
        writeln!(
            w,
            "method,replication,seed,offset,total_cost,misses,miss_frac,utilization,corrections"
        )
        .map_err(io_err(&compare_path))?;
        for row in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.6},{:.6},{}",
                row.method,
                row.replication,
                row.seed,
                row.offset,
                row.report.total_cost.fmt_dollars(),
                row.report.deadline_misses,
                row.report.miss_fraction,
                row.report.utilization,
                row.report.corrections
            )
            .map_err(io_err(&compare_path))?;
        }
    }
    files.push(compare_path);

    let summary_path = cfg.output_dir.join("compare_summary.csv");
    {
        let mut w = create(&summary_path)?;
        writeln!(
            w,
            "method,mean_cost,mean_misses,mean_miss_frac,mean_utilization,mean_corrections"
        )
        .map_err(io_err(&summary_path))?;
        for method in methods {
            let label = method.to_string();
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.method == label).collect();
            let mean = |f: &dyn Fn(&RunRow) -> f64| -> f64 {
                group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64
            };
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                label,
                mean(&|r| r.report.total_cost.dollars_f64()),
                mean(&|r| r.report.deadline_misses as f64),
                mean(&|r| r.report.miss_fraction),
                mean(&|r| r.report.utilization),
                mean(&|r| r.report.corrections as f64),
            )
            .map_err(io_err(&summary_path))?;
        }
    }
    files.push(summary_path);
    Ok(files)
}

fn write_baseline_csv(
    cfg: &ExperimentConfig,
    worst: &BaselineTable,
    best: &BaselineTable,
) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|source| ExperimentError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let path = cfg.output_dir.join("baseline.csv");
    let mut w = create(&path)?;
    writeln!(w, "type,job_share,worst_case,best_case").map_err(io_err(&path))?;
    for (wr, br) in worst.rows.iter().zip(&best.rows) {
        writeln!(
            w,
            "{},{:.6},{},{}",
            wr.type_name,
            wr.job_share,
            wr.cost.fmt_dollars(),
            br.cost.fmt_dollars()
        )
        .map_err(io_err(&path))?;
    }
    writeln!(
        w,
        "TOTAL,1.000000,{},{}",
        worst.total.fmt_dollars(),
        best.total.fmt_dollars()
    )
    .map_err(io_err(&path))?;
    Ok(path)
}

fn summarize(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}
