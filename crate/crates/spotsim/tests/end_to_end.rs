//! End-to-end library tests: replication determinism, paired seeds, input
//! validation, and job conservation across full runs.

use std::fs;

use spotsim::broker::{Broker, BrokerConfig};
use spotsim::estimation::EstimationMethod;
use spotsim::experiment::{
    compare_methods, derive_seed, load_config, run_experiment, ExperimentError,
};
use spotsim::market::{default_catalog, CloudManager, PriceTrace};
use spotsim::money::Money;
use spotsim::simulation::{RunOptions, Simulation};
use spotsim::synthetic::{synthetic_workload, SyntheticWorkloadConfig};
use spotsim::workload::JobState;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_config(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn rerunning_an_experiment_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        tmp.path(),
        r#"
master_seed = 1234
replications = 2

[synthetic]
jobs = 400
duration = 7200

[experiment]
offset_window = "0,86400"
"#,
    );
    let mut cfg = load_config(&cfg_path, true).unwrap();
    cfg.output_dir = tmp.path().join("a");
    run_experiment(&cfg).unwrap();
    cfg.output_dir = tmp.path().join("b");
    run_experiment(&cfg).unwrap();
    for name in ["report.csv", "aggregate.csv", "breakdown.csv"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn adding_replications_keeps_earlier_runs_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        tmp.path(),
        r#"
master_seed = 77
replications = 2

[synthetic]
jobs = 150
duration = 3600
"#,
    );
    let mut cfg = load_config(&cfg_path, true).unwrap();
    cfg.output_dir = tmp.path().join("two");
    let two = run_experiment(&cfg).unwrap();
    cfg.replications = 3;
    cfg.output_dir = tmp.path().join("three");
    let three = run_experiment(&cfg).unwrap();
    for (a, b) in two.rows.iter().zip(&three.rows) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.offset, b.offset);
        assert_eq!(a.report.total_cost, b.report.total_cost);
        assert_eq!(a.report.deadline_misses, b.report.deadline_misses);
    }
}

#[test]
fn paired_comparison_reuses_seeds_and_offsets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        tmp.path(),
        r#"
master_seed = 5
replications = 3

[synthetic]
jobs = 120
duration = 3600

[experiment]
offset_window = "0,86400"
"#,
    );
    let mut cfg = load_config(&cfg_path, true).unwrap();
    cfg.output_dir = tmp.path().join("out");
    let methods = [
        EstimationMethod::UserSupplied,
        EstimationMethod::FractionOfUserSupplied(1.0 / 3.0),
    ];
    let output = compare_methods(&cfg, &methods).unwrap();
    assert_eq!(output.rows.len(), 6);
    let (first, second) = output.rows.split_at(3);
    for (a, b) in first.iter().zip(second) {
        assert_eq!(a.replication, b.replication);
        assert_eq!(a.seed, b.seed, "paired seeds must match across methods");
        assert_eq!(
            a.offset, b.offset,
            "paired offsets must match across methods"
        );
        assert_ne!(a.method, b.method);
    }
    // the comparison artifacts exist
    assert!(tmp.path().join("out/compare.csv").exists());
    assert!(tmp.path().join("out/compare_summary.csv").exists());
}

#[test]
fn single_replication_aggregate_equals_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        tmp.path(),
        r#"
master_seed = 9
replications = 1

[synthetic]
jobs = 100
duration = 1800
"#,
    );
    let mut cfg = load_config(&cfg_path, true).unwrap();
    cfg.output_dir = tmp.path().join("out");
    let output = run_experiment(&cfg).unwrap();
    assert_eq!(output.rows.len(), 1);
    let row = &output.rows[0];
    // fixed offset: the default window is [0, 0]
    assert_eq!(row.offset, 0);
    let aggregate = fs::read_to_string(tmp.path().join("out/aggregate.csv")).unwrap();
    for line in aggregate.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (mean, std, min, max) = (cols[1], cols[2], cols[3], cols[4]);
        assert_eq!(std, "0.000000", "single run has zero spread: {line}");
        assert_eq!(mean, min, "{line}");
        assert_eq!(mean, max, "{line}");
    }
    let cost_row = aggregate
        .lines()
        .find(|l| l.starts_with("total_cost,"))
        .unwrap();
    let mean: f64 = cost_row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((mean - row.report.total_cost.dollars_f64()).abs() < 1e-9);
}

#[test]
fn empty_method_list_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        tmp.path(),
        r#"
replications = 1

[synthetic]
jobs = 10
duration = 600
"#,
    );
    let cfg = load_config(&cfg_path, true).unwrap();
    assert!(matches!(
        compare_methods(&cfg, &[]),
        Err(ExperimentError::NoMethods)
    ));
}

#[test]
fn short_trace_fails_validation_naming_the_deficit() {
    let tmp = tempfile::tempdir().unwrap();
    // trace covers 0..1000 but the window end plus workload span needs more
    let trace_path = tmp.path().join("prices.csv");
    let mut csv = String::from("timestamp,instance_type,price\n");
    for ty in default_catalog() {
        csv.push_str(&format!("0,{},0.02\n", ty.name));
        csv.push_str(&format!("1000,{},0.03\n", ty.name));
    }
    fs::write(&trace_path, csv).unwrap();
    let cfg_path = write_config(
        tmp.path(),
        r#"
replications = 1

[market]
traces = "prices.csv"

[synthetic]
jobs = 50
duration = 7200

[experiment]
offset_window = "0,600"
"#,
    );
    let cfg = load_config(&cfg_path, false).unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    match err {
        ExperimentError::TraceTooShort {
            needed, deficit, ..
        } => {
            assert_eq!(needed, 600 + 7200);
            assert_eq!(deficit, 7800 - 1000);
        }
        other => panic!("expected TraceTooShort, got {other}"),
    }
}

#[test]
fn seed_derivation_is_index_stable() {
    let a: Vec<u64> = (1..=5).map(|i| derive_seed(10, i)).collect();
    let b: Vec<u64> = (1..=8).map(|i| derive_seed(10, i)).collect();
    assert_eq!(a[..], b[..5]);
}

#[test]
fn random_workloads_conserve_jobs_under_invariant_checks() {
    // Full runs with per-event invariant checking across several seeds and
    // estimation methods.
    let methods = [
        EstimationMethod::ActualRuntime,
        EstimationMethod::UserSupplied,
        EstimationMethod::FractionOfUserSupplied(1.0 / 3.0),
        EstimationMethod::RecentAverage(2),
    ];
    for seed in [3u64, 11, 29] {
        for method in methods {
            let catalog = default_catalog();
            let traces = catalog
                .iter()
                .map(|ty| {
                    PriceTrace::new(vec![(0, Money::parse_dollars("0.03").unwrap())], &ty.name)
                        .unwrap()
                })
                .collect();
            let market = CloudManager::new(catalog, traces, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jobs = synthetic_workload(
                &SyntheticWorkloadConfig {
                    jobs: 80,
                    duration: 3600,
                    ..SyntheticWorkloadConfig::default()
                },
                &mut rng,
            )
            .unwrap();
            let config = BrokerConfig {
                method,
                ..BrokerConfig::default()
            };
            let mut sim = Simulation::new(
                market,
                Broker::new(config, seed),
                jobs,
                RunOptions {
                    check_invariants: true,
                    ..RunOptions::default()
                },
            )
            .unwrap();
            sim.run().unwrap();
            assert_eq!(sim.acct.completed, 80);
            assert!(sim.jobs.iter().all(|j| j.state == JobState::Completed));
            assert_eq!(sim.market.revenue(), sim.acct.total_cost);
            let report = spotsim::analytics::assemble_report(&sim.acct);
            let share_sum: f64 = report.per_type_job_share.iter().sum();
            assert!((share_sum - 1.0).abs() < 1e-9);
        }
    }
}
