//! Experiment driver for the spot-market virtual-cluster simulator.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spotsim::estimation::EstimationMethod;
use spotsim::experiment::{
    compare_methods, load_config, run_baselines, run_experiment, validate_config, ExperimentConfig,
};

/// Output-directory override, taking precedence over the config file.
const OUTPUT_DIR_ENV: &str = "SPOTSIM_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "spotsim",
    version,
    about = "Spot-market virtual-cluster simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML).
    config: PathBuf,
    /// Replace workload and price traces with generated synthetic inputs.
    #[arg(long)]
    synthetic: bool,
    /// Write a per-event CSV log per replication.
    #[arg(long)]
    event_log: bool,
    /// Write a per-decision CSV log per replication.
    #[arg(long)]
    decision_log: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full replication protocol and write report CSVs.
    Run(CommonArgs),
    /// Run the protocol once per estimation method on paired seeds.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated estimation methods, e.g. `actual,user,recent_average:2`.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Compute the worst-case / best-case baseline cost tables only.
    Baseline(CommonArgs),
    /// Parse and validate all inputs without simulating.
    Validate(CommonArgs),
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&common.config, common.synthetic)
        .with_context(|| format!("loading config {}", common.config.display()))?;
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    cfg.log_events = common.event_log;
    cfg.log_decisions = common.decision_log;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let output = run_experiment(&cfg)?;
            println!("completed {} replication(s)", output.rows.len());
            for row in &output.rows {
                let r = &row.report;
                println!(
                    "rep {:>3}: seed {:>20} offset {:>10} cost {} (worst {}, best {}) \
                     misses {} util {:.4} instances {} failures {}",
                    row.replication,
                    row.seed,
                    row.offset,
                    r.total_cost.fmt_dollars(),
                    row.worst.total.fmt_dollars(),
                    row.best.total.fmt_dollars(),
                    r.deadline_misses,
                    r.utilization,
                    r.instances_launched,
                    r.failures
                );
            }
            for file in &output.files {
                println!("wrote {}", file.display());
            }
            Ok(())
        }
        Command::Compare { common, methods } => {
            if methods.is_empty() {
                bail!("--methods is required (e.g. --methods actual,user,recent_average:2)");
            }
            let cfg = load(&common)?;
            let methods: Vec<EstimationMethod> = methods
                .iter()
                .map(|m| EstimationMethod::parse(m).map_err(Into::into))
                .collect::<Result<_>>()?;
            let output = compare_methods(&cfg, &methods)?;
            println!(
                "compared {} method(s) x {} replication(s)",
                methods.len(),
                cfg.replications
            );
            for file in &output.files {
                println!("wrote {}", file.display());
            }
            Ok(())
        }
        Command::Baseline(common) => {
            let cfg = load(&common)?;
            let (worst, best, path) = run_baselines(&cfg)?;
            println!(
                "{:<12} {:>10} {:>14} {:>14}",
                "type", "job share", "worst-case", "best-case"
            );
            for (wr, br) in worst.rows.iter().zip(&best.rows) {
                println!(
                    "{:<12} {:>9.3}% {:>14} {:>14}",
                    wr.type_name,
                    wr.job_share * 100.0,
                    format!("${}", wr.cost.fmt_dollars()),
                    format!("${}", br.cost.fmt_dollars())
                );
            }
            println!(
                "{:<12} {:>10} {:>14} {:>14}",
                "TOTAL",
                "",
                format!("${}", worst.total.fmt_dollars()),
                format!("${}", best.total.fmt_dollars())
            );
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Validate(common) => {
            let cfg = load(&common)?;
            let summary = validate_config(&cfg)?;
            println!("{summary}");
            println!("ok");
            Ok(())
        }
    }
}
