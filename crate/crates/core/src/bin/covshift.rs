use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use covshift_policy::dataset::{ingest_csv, CsvSchema};
use covshift_policy::estimators::{coefficients, estimate, Estimand, EstimatorKind};
use covshift_policy::experiment::{parse_grid, run_sweep, run_table, ExperimentConfig, SweepKind};
use covshift_policy::metrics::WelfareScope;
use covshift_policy::nuisance::{fit_nuisances, NuisanceCoefficients};
use covshift_policy::policy::{learn_policy, Policy, TrainingTrace};
use covshift_policy::simulate::generate;

fn default_config_help() -> String {
    format!(
        "Configuration files are TOML; every key is optional. Defaults:\n\n{}",
        ExperimentConfig::default().to_toml()
    )
}

#[derive(Parser)]
#[command(
    name = "covshift",
    version,
    about = "Policy evaluation and learning for a covariate-only target domain under covariate shift",
    after_long_help = default_config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one synthetic source/target sample.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_data: PathBuf,
        /// Sidecar with potential outcomes and true nuisances.
        #[arg(long)]
        out_truth: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replicated comparison of estimators used for policy learning.
    Table {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of direct,ipw,se.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<EstimatorKind>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        welfare_scope: Option<WelfareScope>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Tables over a grid of covariate shifts or treatment-mechanism strengths.
    Sweep {
        #[arg(long)]
        kind: SweepKind,
        /// Values such as `0,1,2` or `0,0.5,...,3`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<EstimatorKind>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        welfare_scope: Option<WelfareScope>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Fit nuisances on a data file and learn a policy.
    Learn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "se")]
        method: EstimatorKind,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated covariate columns; default is every column before the group column.
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<String>>,
        #[arg(long)]
        out_policy: PathBuf,
    },
    /// Estimate the value of a learned policy on a data file.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "se")]
        method: EstimatorKind,
        /// `r` for the target-domain reward, `v` for the reward over both domains.
        #[arg(long, default_value = "r")]
        estimand: Estimand,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    method: EstimatorKind,
    estimand: Estimand,
    covariates: Vec<String>,
    policy: Policy,
    trace: TrainingTrace,
    nuisance_coefficients: NuisanceCoefficients,
    in_sample_estimate: f64,
}

#[derive(Debug, Serialize)]
struct EstimateFile {
    method: EstimatorKind,
    estimand: Estimand,
    n_source: usize,
    n_target: usize,
    treated_fraction: f64,
    value: f64,
    std_error: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    methods: Option<Vec<EstimatorKind>>,
    reps: Option<usize>,
    scope: Option<WelfareScope>,
) {
    if let Some(m) = methods {
        cfg.methods = m;
    }
    if let Some(r) = reps {
        cfg.replications = r;
    }
    if let Some(s) = scope {
        cfg.welfare_scope = s;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            out_data,
            out_truth,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            let sim = generate(&cfg.sim)?;
            let names = sim.dataset.default_names();
            sim.dataset.write_csv_file(&out_data, &names)?;
            if let Some(p) = out_truth {
                sim.write_truth_csv(create(&p)?)?;
            }
            eprintln!(
                "wrote {} source and {} target rows",
                sim.dataset.n_source(),
                sim.dataset.n_target()
            );
        }
        Command::Table {
            config,
            methods,
            reps,
            workers,
            seed,
            welfare_scope,
            out,
            out_csv,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_overrides(&mut cfg, methods, reps, welfare_scope);
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            let report = run_table(&cfg, workers)?;
            for f in &report.failures {
                eprintln!("replication {} (seed {}) failed: {}", f.index, f.seed, f.error);
            }
            eprintln!("{} of {} replications completed", report.completed, report.requested);
            if let Some(p) = out_csv {
                report.write_summary_csv(create(&p)?)?;
            }
            write_json(out.as_deref(), &report)?;
        }
        Command::Sweep {
            kind,
            grid,
            config,
            methods,
            reps,
            workers,
            welfare_scope,
            out,
            out_csv,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_overrides(&mut cfg, methods, reps, welfare_scope);
            let grid = parse_grid(&grid).map_err(anyhow::Error::msg)?;
            let sweep = run_sweep(kind, &grid, &cfg, workers)?;
            for p in &sweep.points {
                eprintln!(
                    "grid value {}: {} of {} replications completed",
                    p.grid_value, p.report.completed, p.report.requested
                );
            }
            sweep.write_csv(create(&out_csv)?)?;
            if let Some(p) = out {
                write_json(Some(&p), &sweep)?;
            }
        }
        Command::Learn {
            data,
            method,
            config,
            covariates,
            out_policy,
        } => {
            let cfg = load_config(config.as_deref())?;
            let schema = CsvSchema {
                covariates,
                ..Default::default()
            };
            let named = ingest_csv(&data, &schema)?;
            let ds = &named.data;
            let nuisances = fit_nuisances(ds, &cfg.nuisance)?;
            let coeffs = coefficients(ds, &nuisances, method, Estimand::TargetReward)?;
            let learned = learn_policy(&coeffs, ds.rows(), ds.n_features(), &cfg.learner)?;
            let value = estimate(&coeffs, &learned.policy.decisions(ds))?.value;
            let file = PolicyFile {
                method,
                estimand: Estimand::TargetReward,
                covariates: named.names,
                policy: learned.policy,
                trace: learned.trace,
                nuisance_coefficients: nuisances.models.coefficients(),
                in_sample_estimate: value,
            };
            write_json(Some(&out_policy), &file)?;
        }
        Command::Estimate {
            data,
            policy,
            method,
            estimand,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let text = fs::read_to_string(&policy).with_context(|| format!("reading {}", policy.display()))?;
            let file: PolicyFile =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", policy.display()))?;
            let schema = CsvSchema {
                covariates: Some(file.covariates.clone()),
                ..Default::default()
            };
            let named = ingest_csv(&data, &schema)?;
            let ds = &named.data;
            if file.policy.map.p_in != ds.n_features() {
                bail!(
                    "policy expects {} covariates, data has {}",
                    file.policy.map.p_in,
                    ds.n_features()
                );
            }
            let nuisances = fit_nuisances(ds, &cfg.nuisance)?;
            let coeffs = coefficients(ds, &nuisances, method, estimand)?;
            let decisions = file.policy.decisions(ds);
            let est = estimate(&coeffs, &decisions)?;
            let scope: Vec<usize> = match estimand {
                Estimand::TargetReward => ds.target_indices(),
                Estimand::EntireReward => (0..ds.len()).collect(),
            };
            let treated = scope.iter().map(|&i| decisions[i]).sum::<f64>() / scope.len() as f64;
            write_json(
                out.as_deref(),
                &EstimateFile {
                    method,
                    estimand,
                    n_source: ds.n_source(),
                    n_target: ds.n_target(),
                    treated_fraction: treated,
                    value: est.value,
                    std_error: est.std_error,
                    ci_low: est.ci_low,
                    ci_high: est.ci_high,
                },
            )?;
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
