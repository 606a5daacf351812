//! `ptg`: data generation, training, leave-one-domain-out runs, summaries and
//! self-checks.
//!
//! Exit status: 0 on success, 1 on bad usage or invalid input, 2 when a
//! computation fails or a self-check does not pass.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use ptg_core::gradcheck::run_grad_check;
use ptg_core::harness::{
    read_results, results_csv, run_leave_one_out_with, select_model, summarize, train_single, write_outputs,
    Algorithm, ExperimentConfig, SelectionMode,
};
use ptg_core::oracle::{run_oracle_check, OracleCheckConfig};
use ptg_core::ptg::{write_iteration_log, ModelCheckpoint};
use ptg_core::synth::export_dataset;

#[derive(Parser)]
#[command(name = "ptg", version, about = "Posterior-aggregation domain generalization experiments")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model selection: `training-domain` or `leave-one-out` (overrides the configuration).
    #[arg(long, global = true)]
    selection: Option<SelectionMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every domain of repetition 0 as CSV plus a JSON sidecar.
    GenData,
    /// Train one algorithm with the configured alpha/beta and save the model.
    Train {
        #[arg(long)]
        algorithm: Algorithm,
        /// Held-out domain; defaults to the first configured test domain.
        #[arg(long)]
        test_domain: Option<String>,
    },
    /// Full leave-one-domain-out run: results, selection and summary.
    Run,
    /// Leave-one-domain-out runs only (no selection), optionally for a subset
    /// of algorithms; combine the CSVs later with `summarize`.
    Sweep {
        #[arg(long = "algorithm")]
        algorithms: Vec<Algorithm>,
    },
    /// Select and summarize from one or more results CSVs.
    Summarize {
        #[arg(long = "results", required = true)]
        results: Vec<PathBuf>,
    },
    /// Exact posterior-aggregation and moment-matching checks (JSON report).
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        models: usize,
        #[arg(long, default_value_t = 50)]
        mixtures: usize,
        #[arg(long, default_value_t = 1_000_000)]
        mixture_samples: usize,
    },
    /// Finite-difference gradient checks (JSON report).
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ptg_core::Error> for Failure {
    fn from(e: ptg_core::Error) -> Self {
        if e.is_validation() {
            Failure::Usage(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage(anyhow!("this command requires --config <path>")))?;
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("reading --config {}", path.display()))
        .map_err(Failure::Usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(m) = cli.selection {
        cfg.selection = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Runtime)
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.into()))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli, Some(&cfg));
            create_dir(&dir)?;
            for ds in cfg.generate(0)? {
                let p = export_dataset(&ds, &dir)?;
                println!("{}", p.display());
            }
        }
        Command::Train {
            algorithm,
            test_domain,
        } => {
            let cfg = load_config(cli)?;
            let test = match test_domain {
                Some(t) => t.clone(),
                None => cfg.test_domain_ids().remove(0),
            };
            let dir = out_dir(cli, Some(&cfg));
            create_dir(&dir)?;
            let (model, fold, full, val, held) = train_single(&cfg, *algorithm, &test)?;
            let ck = ModelCheckpoint {
                algorithm: algorithm.to_string(),
                featurizer: model.featurizer,
                classifier: model.classifier,
                standardizer: Some(fold.standardizer),
            };
            ck.save(&dir.join("model.json"))?;
            if let Some(out) = full {
                write_iteration_log(&dir.join("train_log.csv"), &out.bank.domain_ids, &out.log)?;
                if let Some(r) = out.cov_report {
                    write(&dir.join("cov_report.json"), &to_json(&r.summary())?)?;
                }
            }
            let report = serde_json::json!({
                "algorithm": algorithm.as_str(),
                "test_domain": test,
                "val_acc": val,
                "test_acc": held,
            });
            println!("{}", to_json(&report)?);
        }
        Command::Run | Command::Sweep { .. } => {
            let mut cfg = load_config(cli)?;
            let full = matches!(cli.command, Command::Run);
            if let Command::Sweep { algorithms } = &cli.command {
                if !algorithms.is_empty() {
                    cfg.algorithms = algorithms.clone();
                }
            }
            let dir = out_dir(cli, Some(&cfg));
            let rows = run_leave_one_out_with(&cfg, &|r| {
                log::info!(
                    "{} test={} seed={} alpha={:?} beta={:?} val={:?} test={:?}",
                    r.algorithm,
                    r.test_domain,
                    r.seed,
                    r.alpha,
                    r.beta,
                    r.val_acc,
                    r.test_acc
                )
            })?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} runs failed", rows.len());
            }
            if full {
                let selection = select_model(&rows, &cfg)?;
                let summary = summarize(&rows, &selection);
                write_outputs(&dir, &cfg, &rows, &selection, &summary)?;
                print!("{}", summary.to_markdown());
            } else {
                create_dir(&dir)?;
                write(&dir.join("results.csv"), &results_csv(&rows))?;
                println!("{} rows -> {}", rows.len(), dir.join("results.csv").display());
            }
        }
        Command::Summarize { results } => {
            let cfg = load_config(cli)?;
            let mut rows = Vec::new();
            for p in results {
                rows.extend(read_results(p, &cfg)?);
            }
            let selection = select_model(&rows, &cfg)?;
            let summary = summarize(&rows, &selection);
            let dir = out_dir(cli, Some(&cfg));
            write_outputs(&dir, &cfg, &rows, &selection, &summary)?;
            print!("{}", summary.to_markdown());
        }
        Command::OracleCheck {
            models,
            mixtures,
            mixture_samples,
        } => {
            let oc = OracleCheckConfig {
                seed: cli.seed.unwrap_or(0),
                theorem_models: *models,
                mixture_instances: *mixtures,
                mixture_samples: *mixture_samples,
                ..OracleCheckConfig::default()
            };
            let report = run_oracle_check(&oc)?;
            let text = to_json(&report)?;
            println!("{text}");
            if let Some(dir) = &cli.out {
                create_dir(dir)?;
                write(&dir.join("oracle_report.json"), &text)?;
            }
            let holds = report.theorem.max_tv_gap < 1e-12;
            if !holds {
                return Err(Failure::Runtime(anyhow!(
                    "aggregation gap {} is not below 1e-12",
                    report.theorem.max_tv_gap
                )));
            }
        }
        Command::GradCheck { instances } => {
            let report = run_grad_check(*instances, cli.seed.unwrap_or(0))?;
            println!("{}", to_json(&report)?);
            let holds = report.backward_max_rel_err < 1e-4 && report.elbo_max_rel_err < 1e-4;
            if !holds {
                return Err(Failure::Runtime(anyhow!("gradient check exceeded relative error 1e-4")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
