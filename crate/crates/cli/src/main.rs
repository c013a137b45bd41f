use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rrlab::datagen::{generate_domain_pair, GeneratorConfig, ShiftSpec, ShiftType};
use rrlab::driftdiag::drift_report;
use rrlab::harness::{
    aggregate, cell_datasets, report, run_grid, selftest, CellCoords, GridSpec, ReportFilter, ReportKind, RunOptions,
    SchemaRelation, Store,
};
use rrlab::transfer::{run_scenarios, CellData, LearnerRegistry, ModelKind, Scenario};
use rrlab::{Error, Result};

#[derive(Parser)]
#[command(name = "rrlab", version, about = "Recovery-rate transfer experiments on simulated portfolios")]
struct Cli {
    /// Generator TOML for `generate`, grid TOML for `train` and `sweep`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the result store for `sweep` and `report`).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Skip cells already in the store (default).
    #[arg(long, global = true, overrides_with = "no_resume")]
    resume: bool,
    /// Refuse to write into a store that already holds results.
    #[arg(long, global = true)]
    no_resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a source/target dataset pair as CSV.
    Generate {
        #[arg(long, default_value_t = 5000)]
        n_source: usize,
        #[arg(long, default_value_t = 1000)]
        n_target: usize,
        #[arg(long, default_value = "none")]
        shift: ShiftType,
        #[arg(long, default_value_t = 0.0)]
        intensity: f64,
    },
    /// Run every scenario for one model on a single cell.
    Train {
        #[arg(long, default_value = "ft_mdn")]
        model: ModelKind,
        #[arg(long, default_value = "covariate")]
        shift: ShiftType,
        #[arg(long, default_value_t = 1.0)]
        intensity: f64,
        #[arg(long, default_value = "equal")]
        relation: SchemaRelation,
        #[arg(long, default_value_t = 100)]
        n_target: usize,
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Run a grid into the result store, then write summary tables. Without
    /// `--config`, resumes the grid stored in `--out`.
    Sweep,
    /// Figures and backing tables from a result store.
    Report {
        /// One of violin, shift_curve, sample_curve, density; all when omitted.
        #[arg(long)]
        kind: Option<ReportKind>,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        n_target: Option<usize>,
        #[arg(long)]
        shift: Option<ShiftType>,
        #[arg(long)]
        scenario: Option<Scenario>,
    },
    /// Quick invariant checks.
    Selftest,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn grid_from(cli: &Cli, required: bool) -> Result<GridSpec> {
    let mut grid = match &cli.config {
        Some(p) => GridSpec::load(p)?,
        None if required => return Err(Error::Config("`--config <grid.toml>` is required".into())),
        None => GridSpec::default(),
    };
    if let Some(s) = cli.seed {
        grid.base_seed = s;
    }
    grid.validate()?;
    Ok(grid)
}

/// Exit status 2 when the command finished but something inside it failed.
fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Generate {
            n_source,
            n_target,
            shift,
            intensity,
        } => {
            let cfg = match &cli.config {
                Some(p) => GeneratorConfig::load(p)?,
                None => GeneratorConfig::default(),
            };
            let spec = ShiftSpec::standard(*shift, *intensity, &cfg);
            let (source, target) = generate_domain_pair(&cfg, &spec, *n_source, *n_target, cli.seed.unwrap_or(0))?;
            mkdir(&cli.out)?;
            source.write(&cli.out.join("source.csv"))?;
            target.write(&cli.out.join("target.csv"))?;
            let drift = drift_report(&source, &target)?;
            write(&cli.out.join("drift.json"), &serde_json::to_string_pretty(&drift)?)?;
            println!(
                "wrote {} source and {} target rows to {}; FeatureShift {:.4}, LabelShift {:.4}",
                source.len(),
                target.len(),
                cli.out.display(),
                drift.feature_shift,
                drift.label_shift
            );
            Ok(true)
        }
        Command::Train {
            model,
            shift,
            intensity,
            relation,
            n_target,
            replication,
        } => {
            let grid = grid_from(cli, false)?;
            let cell = CellCoords {
                shift_type: *shift,
                intensity: *intensity,
                relation: *relation,
                n_target: *n_target,
                replication: *replication,
            };
            let seed = cell.seed(grid.base_seed);
            let (source, target) = cell_datasets(&grid, &cell)?;
            let data = CellData::prepare(&source, &target, grid.val_fraction, seed)?;
            let outcomes = run_scenarios(
                &data,
                model,
                &grid.scenarios,
                &grid.scenario_config(),
                &LearnerRegistry::default(),
                seed,
            )?;
            mkdir(&cli.out)?;
            let traces = cli.out.join("traces.jsonl");
            if traces.exists() {
                std::fs::remove_file(&traces).map_err(|e| Error::io(&traces, e))?;
            }
            let mut rows = Vec::new();
            for o in &outcomes {
                for t in &o.traces {
                    t.append_jsonl(&traces)?;
                }
                println!(
                    "{model} {:<16} R² {:>8.4}  MAE {:.4}{}",
                    o.scenario.as_str(),
                    o.metrics.r2,
                    o.metrics.mae,
                    o.metrics.nll.map_or(String::new(), |v| format!("  NLL {v:.4}"))
                );
                rows.push(serde_json::json!({
                    "cell": cell,
                    "model": model,
                    "scenario": o.scenario,
                    "metrics": o.metrics,
                }));
            }
            write(&cli.out.join("metrics.json"), &serde_json::to_string_pretty(&rows)?)?;
            Ok(true)
        }
        Command::Sweep => {
            // Without a config, resume the grid already stored in `--out`.
            let stored = Store::new(&cli.out);
            let grid = if cli.config.is_none() && stored.grid_path().exists() {
                let mut g = stored.grid()?;
                if let Some(s) = cli.seed {
                    g.base_seed = s;
                }
                g
            } else {
                grid_from(cli, true)?
            };
            let opts = RunOptions {
                workers: cli.workers,
                resume: !cli.no_resume,
                ..RunOptions::default()
            };
            let s = run_grid(&grid, &cli.out, &LearnerRegistry::default(), &opts)?;
            let records = Store::new(&cli.out).records()?;
            let summary = aggregate(&records);
            write(&cli.out.join("summary.csv"), &summary.groups_csv())?;
            write(&cli.out.join("gains.csv"), &summary.gains_csv())?;
            println!(
                "{} cells: {} run, {} skipped, {} failed; {} failure records in store",
                s.total, s.completed, s.skipped, s.failed, summary.failures
            );
            Ok(summary.failures == 0)
        }
        Command::Report {
            kind,
            model,
            n_target,
            shift,
            scenario,
        } => {
            let filter = ReportFilter {
                model: model.clone(),
                n_target: *n_target,
                shift_type: *shift,
                scenario: *scenario,
            };
            let kinds = match kind {
                Some(k) => vec![*k],
                None => ReportKind::ALL.to_vec(),
            };
            let mut all_ok = true;
            for k in kinds {
                match report(&cli.out, k, &filter) {
                    Ok(out) => {
                        for f in &out.files {
                            println!("{}", f.display());
                        }
                        for (name, v) in &out.values {
                            println!("  {name} = {v:.4}");
                        }
                    }
                    // With no explicit kind, missing data for one figure is not fatal.
                    Err(e @ Error::EmptySelection { .. }) if kind.is_none() => {
                        log::warn!("{}: {e}", k.as_str());
                        all_ok = false;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(all_ok)
        }
        Command::Selftest => {
            let checks = selftest(cli.seed.unwrap_or(0))?;
            for c in &checks {
                println!("{} {:<26} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
