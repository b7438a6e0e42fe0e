use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sekf_transfer::datasets::{build_spring_dataset, build_tclab_dataset, write_dataset};
use sekf_transfer::experiments::{self, ExperimentConfig};
use sekf_transfer::systems::{self, SpringParams, TclabParams};
use sekf_transfer::Error;

#[derive(Parser)]
#[command(name = "sekf-tl", version, about = "Transfer learning for neural surrogates of dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Spring,
    Tclab,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a system and write a dataset (CSV + JSON) plus one raw trajectory.
    Simulate {
        #[arg(long, value_enum)]
        system: System,
        /// JSON file with physical parameters; defaults to the nominal system.
        #[arg(long)]
        params_json: Option<PathBuf>,
        /// Output stem; `.csv`, `.json` and `_trajectory.csv` are appended.
        #[arg(long)]
        out: PathBuf,
        /// Spring: number of examples.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// TCLab: simulated seconds.
        #[arg(long, default_value_t = 86_400.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and store the source model.
    TrainSource {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the transfer grid.
    RunGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip trials whose result file already exists.
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate trial records into CSV tables.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        anova: bool,
        #[arg(long)]
        layer_changes: bool,
        #[arg(long, default_value_t = 4999)]
        n_perm: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_params<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string())),
    }
}

fn stem_with(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Simulate {
            system,
            params_json,
            out,
            n,
            duration,
            stride,
            noise,
            seed,
        } => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let traj_path = stem_with(&out, "_trajectory.csv");
            match system {
                System::Spring => {
                    let p: SpringParams = read_params(params_json.as_deref())?;
                    let ds = build_spring_dataset(&p, n, seed, noise.unwrap_or(0.05))?;
                    write_dataset(&ds, &out)?;
                    let e = &ds.examples[0];
                    let tr = systems::simulate_spring(&p, e.x0[0], e.x0[1], 20.0, 0.05)?;
                    systems::write_trajectory_csv(
                        std::fs::File::create(traj_path)?,
                        &tr.t,
                        &[("x", &tr.x), ("v", &tr.v)],
                        &[],
                    )?;
                }
                System::Tclab => {
                    let p: TclabParams = read_params(params_json.as_deref())?;
                    let ds = build_tclab_dataset(&p, duration, seed, noise.unwrap_or(0.25), stride)?;
                    write_dataset(&ds, &out)?;
                    let schedule = systems::gen_heater_schedule(seed, duration);
                    let tr = systems::simulate_tclab(&p, [p.t_inf, p.t_inf], &schedule, duration, 10.0)?;
                    systems::write_trajectory_csv(
                        std::fs::File::create(traj_path)?,
                        &tr.t,
                        &[("T1", &tr.t1), ("T2", &tr.t2)],
                        &[("Q1", &tr.q1), ("Q2", &tr.q2)],
                    )?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainSource { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = cfg.output_root();
            let a = experiments::train_source(&cfg)?;
            a.save(&root.join("source"))?;
            println!(
                "source test loss {:.6e}, best epoch {}, {:.1}s",
                a.test_loss, a.best_epoch, a.convergence_time_s
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::RunGrid { config, jobs, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = experiments::run_grid(&cfg, jobs, resume)?;
            let root = cfg.output_root();
            experiments::report(&root, true, true, cfg.n_perm, cfg.seed)?;
            println!(
                "{} planned, {} executed, {} skipped, {} failed",
                s.planned,
                s.executed,
                s.skipped,
                s.failures.len()
            );
            for (path, reason) in &s.failures {
                eprintln!("failed: {path}: {reason}");
            }
            Ok(if s.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Report {
            dir,
            anova,
            layer_changes,
            n_perm,
            seed,
        } => {
            let s = experiments::report(&dir, anova, layer_changes, n_perm, seed)?;
            println!("{} trials ({} aborted)", s.trials, s.aborted);
            for r in &s.anova {
                println!("{:>16} {:>10} F={:<12.4} p={:.4}", r.outcome, r.factor, r.f, r.p);
            }
            Ok(if s.aborted == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e @ (Error::Config(_) | Error::Json(_))) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
