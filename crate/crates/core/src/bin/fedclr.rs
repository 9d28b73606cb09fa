use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedclr::config::{ExperimentConfig, Seeds};
use fedclr::data::{self, RatingFormat};
use fedclr::diagnostics::{write_reports, TrajectoryLog};
use fedclr::eval::write_per_user_csv;
use fedclr::experiment::{self, RunOptions};
use fedclr::{Error, Result};

#[derive(Parser)]
#[command(name = "fedclr", version, about = "Federated matrix factorization with low-rank client calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ExecArgs {
    /// Single worker thread, no Step 2 / aggregation overlap.
    #[arg(long)]
    serial: bool,
    /// Worker threads.
    #[arg(long, env = "FEDCLR_THREADS")]
    threads: Option<usize>,
    /// Run personalization and aggregation one after the other.
    #[arg(long)]
    no_overlap: bool,
}

impl ExecArgs {
    fn options(&self, stop_after: Option<usize>) -> RunOptions {
        RunOptions {
            serial: self.serial,
            threads: self.threads,
            overlap: !self.no_overlap,
            stop_after,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse, binarize, filter and split a rating log, and save the result.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        /// tab_separated, double_colon or csv.
        #[arg(long, default_value = "tab_separated")]
        format: RatingFormat,
        #[arg(long, default_value_t = 10)]
        min_interactions: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long, env = "FEDCLR_OUTPUT_DIR")]
        output: Option<PathBuf>,
        /// Sets every seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Repeat with seeds offset by 0..N and report mean and std.
        #[arg(long)]
        repeats: Option<usize>,
        /// Stop after this round, leaving a snapshot to resume from.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Override a field, e.g. `--set rank=4` or `--set ldp.noise_scale=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Continue a run from its latest snapshot.
    Resume {
        /// Run output directory.
        #[arg(long)]
        run: PathBuf,
        /// Must match the run's config (the round count may be raised).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// HR@K and NDCG@K of a snapshot.
    Evaluate {
        #[arg(long)]
        snapshot: PathBuf,
        /// Write per-user ranks to this CSV.
        #[arg(long)]
        per_user: Option<PathBuf>,
        /// Ignore personalization buffers.
        #[arg(long)]
        unmerged: bool,
    },
    /// Skew reports for a snapshot's clients.
    Diagnose {
        #[arg(long)]
        snapshot: PathBuf,
        /// Comma-separated client ids (default: the configured ones).
        #[arg(long, value_delimiter = ',')]
        clients: Option<Vec<usize>>,
        /// Write JSONL here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print the reports recorded during training instead.
        #[arg(long)]
        recorded: bool,
    },
    /// User-embedding trajectories recorded up to a snapshot, as CSV.
    ExportTrajectories {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, value_delimiter = ',')]
        clients: Option<Vec<usize>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run once per value of one config field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Field path or alias (rank, beta, eta, lambda, seed, ...).
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, env = "FEDCLR_OUTPUT_DIR")]
        output: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(Error::Config(format!("config not found: {}", path.display())));
    }
    ExperimentConfig::load(path)
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData {
            input,
            format,
            min_interactions,
            output,
            seed,
        } => {
            if !input.exists() {
                return Err(Error::Config(format!("dataset not found: {}", input.display())));
            }
            let ds = data::prepare(&input, format, min_interactions)?;
            let manifest = data::save_dataset(&ds, &output, seed)?;
            print_json(&manifest)
        }
        Command::Train {
            config,
            output,
            seed,
            repeats,
            stop_after,
            overrides,
            exec,
        } => {
            let mut cfg = load_config(&config)?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {o:?}")))?;
                cfg = cfg.with_param(k, v)?;
            }
            if let Some(s) = seed {
                cfg.seeds = Seeds::all(s);
            }
            if output.is_some() {
                cfg.output_dir = output;
            }
            let opts = exec.options(stop_after);
            match repeats {
                Some(n) if n > 1 => {
                    let summary = experiment::run_repeats(&cfg, n, &opts)?;
                    println!(
                        "{} over seeds {:?}: final HR@{k} {:.4} ± {:.4}, NDCG@{k} {:.4} ± {:.4}",
                        cfg.variant,
                        summary.seeds,
                        summary.final_hr.mean,
                        summary.final_hr.std,
                        summary.final_ndcg.mean,
                        summary.final_ndcg.std,
                        k = cfg.top_k
                    );
                    Ok(())
                }
                _ => print_json(&experiment::run_experiment(&cfg, &opts)?),
            }
        }
        Command::Resume {
            run,
            config,
            stop_after,
            exec,
        } => {
            let cfg = config.as_deref().map(load_config).transpose()?;
            print_json(&experiment::resume(&run, cfg.as_ref(), &exec.options(stop_after))?)
        }
        Command::Evaluate {
            snapshot,
            per_user,
            unmerged,
        } => {
            let mut snap = experiment::load_snapshot(&snapshot)?;
            if unmerged {
                snap.config.eval_merged = false;
            }
            let e = experiment::evaluate_snapshot(&snap)?;
            if let Some(path) = &per_user {
                write_per_user_csv(open_output(&Some(path.clone()))?, &snap.dataset, &e)?;
            }
            print_json(&serde_json::json!({
                "round": snap.round,
                "variant": snap.config.variant,
                "k": e.result.k,
                "users": e.result.users,
                "hr": e.result.hr,
                "ndcg": e.result.ndcg,
            }))
        }
        Command::Diagnose {
            snapshot,
            clients,
            output,
            recorded,
        } => {
            let snap = experiment::load_snapshot(&snapshot)?;
            let reports = if recorded {
                snap.reports()
                    .iter()
                    .filter(|r| clients.as_ref().is_none_or(|c| c.contains(&r.client)))
                    .cloned()
                    .collect()
            } else {
                experiment::diagnose_snapshot(&snap, clients.as_deref())?
            };
            write_reports(open_output(&output)?, &reports)
        }
        Command::ExportTrajectories {
            snapshot,
            clients,
            output,
        } => {
            let snap = experiment::load_snapshot(&snapshot)?;
            let all = snap.trajectories();
            let log = match clients {
                None => all.clone(),
                Some(c) => {
                    let mut log = TrajectoryLog::new(all.dim);
                    for (client, rows) in all.entries.iter().filter(|(k, _)| c.contains(k)) {
                        for (round, p) in rows {
                            log.record(*client, *round, p)?;
                        }
                    }
                    log
                }
            };
            log.write_csv(open_output(&output)?)
        }
        Command::Sweep {
            config,
            param,
            values,
            output,
            exec,
        } => {
            let cfg = load_config(&config)?;
            let out = output.or_else(|| cfg.output_dir.clone());
            let points = experiment::sweep(&cfg, &param, &values, out.as_deref(), &exec.options(None))?;
            for p in &points {
                let f = p.manifest.final_metrics;
                println!(
                    "{param}={}: HR@{k} {} NDCG@{k} {}{}",
                    p.value,
                    f.map_or("-".into(), |m| format!("{:.4}", m.hr)),
                    f.map_or("-".into(), |m| format!("{:.4}", m.ndcg)),
                    p.dir.as_ref().map_or(String::new(), |d| format!("  ({})", d.display())),
                    k = cfg.top_k
                );
            }
            Ok(())
        }
    }
}
