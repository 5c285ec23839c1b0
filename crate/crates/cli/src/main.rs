use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use lesiontrack_core::config::{load_config_file, load_experiment_config, ExperimentConfig};
use lesiontrack_core::correspondence::Outcome;
use lesiontrack_core::experiments::{run_displacement_sweep, run_longitudinal_eval};
use lesiontrack_core::phantom::{generate_dataset, DatasetConfig};
use lesiontrack_core::report::{
    read_outcomes_csv, write_longitudinal_report, write_sweep_report, RunMetadata,
};
use lesiontrack_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(
    name = "lesiontrack",
    version,
    about = "Longitudinal lesion tracking evaluation"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal dataset.
    GenPhantom {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `n_cases` from the config.
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Longitudinal evaluation over a case manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Displacement sweep over the best lesions of an earlier evaluation.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `outcomes.csv` written by `eval`.
        #[arg(long)]
        baseline: PathBuf,
    },
}

fn experiment_config(path: &Path, cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = load_experiment_config(path)?;
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenPhantom { config, out, cases } => {
            let mut ds: DatasetConfig = match config {
                Some(p) => load_config_file(p)?,
                None => DatasetConfig::default(),
            };
            if let Some(s) = cli.seed {
                ds.phantom.seed = s;
            }
            if let Some(n) = cases {
                ds.n_cases = *n;
            }
            ds.phantom.validate()?;
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(w) = cli.workers.filter(|&w| w > 0) {
                pool = pool.num_threads(w);
            }
            let pool = pool
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            let rows = pool.install(|| generate_dataset(&ds.phantom, ds.n_cases, out))?;
            println!(
                "wrote {} cases with {} tracked lesions to {}",
                ds.n_cases,
                rows.len(),
                out.display()
            );
        }
        Command::Eval { config } => {
            let cfg = experiment_config(config, cli)?;
            let run = run_longitudinal_eval(&cfg)?;
            let identity = cfg.build_segmenter()?.identity();
            let meta = RunMetadata::new(&cfg, identity).stamped();
            let files = write_longitudinal_report(&run, &meta, &cfg.output_dir)?;
            info!("wrote {} files", files.len());
            let s = &run.summary;
            for (name, c) in [
                ("baseline", &s.outcomes_baseline),
                ("followup", &s.outcomes_followup),
            ] {
                let parts: Vec<String> = Outcome::ALL
                    .iter()
                    .map(|&o| format!("{}={}", o, c.get(o)))
                    .collect();
                println!("{name}: {}", parts.join(" "));
            }
            match &s.paired.test {
                Ok(t) => println!(
                    "paired dice: n={} W={} p={:.3e}",
                    s.paired.pairs.len(),
                    t.statistic,
                    t.p_value
                ),
                Err(msg) => println!("paired dice: n={} ({msg})", s.paired.pairs.len()),
            }
            if !run.case_errors.is_empty() {
                eprintln!(
                    "{} case(s) failed; see run_metadata.json",
                    run.case_errors.len()
                );
            }
            println!("results in {}", cfg.output_dir.display());
        }
        Command::Sweep { config, baseline } => {
            let cfg = experiment_config(config, cli)?;
            let prior = read_outcomes_csv(baseline)?;
            let run = run_displacement_sweep(&cfg, &prior)?;
            let identity = cfg.build_segmenter()?.identity();
            let meta = RunMetadata::new(&cfg, identity).stamped();
            write_sweep_report(&run, &meta, &cfg.output_dir)?;
            for row in &run.rows {
                println!(
                    "eps={:>5.1} mm  correct={:.3}  mean_dice={}",
                    row.epsilon_mm,
                    row.counts.proportion(Outcome::Correct),
                    row.mean_dice.map_or("-".into(), |d| format!("{d:.3}"))
                );
            }
            if !run.case_errors.is_empty() {
                eprintln!(
                    "{} case(s) failed; see sweep_run_metadata.json",
                    run.case_errors.len()
                );
            }
            println!("results in {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_DATA
            })
        }
    }
}
