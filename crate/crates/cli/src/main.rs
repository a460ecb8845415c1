use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedprice::data::{read_dataset_file, write_dataset_file};
use fedprice::experiment::{self, ExperimentConfig, Preset};
use fedprice::formats::{PopulationFile, RunManifest, Scheme};

/// Stackelberg pricing for federated learning: solve, simulate, report.
#[derive(Parser, Debug)]
#[command(name = "fedprice", version)]
struct Cli {
    /// Experiment configuration (TOML); the preset is used when absent.
    #[arg(long, global = true, env = "FEDPRICE_CONFIG")]
    config: Option<PathBuf>,

    /// Built-in configuration.
    #[arg(long, global = true, env = "FEDPRICE_PRESET", default_value = "desk")]
    preset: String,

    /// Output directory.
    #[arg(long, global = true, env = "FEDPRICE_OUT", default_value = "run")]
    out: PathBuf,

    /// Base seed of the training runs.
    #[arg(long, global = true, env = "FEDPRICE_SEED")]
    seed: Option<u64>,

    /// Server budget.
    #[arg(long, global = true, env = "FEDPRICE_BUDGET")]
    budget: Option<f64>,

    /// Training runs per scheme.
    #[arg(long, global = true, env = "FEDPRICE_REPEATS")]
    repeats: Option<u32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or partition the dataset and write `dataset.feds`.
    GenData,
    /// Estimate gradient bounds, alpha and local optima; write `population.toml`.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Solve one pricing scheme; write `manifest-<scheme>.json`.
    Solve {
        #[arg(long)]
        population: PathBuf,
        #[arg(long, env = "FEDPRICE_SCHEME", default_value = "optimal")]
        scheme: String,
    },
    /// Train under a manifest's participation for each seed; write metric CSVs.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Full pipeline: data, calibration, three schemes, training, report.
    Experiment,
    /// Recompute the summary tables of a run directory.
    Report {
        /// Run directory; defaults to `--out`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::read(path).with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::preset(cli.preset.parse::<Preset>()?),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(r) = cli.repeats {
        cfg.repeats = r;
    }
    if let Some(b) = cli.budget {
        cfg.economics.budget = b;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn snapshot(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

/// Copies `src` into `dir` under `name` unless it already is that file.
fn place(src: &Path, dir: &Path, name: &str) -> Result<()> {
    let dst = dir.join(name);
    let same = match (src.canonicalize(), dst.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if !same {
        std::fs::copy(src, &dst).with_context(|| format!("copying {} to {}", src.display(), dst.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.clone();
    match &cli.command {
        Command::GenData => {
            let cfg = resolve_config(&cli)?;
            snapshot(&cfg, &out)?;
            let ds = experiment::prepare_dataset(&cfg)?;
            let path = out.join("dataset.feds");
            write_dataset_file(&ds, &path)?;
            println!(
                "wrote {} ({} clients, {} samples, {} test)",
                path.display(),
                ds.num_clients(),
                ds.total_samples,
                ds.test.len()
            );
        }
        Command::Calibrate { dataset } => {
            let cfg = resolve_config(&cli)?;
            snapshot(&cfg, &out)?;
            let ds = read_dataset_file(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
            let (profiles, constants, cal) = experiment::calibrate(&ds, &cfg)?;
            let path = out.join("population.toml");
            PopulationFile::from_profiles(&profiles, Some(constants), Some(&cal.optima)).write(&path)?;
            cal.write(out.join("calibration.json"))?;
            println!("wrote {} (alpha {:.6})", path.display(), cal.alpha);
        }
        Command::Solve { population, scheme } => {
            let scheme: Scheme = scheme.parse()?;
            let cfg = resolve_config(&cli)?;
            let file = PopulationFile::read(population).with_context(|| format!("reading population {}", population.display()))?;
            let profiles = file.profiles()?;
            let constants = match (&file.constants, cfg.game.alpha) {
                (Some(k), _) => k.clone(),
                (None, Some(a)) => cfg.constants(a),
                (None, None) => bail!("population file has no [constants] table and the config sets no game.alpha"),
            };
            let m = experiment::solve_scheme(scheme, &profiles, &constants, cfg.economics.budget, &cfg.solver)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("manifest-{scheme}.json"));
            m.write(&path)?;
            println!(
                "{scheme}: spend {:.6} of budget {}, bound {}, {} negative-payment clients -> {}",
                m.spend,
                m.budget,
                m.bound_value.map_or_else(|| "n/a".into(), |b| format!("{b:.6}")),
                m.negative_payment_count(),
                path.display()
            );
        }
        Command::Train {
            dataset,
            population,
            manifest,
        } => {
            let cfg = resolve_config(&cli)?;
            snapshot(&cfg, &out)?;
            let ds = read_dataset_file(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
            let profiles = PopulationFile::read(population)?.profiles()?;
            let m = RunManifest::read(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
            if m.clients.len() != ds.num_clients() || profiles.len() != ds.num_clients() {
                bail!(
                    "dataset has {} clients, population {}, manifest {}",
                    ds.num_clients(),
                    profiles.len(),
                    m.clients.len()
                );
            }
            place(population, &out, "population.toml")?;
            place(manifest, &out, &format!("manifest-{}.json", m.scheme))?;
            let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|k| cfg.seed + k).collect();
            let files = experiment::train_manifest(&ds, &cfg, &m, &profiles, &seeds, &out)?;
            println!("wrote {} metric files under {}", files.len(), out.join("metrics").display());
        }
        Command::Experiment => {
            let cfg = resolve_config(&cli)?;
            let summary = experiment::run_experiment(&cfg, &out)?;
            print!("{}", experiment::render_markdown(&summary));
        }
        Command::Report { run } => {
            let dir = run.clone().unwrap_or(out);
            let summary = experiment::report(&dir)?;
            experiment::write_report(&summary, &dir)?;
            print!("{}", experiment::render_markdown(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
