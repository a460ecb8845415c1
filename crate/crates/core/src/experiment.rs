//! End-to-end pipeline: dataset, calibration, the three pricing schemes,
//! seeded training runs, and the report tables computed from saved files.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml               snapshot sufficient to rerun bit-identically
//! dataset.feds              binary dataset container
//! population.toml           calibrated population and game constants
//! calibration.json          gradient bounds, alpha pilots, local optima
//! manifest-<scheme>.json    one per pricing scheme
//! metrics/<scheme>-seed<k>.csv
//! summary.json, summary.md  report tables
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    estimate_alpha, estimate_grad_bounds, local_optimum_losses, GradEstimator, LocalOptima, OptimumOptions,
    PilotObservation,
};
use crate::data::{
    filter_labels, gen_synthetic, load_idx, partition_label_limited, subsample, write_dataset_file, PartitionParams,
    SyntheticParams,
};
use crate::domain::{make_population, ClientProfile, FederatedDataset, GameConstants};
use crate::error::{Error, Result};
use crate::fltrain::{train, LrSchedule, RoundMetrics, SimTiming, TrainConfig};
use crate::formats::{metric_rows, read_metrics_csv, write_metrics_csv, MetricRow, PopulationFile, RunManifest, Scheme};
use crate::game::{baseline_uniform, baseline_weighted, client_utility, server_solve, SolverOptions};
use crate::numeric::{compensated_sum, mean};

/// Where the federated dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticParams),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Labels kept (and renumbered in this order); all when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_filter: Option<Vec<usize>>,
        classes: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subsample: Option<usize>,
        partition: PartitionParams,
    },
}

/// Budget and the means of the exponential cost and value draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Economics {
    pub budget: f64,
    pub mean_cost: f64,
    pub mean_value: f64,
    pub q_max: f64,
    /// Seed of the unit exponential draws scaled by the means.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSettings {
    pub rounds: u32,
    pub local_steps: u32,
    pub q_floor: f64,
    pub beta: f64,
    /// Fixed bound coefficient; fitted from pilot runs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch: usize,
    pub lr: LrSchedule,
    pub l2: f64,
    pub eval_stride: usize,
    pub timing: SimTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    /// Full-participation rounds used to observe gradient norms.
    pub pilot_rounds: u32,
    pub estimator: GradEstimator,
    /// Uniform participation levels of the alpha pilots (at least two distinct).
    pub alpha_levels: Vec<f64>,
    /// Seeds per alpha pilot level.
    pub alpha_seeds: u32,
    pub optimum: OptimumOptions,
}

/// Report targets; filled by the automatic rule when absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Base seed of the training runs; run `k` uses `seed + k`.
    pub seed: u64,
    pub repeats: u32,
    pub data: DataSource,
    pub economics: Economics,
    pub game: GameSettings,
    pub train: TrainSettings,
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub targets: Targets,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Setup1,
    Setup2,
    Setup3,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "setup1" => Ok(Preset::Setup1),
            "setup2" => Ok(Preset::Setup2),
            "setup3" => Ok(Preset::Setup3),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::InvalidParameter(format!(
                "unknown preset `{s}` (expected setup1, setup2, setup3 or desk)"
            ))),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale settings of the three reference setups, and the desk-scale
    /// synthetic analogue.
    pub fn preset(preset: Preset) -> Self {
        let synthetic = |clients, total_samples| {
            DataSource::Synthetic(SyntheticParams {
                clients,
                total_samples,
                ..Default::default()
            })
        };
        let economics = |budget, mean_cost, mean_value| Economics {
            budget,
            mean_cost,
            mean_value,
            q_max: 1.0,
            seed: 7,
        };
        let full_game = GameSettings {
            rounds: 1000,
            local_steps: 100,
            q_floor: 0.01,
            beta: 0.0,
            alpha: None,
        };
        let base = Self {
            name: "desk".into(),
            seed: 0,
            repeats: 5,
            data: synthetic(10, 5_600),
            economics: economics(200.0, 50.0, 4_000.0),
            game: GameSettings {
                rounds: 200,
                local_steps: 10,
                ..full_game.clone()
            },
            train: TrainSettings {
                batch: 24,
                lr: LrSchedule::Exponential {
                    initial: 0.1,
                    decay: 0.996,
                },
                l2: 1e-4,
                eval_stride: 1,
                timing: SimTiming::default(),
            },
            calibration: CalibrationSettings {
                pilot_rounds: 20,
                estimator: GradEstimator::Max,
                alpha_levels: vec![1.0, 0.5, 0.25],
                alpha_seeds: 5,
                optimum: OptimumOptions::default(),
            },
            targets: Targets::default(),
            solver: SolverOptions::default(),
        };
        match preset {
            Preset::Desk => base,
            Preset::Setup1 => Self {
                name: "setup1".into(),
                repeats: 20,
                data: synthetic(40, 22_377),
                game: full_game,
                train: TrainSettings {
                    eval_stride: 10,
                    ..base.train.clone()
                },
                ..base
            },
            Preset::Setup2 => Self {
                name: "setup2".into(),
                repeats: 20,
                data: DataSource::Idx {
                    images: "mnist/train-images-idx3-ubyte".into(),
                    labels: "mnist/train-labels-idx1-ubyte".into(),
                    label_filter: None,
                    classes: 10,
                    subsample: Some(14_463),
                    partition: PartitionParams::default(),
                },
                economics: economics(40.0, 20.0, 30_000.0),
                game: full_game,
                train: TrainSettings {
                    eval_stride: 10,
                    ..base.train.clone()
                },
                ..base
            },
            Preset::Setup3 => Self {
                name: "setup3".into(),
                repeats: 20,
                data: DataSource::Idx {
                    images: "emnist/emnist-byclass-train-images-idx3-ubyte".into(),
                    labels: "emnist/emnist-byclass-train-labels-idx1-ubyte".into(),
                    // Lowercase letters of the by-class split.
                    label_filter: Some((36..62).collect()),
                    classes: 26,
                    subsample: Some(35_155),
                    partition: PartitionParams {
                        classes_max: 10,
                        ..Default::default()
                    },
                },
                economics: economics(500.0, 80.0, 10_000.0),
                game: full_game,
                train: TrainSettings {
                    eval_stride: 10,
                    ..base.train.clone()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.economics;
        if !(e.budget >= 0.0 && e.mean_cost > 0.0 && e.mean_value >= 0.0 && e.q_max > 0.0 && e.q_max <= 1.0) {
            return Err(Error::InvalidParameter(format!("invalid economics {e:?}")));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be at least 1".into()));
        }
        if self.calibration.alpha_levels.len() < 2 && self.game.alpha.is_none() {
            return Err(Error::InvalidParameter(
                "alpha calibration needs at least two participation levels".into(),
            ));
        }
        if let Some(a) = self.game.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(format!("alpha {a} must be positive")));
            }
        }
        self.solver.validate()?;
        self.constants(1.0).validate()
    }

    pub fn constants(&self, alpha: f64) -> GameConstants {
        GameConstants::new(alpha, self.game.beta, self.game.rounds, self.game.local_steps).with_q_floor(self.game.q_floor)
    }

    pub fn train_config(&self, participation: Vec<f64>, seed: u64) -> TrainConfig {
        TrainConfig {
            local_steps: self.game.local_steps,
            batch: self.train.batch,
            lr: self.train.lr,
            l2: self.train.l2,
            rounds: self.game.rounds,
            seed,
            participation,
            eval_stride: self.train.eval_stride,
            timing: self.train.timing,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<FederatedDataset> {
    match &cfg.data {
        DataSource::Synthetic(p) => gen_synthetic(p),
        DataSource::Idx {
            images,
            labels,
            label_filter,
            classes,
            subsample: n,
            partition,
        } => {
            let mut samples = load_idx(images, labels)?;
            if let Some(keep) = label_filter {
                samples = filter_labels(&samples, keep);
            }
            if let Some(n) = n {
                samples = subsample(&samples, *n, partition.seed)?;
            }
            partition_label_limited(&samples, *classes, partition)
        }
    }
}

/// `c_n = mean_cost * e_n`, `v_n = mean_value * f_n` with unit exponential
/// draws `e_n, f_n` from the economics seed, so the draws are shared across
/// different means.
pub fn draw_economics(clients: usize, econ: &Economics) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(econ.seed);
    let units: Vec<(f64, f64)> = (0..clients)
        .map(|_| {
            let e: f64 = Exp1.sample(&mut rng);
            let f: f64 = Exp1.sample(&mut rng);
            (e, f)
        })
        .collect();
    (
        units.iter().map(|u| econ.mean_cost * u.0).collect(),
        units.iter().map(|u| econ.mean_value * u.1).collect(),
    )
}

/// Everything estimated from pilot training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub grad_bounds: Vec<f64>,
    pub alpha: f64,
    /// True when alpha came from the configuration rather than pilots.
    pub alpha_fixed: bool,
    pub pilots: Vec<PilotObservation>,
    pub optima: LocalOptima,
}

impl Calibration {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn calibrate(ds: &FederatedDataset, cfg: &ExperimentConfig) -> Result<(Vec<ClientProfile>, GameConstants, Calibration)> {
    let n = ds.num_clients();
    let cal = &cfg.calibration;
    let pilot_cfg = cfg.train_config(vec![1.0; n], cfg.seed);
    let grad_bounds = estimate_grad_bounds(ds, &pilot_cfg, cal.pilot_rounds, cfg.seed, cal.estimator)?;
    let (c, v) = draw_economics(n, &cfg.economics);
    let d: Vec<f64> = ds.shard_sizes().into_iter().map(|s| s as f64).collect();
    let profiles = make_population(&d, &grad_bounds, &c, &v, &vec![cfg.economics.q_max; n])?;

    let (alpha, pilots) = match cfg.game.alpha {
        Some(a) => (a, Vec::new()),
        None => {
            let runs: Vec<(f64, u64)> = cal
                .alpha_levels
                .iter()
                .flat_map(|&q| (0..cal.alpha_seeds as u64).map(move |s| (q, s)))
                .collect();
            let pilots = runs
                .par_iter()
                .map(|&(q, s)| {
                    let seed = cfg.seed.wrapping_add(1_000_003).wrapping_add(s);
                    let metrics = train(ds, &cfg.train_config(vec![q; n], seed), &profiles)?;
                    Ok(PilotObservation {
                        participation: vec![q; n],
                        seed,
                        loss: metrics.last().expect("round 0 is always recorded").loss,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let alpha = estimate_alpha(&pilots, &profiles, cfg.game.rounds)?;
            if alpha <= 0.0 {
                return Err(Error::IllConditioned(
                    "pilot losses do not fall with participation; set game.alpha explicitly".into(),
                ));
            }
            (alpha, pilots)
        }
    };
    let optima = local_optimum_losses(ds, cfg.train.l2, &cal.optimum)?;
    let constants = cfg.constants(alpha);
    constants.validate_for(&profiles)?;
    Ok((
        profiles,
        constants,
        Calibration {
            grad_bounds,
            alpha,
            alpha_fixed: cfg.game.alpha.is_some(),
            pilots,
            optima,
        },
    ))
}

/// Solves one pricing scheme at the given budget.
pub fn solve_scheme(
    scheme: Scheme,
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
    opts: &SolverOptions,
) -> Result<RunManifest> {
    Ok(match scheme {
        Scheme::Optimal => RunManifest::from_equilibrium(&server_solve(profiles, constants, budget, opts)?, constants),
        Scheme::Uniform => RunManifest::from_baseline(
            scheme,
            &baseline_uniform(profiles, constants, budget, opts)?,
            profiles,
            constants,
            budget,
        ),
        Scheme::Weighted => RunManifest::from_baseline(
            scheme,
            &baseline_weighted(profiles, constants, budget, opts)?,
            profiles,
            constants,
            budget,
        ),
    })
}

pub fn metrics_file(dir: &Path, scheme: Scheme, seed: u64) -> PathBuf {
    dir.join("metrics").join(format!("{scheme}-seed{seed}.csv"))
}

/// Trains under a manifest's participation for each seed and writes one CSV
/// per run.
pub fn train_manifest(
    ds: &FederatedDataset,
    cfg: &ExperimentConfig,
    manifest: &RunManifest,
    profiles: &[ClientProfile],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out.join("metrics"))?;
    seeds
        .par_iter()
        .map(|&seed| {
            let metrics: Vec<RoundMetrics> = train(ds, &cfg.train_config(manifest.participation(), seed), profiles)?;
            let path = metrics_file(out, manifest.scheme, seed);
            write_metrics_csv(&path, &metric_rows(&format!("{}-seed{seed}", manifest.scheme), seed, &metrics))?;
            Ok(path)
        })
        .collect()
}

/// Runs the whole pipeline into `out` and returns the report.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let ds = prepare_dataset(cfg)?;
    write_dataset_file(&ds, out.join("dataset.feds"))?;
    log::info!("dataset: {} clients, {} samples", ds.num_clients(), ds.total_samples);

    let (profiles, constants, cal) = calibrate(&ds, cfg)?;
    log::info!("calibrated alpha {}", cal.alpha);
    PopulationFile::from_profiles(&profiles, Some(constants.clone()), Some(&cal.optima)).write(out.join("population.toml"))?;
    cal.write(out.join("calibration.json"))?;

    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|k| cfg.seed + k).collect();
    for scheme in Scheme::ALL {
        let manifest = solve_scheme(scheme, &profiles, &constants, cfg.economics.budget, &cfg.solver)?;
        manifest.write(out.join(format!("manifest-{scheme}.json")))?;
        train_manifest(&ds, cfg, &manifest, &profiles, &seeds, out)?;
    }
    let summary = report(out)?;
    write_report(&summary, out)?;
    Ok(summary)
}

/// Per-scheme row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub seeds: Vec<u64>,
    pub mean_final_loss: f64,
    pub sd_final_loss: f64,
    pub mean_final_accuracy: f64,
    /// Per seed; `None` when the run never reaches the target.
    pub rounds_to_target_loss: Vec<Option<usize>>,
    pub time_to_target_loss: Vec<Option<f64>>,
    /// Simulated time at which the seed-averaged curve reaches the target.
    pub mean_curve_time_to_target_loss: Option<f64>,
    pub mean_curve_time_to_target_accuracy: Option<f64>,
    pub total_client_utility: f64,
    pub negative_payments: usize,
    pub spend: f64,
    pub bound_value: Option<f64>,
    /// Seed-averaged loss per recorded round.
    pub mean_loss_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target_loss: f64,
    pub target_accuracy: f64,
    pub timing: SimTiming,
    pub schemes: Vec<SchemeSummary>,
    /// Seeds where optimal pricing reaches the target loss no later (in
    /// rounds) than uniform pricing, out of the seeds both ran.
    pub optimal_not_slower_than_uniform: (usize, usize),
    pub utility_gain_vs_uniform: Option<f64>,
    pub utility_gain_vs_weighted: Option<f64>,
}

impl Summary {
    pub fn scheme(&self, s: Scheme) -> Option<&SchemeSummary> {
        self.schemes.iter().find(|x| x.scheme == s)
    }
}

/// Seed-averaged series over runs sharing their recorded rounds.
fn mean_curve(runs: &[Vec<MetricRow>], value: fn(&MetricRow) -> f64) -> Result<Vec<(usize, f64, f64)>> {
    let first = &runs[0];
    if runs.iter().any(|r| r.len() != first.len() || r.iter().zip(first).any(|(a, b)| a.round != b.round)) {
        return Err(Error::Format("metric files of one scheme record different rounds".into()));
    }
    Ok((0..first.len())
        .map(|i| {
            let xs: Vec<f64> = runs.iter().map(|r| value(&r[i])).collect();
            let ts: Vec<f64> = runs.iter().map(|r| r[i].sim_time).collect();
            (first[i].round, mean(&xs), mean(&ts))
        })
        .collect())
}

fn first_reaching(curve: &[(usize, f64, f64)], hit: impl Fn(f64) -> bool) -> Option<(usize, f64)> {
    curve.iter().find(|p| hit(p.1)).map(|p| (p.0, p.2))
}

fn load_runs(dir: &Path, scheme: Scheme) -> Result<Vec<(u64, Vec<MetricRow>)>> {
    let prefix = format!("{scheme}-seed");
    let mut runs = Vec::new();
    let metrics_dir = dir.join("metrics");
    if !metrics_dir.is_dir() {
        return Ok(runs);
    }
    for entry in std::fs::read_dir(metrics_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(seed) = name.strip_prefix(&prefix).and_then(|s| s.strip_suffix(".csv")) else {
            continue;
        };
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Format(format!("metric file {name} has no numeric seed")))?;
        let rows = read_metrics_csv(&path)?;
        if rows.is_empty() {
            return Err(Error::Format(format!("metric file {name} is empty")));
        }
        runs.push((seed, rows));
    }
    runs.sort_by_key(|r| r.0);
    Ok(runs)
}

/// Sum of client utilities at a manifest's prices and participation.
pub fn total_client_utility(manifest: &RunManifest, profiles: &[ClientProfile], offsets: &[f64]) -> f64 {
    let q = manifest.participation();
    compensated_sum(manifest.clients.iter().map(|c| {
        client_utility(c.n, c.q, c.price, profiles, &manifest.constants, &q, offsets[c.n])
    }))
}

/// Builds the report from a run directory's population, manifests and CSVs.
///
/// Targets come from `config.toml` when set. Otherwise the loss target is
/// `L + 0.1 (L0 - L)`, with `L` the highest seed-averaged final loss over
/// schemes and `L0` the seed-averaged initial loss, and the accuracy target is
/// `A - 0.1 (A - A0)` with `A` the lowest seed-averaged final accuracy.
pub fn report(dir: &Path) -> Result<Summary> {
    let cfg = ExperimentConfig::read(dir.join("config.toml"))?;
    let population = PopulationFile::read(dir.join("population.toml"))?;
    let profiles = population.profiles()?;
    let beta_over_r = cfg.game.beta / cfg.game.rounds as f64;
    let offsets = population
        .local_optima()
        .map(|o| o.value_offsets(&profiles, beta_over_r))
        .unwrap_or_else(|| vec![0.0; profiles.len()]);

    struct Loaded {
        manifest: RunManifest,
        runs: Vec<(u64, Vec<MetricRow>)>,
        loss: Vec<(usize, f64, f64)>,
        accuracy: Vec<(usize, f64, f64)>,
    }
    let mut loaded = Vec::new();
    for scheme in Scheme::ALL {
        let path = dir.join(format!("manifest-{scheme}.json"));
        if !path.exists() {
            continue;
        }
        let manifest = RunManifest::read(path)?;
        let runs = load_runs(dir, scheme)?;
        if runs.is_empty() {
            return Err(Error::Format(format!("no metric files for scheme {scheme}")));
        }
        let rows: Vec<Vec<MetricRow>> = runs.iter().map(|r| r.1.clone()).collect();
        loaded.push(Loaded {
            loss: mean_curve(&rows, |r| r.loss)?,
            accuracy: mean_curve(&rows, |r| r.accuracy)?,
            manifest,
            runs,
        });
    }
    if loaded.is_empty() {
        return Err(Error::Format(format!("no manifests in {}", dir.display())));
    }

    let final_loss = |l: &Loaded| l.loss.last().expect("non-empty").1;
    let final_acc = |l: &Loaded| l.accuracy.last().expect("non-empty").1;
    let target_loss = cfg.targets.loss.unwrap_or_else(|| {
        let hi = loaded.iter().map(final_loss).fold(f64::NEG_INFINITY, f64::max);
        let start = mean(&loaded.iter().map(|l| l.loss[0].1).collect::<Vec<_>>());
        hi + 0.1 * (start - hi)
    });
    let target_accuracy = cfg.targets.accuracy.unwrap_or_else(|| {
        let lo = loaded.iter().map(final_acc).fold(f64::INFINITY, f64::min);
        let start = mean(&loaded.iter().map(|l| l.accuracy[0].1).collect::<Vec<_>>());
        lo - 0.1 * (lo - start)
    });

    let schemes: Vec<SchemeSummary> = loaded
        .iter()
        .map(|l| {
            let finals: Vec<f64> = l.runs.iter().map(|r| r.1.last().expect("non-empty").loss).collect();
            let m = mean(&finals);
            let sd = if finals.len() > 1 {
                (finals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (finals.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            let hits: Vec<Option<&MetricRow>> = l
                .runs
                .iter()
                .map(|r| r.1.iter().find(|row| row.loss <= target_loss))
                .collect();
            SchemeSummary {
                scheme: l.manifest.scheme,
                seeds: l.runs.iter().map(|r| r.0).collect(),
                mean_final_loss: m,
                sd_final_loss: sd,
                mean_final_accuracy: final_acc(l),
                rounds_to_target_loss: hits.iter().map(|h| h.map(|r| r.round)).collect(),
                time_to_target_loss: hits.iter().map(|h| h.map(|r| r.sim_time)).collect(),
                mean_curve_time_to_target_loss: first_reaching(&l.loss, |v| v <= target_loss).map(|h| h.1),
                mean_curve_time_to_target_accuracy: first_reaching(&l.accuracy, |v| v >= target_accuracy).map(|h| h.1),
                total_client_utility: total_client_utility(&l.manifest, &profiles, &offsets),
                negative_payments: l.manifest.negative_payment_count(),
                spend: l.manifest.spend,
                bound_value: l.manifest.bound_value,
                mean_loss_curve: l.loss.iter().map(|p| (p.0, p.1)).collect(),
            }
        })
        .collect();

    let by = |s: Scheme| schemes.iter().find(|x| x.scheme == s);
    let optimal_not_slower_than_uniform = match (by(Scheme::Optimal), by(Scheme::Uniform)) {
        (Some(o), Some(u)) => {
            let uniform: BTreeMap<u64, Option<usize>> = u.seeds.iter().copied().zip(u.rounds_to_target_loss.iter().copied()).collect();
            let mut wins = 0;
            let mut total = 0;
            for (seed, ro) in o.seeds.iter().zip(&o.rounds_to_target_loss) {
                if let Some(ru) = uniform.get(seed) {
                    total += 1;
                    // A run that never reaches the target counts as infinitely slow.
                    let key = |r: &Option<usize>| r.unwrap_or(usize::MAX);
                    if key(ro) <= key(ru) {
                        wins += 1;
                    }
                }
            }
            (wins, total)
        }
        _ => (0, 0),
    };
    let gain = |other: Scheme| Some(by(Scheme::Optimal)?.total_client_utility - by(other)?.total_client_utility);
    Ok(Summary {
        target_loss,
        target_accuracy,
        timing: cfg.train.timing,
        optimal_not_slower_than_uniform,
        utility_gain_vs_uniform: gain(Scheme::Uniform),
        utility_gain_vs_weighted: gain(Scheme::Weighted),
        schemes,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "not reached".to_string(), |v| format!("{v:.2}"))
}

/// Markdown rendering of the report tables.
pub fn render_markdown(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Experiment summary\n");
    let _ = writeln!(
        out,
        "Simulated time per round: {} + {} x (largest participant shard x E / batch).",
        s.timing.base, s.timing.per_step
    );
    let _ = writeln!(out, "Target loss {:.6}, target accuracy {:.4}.\n", s.target_loss, s.target_accuracy);
    let _ = writeln!(out, "## Model performance\n");
    let _ = writeln!(
        out,
        "| scheme | runs | final loss (mean) | final loss (sd) | final accuracy | time to target loss | time to target accuracy | runs reaching target loss |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
    for x in &s.schemes {
        let reached = x.rounds_to_target_loss.iter().filter(|r| r.is_some()).count();
        let _ = writeln!(
            out,
            "| {} | {} | {:.6} | {:.6} | {:.4} | {} | {} | {}/{} |",
            x.scheme,
            x.seeds.len(),
            x.mean_final_loss,
            x.sd_final_loss,
            x.mean_final_accuracy,
            fmt_opt(x.mean_curve_time_to_target_loss),
            fmt_opt(x.mean_curve_time_to_target_accuracy),
            reached,
            x.seeds.len()
        );
    }
    let _ = writeln!(
        out,
        "\nOptimal pricing reaches the target loss no later than uniform pricing in {}/{} seeds.\n",
        s.optimal_not_slower_than_uniform.0, s.optimal_not_slower_than_uniform.1
    );
    let _ = writeln!(out, "## Clients (intrinsic values use the pooled-minimizer proxy for F*)\n");
    let _ = writeln!(out, "| scheme | total client utility | negative-payment clients | spend | bound |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for x in &s.schemes {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {} | {:.6} | {} |",
            x.scheme,
            x.total_client_utility,
            x.negative_payments,
            x.spend,
            x.bound_value.map_or_else(|| "n/a".into(), |b| format!("{b:.6}"))
        );
    }
    if let Some(g) = s.utility_gain_vs_uniform {
        let _ = writeln!(out, "\nUtility gain of optimal over uniform: {g:.4}");
    }
    if let Some(g) = s.utility_gain_vs_weighted {
        let _ = writeln!(out, "Utility gain of optimal over weighted: {g:.4}");
    }
    out
}

pub fn write_report(s: &Summary, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(s)? + "\n")?;
    std::fs::write(dir.join("summary.md"), render_markdown(s))?;
    Ok(())
}
