//! On-disk formats: population files (TOML), run manifests (JSON) and
//! per-run metric tables (CSV).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bound::convergence_gap_bound;
use crate::calibrate::LocalOptima;
use crate::domain::{make_population, ClientProfile, EquilibriumResult, GameConstants};
use crate::error::{Error, Result};
use crate::fltrain::RoundMetrics;
use crate::game::BaselineOutcome;

/// One `[[client]]` table of a population file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientRecord {
    /// Sample count.
    pub d: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub c: f64,
    pub v: f64,
    pub q_max: f64,
    /// Global objective at the client's own minimizer, when calibrated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_local: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<GameConstants>,
    /// Pooled-minimizer objective, the proxy for the global minimum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_star: Option<f64>,
    #[serde(rename = "client")]
    pub clients: Vec<ClientRecord>,
}

impl PopulationFile {
    pub fn from_profiles(profiles: &[ClientProfile], constants: Option<GameConstants>, optima: Option<&LocalOptima>) -> Self {
        Self {
            constants,
            f_star: optima.map(|o| o.pooled_proxy),
            clients: profiles
                .iter()
                .enumerate()
                .map(|(i, p)| ClientRecord {
                    d: p.datasize,
                    g: p.grad_bound,
                    c: p.cost_coeff,
                    v: p.intrinsic_pref,
                    q_max: p.q_max,
                    f_local: optima.map(|o| o.per_client[i]),
                })
                .collect(),
        }
    }

    pub fn profiles(&self) -> Result<Vec<ClientProfile>> {
        let col = |f: fn(&ClientRecord) -> f64| self.clients.iter().map(f).collect::<Vec<f64>>();
        make_population(&col(|r| r.d), &col(|r| r.g), &col(|r| r.c), &col(|r| r.v), &col(|r| r.q_max))
    }

    /// Calibrated local optima, present only when every client and the
    /// pooled proxy carry one.
    pub fn local_optima(&self) -> Option<LocalOptima> {
        let per_client = self.clients.iter().map(|r| r.f_local).collect::<Option<Vec<f64>>>()?;
        Some(LocalOptima {
            per_client,
            pooled_proxy: self.f_star?,
        })
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: Self = toml::from_str(s)?;
        if file.clients.is_empty() {
            return Err(Error::Format("population file has no [[client]] records".into()));
        }
        Ok(file)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

/// Pricing scheme behind a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Optimal,
    Uniform,
    Weighted,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Optimal, Scheme::Uniform, Scheme::Weighted];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Optimal => "optimal",
            Scheme::Uniform => "uniform",
            Scheme::Weighted => "weighted",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme `{s}` (expected optimal, uniform or weighted)")))
    }
}

/// Per-client line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientOutcome {
    pub n: usize,
    pub q: f64,
    pub price: f64,
    pub payment: f64,
    pub interior: bool,
}

/// A solved pricing scheme, as written to `manifest-<scheme>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scheme: Scheme,
    pub budget: f64,
    pub constants: GameConstants,
    pub clients: Vec<ClientOutcome>,
    /// Budget multiplier; absent for baselines.
    pub lambda_star: Option<f64>,
    pub v_threshold: Option<f64>,
    pub spend: f64,
    /// Absent when some client never participates.
    pub bound_value: Option<f64>,
    pub caps_binding: bool,
    pub solver: String,
    pub iterations: usize,
}

impl RunManifest {
    pub fn from_equilibrium(result: &EquilibriumResult, constants: &GameConstants) -> Self {
        Self {
            scheme: Scheme::Optimal,
            budget: result.budget,
            constants: constants.clone(),
            clients: (0..result.q_star.len())
                .map(|n| ClientOutcome {
                    n,
                    q: result.q_star[n],
                    price: result.p_star[n],
                    payment: result.payments[n],
                    interior: result.interior[n],
                })
                .collect(),
            lambda_star: Some(result.lambda_star),
            v_threshold: Some(result.v_threshold),
            spend: result.spend,
            bound_value: Some(result.bound_value),
            caps_binding: result.caps_binding,
            solver: result.solver.clone(),
            iterations: result.iterations,
        }
    }

    pub fn from_baseline(
        scheme: Scheme,
        outcome: &BaselineOutcome,
        profiles: &[ClientProfile],
        constants: &GameConstants,
        budget: f64,
    ) -> Self {
        let q = &outcome.q;
        let bound_value = q
            .iter()
            .all(|&x| x > 0.0)
            .then(|| convergence_gap_bound(q, profiles, constants).ok())
            .flatten();
        Self {
            scheme,
            budget,
            constants: constants.clone(),
            clients: (0..q.len())
                .map(|n| ClientOutcome {
                    n,
                    q: q[n],
                    price: outcome.prices[n],
                    payment: outcome.prices[n] * q[n],
                    interior: q[n] > 0.0 && q[n] < profiles[n].q_max,
                })
                .collect(),
            lambda_star: None,
            v_threshold: None,
            spend: outcome.spend,
            bound_value,
            caps_binding: q.iter().zip(profiles).all(|(&x, p)| x >= p.q_max),
            solver: format!("{scheme}-price-scaling"),
            iterations: outcome.iterations,
        }
    }

    /// Rebuilds the equilibrium of an optimal-scheme manifest.
    pub fn to_equilibrium(&self) -> Result<EquilibriumResult> {
        let (Some(lambda_star), Some(v_threshold), Some(bound_value)) = (self.lambda_star, self.v_threshold, self.bound_value) else {
            return Err(Error::Format(format!("{} manifest carries no equilibrium multiplier", self.scheme)));
        };
        Ok(EquilibriumResult {
            q_star: self.participation().into(),
            p_star: self.clients.iter().map(|c| c.price).collect::<Vec<_>>().into(),
            lambda_star,
            v_threshold,
            spend: self.spend,
            budget: self.budget,
            bound_value,
            payments: self.clients.iter().map(|c| c.payment).collect(),
            interior: self.clients.iter().map(|c| c.interior).collect(),
            caps_binding: self.caps_binding,
            solver: self.solver.clone(),
            iterations: self.iterations,
        })
    }

    pub fn participation(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.q).collect()
    }

    pub fn prices(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.price).collect()
    }

    pub fn negative_payment_count(&self) -> usize {
        self.clients.iter().filter(|c| c.price < 0.0).count()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// One line of a metric CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub round: usize,
    pub sim_time: f64,
    pub participants: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn metric_rows(run_id: &str, seed: u64, metrics: &[RoundMetrics]) -> Vec<MetricRow> {
    metrics
        .iter()
        .map(|m| MetricRow {
            run_id: run_id.to_string(),
            seed,
            round: m.round,
            sim_time: m.sim_time,
            participants: m.participants.len(),
            loss: m.loss,
            accuracy: m.accuracy,
        })
        .collect()
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let expected = ["run_id", "seed", "round", "sim_time", "participants", "loss", "accuracy"];
    if header.iter().ne(expected) {
        return Err(Error::Format(format!("unexpected metric header {:?}", header.iter().collect::<Vec<_>>())));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{baseline_uniform, server_solve, SolverOptions};

    fn population() -> (Vec<ClientProfile>, GameConstants) {
        let p = make_population(&[30.0, 10.0, 60.0], &[1.2, 0.8, 2.5], &[40.0, 55.0, 70.0], &[0.0, 900.0, 5000.0], &[1.0; 3])
            .unwrap();
        (p, GameConstants::new(3.0, 0.5, 200, 10))
    }

    #[test]
    fn population_round_trip() {
        let (p, k) = population();
        let optima = LocalOptima {
            per_client: vec![1.25, 1.5, 0.75],
            pooled_proxy: 0.5,
        };
        let file = PopulationFile::from_profiles(&p, Some(k.clone()), Some(&optima));
        let text = file.to_toml_string().unwrap();
        assert!(text.contains("[[client]]") && text.contains("G = 1.2"));
        let back = PopulationFile::from_toml_str(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.profiles().unwrap(), p);
        assert_eq!(back.constants, Some(k));
        assert_eq!(back.local_optima(), Some(optima));
    }

    #[test]
    fn population_grammar_errors() {
        assert!(PopulationFile::from_toml_str("").is_err());
        let missing = "[[client]]\nd = 1.0\nG = 1.0\nc = 1.0\nq_max = 1.0\n";
        assert!(matches!(PopulationFile::from_toml_str(missing), Err(Error::TomlDe(_))));
        let bad = "[[client]]\nd = 0.0\nG = 1.0\nc = 1.0\nv = 0.0\nq_max = 1.0\n";
        assert!(matches!(
            PopulationFile::from_toml_str(bad).unwrap().profiles(),
            Err(Error::InvalidClient { index: 0, .. })
        ));
    }

    #[test]
    fn manifest_round_trips_equilibrium() {
        let (p, k) = population();
        let r = server_solve(&p, &k, 200.0, &SolverOptions::default()).unwrap();
        let m = RunManifest::from_equilibrium(&r, &k);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_equilibrium().unwrap(), r);
    }

    #[test]
    fn baseline_manifest_has_no_multiplier() {
        let (p, k) = population();
        let u = baseline_uniform(&p, &k, 200.0, &SolverOptions::default()).unwrap();
        let m = RunManifest::from_baseline(Scheme::Uniform, &u, &p, &k, 200.0);
        assert!(m.lambda_star.is_none());
        assert!(m.to_equilibrium().is_err());
        assert_eq!(m.participation(), u.q.to_vec());
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let metrics = vec![
            RoundMetrics {
                round: 0,
                participants: vec![],
                loss: std::f64::consts::LN_2,
                accuracy: 0.5,
                sim_time: 0.0,
            },
            RoundMetrics {
                round: 1,
                participants: vec![0, 2],
                loss: 0.1 + 0.2,
                accuracy: 2.0 / 3.0,
                sim_time: 1.37,
            },
        ];
        let rows = metric_rows("optimal-s3", 3, &metrics);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("run_id,seed,round,sim_time,participants,loss,accuracy\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    #[test]
    fn scheme_names() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("best".parse::<Scheme>().is_err());
    }
}
