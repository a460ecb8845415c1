//! Incentive pricing for federated learning with randomized client participation.
//!
//! A server posts per-client prices for participation probabilities; clients
//! answer with the probability that maximizes their profit (payment minus
//! quadratic cost plus an intrinsic value for the global model). The server
//! picks prices under a budget to minimize a convergence-gap bound of
//! unbiased, inverse-probability-weighted FedAvg.
//!
//! Modules:
//! - [`domain`]: client profiles, game constants and result types.
//! - [`bound`]: variance and convergence-gap bounds.
//! - [`game`]: client best responses, server solvers, baselines, diagnostics.
//! - [`fltrain`]: simulated federated training with Bernoulli participation.
//! - [`data`]: synthetic and IDX-backed federated datasets.
//! - [`calibrate`]: estimation of gradient bounds, the bound coefficient and
//!   local-optimum losses.
//! - [`formats`]: population files and run manifests.
//! - [`experiment`]: the end-to-end pipeline and report tables.

pub mod bound;
pub mod calibrate;
pub mod data;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod fltrain;
pub mod formats;
pub mod game;
pub mod numeric;

pub use domain::{
    make_population, BoundConstituents, ClientProfile, EquilibriumResult, FederatedDataset,
    GameConstants, ParticipationVector, PricingVector, Shard,
};
pub use error::{Error, Result};
