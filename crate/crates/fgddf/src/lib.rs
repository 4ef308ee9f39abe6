//! Decentralized Bayesian data fusion on Gaussian canonical-form factor graphs.
//!
//! Each agent in a tree-structured network maintains a local factor graph over
//! a heterogeneous subset of a global state, exchanges net-information factors
//! over per-link channel filters, and infers posteriors locally. The crate is
//! organized bottom-up:
//!
//! - [`canonical`]: information-form Gaussian factor algebra (scope-aligned
//!   addition/subtraction, Schur-complement marginalization, moment conversion).
//! - [`graph`]: bipartite factor-graph container with prediction, roll-up and
//!   measurement-update operations plus exact joint inference.
//! - [`inference`]: Gaussian sum-product on trees and clique formation for the
//!   cyclic graphs that arise after fusion.
//! - [`ddf`]: channel-filter bookkeeping and the heterogeneous-state fusion
//!   pipeline (marginalize, subtract common information, exchange factors).
//! - [`agent`]: per-agent runtime loop and the synchronous network simulator.
//! - [`scenario`]: declarative experiment configs, builders for the bundled
//!   target-tracking and cooperative-mapping scenarios, centralized baseline.
//! - [`metrics`]: Monte Carlo harness, RMSE/NEES/coverage metrics, and
//!   communication/computation cost ledgers.

pub mod agent;
pub mod canonical;
pub mod ddf;
pub mod error;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod scenario;

pub use agent::{AgentState, NetworkTopology, Observation, RunTrace};
pub use canonical::{CanonicalFactor, MomentGaussian, VariableId};
pub use ddf::{ChannelFilter, FusionMessage};
pub use error::{Error, Result};
pub use graph::{FactorGraph, FactorId, LinearDynamics, LinearMeasurement};
pub use metrics::{CostLedger, RunMetrics};
pub use scenario::ScenarioConfig;
