//! Channel-filter common-information tracking and heterogeneous fusion.
//!
//! Each communication link carries a [`ChannelFilter`]: a factor graph over
//! the link's common variables accumulating every factor ever sent or
//! received there. Sending marginalizes the local graph onto the common set,
//! subtracts the channel-filter content, and ships the net new information as
//! one factor; fusing adds received factors to both the local graph and the
//! channel filter.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalFactor, VariableId};
use crate::error::{Error, Result};
use crate::graph::FactorGraph;

/// Per-link bookkeeping of the information exchanged with one neighbor.
#[derive(Debug, Clone)]
pub struct ChannelFilter {
    peer: String,
    common_vars: BTreeSet<VariableId>,
    cf_graph: FactorGraph,
    fused: BTreeSet<(String, u64)>,
}

impl ChannelFilter {
    /// An empty channel filter over the link's common variable set.
    pub fn new(peer: impl Into<String>, common_vars: Vec<VariableId>) -> Result<Self> {
        let mut cf_graph = FactorGraph::new();
        let mut set = BTreeSet::new();
        for v in common_vars {
            cf_graph.add_variable(v.clone())?;
            set.insert(v);
        }
        Ok(Self {
            peer: peer.into(),
            common_vars: set,
            cf_graph,
            fused: BTreeSet::new(),
        })
    }

    /// A channel filter primed with factors both ends already hold (typically
    /// the shared prior over the common variables), so that the first message
    /// carries only genuinely new information.
    pub fn with_common_priors(
        peer: impl Into<String>,
        common_vars: Vec<VariableId>,
        priors: &[CanonicalFactor],
    ) -> Result<Self> {
        let mut cf = Self::new(peer, common_vars)?;
        for p in priors {
            cf.cf_graph.add_factor(p.clone())?;
        }
        Ok(cf)
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn common_vars(&self) -> &BTreeSet<VariableId> {
        &self.common_vars
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.cf_graph
    }

    /// Joint of everything accumulated on this link, over the common set.
    pub fn common_joint(&self) -> CanonicalFactor {
        self.cf_graph.joint()
    }

    fn check_scope(&self, f: &CanonicalFactor) -> Result<()> {
        for v in f.scope() {
            if !self.common_vars.contains(v) {
                return Err(Error::Protocol(format!(
                    "factor scope variable `{}` is outside the common set of link to `{}`",
                    v.name(),
                    self.peer
                )));
            }
        }
        Ok(())
    }
}

/// One per-link fusion payload: a set of canonical factors scoped to the
/// link's common variables. This implementation always collapses the set to
/// a single net new-information factor (possibly zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireMessage", into = "WireMessage")]
pub struct FusionMessage {
    pub sender: String,
    pub receiver: String,
    pub step: u64,
    pub factors: Vec<CanonicalFactor>,
}

impl FusionMessage {
    /// Communication cost in scalars: `n + n(n+1)/2` per factor (information
    /// vector plus upper triangle of the information matrix).
    pub fn scalar_count(&self) -> u64 {
        self.factors
            .iter()
            .map(|f| {
                let n = f.dim() as u64;
                n + n * (n + 1) / 2
            })
            .sum()
    }

    /// True if every factor carries (numerically) zero information.
    pub fn is_zero(&self, tol: f64) -> bool {
        self.factors.iter().all(|f| f.is_zero(tol))
    }
}

/// Send side of the fusion pipeline.
///
/// Copies the local graph, rolls up every variable outside the link's common
/// set, subtracts the channel-filter joint, records the net factor in the
/// channel filter and returns it as the message. The local graph itself is
/// untouched. If a common variable cannot be isolated because the roll-up
/// hits a singular block, fusion on this link is deferred for this step.
pub fn prepare_message(
    local: &FactorGraph,
    cf: &mut ChannelFilter,
    sender: &str,
    step: u64,
) -> Result<FusionMessage> {
    for v in &cf.common_vars {
        if !local.has_variable(v.name()) {
            return Err(Error::UnknownVariable(v.name().to_string()));
        }
    }
    let mut scratch = local.clone();
    let to_remove: Vec<String> = scratch
        .variables()
        .into_iter()
        .map(|v| v.name().to_string())
        .filter(|n| !cf.common_vars.iter().any(|c| c.name() == n))
        .collect();
    for name in &to_remove {
        scratch.rollup(name).map_err(|e| match e {
            Error::SingularMarginalization(msg) => Error::FusionDeferred {
                peer: cf.peer.clone(),
                reason: msg,
            },
            other => other,
        })?;
    }
    let marginal = scratch.joint();
    let net = marginal.subtract(&cf.common_joint())?;
    cf.cf_graph.add_factor(net.clone())?;
    Ok(FusionMessage {
        sender: sender.to_string(),
        receiver: cf.peer.clone(),
        step,
        factors: vec![net],
    })
}

/// Receive side of the fusion pipeline: every factor of the message is added
/// to both the local graph and the channel filter, nothing else changes.
/// The whole message is rejected on any scope violation or on duplicate
/// delivery (same sender and step).
pub fn fuse_message(
    local: &mut FactorGraph,
    cf: &mut ChannelFilter,
    msg: &FusionMessage,
) -> Result<()> {
    let key = (msg.sender.clone(), msg.step);
    if cf.fused.contains(&key) {
        return Err(Error::Protocol(format!(
            "message from `{}` at step {} was already fused",
            msg.sender, msg.step
        )));
    }
    for f in &msg.factors {
        cf.check_scope(f)?;
        for v in f.scope() {
            match local.variable(v.name()) {
                Ok(reg) if reg.dim() == v.dim() => {}
                _ => {
                    return Err(Error::Protocol(format!(
                        "message variable `{}` (dim {}) does not match the local registry",
                        v.name(),
                        v.dim()
                    )))
                }
            }
        }
    }
    for f in &msg.factors {
        local.add_factor(f.clone())?;
        cf.cf_graph.add_factor(f.clone())?;
    }
    cf.fused.insert(key);
    Ok(())
}

/// Homogeneous channel-filter fusion: all three potentials over the identical
/// scope, fused as `local_i + local_j - common`.
pub fn homogeneous_cf_fuse(
    local_i: &CanonicalFactor,
    local_j: &CanonicalFactor,
    common: &CanonicalFactor,
) -> Result<CanonicalFactor> {
    if local_i.scope() != local_j.scope() || local_i.scope() != common.scope() {
        return Err(Error::DimensionMismatch(
            "homogeneous fusion requires identical scopes".into(),
        ));
    }
    local_i.add(local_j)?.subtract(common)
}

// --- wire format ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireVariable {
    name: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct WireFactor {
    scope: Vec<WireVariable>,
    zeta: Vec<f64>,
    /// Row-major upper triangle (including the diagonal) of the symmetric
    /// information matrix.
    lambda_upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireMessage {
    sender: String,
    receiver: String,
    step: u64,
    factors: Vec<WireFactor>,
}

impl From<FusionMessage> for WireMessage {
    fn from(m: FusionMessage) -> Self {
        WireMessage {
            sender: m.sender,
            receiver: m.receiver,
            step: m.step,
            factors: m
                .factors
                .iter()
                .map(|f| {
                    let n = f.dim();
                    let mut upper = Vec::with_capacity(n * (n + 1) / 2);
                    for r in 0..n {
                        for c in r..n {
                            upper.push(f.lambda()[(r, c)]);
                        }
                    }
                    WireFactor {
                        scope: f
                            .scope()
                            .iter()
                            .map(|v| WireVariable {
                                name: v.name().to_string(),
                                dim: v.dim(),
                            })
                            .collect(),
                        zeta: f.zeta().iter().copied().collect(),
                        lambda_upper: upper,
                    }
                })
                .collect(),
        }
    }
}

impl TryFrom<WireMessage> for FusionMessage {
    type Error = Error;

    fn try_from(w: WireMessage) -> Result<Self> {
        let mut factors = Vec::with_capacity(w.factors.len());
        for wf in w.factors {
            let scope: Vec<VariableId> = wf
                .scope
                .into_iter()
                .map(|v| VariableId::new(v.name, v.dim))
                .collect::<Result<_>>()?;
            let n: usize = scope.iter().map(|v| v.dim()).sum();
            if wf.lambda_upper.len() != n * (n + 1) / 2 {
                return Err(Error::DimensionMismatch(format!(
                    "lambda_upper has {} entries for dim {}",
                    wf.lambda_upper.len(),
                    n
                )));
            }
            let mut lambda = DMatrix::zeros(n, n);
            let mut k = 0;
            for r in 0..n {
                for c in r..n {
                    lambda[(r, c)] = wf.lambda_upper[k];
                    lambda[(c, r)] = wf.lambda_upper[k];
                    k += 1;
                }
            }
            factors.push(CanonicalFactor::new(
                scope,
                DVector::from_vec(wf.zeta),
                lambda,
            )?);
        }
        Ok(FusionMessage {
            sender: w.sender,
            receiver: w.receiver,
            step: w.step,
            factors,
        })
    }
}
