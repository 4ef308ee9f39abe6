//! Per-agent fusion loop over a simulated tree network.
//!
//! Every time step runs in three phases with barriers between them: all
//! agents apply their measurements, then messages sweep inward from the
//! leaves to a root, then back outward. Each link carries exactly one
//! message per direction per step; the channel filters prevent information
//! echo. On trees this sweep delivers every agent the full network
//! information of the step, so full-state full-rate fusion reproduces the
//! centralized estimate exactly, and runs are deterministically reproducible.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalFactor, MomentGaussian, VariableId};
use crate::ddf::{fuse_message, prepare_message, ChannelFilter, FusionMessage};
use crate::error::{Error, Result};
use crate::graph::{FactorGraph, LinearMeasurement};

/// A realized measurement bound to the variables it observes; `vars` order
/// matches the columns of the measurement's `H`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub vars: Vec<String>,
    pub measurement: LinearMeasurement,
}

/// When a sensor produces a measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Visibility {
    /// Fires every step.
    Always,
    /// Fires when the agent is within `radius` of the fixed `point`.
    Range { point: [f64; 2], radius: f64 },
}

/// A linear measurement template an agent owns: `y = H chi + v`, `v ~ N(0, R)`
/// over the listed variables, gated by a visibility predicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorTemplate {
    pub name: String,
    pub vars: Vec<String>,
    pub h: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub visibility: Visibility,
}

impl SensorTemplate {
    pub fn h_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.h)
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.r)
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c])
}

/// One agent: its variable partition, local graph, channel filters and
/// sensor templates.
#[derive(Debug, Clone)]
pub struct AgentState {
    id: String,
    chi_local: BTreeSet<VariableId>,
    chi_common: BTreeMap<String, BTreeSet<VariableId>>,
    graph: FactorGraph,
    channels: BTreeMap<String, ChannelFilter>,
    sensors: Vec<SensorTemplate>,
}

impl AgentState {
    /// Build an agent over `chi_local` plus the union of its per-neighbor
    /// common sets. `shared_priors` are factors known to every agent (the
    /// common prior); they seed the local graph, and those falling inside a
    /// link's common set also seed that link's channel filter so first
    /// messages carry only new information.
    pub fn new(
        id: impl Into<String>,
        chi_local: BTreeSet<VariableId>,
        chi_common: BTreeMap<String, BTreeSet<VariableId>>,
        shared_priors: &[CanonicalFactor],
        sensors: Vec<SensorTemplate>,
    ) -> Result<Self> {
        let id = id.into();
        for (peer, common) in &chi_common {
            if let Some(v) = common.iter().find(|v| chi_local.contains(*v)) {
                return Err(Error::Config(format!(
                    "agent `{id}`: variable `{}` is declared both local and common with `{peer}`",
                    v.name()
                )));
            }
        }
        let mut graph = FactorGraph::new();
        let mut all: BTreeSet<VariableId> = chi_local.clone();
        for common in chi_common.values() {
            all.extend(common.iter().cloned());
        }
        for v in &all {
            graph.add_variable(v.clone())?;
        }
        for p in shared_priors {
            if p.scope().iter().all(|v| all.contains(v)) {
                graph.add_factor(p.clone())?;
            } else if p.scope().iter().any(|v| all.contains(v)) {
                return Err(Error::Config(format!(
                    "agent `{id}`: a shared prior straddles the agent's variable boundary"
                )));
            }
        }
        let mut channels = BTreeMap::new();
        for (peer, common) in &chi_common {
            let link_priors: Vec<CanonicalFactor> = shared_priors
                .iter()
                .filter(|p| p.scope().iter().all(|v| common.contains(v)))
                .cloned()
                .collect();
            let cf = ChannelFilter::with_common_priors(
                peer.clone(),
                common.iter().cloned().collect(),
                &link_priors,
            )?;
            channels.insert(peer.clone(), cf);
        }
        Ok(Self {
            id,
            chi_local,
            chi_common,
            graph,
            channels,
            sensors,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut FactorGraph {
        &mut self.graph
    }

    pub fn sensors(&self) -> &[SensorTemplate] {
        &self.sensors
    }

    pub fn neighbors(&self) -> impl Iterator<Item = &str> {
        self.chi_common.keys().map(|s| s.as_str())
    }

    pub fn common_with(&self, peer: &str) -> Option<&BTreeSet<VariableId>> {
        self.chi_common.get(peer)
    }

    pub fn chi_local(&self) -> &BTreeSet<VariableId> {
        &self.chi_local
    }

    pub fn channel(&self, peer: &str) -> Option<&ChannelFilter> {
        self.channels.get(peer)
    }

    /// Local state dimension (sum over the agent's variables).
    pub fn state_dim(&self) -> usize {
        self.graph.dim()
    }

    /// Apply every observation as a measurement-update factor.
    pub fn observe(&mut self, observations: &[Observation]) -> Result<()> {
        for obs in observations {
            let vars: Vec<&str> = obs.vars.iter().map(|s| s.as_str()).collect();
            self.graph.measurement_update(&vars, &obs.measurement)?;
        }
        Ok(())
    }

    /// Prepare the net new-information message for one neighbor.
    pub fn send_to(&mut self, peer: &str, step: u64) -> Result<FusionMessage> {
        let cf = self
            .channels
            .get_mut(peer)
            .ok_or_else(|| Error::Protocol(format!("no channel to `{peer}` at `{}`", self.id)))?;
        let msg = prepare_message(&self.graph, cf, &self.id, step)?;
        let common = &self.chi_common[peer];
        for f in &msg.factors {
            debug_assert!(
                f.scope().iter().all(|v| common.contains(v)),
                "message scope escapes the declared common set"
            );
        }
        Ok(msg)
    }

    /// Measurement phase followed by the send phase: apply every observation,
    /// then prepare one message per neighbor from the post-measurement,
    /// pre-fusion graph. A link whose marginalization is singular is skipped
    /// this step (fusion deferred); other links proceed.
    pub fn observe_and_send(
        &mut self,
        observations: &[Observation],
        step: u64,
    ) -> Result<Vec<FusionMessage>> {
        self.observe(observations)?;
        let peers: Vec<String> = self.channels.keys().cloned().collect();
        let mut outbox = Vec::new();
        for peer in peers {
            match self.send_to(&peer, step) {
                Ok(msg) => outbox.push(msg),
                Err(Error::FusionDeferred { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(outbox)
    }

    /// Fusion phase: incorporate every delivered message into the local graph
    /// and the matching channel filter.
    pub fn fuse_inbox(&mut self, inbox: &[FusionMessage]) -> Result<()> {
        for msg in inbox {
            if msg.receiver != self.id {
                return Err(Error::Protocol(format!(
                    "message for `{}` delivered to `{}`",
                    msg.receiver, self.id
                )));
            }
            let cf = self.channels.get_mut(&msg.sender).ok_or_else(|| {
                Error::Protocol(format!("no channel to `{}` at `{}`", msg.sender, self.id))
            })?;
            fuse_message(&mut self.graph, cf, msg)?;
        }
        Ok(())
    }

    /// One full local loop iteration: measurement updates, send, then fuse.
    pub fn agent_step(
        &mut self,
        observations: &[Observation],
        inbox: &[FusionMessage],
        step: u64,
    ) -> Result<Vec<FusionMessage>> {
        let outbox = self.observe_and_send(observations, step)?;
        self.fuse_inbox(inbox)?;
        Ok(outbox)
    }

    /// Moment marginals of every local variable (sum-product path).
    pub fn marginals(&self) -> Result<BTreeMap<String, MomentGaussian>> {
        let names: Vec<String> = self
            .graph
            .variables()
            .iter()
            .map(|v| v.name().to_string())
            .collect();
        let queries: BTreeSet<&str> = names.iter().map(|s| s.as_str()).collect();
        self.graph.infer_marginals(&queries)
    }
}

/// Communication layout of the network; must form a tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkTopology {
    agents: Vec<String>,
    links: Vec<(String, String)>,
}

impl NetworkTopology {
    pub fn new(agents: Vec<String>, links: Vec<(String, String)>) -> Result<Self> {
        let ids: BTreeSet<&String> = agents.iter().collect();
        if ids.len() != agents.len() {
            return Err(Error::Topology("duplicate agent ids".into()));
        }
        let mut seen = BTreeSet::new();
        for (a, b) in &links {
            if a == b {
                return Err(Error::Topology(format!("self-link at `{a}`")));
            }
            if !ids.contains(a) || !ids.contains(b) {
                return Err(Error::Topology(format!("link ({a}, {b}) names unknown agents")));
            }
            let key = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            if !seen.insert(key) {
                return Err(Error::Topology(format!("duplicate link ({a}, {b})")));
            }
        }
        if links.len() + 1 != agents.len() {
            return Err(Error::Topology(format!(
                "{} agents need exactly {} links for a tree, got {}",
                agents.len(),
                agents.len().saturating_sub(1),
                links.len()
            )));
        }
        // Connectivity check: |links| = n - 1 plus connected means acyclic.
        let mut reached = BTreeSet::new();
        if let Some(first) = agents.first() {
            let mut stack = vec![first.clone()];
            while let Some(a) = stack.pop() {
                if !reached.insert(a.clone()) {
                    continue;
                }
                for (x, y) in &links {
                    if *x == a && !reached.contains(y) {
                        stack.push(y.clone());
                    } else if *y == a && !reached.contains(x) {
                        stack.push(x.clone());
                    }
                }
            }
        }
        if reached.len() != agents.len() {
            return Err(Error::Topology("network is not connected".into()));
        }
        Ok(Self { agents, links })
    }

    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub fn links(&self) -> &[(String, String)] {
        &self.links
    }

    pub fn neighbors_of(&self, id: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for (a, b) in &self.links {
            if a == id {
                out.push(b.as_str());
            } else if b == id {
                out.push(a.as_str());
            }
        }
        out.sort_unstable();
        out
    }

    /// BFS ordering rooted at the first agent: returns (order, parent) where
    /// `order` visits the root first and `parent[id]` is the upstream
    /// neighbor. Drives the per-step inward/outward message sweep.
    pub fn sweep_order(&self) -> (Vec<String>, BTreeMap<String, String>) {
        let mut order = Vec::with_capacity(self.agents.len());
        let mut parent = BTreeMap::new();
        let Some(root) = self.agents.first() else {
            return (order, parent);
        };
        let mut visited = BTreeSet::new();
        let mut frontier = vec![root.clone()];
        visited.insert(root.clone());
        while let Some(id) = frontier.pop() {
            order.push(id.clone());
            for n in self.neighbors_of(&id) {
                if visited.insert(n.to_string()) {
                    parent.insert(n.to_string(), id.clone());
                    frontier.push(n.to_string());
                }
            }
        }
        (order, parent)
    }
}

/// Supplies each agent's realized observations for a time step.
pub trait ObservationSource {
    fn observations(&mut self, step: u64, agent: &AgentState) -> Result<Vec<Observation>>;
}

impl<F> ObservationSource for F
where
    F: FnMut(u64, &AgentState) -> Result<Vec<Observation>>,
{
    fn observations(&mut self, step: u64, agent: &AgentState) -> Result<Vec<Observation>> {
        self(step, agent)
    }
}

/// Post-fusion state of one agent at one step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub agent: String,
    pub marginals: BTreeMap<String, MomentGaussian>,
    /// The agent's full local joint (canonical form) after fusion.
    pub joint: CanonicalFactor,
    pub nees: Option<f64>,
    pub msg_scalars_sent: u64,
}

/// Full record of a network run: per-step per-agent marginals plus every
/// message that crossed a link.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub records: Vec<StepRecord>,
    pub messages: Vec<FusionMessage>,
}

impl RunTrace {
    /// Flat CSV: one row per (step, agent, variable, component).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,agent,variable,component,mean,variance,nees,msg_scalars_sent\n");
        for rec in &self.records {
            for (name, marginal) in &rec.marginals {
                for c in 0..marginal.dim() {
                    let nees = rec
                        .nees
                        .map_or("".to_string(), |v| format!("{v:.17e}"));
                    out.push_str(&format!(
                        "{},{},{},{},{:.17e},{:.17e},{},{}\n",
                        rec.step,
                        rec.agent,
                        name,
                        c,
                        marginal.mean()[c],
                        marginal.covariance()[(c, c)],
                        nees,
                        rec.msg_scalars_sent
                    ));
                }
            }
        }
        out
    }

    /// Total scalars sent per agent over the whole run.
    pub fn sent_scalars_by_agent(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for m in &self.messages {
            *out.entry(m.sender.clone()).or_insert(0) += m.scalar_count();
        }
        out
    }
}

/// Drive the synchronous fusion loop over a tree network for `steps` steps.
///
/// Each step applies all measurements, then sweeps messages inward from the
/// leaves to the root and back outward, so one message per link direction per
/// step carries every agent's new information across the whole tree.
/// `truth`, when given, maps variable names to true values; each record then
/// carries the agent's NEES over its full local state. Deterministic given a
/// deterministic observation source.
pub fn run_network(
    topology: &NetworkTopology,
    agents: &mut [AgentState],
    steps: u64,
    source: &mut dyn ObservationSource,
    truth: Option<&BTreeMap<String, DVector<f64>>>,
) -> Result<RunTrace> {
    validate_network(topology, agents)?;
    let index: BTreeMap<String, usize> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id.clone(), i))
        .collect();
    let (order, parent) = topology.sweep_order();

    // (sender, receiver) pairs: inward pass leaves-to-root, then outward.
    let mut schedule: Vec<(usize, usize)> = Vec::new();
    for id in order.iter().rev() {
        if let Some(p) = parent.get(id) {
            schedule.push((index[id], index[p]));
        }
    }
    for id in &order {
        if let Some(p) = parent.get(id) {
            schedule.push((index[p], index[id]));
        }
    }

    let mut trace = RunTrace::default();
    for step in 0..steps {
        let mut sent_scalars: BTreeMap<String, u64> = BTreeMap::new();
        for agent in agents.iter_mut() {
            let obs = source.observations(step, agent)?;
            agent.observe(&obs)?;
        }

        for &(from, to) in &schedule {
            let receiver = agents[to].id.clone();
            let msg = match agents[from].send_to(&receiver, step) {
                Ok(msg) => msg,
                Err(Error::FusionDeferred { .. }) => continue,
                Err(e) => return Err(e),
            };
            let sender = &agents[from];
            let common = sender
                .common_with(&receiver)
                .expect("schedule follows declared links");
            for f in &msg.factors {
                if !f.scope().iter().all(|v| common.contains(v)) {
                    return Err(Error::Protocol(format!(
                        "agent `{}` emitted a message outside its common set with `{receiver}`",
                        sender.id
                    )));
                }
            }
            *sent_scalars.entry(sender.id.clone()).or_insert(0) += msg.scalar_count();
            agents[to].fuse_inbox(std::slice::from_ref(&msg))?;
            trace.messages.push(msg);
        }

        // Record.
        for agent in agents.iter() {
            let marginals = agent.marginals()?;
            let joint = agent.graph.joint();
            let nees = match truth {
                Some(t) => Some(agent_nees(agent, t)?),
                None => None,
            };
            trace.records.push(StepRecord {
                step,
                agent: agent.id.clone(),
                marginals,
                joint,
                nees,
                msg_scalars_sent: sent_scalars.get(&agent.id).copied().unwrap_or(0),
            });
        }
    }
    Ok(trace)
}

/// NEES of an agent's full local state: `e' P^-1 e` with `P^-1` the joint
/// information matrix, `e` the estimation error.
pub fn agent_nees(agent: &AgentState, truth: &BTreeMap<String, DVector<f64>>) -> Result<f64> {
    let joint = agent.graph.joint();
    let moment = joint
        .to_moment()
        .map_err(|e| Error::ImproperPosterior(format!("agent `{}`: {e}", agent.id)))?;
    let mut true_state = DVector::zeros(moment.dim());
    let mut off = 0;
    for v in moment.scope() {
        let t = truth
            .get(v.name())
            .ok_or_else(|| Error::Config(format!("no ground truth for `{}`", v.name())))?;
        if t.len() != v.dim() {
            return Err(Error::DimensionMismatch(format!(
                "truth for `{}` has len {}, expected {}",
                v.name(),
                t.len(),
                v.dim()
            )));
        }
        true_state.rows_mut(off, v.dim()).copy_from(t);
        off += v.dim();
    }
    let e = moment.mean() - true_state;
    Ok((e.transpose() * joint.lambda() * &e)[(0, 0)])
}

fn validate_network(topology: &NetworkTopology, agents: &[AgentState]) -> Result<()> {
    let by_id: BTreeMap<&str, &AgentState> =
        agents.iter().map(|a| (a.id.as_str(), a)).collect();
    if by_id.len() != topology.agents().len()
        || !topology.agents().iter().all(|id| by_id.contains_key(id.as_str()))
    {
        return Err(Error::Topology(
            "agent list does not match the topology".into(),
        ));
    }
    for a in agents {
        let declared: BTreeSet<&str> = a.chi_common.keys().map(|s| s.as_str()).collect();
        let topo: BTreeSet<&str> = topology.neighbors_of(&a.id).into_iter().collect();
        if declared != topo {
            return Err(Error::Topology(format!(
                "agent `{}` declares channels {{{}}} but the topology gives {{{}}}",
                a.id,
                declared.into_iter().collect::<Vec<_>>().join(", "),
                topo.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    for (x, y) in topology.links() {
        let cx = &by_id[x.as_str()].chi_common[y.as_str()];
        let cy = &by_id[y.as_str()].chi_common[x.as_str()];
        if cx != cy {
            return Err(Error::Topology(format!(
                "common sets on link ({x}, {y}) differ between the two ends"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn var(name: &str, dim: usize) -> VariableId {
        VariableId::new(name, dim).unwrap()
    }

    fn prior(name: &str, mean: f64, variance: f64) -> CanonicalFactor {
        CanonicalFactor::new(
            vec![var(name, 1)],
            DVector::from_vec(vec![mean / variance]),
            DMatrix::from_vec(1, 1, vec![1.0 / variance]),
        )
        .unwrap()
    }

    fn direct_obs(name: &str, value: f64, noise_var: f64) -> Observation {
        Observation {
            vars: vec![name.to_string()],
            measurement: LinearMeasurement::new(
                DMatrix::identity(1, 1),
                DMatrix::from_vec(1, 1, vec![noise_var]),
                DVector::from_vec(vec![value]),
            )
            .unwrap(),
        }
    }

    fn two_agent_pair() -> (AgentState, AgentState) {
        let priors = [prior("x", 0.0, 1.0)];
        let common: BTreeSet<VariableId> = [var("x", 1)].into();
        let a = AgentState::new(
            "a",
            BTreeSet::new(),
            BTreeMap::from([("b".to_string(), common.clone())]),
            &priors,
            vec![],
        )
        .unwrap();
        let b = AgentState::new(
            "b",
            BTreeSet::new(),
            BTreeMap::from([("a".to_string(), common)]),
            &priors,
            vec![],
        )
        .unwrap();
        (a, b)
    }

    #[test]
    fn quiet_step_emits_zero_messages_and_keeps_graph() {
        let (mut a, mut b) = two_agent_pair();
        // One synced exchange first.
        let ma = a.observe_and_send(&[], 0).unwrap();
        let mb = b.observe_and_send(&[], 0).unwrap();
        a.fuse_inbox(&mb).unwrap();
        b.fuse_inbox(&ma).unwrap();

        let before = a.graph().joint();
        let out = a.agent_step(&[], &[], 1).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_zero(1e-12));
        let after = a.graph().joint();
        assert_eq!(after.zeta(), before.zeta());
        assert_eq!(after.lambda(), before.lambda());
    }

    #[test]
    fn lone_agent_step_is_a_measurement_update() {
        let priors = [prior("x", 0.0, 1.0)];
        let mut a = AgentState::new(
            "solo",
            BTreeSet::from([var("x", 1)]),
            BTreeMap::new(),
            &priors,
            vec![],
        )
        .unwrap();
        let out = a.agent_step(&[direct_obs("x", 2.0, 1.0)], &[], 0).unwrap();
        assert!(out.is_empty());
        let m = a.graph().joint().to_moment().unwrap();
        assert_relative_eq!(m.mean()[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(m.covariance()[(0, 0)], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn two_agents_reach_the_centralized_posterior() {
        let (mut a, mut b) = two_agent_pair();
        let obs_a = direct_obs("x", 2.0, 1.0);
        let obs_b = direct_obs("x", -1.0, 2.0);
        let ma = a.observe_and_send(std::slice::from_ref(&obs_a), 0).unwrap();
        let mb = b.observe_and_send(std::slice::from_ref(&obs_b), 0).unwrap();
        a.fuse_inbox(&mb).unwrap();
        b.fuse_inbox(&ma).unwrap();

        // Centralized: prior + both measurements.
        let lambda = 1.0 + 1.0 + 0.5;
        let zeta = 0.0 + 2.0 + (-0.5);
        for agent in [&a, &b] {
            let j = agent.graph().joint();
            assert_relative_eq!(j.lambda()[(0, 0)], lambda, max_relative = 1e-12);
            assert_relative_eq!(j.zeta()[0], zeta, max_relative = 1e-12);
        }
    }

    #[test]
    fn sequential_agent_step_also_converges() {
        // Drive the single-call loop: a steps first with an empty inbox,
        // b steps with a's message, then a fuses b's reply.
        let (mut a, mut b) = two_agent_pair();
        let out_a = a
            .agent_step(&[direct_obs("x", 2.0, 1.0)], &[], 0)
            .unwrap();
        let out_b = b
            .agent_step(&[direct_obs("x", -1.0, 2.0)], &out_a, 0)
            .unwrap();
        a.fuse_inbox(&out_b).unwrap();
        for agent in [&a, &b] {
            let j = agent.graph().joint();
            assert_relative_eq!(j.lambda()[(0, 0)], 2.5, max_relative = 1e-12);
            assert_relative_eq!(j.zeta()[0], 1.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn topology_rejects_cycles_and_disconnection() {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let link = |a: &str, b: &str| (a.to_string(), b.to_string());
        assert!(NetworkTopology::new(ids(&["a", "b", "c"]), vec![link("a", "b"), link("b", "c")]).is_ok());
        // A ring has as many links as agents.
        assert!(NetworkTopology::new(
            ids(&["a", "b", "c"]),
            vec![link("a", "b"), link("b", "c"), link("c", "a")]
        )
        .is_err());
        // Right count, but disconnected (duplicate link is also caught).
        assert!(NetworkTopology::new(
            ids(&["a", "b", "c"]),
            vec![link("a", "b"), link("a", "b")]
        )
        .is_err());
        assert!(NetworkTopology::new(ids(&["a"]), vec![]).is_ok());
    }

    #[test]
    fn run_without_measurements_keeps_priors() {
        let (a, b) = two_agent_pair();
        let topology = NetworkTopology::new(
            vec!["a".into(), "b".into()],
            vec![("a".into(), "b".into())],
        )
        .unwrap();
        let mut agents = [a, b];
        let mut source = |_: u64, _: &AgentState| Ok(Vec::new());
        let trace = run_network(&topology, &mut agents, 1, &mut source, None).unwrap();
        for rec in &trace.records {
            let m = &rec.marginals["x"];
            assert_relative_eq!(m.mean()[0], 0.0, epsilon = 1e-12);
            assert_relative_eq!(m.covariance()[(0, 0)], 1.0, max_relative = 1e-12);
        }
    }

    /// Three homogeneous agents in a chain, everyone estimating the same two
    /// scalars; with exchange every step each posterior must match the
    /// centralized information filter exactly.
    #[test]
    fn homogeneous_chain_matches_centralized_every_step() {
        let vars: Vec<VariableId> = vec![var("u", 1), var("v", 1)];
        let priors = [prior("u", 0.0, 4.0), prior("v", 1.0, 2.0)];
        let all: BTreeSet<VariableId> = vars.iter().cloned().collect();
        let ids = ["a1", "a2", "a3"];
        let mut agents: Vec<AgentState> = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let mut chi_common = BTreeMap::new();
            if i > 0 {
                chi_common.insert(ids[i - 1].to_string(), all.clone());
            }
            if i + 1 < ids.len() {
                chi_common.insert(ids[i + 1].to_string(), all.clone());
            }
            agents.push(
                AgentState::new(*id, BTreeSet::new(), chi_common, &priors, vec![]).unwrap(),
            );
        }
        let topology = NetworkTopology::new(
            ids.iter().map(|s| s.to_string()).collect(),
            vec![
                ("a1".to_string(), "a2".to_string()),
                ("a2".to_string(), "a3".to_string()),
            ],
        )
        .unwrap();

        // Deterministic observation schedule, replayed into both the network
        // and the centralized filter.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let steps = 10u64;
        let mut schedule: Vec<BTreeMap<String, Observation>> = Vec::new();
        for _ in 0..steps {
            let mut per_agent = BTreeMap::new();
            for id in &ids {
                let target = if rng.gen_bool(0.5) { "u" } else { "v" };
                per_agent.insert(
                    id.to_string(),
                    direct_obs(target, rng.gen_range(-1.0..1.0), 1.5),
                );
            }
            schedule.push(per_agent);
        }
        let replay = schedule.clone();
        let mut source = move |step: u64, agent: &AgentState| {
            Ok(vec![replay[step as usize][agent.id()].clone()])
        };
        let trace = run_network(&topology, &mut agents, steps, &mut source, None).unwrap();

        let mut central = FactorGraph::new();
        for v in &vars {
            central.add_variable(v.clone()).unwrap();
        }
        for p in &priors {
            central.add_factor(p.clone()).unwrap();
        }
        for (step, per_agent) in schedule.iter().enumerate() {
            for obs in per_agent.values() {
                let vars_ref: Vec<&str> = obs.vars.iter().map(|s| s.as_str()).collect();
                central
                    .measurement_update(&vars_ref, &obs.measurement)
                    .unwrap();
            }
            let c = central.joint();
            for rec in trace.records.iter().filter(|r| r.step == step as u64) {
                assert_relative_eq!(rec.joint.zeta(), c.zeta(), max_relative = 1e-9, epsilon = 1e-9);
                assert_relative_eq!(
                    rec.joint.lambda(),
                    c.lambda(),
                    max_relative = 1e-9,
                    epsilon = 1e-9
                );
            }
        }
    }

    /// A middle agent with two links whose common sets overlap on one shared
    /// variable; fusion closes cycles in its local graph, and inference must
    /// still match the dense reference.
    #[test]
    fn heterogeneous_chain_runs_and_inference_stays_exact() {
        let mk_set = |names: &[(&str, usize)]| -> BTreeSet<VariableId> {
            names.iter().map(|(n, d)| var(n, *d)).collect()
        };
        let priors = [
            prior("ca", 0.0, 2.0),
            prior("cb", 0.0, 2.0),
            prior("cc", 0.0, 2.0),
            prior("sj", 0.0, 1.0),
            prior("si", 0.0, 1.0),
            prior("sk", 0.0, 1.0),
        ];
        let j = AgentState::new(
            "j",
            mk_set(&[("sj", 1)]),
            BTreeMap::from([("i".to_string(), mk_set(&[("ca", 1), ("cb", 1)]))]),
            &priors,
            vec![],
        )
        .unwrap();
        let i = AgentState::new(
            "i",
            mk_set(&[("si", 1)]),
            BTreeMap::from([
                ("j".to_string(), mk_set(&[("ca", 1), ("cb", 1)])),
                ("k".to_string(), mk_set(&[("cb", 1), ("cc", 1)])),
            ]),
            &priors,
            vec![],
        )
        .unwrap();
        let k = AgentState::new(
            "k",
            mk_set(&[("sk", 1)]),
            BTreeMap::from([("i".to_string(), mk_set(&[("cb", 1), ("cc", 1)]))]),
            &priors,
            vec![],
        )
        .unwrap();
        let topology = NetworkTopology::new(
            vec!["j".into(), "i".into(), "k".into()],
            vec![("j".into(), "i".into()), ("i".into(), "k".into())],
        )
        .unwrap();
        let mut agents = [j, i, k];

        // Every agent measures (own bias + each common variable) pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut source = move |_step: u64, agent: &AgentState| {
            let bias = agent
                .chi_local()
                .iter()
                .next()
                .expect("one private variable")
                .name()
                .to_string();
            let mut obs = Vec::new();
            for v in agent.graph().variables() {
                if v.name() == bias {
                    continue;
                }
                obs.push(Observation {
                    vars: vec![v.name().to_string(), bias.clone()],
                    measurement: LinearMeasurement::new(
                        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                        DMatrix::from_vec(1, 1, vec![2.0]),
                        DVector::from_vec(vec![rng.gen_range(-1.0..1.0)]),
                    )
                    .unwrap(),
                });
            }
            Ok(obs)
        };
        let trace = run_network(&topology, &mut agents, 5, &mut source, None).unwrap();
        assert_eq!(trace.records.len(), 15);

        // The middle agent's graph is cyclic after fusion; optimized and
        // reference marginals must still agree.
        let middle = agents.iter().find(|a| a.id() == "i").unwrap();
        let names: Vec<String> = middle
            .graph()
            .variables()
            .iter()
            .map(|v| v.name().to_string())
            .collect();
        let queries: BTreeSet<&str> = names.iter().map(|s| s.as_str()).collect();
        let fast = middle.graph().infer_marginals(&queries).unwrap();
        let slow = middle.graph().reference_marginals(&queries).unwrap();
        for (name, got) in &fast {
            let want = &slow[name];
            assert_relative_eq!(got.mean(), want.mean(), max_relative = 1e-9, epsilon = 1e-9);
            assert_relative_eq!(
                got.covariance(),
                want.covariance(),
                max_relative = 1e-9,
                epsilon = 1e-9
            );
        }

        // Message-scope confinement held every step (checked in run_network);
        // additionally every recorded message stays within its link's set.
        for msg in &trace.messages {
            let sender = agents.iter().find(|a| a.id() == msg.sender).unwrap();
            let common = sender.common_with(&msg.receiver).unwrap();
            for f in &msg.factors {
                assert!(f.scope().iter().all(|v| common.contains(v)));
            }
        }

        // The two channel filters of a link accumulate the same pedigree.
        for (x, y) in topology.links() {
            let cx = agents
                .iter()
                .find(|a| a.id() == x)
                .and_then(|a| a.channel(y))
                .unwrap()
                .common_joint();
            let cy = agents
                .iter()
                .find(|a| a.id() == y)
                .and_then(|a| a.channel(x))
                .unwrap()
                .common_joint();
            assert_relative_eq!(cx.zeta(), cy.zeta(), max_relative = 1e-9, epsilon = 1e-12);
            assert_relative_eq!(cx.lambda(), cy.lambda(), max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let run = |seed: u64| -> String {
            let (a, b) = two_agent_pair();
            let topology = NetworkTopology::new(
                vec!["a".into(), "b".into()],
                vec![("a".into(), "b".into())],
            )
            .unwrap();
            let mut agents = [a, b];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut source = move |_: u64, _: &AgentState| {
                Ok(vec![direct_obs("x", rng.gen_range(-1.0..1.0), 1.0)])
            };
            let truth = BTreeMap::from([("x".to_string(), DVector::from_vec(vec![0.3]))]);
            run_network(&topology, &mut agents, 5, &mut source, Some(&truth))
                .unwrap()
                .to_csv()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn deferred_link_is_skipped_while_others_proceed() {
        // `cb` is common with k but not with j, and starts with no
        // information: preparing the j-message must roll `cb` up (singular,
        // deferred) while the k-message keeps `cb` in scope and goes out.
        let priors = [prior("ca", 0.0, 1.0)];
        let mut agent = AgentState::new(
            "i",
            BTreeSet::new(),
            BTreeMap::from([
                ("j".to_string(), BTreeSet::from([var("ca", 1)])),
                ("k".to_string(), BTreeSet::from([var("ca", 1), var("cb", 1)])),
            ]),
            &priors,
            vec![],
        )
        .unwrap();
        assert!(matches!(
            agent.send_to("j", 0),
            Err(Error::FusionDeferred { .. })
        ));
        let outbox = agent.observe_and_send(&[], 0).unwrap();
        assert_eq!(outbox.len(), 1);
        assert_eq!(outbox[0].receiver, "k");

        // Once `cb` gains information, the deferred link resumes.
        agent.observe(&[direct_obs("cb", 0.4, 2.0)]).unwrap();
        assert!(agent.send_to("j", 1).is_ok());
    }

    #[test]
    fn misdelivered_message_is_a_protocol_error() {
        let (mut a, b) = two_agent_pair();
        let msg = FusionMessage {
            sender: "b".into(),
            receiver: "someone-else".into(),
            step: 0,
            factors: vec![],
        };
        assert!(matches!(
            a.fuse_inbox(std::slice::from_ref(&msg)),
            Err(Error::Protocol(_))
        ));
        drop(b);
    }

    #[test]
    fn mismatched_common_sets_are_rejected() {
        let priors = [prior("x", 0.0, 1.0), prior("y", 0.0, 1.0)];
        let a = AgentState::new(
            "a",
            BTreeSet::new(),
            BTreeMap::from([("b".to_string(), BTreeSet::from([var("x", 1)]))]),
            &priors,
            vec![],
        )
        .unwrap();
        let b = AgentState::new(
            "b",
            BTreeSet::new(),
            BTreeMap::from([("a".to_string(), BTreeSet::from([var("y", 1)]))]),
            &priors,
            vec![],
        )
        .unwrap();
        let topology = NetworkTopology::new(
            vec!["a".into(), "b".into()],
            vec![("a".into(), "b".into())],
        )
        .unwrap();
        let mut agents = [a, b];
        let mut source = |_: u64, _: &AgentState| Ok(Vec::new());
        assert!(matches!(
            run_network(&topology, &mut agents, 1, &mut source, None),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn overlapping_partition_is_rejected() {
        let priors = [prior("x", 0.0, 1.0)];
        let err = AgentState::new(
            "a",
            BTreeSet::from([var("x", 1)]),
            BTreeMap::from([("b".to_string(), BTreeSet::from([var("x", 1)]))]),
            &priors,
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
