//! Declarative experiment configuration, the bundled target-tracking and
//! cooperative-mapping scenarios, deterministic realization of ground truth
//! and measurements, and the centralized baseline filter.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{
    rows_to_matrix, run_network, AgentState, NetworkTopology, Observation, ObservationSource,
    RunTrace, SensorTemplate, Visibility,
};
use crate::canonical::{CanonicalFactor, MomentGaussian, VariableId};
use crate::error::{Error, Result};
use crate::graph::{FactorGraph, LinearMeasurement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Tracking,
    Mapping,
    Custom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarDecl {
    pub name: String,
    pub dim: usize,
}

/// Independent Gaussian prior for one variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorDecl {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Deterministic elliptical trajectory: the agent's position at step `k` is
/// `center + (rx cos(omega k + phase), ry sin(omega k + phase))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub center: [f64; 2],
    pub radius: [f64; 2],
    pub omega: f64,
    pub phase: f64,
}

impl Trajectory {
    pub fn position(&self, step: u64) -> [f64; 2] {
        let t = self.omega * step as f64 + self.phase;
        [
            self.center[0] + self.radius[0] * t.cos(),
            self.center[1] + self.radius[1] * t.sin(),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentDecl {
    pub id: String,
    /// The agent's full variable set (common sets are derived per link as the
    /// intersection with the neighbor's set).
    pub variables: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
    pub sensors: Vec<SensorTemplate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub runs: u64,
    pub steps: u64,
    pub seed: u64,
}

/// A full experiment description; serializable as the scenario JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<[f64; 2]>,
    pub variables: Vec<VarDecl>,
    pub priors: BTreeMap<String, PriorDecl>,
    pub agents: Vec<AgentDecl>,
    pub links: Vec<(String, String)>,
    pub mc: McConfig,
}

impl ScenarioConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Schema and structural validation: unique names, consistent dims, SPD
    /// covariances, tree topology, symmetric non-empty common sets.
    pub fn validate(&self) -> Result<()> {
        if self.mc.steps == 0 {
            return Err(Error::Config("mc.steps must be at least 1".into()));
        }
        let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
        for v in &self.variables {
            if v.dim == 0 {
                return Err(Error::Config(format!("variable `{}` has dim 0", v.name)));
            }
            if dims.insert(&v.name, v.dim).is_some() {
                return Err(Error::Config(format!("duplicate variable `{}`", v.name)));
            }
        }
        for (name, &dim) in &dims {
            let prior = self
                .priors
                .get(*name)
                .ok_or_else(|| Error::Config(format!("missing prior for `{name}`")))?;
            if prior.mean.len() != dim {
                return Err(Error::Config(format!(
                    "prior mean for `{name}` has len {}, expected {dim}",
                    prior.mean.len()
                )));
            }
            // MomentGaussian validates symmetry and positive definiteness.
            prior_moment(name, dim, prior)?;
        }
        for extra in self.priors.keys() {
            if !dims.contains_key(extra.as_str()) {
                return Err(Error::Config(format!("prior for unknown variable `{extra}`")));
            }
        }

        let mut ids = BTreeSet::new();
        for a in &self.agents {
            if !ids.insert(a.id.as_str()) {
                return Err(Error::Config(format!("duplicate agent id `{}`", a.id)));
            }
            let mut own = BTreeSet::new();
            for v in &a.variables {
                if !dims.contains_key(v.as_str()) {
                    return Err(Error::Config(format!(
                        "agent `{}` references unknown variable `{v}`",
                        a.id
                    )));
                }
                if !own.insert(v.as_str()) {
                    return Err(Error::Config(format!(
                        "agent `{}` lists variable `{v}` twice",
                        a.id
                    )));
                }
            }
            for s in &a.sensors {
                let total: usize = s
                    .vars
                    .iter()
                    .map(|v| {
                        if !own.contains(v.as_str()) {
                            return Err(Error::Config(format!(
                                "sensor `{}` of agent `{}` measures `{v}` outside its variables",
                                s.name, a.id
                            )));
                        }
                        Ok(dims[v.as_str()])
                    })
                    .sum::<Result<usize>>()?;
                let h = checked_matrix(&s.h, &format!("sensor `{}` H of agent `{}`", s.name, a.id))?;
                let r = checked_matrix(&s.r, &format!("sensor `{}` R of agent `{}`", s.name, a.id))?;
                if h.ncols() != total {
                    return Err(Error::Config(format!(
                        "sensor `{}` of agent `{}`: H has {} columns, scope dim is {total}",
                        s.name,
                        a.id,
                        h.ncols()
                    )));
                }
                if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
                    return Err(Error::Config(format!(
                        "sensor `{}` of agent `{}`: R must be {}x{}",
                        s.name,
                        a.id,
                        h.nrows(),
                        h.nrows()
                    )));
                }
                if Cholesky::new(r).is_none() {
                    return Err(Error::Config(format!(
                        "sensor `{}` of agent `{}`: R is not SPD",
                        s.name, a.id
                    )));
                }
                if matches!(s.visibility, Visibility::Range { .. }) && a.trajectory.is_none() {
                    return Err(Error::Config(format!(
                        "sensor `{}` of agent `{}` is range-gated but the agent has no trajectory",
                        s.name, a.id
                    )));
                }
            }
        }

        let topology = self.topology()?;
        for (x, y) in &self.links {
            if self.common_vars(x, y)?.is_empty() {
                return Err(Error::Config(format!(
                    "link ({x}, {y}) has no common variables"
                )));
            }
        }

        // Tree consistency: the agents owning a variable must form a
        // connected subtree of the communication tree, otherwise their shared
        // information (starting with the prior) is double counted and no
        // channel filter can correct for it.
        for v in &self.variables {
            let owners: BTreeSet<&str> = self
                .agents
                .iter()
                .filter(|a| a.variables.iter().any(|n| n == &v.name))
                .map(|a| a.id.as_str())
                .collect();
            if owners.len() <= 1 {
                continue;
            }
            let start = *owners.iter().next().expect("non-empty owner set");
            let mut reached = BTreeSet::from([start]);
            let mut frontier = vec![start];
            while let Some(id) = frontier.pop() {
                for n in topology.neighbors_of(id) {
                    if owners.contains(n) && reached.insert(n) {
                        frontier.push(n);
                    }
                }
            }
            if reached.len() != owners.len() {
                return Err(Error::Config(format!(
                    "variable `{}` is shared by agents {{{}}} that do not form a connected \
                     subtree of the network; its common information cannot be tracked",
                    v.name,
                    owners.into_iter().collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<NetworkTopology> {
        NetworkTopology::new(
            self.agents.iter().map(|a| a.id.clone()).collect(),
            self.links.clone(),
        )
    }

    pub fn variable_dim(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .map(|v| v.dim)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Total dimension of the global state.
    pub fn global_dim(&self) -> usize {
        self.variables.iter().map(|v| v.dim).sum()
    }

    pub fn agent(&self, id: &str) -> Result<&AgentDecl> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::Config(format!("unknown agent `{id}`")))
    }

    /// Stacked state dimension of one agent's variable set.
    pub fn agent_dim(&self, id: &str) -> Result<usize> {
        self.agent(id)?
            .variables
            .iter()
            .map(|v| self.variable_dim(v))
            .sum()
    }

    /// Common variables of a link: the intersection of both variable sets.
    pub fn common_vars(&self, a: &str, b: &str) -> Result<BTreeSet<VariableId>> {
        let va: BTreeSet<&String> = self.agent(a)?.variables.iter().collect();
        let vb: BTreeSet<&String> = self.agent(b)?.variables.iter().collect();
        va.intersection(&vb)
            .map(|n| VariableId::new((*n).clone(), self.variable_dim(n)?))
            .collect()
    }

    /// Per-variable prior factors in canonical order.
    pub fn prior_factors(&self) -> Result<Vec<CanonicalFactor>> {
        let mut out = Vec::new();
        for v in &self.variables {
            let decl = self
                .priors
                .get(&v.name)
                .ok_or_else(|| Error::Config(format!("missing prior for `{}`", v.name)))?;
            out.push(CanonicalFactor::from_moment(&prior_moment(
                &v.name, v.dim, decl,
            )?)?);
        }
        Ok(out)
    }

    /// Build runtime agents (graphs, channel filters seeded with the common
    /// prior) plus the validated topology.
    pub fn build_agents(&self) -> Result<(NetworkTopology, Vec<AgentState>)> {
        self.validate()?;
        let topology = self.topology()?;
        let priors = self.prior_factors()?;
        let mut agents = Vec::new();
        for decl in &self.agents {
            let mut chi_common: BTreeMap<String, BTreeSet<VariableId>> = BTreeMap::new();
            for peer in topology.neighbors_of(&decl.id) {
                chi_common.insert(peer.to_string(), self.common_vars(&decl.id, peer)?);
            }
            let common_union: BTreeSet<VariableId> =
                chi_common.values().flatten().cloned().collect();
            let chi_local: BTreeSet<VariableId> = decl
                .variables
                .iter()
                .map(|n| VariableId::new(n.clone(), self.variable_dim(n)?))
                .collect::<Result<BTreeSet<_>>>()?
                .difference(&common_union)
                .cloned()
                .collect();
            agents.push(AgentState::new(
                decl.id.clone(),
                chi_local,
                chi_common,
                &priors,
                decl.sensors.clone(),
            )?);
        }
        Ok((topology, agents))
    }

    /// The homogeneous counterpart: every agent carries the full variable set
    /// (so every link's common set is the whole state). Sensors are unchanged.
    pub fn homogenize(&self) -> ScenarioConfig {
        let all: Vec<String> = self.variables.iter().map(|v| v.name.clone()).collect();
        let mut cfg = self.clone();
        cfg.name = format!("{}-homogeneous", self.name);
        for a in &mut cfg.agents {
            a.variables = all.clone();
        }
        cfg
    }
}

/// Rectangularity-checked conversion of a JSON row-of-rows matrix.
fn checked_matrix(rows: &[Vec<f64>], what: &str) -> Result<nalgebra::DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: rows have unequal lengths")));
    }
    Ok(rows_to_matrix(rows))
}

fn prior_moment(name: &str, dim: usize, decl: &PriorDecl) -> Result<MomentGaussian> {
    let cov = checked_matrix(&decl.cov, &format!("prior covariance for `{name}`"))?;
    if cov.nrows() != dim || cov.ncols() != dim {
        return Err(Error::Config(format!(
            "prior covariance for `{name}` must be {dim}x{dim}"
        )));
    }
    MomentGaussian::new(
        vec![VariableId::new(name, dim)?],
        DVector::from_vec(decl.mean.clone()),
        cov,
    )
    .map_err(|e| Error::Config(format!("prior for `{name}`: {e}")))
}

// --- realization -----------------------------------------------------------

/// Sampled ground truth plus the full per-step, per-agent observation
/// schedule. Realizing once and replaying lets the decentralized network and
/// the centralized baseline consume identical measurements.
#[derive(Debug, Clone)]
pub struct Realization {
    pub truth: BTreeMap<String, DVector<f64>>,
    pub steps: Vec<BTreeMap<String, Vec<Observation>>>,
}

/// Whether a sensor fires at a step, given its owner's trajectory. Range
/// gates compare the agent position against the sensor's fixed point, so the
/// visibility schedule is deterministic.
pub fn sensor_visible(sensor: &SensorTemplate, agent: &AgentDecl, step: u64) -> bool {
    match &sensor.visibility {
        Visibility::Always => true,
        Visibility::Range { point, radius } => {
            let pos = agent
                .trajectory
                .as_ref()
                .expect("validated: range-gated sensors require a trajectory")
                .position(step);
            let dx = pos[0] - point[0];
            let dy = pos[1] - point[1];
            (dx * dx + dy * dy).sqrt() <= *radius
        }
    }
}

/// Sample ground truth from the prior and generate every measurement.
pub fn realize(cfg: &ScenarioConfig, seed: u64) -> Result<Realization> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = BTreeMap::new();
    for v in &cfg.variables {
        let decl = &cfg.priors[&v.name];
        let moment = prior_moment(&v.name, v.dim, decl)?;
        let chol = Cholesky::new(moment.covariance().clone())
            .expect("validated prior covariance is SPD");
        let z = DVector::from_fn(v.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        truth.insert(v.name.clone(), moment.mean() + chol.l() * z);
    }

    let mut steps = Vec::with_capacity(cfg.mc.steps as usize);
    for step in 0..cfg.mc.steps {
        let mut per_agent: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
        for agent in &cfg.agents {
            let mut obs = Vec::new();
            for sensor in &agent.sensors {
                if !sensor_visible(sensor, agent, step) {
                    continue;
                }
                let h = sensor.h_matrix();
                let r = sensor.r_matrix();
                let mut state = DVector::zeros(h.ncols());
                let mut off = 0;
                for name in &sensor.vars {
                    let t = &truth[name];
                    state.rows_mut(off, t.len()).copy_from(t);
                    off += t.len();
                }
                let chol = Cholesky::new(r.clone()).expect("validated R is SPD");
                let z = DVector::from_fn(h.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &h * state + chol.l() * z;
                obs.push(Observation {
                    vars: sensor.vars.clone(),
                    measurement: LinearMeasurement::new(h, r, y)?,
                });
            }
            per_agent.insert(agent.id.clone(), obs);
        }
        steps.push(per_agent);
    }
    Ok(Realization { truth, steps })
}

struct ReplaySource<'a> {
    realization: &'a Realization,
}

impl ObservationSource for ReplaySource<'_> {
    fn observations(&mut self, step: u64, agent: &AgentState) -> Result<Vec<Observation>> {
        Ok(self.realization.steps[step as usize]
            .get(agent.id())
            .cloned()
            .unwrap_or_default())
    }
}

/// Run the decentralized network against a realization.
pub fn run_decentralized(cfg: &ScenarioConfig, realization: &Realization) -> Result<RunTrace> {
    let (topology, mut agents) = cfg.build_agents()?;
    let mut source = ReplaySource { realization };
    run_network(
        &topology,
        &mut agents,
        cfg.mc.steps,
        &mut source,
        Some(&realization.truth),
    )
}

/// Centralized baseline: one canonical-form filter over the full global state
/// consuming every agent's measurements.
#[derive(Debug, Clone)]
pub struct CentralizedTrace {
    /// Post-update joint after each step.
    pub joints: Vec<CanonicalFactor>,
}

impl CentralizedTrace {
    pub fn moments(&self) -> Result<Vec<MomentGaussian>> {
        self.joints.iter().map(|j| j.to_moment()).collect()
    }

    /// Flat CSV: one row per (step, variable, component).
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("step,variable,component,mean,variance\n");
        for (step, joint) in self.joints.iter().enumerate() {
            let m = joint.to_moment()?;
            let mut off = 0;
            for v in m.scope() {
                for c in 0..v.dim() {
                    out.push_str(&format!(
                        "{},{},{},{:.17e},{:.17e}\n",
                        step,
                        v.name(),
                        c,
                        m.mean()[off + c],
                        m.covariance()[(off + c, off + c)]
                    ));
                }
                off += v.dim();
            }
        }
        Ok(out)
    }
}

pub fn run_centralized(cfg: &ScenarioConfig, realization: &Realization) -> Result<CentralizedTrace> {
    let mut graph = FactorGraph::new();
    for v in &cfg.variables {
        graph.add_variable(VariableId::new(v.name.clone(), v.dim)?)?;
    }
    let mut joint = {
        let mut acc = crate::canonical::FactorAccumulator::new(graph.variables());
        for p in cfg.prior_factors()? {
            acc.add(&p)?;
        }
        acc.finish()
    };
    let mut joints = Vec::with_capacity(cfg.mc.steps as usize);
    for step_obs in &realization.steps {
        let mut acc = crate::canonical::FactorAccumulator::new(graph.variables());
        acc.add(&joint)?;
        for obs_list in step_obs.values() {
            for obs in obs_list {
                let scope: Vec<VariableId> = obs
                    .vars
                    .iter()
                    .map(|n| graph.variable(n))
                    .collect::<Result<_>>()?;
                acc.add(&obs.measurement.to_factor(scope)?)?;
            }
        }
        joint = acc.finish();
        joints.push(joint.clone());
    }
    Ok(CentralizedTrace { joints })
}

// --- bundled scenarios ------------------------------------------------------

fn diag2(a: f64, b: f64) -> Vec<Vec<f64>> {
    vec![vec![a, 0.0], vec![0.0, b]]
}

fn eye2() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0], vec![0.0, 1.0]]
}

fn biased_relative_h() -> Vec<Vec<f64>> {
    // y = target + bias + v over vars (target, bias).
    vec![
        vec![1.0, 0.0, 1.0, 0.0],
        vec![0.0, 1.0, 0.0, 1.0],
    ]
}

/// Five agents in a chain track six static 2D targets through biased relative
/// position measurements; each agent also estimates its own 2D sensor bias.
/// Sensor 1 observes the agent's first assigned target and sensor 2 the
/// remaining ones, each with its own noise level; bias self-measurement
/// noise is 1 m^2 per axis.
pub fn build_tracking_scenario() -> ScenarioConfig {
    // (agent, tracked targets, sensor-1 noise diag, sensor-2 noise diag)
    type Row = (&'static str, &'static [&'static str], [f64; 2], [f64; 2]);
    let assignments: [Row; 5] = [
        ("a1", &["T1", "T2"], [1.0, 10.0], [3.0, 3.0]),
        ("a2", &["T2", "T3"], [3.0, 3.0], [3.0, 3.0]),
        ("a3", &["T3", "T4", "T5"], [4.0, 4.0], [2.0, 2.0]),
        ("a4", &["T4", "T5"], [10.0, 1.0], [4.0, 4.0]),
        ("a5", &["T5", "T6"], [2.0, 2.0], [5.0, 5.0]),
    ];

    let mut variables = Vec::new();
    let mut priors = BTreeMap::new();
    for t in 1..=6u32 {
        let name = format!("T{t}");
        variables.push(VarDecl {
            name: name.clone(),
            dim: 2,
        });
        priors.insert(
            name,
            PriorDecl {
                // Targets spread over a nominal surveillance area.
                mean: vec![30.0 * t as f64, if t % 2 == 0 { 40.0 } else { 10.0 }],
                cov: diag2(100.0, 100.0),
            },
        );
    }
    let mut agents = Vec::new();
    for (i, (id, targets, r1, r2)) in assignments.iter().enumerate() {
        let bias = format!("s{}", i + 1);
        variables.push(VarDecl {
            name: bias.clone(),
            dim: 2,
        });
        priors.insert(
            bias.clone(),
            PriorDecl {
                mean: vec![0.0, 0.0],
                cov: diag2(4.0, 4.0),
            },
        );
        let mut sensors = Vec::new();
        for (j, target) in targets.iter().enumerate() {
            let r = if j == 0 { r1 } else { r2 };
            sensors.push(SensorTemplate {
                name: format!("rel-{target}"),
                vars: vec![target.to_string(), bias.clone()],
                h: biased_relative_h(),
                r: diag2(r[0], r[1]),
                visibility: Visibility::Always,
            });
        }
        sensors.push(SensorTemplate {
            name: "bias".into(),
            vars: vec![bias.clone()],
            h: eye2(),
            r: diag2(1.0, 1.0),
            visibility: Visibility::Always,
        });
        let mut vars: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
        vars.push(bias);
        agents.push(AgentDecl {
            id: id.to_string(),
            variables: vars,
            trajectory: None,
            sensors,
        });
    }
    let links = (1..5)
        .map(|i| (format!("a{i}"), format!("a{}", i + 1)))
        .collect();
    ScenarioConfig {
        name: "tracking".into(),
        kind: ScenarioKind::Tracking,
        field: None,
        variables,
        priors,
        agents,
        links,
        mc: McConfig {
            runs: 50,
            steps: 20,
            seed: 7,
        },
    }
}

/// Grid position of mapping landmark `L{row}{col}` in the 180 m x 160 m field.
pub fn mapping_landmark_position(row: usize, col: usize) -> [f64; 2] {
    [18.0 + 36.0 * col as f64, 16.0 + 32.0 * row as f64]
}

/// Four agents on elliptical trajectories cooperatively map 25 static 2D
/// landmarks on a 5x5 grid in a 180 m x 160 m field. Each agent is assigned
/// one of four overlapping 3x3 sections and takes biased relative position
/// measurements to landmarks within 45 m, plus a noisy self-measurement of
/// its constant 2D bias. Agents form a chain; the common set of a link is the
/// three-landmark overlap row/column of the two sections.
pub fn build_mapping_scenario() -> ScenarioConfig {
    let mut variables = Vec::new();
    let mut priors = BTreeMap::new();
    for row in 0..5 {
        for col in 0..5 {
            let name = format!("L{row}{col}");
            let pos = mapping_landmark_position(row, col);
            variables.push(VarDecl {
                name: name.clone(),
                dim: 2,
            });
            priors.insert(
                name,
                PriorDecl {
                    mean: pos.to_vec(),
                    cov: diag2(100.0, 100.0),
                },
            );
        }
    }

    // Sections: (rows, cols) spans; the chain a1-a2-a3-a4 walks around the
    // field so consecutive sections overlap in one row or column. The last
    // section drops the two landmarks it would otherwise share with the
    // unlinked first agent (variables shared off-tree cannot have their
    // common information tracked, and the validator rejects them).
    let sections: [(&str, [usize; 2], [usize; 2]); 4] = [
        ("a1", [0, 2], [0, 2]),
        ("a2", [2, 4], [0, 2]),
        ("a3", [2, 4], [2, 4]),
        ("a4", [0, 2], [2, 4]),
    ];
    let excluded: BTreeSet<(usize, usize)> = BTreeSet::from([(0, 2), (1, 2)]);
    let trajectories: BTreeMap<&str, Trajectory> = [
        ("a1", Trajectory {
            center: [54.0, 48.0],
            radius: [34.0, 28.0],
            omega: std::f64::consts::TAU / 100.0,
            phase: -std::f64::consts::FRAC_PI_2,
        }),
        ("a2", Trajectory {
            center: [54.0, 112.0],
            radius: [34.0, 28.0],
            omega: std::f64::consts::TAU / 100.0,
            phase: 1.25 * std::f64::consts::PI,
        }),
        ("a3", Trajectory {
            center: [126.0, 112.0],
            radius: [34.0, 28.0],
            omega: std::f64::consts::TAU / 100.0,
            phase: 0.25 * std::f64::consts::PI,
        }),
        ("a4", Trajectory {
            center: [126.0, 48.0],
            radius: [34.0, 28.0],
            omega: std::f64::consts::TAU / 100.0,
            phase: std::f64::consts::FRAC_PI_2,
        }),
    ]
    .into_iter()
    .collect();

    let mut agents = Vec::new();
    for (i, (id, rows, cols)) in sections.iter().enumerate() {
        let bias = format!("s{}", i + 1);
        variables.push(VarDecl {
            name: bias.clone(),
            dim: 2,
        });
        priors.insert(
            bias.clone(),
            PriorDecl {
                mean: vec![0.0, 0.0],
                cov: diag2(4.0, 4.0),
            },
        );
        let mut vars = Vec::new();
        let mut sensors = Vec::new();
        for row in rows[0]..=rows[1] {
            for col in cols[0]..=cols[1] {
                let name = format!("L{row}{col}");
                vars.push(name.clone());
                sensors.push(SensorTemplate {
                    name: format!("rel-{name}"),
                    vars: vec![name.clone(), bias.clone()],
                    h: biased_relative_h(),
                    r: diag2(9.0, 9.0),
                    visibility: Visibility::Range {
                        point: mapping_landmark_position(row, col),
                        radius: 45.0,
                    },
                });
            }
        }
        sensors.push(SensorTemplate {
            name: "bias".into(),
            vars: vec![bias.clone()],
            h: eye2(),
            r: diag2(1.0, 1.0),
            visibility: Visibility::Always,
        });
        vars.push(bias);
        agents.push(AgentDecl {
            id: id.to_string(),
            variables: vars,
            trajectory: Some(trajectories[id].clone()),
            sensors,
        });
    }
    let links = (1..4)
        .map(|i| (format!("a{i}"), format!("a{}", i + 1)))
        .collect();
    ScenarioConfig {
        name: "mapping".into(),
        kind: ScenarioKind::Mapping,
        field: Some([180.0, 160.0]),
        variables,
        priors,
        agents,
        links,
        mc: McConfig {
            runs: 10,
            steps: 120,
            seed: 7,
        },
    }
}
