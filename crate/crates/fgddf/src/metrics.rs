//! Monte Carlo harness and evaluation metrics: RMSE, NEES, two-sigma
//! coverage, conservativeness versus the centralized baseline, and the
//! communication/computation cost ledgers.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use serde::Serialize;
use serde_json::json;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::agent::RunTrace;
use crate::canonical::symmetrized;
use crate::error::{Error, Result};
use crate::scenario::{realize, run_centralized, run_decentralized, ScenarioConfig};

/// Scalars needed to transmit one canonical factor of dimension `n`:
/// the information vector plus the upper triangle of the information matrix.
pub fn scalars_for_dim(n: usize) -> u64 {
    let n = n as u64;
    n + n * (n + 1) / 2
}

/// Aggregated Monte Carlo results for one scenario.
#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub runs: u64,
    pub steps: u64,
    /// Per agent, per variable, per step: sqrt of the mean squared error norm.
    pub rmse: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// Per agent, per step: NEES averaged over runs.
    pub nees_mean: BTreeMap<String, Vec<f64>>,
    /// Grand mean NEES over agents, steps and runs.
    pub avg_nees: f64,
    /// Fraction of per-component errors inside the reported 2-sigma bound.
    pub two_sigma_coverage: f64,
    /// Minimum eigenvalue of (P_agent - P_centralized_marginal) over all
    /// runs, steps and agents; conservative estimates keep this >= ~0.
    pub conservativeness_min_eig: f64,
    /// Scalars actually sent per agent over one run (deterministic scopes).
    pub comm_scalars: BTreeMap<String, u64>,
    /// Per-agent reference count: one full-state factor per link direction
    /// per step.
    pub comm_scalars_homogeneous_ref: BTreeMap<String, u64>,
    /// Local joint dimension per agent.
    pub comp_state_dim: BTreeMap<String, usize>,
    pub global_dim: usize,
}

/// Communication/computation cost ledger comparing the heterogeneous run
/// against the homogeneous full-state reference.
///
/// Conventions: a factor over `n` scalars costs `n + n(n+1)/2` scalars to
/// send; the homogeneous reference ships one full-state factor per link
/// direction per step; computation is proxied by the cube of the local joint
/// dimension (dense inference cost), reported for the worst agent.
#[derive(Debug, Clone, Serialize)]
pub struct CostLedger {
    pub per_agent: BTreeMap<String, AgentCost>,
    pub global_dim: usize,
    pub steps: u64,
    pub comm_scalars: u64,
    pub comm_scalars_homogeneous: u64,
    pub comm_ratio: f64,
    pub max_local_dim: usize,
    pub comp_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentCost {
    pub local_dim: usize,
    pub sent_scalars: u64,
    pub homogeneous_sent_scalars: u64,
}

/// Derive the cost ledger from a finished run.
pub fn compute_costs(cfg: &ScenarioConfig, trace: &RunTrace) -> Result<CostLedger> {
    let topology = cfg.topology()?;
    let global_dim = cfg.global_dim();
    let per_message_homogeneous = scalars_for_dim(global_dim);
    let sent = trace.sent_scalars_by_agent();
    let mut per_agent = BTreeMap::new();
    let mut total_sent = 0;
    let mut total_homo = 0;
    let mut max_local_dim = 0;
    for a in &cfg.agents {
        let links = topology.neighbors_of(&a.id).len() as u64;
        let local_dim = cfg.agent_dim(&a.id)?;
        let sent_scalars = sent.get(&a.id).copied().unwrap_or(0);
        let homogeneous_sent_scalars = links * cfg.mc.steps * per_message_homogeneous;
        total_sent += sent_scalars;
        total_homo += homogeneous_sent_scalars;
        max_local_dim = max_local_dim.max(local_dim);
        per_agent.insert(
            a.id.clone(),
            AgentCost {
                local_dim,
                sent_scalars,
                homogeneous_sent_scalars,
            },
        );
    }
    let d = global_dim as f64;
    let m = max_local_dim as f64;
    Ok(CostLedger {
        per_agent,
        global_dim,
        steps: cfg.mc.steps,
        comm_scalars: total_sent,
        comm_scalars_homogeneous: total_homo,
        comm_ratio: if total_homo > 0 {
            total_sent as f64 / total_homo as f64
        } else {
            0.0
        },
        max_local_dim,
        comp_ratio: (m / d).powi(3),
    })
}

/// Run the configured number of Monte Carlo repetitions: each run samples
/// ground truth from the prior, replays identical measurements into the
/// decentralized network and the centralized baseline, and accumulates
/// error/consistency metrics.
pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let steps = cfg.mc.steps as usize;
    let mut metrics = RunMetrics {
        runs: cfg.mc.runs,
        steps: cfg.mc.steps,
        global_dim: cfg.global_dim(),
        conservativeness_min_eig: f64::INFINITY,
        ..Default::default()
    };
    let topology = cfg.topology()?;
    for a in &cfg.agents {
        metrics
            .comp_state_dim
            .insert(a.id.clone(), cfg.agent_dim(&a.id)?);
        let links = topology.neighbors_of(&a.id).len() as u64;
        metrics.comm_scalars_homogeneous_ref.insert(
            a.id.clone(),
            links * cfg.mc.steps * scalars_for_dim(cfg.global_dim()),
        );
    }
    if cfg.mc.runs == 0 {
        metrics.conservativeness_min_eig = 0.0;
        return Ok(metrics);
    }

    let mut sq_err: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut nees_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut nees_total = 0.0;
    let mut nees_count = 0u64;
    let mut covered = 0u64;
    let mut components = 0u64;

    for run in 0..cfg.mc.runs {
        let seed = run_seed(cfg.mc.seed, run);
        let realization = realize(cfg, seed)?;
        let trace = run_decentralized(cfg, &realization)?;
        let central = run_centralized(cfg, &realization)?;
        let central_moments = central.moments()?;

        if run == 0 {
            metrics.comm_scalars = trace.sent_scalars_by_agent();
        }

        for rec in &trace.records {
            let k = rec.step as usize;
            for (name, marginal) in &rec.marginals {
                let truth = &realization.truth[name];
                let err = marginal.mean() - truth;
                sq_err
                    .entry(rec.agent.clone())
                    .or_default()
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; steps])[k] += err.norm_squared();
                for c in 0..marginal.dim() {
                    let sigma = marginal.covariance()[(c, c)].sqrt();
                    if err[c].abs() <= 2.0 * sigma {
                        covered += 1;
                    }
                    components += 1;
                }
            }
            if let Some(nees) = rec.nees {
                nees_acc
                    .entry(rec.agent.clone())
                    .or_insert_with(|| vec![0.0; steps])[k] += nees;
                nees_total += nees;
                nees_count += 1;
            }

            // Conservativeness: the agent's full local covariance must
            // dominate the centralized marginal over the same variables.
            let local = rec.joint.to_moment()?;
            let keep = local
                .scope()
                .iter()
                .map(|v| v.name())
                .collect::<std::collections::BTreeSet<&str>>();
            let reference = central_moments[k].restrict(&keep)?;
            let diff = local.covariance() - reference.covariance();
            let min_eig = SymmetricEigen::new(symmetrized(diff)).eigenvalues.min();
            metrics.conservativeness_min_eig = metrics.conservativeness_min_eig.min(min_eig);
        }
    }

    let runs = cfg.mc.runs as f64;
    for (agent, vars) in sq_err {
        let entry = metrics.rmse.entry(agent).or_default();
        for (var, sums) in vars {
            entry.insert(var, sums.into_iter().map(|s| (s / runs).sqrt()).collect());
        }
    }
    for (agent, sums) in nees_acc {
        metrics
            .nees_mean
            .insert(agent, sums.into_iter().map(|s| s / runs).collect());
    }
    metrics.avg_nees = if nees_count > 0 {
        nees_total / nees_count as f64
    } else {
        0.0
    };
    metrics.two_sigma_coverage = if components > 0 {
        covered as f64 / components as f64
    } else {
        0.0
    };
    Ok(metrics)
}

/// Deterministic per-run seed derivation.
pub fn run_seed(base: u64, run: u64) -> u64 {
    base ^ (run.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// 95% interval for the per-step NEES average of `samples` independent runs
/// of a consistent filter with state dimension `dim`.
pub fn nees_interval_95(dim: usize, samples: u64) -> (f64, f64) {
    let n = samples as f64;
    let chi = ChiSquared::new(dim as f64 * n).expect("positive dof");
    (chi.inverse_cdf(0.025) / n, chi.inverse_cdf(0.975) / n)
}

/// Largest relative gap, over all links and their common variables, between
/// the time-averaged RMSE reported by the two link endpoints.
pub fn max_common_rmse_gap(cfg: &ScenarioConfig, metrics: &RunMetrics) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (a, b) in &cfg.links {
        for v in cfg.common_vars(a, b)? {
            let mean_of = |agent: &str| -> Result<f64> {
                let series = metrics
                    .rmse
                    .get(agent)
                    .and_then(|m| m.get(v.name()))
                    .ok_or_else(|| {
                        Error::Config(format!("no RMSE series for `{agent}`/`{}`", v.name()))
                    })?;
                Ok(series.iter().sum::<f64>() / series.len().max(1) as f64)
            };
            let ra = mean_of(a)?;
            let rb = mean_of(b)?;
            let gap = (ra - rb).abs() / ra.max(rb).max(f64::MIN_POSITIVE);
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

/// Flat CSV of the aggregated metrics: one row per (agent, variable, step).
pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("agent,variable,step,rmse,nees_mean\n");
    for (agent, vars) in &metrics.rmse {
        let nees = metrics.nees_mean.get(agent);
        for (var, series) in vars {
            for (step, rmse) in series.iter().enumerate() {
                let nees_str = nees
                    .and_then(|n| n.get(step))
                    .map_or(String::new(), |v| format!("{v:.17e}"));
                out.push_str(&format!("{agent},{var},{step},{rmse:.17e},{nees_str}\n"));
            }
        }
    }
    out
}

/// Summary JSON with the headline numbers.
pub fn summary_json(metrics: &RunMetrics, costs: &CostLedger) -> serde_json::Value {
    let rmse_values: Vec<f64> = metrics
        .rmse
        .values()
        .flat_map(|vars| vars.values())
        .flat_map(|series| series.iter().copied())
        .collect();
    let mean_rmse = if rmse_values.is_empty() {
        0.0
    } else {
        rmse_values.iter().sum::<f64>() / rmse_values.len() as f64
    };
    json!({
        "rmse": mean_rmse,
        "nees": metrics.avg_nees,
        "coverage": metrics.two_sigma_coverage,
        "comm_ratio": costs.comm_ratio,
        "comp_ratio": costs.comp_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{SensorTemplate, Visibility};
    use crate::scenario::{
        build_tracking_scenario, realize, run_decentralized, AgentDecl, McConfig, PriorDecl,
        ScenarioConfig, ScenarioKind, VarDecl,
    };
    use std::collections::BTreeMap;

    #[test]
    fn zero_runs_give_empty_metrics() {
        let mut cfg = build_tracking_scenario();
        cfg.mc.runs = 0;
        let metrics = run_monte_carlo(&cfg).unwrap();
        assert!(metrics.rmse.is_empty());
        assert!(metrics.nees_mean.is_empty());
        assert_eq!(metrics.two_sigma_coverage, 0.0);
        assert_eq!(metrics.comp_state_dim.len(), 5);
    }

    #[test]
    fn nees_interval_brackets_the_dimension() {
        let (lo, hi) = nees_interval_95(2, 50);
        assert!(lo < 2.0 && 2.0 < hi);
        assert!(lo > 1.0 && hi < 3.0);
    }

    #[test]
    fn scalar_counting_convention() {
        assert_eq!(scalars_for_dim(1), 2);
        assert_eq!(scalars_for_dim(2), 5);
        assert_eq!(scalars_for_dim(4), 14);
        assert_eq!(scalars_for_dim(22), 275);
    }

    #[test]
    fn tracking_costs_are_a_small_fraction_of_homogeneous() {
        let mut cfg = build_tracking_scenario();
        cfg.mc.steps = 5;
        let realization = realize(&cfg, 9).unwrap();
        let trace = run_decentralized(&cfg, &realization).unwrap();
        let costs = compute_costs(&cfg, &trace).unwrap();
        assert!(costs.comm_ratio < 0.10, "comm ratio {}", costs.comm_ratio);
        assert!(costs.comp_ratio < 0.10, "comp ratio {}", costs.comp_ratio);
        assert_eq!(costs.global_dim, 22);
        assert_eq!(costs.max_local_dim, 8);
        for cost in costs.per_agent.values() {
            assert!(cost.sent_scalars <= cost.homogeneous_sent_scalars);
        }
    }

    #[test]
    fn small_monte_carlo_smoke() {
        let mut cfg = build_tracking_scenario();
        cfg.mc.runs = 2;
        cfg.mc.steps = 3;
        let metrics = run_monte_carlo(&cfg).unwrap();
        assert_eq!(metrics.runs, 2);
        assert!(metrics.two_sigma_coverage > 0.5 && metrics.two_sigma_coverage <= 1.0);
        assert!(metrics.conservativeness_min_eig >= -1e-9);
        assert_eq!(metrics.rmse["a3"].len(), 4);
        assert_eq!(metrics.rmse["a3"]["T4"].len(), 3);
        let csv = metrics_csv(&metrics);
        assert!(csv.lines().count() > 1);
    }

    /// Homogeneous full-rate fusion equals the centralized filter, which is
    /// exactly consistent, so the per-step run-averaged NEES must sit inside
    /// the 95% chi-square interval for the (global) state dimension.
    #[test]
    fn homogeneous_nees_is_chi_square_consistent() {
        let sensor = |target: &str, noise: f64| SensorTemplate {
            name: format!("abs-{target}"),
            vars: vec![target.to_string()],
            h: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![noise, 0.0], vec![0.0, noise]],
            visibility: Visibility::Always,
        };
        let mut priors = BTreeMap::new();
        for name in ["u", "v"] {
            priors.insert(
                name.to_string(),
                PriorDecl {
                    mean: vec![1.0, -1.0],
                    cov: vec![vec![9.0, 0.0], vec![0.0, 9.0]],
                },
            );
        }
        let cfg = ScenarioConfig {
            name: "nees-consistency".into(),
            kind: ScenarioKind::Custom,
            field: None,
            variables: vec![
                VarDecl { name: "u".into(), dim: 2 },
                VarDecl { name: "v".into(), dim: 2 },
            ],
            priors,
            agents: ["a1", "a2", "a3"]
                .into_iter()
                .map(|id| AgentDecl {
                    id: id.into(),
                    variables: vec!["u".into(), "v".into()],
                    trajectory: None,
                    sensors: vec![sensor("u", 2.0), sensor("v", 4.0)],
                })
                .collect(),
            links: vec![
                ("a1".to_string(), "a2".to_string()),
                ("a2".to_string(), "a3".to_string()),
            ],
            mc: McConfig { runs: 50, steps: 5, seed: 13 },
        };
        let metrics = run_monte_carlo(&cfg).unwrap();
        let (lo, hi) = nees_interval_95(cfg.global_dim(), cfg.mc.runs);
        for (agent, series) in &metrics.nees_mean {
            let last = *series.last().unwrap();
            assert!(
                lo <= last && last <= hi,
                "agent {agent}: final-step mean NEES {last:.3} outside [{lo:.3}, {hi:.3}]"
            );
        }
    }

    #[test]
    fn mapping_monte_carlo_stays_conservative() {
        let mut cfg = crate::scenario::build_mapping_scenario();
        cfg.mc.runs = 2;
        cfg.mc.steps = 60;
        let metrics = run_monte_carlo(&cfg).unwrap();
        assert!(
            metrics.conservativeness_min_eig >= -1e-9,
            "min eig {:.3e}",
            metrics.conservativeness_min_eig
        );
        assert!(metrics.two_sigma_coverage >= 0.9);
        for agent in ["a1", "a2", "a3", "a4"] {
            assert!(metrics.comm_scalars[agent] > 0);
            assert!(metrics.comm_scalars[agent] < metrics.comm_scalars_homogeneous_ref[agent]);
        }
    }

    #[test]
    fn summary_contains_the_headline_fields() {
        let mut cfg = build_tracking_scenario();
        cfg.mc.runs = 1;
        cfg.mc.steps = 2;
        let metrics = run_monte_carlo(&cfg).unwrap();
        let realization = realize(&cfg, run_seed(cfg.mc.seed, 0)).unwrap();
        let trace = run_decentralized(&cfg, &realization).unwrap();
        let costs = compute_costs(&cfg, &trace).unwrap();
        let summary = summary_json(&metrics, &costs);
        for key in ["rmse", "nees", "coverage", "comm_ratio", "comp_ratio"] {
            assert!(summary.get(key).is_some(), "missing `{key}`");
        }
    }
}
