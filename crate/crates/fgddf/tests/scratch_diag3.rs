//! Temporary diagnostic: minimal reproducer for the mapping conservativeness
//! violation.

use std::collections::{BTreeMap, BTreeSet};

use fgddf::agent::{SensorTemplate, Visibility};
use fgddf::metrics::run_seed;
use fgddf::scenario::{
    realize, run_centralized, run_decentralized, AgentDecl, McConfig, PriorDecl, ScenarioConfig,
    ScenarioKind, VarDecl,
};

fn sensor(landmark: &str, bias: &str) -> SensorTemplate {
    SensorTemplate {
        name: format!("rel-{landmark}"),
        vars: vec![landmark.to_string(), bias.to_string()],
        h: vec![
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
        ],
        r: vec![vec![9.0, 0.0], vec![0.0, 9.0]],
        visibility: Visibility::Always,
    }
}

fn bias_sensor(bias: &str) -> SensorTemplate {
    SensorTemplate {
        name: "bias".into(),
        vars: vec![bias.to_string()],
        h: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        r: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        visibility: Visibility::Always,
    }
}

/// Commons-only core of the mapping layout: the center landmark shared by
/// all links, two extra landmarks per link, one bias per agent.
fn core(sets: &[(&str, &[&str])], links: &[(usize, usize)], steps: u64) -> ScenarioConfig {
    let mut names = BTreeSet::new();
    for (_, vars) in sets {
        names.extend(vars.iter().copied());
    }
    let mut variables = Vec::new();
    let mut priors = BTreeMap::new();
    for (i, _) in sets.iter().enumerate() {
        names.insert(Box::leak(format!("s{}", i + 1).into_boxed_str()));
    }
    for name in &names {
        variables.push(VarDecl {
            name: name.to_string(),
            dim: 2,
        });
        priors.insert(
            name.to_string(),
            PriorDecl {
                mean: vec![10.0, 10.0],
                cov: vec![vec![100.0, 0.0], vec![0.0, 100.0]],
            },
        );
    }
    let agents = sets
        .iter()
        .enumerate()
        .map(|(i, (id, vars))| {
            let bias = format!("s{}", i + 1);
            let mut v: Vec<String> = vars.iter().map(|s| s.to_string()).collect();
            let sensors = v
                .iter()
                .map(|l| sensor(l, &bias))
                .chain([bias_sensor(&bias)])
                .collect();
            v.push(bias);
            AgentDecl {
                id: id.to_string(),
                variables: v,
                trajectory: None,
                sensors,
            }
        })
        .collect();
    ScenarioConfig {
        name: "core".into(),
        kind: ScenarioKind::Custom,
        field: None,
        variables,
        priors,
        agents,
        links: links
            .iter()
            .map(|&(a, b)| (sets[a].0.to_string(), sets[b].0.to_string()))
            .collect(),
        mc: McConfig {
            runs: 1,
            steps,
            seed: 5,
        },
    }
}

fn min_eig(cfg: &ScenarioConfig) -> f64 {
    let seed = run_seed(cfg.mc.seed, 0);
    let realization = realize(cfg, seed).unwrap();
    let trace = run_decentralized(cfg, &realization).unwrap();
    let central = run_centralized(cfg, &realization).unwrap();
    let moments = central.moments().unwrap();
    let mut worst = f64::INFINITY;
    for rec in &trace.records {
        let local = rec.joint.to_moment().unwrap();
        let keep: BTreeSet<&str> = local.scope().iter().map(|v| v.name()).collect();
        let reference = moments[rec.step as usize].restrict(&keep).unwrap();
        let diff = local.covariance() - reference.covariance();
        let sym = (diff.clone() + diff.transpose()) * 0.5;
        worst = worst.min(nalgebra::SymmetricEigen::new(sym).eigenvalues.min());
    }
    worst
}

#[test]
fn minimal_reproducers() {
    // Full commons-only mapping core.
    let full = core(
        &[
            ("a1", &["L20", "L21", "L22"]),
            ("a2", &["L20", "L21", "L22", "L32", "L42"]),
            ("a3", &["L22", "L32", "L42", "L23", "L24"]),
            ("a4", &["L22", "L23", "L24"]),
        ],
        &[(0, 1), (1, 2), (2, 3)],
        3,
    );
    println!("mapping core, 4 agents      : {:+.3e}", min_eig(&full));

    // Three agents, center + one extra landmark per link.
    let three = core(
        &[
            ("a1", &["M", "A"]),
            ("a2", &["M", "A", "B"]),
            ("a3", &["M", "B"]),
        ],
        &[(0, 1), (1, 2)],
        3,
    );
    println!("3 agents, M on both links   : {:+.3e}", min_eig(&three));

    // Three agents where the middle pair variables differ but M is shared.
    let three_b = core(
        &[
            ("a1", &["M", "A", "A2"]),
            ("a2", &["M", "A", "A2", "B", "B2"]),
            ("a3", &["M", "B", "B2"]),
        ],
        &[(0, 1), (1, 2)],
        3,
    );
    println!("3 agents, wider commons     : {:+.3e}", min_eig(&three_b));

    // Same but every agent also owns a private landmark (measured through
    // the same bias), like the full mapping sections.
    let three_p = core(
        &[
            ("a1", &["M", "A", "P1"]),
            ("a2", &["M", "A", "B", "P2"]),
            ("a3", &["M", "B", "P3"]),
        ],
        &[(0, 1), (1, 2)],
        3,
    );
    println!("3 agents + private landmarks: {:+.3e}", min_eig(&three_p));

    // Private landmark only at the middle relay.
    let relay_p = core(
        &[
            ("a1", &["M", "A"]),
            ("a2", &["M", "A", "B", "P2"]),
            ("a3", &["M", "B"]),
        ],
        &[(0, 1), (1, 2)],
        3,
    );
    println!("3 agents, relay private only: {:+.3e}", min_eig(&relay_p));

    // Private landmark only at an end agent.
    let end_p = core(
        &[
            ("a1", &["M", "A", "P1"]),
            ("a2", &["M", "A", "B"]),
            ("a3", &["M", "B"]),
        ],
        &[(0, 1), (1, 2)],
        3,
    );
    println!("3 agents, end private only  : {:+.3e}", min_eig(&end_p));

    // Two agents with privates.
    let two_p = core(
        &[("a1", &["M", "P1"]), ("a2", &["M", "P2"])],
        &[(0, 1)],
        3,
    );
    println!("2 agents + privates         : {:+.3e}", min_eig(&two_p));
}

#[test]
fn shrink_real_mapping() {
    use fgddf::scenario::build_mapping_scenario;
    // Ungated baseline.
    let mut base = build_mapping_scenario();
    base.mc.runs = 1;
    base.mc.steps = 3;
    for a in &mut base.agents {
        for s in &mut a.sensors {
            s.visibility = Visibility::Always;
        }
    }
    println!("real, ungated, 3 steps      : {:+.3e}", min_eig(&base));

    // Drop all never-shared landmarks (keep commons + bias per agent).
    let commons: BTreeSet<&str> = ["L20", "L21", "L22", "L32", "L42", "L23", "L24"]
        .into_iter()
        .collect();
    let mut no_priv = base.clone();
    for a in &mut no_priv.agents {
        a.variables
            .retain(|v| commons.contains(v.as_str()) || v.starts_with('s'));
        a.sensors
            .retain(|s| s.vars.iter().all(|v| commons.contains(v.as_str()) || v.starts_with('s')));
    }
    no_priv
        .variables
        .retain(|v| commons.contains(v.name.as_str()) || v.name.starts_with('s'));
    no_priv
        .priors
        .retain(|k, _| commons.contains(k.as_str()) || k.starts_with('s'));
    println!("real minus privates         : {:+.3e}", min_eig(&no_priv));

    // Keep privates but widen the bias priors to match the landmark priors.
    let mut wide_bias = base.clone();
    for i in 1..=4 {
        wide_bias.priors.get_mut(&format!("s{i}")).unwrap().cov =
            vec![vec![100.0, 0.0], vec![0.0, 100.0]];
    }
    println!("real, bias prior 100        : {:+.3e}", min_eig(&wide_bias));

    // Keep only agents a1, a2 and their variables/link.
    let mut pair = base.clone();
    pair.agents.truncate(2);
    pair.links = vec![("a1".to_string(), "a2".to_string())];
    let keep: BTreeSet<String> = pair
        .agents
        .iter()
        .flat_map(|a| a.variables.iter().cloned())
        .collect();
    pair.variables.retain(|v| keep.contains(&v.name));
    pair.priors.retain(|k, _| keep.contains(k));
    println!("real, first two agents only : {:+.3e}", min_eig(&pair));

    // First three agents.
    let mut trio = base.clone();
    trio.agents.truncate(3);
    trio.links = vec![
        ("a1".to_string(), "a2".to_string()),
        ("a2".to_string(), "a3".to_string()),
    ];
    let keep: BTreeSet<String> = trio
        .agents
        .iter()
        .flat_map(|a| a.variables.iter().cloned())
        .collect();
    trio.variables.retain(|v| keep.contains(&v.name));
    trio.priors.retain(|k, _| keep.contains(k));
    println!("real, first three agents    : {:+.3e}", min_eig(&trio));
}
