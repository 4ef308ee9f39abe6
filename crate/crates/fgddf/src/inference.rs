//! Marginal inference over factor graphs.
//!
//! The reference path recovers the dense joint and Schur-marginalizes it per
//! query; it is the correctness anchor. The optimized path runs Gaussian
//! sum-product directly on the graph when it is a tree and otherwise first
//! restores tree structure by merging the variables of each remaining cycle
//! into a clique, re-homing incident factors onto the clique node.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::canonical::{gather, gather_vec, sym_inverse, symmetrized, MomentGaussian, VariableId};
use crate::error::{Error, Result};
use crate::graph::FactorGraph;

impl FactorGraph {
    /// Per-query moment-form marginals via sum-product (with clique formation
    /// on cyclic graphs). Agrees with [`FactorGraph::reference_marginals`] to
    /// high accuracy whenever the joint is a proper distribution.
    pub fn infer_marginals(
        &self,
        queries: &BTreeSet<&str>,
    ) -> Result<BTreeMap<String, MomentGaussian>> {
        infer_marginals(self, queries)
    }

    /// Exact-joint reference path: `marginalize(joint(g), {v})` per query.
    pub fn reference_marginals(
        &self,
        queries: &BTreeSet<&str>,
    ) -> Result<BTreeMap<String, MomentGaussian>> {
        let joint = self.joint();
        let mut out = BTreeMap::new();
        for q in queries {
            let marginal = joint
                .marginalize(&BTreeSet::from([*q]))
                .map_err(improper)?;
            out.insert((*q).to_string(), marginal.to_moment().map_err(improper)?);
        }
        Ok(out)
    }
}

fn improper(e: Error) -> Error {
    match e {
        Error::SingularMarginalization(msg) | Error::NotADistribution(msg) => {
            Error::ImproperPosterior(msg)
        }
        other => other,
    }
}

/// A node in the working graph: either a single variable or a clique of
/// variables merged to break cycles. Members stay in canonical name order.
#[derive(Debug, Clone)]
struct Node {
    members: Vec<VariableId>,
    dim: usize,
}

impl Node {
    fn singleton(v: VariableId) -> Self {
        let dim = v.dim();
        Self {
            members: vec![v],
            dim,
        }
    }

    /// Flat (name, component) layout of this node's state vector.
    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::with_capacity(self.dim);
        for m in &self.members {
            for c in 0..m.dim() {
                out.push((m.name().to_string(), c));
            }
        }
        out
    }
}

/// A factor re-expressed over node indices; the parameter layout is the
/// concatenation of node layouts in scope order.
#[derive(Debug, Clone)]
struct NodeFactor {
    scope: Vec<usize>,
    zeta: DVector<f64>,
    lambda: DMatrix<f64>,
}

/// A canonical-form message or belief over one node's stacked state.
type Belief = (DVector<f64>, DMatrix<f64>);
/// Directed-edge message store keyed by (factor, node) or (node, factor).
type MessageMap = BTreeMap<(usize, usize), Belief>;

#[derive(Debug, Clone)]
struct WorkGraph {
    nodes: Vec<Node>,
    factors: Vec<NodeFactor>,
}

impl WorkGraph {
    fn from_factor_graph(g: &FactorGraph) -> Self {
        let vars = g.variables();
        let index: BTreeMap<&str, usize> = vars
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name(), i))
            .collect();
        let nodes: Vec<Node> = vars.iter().cloned().map(Node::singleton).collect();
        // Factors over the identical scope are summed into one; long-running
        // graphs accumulate thousands of same-scope measurement factors and
        // the compaction keeps clique formation linear in the distinct scopes.
        let mut factors: Vec<NodeFactor> = Vec::new();
        let mut by_scope: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for (_, f) in g.factors() {
            if f.scope().is_empty() {
                continue;
            }
            // Canonical factor layout is name-ascending, which matches the
            // ascending node-index layout for singleton nodes.
            let scope: Vec<usize> = f.scope().iter().map(|v| index[v.name()]).collect();
            match by_scope.get(&scope) {
                Some(&i) => {
                    factors[i].zeta += f.zeta();
                    factors[i].lambda += f.lambda();
                }
                None => {
                    by_scope.insert(scope.clone(), factors.len());
                    factors.push(NodeFactor {
                        scope,
                        zeta: f.zeta().clone(),
                        lambda: f.lambda().clone(),
                    });
                }
            }
        }
        Self { nodes, factors }
    }

    /// Find one cycle in the bipartite (node, factor) graph and return the
    /// variable-node indices on it, or None if the graph is already a forest.
    fn find_cycle_nodes(&self) -> Option<BTreeSet<usize>> {
        // Vertex ids: 0..n are nodes, n..n+m are factors.
        let n = self.nodes.len();
        let m = self.factors.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + m];
        for (fi, f) in self.factors.iter().enumerate() {
            for &ni in &f.scope {
                adj[ni].push(n + fi);
                adj[n + fi].push(ni);
            }
        }
        let mut parent: Vec<Option<usize>> = vec![None; n + m];
        let mut state = vec![0u8; n + m]; // 0 unvisited, 1 on stack, 2 done
        for start in 0..n + m {
            if state[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            state[start] = 1;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if *next < adj[v].len() {
                    let w = adj[v][*next];
                    *next += 1;
                    if Some(w) == parent[v] {
                        // One edge back to the parent is tree structure; a
                        // second parallel edge cannot occur since factor
                        // scopes list each variable once.
                        continue;
                    }
                    if state[w] == 1 {
                        // Back edge: walk the stack from v up to w.
                        let mut cycle = BTreeSet::new();
                        if w < n {
                            cycle.insert(w);
                        }
                        let mut cur = v;
                        while cur != w {
                            if cur < n {
                                cycle.insert(cur);
                            }
                            cur = parent[cur].expect("stack vertices have parents");
                        }
                        return Some(cycle);
                    }
                    if state[w] == 0 {
                        state[w] = 1;
                        parent[w] = Some(v);
                        stack.push((w, 0));
                    }
                } else {
                    state[v] = 2;
                    stack.pop();
                }
            }
        }
        None
    }

    /// Merge the given nodes into a single clique node and re-home every
    /// incident factor onto it.
    fn merge(&mut self, merge_set: &BTreeSet<usize>) {
        let mut members: Vec<VariableId> = merge_set
            .iter()
            .flat_map(|&i| self.nodes[i].members.iter().cloned())
            .collect();
        members.sort_by(|a, b| a.name().cmp(b.name()));
        let dim = members.iter().map(|v| v.dim()).sum();
        let clique = Node { members, dim };

        // Rebuild the node list: surviving nodes keep relative order, the
        // clique is appended at the end.
        let mut remap: Vec<Option<usize>> = vec![None; self.nodes.len()];
        let mut new_nodes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !merge_set.contains(&i) {
                remap[i] = Some(new_nodes.len());
                new_nodes.push(node.clone());
            }
        }
        let clique_idx = new_nodes.len();
        new_nodes.push(clique);
        for &i in merge_set {
            remap[i] = Some(clique_idx);
        }

        let component_pos = |nodes: &[Node], scope: &[usize]| -> BTreeMap<(String, usize), usize> {
            let mut map = BTreeMap::new();
            let mut off = 0;
            for &ni in scope {
                for entry in nodes[ni].layout() {
                    map.insert(entry, off);
                    off += 1;
                }
            }
            map
        };

        let old_nodes = std::mem::replace(&mut self.nodes, new_nodes);
        let factors = std::mem::take(&mut self.factors);
        for f in factors {
            let mut new_scope: Vec<usize> =
                f.scope.iter().map(|&ni| remap[ni].unwrap()).collect();
            new_scope.sort_unstable();
            new_scope.dedup();

            let old_map = component_pos(&old_nodes, &f.scope);
            let new_map = component_pos(&self.nodes, &new_scope);
            let new_dim: usize = new_scope.iter().map(|&ni| self.nodes[ni].dim).sum();
            let mut zeta = DVector::zeros(new_dim);
            let mut lambda = DMatrix::zeros(new_dim, new_dim);
            let mut pos_map = vec![0usize; f.zeta.len()];
            for (entry, &old_pos) in &old_map {
                pos_map[old_pos] = new_map[entry];
            }
            for (old_r, &new_r) in pos_map.iter().enumerate() {
                zeta[new_r] = f.zeta[old_r];
                for (old_c, &new_c) in pos_map.iter().enumerate() {
                    lambda[(new_r, new_c)] = f.lambda[(old_r, old_c)];
                }
            }
            self.factors.push(NodeFactor {
                scope: new_scope,
                zeta,
                lambda,
            });
        }
    }

    /// Merge cycle variable sets until the bipartite graph is a forest.
    fn form_cliques(&mut self) {
        while let Some(cycle) = self.find_cycle_nodes() {
            debug_assert!(cycle.len() >= 2, "a bipartite cycle spans >= 2 variables");
            self.merge(&cycle);
        }
    }

    /// Two-pass Gaussian sum-product; requires the graph to be a forest.
    /// Returns the canonical-form belief (zeta, lambda) per node.
    fn sum_product(&self) -> Result<Vec<Belief>> {
        let n = self.nodes.len();
        let mut node_factors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (fi, f) in self.factors.iter().enumerate() {
            for &ni in &f.scope {
                node_factors[ni].push(fi);
            }
        }

        // Message storage keyed by (factor, node).
        let mut to_node: MessageMap = BTreeMap::new();
        let mut to_factor: MessageMap = BTreeMap::new();

        // Dependency counts. A node->factor message waits on all other
        // factors at that node; a factor->node message waits on all other
        // nodes in the factor scope.
        let mut nf_deps: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut fn_deps: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut ready: Vec<(bool, usize, usize)> = Vec::new(); // (is_node_to_factor, node, factor)
        for (ni, adjacent) in node_factors.iter().enumerate() {
            for &fi in adjacent {
                let d = adjacent.len() - 1;
                nf_deps.insert((ni, fi), d);
                if d == 0 {
                    ready.push((true, ni, fi));
                }
            }
        }
        for (fi, f) in self.factors.iter().enumerate() {
            for &ni in &f.scope {
                let d = f.scope.len() - 1;
                fn_deps.insert((fi, ni), d);
                if d == 0 {
                    ready.push((false, ni, fi));
                }
            }
        }

        while let Some((is_nf, ni, fi)) = ready.pop() {
            if is_nf {
                if to_factor.contains_key(&(ni, fi)) {
                    continue;
                }
                let mut zeta = DVector::zeros(self.nodes[ni].dim);
                let mut lambda = DMatrix::zeros(self.nodes[ni].dim, self.nodes[ni].dim);
                for &other in &node_factors[ni] {
                    if other == fi {
                        continue;
                    }
                    let (z, l) = to_node
                        .get(&(other, ni))
                        .expect("dependency counting guarantees availability");
                    zeta += z;
                    lambda += l;
                }
                to_factor.insert((ni, fi), (zeta, lambda));
                // Unblock the factor's messages to its other scope nodes.
                for &dest in &self.factors[fi].scope {
                    if dest == ni {
                        continue;
                    }
                    let d = fn_deps.get_mut(&(fi, dest)).expect("edge exists");
                    *d -= 1;
                    if *d == 0 {
                        ready.push((false, dest, fi));
                    }
                }
            } else {
                if to_node.contains_key(&(fi, ni)) {
                    continue;
                }
                let msg = self.factor_to_node(fi, ni, &to_factor)?;
                to_node.insert((fi, ni), msg);
                for &other in &node_factors[ni] {
                    if other == fi {
                        continue;
                    }
                    let d = nf_deps.get_mut(&(ni, other)).expect("edge exists");
                    *d -= 1;
                    if *d == 0 {
                        ready.push((true, ni, other));
                    }
                }
            }
        }

        let mut beliefs = Vec::with_capacity(n);
        for (ni, adjacent) in node_factors.iter().enumerate() {
            let mut zeta = DVector::zeros(self.nodes[ni].dim);
            let mut lambda = DMatrix::zeros(self.nodes[ni].dim, self.nodes[ni].dim);
            for &fi in adjacent {
                let (z, l) = to_node.get(&(fi, ni)).ok_or_else(|| {
                    Error::ImproperPosterior(
                        "message passing did not converge; graph is not a forest".into(),
                    )
                })?;
                zeta += z;
                lambda += l;
            }
            beliefs.push((zeta, symmetrized(lambda)));
        }
        Ok(beliefs)
    }

    /// Message from factor `fi` to node `ni`: absorb the incoming messages of
    /// all other scope nodes, then Schur-marginalize onto `ni`'s block.
    fn factor_to_node(&self, fi: usize, ni: usize, to_factor: &MessageMap) -> Result<Belief> {
        let f = &self.factors[fi];
        let mut zeta = f.zeta.clone();
        let mut lambda = f.lambda.clone();
        let mut off = 0;
        let mut keep_idx = Vec::new();
        let mut rm_idx = Vec::new();
        for &sn in &f.scope {
            let d = self.nodes[sn].dim;
            if sn == ni {
                keep_idx.extend(off..off + d);
            } else {
                let (z, l) = to_factor
                    .get(&(sn, fi))
                    .expect("dependency counting guarantees availability");
                for k in 0..d {
                    zeta[off + k] += z[k];
                    for j in 0..d {
                        lambda[(off + k, off + j)] += l[(k, j)];
                    }
                }
                rm_idx.extend(off..off + d);
            }
            off += d;
        }
        if rm_idx.is_empty() {
            return Ok((zeta, lambda));
        }
        let l_rr = gather(&lambda, &rm_idx, &rm_idx);
        let inv_rr = sym_inverse(&l_rr).map_err(improper)?;
        let l_kr = gather(&lambda, &keep_idx, &rm_idx);
        let z_r = gather_vec(&zeta, &rm_idx);
        let z_k = gather_vec(&zeta, &keep_idx);
        let l_kk = gather(&lambda, &keep_idx, &keep_idx);
        Ok((
            z_k - &l_kr * (&inv_rr * z_r),
            symmetrized(l_kk - &l_kr * inv_rr * l_kr.transpose()),
        ))
    }
}

/// Optimized marginal inference: sum-product on the (clique-formed) graph.
pub fn infer_marginals(
    g: &FactorGraph,
    queries: &BTreeSet<&str>,
) -> Result<BTreeMap<String, MomentGaussian>> {
    for q in queries {
        if !g.has_variable(q) {
            return Err(Error::UnknownVariable((*q).to_string()));
        }
    }
    let mut work = WorkGraph::from_factor_graph(g);
    work.form_cliques();
    let beliefs = work.sum_product()?;

    let mut out = BTreeMap::new();
    for (node, (zeta, lambda)) in work.nodes.iter().zip(&beliefs) {
        let wanted: Vec<&VariableId> = node
            .members
            .iter()
            .filter(|v| queries.contains(v.name()))
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let chol = Cholesky::new(lambda.clone()).ok_or_else(|| {
            Error::ImproperPosterior(format!(
                "belief over {{{}}} is not positive definite",
                node.members
                    .iter()
                    .map(|v| v.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?;
        let mean = chol.solve(zeta);
        let cov = symmetrized(chol.inverse());
        let mut off = 0;
        for member in &node.members {
            let d = member.dim();
            if queries.contains(member.name()) {
                let idx: Vec<usize> = (off..off + d).collect();
                let g = MomentGaussian::new(
                    vec![member.clone()],
                    gather_vec(&mean, &idx),
                    gather(&cov, &idx, &idx),
                )
                .map_err(improper)?;
                out.insert(member.name().to_string(), g);
            }
            off += d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::CanonicalFactor;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn var(name: &str, dim: usize) -> VariableId {
        VariableId::new(name, dim).unwrap()
    }

    fn prior(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> CanonicalFactor {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        CanonicalFactor::new(
            vec![var(name, dim)],
            DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)),
            &a * a.transpose() + DMatrix::identity(dim, dim),
        )
        .unwrap()
    }

    fn coupling(a: &str, b: &str, dim: usize, rng: &mut ChaCha8Rng) -> CanonicalFactor {
        // A small symmetric coupling keeps the overall joint positive definite.
        let c = DMatrix::from_fn(2 * dim, 2 * dim, |_, _| rng.gen_range(-0.2..0.2));
        CanonicalFactor::new(
            vec![var(a, dim), var(b, dim)],
            DVector::from_fn(2 * dim, |_, _| rng.gen_range(-0.5..0.5)),
            symmetrized(c),
        )
        .unwrap()
    }

    fn assert_marginals_agree(g: &FactorGraph, queries: &BTreeSet<&str>) {
        let fast = g.infer_marginals(queries).unwrap();
        let slow = g.reference_marginals(queries).unwrap();
        assert_eq!(fast.len(), slow.len());
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
    }

    #[test]
    fn single_variable_marginal_is_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut g = FactorGraph::new();
        g.add_variable(var("x", 2)).unwrap();
        g.add_factor(prior("x", 2, &mut rng)).unwrap();
        let marginals = g.infer_marginals(&BTreeSet::from(["x"])).unwrap();
        let expected = g.joint().to_moment().unwrap();
        assert_relative_eq!(marginals["x"].mean(), expected.mean(), max_relative = 1e-12);
        assert_relative_eq!(
            marginals["x"].covariance(),
            expected.covariance(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn tree_graph_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut g = FactorGraph::new();
            for name in ["a", "b", "c", "d", "e"] {
                g.add_variable(var(name, 2)).unwrap();
                g.add_factor(prior(name, 2, &mut rng)).unwrap();
            }
            // Chain a-b-c plus branches c-d and c-e: a tree.
            for (x, y) in [("a", "b"), ("b", "c"), ("c", "d"), ("c", "e")] {
                g.add_factor(coupling(x, y, 2, &mut rng)).unwrap();
            }
            assert_marginals_agree(&g, &BTreeSet::from(["a", "b", "c", "d", "e"]));
        }
    }

    #[test]
    fn post_fusion_cycle_matches_reference() {
        // The three-agent chain layout: the middle agent holds one variable
        // per neighbor-link plus a shared one and a private one; fused
        // messages over the pairwise common sets close cycles.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let mut g = FactorGraph::new();
            for name in ["cj", "ck", "shared", "private"] {
                g.add_variable(var(name, 2)).unwrap();
                g.add_factor(prior(name, 2, &mut rng)).unwrap();
            }
            for other in ["cj", "ck", "shared"] {
                g.add_factor(coupling("private", other, 2, &mut rng)).unwrap();
            }
            // Messages fused from the two neighbors.
            g.add_factor(coupling("cj", "shared", 2, &mut rng)).unwrap();
            g.add_factor(coupling("ck", "shared", 2, &mut rng)).unwrap();
            assert_marginals_agree(&g, &BTreeSet::from(["cj", "ck", "shared", "private"]));
        }
    }

    #[test]
    fn parallel_factors_over_same_pair_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut g = FactorGraph::new();
        for name in ["a", "b"] {
            g.add_variable(var(name, 1)).unwrap();
            g.add_factor(prior(name, 1, &mut rng)).unwrap();
        }
        g.add_factor(coupling("a", "b", 1, &mut rng)).unwrap();
        g.add_factor(coupling("a", "b", 1, &mut rng)).unwrap();
        assert_marginals_agree(&g, &BTreeSet::from(["a", "b"]));
    }

    #[test]
    fn disconnected_components_are_inferred_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut g = FactorGraph::new();
        for name in ["a", "b", "c"] {
            g.add_variable(var(name, 1)).unwrap();
            g.add_factor(prior(name, 1, &mut rng)).unwrap();
        }
        g.add_factor(coupling("a", "b", 1, &mut rng)).unwrap();
        assert_marginals_agree(&g, &BTreeSet::from(["a", "b", "c"]));
    }

    #[test]
    fn improper_posterior_is_reported() {
        let mut g = FactorGraph::new();
        g.add_variable(var("x", 1)).unwrap();
        // No factors: zero information.
        let err = g.infer_marginals(&BTreeSet::from(["x"])).unwrap_err();
        assert!(matches!(err, Error::ImproperPosterior(_)));
    }

    #[test]
    fn unknown_query_is_rejected() {
        let g = FactorGraph::new();
        assert!(matches!(
            g.infer_marginals(&BTreeSet::from(["nope"])),
            Err(Error::UnknownVariable(_))
        ));
    }
}
