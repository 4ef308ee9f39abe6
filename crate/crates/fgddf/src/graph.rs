//! Bipartite factor-graph container and its probabilistic operations:
//! prediction, roll-up (marginalization of a variable out of the graph) and
//! estimation (measurement update), plus exact joint recovery.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::canonical::{scope_dim, CanonicalFactor, VariableId};
use crate::error::{Error, Result};

/// Stable handle to a factor; ids are monotonically assigned and never reused,
/// so channel-filter bookkeeping can refer to deleted factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorId(pub u64);

/// Linear-Gaussian state transition `x' = F x + G u + w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    u: DVector<f64>,
    q: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, u: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = f.nrows();
        if f.ncols() != n {
            return Err(Error::DimensionMismatch("F must be square".into()));
        }
        if g.nrows() != n || g.ncols() != u.len() {
            return Err(Error::DimensionMismatch(format!(
                "G is {}x{} but state dim is {} and control dim is {}",
                g.nrows(),
                g.ncols(),
                n,
                u.len()
            )));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::DimensionMismatch("Q must be n x n".into()));
        }
        if Cholesky::new(q.clone()).is_none() {
            return Err(Error::NotADistribution("process noise Q is not SPD".into()));
        }
        Ok(Self { f, g, u, q })
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }
}

/// Linear measurement `y = H chi + v`, `v ~ N(0, R)`, where `chi` is the
/// concatenation of the measured variables.
#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    y: DVector<f64>,
}

impl LinearMeasurement {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if h.nrows() != y.len() || r.nrows() != y.len() || r.ncols() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "H is {}x{}, R is {}x{}, y has len {}",
                h.nrows(),
                h.ncols(),
                r.nrows(),
                r.ncols(),
                y.len()
            )));
        }
        if Cholesky::new(r.clone()).is_none() {
            return Err(Error::NotADistribution("measurement noise R is not SPD".into()));
        }
        Ok(Self { h, r, y })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Same model with a different realized measurement vector.
    pub fn with_value(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(self.h.clone(), self.r.clone(), y)
    }

    /// The information-form factor {H'R^-1 y, H'R^-1 H} over the given scope.
    pub fn to_factor(&self, scope: Vec<VariableId>) -> Result<CanonicalFactor> {
        if scope_dim(&scope) != self.h.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "H has {} columns but measured scope has dim {}",
                self.h.ncols(),
                scope_dim(&scope)
            )));
        }
        // R is validated SPD at construction.
        let r_inv = Cholesky::new(self.r.clone())
            .ok_or_else(|| Error::NotADistribution("measurement noise R is not SPD".into()))?
            .inverse();
        let ht_rinv = self.h.transpose() * r_inv;
        CanonicalFactor::new(scope, &ht_rinv * &self.y, ht_rinv * &self.h)
    }
}

/// A bipartite store of variable nodes and canonical factor nodes. Edges are
/// implicit: a factor is adjacent to every variable in its scope. The graph
/// may contain cycles (they arise after fusion).
#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    vars: BTreeMap<String, usize>,
    factors: BTreeMap<FactorId, CanonicalFactor>,
    next_id: u64,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, v: VariableId) -> Result<()> {
        if self.vars.contains_key(v.name()) {
            return Err(Error::DuplicateVariable(v.name().to_string()));
        }
        self.vars.insert(v.name().to_string(), v.dim());
        Ok(())
    }

    pub fn has_variable(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn variable(&self, name: &str) -> Result<VariableId> {
        let dim = self
            .vars
            .get(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
        VariableId::new(name, *dim)
    }

    /// All registered variables in canonical (name-ascending) order.
    pub fn variables(&self) -> Vec<VariableId> {
        self.vars
            .iter()
            .map(|(n, &d)| VariableId::new(n.clone(), d).expect("registry invariant"))
            .collect()
    }

    pub fn variable_count(&self) -> usize {
        self.vars.len()
    }

    /// Total stacked state dimension over all registered variables.
    pub fn dim(&self) -> usize {
        self.vars.values().sum()
    }

    pub fn add_factor(&mut self, f: CanonicalFactor) -> Result<FactorId> {
        for v in f.scope() {
            match self.vars.get(v.name()) {
                None => return Err(Error::UnknownVariable(v.name().to_string())),
                Some(&d) if d != v.dim() => {
                    return Err(Error::DimensionMismatch(format!(
                        "factor declares `{}` with dim {} but registry has {}",
                        v.name(),
                        v.dim(),
                        d
                    )))
                }
                _ => {}
            }
        }
        let id = FactorId(self.next_id);
        self.next_id += 1;
        self.factors.insert(id, f);
        Ok(id)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Result<CanonicalFactor> {
        self.factors
            .remove(&id)
            .ok_or_else(|| Error::Config(format!("no factor with id {}", id.0)))
    }

    pub fn factor(&self, id: FactorId) -> Option<&CanonicalFactor> {
        self.factors.get(&id)
    }

    pub fn factors(&self) -> impl Iterator<Item = (FactorId, &CanonicalFactor)> {
        self.factors.iter().map(|(&id, f)| (id, f))
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    /// Ids of all factors adjacent to a variable.
    pub fn incident_factors(&self, name: &str) -> Vec<FactorId> {
        self.factors
            .iter()
            .filter(|(_, f)| f.scope().iter().any(|v| v.name() == name))
            .map(|(&id, _)| id)
            .collect()
    }

    /// Variables sharing at least one factor with `name`.
    pub fn markov_blanket(&self, name: &str) -> BTreeSet<String> {
        let mut blanket = BTreeSet::new();
        for f in self.factors.values() {
            if f.scope().iter().any(|v| v.name() == name) {
                for v in f.scope() {
                    if v.name() != name {
                        blanket.insert(v.name().to_string());
                    }
                }
            }
        }
        blanket
    }

    /// Aligned sum of all factors over all registered variables: the exact
    /// canonical-form joint the graph represents.
    pub fn joint(&self) -> CanonicalFactor {
        let mut acc = crate::canonical::FactorAccumulator::new(self.variables());
        for f in self.factors.values() {
            acc.add(f).expect("registered factors always align");
        }
        acc.finish()
    }

    /// Prediction: registers `x_new` and adds the three transition factors —
    /// two unary (on the old and new variable) and one binary coupling factor.
    pub fn predict(
        &mut self,
        x_old: &str,
        x_new: VariableId,
        dynamics: &LinearDynamics,
    ) -> Result<(FactorId, FactorId, FactorId)> {
        let old = self.variable(x_old)?;
        if self.vars.contains_key(x_new.name()) {
            return Err(Error::DuplicateVariable(x_new.name().to_string()));
        }
        let n = dynamics.state_dim();
        if old.dim() != n || x_new.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "dynamics are {}-dimensional but variables have dims {} and {}",
                n,
                old.dim(),
                x_new.dim()
            )));
        }
        let q_inv = Cholesky::new(dynamics.q.clone())
            .ok_or_else(|| Error::NotADistribution("process noise Q is not SPD".into()))?
            .inverse();
        let gu = &dynamics.g * &dynamics.u;
        let ft_qinv = dynamics.f.transpose() * &q_inv;

        let f_old = CanonicalFactor::new(
            vec![old.clone()],
            -(&ft_qinv * &gu),
            &ft_qinv * &dynamics.f,
        )?;
        let f_new = CanonicalFactor::new(vec![x_new.clone()], &q_inv * &gu, q_inv.clone())?;

        // Binary factor over (old, new): zero diagonal blocks, coupling on the
        // off-diagonals only.
        let mut lambda = DMatrix::zeros(2 * n, 2 * n);
        let coupling = -(&q_inv * &dynamics.f);
        lambda.view_mut((0, n), (n, n)).copy_from(&coupling.transpose());
        lambda.view_mut((n, 0), (n, n)).copy_from(&coupling);
        let f_bin = CanonicalFactor::new(
            vec![old, x_new.clone()],
            DVector::zeros(2 * n),
            lambda,
        )?;

        self.add_variable(x_new)?;
        let id_old = self.add_factor(f_old)?;
        let id_new = self.add_factor(f_new)?;
        let id_bin = self.add_factor(f_bin)?;
        Ok((id_old, id_new, id_bin))
    }

    /// Roll-up: sum all factors adjacent to `name`, replace them by the
    /// Schur-complement marginal factor over the variable's Markov blanket,
    /// and remove the variable. Conditionally independent neighbors become
    /// correlated through the new factor.
    pub fn rollup(&mut self, name: &str) -> Result<Option<FactorId>> {
        if !self.vars.contains_key(name) {
            return Err(Error::UnknownVariable(name.to_string()));
        }
        let incident = self.incident_factors(name);
        if incident.is_empty() {
            return Err(Error::SingularMarginalization(format!(
                "variable `{name}` has no information to roll up"
            )));
        }
        let mut union: Vec<VariableId> = Vec::new();
        for id in &incident {
            union = crate::canonical::union_scope(&union, self.factors[id].scope())?;
        }
        let mut acc = crate::canonical::FactorAccumulator::new(union);
        for id in &incident {
            acc.add(&self.factors[id])?;
        }
        let sum = acc.finish();
        let keep: BTreeSet<&str> = sum
            .scope()
            .iter()
            .map(|v| v.name())
            .filter(|n| *n != name)
            .collect();
        let marginal = if keep.is_empty() {
            None
        } else {
            Some(sum.marginalize(&keep)?)
        };
        for id in incident {
            self.factors.remove(&id);
        }
        self.vars.remove(name);
        match marginal {
            Some(f) => Ok(Some(self.add_factor(f)?)),
            None => Ok(None),
        }
    }

    /// Estimation: adds the measurement-information factor over the measured
    /// variables, listed in the order matching the columns of `H`.
    pub fn measurement_update(
        &mut self,
        vars: &[&str],
        m: &LinearMeasurement,
    ) -> Result<FactorId> {
        let scope: Vec<VariableId> = vars
            .iter()
            .map(|n| self.variable(n))
            .collect::<Result<_>>()?;
        let factor = m.to_factor(scope)?;
        self.add_factor(factor)
    }

    /// Serializable snapshot (variables with dims; factors with scope, zeta
    /// and row-major lambda) for debugging and golden tests.
    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            variables: self
                .vars
                .iter()
                .map(|(n, &d)| SnapshotVariable {
                    name: n.clone(),
                    dim: d,
                })
                .collect(),
            factors: self
                .factors
                .iter()
                .map(|(id, f)| SnapshotFactor {
                    id: id.0,
                    scope: f.scope().iter().map(|v| v.name().to_string()).collect(),
                    zeta: f.zeta().iter().copied().collect(),
                    lambda: f.lambda().row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub variables: Vec<SnapshotVariable>,
    pub factors: Vec<SnapshotFactor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotVariable {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotFactor {
    pub id: u64,
    pub scope: Vec<String>,
    pub zeta: Vec<f64>,
    /// Row-major dense information matrix.
    pub lambda: Vec<f64>,
}
