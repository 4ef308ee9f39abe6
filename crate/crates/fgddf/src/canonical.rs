//! Information-form Gaussian factor algebra.
//!
//! A [`CanonicalFactor`] stores an information vector `zeta` and information
//! matrix `lambda` over an ordered variable scope. Factors over different
//! scopes are combined by zero-padding onto the canonically ordered union of
//! their scopes, so addition of factors corresponds to multiplying densities.
//! Marginalization is a Schur complement on the information matrix.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition-number threshold above which a block is declared singular.
pub const COND_LIMIT: f64 = 1e12;

/// A named random variable with a fixed state dimension.
///
/// Names are globally unique keys; the canonical scope order used everywhere
/// in this crate is ascending lexicographic by name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableId {
    name: String,
    dim: usize,
}

impl VariableId {
    pub fn new(name: impl Into<String>, dim: usize) -> Result<Self> {
        let name = name.into();
        if dim == 0 {
            return Err(Error::DimensionMismatch(format!(
                "variable `{name}` must have dim >= 1"
            )));
        }
        Ok(Self { name, dim })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name, self.dim)
    }
}

/// Total state dimension of a scope.
pub fn scope_dim(scope: &[VariableId]) -> usize {
    scope.iter().map(|v| v.dim).sum()
}

/// Starting offset of each scope variable in the stacked state vector.
fn scope_offsets(scope: &[VariableId]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(scope.len());
    let mut acc = 0;
    for v in scope {
        offsets.push(acc);
        acc += v.dim;
    }
    offsets
}

/// Canonically ordered union of two scopes; errors if a shared name carries
/// two different dimensions.
pub fn union_scope(a: &[VariableId], b: &[VariableId]) -> Result<Vec<VariableId>> {
    let mut union: Vec<VariableId> = a.to_vec();
    for v in b {
        match union.binary_search_by(|u| u.name.as_str().cmp(&v.name)) {
            Ok(i) => {
                if union[i].dim != v.dim {
                    return Err(Error::DimensionMismatch(format!(
                        "variable `{}` has dim {} on one side and {} on the other",
                        v.name, union[i].dim, v.dim
                    )));
                }
            }
            Err(i) => union.insert(i, v.clone()),
        }
    }
    Ok(union)
}

/// An information-form Gaussian potential over an ordered variable scope.
///
/// `lambda` is kept symmetric (symmetrized on every construction) but need
/// not be positive definite: difference factors and conditional-information
/// factors are indefinite. Definiteness is only required where moments are
/// asked for.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalFactor {
    scope: Vec<VariableId>,
    zeta: DVector<f64>,
    lambda: DMatrix<f64>,
}

impl CanonicalFactor {
    /// Build a factor from `zeta`/`lambda` given over `scope` in the order
    /// listed. The scope is permuted into canonical (name-ascending) order,
    /// reordering the blocks of `zeta` and `lambda` to match.
    pub fn new(scope: Vec<VariableId>, zeta: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let dim = scope_dim(&scope);
        if zeta.len() != dim || lambda.nrows() != dim || lambda.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "scope dim {} vs zeta len {} vs lambda {}x{}",
                dim,
                zeta.len(),
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        let mut names = BTreeSet::new();
        for v in &scope {
            if !names.insert(v.name.as_str()) {
                return Err(Error::DimensionMismatch(format!(
                    "variable `{}` appears twice in one scope",
                    v.name
                )));
            }
        }
        let scale = lambda.amax().max(1.0);
        let asym = (&lambda - lambda.transpose()).amax();
        if asym > 1e-6 * scale {
            return Err(Error::DimensionMismatch(format!(
                "lambda is not symmetric (max asymmetry {asym:.3e})"
            )));
        }

        let mut order: Vec<usize> = (0..scope.len()).collect();
        order.sort_by(|&i, &j| scope[i].name.cmp(&scope[j].name));

        let (scope, zeta, lambda) = if order.iter().enumerate().all(|(i, &o)| i == o) {
            (scope, zeta, lambda)
        } else {
            let offsets = scope_offsets(&scope);
            let mut idx = Vec::with_capacity(dim);
            for &o in &order {
                idx.extend(offsets[o]..offsets[o] + scope[o].dim);
            }
            let new_scope: Vec<VariableId> = order.iter().map(|&o| scope[o].clone()).collect();
            let new_zeta = DVector::from_fn(dim, |r, _| zeta[idx[r]]);
            let new_lambda = DMatrix::from_fn(dim, dim, |r, c| lambda[(idx[r], idx[c])]);
            (new_scope, new_zeta, new_lambda)
        };

        let lambda = symmetrized(lambda);
        Ok(Self { scope, zeta, lambda })
    }

    /// The zero factor (additive identity) over a scope.
    pub fn zeros(scope: Vec<VariableId>) -> Result<Self> {
        let dim = scope_dim(&scope);
        Self::new(scope, DVector::zeros(dim), DMatrix::zeros(dim, dim))
    }

    pub fn scope(&self) -> &[VariableId] {
        &self.scope
    }

    pub fn dim(&self) -> usize {
        self.zeta.len()
    }

    pub fn zeta(&self) -> &DVector<f64> {
        &self.zeta
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// True if every entry of `zeta` and `lambda` is within `tol` of zero.
    pub fn is_zero(&self, tol: f64) -> bool {
        self.zeta.amax() <= tol && self.lambda.amax() <= tol
    }

    /// Component indices of the named variables within this factor's stacked
    /// state vector, in scope order.
    pub fn indices_of(&self, names: &BTreeSet<&str>) -> Vec<usize> {
        let offsets = scope_offsets(&self.scope);
        let mut idx = Vec::new();
        for (v, &off) in self.scope.iter().zip(&offsets) {
            if names.contains(v.name.as_str()) {
                idx.extend(off..off + v.dim);
            }
        }
        idx
    }

    /// Zero-pad this factor onto a canonically ordered superset scope.
    pub fn embed_into(&self, target: &[VariableId]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let dim = scope_dim(target);
        let t_offsets = scope_offsets(target);
        let s_offsets = scope_offsets(&self.scope);
        let mut map = Vec::with_capacity(self.dim());
        for (v, &s_off) in self.scope.iter().zip(&s_offsets) {
            let t = target
                .binary_search_by(|u| u.name.as_str().cmp(&v.name))
                .map_err(|_| Error::UnknownVariable(v.name.clone()))?;
            if target[t].dim != v.dim {
                return Err(Error::DimensionMismatch(format!(
                    "variable `{}` has dim {} in factor but {} in target scope",
                    v.name, v.dim, target[t].dim
                )));
            }
            for k in 0..v.dim {
                map.push((s_off + k, t_offsets[t] + k));
            }
        }
        let mut zeta = DVector::zeros(dim);
        let mut lambda = DMatrix::zeros(dim, dim);
        for &(s, t) in &map {
            zeta[t] = self.zeta[s];
        }
        for &(sr, tr) in &map {
            for &(sc, tc) in &map {
                lambda[(tr, tc)] = self.lambda[(sr, sc)];
            }
        }
        Ok((zeta, lambda))
    }

    /// Aligned sum over the canonical union of both scopes.
    pub fn add(&self, other: &CanonicalFactor) -> Result<CanonicalFactor> {
        let union = union_scope(&self.scope, &other.scope)?;
        let (mut zeta, mut lambda) = self.embed_into(&union)?;
        let (bz, bl) = other.embed_into(&union)?;
        zeta += bz;
        lambda += bl;
        Ok(CanonicalFactor {
            scope: union,
            zeta,
            lambda: symmetrized(lambda),
        })
    }

    /// Aligned difference. `other`'s scope must be a subset of this factor's
    /// scope; subtracting never-shared variables is meaningless.
    pub fn subtract(&self, other: &CanonicalFactor) -> Result<CanonicalFactor> {
        for v in &other.scope {
            if !self.scope.iter().any(|u| u.name == v.name) {
                return Err(Error::DimensionMismatch(format!(
                    "cannot subtract factor over `{}` which the minuend does not cover",
                    v.name
                )));
            }
        }
        let (bz, bl) = other.embed_into(&self.scope)?;
        Ok(CanonicalFactor {
            scope: self.scope.clone(),
            zeta: &self.zeta - bz,
            lambda: symmetrized(&self.lambda - bl),
        })
    }

    /// Schur-complement marginalization onto the named `keep` variables.
    ///
    /// Errors if the information block of the removed variables is singular
    /// or ill-conditioned (condition number above [`COND_LIMIT`]).
    pub fn marginalize(&self, keep: &BTreeSet<&str>) -> Result<CanonicalFactor> {
        for name in keep {
            if !self.scope.iter().any(|v| v.name == *name) {
                return Err(Error::UnknownVariable((*name).to_string()));
            }
        }
        let keep_scope: Vec<VariableId> = self
            .scope
            .iter()
            .filter(|v| keep.contains(v.name.as_str()))
            .cloned()
            .collect();
        if keep_scope.len() == self.scope.len() {
            return Ok(self.clone());
        }
        let keep_idx = self.indices_of(keep);
        let all_names: BTreeSet<&str> = self.scope.iter().map(|v| v.name.as_str()).collect();
        let rm_names: BTreeSet<&str> = all_names.difference(keep).copied().collect();
        let rm_idx = self.indices_of(&rm_names);

        let l_rr = gather(&self.lambda, &rm_idx, &rm_idx);
        let inv_rr = sym_inverse(&l_rr).map_err(|e| match e {
            Error::SingularMarginalization(msg) => Error::SingularMarginalization(format!(
                "removing {{{}}}: {msg}",
                rm_names.iter().copied().collect::<Vec<_>>().join(", ")
            )),
            other => other,
        })?;
        let l_kr = gather(&self.lambda, &keep_idx, &rm_idx);
        let z_r = gather_vec(&self.zeta, &rm_idx);
        let z_k = gather_vec(&self.zeta, &keep_idx);
        let l_kk = gather(&self.lambda, &keep_idx, &keep_idx);

        let zeta = z_k - &l_kr * (&inv_rr * z_r);
        let lambda = symmetrized(l_kk - &l_kr * inv_rr * l_kr.transpose());
        Ok(CanonicalFactor {
            scope: keep_scope,
            zeta,
            lambda,
        })
    }

    /// Convert to moment form; requires `lambda` symmetric positive definite.
    pub fn to_moment(&self) -> Result<MomentGaussian> {
        let chol = Cholesky::new(self.lambda.clone()).ok_or_else(|| {
            Error::NotADistribution("information matrix is not positive definite".into())
        })?;
        let mean = chol.solve(&self.zeta);
        let cov = symmetrized(chol.inverse());
        MomentGaussian::new(self.scope.clone(), mean, cov)
    }

    /// Convert a moment-form Gaussian to canonical form.
    pub fn from_moment(g: &MomentGaussian) -> Result<CanonicalFactor> {
        let chol = Cholesky::new(g.covariance.clone()).ok_or_else(|| {
            Error::NotADistribution("covariance is not positive definite".into())
        })?;
        let zeta = chol.solve(&g.mean);
        let lambda = symmetrized(chol.inverse());
        Ok(CanonicalFactor {
            scope: g.scope.clone(),
            zeta,
            lambda,
        })
    }
}

/// A moment-form Gaussian over an ordered variable scope.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGaussian {
    scope: Vec<VariableId>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl MomentGaussian {
    pub fn new(scope: Vec<VariableId>, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let dim = scope_dim(&scope);
        if mean.len() != dim || covariance.nrows() != dim || covariance.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "scope dim {} vs mean len {} vs covariance {}x{}",
                dim,
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let covariance = symmetrized(covariance);
        if dim > 0 {
            let eig = SymmetricEigen::new(covariance.clone());
            let min_eig = eig.eigenvalues.min();
            let guard = -1e-10 * covariance.trace().max(1.0);
            if min_eig <= guard {
                return Err(Error::NotADistribution(format!(
                    "covariance has eigenvalue {min_eig:.3e}"
                )));
            }
            if Cholesky::new(covariance.clone()).is_none() {
                return Err(Error::NotADistribution(
                    "covariance failed the positive-definiteness check".into(),
                ));
            }
        }
        let mut sorted = scope.clone();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        if sorted != scope {
            return Err(Error::DimensionMismatch(
                "moment scope must be in canonical order".into(),
            ));
        }
        Ok(Self {
            scope,
            mean,
            covariance,
        })
    }

    pub fn scope(&self) -> &[VariableId] {
        &self.scope
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Moment marginal of a subset of variables: drop rows/columns.
    pub fn restrict(&self, keep: &BTreeSet<&str>) -> Result<MomentGaussian> {
        let keep_scope: Vec<VariableId> = self
            .scope
            .iter()
            .filter(|v| keep.contains(v.name.as_str()))
            .cloned()
            .collect();
        for name in keep {
            if !keep_scope.iter().any(|v| v.name == *name) {
                return Err(Error::UnknownVariable((*name).to_string()));
            }
        }
        let offsets = scope_offsets(&self.scope);
        let mut idx = Vec::new();
        for (v, &off) in self.scope.iter().zip(&offsets) {
            if keep.contains(v.name.as_str()) {
                idx.extend(off..off + v.dim);
            }
        }
        MomentGaussian::new(
            keep_scope,
            gather_vec(&self.mean, &idx),
            gather(&self.covariance, &idx, &idx),
        )
    }
}

/// Closed-form reassembly of a post-fusion local joint from a fused marginal
/// over the common variables `x_vars` and the local conditional information.
///
/// Splitting `local` into common block x and private block s, the result is
/// `zeta = [fused_zeta; 0] + [L_xs L_ss^-1 zeta_s; zeta_s]` and
/// `lambda = blockdiag(fused_lambda, 0) + [[L_xs L_ss^-1 L_sx, L_xs], [L_sx, L_ss]]`.
///
/// Used as an independent oracle against the message-passing fusion pipeline.
pub fn hscf_closed_form(
    local: &CanonicalFactor,
    fused_marginal: &CanonicalFactor,
    x_vars: &BTreeSet<&str>,
) -> Result<CanonicalFactor> {
    let x_scope: Vec<&VariableId> = local
        .scope
        .iter()
        .filter(|v| x_vars.contains(v.name.as_str()))
        .collect();
    if x_scope.len() != x_vars.len() {
        return Err(Error::UnknownVariable(format!(
            "x_vars not all present in local scope: {{{}}}",
            x_vars.iter().copied().collect::<Vec<_>>().join(", ")
        )));
    }
    if x_scope.len() == local.scope.len() {
        return Err(Error::DimensionMismatch(
            "local factor must have at least one private variable".into(),
        ));
    }
    let fused_names: Vec<&str> = fused_marginal.scope.iter().map(|v| v.name.as_str()).collect();
    let x_names: Vec<&str> = x_scope.iter().map(|v| v.name.as_str()).collect();
    if fused_names != x_names {
        return Err(Error::DimensionMismatch(format!(
            "fused marginal scope {{{}}} does not match x_vars {{{}}}",
            fused_names.join(", "),
            x_names.join(", ")
        )));
    }

    let x_idx = local.indices_of(x_vars);
    let all: BTreeSet<&str> = local.scope.iter().map(|v| v.name.as_str()).collect();
    let s_names: BTreeSet<&str> = all.difference(x_vars).copied().collect();
    let s_idx = local.indices_of(&s_names);

    let l_ss = gather(&local.lambda, &s_idx, &s_idx);
    let inv_ss = sym_inverse(&l_ss)?;
    let l_xs = gather(&local.lambda, &x_idx, &s_idx);
    let z_s = gather_vec(&local.zeta, &s_idx);
    let coupling = &l_xs * &inv_ss;

    let n = local.dim();
    let mut zeta = DVector::zeros(n);
    let mut lambda = DMatrix::zeros(n, n);
    let zx = fused_marginal.zeta() + &coupling * &z_s;
    let lxx = fused_marginal.lambda() + &coupling * l_xs.transpose();
    scatter_vec(&mut zeta, &x_idx, &zx);
    scatter_vec(&mut zeta, &s_idx, &z_s);
    scatter(&mut lambda, &x_idx, &x_idx, &lxx);
    scatter(&mut lambda, &x_idx, &s_idx, &l_xs);
    scatter(&mut lambda, &s_idx, &x_idx, &l_xs.transpose());
    scatter(&mut lambda, &s_idx, &s_idx, &l_ss);

    Ok(CanonicalFactor {
        scope: local.scope.clone(),
        zeta,
        lambda: symmetrized(lambda),
    })
}

/// Accumulates many factors into one canonical factor over a fixed scope
/// without per-add allocations; the workhorse behind graph joints and
/// roll-up sums.
#[derive(Debug, Clone)]
pub struct FactorAccumulator {
    scope: Vec<VariableId>,
    offsets: std::collections::BTreeMap<String, (usize, usize)>,
    zeta: DVector<f64>,
    lambda: DMatrix<f64>,
    idx_buf: Vec<usize>,
}

impl FactorAccumulator {
    /// `scope` must be canonically ordered (it is wherever it comes from a
    /// registry or an existing factor).
    pub fn new(scope: Vec<VariableId>) -> Self {
        let dim = scope_dim(&scope);
        let mut offsets = std::collections::BTreeMap::new();
        let mut acc = 0;
        for v in &scope {
            offsets.insert(v.name().to_string(), (acc, v.dim()));
            acc += v.dim();
        }
        Self {
            scope,
            offsets,
            zeta: DVector::zeros(dim),
            lambda: DMatrix::zeros(dim, dim),
            idx_buf: Vec::new(),
        }
    }

    pub fn add(&mut self, f: &CanonicalFactor) -> Result<()> {
        self.idx_buf.clear();
        for v in &f.scope {
            let &(off, dim) = self
                .offsets
                .get(v.name.as_str())
                .ok_or_else(|| Error::UnknownVariable(v.name.clone()))?;
            if dim != v.dim {
                return Err(Error::DimensionMismatch(format!(
                    "variable `{}` has dim {} in factor but {} in accumulator",
                    v.name, v.dim, dim
                )));
            }
            self.idx_buf.extend(off..off + v.dim);
        }
        for (r, &tr) in self.idx_buf.iter().enumerate() {
            self.zeta[tr] += f.zeta[r];
            for (c, &tc) in self.idx_buf.iter().enumerate() {
                self.lambda[(tr, tc)] += f.lambda[(r, c)];
            }
        }
        Ok(())
    }

    pub fn finish(self) -> CanonicalFactor {
        CanonicalFactor {
            scope: self.scope,
            zeta: self.zeta,
            lambda: symmetrized(self.lambda),
        }
    }
}

pub(crate) fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Inverse of a symmetric (possibly indefinite) matrix via eigendecomposition,
/// with a condition-number estimate gating singularity.
pub(crate) fn sym_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut abs_max = 0.0f64;
    let mut abs_min = f64::INFINITY;
    for &v in eig.eigenvalues.iter() {
        abs_max = abs_max.max(v.abs());
        abs_min = abs_min.min(v.abs());
    }
    if !abs_max.is_finite() || abs_min == 0.0 || abs_max / abs_min > COND_LIMIT {
        return Err(Error::SingularMarginalization(format!(
            "block condition number {:.3e} exceeds {COND_LIMIT:.0e}",
            if abs_min == 0.0 { f64::INFINITY } else { abs_max / abs_min }
        )));
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    Ok(symmetrized(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose()))
}

pub(crate) fn gather(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

pub(crate) fn gather_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |r, _| v[idx[r]])
}

pub(crate) fn scatter(m: &mut DMatrix<f64>, rows: &[usize], cols: &[usize], block: &DMatrix<f64>) {
    for (r, &row) in rows.iter().enumerate() {
        for (c, &col) in cols.iter().enumerate() {
            m[(row, col)] = block[(r, c)];
        }
    }
}

pub(crate) fn scatter_vec(v: &mut DVector<f64>, idx: &[usize], block: &DVector<f64>) {
    for (i, &row) in idx.iter().enumerate() {
        v[row] = block[i];
    }
}
