//! Linear-model data structures and reduction of arbitrary linear
//! hypotheses (and nuisance covariates) to the canonical problem of
//! testing a zero mean for an isotropic Gaussian vector observed only
//! through its direction.

use crate::error::{FabError, Result};
use crate::linalg::{col_basis, lstsq_min_norm, null_space, orthonormal_complement};
use nalgebra::{DMatrix, DVector};

/// One group's response and design matrices.
#[derive(Debug, Clone)]
pub struct GroupData {
    /// Response vector, length `n_j`.
    pub y: DVector<f64>,
    /// Focal design matrix, `n_j x p`.
    pub x: DMatrix<f64>,
    /// Optional nuisance design matrix, `n_j x q`.
    pub z: Option<DMatrix<f64>>,
    /// Group label.
    pub group_id: String,
}

impl GroupData {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: Option<DMatrix<f64>>,
        group_id: impl Into<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(FabError::InvalidArgument("group has no observations".into()));
        }
        if x.nrows() != n {
            return Err(FabError::DimensionMismatch(format!(
                "design has {} rows for {} responses",
                x.nrows(),
                n
            )));
        }
        if let Some(z) = &z {
            if z.nrows() != n {
                return Err(FabError::DimensionMismatch(format!(
                    "nuisance design has {} rows for {} responses",
                    z.nrows(),
                    n
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(FabError::NonFinite("nuisance design".into()));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FabError::NonFinite("response".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FabError::NonFinite("design".into()));
        }
        Ok(GroupData { y, x, z, group_id: group_id.into() })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Orthonormal basis of a design's column space, carrying its rank.
/// The projector is `basis * basis^T`, applied without forming it.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    pub col_basis: DMatrix<f64>,
    pub rank: usize,
}

impl ProjectionPair {
    /// Projection of `v` onto the column space.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.rank == 0 {
            return DVector::zeros(v.len());
        }
        &self.col_basis * (self.col_basis.transpose() * v)
    }

    /// Squared norm of the projection, `v' P v`.
    pub fn proj_sq_norm(&self, v: &DVector<f64>) -> f64 {
        if self.rank == 0 {
            return 0.0;
        }
        (self.col_basis.transpose() * v).norm_squared()
    }
}

/// Rank-revealing orthogonal factorization of a design matrix.
///
/// An all-zero design yields rank 0 with an empty basis, not an error.
pub fn qr_projection(x: &DMatrix<f64>) -> Result<ProjectionPair> {
    if x.ncols() == 0 {
        return Err(FabError::InvalidArgument("design has no columns".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FabError::NonFinite("design".into()));
    }
    let (basis, rank) = col_basis(x);
    Ok(ProjectionPair { col_basis: basis, rank })
}

/// The usual F statistic computed from the direction `u` alone:
/// `((n-p)/p) * (u'Pu) / (1 - u'Pu)`.
///
/// Saturated observations (`u` in the column space) report `+inf`;
/// callers surface this through a flag. Designs with `p >= n` are
/// rejected because every direction is then saturated and the test has
/// power equal to its level.
pub fn f_statistic(u: &DVector<f64>, proj: &ProjectionPair) -> Result<f64> {
    let n = u.len();
    let p = proj.rank;
    if p == 0 || p >= n {
        return Err(FabError::DegenerateFTest);
    }
    let upu = proj.proj_sq_norm(u).min(1.0);
    let resid = 1.0 - upu;
    if resid <= 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok((n - p) as f64 / p as f64 * upu / resid)
}

/// Linear hypothesis `A beta_{1:l} = v` on the stacked coefficients of
/// `l` groups. `v` must lie in col(A) (checked by least squares).
#[derive(Debug, Clone)]
pub struct LinearHypothesis {
    pub a: DMatrix<f64>,
    pub v: DVector<f64>,
    pub group_indices: Vec<usize>,
}

impl LinearHypothesis {
    pub fn new(a: DMatrix<f64>, v: DVector<f64>, group_indices: Vec<usize>) -> Result<Self> {
        if a.nrows() != v.len() {
            return Err(FabError::DimensionMismatch(format!(
                "constraint matrix has {} rows for target of length {}",
                a.nrows(),
                v.len()
            )));
        }
        if group_indices.is_empty() {
            return Err(FabError::InvalidArgument("hypothesis constrains no groups".into()));
        }
        if a.iter().any(|x| !x.is_finite()) || v.iter().any(|x| !x.is_finite()) {
            return Err(FabError::NonFinite("hypothesis".into()));
        }
        let sol = lstsq_min_norm(&a, &v)?;
        let resid = (&a * &sol - &v).norm();
        if resid > 1e-8 * (1.0 + v.norm()) {
            return Err(FabError::TargetNotInColumnSpace);
        }
        Ok(LinearHypothesis { a, v, group_indices })
    }
}

/// A testing problem reduced to "mean zero, isotropic error, direction
/// observed": the unit vector `u`, its dimension, the reduced design,
/// and the affine map carrying a prior on the stacked coefficients to
/// the reduced space.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    /// Direction of the reduced observation.
    pub u: DVector<f64>,
    /// Reduced dimension n'.
    pub n_prime: usize,
    /// Reduced design `W X` (n' x l*p).
    pub design: DMatrix<f64>,
    /// Offset mu* subtracted from the reduced observation.
    pub offset: DVector<f64>,
    /// Unnormalized reduced observation `W y - mu*`.
    pub reduced_obs: DVector<f64>,
    /// Number of groups stacked into the problem.
    pub l_groups: usize,
    /// Columns per group in the stacked coefficient vector.
    pub p_per_group: usize,
    /// Set when the reduced design is identically zero: any invariant
    /// test has power equal to its level.
    pub powerless: bool,
    /// True when `W X` is full rank, making the reduced hypothesis
    /// equivalent to the original rather than merely implied by it.
    pub hypotheses_equivalent: bool,
}

impl ReducedProblem {
    /// Pushes a linking prior `beta ~ N(1 (x) beta0, I (x) Psi)` through
    /// the reduction: returns the mean and covariance of `W y - mu*`
    /// contributed by the coefficients (noise variance not included).
    pub fn prior_moments(&self, beta0: &DVector<f64>, psi: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.p_per_group;
        let l = self.l_groups;
        assert_eq!(beta0.len(), p, "prior mean length");
        assert_eq!(psi.nrows(), p, "prior covariance size");
        // stacked mean: design * (1 (x) beta0)
        let mut stacked = DVector::zeros(p * l);
        for g in 0..l {
            stacked.rows_mut(g * p, p).copy_from(beta0);
        }
        let mean = &self.design * stacked - &self.offset;
        // covariance: design (I (x) Psi) design' accumulated blockwise
        let n = self.n_prime;
        let mut cov = DMatrix::zeros(n, n);
        for g in 0..l {
            let block = self.design.columns(g * p, p);
            cov += block * psi * block.transpose();
        }
        (mean, cov)
    }

    /// Projection pair of the reduced design, for F statistics.
    pub fn projection(&self) -> Result<ProjectionPair> {
        qr_projection(&self.design)
    }
}

/// Projects the nuisance design out of a group, reducing to an
/// `n_j - rank(Z)` dimensional problem with design `W X`.
///
/// Without a nuisance design this is the identity reduction. When the
/// nuisance space swallows the focal design the problem is flagged
/// powerless rather than rejected.
pub fn project_out_nuisance(g: &GroupData) -> Result<ReducedProblem> {
    let n = g.n();
    let p = g.p();
    let (w, n_prime) = match &g.z {
        None => (DMatrix::identity(n, n), n),
        Some(z) => {
            let (zbasis, zrank) = col_basis(z);
            if n <= zrank {
                return Err(FabError::NoResidualDof);
            }
            let comp = orthonormal_complement(&zbasis);
            (comp.transpose(), n - zrank)
        }
    };
    let mut design = &w * &g.x;
    let reduced_obs = &w * &g.y;
    let norm = reduced_obs.norm();
    if norm == 0.0 {
        return Err(FabError::DegenerateObservation);
    }
    let max_abs = design.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let powerless = max_abs <= 1e-12 * (1.0 + g.x.norm());
    if powerless {
        // make the flag exact so downstream statistics are constant
        design.fill(0.0);
    }
    let (_, drank) = col_basis(&design);
    Ok(ReducedProblem {
        u: &reduced_obs / norm,
        n_prime,
        design,
        offset: DVector::zeros(n_prime),
        reduced_obs,
        l_groups: 1,
        p_per_group: p,
        powerless,
        hypotheses_equivalent: drank == p,
    })
}

/// Reduces the hypothesis `A beta_{1:l} = v` over the given groups to a
/// canonical direction-testing problem.
///
/// The groups are block-stacked in index order. `S` is the image of the
/// constraint's null space under the stacked design; `W` spans its
/// orthogonal complement, `mu* = W X beta*` for any solution of
/// `A beta* = v` (minimum-norm solution used), and
/// `u = (W y - mu*)/|W y - mu*|`.
pub fn reduce_linear_hypothesis(groups: &[&GroupData], h: &LinearHypothesis) -> Result<ReducedProblem> {
    let l = h.group_indices.len();
    if l == 0 || groups.len() != l {
        return Err(FabError::InvalidArgument(
            "hypothesis group list does not match supplied groups".into(),
        ));
    }
    let p = groups[0].p();
    if groups.iter().any(|g| g.p() != p) {
        return Err(FabError::DimensionMismatch(
            "all groups in a joint hypothesis need the same number of focal covariates".into(),
        ));
    }
    if h.a.ncols() != l * p {
        return Err(FabError::DimensionMismatch(format!(
            "constraint matrix has {} columns for {} stacked coefficients",
            h.a.ncols(),
            l * p
        )));
    }
    let n_total: usize = groups.iter().map(|g| g.n()).sum();

    // block-diagonal stacked design
    let mut x_stack = DMatrix::zeros(n_total, l * p);
    let mut y_stack = DVector::zeros(n_total);
    let mut row = 0;
    for (gi, g) in groups.iter().enumerate() {
        let n_g = g.n();
        x_stack.view_mut((row, gi * p), (n_g, p)).copy_from(&g.x);
        y_stack.rows_mut(row, n_g).copy_from(&g.y);
        row += n_g;
    }

    // S = { X beta : A beta = 0 } = col(X * null(A))
    let null_a = null_space(&h.a);
    let s_basis = if null_a.ncols() == 0 {
        DMatrix::zeros(n_total, 0)
    } else {
        let (b, _) = col_basis(&(&x_stack * &null_a));
        b
    };
    if s_basis.ncols() == n_total {
        return Err(FabError::VacuousHypothesis);
    }
    let w = orthonormal_complement(&s_basis).transpose();
    let n_prime = w.nrows();

    // beta* solves A beta = v; W X beta* does not depend on the choice
    let beta_star = lstsq_min_norm(&h.a, &h.v)?;
    let mut design = &w * &x_stack;
    let offset = &design * &beta_star;

    let reduced = &w * &y_stack - &offset;
    let norm = reduced.norm();
    if norm == 0.0 {
        return Err(FabError::DegenerateObservation);
    }

    let max_abs = design.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let powerless = max_abs <= 1e-12 * (1.0 + x_stack.norm());
    if powerless {
        design.fill(0.0);
    }
    let (_, drank) = col_basis(&design);
    Ok(ReducedProblem {
        u: &reduced / norm,
        n_prime,
        design,
        offset,
        reduced_obs: reduced,
        l_groups: l,
        p_per_group: p,
        powerless,
        hypotheses_equivalent: drank == l * p,
    })
}
