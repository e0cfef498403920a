//! Lifted regressor matrices and the orthogonal projections derived from
//! their thin SVD.
//!
//! For a reference r the regressor M stacks r and its discrete derivatives
//! as columns, so M*theta is the linear model's force over the whole window.
//! The thin SVD M = U1*diag(S)*V^T splits force space into the model's range
//! and its orthogonal complement; both projections are applied as two thin
//! matrix-vector products and the N_j x N_j projector is never formed.

use crate::error::{Error, Result};
use crate::plant::Dataset;
use crate::signals::{build_stack, Trajectory};
use nalgebra::{DMatrix, DVector};

/// Relative rank threshold: the regressor counts as rank deficient when
/// min(S) <= tol * max(S). Scale-free, since references vary in amplitude.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

/// Coefficient vector over the derivative basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    theta: DVector<f64>,
}

impl LinearModel {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument("theta must be non-empty".into()));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("linear model coefficients".into()));
        }
        Ok(Self { theta })
    }

    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(theta))
    }

    pub fn zeros(n_theta: usize) -> Result<Self> {
        Self::new(DVector::zeros(n_theta))
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn n_theta(&self) -> usize {
        self.theta.len()
    }
}

/// Stacked derivative columns of one reference.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorMatrix {
    matrix: DMatrix<f64>,
    source_id: Option<usize>,
}

impl RegressorMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_theta(&self) -> usize {
        self.matrix.ncols()
    }

    /// Dataset entry index this regressor was built from, when known.
    pub fn source_id(&self) -> Option<usize> {
        self.source_id
    }

    pub fn with_source_id(mut self, id: usize) -> Self {
        self.source_id = Some(id);
        self
    }
}

/// Builds the N x n_theta regressor; column n is the order-n derivative.
pub fn build_regressor(reference: &Trajectory, n_theta: usize) -> Result<RegressorMatrix> {
    if n_theta == 0 {
        return Err(Error::InvalidArgument("n_theta must be >= 1".into()));
    }
    if reference.len() <= n_theta {
        return Err(Error::InvalidArgument(format!(
            "reference of {} samples is too short for {} model parameters",
            reference.len(),
            n_theta
        )));
    }
    let stack = build_stack(reference, n_theta - 1);
    Ok(RegressorMatrix {
        matrix: stack.matrix().clone(),
        source_id: None,
    })
}

/// Thin SVD of a regressor, the data every projection needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    u1: DMatrix<f64>,
    sigma: DVector<f64>,
    v: DMatrix<f64>,
    /// Resolved absolute threshold min(S) was checked against.
    rank_tolerance: f64,
}

impl ProjectionBasis {
    pub fn u1(&self) -> &DMatrix<f64> {
        &self.u1
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn rank_tolerance(&self) -> f64 {
        self.rank_tolerance
    }

    pub fn n_samples(&self) -> usize {
        self.u1.nrows()
    }

    pub fn n_theta(&self) -> usize {
        self.u1.ncols()
    }

    /// Coordinates of v in the model subspace: U1^T v. The projection's norm
    /// equals this vector's norm, which is what the regularizer uses.
    pub fn model_coordinates(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.n_samples() {
            return Err(Error::DimensionMismatch(format!(
                "vector length {} vs basis rows {}",
                v.len(),
                self.n_samples()
            )));
        }
        Ok(self.u1.tr_mul(v))
    }
}

/// Thin SVD with a relative rank check; singular values come out descending.
pub fn decompose(regressor: &RegressorMatrix, rank_tolerance: f64) -> Result<ProjectionBasis> {
    if !(rank_tolerance >= 0.0 && rank_tolerance.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rank tolerance must be non-negative, got {rank_tolerance}"
        )));
    }
    let m = regressor.matrix();
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma = svd.singular_values;

    // Defensive descending sort; projections are permutation-invariant but
    // the stored basis promises descending order.
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).expect("finite singular values"));
    let sigma_sorted = DVector::from_iterator(sigma.len(), order.iter().map(|&i| sigma[i]));
    let u1 = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v_full = v_t.transpose();
    let v_sorted = DMatrix::from_columns(&order.iter().map(|&i| v_full.column(i)).collect::<Vec<_>>());

    let max_sigma = sigma_sorted[0];
    let min_sigma = sigma_sorted[sigma_sorted.len() - 1];
    let resolved = rank_tolerance * max_sigma;
    if !(min_sigma > resolved) || max_sigma == 0.0 {
        return Err(Error::RankDeficient {
            min_sigma,
            tolerance: resolved,
            source_id: regressor.source_id(),
        });
    }
    Ok(ProjectionBasis {
        u1,
        sigma: sigma_sorted,
        v: v_sorted,
        rank_tolerance: resolved,
    })
}

/// Pi_1 v = U1 (U1^T v): projection onto the model's force subspace.
pub fn project_model_subspace(basis: &ProjectionBasis, v: &DVector<f64>) -> Result<DVector<f64>> {
    let coords = basis.model_coordinates(v)?;
    Ok(basis.u1() * coords)
}

/// Pi_2 v = v - Pi_1 v: projection onto the orthogonal complement.
pub fn project_complement(basis: &ProjectionBasis, v: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(v - project_model_subspace(basis, v)?)
}

/// Stacked least squares over the whole dataset, solved through the SVD of
/// the stacked regressor.
pub fn closed_form_ls(dataset: &Dataset, n_theta: usize) -> Result<LinearModel> {
    let regressors: Vec<RegressorMatrix> = dataset
        .entries()
        .iter()
        .enumerate()
        .map(|(j, e)| Ok(build_regressor(&e.reference, n_theta)?.with_source_id(j)))
        .collect::<Result<_>>()?;
    let total: usize = regressors.iter().map(|r| r.n_samples()).sum();
    let mut stacked = DMatrix::zeros(total, n_theta);
    let mut rhs = DVector::zeros(total);
    let mut row = 0;
    for (reg, entry) in regressors.iter().zip(dataset.entries()) {
        let n = reg.n_samples();
        stacked.view_mut((row, 0), (n, n_theta)).copy_from(reg.matrix());
        rhs.rows_mut(row, n)
            .copy_from_slice(entry.target.samples());
        row += n;
    }
    let svd = stacked.svd(true, true);
    let sigma = &svd.singular_values;
    let max_sigma = sigma.iter().cloned().fold(0.0f64, f64::max);
    let min_sigma = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_sigma > DEFAULT_RANK_TOLERANCE * max_sigma) || max_sigma == 0.0 {
        return Err(Error::RankDeficient {
            min_sigma,
            tolerance: DEFAULT_RANK_TOLERANCE * max_sigma,
            source_id: None,
        });
    }
    let theta = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::InvalidArgument(format!("svd solve failed: {e}")))?;
    LinearModel::new(theta.column(0).clone_owned())
}

// ─── Tests ──────────────────────────────────────────────────────────────────
