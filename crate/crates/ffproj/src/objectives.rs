//! Training objectives over (theta, phi): plain least squares, the
//! projection-regularized variant, and the explicitly projected variant,
//! with their exact gradients.
//!
//! The regularized cost never forms a projector matrix: with M = U1*S*V^T
//! per entry, the penalty is ||U1^T C||^2 and the complement projection is
//! v - U1(U1^T v). Per-entry terms are evaluated independently (in parallel
//! when enabled) and reduced in entry order, so results are bit-stable.

use crate::error::{Error, Result};
use crate::linmodel::{
    build_regressor, closed_form_ls, decompose, LinearModel, ProjectionBasis, RegressorMatrix,
};
use crate::neuralnet::{backward_from_tape, forward, forward_taped, GradientSet, Network};
use crate::parallel;
use crate::plant::Dataset;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    LeastSquares,
    OrthogonalRegularized,
    ExplicitProjection,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ObjectiveKind::LeastSquares => "least_squares",
            ObjectiveKind::OrthogonalRegularized => "orthogonal_regularized",
            ObjectiveKind::ExplicitProjection => "explicit_projection",
        };
        write!(f, "{name}")
    }
}

/// Objective selector; lambda only matters for the regularized kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub lambda: f64,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative and finite, got {lambda}"
            )));
        }
        Ok(Self { kind, lambda })
    }

    pub fn least_squares() -> Self {
        Self {
            kind: ObjectiveKind::LeastSquares,
            lambda: 0.0,
        }
    }

    /// Effective regularization weight: zero unless the kind uses it.
    fn effective_lambda(&self) -> f64 {
        match self.kind {
            ObjectiveKind::OrthogonalRegularized => self.lambda,
            _ => 0.0,
        }
    }
}

/// Loss split mirroring the orthogonal decomposition: j1 is the model-space
/// residual, j2 the complement-space residual, j3 the scaled penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
}

/// One dataset entry with everything an objective needs precomputed: the
/// regressor (whose rows double as network inputs), its cached SVD basis,
/// and the stacked target force.
#[derive(Debug, Clone)]
pub struct ProblemEntry {
    regressor: RegressorMatrix,
    basis: ProjectionBasis,
    target: DVector<f64>,
}

impl ProblemEntry {
    pub fn regressor(&self) -> &RegressorMatrix {
        &self.regressor
    }

    pub fn basis(&self) -> &ProjectionBasis {
        &self.basis
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }
}

/// Dataset lifted into regressor/basis/target form, one entry per reference.
/// Construction fails if any entry violates the full-rank assumption.
#[derive(Debug, Clone)]
pub struct Problem {
    entries: Vec<ProblemEntry>,
    n_theta: usize,
}

impl Problem {
    pub fn from_dataset(dataset: &Dataset, n_theta: usize, rank_tolerance: f64) -> Result<Self> {
        let indexed: Vec<(usize, &crate::plant::DatasetEntry)> =
            dataset.entries().iter().enumerate().collect();
        let entries = parallel::map_items(&indexed, |(j, e)| -> Result<ProblemEntry> {
            let regressor = build_regressor(&e.reference, n_theta)?.with_source_id(*j);
            let basis = decompose(&regressor, rank_tolerance)?;
            Ok(ProblemEntry {
                regressor,
                basis,
                target: DVector::from_column_slice(e.target.samples()),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, n_theta })
    }

    pub fn entries(&self) -> &[ProblemEntry] {
        &self.entries
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    /// Sum over entries of squared target norms; scale for relative checks.
    pub fn target_energy(&self) -> f64 {
        self.entries.iter().map(|e| e.target.norm_squared()).sum()
    }

    fn check_shapes(&self, theta: &LinearModel, net: Option<&Network>) -> Result<()> {
        if theta.n_theta() != self.n_theta {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} coefficients, problem expects {}",
                theta.n_theta(),
                self.n_theta
            )));
        }
        if let Some(net) = net {
            if net.input_width() != self.n_theta {
                return Err(Error::DimensionMismatch(format!(
                    "network consumes {} inputs, problem expects {}",
                    net.input_width(),
                    self.n_theta
                )));
            }
        }
        Ok(())
    }
}

/// Network output over an entry's rows; zero when no network is present.
fn net_output(net: Option<&Network>, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
    match net {
        Some(net) => forward(net, inputs),
        None => Ok(DVector::zeros(inputs.nrows())),
    }
}

/// Per-entry losses plus, when requested, the theta gradient and the
/// cotangent to backpropagate through the network.
struct EntryTerms {
    j1: f64,
    j2: f64,
    j3: f64,
    total: f64,
    d_theta: Option<DVector<f64>>,
    cotangent: Option<DVector<f64>>,
}

fn entry_terms(
    entry: &ProblemEntry,
    kind: ObjectiveKind,
    lambda: f64,
    theta: &DVector<f64>,
    c: &DVector<f64>,
    with_gradients: bool,
) -> EntryTerms {
    let m = entry.regressor.matrix();
    let basis = &entry.basis;
    let f_hat = &entry.target;
    let u1 = basis.u1();

    // sigma .* (V^T theta) = U1^T M theta without touching the long axis.
    let sigma_vt_theta = basis
        .singular_values()
        .component_mul(&basis.v().tr_mul(theta));

    match kind {
        ObjectiveKind::LeastSquares | ObjectiveKind::OrthogonalRegularized => {
            let residual = f_hat - m * theta - c;
            let ls = residual.norm_squared();
            let u1t_c = u1.tr_mul(c);
            let j3 = lambda * u1t_c.norm_squared();
            let fc = f_hat - c;
            let u1t_fc = u1.tr_mul(&fc);
            let j1 = (&u1t_fc - &sigma_vt_theta).norm_squared();
            let j2 = (&fc - u1 * &u1t_fc).norm_squared();
            let (d_theta, cotangent) = if with_gradients {
                let d_theta = -2.0 * m.tr_mul(&residual);
                let mut cot = -2.0 * residual;
                if lambda != 0.0 {
                    cot += 2.0 * lambda * (u1 * u1t_c);
                }
                (Some(d_theta), Some(cot))
            } else {
                (None, None)
            };
            EntryTerms {
                j1,
                j2,
                j3,
                total: ls + j3,
                d_theta,
                cotangent,
            }
        }
        ObjectiveKind::ExplicitProjection => {
            let p2_c = c - u1 * u1.tr_mul(c);
            let residual = f_hat - m * theta - &p2_c;
            let total = residual.norm_squared();
            let j1 = (u1.tr_mul(f_hat) - sigma_vt_theta).norm_squared();
            let fc = f_hat - c;
            let j2 = (&fc - u1 * u1.tr_mul(&fc)).norm_squared();
            let (d_theta, cotangent) = if with_gradients {
                let d_theta = -2.0 * m.tr_mul(&residual);
                let p2_residual = &residual - u1 * u1.tr_mul(&residual);
                (Some(d_theta), Some(-2.0 * p2_residual))
            } else {
                (None, None)
            };
            EntryTerms {
                j1,
                j2,
                j3: 0.0,
                total,
                d_theta,
                cotangent,
            }
        }
    }
}

fn accumulate(
    objective: &ObjectiveConfig,
    theta: &LinearModel,
    net: Option<&Network>,
    problem: &Problem,
    with_gradients: bool,
) -> Result<(LossBreakdown, Option<(DVector<f64>, Option<GradientSet>)>)> {
    problem.check_shapes(theta, net)?;
    let lambda = objective.effective_lambda();
    let per_entry = parallel::map_items(problem.entries(), |entry| -> Result<_> {
        let inputs = entry.regressor.matrix();
        // One forward pass serves both the loss and, via its tape, backprop.
        let (c, tape) = match net {
            Some(net) => {
                let (c, tape) = forward_taped(net, inputs)?;
                (c, Some(tape))
            }
            None => (DVector::zeros(inputs.nrows()), None),
        };
        let terms = entry_terms(
            entry,
            objective.kind,
            lambda,
            theta.theta(),
            &c,
            with_gradients,
        );
        let net_grad = match (&terms.cotangent, net, &tape) {
            (Some(cot), Some(net), Some(tape)) => Some(backward_from_tape(net, tape, cot)?),
            _ => None,
        };
        Ok((terms, net_grad))
    });

    let mut breakdown = LossBreakdown {
        total: 0.0,
        j1: 0.0,
        j2: 0.0,
        j3: 0.0,
    };
    let mut d_theta = DVector::zeros(problem.n_theta());
    let mut d_phi = net.map(GradientSet::zeros_like);
    for item in per_entry {
        let (terms, net_grad) = item?;
        breakdown.total += terms.total;
        breakdown.j1 += terms.j1;
        breakdown.j2 += terms.j2;
        breakdown.j3 += terms.j3;
        if let Some(dt) = terms.d_theta {
            d_theta += dt;
        }
        if let (Some(acc), Some(g)) = (d_phi.as_mut(), net_grad) {
            acc.add_assign(&g);
        }
    }
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let grads = with_gradients.then_some((d_theta, d_phi));
    Ok((breakdown, grads))
}

/// Plain least squares straight off the dataset; no bases required.
pub fn loss_ls(theta: &LinearModel, net: Option<&Network>, dataset: &Dataset) -> Result<f64> {
    let n_theta = theta.n_theta();
    let per_entry = parallel::map_items(dataset.entries(), |e| -> Result<f64> {
        let regressor = build_regressor(&e.reference, n_theta)?;
        let c = net_output(net, regressor.matrix())?;
        let f_hat = DVector::from_column_slice(e.target.samples());
        let residual = f_hat - regressor.matrix() * theta.theta() - c;
        Ok(residual.norm_squared())
    });
    let mut total = 0.0;
    for term in per_entry {
        total += term?;
    }
    Ok(total)
}

/// Regularized loss with its orthogonal split. The identity
/// total = j1 + j2 + j3 is algebraic; both sides are computed independently.
pub fn loss_projected(
    theta: &LinearModel,
    net: Option<&Network>,
    problem: &Problem,
    lambda: f64,
) -> Result<LossBreakdown> {
    let objective = ObjectiveConfig::new(ObjectiveKind::OrthogonalRegularized, lambda)?;
    Ok(accumulate(&objective, theta, net, problem, false)?.0)
}

/// Loss with the network contribution explicitly projected onto the
/// complement subspace before it enters the residual.
pub fn loss_explicit_projection(
    theta: &LinearModel,
    net: Option<&Network>,
    problem: &Problem,
) -> Result<f64> {
    let objective = ObjectiveConfig {
        kind: ObjectiveKind::ExplicitProjection,
        lambda: 0.0,
    };
    Ok(accumulate(&objective, theta, net, problem, false)?.0.total)
}

/// Loss breakdown for any objective kind (trainer-facing entry point).
pub fn evaluate(
    objective: &ObjectiveConfig,
    theta: &LinearModel,
    net: Option<&Network>,
    problem: &Problem,
) -> Result<LossBreakdown> {
    Ok(accumulate(objective, theta, net, problem, false)?.0)
}

/// Exact analytic gradient of the selected objective.
pub fn gradients(
    objective: &ObjectiveConfig,
    theta: &LinearModel,
    net: Option<&Network>,
    problem: &Problem,
) -> Result<(DVector<f64>, Option<GradientSet>)> {
    let (_, grads) = accumulate(objective, theta, net, problem, true)?;
    Ok(grads.expect("gradients requested"))
}

/// Loss and gradient in one pass, sharing the forward evaluations.
pub fn evaluate_with_gradients(
    objective: &ObjectiveConfig,
    theta: &LinearModel,
    net: Option<&Network>,
    problem: &Problem,
) -> Result<(LossBreakdown, DVector<f64>, Option<GradientSet>)> {
    let (breakdown, grads) = accumulate(objective, theta, net, problem, true)?;
    let (d_theta, d_phi) = grads.expect("gradients requested");
    Ok((breakdown, d_theta, d_phi))
}

/// Disjoint minimizer of the explicit-projection objective: theta in closed
/// form (independent of the network), phi by the supplied trainer with theta
/// frozen. The trainer minimizes sum_j ||Pi_2 (f_j - C_phi)||^2.
pub fn solve_disjoint<F>(
    dataset: &Dataset,
    problem: &Problem,
    net_template: Network,
    trainer: F,
) -> Result<(LinearModel, Network)>
where
    F: FnOnce(&Problem, &LinearModel, Network) -> Result<Network>,
{
    let theta = closed_form_ls(dataset, problem.n_theta())?;
    let net = trainer(problem, &theta, net_template)?;
    Ok((theta, net))
}

// ─── Tests ──────────────────────────────────────────────────────────────────
