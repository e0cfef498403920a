//! Deployment-side evaluation: run a trained filter over references, compare
//! its force against the exact plant inverse, close the loop through the
//! simulated plant, and summarize seed-to-seed coefficient scatter.

use crate::error::{Error, Result};
use crate::linmodel::{build_regressor, decompose, LinearModel, DEFAULT_RANK_TOLERANCE};
use crate::neuralnet::{forward, Network};
use crate::objectives::ObjectiveKind;
use crate::parallel;
use crate::plant::{Dataset, StribeckPlant};
use crate::signals::Trajectory;
use crate::training::{train, TrainConfig, TrainReport};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// How the network output enters the deployed filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    /// Raw network output (plain least-squares training).
    None,
    /// Raw network output; the subspace penalty acted during training only.
    Regularized,
    /// Network output projected onto the complement of the model subspace,
    /// which requires the reference to be fully known in advance.
    ExplicitProjection,
}

/// A trained parametrization ready to produce feedforward force.
#[derive(Debug, Clone)]
pub struct FilterUnderTest {
    pub theta: LinearModel,
    pub network: Option<Network>,
    pub objective_kind: ObjectiveKind,
    pub basis_mode: BasisMode,
    pub rank_tolerance: f64,
}

impl FilterUnderTest {
    pub fn new(
        theta: LinearModel,
        network: Option<Network>,
        objective_kind: ObjectiveKind,
    ) -> Self {
        let basis_mode = match objective_kind {
            ObjectiveKind::LeastSquares => BasisMode::None,
            ObjectiveKind::OrthogonalRegularized => BasisMode::Regularized,
            ObjectiveKind::ExplicitProjection => BasisMode::ExplicitProjection,
        };
        Self {
            theta,
            network,
            objective_kind,
            basis_mode,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
        }
    }

    pub fn from_report(report: &TrainReport) -> Result<Self> {
        let p = report.final_parametrization()?;
        Ok(Self::new(p.theta, p.network, report.objective.kind))
    }
}

/// Run the filter over one reference. Returns (f, f_model, f_net) with
/// f = f_model + f_net exactly, sample for sample.
pub fn apply_filter(
    filter: &FilterUnderTest,
    reference: &Trajectory,
) -> Result<(Trajectory, Trajectory, Trajectory)> {
    let regressor = build_regressor(reference, filter.theta.n_theta())?;
    let f_model = regressor.matrix() * filter.theta.theta();
    let f_net = match &filter.network {
        None => DVector::zeros(reference.len()),
        Some(net) => {
            let c = forward(net, regressor.matrix())?;
            if filter.basis_mode == BasisMode::ExplicitProjection {
                // The evaluation reference brings its own basis.
                let basis = decompose(&regressor, filter.rank_tolerance)?;
                &c - basis.u1() * basis.u1().tr_mul(&c)
            } else {
                c
            }
        }
    };
    let f = &f_model + &f_net;
    let fs = reference.sample_rate();
    Ok((
        Trajectory::new(f.iter().copied().collect(), fs)?,
        Trajectory::new(f_model.iter().copied().collect(), fs)?,
        Trajectory::new(f_net.iter().copied().collect(), fs)?,
    ))
}

/// Per-reference quality metrics. RMS values are over the full series except
/// tracking_rmse, which skips the backward-difference warmup samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub ffw_rmse: f64,
    pub tracking_rmse: f64,
    pub model_component_rms: f64,
    pub network_component_rms: f64,
    pub target_rms: f64,
}

/// Full per-reference time series backing the metrics, for CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSeries {
    pub reference: Trajectory,
    pub f_hat: Trajectory,
    pub f: Trajectory,
    pub f_model: Trajectory,
    pub f_net: Trajectory,
    pub y: Trajectory,
    pub e: Trajectory,
}

impl ReferenceSeries {
    /// Columns `k,r,f_hat,f,f_model,f_net,y,e`, k starting at 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "k,r,f_hat,f,f_model,f_net,y,e").expect("vec write");
        for k in 0..self.reference.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                k + 1,
                self.reference.samples()[k],
                self.f_hat.samples()[k],
                self.f.samples()[k],
                self.f_model.samples()[k],
                self.f_net.samples()[k],
                self.y.samples()[k],
                self.e.samples()[k],
            )
            .expect("vec write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Score an externally supplied feedforward series against the exact
/// inverse, then close the loop through the plant. `warmup` samples are
/// excluded from tracking_rmse (the backward-difference startup).
pub fn evaluate_series(
    f: &Trajectory,
    reference: &Trajectory,
    plant: &StribeckPlant,
    warmup: usize,
) -> Result<(ReferenceMetrics, Trajectory, Trajectory, Trajectory)> {
    if f.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "force series has {} samples, reference {}",
            f.len(),
            reference.len()
        )));
    }
    let f_hat = plant.exact_inverse(reference)?;
    let ffw_err: Vec<f64> = f_hat
        .samples()
        .iter()
        .zip(f.samples())
        .map(|(a, b)| a - b)
        .collect();
    let y = plant.forward_simulate(f)?;
    let e: Vec<f64> = reference
        .samples()
        .iter()
        .zip(y.samples())
        .map(|(r, yk)| r - yk)
        .collect();
    let warmup = warmup.min(e.len());
    let metrics = ReferenceMetrics {
        ffw_rmse: rms(&ffw_err),
        tracking_rmse: rms(&e[warmup..]),
        model_component_rms: 0.0,
        network_component_rms: 0.0,
        target_rms: f_hat.rms(),
    };
    let fs = reference.sample_rate();
    Ok((
        metrics,
        f_hat,
        y,
        Trajectory::new(e, fs)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub objective_kind: ObjectiveKind,
    pub basis_mode: BasisMode,
    pub theta: Vec<f64>,
    /// Euclidean distance to the plant's true coefficient vector; absent
    /// when the model orders differ.
    pub theta_error: Option<f64>,
    pub per_reference: Vec<ReferenceMetrics>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Evaluate the filter on every reference: feedforward error against the
/// exact inverse and tracking error through the simulated plant.
pub fn evaluate(
    filter: &FilterUnderTest,
    references: &[Trajectory],
    plant: &StribeckPlant,
) -> Result<(EvalReport, Vec<ReferenceSeries>)> {
    let warmup = filter.theta.n_theta();
    let evaluated = parallel::map_items(references, |reference| -> Result<_> {
        let (f, f_model, f_net) = apply_filter(filter, reference)?;
        let (mut metrics, f_hat, y, e) = evaluate_series(&f, reference, plant, warmup)?;
        metrics.model_component_rms = f_model.rms();
        metrics.network_component_rms = f_net.rms();
        let series = ReferenceSeries {
            reference: reference.clone(),
            f_hat,
            f,
            f_model,
            f_net,
            y,
            e,
        };
        Ok((metrics, series))
    });

    let mut per_reference = Vec::with_capacity(references.len());
    let mut series_out = Vec::with_capacity(references.len());
    for item in evaluated {
        let (metrics, series) = item?;
        for (name, v) in [
            ("ffw_rmse", metrics.ffw_rmse),
            ("tracking_rmse", metrics.tracking_rmse),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("evaluation metric {name}")));
            }
        }
        per_reference.push(metrics);
        series_out.push(series);
    }

    let truth = plant.coefficients();
    let theta_error = (filter.theta.n_theta() == truth.len()).then(|| {
        filter
            .theta
            .theta()
            .iter()
            .zip(truth.iter())
            .map(|(t, a)| (t - a) * (t - a))
            .sum::<f64>()
            .sqrt()
    });

    Ok((
        EvalReport {
            objective_kind: filter.objective_kind,
            basis_mode: filter.basis_mode,
            theta: filter.theta.theta().iter().copied().collect(),
            theta_error,
            per_reference,
        },
        series_out,
    ))
}

// ─── Seed study ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateStats {
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonuniquenessReport {
    pub seeds: Vec<u64>,
    pub thetas: Vec<Vec<f64>>,
    pub final_losses: Vec<f64>,
    pub per_coordinate: Vec<CoordinateStats>,
}

impl NonuniquenessReport {
    /// Largest per-coordinate std: the scalar "spread" of the study.
    pub fn max_spread(&self) -> f64 {
        self.per_coordinate
            .iter()
            .map(|c| c.std)
            .fold(0.0, f64::max)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Train `n_seeds` independently seeded runs (seed, seed+1, ...) and report
/// the per-coordinate scatter of the recovered coefficients.
pub fn nonuniqueness_study(
    config: &TrainConfig,
    dataset: &Dataset,
    n_seeds: usize,
) -> Result<NonuniquenessReport> {
    if n_seeds < 5 {
        return Err(Error::InvalidArgument(format!(
            "seed study needs at least 5 runs, got {n_seeds}"
        )));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| config.seed + i).collect();
    let runs = parallel::map_items(&seeds, |&seed| -> Result<_> {
        let mut c = config.clone();
        c.seed = seed;
        let report = train(&c, dataset, None)?;
        let loss = report.loss_history.last().expect("nonempty").total;
        Ok((report.final_theta, loss))
    });

    let mut thetas = Vec::with_capacity(n_seeds);
    let mut final_losses = Vec::with_capacity(n_seeds);
    for run in runs {
        let (theta, loss) = run?;
        thetas.push(theta);
        final_losses.push(loss);
    }

    let n_theta = thetas[0].len();
    let n = n_seeds as f64;
    let per_coordinate = (0..n_theta)
        .map(|i| {
            let column: Vec<f64> = thetas.iter().map(|t| t[i]).collect();
            let mean = column.iter().sum::<f64>() / n;
            let var = column.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            CoordinateStats {
                mean,
                std: var.sqrt(),
                min: column.iter().copied().fold(f64::INFINITY, f64::min),
                max: column.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();

    Ok(NonuniquenessReport {
        seeds,
        thetas,
        final_losses,
        per_coordinate,
    })
}

// ─── Tests ──────────────────────────────────────────────────────────────────
