//! Joint optimization of (theta, phi): an optional L-BFGS warm start with a
//! monotone backtracking line search, then moment-corrected first-order
//! descent until a gradient-norm or loss-plateau criterion fires.
//!
//! Both parameter blocks live in one flat vector (theta first, then the
//! network, column-major per layer). The explicit-projection objective is
//! trained disjointly: theta in closed form, phi alone afterwards.

use crate::error::{Error, Result};
use crate::linmodel::{LinearModel, DEFAULT_RANK_TOLERANCE};
use crate::neuralnet::{Activation, GradientSet, Network, NetworkCheckpoint};
use crate::objectives::{
    evaluate_with_gradients, solve_disjoint, LossBreakdown, ObjectiveConfig, ObjectiveKind,
    Problem,
};
use crate::plant::Dataset;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

const ARMIJO_C1: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub iterations: usize,
    pub memory: usize,
    pub line_search_max_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            memory: 10,
            line_search_max_steps: 40,
        }
    }
}

/// Stop when the gradient norm falls under grad_norm_tol * (1 + loss), or
/// when the relative loss improvement stays below loss_rel_tol for
/// `patience` consecutive iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub grad_norm_tol: f64,
    pub loss_rel_tol: f64,
    pub patience: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            grad_norm_tol: 1e-8,
            loss_rel_tol: 1e-12,
            patience: 200,
        }
    }
}

/// Network shape for fresh initializations: hidden widths only; the input
/// width is the model order and the output is a single force channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn build(&self, n_theta: usize, seed: u64) -> Result<Network> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(n_theta);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(1);
        Network::init(&sizes, self.activation, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    /// None trains the linear model alone.
    pub network: Option<NetworkConfig>,
    pub max_iterations: usize,
    pub adam: AdamConfig,
    /// None skips the warm-start phase.
    pub lbfgs: Option<LbfgsConfig>,
    pub seed: u64,
    pub convergence: ConvergenceConfig,
    pub rank_tolerance: f64,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig, network: Option<NetworkConfig>, seed: u64) -> Self {
        Self {
            objective,
            network,
            max_iterations: 50_000,
            adam: AdamConfig::default(),
            lbfgs: Some(LbfgsConfig::default()),
            seed,
            convergence: ConvergenceConfig::default(),
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
        }
    }

    fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.step_size > 0.0 && a.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step_size must be positive, got {}",
                a.step_size
            )));
        }
        for (name, beta) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if a.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                a.epsilon
            )));
        }
        Ok(())
    }
}

/// A (theta, network) pair under optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Parametrization {
    pub theta: LinearModel,
    pub network: Option<Network>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: ObjectiveConfig,
    pub seed: u64,
    pub loss_history: Vec<LossBreakdown>,
    pub final_theta: Vec<f64>,
    pub final_network: Option<NetworkCheckpoint>,
    pub iterations_run: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// Wall-clock seconds; the one field excluded from determinism claims.
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn final_parametrization(&self) -> Result<Parametrization> {
        let theta = LinearModel::from_slice(&self.final_theta)?;
        let network = self
            .final_network
            .as_ref()
            .map(NetworkCheckpoint::to_network)
            .transpose()?;
        Ok(Parametrization { theta, network })
    }

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

    /// Loss trace as `iter,total,j1,j2,j3` for external plotting.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "iter,total,j1,j2,j3").expect("vec write");
        for (i, b) in self.loss_history.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{}", b.total, b.j1, b.j2, b.j3).expect("vec write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

// ─── Parameter flattening ───────────────────────────────────────────────────

/// Network parameters in flattening order: weights then biases, each matrix
/// column-major.
fn net_params(net: &Network) -> impl Iterator<Item = f64> + '_ {
    net.weights()
        .iter()
        .flat_map(|w| w.iter())
        .chain(net.biases().iter().flat_map(|b| b.iter()))
        .copied()
}

/// Stack theta, then the network parameters.
pub fn flatten(theta: &LinearModel, net: Option<&Network>) -> DVector<f64> {
    let mut data: Vec<f64> = theta.theta().iter().copied().collect();
    if let Some(net) = net {
        data.extend(net_params(net));
    }
    DVector::from_vec(data)
}

fn flatten_net(net: &Network) -> DVector<f64> {
    DVector::from_iterator(net.parameter_count(), net_params(net))
}

fn flatten_grads(d_theta: &DVector<f64>, d_phi: Option<&GradientSet>) -> DVector<f64> {
    let mut data: Vec<f64> = d_theta.iter().copied().collect();
    if let Some(g) = d_phi {
        for w in &g.weights {
            data.extend(w.iter());
        }
        for b in &g.biases {
            data.extend(b.iter());
        }
    }
    DVector::from_vec(data)
}

/// Rebuild a network with the template's shapes from a flat slice.
fn unflatten_net(x: &[f64], template: &Network) -> Result<Network> {
    if x.len() != template.parameter_count() {
        return Err(Error::DimensionMismatch(format!(
            "flat vector has {} entries, network needs {}",
            x.len(),
            template.parameter_count()
        )));
    }
    let mut net = template.clone();
    let mut offset = 0;
    for w in net.weights_mut() {
        let len = w.len();
        w.copy_from(&DMatrix::from_column_slice(
            w.nrows(),
            w.ncols(),
            &x[offset..offset + len],
        ));
        offset += len;
    }
    for b in net.biases_mut() {
        let len = b.len();
        b.copy_from(&DVector::from_column_slice(&x[offset..offset + len]));
        offset += len;
    }
    Ok(net)
}

/// Inverse of [`flatten`]; the template supplies the network shapes.
pub fn unflatten(
    x: &DVector<f64>,
    n_theta: usize,
    template: Option<&Network>,
) -> Result<Parametrization> {
    let expected = n_theta + template.map(Network::parameter_count).unwrap_or(0);
    if x.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "flat vector has {} entries, parametrization needs {expected}",
            x.len()
        )));
    }
    let theta = LinearModel::from_slice(&x.as_slice()[..n_theta])?;
    let network = template
        .map(|t| unflatten_net(&x.as_slice()[n_theta..], t))
        .transpose()?;
    Ok(Parametrization { theta, network })
}

// ─── ADAM ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamState {
    m: DVector<f64>,
    v: DVector<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
        }
    }
}

/// One bias-corrected moment update, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut DVector<f64>,
    grads: &DVector<f64>,
    hyper: &AdamConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    state.t += 1;
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bias1 = 1.0 - b1.powi(state.t as i32);
    let bias2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= hyper.step_size * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

// ─── L-BFGS ─────────────────────────────────────────────────────────────────

pub struct LbfgsOutcome {
    pub params: DVector<f64>,
    pub iterations_run: usize,
    pub line_search_failed: bool,
}

/// Two-loop-recursion quasi-Newton phase with a backtracking Armijo line
/// search. Monotone by construction: a step is only accepted on sufficient
/// decrease, and line-search failure ends the phase with the current params.
/// `on_accept` observes every accepted iterate.
pub fn lbfgs_phase<F>(
    params: DVector<f64>,
    mut loss_and_grad: F,
    config: &LbfgsConfig,
    mut on_accept: impl FnMut(&DVector<f64>) -> Result<()>,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut x = params;
    let (mut fx, mut gx) = loss_and_grad(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("loss at line-search start".into()));
    }
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut failed = false;
    let mut iterations_run = 0;

    for _ in 0..config.iterations {
        if gx.norm() == 0.0 {
            break;
        }
        // Two-loop recursion for d = -H g.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = s.dot(y) / y.dot(y);
            q *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q += s * (a - b);
        }
        let mut direction = -q;
        let mut slope = gx.dot(&direction);
        if slope >= 0.0 {
            // Curvature information unusable; fall back to steepest descent.
            direction = -gx.clone();
            slope = -gx.norm_squared();
        }

        // Backtracking with halving until Armijo sufficient decrease.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..config.line_search_max_steps {
            let candidate = &x + &direction * step;
            let (fc, gc) = loss_and_grad(&candidate)?;
            if fc.is_finite() && fc <= fx + ARMIJO_C1 * step * slope {
                accepted = Some((candidate, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            failed = true;
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &gx;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if pairs.len() == config.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
        iterations_run += 1;
        on_accept(&x)?;
    }

    Ok(LbfgsOutcome {
        params: x,
        iterations_run,
        line_search_failed: failed,
    })
}

// ─── Training loop ──────────────────────────────────────────────────────────

struct OptimizeOutcome {
    params: DVector<f64>,
    history: Vec<LossBreakdown>,
    iterations_run: usize,
    converged: bool,
    line_search_failed: bool,
}

/// Shared L-BFGS + ADAM driver over a flat parameter vector. The history
/// holds the loss at the initial point and after every accepted iteration
/// of either phase; its last entry is the loss at the returned params.
fn optimize<F>(x0: DVector<f64>, mut eval: F, config: &TrainConfig) -> Result<OptimizeOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(LossBreakdown, DVector<f64>)>,
{
    let mut history = Vec::new();
    let (b0, g0) = eval(&x0)?;
    if !b0.total.is_finite() {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    history.push(b0);

    let mut x = x0;
    let mut iterations_run = 0;
    let mut line_search_failed = false;
    let grad_converged = |b: &LossBreakdown, g: &DVector<f64>| {
        g.norm() <= config.convergence.grad_norm_tol * (1.0 + b.total)
    };
    if grad_converged(&b0, &g0) {
        return Ok(OptimizeOutcome {
            params: x,
            history,
            iterations_run: 0,
            converged: true,
            line_search_failed: false,
        });
    }

    // Loss and gradient at the current iterate, carried across phases so
    // each point is evaluated exactly once.
    let mut cur = (b0, g0);
    if let Some(lbfgs) = &config.lbfgs {
        if lbfgs.iterations > 0 {
            // The trace callback re-derives the split at accepted iterates;
            // one extra loss evaluation per accepted step. Both closures
            // need the evaluator, hence the RefCell.
            let outcome = {
                let history = &mut history;
                let eval_cell = std::cell::RefCell::new(&mut eval);
                lbfgs_phase(
                    x,
                    |p| {
                        let (b, g) = (&mut *eval_cell.borrow_mut())(p)?;
                        Ok((b.total, g))
                    },
                    lbfgs,
                    |p| {
                        let (b, _) = (&mut *eval_cell.borrow_mut())(p)?;
                        history.push(b);
                        Ok(())
                    },
                )?
            };
            x = outcome.params;
            line_search_failed = outcome.line_search_failed;
            iterations_run += outcome.iterations_run;
            if outcome.iterations_run > 0 {
                cur = eval(&x)?;
            }
        }
    }

    // First-order phase with plateau detection.
    let mut state = AdamState::new(x.len());
    let mut converged = false;
    let mut flat_streak = 0usize;
    let mut prev_total = history.last().expect("nonempty").total;
    for iter in 0..config.max_iterations {
        let (breakdown, grad) = &cur;
        if !breakdown.total.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "objective diverged at iteration {iter}"
            )));
        }
        if grad_converged(breakdown, grad) {
            converged = true;
            break;
        }
        adam_step(&mut state, &mut x, grad, &config.adam);
        iterations_run += 1;
        let after = eval(&x)?;
        history.push(after.0);

        let rel = (prev_total - after.0.total).abs() / after.0.total.abs().max(1e-300);
        prev_total = after.0.total;
        cur = after;
        if rel < config.convergence.loss_rel_tol {
            flat_streak += 1;
            if flat_streak >= config.convergence.patience {
                converged = true;
                break;
            }
        } else {
            flat_streak = 0;
        }
    }

    Ok(OptimizeOutcome {
        params: x,
        history,
        iterations_run,
        converged,
        line_search_failed,
    })
}

/// Train the selected parametrization on the dataset. Deterministic given
/// (config, dataset, initial): identical runs differ only in wall_time_s.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    initial: Option<Parametrization>,
) -> Result<TrainReport> {
    config.validate()?;
    let started = Instant::now();
    let n_theta = dataset.model_order_hint();
    let problem = Problem::from_dataset(dataset, n_theta, config.rank_tolerance)?;

    let init = match initial {
        Some(p) => {
            if p.theta.n_theta() != n_theta {
                return Err(Error::DimensionMismatch(format!(
                    "initial theta has {} coefficients, dataset implies {n_theta}",
                    p.theta.n_theta()
                )));
            }
            p
        }
        None => Parametrization {
            theta: LinearModel::zeros(n_theta)?,
            network: config
                .network
                .as_ref()
                .map(|nc| nc.build(n_theta, config.seed))
                .transpose()?,
        },
    };

    let (params, opt) = if config.objective.kind == ObjectiveKind::ExplicitProjection {
        train_disjoint(config, dataset, &problem, init)?
    } else {
        let template = init.network.clone();
        let x0 = flatten(&init.theta, init.network.as_ref());
        let objective = config.objective;
        let opt = optimize(
            x0,
            |x| {
                let p = unflatten(x, n_theta, template.as_ref())?;
                let (b, d_theta, d_phi) =
                    evaluate_with_gradients(&objective, &p.theta, p.network.as_ref(), &problem)?;
                Ok((b, flatten_grads(&d_theta, d_phi.as_ref())))
            },
            config,
        )?;
        let final_params = unflatten(&opt.params, n_theta, template.as_ref())?;
        (final_params, opt)
    };

    Ok(TrainReport {
        objective: config.objective,
        seed: config.seed,
        loss_history: opt.history,
        final_theta: params.theta.theta().iter().copied().collect(),
        final_network: params.network.as_ref().map(NetworkCheckpoint::from_network),
        iterations_run: opt.iterations_run,
        converged: opt.converged,
        line_search_failed: opt.line_search_failed,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Disjoint path: theta from the stacked closed form (network-independent),
/// then phi alone against the explicitly projected objective.
fn train_disjoint(
    config: &TrainConfig,
    dataset: &Dataset,
    problem: &Problem,
    init: Parametrization,
) -> Result<(Parametrization, OptimizeOutcome)> {
    let objective = ObjectiveConfig {
        kind: ObjectiveKind::ExplicitProjection,
        lambda: 0.0,
    };
    let has_network = init.network.is_some();
    // solve_disjoint always threads a template through; a placeholder covers
    // the model-only case and is discarded below.
    let template = match &init.network {
        Some(net) => net.clone(),
        None => Network::init(&[problem.n_theta(), 1, 1], Activation::Identity, 0)?,
    };

    let mut trained: Option<OptimizeOutcome> = None;
    let (theta, network) = {
        let trained = &mut trained;
        solve_disjoint(dataset, problem, template, |problem, theta_star, template| {
            if !has_network {
                let (b, d_theta, _) =
                    evaluate_with_gradients(&objective, theta_star, None, problem)?;
                *trained = Some(OptimizeOutcome {
                    params: DVector::zeros(0),
                    history: vec![b],
                    iterations_run: 0,
                    converged: d_theta.norm()
                        <= config.convergence.grad_norm_tol * (1.0 + b.total),
                    line_search_failed: false,
                });
                return Ok(template);
            }
            let opt = optimize(
                flatten_net(&template),
                |x| {
                    let net = unflatten_net(x.as_slice(), &template)?;
                    let (b, _, d_phi) =
                        evaluate_with_gradients(&objective, theta_star, Some(&net), problem)?;
                    let d_phi = d_phi.expect("network present");
                    Ok((b, flatten_grads(&DVector::zeros(0), Some(&d_phi))))
                },
                config,
            )?;
            let net = unflatten_net(opt.params.as_slice(), &template)?;
            *trained = Some(opt);
            Ok(net)
        })?
    };

    let opt = trained.expect("trainer ran");
    Ok((
        Parametrization {
            theta,
            network: has_network.then_some(network),
        },
        opt,
    ))
}

// ─── Tests ──────────────────────────────────────────────────────────────────
