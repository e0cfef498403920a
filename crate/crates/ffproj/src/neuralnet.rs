//! Fully connected feedforward approximator with exact reverse-mode
//! gradients.
//!
//! The network maps a stacked derivative row r~(k) to a scalar correction.
//! Hidden layers carry biases; the output layer is a single linear row with
//! no bias, which is what makes the affine collapse of an identity-activation
//! network exact.

use crate::error::{Error, Result};
use crate::linmodel::LinearModel;
use nalgebra::{DMatrix, DVector, RowDVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            // Subgradient at 0 is taken as 0, so the kink maps to 0 here too.
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's own output: exact for
    /// all three kinds (tanh' = 1 - tanh^2; relu output is positive exactly
    /// where its input is), so backprop never re-evaluates the activation.
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation '{other}'"
            ))),
        }
    }
}

/// Feedforward network: hidden layers with biases, scalar linear output
/// without one. `weights.len() == biases.len() + 1`; the last weight matrix
/// has a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

impl Network {
    pub fn new(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("network needs an output layer".into()));
        }
        if biases.len() + 1 != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weight layers need {} bias vectors, got {}",
                weights.len(),
                weights.len() - 1,
                biases.len()
            )));
        }
        for i in 1..weights.len() {
            if weights[i].ncols() != weights[i - 1].nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} expects {} inputs but layer {} outputs {}",
                    weights[i].ncols(),
                    i - 1,
                    weights[i - 1].nrows()
                )));
            }
        }
        for (i, b) in biases.iter().enumerate() {
            if b.len() != weights[i].nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "bias {i} has {} entries for {} neurons",
                    b.len(),
                    weights[i].nrows()
                )));
            }
        }
        let last = weights.last().expect("nonempty");
        if last.nrows() != 1 {
            return Err(Error::InvalidArgument(format!(
                "output layer must have one row, got {}",
                last.nrows()
            )));
        }
        if weights.iter().any(|w| w.iter().any(|x| !x.is_finite()))
            || biases.iter().any(|b| b.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    /// Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases
    /// zero. `layer_sizes` runs input..output, e.g. [3,5,5,1].
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_sizes needs at least input and output widths".into(),
            ));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidArgument("output width must be 1".into()));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::new();
        for i in 0..layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (layer_sizes[i], layer_sizes[i + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            // Row-major fill order keeps the layout independent of nalgebra's
            // internal storage order.
            let mut w = DMatrix::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    w[(r, c)] = dist.sample(&mut rng);
                }
            }
            weights.push(w);
            if i + 1 < layer_sizes.len() - 1 {
                biases.push(DVector::zeros(fan_out));
            }
        }
        Self::new(weights, biases, activation)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    /// Mutable parameter access for optimizers. Shapes must stay fixed;
    /// nothing re-validates them afterwards.
    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Layer widths input..output, the inverse of [`Network::init`]'s sizes.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(self.weights.iter().map(|w| w.nrows()));
        sizes
    }
}

/// Per-parameter gradients, shape-congruent with a network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .weights()
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: net
                .biases()
                .iter()
                .map(|b| DVector::zeros(b.len()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        let ws: f64 = self.weights.iter().map(|w| w.norm_squared()).sum();
        let bs: f64 = self.biases.iter().map(|b| b.norm_squared()).sum();
        (ws + bs).sqrt()
    }
}

fn check_input_width(net: &Network, inputs: &DMatrix<f64>) -> Result<()> {
    if inputs.ncols() != net.input_width() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            net.input_width()
        )));
    }
    Ok(())
}

/// Layer outputs of one forward pass: `activations[0]` is the input batch,
/// `activations[i]` the (post-activation) output of layer i-1, and the last
/// entry the linear network output column. Lets one forward pass serve both
/// the loss and the backward sweep.
pub struct ForwardTape {
    activations: Vec<DMatrix<f64>>,
}

/// Row-wise network evaluation over stacked inputs (N x N_theta), keeping
/// every layer output for a later [`backward_from_tape`].
pub fn forward_taped(net: &Network, inputs: &DMatrix<f64>) -> Result<(DVector<f64>, ForwardTape)> {
    check_input_width(net, inputs)?;
    let n_layers = net.weights.len();
    let mut activations: Vec<DMatrix<f64>> = Vec::with_capacity(n_layers + 1);
    activations.push(inputs.clone());
    for i in 0..n_layers {
        let mut z = activations.last().unwrap() * net.weights[i].transpose();
        if i < net.biases.len() {
            for mut row in z.row_iter_mut() {
                row += net.biases[i].transpose();
            }
        }
        if i + 1 < n_layers {
            z.apply(|x| *x = net.activation.apply(*x));
        }
        activations.push(z);
    }
    let output = activations.last().unwrap().column(0).clone_owned();
    Ok((output, ForwardTape { activations }))
}

/// Row-wise network evaluation over stacked inputs (N x N_theta).
pub fn forward(net: &Network, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(forward_taped(net, inputs)?.0)
}

/// Gradient of <cotangent, output> with respect to every parameter, reusing
/// the forward pass recorded in `tape`.
pub fn backward_from_tape(
    net: &Network,
    tape: &ForwardTape,
    cotangent: &DVector<f64>,
) -> Result<GradientSet> {
    let n_layers = net.weights.len();
    if tape.activations.len() != n_layers + 1 {
        return Err(Error::DimensionMismatch(format!(
            "tape has {} layer outputs, network has {} layers",
            tape.activations.len().saturating_sub(1),
            n_layers
        )));
    }
    if cotangent.len() != tape.activations[0].nrows() {
        return Err(Error::DimensionMismatch(format!(
            "cotangent length {} vs {} input rows",
            cotangent.len(),
            tape.activations[0].nrows()
        )));
    }
    let mut grad = GradientSet::zeros_like(net);
    // delta starts as the cotangent against the (linear) output layer.
    let mut delta: DMatrix<f64> = DMatrix::from_column_slice(cotangent.len(), 1, cotangent.as_slice());
    for i in (0..n_layers).rev() {
        grad.weights[i] = delta.tr_mul(&tape.activations[i]);
        if i < net.biases.len() {
            let mut bias_grad = DVector::zeros(net.biases[i].len());
            for row in delta.row_iter() {
                bias_grad += row.transpose();
            }
            grad.biases[i] = bias_grad;
        }
        if i > 0 {
            let mut back = &delta * &net.weights[i];
            back.zip_apply(&tape.activations[i], |b, a| {
                *b *= net.activation.slope_from_output(a)
            });
            delta = back;
        }
    }
    Ok(grad)
}

/// Gradient of <cotangent, forward(net, inputs)> with respect to every
/// parameter, by reverse-mode accumulation over the batch.
pub fn backward(net: &Network, inputs: &DMatrix<f64>, cotangent: &DVector<f64>) -> Result<GradientSet> {
    let (_, tape) = forward_taped(net, inputs)?;
    backward_from_tape(net, &tape, cotangent)
}

/// Collapses an identity-activation network to its exact affine form
/// (W, b) with forward(net, X) = X*W^T + b.
pub fn collapse_affine(net: &Network) -> Result<(RowDVector<f64>, f64)> {
    if net.activation != Activation::Identity {
        return Err(Error::InvalidArgument(format!(
            "affine collapse requires identity activation, network uses {}",
            net.activation
        )));
    }
    let mut w = net.weights[0].clone();
    let mut b = DVector::zeros(net.weights[0].nrows());
    if !net.biases.is_empty() {
        b = net.biases[0].clone();
    }
    for i in 1..net.weights.len() {
        w = &net.weights[i] * w;
        b = &net.weights[i] * b;
        if i < net.biases.len() {
            b += &net.biases[i];
        }
    }
    Ok((w.row(0).clone_owned(), b[0]))
}

/// Two-parameter ReLU construction exposing the plain least-squares
/// degeneracy: for references with positive position and velocity,
/// theta = [c0 + c1, 0] with network output -c1*r cancels to c0*r for
/// every c1, so every family member produces the same filter.
pub fn construct_cancellation_pair(c1_free: f64, c0: f64) -> Result<(LinearModel, Network)> {
    let theta = LinearModel::from_slice(&[c0 + c1_free, 0.0])?;
    let w0 = DMatrix::identity(2, 2);
    let b0 = DVector::zeros(2);
    let w1 = DMatrix::from_row_slice(1, 2, &[-c1_free, 0.0]);
    let net = Network::new(vec![w0, w1], vec![b0], Activation::Relu)?;
    Ok((theta, net))
}

/// Serialized network form: nested arrays in row-major layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub activation: String,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkCheckpoint {
    pub fn from_network(net: &Network) -> Self {
        Self {
            activation: net.activation().to_string(),
            weights: net
                .weights()
                .iter()
                .map(|w| {
                    (0..w.nrows())
                        .map(|r| w.row(r).iter().copied().collect())
                        .collect()
                })
                .collect(),
            biases: net.biases().iter().map(|b| b.as_slice().to_vec()).collect(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        let activation: Activation = self.activation.parse()?;
        let mut weights = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let rows = w.len();
            let cols = w.first().map(|r| r.len()).unwrap_or(0);
            if rows == 0 || cols == 0 || w.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidArgument(
                    "ragged or empty weight matrix in checkpoint".into(),
                ));
            }
            let flat: Vec<f64> = w.iter().flatten().copied().collect();
            weights.push(DMatrix::from_row_slice(rows, cols, &flat));
        }
        let biases = self
            .biases
            .iter()
            .map(|b| DVector::from_column_slice(b))
            .collect();
        Network::new(weights, biases, activation)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{}\n", serde_json::to_string_pretty(self)?))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// ─── Tests ──────────────────────────────────────────────────────────────────
