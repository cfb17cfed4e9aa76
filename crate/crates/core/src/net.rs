//! Two-stream fully connected networks trained with the slow-feature trace
//! loss `tr[(B⁻¹A)²]`, with hand-written gradients and backpropagation.
//!
//! Feature matrices are `features × samples`: every column is one pixel.
//! Centering always removes the per-feature mean over the samples.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::debug;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, spd_solve, SquareMatrix};
use crate::raster::{ensure_parent, raster_paths, PixelMatrix};
use crate::sfa::{fit_sfa, transform_diff, SfaModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_at_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::InvalidParameter(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `h_out × h_in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// Parameters of one stream. The activation follows every layer, the
/// output layer included.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub activation: Activation,
}

impl NetworkParams {
    pub fn new(layers: Vec<LayerParams>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.nrows() {
                return Err(Error::shape(format!(
                    "layer {i}: bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.weights.nrows()
                )));
            }
            if i > 0 && layers[i - 1].weights.nrows() != layer.weights.ncols() {
                return Err(Error::shape(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    layer.weights.ncols(),
                    i - 1,
                    layers[i - 1].weights.nrows()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    /// Layer sizes from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weights.nrows()))
            .collect()
    }

    /// `self ← self − step · grads`.
    pub fn descend(&mut self, grads: &[LayerParams], step: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.weights.scaled_add(-step, &g.weights);
            layer.bias.scaled_add(-step, &g.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    /// Output features; `None` uses the input band count.
    pub out_dim: Option<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub reg_r: f64,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![128, 128],
            out_dim: None,
            learning_rate: 1e-4,
            max_epochs: 2000,
            reg_r: 1e-4,
            seed: 0,
            activation: Activation::Tanh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) || self.out_dim == Some(0) {
            return Err(Error::InvalidParameter("layer sizes must be positive".into()));
        }
        if !(self.reg_r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "regularization r must be positive, got {}",
                self.reg_r
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParameter("max_epochs must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_sizes);
        dims.push(self.out_dim.unwrap_or(input_dim));
        dims
    }
}

/// Glorot-uniform weights and zero biases for both streams, drawn in
/// sequence from one seeded generator.
pub fn init_params(config: &TrainConfig, input_dim: usize) -> Result<(NetworkParams, NetworkParams)> {
    config.validate()?;
    if input_dim == 0 {
        return Err(Error::InvalidParameter("input dimension must be positive".into()));
    }
    let dims = config.layer_dims(input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stream = || {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (h_in, h_out) = (w[0], w[1]);
                let bound = (6.0 / (h_in + h_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                LayerParams {
                    weights: Array2::from_shape_fn((h_out, h_in), |_| dist.sample(&mut rng)),
                    bias: Array1::zeros(h_out),
                }
            })
            .collect();
        NetworkParams::new(layers, config.activation)
    };
    let theta1 = stream()?;
    let theta2 = stream()?;
    Ok((theta1, theta2))
}

/// Activations of every layer; `activations[0]` is the input and the last
/// entry the network output.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("input is always present")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().expect("input is always present")
    }
}

pub fn forward(theta: &NetworkParams, x: &PixelMatrix) -> Result<ForwardPass> {
    if x.nrows() != theta.input_dim() {
        return Err(Error::shape(format!(
            "network expects {} input bands, got {}",
            theta.input_dim(),
            x.nrows()
        )));
    }
    let act = theta.activation;
    let mut activations = Vec::with_capacity(theta.layers.len() + 1);
    activations.push(x.clone());
    for layer in &theta.layers {
        let prev = activations.last().expect("non-empty");
        let mut z = layer.weights.dot(prev);
        z += &layer.bias.view().insert_axis(Axis(1));
        z.mapv_inplace(|v| act.apply(v));
        activations.push(z);
    }
    Ok(ForwardPass { activations })
}

/// Subtracts each row's mean over the samples: `X (I − 𝟙𝟙ᵀ/n)`.
pub fn center(x: &PixelMatrix) -> Result<PixelMatrix> {
    let n = x.ncols();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean = x.mean_axis(Axis(1)).expect("n >= 2");
    Ok(x - &mean.insert_axis(Axis(1)))
}

#[derive(Debug, Clone)]
pub struct CovTriple {
    pub sigma_xx: SquareMatrix,
    pub sigma_yy: SquareMatrix,
    pub sigma_xy: SquareMatrix,
}

impl CovTriple {
    /// `A_φ = Σ_XY`.
    pub fn a(&self) -> SquareMatrix {
        self.sigma_xy.clone()
    }

    /// `B_φ = (Σ_XX + Σ_YY) / 2`.
    pub fn b(&self) -> SquareMatrix {
        (&self.sigma_xx + &self.sigma_yy) * 0.5
    }
}

fn symmetric(m: Array2<f64>) -> Array2<f64> {
    (&m + &m.t()) * 0.5
}

/// Regularized covariances of centered features (1/n scaling).
pub fn covariances(xc: &PixelMatrix, yc: &PixelMatrix, r: f64) -> Result<CovTriple> {
    if xc.dim() != yc.dim() {
        return Err(Error::shape(format!(
            "feature matrices differ: {:?} vs {:?}",
            xc.dim(),
            yc.dim()
        )));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("r must be positive, got {r}")));
    }
    let n = xc.ncols() as f64;
    let ridge = Array2::<f64>::eye(xc.nrows()) * r;
    let diff = xc - yc;
    Ok(CovTriple {
        sigma_xx: symmetric(xc.dot(&xc.t()) / n) + &ridge,
        sigma_yy: symmetric(yc.dot(&yc.t()) / n) + &ridge,
        sigma_xy: symmetric(diff.dot(&diff.t()) / n),
    })
}

/// `tr[(B_φ⁻¹ A_φ)²]`.
pub fn dsfa_loss(xc: &PixelMatrix, yc: &PixelMatrix, r: f64) -> Result<f64> {
    let cov = covariances(xc, yc, r)?;
    let m = spd_solve(&cov.b(), &cov.a())?;
    Ok(trace_of_square(&m))
}

fn trace_of_square(m: &Array2<f64>) -> f64 {
    (m * &m.t()).sum()
}

/// Loss together with its gradients with respect to the centered features.
pub fn loss_and_feature_grad(
    xc: &PixelMatrix,
    yc: &PixelMatrix,
    r: f64,
) -> Result<(f64, PixelMatrix, PixelMatrix)> {
    let cov = covariances(xc, yc, r)?;
    let n = xc.ncols() as f64;
    let a = cov.a();
    let b_inv = spd_inverse(&cov.b())?;
    let b_inv_a = b_inv.dot(&a);
    let loss = trace_of_square(&b_inv_a);
    // ∇_A = 2 B⁻¹AB⁻¹, ∇_B = −2 B⁻¹AB⁻¹AB⁻¹.
    let p = symmetric(b_inv_a.dot(&b_inv));
    let grad_a = &p * 2.0;
    let grad_b = symmetric(p.dot(&a).dot(&b_inv)) * -2.0;
    let diff = xc - yc;
    let shared = grad_a.dot(&diff) * (2.0 / n);
    let gx = &shared + &(grad_b.dot(xc) / n);
    let gy = grad_b.dot(yc) / n - &shared;
    Ok((loss, gx, gy))
}

pub fn loss_feature_grad(xc: &PixelMatrix, yc: &PixelMatrix, r: f64) -> Result<(PixelMatrix, PixelMatrix)> {
    loss_and_feature_grad(xc, yc, r).map(|(_, gx, gy)| (gx, gy))
}

/// Backpropagates `grad_out` (gradient w.r.t. the network output) through
/// the cached forward pass.
pub fn backprop(theta: &NetworkParams, pass: &ForwardPass, grad_out: &Array2<f64>) -> Vec<LayerParams> {
    let act = theta.activation;
    let mut grads = Vec::with_capacity(theta.layers.len());
    let mut g = grad_out.clone();
    for (l, layer) in theta.layers.iter().enumerate().rev() {
        let out = &pass.activations[l + 1];
        ndarray::Zip::from(&mut g)
            .and(out)
            .for_each(|g, &a| *g *= act.derivative_at_output(a));
        let input = &pass.activations[l];
        grads.push(LayerParams {
            weights: g.dot(&input.t()),
            bias: g.sum_axis(Axis(1)),
        });
        if l > 0 {
            g = layer.weights.t().dot(&g);
        }
    }
    grads.reverse();
    grads
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub theta1: Vec<LayerParams>,
    pub theta2: Vec<LayerParams>,
    pub loss: f64,
}

/// Full parameter gradients of the loss for both streams.
pub fn param_grads(
    theta1: &NetworkParams,
    theta2: &NetworkParams,
    x: &PixelMatrix,
    y: &PixelMatrix,
    r: f64,
) -> Result<ParamGrads> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!(
            "training pairs differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if theta1.output_dim() != theta2.output_dim() {
        return Err(Error::shape("streams have different output dimensions"));
    }
    let pass1 = forward(theta1, x)?;
    let pass2 = forward(theta2, y)?;
    let xc = center(pass1.output())?;
    let yc = center(pass2.output())?;
    let (loss, gx, gy) = loss_and_feature_grad(&xc, &yc, r)?;
    // The centering map is symmetric and idempotent, so its adjoint is itself.
    let gx = center(&gx)?;
    let gy = center(&gy)?;
    Ok(ParamGrads {
        theta1: backprop(theta1, &pass1, &gx),
        theta2: backprop(theta2, &pass2, &gy),
        loss,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub theta1: NetworkParams,
    pub theta2: NetworkParams,
    /// Loss evaluated before each update.
    pub loss_history: Vec<f64>,
}

/// Full-batch gradient descent on the training pairs.
pub fn train(xs: &PixelMatrix, ys: &PixelMatrix, config: &TrainConfig) -> Result<TrainedPair> {
    let (mut theta1, mut theta2) = init_params(config, xs.nrows())?;
    let mut loss_history = Vec::with_capacity(config.max_epochs);
    for epoch in 0..config.max_epochs {
        let grads = param_grads(&theta1, &theta2, xs, ys, config.reg_r)?;
        if !grads.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: grads.loss,
            });
        }
        if epoch % 100 == 0 {
            debug!("epoch {epoch}: loss {:.6}", grads.loss);
        }
        loss_history.push(grads.loss);
        theta1.descend(&grads.theta1, config.learning_rate);
        theta2.descend(&grads.theta2, config.learning_rate);
        if !(theta1.is_finite() && theta2.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: grads.loss,
            });
        }
    }
    Ok(TrainedPair {
        theta1,
        theta2,
        loss_history,
    })
}

/// Maps both scenes through the trained streams, fits SFA on the centered
/// full-scene features and returns the projected difference `D_φ` (o × n).
pub fn project_dsfa(
    theta1: &NetworkParams,
    theta2: &NetworkParams,
    x: &PixelMatrix,
    y: &PixelMatrix,
) -> Result<PixelMatrix> {
    project_dsfa_with_model(theta1, theta2, x, y).map(|(d, _)| d)
}

pub fn project_dsfa_with_model(
    theta1: &NetworkParams,
    theta2: &NetworkParams,
    x: &PixelMatrix,
    y: &PixelMatrix,
) -> Result<(PixelMatrix, SfaModel)> {
    let xc = center(&forward(theta1, x)?.into_output())?;
    let yc = center(&forward(theta2, y)?.into_output())?;
    let model = fit_sfa(&xc, &yc, None)?;
    let d = transform_diff(&model, &xc, &yc)?;
    Ok((d, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Layer sizes from input to output (shared by both streams).
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub epoch: usize,
    pub dtype: String,
}

/// Writes `<stem>.json` plus `<stem>.bin` holding little-endian `f64`
/// parameters: stream 1 then stream 2, each layer's weights (row-major)
/// followed by its bias.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    theta1: &NetworkParams,
    theta2: &NetworkParams,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    if theta1.dims() != theta2.dims() || theta1.activation != theta2.activation {
        return Err(Error::shape("streams must share an architecture"));
    }
    let (manifest_path, payload_path) = raster_paths(path.as_ref());
    ensure_parent(&manifest_path)?;
    let manifest = CheckpointManifest {
        dims: theta1.dims(),
        activation: theta1.activation,
        seed,
        epoch,
        dtype: "f64".into(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let mut payload = Vec::new();
    for theta in [theta1, theta2] {
        for layer in &theta.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointManifest, NetworkParams, NetworkParams)> {
    let (manifest_path, payload_path) = raster_paths(path.as_ref());
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.dims.len() < 2 || manifest.dims.contains(&0) {
        return Err(Error::Header {
            path: manifest_path,
            reason: "checkpoint needs at least two positive layer sizes".into(),
        });
    }
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let per_stream: usize = manifest.dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
    if bytes.len() != per_stream * 2 * 8 {
        return Err(Error::SizeMismatch {
            expected: per_stream * 16,
            found: bytes.len(),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut stream = || {
        let layers = manifest
            .dims
            .windows(2)
            .map(|w| {
                let weights = Array2::from_shape_fn((w[1], w[0]), |_| values.next().unwrap());
                let bias = Array1::from_shape_fn(w[1], |_| values.next().unwrap());
                LayerParams { weights, bias }
            })
            .collect();
        NetworkParams::new(layers, manifest.activation)
    };
    let theta1 = stream()?;
    let theta2 = stream()?;
    Ok((manifest, theta1, theta2))
}
