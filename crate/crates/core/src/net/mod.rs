//! Feed-forward networks with dense and low-rank layers, hand-written backprop.
//!
//! Samples are rows: a batch input is `batch × n₀` and layer `l` maps
//! `Z ↦ σ(Z Wᵀ)`. Biases are not modeled separately; append a ones column
//! to the inputs (see [`append_bias_column`]) to fold them into the weights.

mod data;
mod gradcheck;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::{reconstruct, LowRankFactors};

pub use data::{append_bias_column, gen_matrix_recovery, gen_two_class, split};
pub use gradcheck::finite_difference_check;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `z`.
    fn derivative(self, a: f64, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z * z,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { w: Matrix, act: Activation },
    LowRank { f: LowRankFactors, act: Activation },
}

impl Layer {
    pub fn n_in(&self) -> usize {
        match self {
            Layer::Dense { w, .. } => w.cols(),
            Layer::LowRank { f, .. } => f.n_in(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Layer::Dense { w, .. } => w.rows(),
            Layer::LowRank { f, .. } => f.n_out(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense { act, .. } | Layer::LowRank { act, .. } => *act,
        }
    }

    /// `None` for dense layers.
    pub fn rank(&self) -> Option<usize> {
        match self {
            Layer::Dense { .. } => None,
            Layer::LowRank { f, .. } => Some(f.rank()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { w, .. } => w.rows() * w.cols(),
            Layer::LowRank { f, .. } => f.param_count(),
        }
    }

    pub fn weight(&self) -> Result<Matrix> {
        match self {
            Layer::Dense { w, .. } => Ok(w.clone()),
            Layer::LowRank { f, .. } => reconstruct(f),
        }
    }

    /// `Z Wᵀ`; low-rank layers go through `V`, `Sᵀ`, `Uᵀ` in turn.
    fn linear(&self, z: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Dense { w, .. } => z.matmul_t(w),
            Layer::LowRank { f, .. } => z.matmul(&f.v)?.matmul_t(&f.s)?.matmul_t(&f.u),
        }
    }

    /// `D W`, the gradient passed to the previous layer.
    fn back_linear(&self, d: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Dense { w, .. } => d.matmul(w),
            Layer::LowRank { f, .. } => d.matmul(&f.u)?.matmul(&f.s)?.matmul_t(&f.v),
        }
    }
}

/// Ordered stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].n_in() != pair[0].n_out() {
                return Err(Error::shape(
                    "Network::new",
                    format!(
                        "layer {} expects {} inputs but layer {} has {} outputs",
                        l + 1,
                        pair[1].n_in(),
                        l,
                        pair[0].n_out()
                    ),
                ));
            }
        }
        Ok(Network { layers })
    }

    /// Dense layers with entries `N(0, scale²/n_in)`; `dims` lists `n₀, n₁, …, n_L`.
    pub fn dense_random<R: Rng + ?Sized>(
        dims: &[usize],
        acts: &[Activation],
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 {
            return Err(Error::Argument(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                acts.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(d, &act)| Layer::Dense {
                w: Matrix::random_normal(d[1], d[0], scale / (d[0] as f64).sqrt(), rng),
                act,
            })
            .collect();
        Network::new(layers)
    }

    /// Replace every dense layer by its truncated SVD of rank `min(rank, n_out, n_in)`.
    pub fn factorized(&self, rank: usize) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { w, act } => {
                    let r = rank.min(w.rows()).min(w.cols());
                    Ok(Layer::LowRank {
                        f: LowRankFactors::from_dense(w, r)?,
                        act: *act,
                    })
                }
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameter count with every layer stored dense.
    pub fn dense_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.n_in() * l.n_out()).sum()
    }

    /// Ranks of the low-rank layers, in order.
    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().filter_map(Layer::rank).collect()
    }

    /// Pre-activations and outputs of every layer.
    fn forward_trace(&self, inputs: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {} features, network expects {}",
                    inputs.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = out.last().unwrap_or(inputs);
            let a = layer.linear(z)?;
            let act = layer.activation();
            out.push(a.map(|x| act.apply(x)));
            pre.push(a);
        }
        Ok((pre, out))
    }
}

/// Network output for `inputs` (`batch × n₀`).
pub fn forward(net: &Network, inputs: &Matrix) -> Result<Matrix> {
    let (_, mut out) = net.forward_trace(inputs)?;
    Ok(out.pop().expect("network is non-empty"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Matrix),
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        let n = match &targets {
            Targets::Values(m) => m.rows(),
            Targets::Labels(l) => l.len(),
        };
        if n != inputs.rows() {
            return Err(Error::shape(
                "Batch::new",
                format!("{} inputs but {} targets", inputs.rows(), n),
            ));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let targets = match &self.targets {
            Targets::Values(m) => Targets::Values(m.select_rows(idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        };
        Batch {
            inputs: self.inputs.select_rows(idx),
            targets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// `(1/2B) Σ ‖output − target‖²`
    Mse,
    /// Mean negative log-likelihood of the labels under softmax of the outputs.
    SoftmaxCrossEntropy,
    /// `½‖W − A‖_F²` on the weight of a single identity layer; the batch is ignored.
    QuadraticMatrixRecovery(Matrix),
}

/// Loss and `∂L/∂output`.
fn loss_and_seed(out: &Matrix, targets: &Targets, loss: &LossKind) -> Result<(f64, Matrix)> {
    let b = out.rows().max(1) as f64;
    match (loss, targets) {
        (LossKind::Mse, Targets::Values(y)) => {
            let d = out.sub(y)?;
            let n = d.frobenius_norm();
            Ok((0.5 * n * n / b, d.scale(1.0 / b)))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
            let mut seed = Matrix::zeros(out.rows(), out.cols());
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= out.cols() {
                    return Err(Error::Argument(format!(
                        "label {label} out of range for {} classes",
                        out.cols()
                    )));
                }
                let row = out.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                total += lse - row[label];
                for (j, &x) in row.iter().enumerate() {
                    let p = (x - lse).exp();
                    seed[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) / b;
                }
            }
            Ok((total / b, seed))
        }
        (LossKind::Mse, Targets::Labels(_)) => {
            Err(Error::Argument("MSE needs value targets".into()))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Values(_)) => {
            Err(Error::Argument("cross-entropy needs label targets".into()))
        }
        (LossKind::QuadraticMatrixRecovery(_), _) => unreachable!("handled by the caller"),
    }
}

fn recovery_layer<'a>(net: &'a Network, a: &Matrix) -> Result<&'a Layer> {
    match net.layers() {
        [layer] if layer.activation() == Activation::Identity => {
            if (layer.n_out(), layer.n_in()) != a.shape() {
                return Err(Error::shape(
                    "matrix recovery",
                    format!(
                        "weight {}x{} vs target {:?}",
                        layer.n_out(),
                        layer.n_in(),
                        a.shape()
                    ),
                ));
            }
            Ok(layer)
        }
        _ => Err(Error::Argument(
            "matrix recovery loss needs a single identity layer".into(),
        )),
    }
}

/// Loss value only.
pub fn loss_value(net: &Network, batch: &Batch, loss: &LossKind) -> Result<f64> {
    if let LossKind::QuadraticMatrixRecovery(a) = loss {
        let d = recovery_layer(net, a)?.weight()?.sub(a)?.frobenius_norm();
        return Ok(0.5 * d * d);
    }
    let out = forward(net, &batch.inputs)?;
    let (l, _) = loss_and_seed(&out, &batch.targets, loss)?;
    if !l.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(l)
}

/// Loss and the full-shape weight gradient `∇_W L` of every layer.
pub fn backward(net: &Network, batch: &Batch, loss: &LossKind) -> Result<(f64, Vec<Matrix>)> {
    if let LossKind::QuadraticMatrixRecovery(a) = loss {
        let g = recovery_layer(net, a)?.weight()?.sub(a)?;
        g.ensure_finite("gradient")?;
        let d = g.frobenius_norm();
        return Ok((0.5 * d * d, vec![g]));
    }
    let (pre, out) = net.forward_trace(&batch.inputs)?;
    let last = out.last().expect("network is non-empty");
    last.ensure_finite("network output")?;
    let (value, mut d) = loss_and_seed(last, &batch.targets, loss)?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }

    let mut grads = vec![Matrix::zeros(0, 0); net.len()];
    for l in (0..net.len()).rev() {
        let layer = &net.layers[l];
        let act = layer.activation();
        let slope = pre[l].zip_map(&out[l], "backward", |a, z| act.derivative(a, z))?;
        let delta = d.hadamard(&slope)?;
        let z_prev = if l == 0 { &batch.inputs } else { &out[l - 1] };
        let g = delta.t_matmul(z_prev)?;
        g.ensure_finite("gradient")?;
        grads[l] = g;
        if l > 0 {
            d = layer.back_linear(&delta)?;
        }
    }
    Ok((value, grads))
}

/// Fraction of rows whose arg-max output equals the label.
pub fn accuracy(net: &Network, batch: &Batch) -> Result<f64> {
    let labels = match &batch.targets {
        Targets::Labels(l) => l,
        Targets::Values(_) => return Err(Error::Argument("accuracy needs label targets".into())),
    };
    if labels.is_empty() {
        return Ok(0.0);
    }
    let out = forward(net, &batch.inputs)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = out.row(*i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            best == label
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
