//! The GCN graph classifier: analytic forward and backward passes.
//!
//! The backward pass is not autodiff. Gradients are computed through the
//! closed-form recursion
//!
//! ```text
//! grad W_i = H_{i-1}^T r_i
//! r_l      = Abar^T (M_p^T (dL/dY) W_fc  ⊙ relu'_l)
//! r_i      = Abar^T (r_{i+1} W_{i+1}^T   ⊙ relu'_i)      i < l
//! ```
//!
//! which is exactly the structure the gradient-leakage attack inverts, so the
//! finite-difference suite that validates this module doubles as a numerical
//! proof of the recursion.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::linalg::Matrix;
use crate::rng::sample_laplace;

/// Readout that collapses node embeddings to one graph embedding.
///
/// Sum and mean are exact matrix poolings (an all-ones row, scaled). Max is
/// approximated by `log-sum-exp / K`, which approaches the exact max as the
/// sharpness `K` grows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingDescriptor {
    Sum,
    Mean,
    MaxLogSumExp { sharpness: u32 },
}

impl PoolingDescriptor {
    /// Default sharpness keeps the max approximation below 1e-3 error on
    /// unit-scale inputs.
    pub const DEFAULT_MAX_SHARPNESS: u32 = 50;

    /// The explicit `1 x n` pooling matrix for sum/mean readout. For max
    /// pooling this is the sum-pooling mask, which is the matrix part of the
    /// log-sum-exp composition.
    pub fn pooling_matrix(&self, node_count: usize) -> Matrix {
        let value = match self {
            PoolingDescriptor::Mean => 1.0 / node_count as f64,
            _ => 1.0,
        };
        Matrix::from_fn(1, node_count, |_, _| value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "sum" => Ok(PoolingDescriptor::Sum),
            "mean" => Ok(PoolingDescriptor::Mean),
            "max" => Ok(PoolingDescriptor::MaxLogSumExp {
                sharpness: Self::DEFAULT_MAX_SHARPNESS,
            }),
            other => {
                if let Some(k) = other.strip_prefix("max:") {
                    let sharpness = k
                        .parse()
                        .map_err(|_| Error::Config(format!("bad max sharpness {k:?}")))?;
                    Ok(PoolingDescriptor::MaxLogSumExp { sharpness })
                } else {
                    Err(Error::Config(format!("unknown pooling {other:?}")))
                }
            }
        }
    }
}

impl std::fmt::Display for PoolingDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolingDescriptor::Sum => write!(f, "sum"),
            PoolingDescriptor::Mean => write!(f, "mean"),
            PoolingDescriptor::MaxLogSumExp { sharpness } => write!(f, "max:{sharpness}"),
        }
    }
}

/// A dense layer `y = W x + b` with `W: out x in`, `b: out x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.cols() != 1 || bias.rows() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias {}x{} for weight {}x{}",
                bias.rows(),
                bias.cols(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Apply to a column vector.
    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        self.weight.matmul(input)?.add(&self.bias)
    }
}

/// All learnable state of the graph classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// GCN weights `W_i: d_{i-1} x d_i`, input layer first.
    pub gcn_weights: Vec<Matrix>,
    /// Linear classifier head on the pooled embedding.
    pub classifier: LinearLayer,
    pub pooling: PoolingDescriptor,
}

impl ModelParams {
    pub fn layer_count(&self) -> usize {
        self.gcn_weights.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.gcn_weights[0].rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.gcn_weights.last().expect("at least one layer").cols()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gcn_weights.is_empty() {
            return Err(Error::Config("model needs at least one GCN layer".into()));
        }
        for (i, pair) in self.gcn_weights.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::Shape(format!(
                    "layer {} output dim {} feeds layer {} input dim {}",
                    i,
                    pair[0].cols(),
                    i + 1,
                    pair[1].rows()
                )));
            }
        }
        if self.classifier.weight.cols() != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "classifier expects dim {}, embedding is {}",
                self.classifier.weight.cols(),
                self.embedding_dim()
            )));
        }
        Ok(())
    }

    /// All tensors in a fixed order (GCN layers, classifier weight, bias);
    /// the order gradient bundles and optimizers use.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.gcn_weights.iter().collect();
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.gcn_weights.iter_mut().collect();
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }
}

/// Shape-only description of a model, used to initialize parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub gcn_layers: usize,
    pub classes: usize,
    pub pooling: PoolingDescriptor,
}

/// Glorot-uniform initialization; classifier bias starts at zero.
pub fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    if config.gcn_layers < 1 || config.classes < 2 || config.hidden_dim < 1 {
        return Err(Error::Config(format!("bad model config {config:?}")));
    }
    let mut dims = vec![config.feature_dim];
    dims.extend(std::iter::repeat(config.hidden_dim).take(config.gcn_layers));
    let mut gcn_weights = Vec::with_capacity(config.gcn_layers);
    for w in dims.windows(2) {
        gcn_weights.push(glorot(w[0], w[1], rng));
    }
    let params = ModelParams {
        gcn_weights,
        classifier: LinearLayer::new(
            glorot(config.classes, config.hidden_dim, rng),
            Matrix::zeros(config.classes, 1),
        )?,
        pooling: config.pooling,
    };
    params.validate()?;
    Ok(params)
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Everything the forward pass touches, kept for the analytic backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Pre-activations `Z_i`, one per GCN layer.
    pub pre_activations: Vec<Matrix>,
    /// `H_0 = X` through `H_l`; activation noise (if any) is already folded in.
    pub activations: Vec<Matrix>,
    /// ReLU derivative masks, 1 exactly where `Z_i > 0`.
    pub relu_masks: Vec<Matrix>,
    /// Pooled graph embedding, `1 x d_l`.
    pub pooled: Matrix,
    /// Class logits, `classes x 1`.
    pub logits: Matrix,
    pub loss: f64,
    pub label: usize,
}

/// Run the classifier on one graph and record the full trace.
pub fn forward(params: &ModelParams, graph: &Graph, label: usize) -> Result<ForwardTrace> {
    forward_impl(params, graph, label, None)
}

/// Forward pass that injects Laplace noise of the given scale into every GCN
/// layer output (the activation-noise defense).
pub fn forward_with_activation_noise(
    params: &ModelParams,
    graph: &Graph,
    label: usize,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    forward_impl(params, graph, label, Some((noise_scale, rng)))
}

fn forward_impl(
    params: &ModelParams,
    graph: &Graph,
    label: usize,
    mut noise: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<ForwardTrace> {
    params.validate()?;
    if graph.feature_dim() != params.feature_dim() {
        return Err(Error::Shape(format!(
            "graph features {} vs model input {}",
            graph.feature_dim(),
            params.feature_dim()
        )));
    }
    if label >= params.class_count() {
        return Err(Error::Config(format!(
            "label {label} outside {} classes",
            params.class_count()
        )));
    }
    let abar = normalize_adjacency(graph);

    let mut activations = vec![graph.node_features().clone()];
    let mut pre_activations = Vec::with_capacity(params.layer_count());
    let mut relu_masks = Vec::with_capacity(params.layer_count());
    for weight in &params.gcn_weights {
        let z = abar.matrix().matmul(activations.last().unwrap())?.matmul(weight)?;
        // Subgradient choice: relu'(0) = 0.
        relu_masks.push(z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        let mut h = z.map(|v| v.max(0.0));
        if let Some((scale, rng)) = noise.as_mut() {
            for v in h.data_mut() {
                *v += sample_laplace(rng, *scale);
            }
        }
        pre_activations.push(z);
        activations.push(h);
    }

    let pooled = pool(&params.pooling, activations.last().unwrap());
    let logits = params.classifier.apply(&pooled.transpose())?;
    let loss = cross_entropy(&logits, label);

    Ok(ForwardTrace {
        pre_activations,
        activations,
        relu_masks,
        pooled,
        logits,
        loss,
        label,
    })
}

/// Pooled embedding of a graph under the model's frozen GCN layers. This is
/// the encoder half of the structure-recovery auto-encoder.
pub fn pooled_embedding(params: &ModelParams, graph: &Graph) -> Result<Matrix> {
    let trace = forward(params, graph, 0)?;
    Ok(trace.pooled)
}

fn pool(pooling: &PoolingDescriptor, h: &Matrix) -> Matrix {
    let (n, d) = h.shape();
    match *pooling {
        PoolingDescriptor::Sum | PoolingDescriptor::Mean => {
            let scale = if matches!(pooling, PoolingDescriptor::Mean) { 1.0 / n as f64 } else { 1.0 };
            let mut out = Matrix::zeros(1, d);
            for i in 0..n {
                for (o, &v) in out.row_mut(0).iter_mut().zip(h.row(i).iter()) {
                    *o += v * scale;
                }
            }
            out
        }
        PoolingDescriptor::MaxLogSumExp { sharpness } => {
            let k = sharpness as f64;
            let mut out = Matrix::zeros(1, d);
            for j in 0..d {
                // Shifted log-sum-exp for overflow safety.
                let m = (0..n).map(|i| h[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..n).map(|i| ((h[(i, j)] - m) * k).exp()).sum();
                out[(0, j)] = m + sum.ln() / k;
            }
            out
        }
    }
}

/// Numerically stable `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Matrix, label: usize) -> f64 {
    let max = logits.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[(label, 0)]
}

/// `softmax(logits) - onehot(label)`, the logit gradient of the loss.
pub fn logit_gradient(logits: &Matrix, label: usize) -> Matrix {
    let max = logits.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut g = Matrix::zeros(logits.rows(), 1);
    for (i, e) in exps.iter().enumerate() {
        g[(i, 0)] = e / total - if i == label { 1.0 } else { 0.0 };
    }
    g
}

/// Per-parameter gradients as shared by a federation client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub grad_gcn: Vec<Matrix>,
    pub grad_fc: Matrix,
    pub grad_b: Matrix,
    pub batch_size: usize,
    pub defense_tag: String,
}

impl GradientBundle {
    pub fn same_shape(&self, other: &GradientBundle) -> bool {
        self.grad_gcn.len() == other.grad_gcn.len()
            && self
                .grad_gcn
                .iter()
                .zip(other.grad_gcn.iter())
                .all(|(a, b)| a.shape() == b.shape())
            && self.grad_fc.shape() == other.grad_fc.shape()
            && self.grad_b.shape() == other.grad_b.shape()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.grad_gcn.iter().collect();
        out.push(&self.grad_fc);
        out.push(&self.grad_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.grad_gcn.iter_mut().collect();
        out.push(&mut self.grad_fc);
        out.push(&mut self.grad_b);
        out
    }

    pub fn entry_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.is_zero())
    }

    pub fn map(&self, f: impl Fn(&Matrix) -> Matrix) -> GradientBundle {
        GradientBundle {
            grad_gcn: self.grad_gcn.iter().map(&f).collect(),
            grad_fc: f(&self.grad_fc),
            grad_b: f(&self.grad_b),
            batch_size: self.batch_size,
            defense_tag: self.defense_tag.clone(),
        }
    }
}

/// Exact gradients for the trace via the closed-form layer recursion.
pub fn backward_analytic(
    trace: &ForwardTrace,
    params: &ModelParams,
    graph: &Graph,
) -> Result<GradientBundle> {
    backward_impl(trace, params, graph, false)
}

/// Variant of [`backward_analytic`] with the sign of the layer-recursion term
/// flipped. Produces deliberately wrong gradients; the verification suite
/// uses it as a negative control to prove the finite-difference check bites.
pub fn backward_analytic_sign_faulted(
    trace: &ForwardTrace,
    params: &ModelParams,
    graph: &Graph,
) -> Result<GradientBundle> {
    backward_impl(trace, params, graph, true)
}

fn backward_impl(
    trace: &ForwardTrace,
    params: &ModelParams,
    graph: &Graph,
    flip_recursion_sign: bool,
) -> Result<GradientBundle> {
    params.validate()?;
    let layers = params.layer_count();
    if trace.activations.len() != layers + 1 || trace.relu_masks.len() != layers {
        return Err(Error::Shape("trace does not match model depth".into()));
    }
    let abar = normalize_adjacency(graph);
    let n = graph.node_count();

    // Classifier head: grad W_fc = g h, grad W_b = g.
    let g = logit_gradient(&trace.logits, trace.label);
    let grad_fc = g.matmul(&trace.pooled)?;
    let grad_b = g.clone();

    // dL/dH_l depends on the pooling readout.
    let g_row_wfc = g.transpose_matmul(&params.classifier.weight)?; // 1 x d_l
    let h_l = trace.activations.last().unwrap();
    let d_l = h_l.cols();
    let grad_h = match params.pooling {
        PoolingDescriptor::Sum | PoolingDescriptor::Mean => {
            let m_p = params.pooling.pooling_matrix(n);
            m_p.transpose().matmul(&g_row_wfc)?
        }
        PoolingDescriptor::MaxLogSumExp { sharpness } => {
            // Each pooled coordinate is a softmax-weighted mixture over nodes.
            let k = sharpness as f64;
            let mut grad = Matrix::zeros(n, d_l);
            for j in 0..d_l {
                let m = (0..n).map(|i| h_l[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = (0..n).map(|i| ((h_l[(i, j)] - m) * k).exp()).collect();
                let total: f64 = weights.iter().sum();
                for i in 0..n {
                    grad[(i, j)] = g_row_wfc[(0, j)] * weights[i] / total;
                }
            }
            grad
        }
    };

    // r_l, then the recursion downward.
    let sign = if flip_recursion_sign { -1.0 } else { 1.0 };
    let mut grad_gcn = vec![Matrix::zeros(0, 0); layers];
    let mut r = abar
        .matrix()
        .transpose_matmul(&grad_h.hadamard(&trace.relu_masks[layers - 1])?)?;
    grad_gcn[layers - 1] = trace.activations[layers - 1].transpose_matmul(&r)?;
    for i in (0..layers - 1).rev() {
        let back = r.matmul_transpose(&params.gcn_weights[i + 1])?;
        r = abar
            .matrix()
            .transpose_matmul(&back.hadamard(&trace.relu_masks[i])?)?
            .scale(sign);
        grad_gcn[i] = trace.activations[i].transpose_matmul(&r)?;
    }

    Ok(GradientBundle {
        grad_gcn,
        grad_fc,
        grad_b,
        batch_size: 1,
        defense_tag: "none".to_string(),
    })
}

/// Element-wise mean of shape-identical bundles; batch sizes add up.
pub fn average_batch(bundles: &[GradientBundle]) -> Result<GradientBundle> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Config("cannot average an empty batch".into()))?;
    if bundles.iter().any(|b| !first.same_shape(b)) {
        return Err(Error::Shape("bundles in a batch must share shapes".into()));
    }
    let mut out = first.clone();
    out.batch_size = bundles.iter().map(|b| b.batch_size).sum();
    let scale = 1.0 / bundles.len() as f64;
    let slots = out.tensors().len();
    for slot in 0..slots {
        let mut acc = bundles[0].tensors()[slot].clone();
        for b in &bundles[1..] {
            acc.add_scaled_in_place(b.tensors()[slot], 1.0)?;
        }
        *out.tensors_mut()[slot] = acc.scale(scale);
    }
    Ok(out)
}
