//! Reconstruction of private graphs from shared gradients.
//!
//! Three stages, each usable on its own:
//!
//! 1. [`extract_embedding`]: the pooled graph embedding falls out of the
//!    classifier gradients by a single division (row of `grad_fc` over the
//!    matching `grad_b` entry), exactly for undefended batch-1 bundles.
//! 2. [`train_structure_decoder`] / [`recover_structure`]: an auto-encoder
//!    whose encoder is the frozen federation model maps embeddings back to
//!    adjacency matrices. Auxiliary graphs train the decoder; an embedding
//!    -space adapter compensates when auxiliaries are distributed unlike the
//!    victim's data.
//! 3. [`recover_features`]: with an adjacency estimate in hand, node features
//!    follow from the layer-wise gradient recursion by solving one
//!    minimum-norm least-squares system per GCN layer, deepest first.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency_matrix, Graph};
use crate::linalg::{solve_min_norm_rcond, Matrix, DEFAULT_RCOND};
use crate::nn::{glorot, pooled_embedding, GradientBundle, LinearLayer, ModelParams};
use crate::opt::{adam_step, AdamConfig, AdamState};

/// Pooled embedding recovered from classifier gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakedEmbedding {
    /// `1 x d_l` pooled graph embedding.
    pub pooled: Matrix,
    /// `classes x 1` loss gradient at the logits, read off the bias gradient.
    pub logit_gradient: Matrix,
    /// Transcript position this was extracted from, when known.
    pub source: Option<BundleSource>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSource {
    pub round: usize,
    pub client: usize,
}

/// Read the pooled embedding out of a gradient bundle.
///
/// Uses the bias-gradient row of largest magnitude for conditioning. Fails
/// when every bias-gradient entry is (numerically) zero, which happens for
/// pruned-away gradients or a perfectly confident model.
pub fn extract_embedding(bundle: &GradientBundle) -> Result<LeakedEmbedding> {
    let grad_b = &bundle.grad_b;
    if grad_b.cols() != 1 || grad_b.rows() != bundle.grad_fc.rows() {
        return Err(Error::Shape("bundle classifier gradients are malformed".into()));
    }
    let mut best = 0usize;
    for j in 1..grad_b.rows() {
        if grad_b[(j, 0)].abs() > grad_b[(best, 0)].abs() {
            best = j;
        }
    }
    let pivot = grad_b[(best, 0)];
    if pivot.abs() <= 1e-12 {
        return Err(Error::LeakageUnavailable(
            "all bias-gradient rows are zero; no embedding signal".into(),
        ));
    }
    let pooled = Matrix::row_vector(bundle.grad_fc.row(best)).scale(1.0 / pivot);
    Ok(LeakedEmbedding { pooled, logit_gradient: grad_b.clone(), source: None })
}

/// Max deviation of `grad_fc` from the rank-one form `grad_b * pooled`.
/// Zero (to rounding) for undefended batch-1 bundles; grows once a defense
/// has disturbed the gradients, flagging unreliable extraction.
pub fn outer_product_residual(bundle: &GradientBundle, embedding: &LeakedEmbedding) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..bundle.grad_fc.rows() {
        let g = bundle.grad_b[(j, 0)];
        for k in 0..bundle.grad_fc.cols() {
            worst = worst.max((bundle.grad_fc[(j, k)] - g * embedding.pooled[(0, k)]).abs());
        }
    }
    worst
}

/// Walk a stack of linear layers backwards from a leaked output to the first
/// layer's input, one minimum-norm solve per layer.
pub fn invert_mlp_stack(
    leaked_output: &Matrix,
    layers: &[LinearLayer],
    rcond: f64,
) -> Result<Matrix> {
    if layers.is_empty() {
        return Err(Error::Config("mlp stack has no layers".into()));
    }
    if leaked_output.cols() != 1 {
        return Err(Error::Shape("leaked output must be a column vector".into()));
    }
    let mut current = leaked_output.clone();
    for (depth, layer) in layers.iter().enumerate().rev() {
        if layer.weight.is_zero() {
            return Err(Error::Inversion(format!("layer {depth} weight matrix is zero")));
        }
        let rhs = current.sub(&layer.bias)?;
        current = solve_min_norm_rcond(&layer.weight, &rhs, rcond)?;
    }
    Ok(current)
}

/// Identity-feature-map maximum mean discrepancy: distance between the mean
/// embeddings of two graph collections.
pub fn mmd_distance(a: &[Matrix], b: &[Matrix]) -> f64 {
    let mean = |set: &[Matrix], dim: usize| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for m in set {
            for (o, &v) in out.iter_mut().zip(m.data().iter()) {
                *o += v;
            }
        }
        if !set.is_empty() {
            for o in &mut out {
                *o /= set.len() as f64;
            }
        }
        out
    };
    let dim = a.first().or_else(|| b.first()).map(|m| m.data().len()).unwrap_or(0);
    let ma = mean(a, dim);
    let mb = mean(b, dim);
    ma.iter().zip(mb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Attack hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Weight of the distribution-adaptation term.
    pub lambda: f64,
    pub decoder_lr: f64,
    pub decoder_epochs: usize,
    pub decoder_batch: usize,
    pub decoder_hidden: [usize; 2],
    pub edge_threshold: f64,
    /// Attack assumes the victim graph's node count is known; when false the
    /// trailing-row heuristic of [`estimate_node_count`] is used instead.
    pub assume_known_node_count: bool,
    /// Singular-value cutoff for the feature-recovery solves.
    pub rcond: f64,
    /// Side length of the decoder's output grid.
    pub max_nodes: usize,
    /// Additionally weight auxiliary samples in the reconstruction loss by
    /// their embedding distance to the victim mean. Kept as an option; the
    /// default adapter realization is the first-moment alignment alone.
    pub adapter_reweighting: bool,
}

impl AttackConfig {
    pub fn new(max_nodes: usize) -> Self {
        AttackConfig {
            lambda: 0.2,
            decoder_lr: 1e-3,
            decoder_epochs: 300,
            decoder_batch: 16,
            decoder_hidden: [100, 250],
            edge_threshold: 0.5,
            assume_known_node_count: true,
            rcond: DEFAULT_RCOND,
            max_nodes,
            adapter_reweighting: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.edge_threshold > 0.0 && self.edge_threshold < 1.0) {
            return Err(Error::Config(format!(
                "edge threshold {} outside (0, 1)",
                self.edge_threshold
            )));
        }
        if self.max_nodes < 1 || self.decoder_batch < 1 {
            return Err(Error::Config("max_nodes and decoder_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Three-layer MLP with a terminal sigmoid, mapping a pooled embedding to a
/// `max_nodes^2` grid of edge probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureDecoder {
    layers: Vec<LinearLayer>,
    max_nodes: usize,
}

impl StructureDecoder {
    pub fn init(
        input_dim: usize,
        hidden: [usize; 2],
        max_nodes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || max_nodes == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        let dims = [input_dim, hidden[0], hidden[1], max_nodes * max_nodes];
        let mut layers = Vec::with_capacity(3);
        for w in dims.windows(2) {
            layers.push(LinearLayer::new(glorot(w[1], w[0], rng), Matrix::zeros(w[1], 1))?);
        }
        Ok(StructureDecoder { layers, max_nodes })
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    /// Raw sigmoid outputs as a `1 x max_nodes^2` row; entries strictly in
    /// (0, 1).
    pub fn decode(&self, pooled: &Matrix) -> Result<Matrix> {
        if pooled.rows() != 1 || pooled.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "decoder input {:?}, expected 1x{}",
                pooled.shape(),
                self.input_dim()
            )));
        }
        let (_, _, out) = self.forward_trace(pooled.row(0));
        Matrix::from_vec(1, self.max_nodes * self.max_nodes, out)
    }

    fn forward_trace(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let a1 = affine_relu(&self.layers[0], input);
        let a2 = affine_relu(&self.layers[1], &a1);
        let mut out = affine(&self.layers[2], &a2);
        for v in &mut out {
            *v = sigmoid(*v);
        }
        (a1, a2, out)
    }
}

fn affine(layer: &LinearLayer, input: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layer.weight.rows());
    for o in 0..layer.weight.rows() {
        let row = layer.weight.row(o);
        let mut acc = layer.bias[(o, 0)];
        for (&w, &x) in row.iter().zip(input.iter()) {
            acc += w * x;
        }
        out.push(acc);
    }
    out
}

fn affine_relu(layer: &LinearLayer, input: &[f64]) -> Vec<f64> {
    let mut out = affine(layer, input);
    for v in &mut out {
        *v = v.max(0.0);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Diagnostics from one decoder training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    /// Mean per-entry reconstruction error over the auxiliary set.
    pub reconstruction_loss: f64,
    /// Identity-map MMD between auxiliary and victim embeddings.
    pub adaptation_distance: f64,
    /// `reconstruction + lambda * adaptation`.
    pub total_loss: f64,
    pub epochs: usize,
}

/// Fit the structure decoder on auxiliary graphs against the frozen encoder.
///
/// The reconstruction target for each auxiliary graph is its zero-padded
/// adjacency. With `lambda > 0` and victim embeddings available, the mean
/// discrepancy between the two embedding sets is minimized where it can be:
/// the measured auxiliary-to-victim mean offset is folded into the trained
/// decoder's input layer, so victim embeddings are decoded from inside the
/// distribution the decoder was fitted on. The discrepancy itself is
/// reported in the loss. `adapter_reweighting` additionally importance
/// -weights auxiliary samples toward the victim mean (softmax over negative
/// squared distances, tempered by the median).
pub fn train_structure_decoder(
    encoder: &ModelParams,
    auxiliaries: &[Graph],
    victim_embeddings: &[LeakedEmbedding],
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(StructureDecoder, DecoderReport)> {
    config.validate()?;
    encoder.validate()?;
    if auxiliaries.is_empty() {
        return Err(Error::Config("decoder training needs auxiliary graphs".into()));
    }
    for (i, g) in auxiliaries.iter().enumerate() {
        if g.node_count() > config.max_nodes {
            return Err(Error::Config(format!(
                "auxiliary graph {i} has {} nodes, over the {}-node grid",
                g.node_count(),
                config.max_nodes
            )));
        }
    }
    let m = config.max_nodes;
    let cells = m * m;

    let embeddings: Vec<Matrix> = auxiliaries
        .iter()
        .map(|g| pooled_embedding(encoder, g))
        .collect::<Result<_>>()?;
    let targets: Vec<Matrix> = auxiliaries
        .iter()
        .map(|g| g.adjacency().pad(m, m))
        .collect::<Result<_>>()?;
    let victim: Vec<Matrix> = victim_embeddings.iter().map(|e| e.pooled.clone()).collect();

    let adapter_active = config.lambda > 0.0 && !victim.is_empty();
    // Importance weights enter the reconstruction loss directly; batch
    // composition is identical with and without them, so ablations isolate
    // the weighting itself.
    let sample_weights: Vec<f64> = if adapter_active && config.adapter_reweighting {
        adaptation_weights(&embeddings, &victim)
    } else {
        vec![1.0 / auxiliaries.len() as f64; auxiliaries.len()]
    };

    let mut decoder =
        StructureDecoder::init(encoder.embedding_dim(), config.decoder_hidden, m, rng)?;
    let mut state = {
        let tensors: Vec<&Matrix> = decoder
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        AdamState::for_params(&tensors)
    };
    let adam = AdamConfig::with_learning_rate(config.decoder_lr);

    let n = auxiliaries.len();
    let batch = config.decoder_batch.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.decoder_epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(batch) {
            train_step(
                &mut decoder,
                &mut state,
                &adam,
                &embeddings,
                &targets,
                &sample_weights,
                chunk,
                cells,
            )?;
        }
    }

    if adapter_active {
        align_decoder_input(&mut decoder, &embeddings, &victim)?;
    }

    let reconstruction_loss = {
        let mut acc = 0.0;
        for (e, t) in embeddings.iter().zip(targets.iter()) {
            let out = decoder.decode(e)?;
            acc += out
                .data()
                .iter()
                .zip(t.data().iter())
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>()
                / cells as f64;
        }
        acc / n as f64
    };
    let adaptation_distance = mmd_distance(&embeddings, &victim);
    let report = DecoderReport {
        reconstruction_loss,
        adaptation_distance,
        total_loss: reconstruction_loss + config.lambda * adaptation_distance,
        epochs: config.decoder_epochs,
    };
    Ok((decoder, report))
}

/// Fold the auxiliary-to-victim mean offset into the decoder's first layer:
/// decoding a victim embedding then behaves like decoding an auxiliary-range
/// embedding with the same deviation from its population mean. This is the
/// part of the mean discrepancy a frozen encoder still lets us remove.
fn align_decoder_input(
    decoder: &mut StructureDecoder,
    aux_embeddings: &[Matrix],
    victim: &[Matrix],
) -> Result<()> {
    let dim = decoder.input_dim();
    let mean = |set: &[Matrix]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for e in set {
            for (o, &v) in m.iter_mut().zip(e.data().iter()) {
                *o += v / set.len() as f64;
            }
        }
        m
    };
    let mu_aux = mean(aux_embeddings);
    let mu_vic = mean(victim);
    let offset = Matrix::from_fn(dim, 1, |i, _| mu_aux[i] - mu_vic[i]);
    let shift = decoder.layers[0].weight.matmul(&offset)?;
    decoder.layers[0].bias = decoder.layers[0].bias.add(&shift)?;
    Ok(())
}

/// Softmax over negative squared embedding distances to the victim mean,
/// tempered by the median squared distance.
fn adaptation_weights(embeddings: &[Matrix], victim: &[Matrix]) -> Vec<f64> {
    let dim = embeddings[0].data().len();
    let mut mean = vec![0.0; dim];
    for v in victim {
        for (m, &x) in mean.iter_mut().zip(v.data().iter()) {
            *m += x / victim.len() as f64;
        }
    }
    let sq_dist: Vec<f64> = embeddings
        .iter()
        .map(|e| e.data().iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    let mut sorted = sq_dist.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tau = sorted[sorted.len() / 2];
    if !(tau > 0.0) {
        return vec![1.0 / embeddings.len() as f64; embeddings.len()];
    }
    let max_logit = sq_dist.iter().map(|d| -d / tau).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = sq_dist.iter().map(|d| (-d / tau - max_logit).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn train_step(
    decoder: &mut StructureDecoder,
    state: &mut AdamState,
    adam: &AdamConfig,
    embeddings: &[Matrix],
    targets: &[Matrix],
    sample_weights: &[f64],
    chunk: &[usize],
    cells: usize,
) -> Result<()> {
    let mut grads: Vec<Matrix> = decoder
        .layers
        .iter()
        .flat_map(|l| {
            [
                Matrix::zeros(l.weight.rows(), l.weight.cols()),
                Matrix::zeros(l.bias.rows(), 1),
            ]
        })
        .collect();

    let batch_weight: f64 = chunk.iter().map(|&i| sample_weights[i]).sum();
    for &idx in chunk {
        let input = embeddings[idx].row(0);
        let target = targets[idx].data();
        let (a1, a2, out) = decoder.forward_trace(input);

        // d(weighted mean squared error)/d(pre-sigmoid), per sample; the
        // weights are renormalized within the batch.
        let coeff = 2.0 * sample_weights[idx] / (batch_weight * cells as f64);
        let dz3: Vec<f64> = out
            .iter()
            .zip(target.iter())
            .map(|(o, t)| coeff * (o - t) * o * (1.0 - o))
            .collect();
        let da2 = backprop_layer(&decoder.layers[2], &a2, &dz3, &mut grads, 4);
        let dz2: Vec<f64> =
            da2.iter().zip(a2.iter()).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
        let da1 = backprop_layer(&decoder.layers[1], &a1, &dz2, &mut grads, 2);
        let dz1: Vec<f64> =
            da1.iter().zip(a1.iter()).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
        backprop_layer(&decoder.layers[0], input, &dz1, &mut grads, 0);
    }

    let mut params: Vec<&mut Matrix> = decoder
        .layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect();
    let grad_refs: Vec<&Matrix> = grads.iter().collect();
    adam_step(&mut params, &grad_refs, state, adam)
}

/// Accumulate weight/bias gradients for one layer (slots `w_slot` and
/// `w_slot + 1` of `grads`) and return the gradient w.r.t. its input.
fn backprop_layer(
    layer: &LinearLayer,
    input: &[f64],
    dz: &[f64],
    grads: &mut [Matrix],
    w_slot: usize,
) -> Vec<f64> {
    let mut d_input = vec![0.0; input.len()];
    for (o, &d) in dz.iter().enumerate() {
        grads[w_slot + 1][(o, 0)] += d;
        if d == 0.0 {
            continue;
        }
        let w_row = layer.weight.row(o);
        let g_row = grads[w_slot].row_mut(o);
        for ((g, &x), (&w, di)) in
            g_row.iter_mut().zip(input.iter()).zip(w_row.iter().zip(d_input.iter_mut()))
        {
            *g += d * x;
            *di += d * w;
        }
    }
    d_input
}

/// Structure estimate: the full probability grid plus the thresholded
/// adjacency for the assumed node count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureRecovery {
    /// `max_nodes x max_nodes`, symmetrized, zero diagonal.
    pub probabilities: Matrix,
    /// `node_count x node_count` binary adjacency.
    pub adjacency: Matrix,
}

/// Decode a leaked embedding into an adjacency estimate.
pub fn recover_structure(
    decoder: &StructureDecoder,
    leaked: &LeakedEmbedding,
    node_count: usize,
    config: &AttackConfig,
) -> Result<StructureRecovery> {
    let raw = decoder.decode(&leaked.pooled)?;
    structure_from_probabilities(&raw, decoder.max_nodes(), node_count, config.edge_threshold)
}

/// Post-process a raw `1 x max_nodes^2` probability row: reshape, symmetrize
/// by averaging with the transpose, zero the diagonal, crop and threshold
/// (ties at the threshold count as edges).
pub fn structure_from_probabilities(
    raw: &Matrix,
    max_nodes: usize,
    node_count: usize,
    edge_threshold: f64,
) -> Result<StructureRecovery> {
    if raw.data().len() != max_nodes * max_nodes {
        return Err(Error::Shape(format!(
            "expected {} probabilities, got {}",
            max_nodes * max_nodes,
            raw.data().len()
        )));
    }
    if node_count > max_nodes || node_count == 0 {
        return Err(Error::Config(format!(
            "node count {node_count} outside the {max_nodes}-node grid"
        )));
    }
    let grid = Matrix::from_vec(max_nodes, max_nodes, raw.data().to_vec())?;
    let probabilities = Matrix::from_fn(max_nodes, max_nodes, |i, j| {
        if i == j {
            0.0
        } else {
            (grid[(i, j)] + grid[(j, i)]) / 2.0
        }
    });
    let adjacency = Matrix::from_fn(node_count, node_count, |i, j| {
        if i != j && probabilities[(i, j)] >= edge_threshold {
            1.0
        } else {
            0.0
        }
    });
    Ok(StructureRecovery { probabilities, adjacency })
}

/// Trailing-row heuristic for unknown node counts: drop rows (from the
/// bottom) whose strongest symmetrized probability stays under `floor`.
pub fn estimate_node_count(probabilities: &Matrix, floor: f64) -> usize {
    let m = probabilities.rows();
    let mut n = m;
    while n > 1 {
        let row_max = (0..m)
            .filter(|&j| j != n - 1)
            .map(|j| probabilities[(n - 1, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        if row_max >= floor {
            break;
        }
        n -= 1;
    }
    n
}

/// Node-feature estimate plus per-layer intermediates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecovery {
    /// Recovered input features, `node_count x d_X`.
    pub features: Matrix,
    /// Recovered layer inputs `X_k`, index 0 = input features.
    pub layer_estimates: Vec<Matrix>,
    /// Least-squares residual of each solve, deepest layer first.
    pub solve_residuals: Vec<f64>,
}

/// Recover node features from the shared gradients given an adjacency
/// estimate, walking the gradient recursion from the deepest GCN layer down.
///
/// The deepest coefficient matrix starts from the all-ones activation-mask
/// guess; below that, masks are re-derived from each recovered layer input
/// (positive entry = active). A zero coefficient matrix against a nonzero
/// gradient aborts: every downstream mask is dead and the system carries no
/// information. An all-zero bundle instead yields the all-zero minimum-norm
/// solution.
pub fn recover_features(
    params: &ModelParams,
    bundle: &GradientBundle,
    adjacency_hat: &Matrix,
    config: &AttackConfig,
) -> Result<FeatureRecovery> {
    params.validate()?;
    config.validate()?;
    if adjacency_hat.rows() != adjacency_hat.cols() {
        return Err(Error::Shape("adjacency estimate must be square".into()));
    }
    if bundle.grad_gcn.len() != params.layer_count() {
        return Err(Error::Shape("bundle does not match model depth".into()));
    }
    let n = adjacency_hat.rows();
    let layers = params.layer_count();
    let abar = normalize_adjacency_matrix(adjacency_hat);

    // dL/dY estimate straight from the bias gradient.
    let logit_grad = &bundle.grad_b;
    let g_row_wfc = logit_grad.transpose_matmul(&params.classifier.weight)?; // 1 x d_l

    let m_p = params.pooling.pooling_matrix(n);
    let all_ones_mask = Matrix::from_fn(n, params.embedding_dim(), |_, _| 1.0);
    let mut coefficient = abar
        .transpose_matmul(&m_p.transpose().matmul(&g_row_wfc)?.hadamard(&all_ones_mask)?)?;

    let mut estimates_rev: Vec<Matrix> = Vec::with_capacity(layers);
    let mut residuals = Vec::with_capacity(layers);
    for k in (0..layers).rev() {
        if k < layers - 1 {
            // Masks from the layer input recovered one step earlier.
            let mask = estimates_rev.last().unwrap().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let back = coefficient.matmul_transpose(&params.gcn_weights[k + 1])?;
            coefficient = abar.transpose_matmul(&back.hadamard(&mask)?)?;
        }
        let grad = &bundle.grad_gcn[k];
        if coefficient.is_zero() && !grad.is_zero() {
            return Err(Error::RecoveryDegenerate(format!(
                "layer {} coefficients vanished against a nonzero gradient",
                k + 1
            )));
        }
        // Solve r_k^T X = grad_k^T for the layer input.
        let lhs = coefficient.transpose();
        let rhs = grad.transpose();
        let estimate = solve_min_norm_rcond(&lhs, &rhs, config.rcond)?;
        residuals.push(lhs.matmul(&estimate)?.sub(&rhs)?.frobenius_norm());
        estimates_rev.push(estimate);
    }

    estimates_rev.reverse();
    Ok(FeatureRecovery {
        features: estimates_rev[0].clone(),
        layer_estimates: estimates_rev,
        solve_residuals: residuals,
    })
}

/// Where each recovered quantity came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageSource {
    Decoder,
    LinearSolve,
    RandomBaseline,
    Supplied,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub structure: StageSource,
    pub features: StageSource,
}

/// A full graph estimate with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredGraph {
    /// Symmetrized edge probabilities on the decoder grid (zero diagonal).
    pub edge_probabilities: Matrix,
    /// Thresholded `node_count x node_count` adjacency.
    pub adjacency_hat: Matrix,
    /// Recovered node features.
    pub features_hat: Matrix,
    /// Recovered per-layer inputs, index 0 = features.
    pub layer_estimates: Vec<Matrix>,
    pub provenance: Provenance,
}

/// End-to-end attack on one gradient bundle.
pub fn recover_graph(
    params: &ModelParams,
    bundle: &GradientBundle,
    decoder: &StructureDecoder,
    known_node_count: usize,
    config: &AttackConfig,
) -> Result<RecoveredGraph> {
    let leaked = extract_embedding(bundle)?;
    let preliminary = recover_structure(decoder, &leaked, decoder.max_nodes(), config)?;
    let node_count = if config.assume_known_node_count {
        known_node_count
    } else {
        estimate_node_count(&preliminary.probabilities, 0.2)
    };
    let structure = recover_structure(decoder, &leaked, node_count, config)?;
    let features = recover_features(params, bundle, &structure.adjacency, config)?;
    Ok(RecoveredGraph {
        edge_probabilities: structure.probabilities,
        adjacency_hat: structure.adjacency,
        features_hat: features.features,
        layer_estimates: features.layer_estimates,
        provenance: Provenance { structure: StageSource::Decoder, features: StageSource::LinearSolve },
    })
}

/// Uninformed baseline: uniform random features and edge probabilities.
pub fn random_baseline(node_count: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> RecoveredGraph {
    use rand::Rng;
    let mut probabilities = Matrix::zeros(node_count, node_count);
    for i in 0..node_count {
        for j in (i + 1)..node_count {
            let p: f64 = rng.random();
            probabilities[(i, j)] = p;
            probabilities[(j, i)] = p;
        }
    }
    let adjacency = Matrix::from_fn(node_count, node_count, |i, j| {
        if i != j && probabilities[(i, j)] >= 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let features = Matrix::from_fn(node_count, feature_dim, |_, _| rng.random());
    RecoveredGraph {
        edge_probabilities: probabilities,
        adjacency_hat: adjacency,
        features_hat: features,
        layer_estimates: Vec::new(),
        provenance: Provenance {
            structure: StageSource::RandomBaseline,
            features: StageSource::RandomBaseline,
        },
    }
}
