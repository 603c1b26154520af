//! In-process federation rounds: clients compute gradients on private
//! graphs, optional defenses transform them, the server aggregates. Every
//! shared bundle is recorded in a [`RoundTranscript`] so attacks can run
//! offline against exactly what an eavesdropper would have seen.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetPartition, Graph};
use crate::nn::{
    average_batch, backward_analytic, forward, forward_with_activation_noise, GradientBundle,
    ModelParams,
};
use crate::rng::{derive_seed, rng_from_seed, sample_laplace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub client_count: usize,
    pub rounds: usize,
    /// Graphs per client per round (capped at the client's holdings).
    pub batch_size: usize,
    /// Server learning rate.
    pub learning_rate: f64,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_count < 1 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient-side defense applied by clients before sharing.
///
/// The noise parameter is the Laplace *scale* `b`. Reported "variance"
/// figures for Laplacian mechanisms conflate scale and variance; this crate
/// consistently means scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DefenseConfig {
    None,
    /// Zero the fraction `prune_ratio` of smallest-magnitude entries.
    GradientCompression { prune_ratio: f64 },
    /// Laplace noise on every shared gradient entry.
    DpGradients { noise_scale: f64 },
    /// Laplace noise on every GCN layer output during the forward pass.
    DpActivations { noise_scale: f64 },
    /// Half-scale noise on both gradients and activations.
    DpHybrid { noise_scale: f64 },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::GradientCompression { prune_ratio } => {
                if (0.0..1.0).contains(&prune_ratio) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("prune ratio {prune_ratio} outside [0, 1)")))
                }
            }
            DefenseConfig::DpGradients { noise_scale }
            | DefenseConfig::DpActivations { noise_scale }
            | DefenseConfig::DpHybrid { noise_scale } => {
                if noise_scale > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("noise scale {noise_scale} must be positive")))
                }
            }
        }
    }

    pub fn tag(&self) -> String {
        match *self {
            DefenseConfig::None => "none".into(),
            DefenseConfig::GradientCompression { prune_ratio } => {
                format!("gradient-compression(p={prune_ratio})")
            }
            DefenseConfig::DpGradients { noise_scale } => format!("dp-gradients(b={noise_scale})"),
            DefenseConfig::DpActivations { noise_scale } => {
                format!("dp-activations(b={noise_scale})")
            }
            DefenseConfig::DpHybrid { noise_scale } => format!("dp-hybrid(b={noise_scale})"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text == "none" {
            return Ok(DefenseConfig::None);
        }
        let (kind, value) = text
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("defense {text:?} needs kind:value")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("bad defense parameter {value:?}")))?;
        let defense = match kind {
            "gradient-compression" => DefenseConfig::GradientCompression { prune_ratio: value },
            "dp-gradients" => DefenseConfig::DpGradients { noise_scale: value },
            "dp-activations" => DefenseConfig::DpActivations { noise_scale: value },
            "dp-hybrid" => DefenseConfig::DpHybrid { noise_scale: value },
            other => return Err(Error::Config(format!("unknown defense {other:?}"))),
        };
        defense.validate()?;
        Ok(defense)
    }
}

/// Record of one federation round: everything the threat model grants an
/// eavesdropper (shared bundles, global parameters) plus, for evaluation
/// only, which private graphs formed each client batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: usize,
    pub params_before: ModelParams,
    pub params_after: ModelParams,
    pub client_bundles: Vec<GradientBundle>,
    /// Aggregation weights `N_i / N`.
    pub client_weights: Vec<f64>,
    /// Evaluation metadata: dataset indices of each client's batch. Not part
    /// of the adversary's view.
    pub eval_batch_indices: Vec<Vec<usize>>,
}

/// Mean gradient over a batch of private graphs, with the defense applied.
///
/// Activation-noise defenses perturb the forward passes; gradient-side
/// defenses transform the averaged bundle afterwards.
pub fn client_update(
    params: &ModelParams,
    batch: &[&Graph],
    defense: &DefenseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradientBundle> {
    if batch.is_empty() {
        return Err(Error::Config("client batch is empty".into()));
    }
    defense.validate()?;
    let activation_scale = match *defense {
        DefenseConfig::DpActivations { noise_scale } => Some(noise_scale),
        DefenseConfig::DpHybrid { noise_scale } => Some(noise_scale / 2.0),
        _ => None,
    };

    let mut bundles = Vec::with_capacity(batch.len());
    for graph in batch {
        let trace = match activation_scale {
            Some(scale) => forward_with_activation_noise(params, graph, graph.label(), scale, rng)?,
            None => forward(params, graph, graph.label())?,
        };
        bundles.push(backward_analytic(&trace, params, graph)?);
    }
    let mut bundle = average_batch(&bundles)?;

    bundle = match *defense {
        DefenseConfig::GradientCompression { prune_ratio } => {
            apply_gradient_compression(&bundle, prune_ratio)?
        }
        DefenseConfig::DpGradients { noise_scale } => add_gradient_noise(&bundle, noise_scale, rng),
        DefenseConfig::DpHybrid { noise_scale } => {
            add_gradient_noise(&bundle, noise_scale / 2.0, rng)
        }
        _ => bundle,
    };
    bundle.defense_tag = defense.tag();
    Ok(bundle)
}

/// Zero the `ceil(p * total)` entries of smallest absolute value, with one
/// threshold across the whole bundle. Ties at the cut keep earlier
/// flat-index entries.
pub fn apply_gradient_compression(bundle: &GradientBundle, prune_ratio: f64) -> Result<GradientBundle> {
    if !(0.0..1.0).contains(&prune_ratio) {
        return Err(Error::Config(format!("prune ratio {prune_ratio} outside [0, 1)")));
    }
    let total = bundle.entry_count();
    let prune = (prune_ratio * total as f64).ceil() as usize;
    if prune == 0 {
        return Ok(bundle.clone());
    }

    // Flat order over all tensors, mirroring GradientBundle::tensors().
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat = 0usize;
    for tensor in bundle.tensors() {
        for &v in tensor.data() {
            order.push((v.abs(), flat));
            flat += 1;
        }
    }
    // Prune smallest magnitudes first; on ties prefer pruning later indices
    // so earlier entries survive.
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.1.cmp(&a.1))
    });
    let mut keep = vec![true; total];
    for &(_, idx) in order.iter().take(prune) {
        keep[idx] = false;
    }

    let mut out = bundle.clone();
    let mut flat = 0usize;
    for tensor in out.tensors_mut() {
        for v in tensor.data_mut() {
            if !keep[flat] {
                *v = 0.0;
            }
            flat += 1;
        }
    }
    Ok(out)
}

fn add_gradient_noise(bundle: &GradientBundle, scale: f64, rng: &mut ChaCha8Rng) -> GradientBundle {
    let mut out = bundle.clone();
    for tensor in out.tensors_mut() {
        for v in tensor.data_mut() {
            *v += sample_laplace(rng, scale);
        }
    }
    out
}

/// Server step: `W - eta * sum_i w_i * grad_i`. Weights must sum to one.
pub fn aggregate(
    params: &ModelParams,
    bundles: &[GradientBundle],
    weights: &[f64],
    learning_rate: f64,
) -> Result<ModelParams> {
    if bundles.is_empty() || bundles.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} bundles with {} weights",
            bundles.len(),
            weights.len()
        )));
    }
    let weight_sum: f64 = weights.iter().sum();
    if (weight_sum - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("aggregation weights sum to {weight_sum}, not 1")));
    }
    let mut updated = params.clone();
    {
        let mut tensors = updated.tensors_mut();
        for (bundle, &w) in bundles.iter().zip(weights.iter()) {
            let grads = bundle.tensors();
            if grads.len() != tensors.len() {
                return Err(Error::Shape("bundle does not match parameter layout".into()));
            }
            for (tensor, grad) in tensors.iter_mut().zip(grads.iter()) {
                tensor.add_scaled_in_place(grad, -learning_rate * w)?;
            }
        }
    }
    Ok(updated)
}

/// Run the full round loop and record every transcript.
///
/// Deterministic under the config seed: per-client RNG streams are derived
/// from (seed, round, client), so results do not depend on scheduling.
pub fn run_federation(
    config: &FederationConfig,
    defense: &DefenseConfig,
    dataset: &[Graph],
    partition: &DatasetPartition,
    initial: &ModelParams,
) -> Result<Vec<RoundTranscript>> {
    config.validate()?;
    defense.validate()?;
    initial.validate()?;
    if partition.client_count() != config.client_count {
        return Err(Error::Config(format!(
            "partition has {} clients, config expects {}",
            partition.client_count(),
            config.client_count
        )));
    }
    for assignment in &partition.client_assignments {
        if let Some(&bad) = assignment.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::Config(format!("partition references graph {bad} outside dataset")));
        }
    }

    let total: usize = partition.total_graphs();
    let weights: Vec<f64> = partition
        .client_assignments
        .iter()
        .map(|a| a.len() as f64 / total as f64)
        .collect();

    let mut params = initial.clone();
    let mut transcripts = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let mut bundles = Vec::with_capacity(config.client_count);
        let mut batch_indices = Vec::with_capacity(config.client_count);
        for (client, assignment) in partition.client_assignments.iter().enumerate() {
            let mut rng =
                rng_from_seed(derive_seed(config.seed, round as u64 + 1, client as u64));
            let batch = sample_batch(assignment, config.batch_size, &mut rng);
            let graphs: Vec<&Graph> = batch.iter().map(|&i| &dataset[i]).collect();
            bundles.push(client_update(&params, &graphs, defense, &mut rng)?);
            batch_indices.push(batch);
        }
        let updated = aggregate(&params, &bundles, &weights, config.learning_rate)?;
        transcripts.push(RoundTranscript {
            round,
            params_before: params,
            params_after: updated.clone(),
            client_bundles: bundles,
            client_weights: weights.clone(),
            eval_batch_indices: batch_indices,
        });
        params = updated;
    }
    Ok(transcripts)
}

fn sample_batch(assignment: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let take = batch_size.min(assignment.len());
    // Partial Fisher-Yates over a copy.
    let mut pool: Vec<usize> = assignment.to_vec();
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Exactness of the recorded aggregation: max deviation from
/// `W_after = W_before - eta * sum_i w_i grad_i` across all tensors.
pub fn aggregation_identity_error(transcript: &RoundTranscript, learning_rate: f64) -> f64 {
    let recomputed = match aggregate(
        &transcript.params_before,
        &transcript.client_bundles,
        &transcript.client_weights,
        learning_rate,
    ) {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };
    recomputed
        .tensors()
        .iter()
        .zip(transcript.params_after.tensors().iter())
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        generate_auxiliary, partition_dirichlet, AuxiliarySpec, FeatureModel, StructureModel,
    };
    use crate::linalg::Matrix;
    use crate::nn::{init_params, ModelConfig, PoolingDescriptor};
    use crate::rng::rng_from_seed;

    fn toy_dataset(count: usize, seed: u64) -> Vec<Graph> {
        generate_auxiliary(
            &AuxiliarySpec {
                structure: StructureModel::ErdosRenyi { edge_probability: 0.4 },
                features: FeatureModel::OneHot { classes: 3 },
                graph_count: count,
                max_nodes: 6,
                label_classes: 2,
            },
            seed,
        )
        .unwrap()
    }

    fn toy_params(seed: u64) -> ModelParams {
        init_params(
            &ModelConfig {
                feature_dim: 3,
                hidden_dim: 4,
                gcn_layers: 2,
                classes: 2,
                pooling: PoolingDescriptor::Sum,
            },
            &mut rng_from_seed(seed),
        )
        .unwrap()
    }

    #[test]
    fn undefended_singleton_batch_equals_backward() {
        let params = toy_params(1);
        let dataset = toy_dataset(1, 2);
        let mut rng = rng_from_seed(3);
        let bundle =
            client_update(&params, &[&dataset[0]], &DefenseConfig::None, &mut rng).unwrap();
        let trace = forward(&params, &dataset[0], dataset[0].label()).unwrap();
        let direct = backward_analytic(&trace, &params, &dataset[0]).unwrap();
        for (a, b) in bundle.tensors().iter().zip(direct.tensors().iter()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }

    #[test]
    fn compression_keeps_only_largest_entries() {
        let params = toy_params(4);
        let dataset = toy_dataset(1, 5);
        let mut rng = rng_from_seed(6);
        let bundle =
            client_update(&params, &[&dataset[0]], &DefenseConfig::None, &mut rng).unwrap();
        let total = bundle.entry_count();
        // Prune all but one entry.
        let ratio = (total - 1) as f64 / total as f64;
        let pruned = apply_gradient_compression(&bundle, ratio).unwrap();
        let nonzero: Vec<f64> = pruned
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .filter(|v| *v != 0.0)
            .collect();
        assert_eq!(nonzero.len(), 1);
        let max_abs = bundle
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((nonzero[0].abs() - max_abs).abs() < 1e-15);
    }

    #[test]
    fn compression_definitional_cases() {
        let mut bundle = GradientBundle {
            grad_gcn: vec![Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap()],
            grad_fc: Matrix::from_rows(&[vec![3.0]]).unwrap(),
            grad_b: Matrix::from_rows(&[vec![-4.0]]).unwrap(),
            batch_size: 1,
            defense_tag: "none".into(),
        };
        let same = apply_gradient_compression(&bundle, 0.0).unwrap();
        for (a, b) in same.tensors().iter().zip(bundle.tensors().iter()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
        // Flattened [1, -2, 3, -4] at p = 0.5 -> [0, 0, 3, -4].
        let pruned = apply_gradient_compression(&bundle, 0.5).unwrap();
        assert_eq!(pruned.grad_gcn[0].data(), &[0.0, 0.0]);
        assert_eq!(pruned.grad_fc.data(), &[3.0]);
        assert_eq!(pruned.grad_b.data(), &[-4.0]);
        bundle.batch_size = 1;
    }

    #[test]
    fn compression_counting_on_large_bundle() {
        let mut rng = rng_from_seed(7);
        use rand::Rng;
        let bundle = GradientBundle {
            grad_gcn: vec![Matrix::from_fn(100, 50, |_, _| rng.random_range(-1.0..1.0))],
            grad_fc: Matrix::from_fn(100, 49, |_, _| rng.random_range(-1.0..1.0)),
            grad_b: Matrix::from_fn(100, 1, |_, _| rng.random_range(-1.0..1.0)),
            batch_size: 1,
            defense_tag: "none".into(),
        };
        assert_eq!(bundle.entry_count(), 10_000);
        let pruned = apply_gradient_compression(&bundle, 0.99).unwrap();
        let zeros = pruned
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .filter(|v| **v == 0.0)
            .count();
        assert_eq!(zeros, 9_900);
    }

    #[test]
    fn dp_gradient_noise_has_expected_magnitude() {
        // Laplace(b) has E|x| = b; check the empirical perturbation.
        let mut rng = rng_from_seed(8);
        use rand::Rng;
        let bundle = GradientBundle {
            grad_gcn: vec![Matrix::from_fn(100, 100, |_, _| rng.random_range(-1.0..1.0))],
            grad_fc: Matrix::zeros(1, 1),
            grad_b: Matrix::zeros(1, 1),
            batch_size: 1,
            defense_tag: "none".into(),
        };
        let scale = 0.25;
        let noisy = add_gradient_noise(&bundle, scale, &mut rng);
        let mean_abs: f64 = bundle.grad_gcn[0]
            .data()
            .iter()
            .zip(noisy.grad_gcn[0].data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 10_000.0;
        assert!((mean_abs - scale).abs() / scale < 0.05, "mean |noise| = {mean_abs}");
    }

    #[test]
    fn aggregate_identities() {
        let params = toy_params(9);
        let dataset = toy_dataset(3, 10);
        let mut rng = rng_from_seed(11);
        let bundle =
            client_update(&params, &[&dataset[0]], &DefenseConfig::None, &mut rng).unwrap();

        // Single client: a plain gradient step.
        let stepped = aggregate(&params, &[bundle.clone()], &[1.0], 0.1).unwrap();
        for ((p, g), s) in params
            .tensors()
            .iter()
            .zip(bundle.tensors().iter())
            .zip(stepped.tensors().iter())
        {
            let expect = p.add(&g.scale(-0.1)).unwrap();
            assert!(s.max_abs_diff(&expect) < 1e-15);
        }

        // Opposite bundles cancel.
        let negated = bundle.map(|m| m.scale(-1.0));
        let unchanged =
            aggregate(&params, &[bundle.clone(), negated], &[0.5, 0.5], 0.1).unwrap();
        for (a, b) in unchanged.tensors().iter().zip(params.tensors().iter()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }

        // Bad weight sum is rejected.
        assert!(matches!(
            aggregate(&params, &[bundle], &[0.9], 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn aggregate_matches_manual_accumulation() {
        let params = toy_params(12);
        let dataset = toy_dataset(3, 13);
        let mut rng = rng_from_seed(14);
        let bundles: Vec<GradientBundle> = dataset
            .iter()
            .map(|g| client_update(&params, &[g], &DefenseConfig::None, &mut rng).unwrap())
            .collect();
        let weights = [0.5, 0.3, 0.2];
        let eta = 0.05;
        let updated = aggregate(&params, &bundles, &weights, eta).unwrap();
        for slot in 0..params.tensors().len() {
            let p = params.tensors()[slot];
            let u = updated.tensors()[slot];
            for idx in 0..p.data().len() {
                let mut acc = p.data()[idx];
                for (b, &w) in bundles.iter().zip(weights.iter()) {
                    acc -= eta * w * b.tensors()[slot].data()[idx];
                }
                assert!((u.data()[idx] - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_rounds_changes_nothing() {
        let dataset = toy_dataset(6, 15);
        let partition = partition_dirichlet(&dataset, 2, 1.0, 16).unwrap();
        let config = FederationConfig {
            client_count: 2,
            rounds: 0,
            batch_size: 1,
            learning_rate: 0.1,
            seed: 17,
        };
        let params = toy_params(18);
        let transcripts =
            run_federation(&config, &DefenseConfig::None, &dataset, &partition, &params).unwrap();
        assert!(transcripts.is_empty());
    }

    #[test]
    fn single_client_round_is_centralized_step() {
        let dataset = toy_dataset(4, 19);
        let partition = DatasetPartition {
            client_assignments: vec![(0..4).collect()],
            alpha: 1.0,
        };
        let config = FederationConfig {
            client_count: 1,
            rounds: 1,
            batch_size: 4,
            learning_rate: 0.2,
            seed: 20,
        };
        let params = toy_params(21);
        let transcripts =
            run_federation(&config, &DefenseConfig::None, &dataset, &partition, &params).unwrap();
        assert_eq!(transcripts.len(), 1);
        let t = &transcripts[0];
        assert_eq!(t.client_bundles.len(), 1);
        assert_eq!(t.client_bundles[0].batch_size, 4);

        // Same step computed centrally.
        let graphs: Vec<&Graph> = t.eval_batch_indices[0].iter().map(|&i| &dataset[i]).collect();
        let bundles: Vec<GradientBundle> = graphs
            .iter()
            .map(|g| {
                let trace = forward(&params, g, g.label()).unwrap();
                backward_analytic(&trace, &params, g).unwrap()
            })
            .collect();
        let mean = average_batch(&bundles).unwrap();
        let expect = aggregate(&params, &[mean], &[1.0], 0.2).unwrap();
        for (a, b) in expect.tensors().iter().zip(t.params_after.tensors().iter()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }

    #[test]
    fn federation_is_deterministic() {
        let dataset = toy_dataset(10, 22);
        let partition = partition_dirichlet(&dataset, 2, 1.0, 23).unwrap();
        let config = FederationConfig {
            client_count: 2,
            rounds: 3,
            batch_size: 2,
            learning_rate: 0.05,
            seed: 24,
        };
        let params = toy_params(25);
        let defense = DefenseConfig::DpGradients { noise_scale: 0.1 };
        let a = run_federation(&config, &defense, &dataset, &partition, &params).unwrap();
        let b = run_federation(&config, &defense, &dataset, &partition, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_identity_holds_in_transcripts() {
        let dataset = toy_dataset(8, 26);
        let partition = partition_dirichlet(&dataset, 2, 1.0, 27).unwrap();
        let config = FederationConfig {
            client_count: 2,
            rounds: 2,
            batch_size: 2,
            learning_rate: 0.1,
            seed: 28,
        };
        let params = toy_params(29);
        for defense in [
            DefenseConfig::None,
            DefenseConfig::GradientCompression { prune_ratio: 0.5 },
            DefenseConfig::DpActivations { noise_scale: 0.1 },
        ] {
            let transcripts =
                run_federation(&config, &defense, &dataset, &partition, &params).unwrap();
            for t in &transcripts {
                assert!(aggregation_identity_error(t, config.learning_rate) < 1e-12);
            }
        }
    }

    #[test]
    fn single_client_descends_on_fixed_batch() {
        // With one client, no defense and a small step, the loop is plain
        // gradient descent; the batch loss must not increase over 20 rounds.
        let dataset = toy_dataset(5, 30);
        let partition = DatasetPartition {
            client_assignments: vec![(0..5).collect()],
            alpha: 1.0,
        };
        let config = FederationConfig {
            client_count: 1,
            rounds: 20,
            batch_size: 5,
            learning_rate: 1e-3,
            seed: 31,
        };
        let params = toy_params(32);
        let transcripts =
            run_federation(&config, &DefenseConfig::None, &dataset, &partition, &params).unwrap();
        let batch_loss = |p: &ModelParams| -> f64 {
            dataset
                .iter()
                .map(|g| forward(p, g, g.label()).unwrap().loss)
                .sum::<f64>()
                / dataset.len() as f64
        };
        let mut last = batch_loss(&transcripts[0].params_before);
        for t in &transcripts {
            let now = batch_loss(&t.params_after);
            assert!(now <= last + 1e-9, "round {}: loss {last} -> {now}", t.round);
            last = now;
        }
    }

    #[test]
    fn hybrid_defense_splits_noise_scale() {
        // dp-hybrid(b) must behave like activations at b/2 plus gradients at
        // b/2: with the same rng stream the activation draws coincide.
        let params = toy_params(33);
        let dataset = toy_dataset(1, 34);
        let g = &dataset[0];
        let b = 0.4;

        let mut rng_hybrid = rng_from_seed(35);
        let hybrid =
            client_update(&params, &[g], &DefenseConfig::DpHybrid { noise_scale: b }, &mut rng_hybrid)
                .unwrap();

        let mut rng_manual = rng_from_seed(35);
        let trace =
            forward_with_activation_noise(&params, g, g.label(), b / 2.0, &mut rng_manual).unwrap();
        let clean = backward_analytic(&trace, &params, g).unwrap();
        let manual = add_gradient_noise(&clean, b / 2.0, &mut rng_manual);
        for (a, m) in hybrid.tensors().iter().zip(manual.tensors().iter()) {
            assert!(a.max_abs_diff(m) < 1e-15);
        }
    }
}
