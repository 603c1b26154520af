//! End-to-end experiment plumbing shared by the CLI commands and the
//! acceptance suite: dataset preparation, federation runs, recorded-attack
//! evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use fgl_core::attack::{
    extract_embedding, outer_product_residual, random_baseline, recover_features,
    recover_structure, train_structure_decoder, AttackConfig, LeakedEmbedding,
    StructureDecoder,
};
use fgl_core::checkpoint::{
    load_manifest, load_transcript_dir, save_manifest, save_transcript, DatasetManifest,
};
use fgl_core::error::{Error, Result};
use fgl_core::fed::{run_federation, DefenseConfig, FederationConfig, RoundTranscript};
use fgl_core::graph::{
    draw_auxiliary_from_dataset, generate_auxiliary, parse_tu_dataset, partition_dirichlet,
    AuxiliarySpec, FeatureModel, Graph, StructureModel,
};
use fgl_core::metrics::{edge_acc, feature_acc, feature_mse, structure_auc_ap};
use fgl_core::nn::{init_params, pooled_embedding, ModelConfig, PoolingDescriptor};
use fgl_core::Matrix;
use fgl_core::rng::{derive_seed, rng_from_seed};

// Stream labels for deriving per-purpose seeds.
const STREAM_MODEL: u64 = 1;
const STREAM_AUX: u64 = 2;
const STREAM_DECODER: u64 = 3;
const STREAM_BASELINE: u64 = 4;

/// Resolve an output path against `FGL_OUTPUT_ROOT` when it is relative.
pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("FGL_OUTPUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum DatasetSource {
    /// TU-format directory; graphs above `max_nodes` (when set) are dropped.
    Tu { root: PathBuf, name: String, max_nodes: Option<usize> },
    /// Synthetic Erdős–Rényi dataset.
    Synthetic {
        edge_probability: f64,
        features: FeatureModel,
        graph_count: usize,
        max_nodes: usize,
        label_classes: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub source: DatasetSource,
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Build the canonical dataset manifest (graphs + client partition) and
/// write it with its content hash. Returns the manifest path and hash.
pub fn prepare_dataset(options: &PrepareOptions, out_dir: &Path) -> Result<(PathBuf, String)> {
    let out_dir = resolve_output(out_dir);
    let (name, graphs) = match &options.source {
        DatasetSource::Tu { root, name, max_nodes } => {
            let mut graphs = parse_tu_dataset(root, name)?;
            if let Some(cap) = max_nodes {
                graphs.retain(|g| g.node_count() <= *cap);
            }
            if graphs.is_empty() {
                return Err(Error::Config("no graphs left after the node-count filter".into()));
            }
            (name.clone(), graphs)
        }
        DatasetSource::Synthetic {
            edge_probability,
            features,
            graph_count,
            max_nodes,
            label_classes,
        } => {
            let spec = AuxiliarySpec {
                structure: StructureModel::ErdosRenyi { edge_probability: *edge_probability },
                features: features.clone(),
                graph_count: *graph_count,
                max_nodes: *max_nodes,
                label_classes: *label_classes,
            };
            (format!("er{edge_probability}"), generate_auxiliary(&spec, options.seed)?)
        }
    };

    let partition = partition_dirichlet(&graphs, options.clients, options.alpha, options.seed)?;
    let feature_dim = graphs[0].feature_dim();
    let class_count = graphs.iter().map(|g| g.label()).max().unwrap() + 1;
    let max_nodes = graphs.iter().map(|g| g.node_count()).max().unwrap();
    let manifest = DatasetManifest {
        name,
        graphs,
        feature_dim,
        class_count,
        max_nodes,
        partition,
        seed: options.seed,
        config_echo: serde_json::to_value(options)?,
    };
    let path = out_dir.join("manifest.json");
    save_manifest(&path, &manifest)?;

    let bytes = std::fs::read(&path)?;
    let hash = hex_digest(&bytes);
    std::fs::write(out_dir.join("manifest.sha256"), format!("{hash}\n"))?;
    Ok((path, hash))
}

fn hex_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub rounds: usize,
    pub gcn_layers: usize,
    pub hidden_dim: usize,
    pub pooling: PoolingDescriptor,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub defense: DefenseConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainRecord {
    manifest_path: PathBuf,
    options: TrainOptions,
}

/// Run the federation against a prepared manifest, recording one transcript
/// file per round plus the resolved configuration.
pub fn train_federation(
    manifest_path: &Path,
    options: &TrainOptions,
    out_dir: &Path,
) -> Result<PathBuf> {
    let out_dir = resolve_output(out_dir);
    let manifest = load_manifest(manifest_path)?;
    let config = FederationConfig {
        client_count: manifest.partition.client_count(),
        rounds: options.rounds,
        batch_size: options.batch_size,
        learning_rate: options.learning_rate,
        seed: options.seed,
    };
    let params = init_params(
        &ModelConfig {
            feature_dim: manifest.feature_dim,
            hidden_dim: options.hidden_dim,
            gcn_layers: options.gcn_layers,
            classes: manifest.class_count.max(2),
            pooling: options.pooling,
        },
        &mut rng_from_seed(derive_seed(options.seed, STREAM_MODEL, 0)),
    )?;

    std::fs::create_dir_all(&out_dir)?;
    if options.rounds == 0 {
        eprintln!("warning: --rounds 0 records no transcripts");
    }
    let transcripts = run_federation(
        &config,
        &options.defense,
        &manifest.graphs,
        &manifest.partition,
        &params,
    )?;
    for t in &transcripts {
        save_transcript(&out_dir, t)?;
    }
    let record = TrainRecord {
        manifest_path: manifest_path.to_path_buf(),
        options: options.clone(),
    };
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(out_dir.join("train_config.json"), text)?;
    Ok(out_dir)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum AuxSource {
    /// Random graphs on the victim grid.
    ErdosRenyi { edge_probability: f64, features: FeatureModel },
    /// Dataset graphs that are not victims of the attacked round.
    Dataset,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackOptions {
    pub round: usize,
    pub aux: AuxSource,
    pub aux_count: usize,
    pub lambda: f64,
    pub adapter_reweighting: bool,
    pub decoder_epochs: usize,
    pub decoder_batch: usize,
    pub edge_threshold: f64,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub baseline_random: bool,
    /// Drop the adaptation term entirely (the `lambda = 0` arm).
    pub ablate_adapter: bool,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            round: 0,
            aux: AuxSource::ErdosRenyi {
                edge_probability: 0.15,
                features: FeatureModel::OneHot { classes: 8 },
            },
            aux_count: 150,
            lambda: 0.2,
            adapter_reweighting: false,
            decoder_epochs: 300,
            decoder_batch: 16,
            edge_threshold: 0.5,
            seeds: vec![1],
            workers: 1,
            baseline_random: false,
            ablate_adapter: false,
        }
    }
}

/// One attacked private graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackRow {
    pub seed: u64,
    pub round: usize,
    pub client: usize,
    pub graph_index: usize,
    pub node_count: usize,
    pub feature_mse: Option<f64>,
    pub feature_acc: Option<f64>,
    pub structure_auc: Option<f64>,
    pub structure_ap: Option<f64>,
    pub edge_acc: Option<f64>,
    pub extraction_residual: Option<f64>,
    pub baseline: Option<BaselineRow>,
    /// Set when a stage fell back to its prior (extraction unavailable or
    /// recovery degenerate under a defense).
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineRow {
    pub feature_mse: f64,
    pub feature_acc: f64,
    pub structure_auc: Option<f64>,
    pub structure_ap: Option<f64>,
    pub edge_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub decoder_reconstruction_loss: f64,
    pub decoder_adaptation_distance: f64,
    pub decoder_total_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub rows: Vec<AttackRow>,
    pub seed_reports: Vec<SeedReport>,
}

/// Attack every client bundle of the chosen recorded round, once per seed.
/// Rows are ordered by (seed, client, batch member) regardless of the worker
/// count; per-seed work runs on a bounded pool.
pub fn attack_transcripts(
    manifest: &DatasetManifest,
    transcripts: &[RoundTranscript],
    options: &AttackOptions,
) -> Result<AttackOutcome> {
    if options.seeds.is_empty() {
        return Err(Error::Config("need at least one attack seed".into()));
    }
    if options.workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    let transcript = transcripts
        .iter()
        .find(|t| t.round == options.round)
        .ok_or_else(|| Error::Config(format!("round {} is not recorded", options.round)))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let per_seed: Vec<Result<(Vec<AttackRow>, SeedReport)>> = pool.install(|| {
        use rayon::prelude::*;
        options
            .seeds
            .par_iter()
            .map(|&seed| attack_one_seed(manifest, transcript, options, seed))
            .collect()
    });

    let mut rows = Vec::new();
    let mut seed_reports = Vec::new();
    for result in per_seed {
        let (mut seed_rows, report) = result?;
        rows.append(&mut seed_rows);
        seed_reports.push(report);
    }
    Ok(AttackOutcome { rows, seed_reports })
}

fn attack_one_seed(
    manifest: &DatasetManifest,
    transcript: &RoundTranscript,
    options: &AttackOptions,
    seed: u64,
) -> Result<(Vec<AttackRow>, SeedReport)> {
    let params = &transcript.params_before;
    let victim_indices: Vec<usize> =
        transcript.eval_batch_indices.iter().flatten().copied().collect();

    let auxiliaries: Vec<Graph> = match &options.aux {
        AuxSource::ErdosRenyi { edge_probability, features } => generate_auxiliary(
            &AuxiliarySpec {
                structure: StructureModel::ErdosRenyi { edge_probability: *edge_probability },
                features: features.clone(),
                graph_count: options.aux_count,
                max_nodes: manifest.max_nodes,
                label_classes: manifest.class_count.max(2),
            },
            derive_seed(seed, STREAM_AUX, 0),
        )?,
        AuxSource::Dataset => {
            let non_victims: Vec<Graph> = manifest
                .graphs
                .iter()
                .enumerate()
                .filter(|(i, _)| !victim_indices.contains(i))
                .map(|(_, g)| g.clone())
                .collect();
            if non_victims.is_empty() {
                return Err(Error::Config(
                    "dataset auxiliaries requested but every graph is a victim".into(),
                ));
            }
            draw_auxiliary_from_dataset(
                &non_victims,
                options.aux_count,
                manifest.max_nodes,
                derive_seed(seed, STREAM_AUX, 0),
            )?
        }
    };

    if let Some(bad) = auxiliaries.iter().find(|g| g.feature_dim() != manifest.feature_dim) {
        return Err(Error::Config(format!(
            "auxiliary feature dimension {} does not match the dataset's {}; the frozen encoder cannot embed them",
            bad.feature_dim(),
            manifest.feature_dim
        )));
    }

    let mut config = AttackConfig::new(manifest.max_nodes);
    config.lambda = if options.ablate_adapter { 0.0 } else { options.lambda };
    config.adapter_reweighting = options.adapter_reweighting;
    config.decoder_epochs = options.decoder_epochs;
    config.decoder_batch = options.decoder_batch;
    config.edge_threshold = options.edge_threshold;

    let victims: Vec<LeakedEmbedding> = transcript
        .client_bundles
        .iter()
        .filter_map(|bundle| extract_embedding(bundle).ok())
        .collect();
    let (decoder, report) = train_structure_decoder(
        params,
        &auxiliaries,
        &victims,
        &config,
        &mut rng_from_seed(derive_seed(seed, STREAM_DECODER, 0)),
    )?;

    // Size-conditioned prior inputs for corrupted extractions: the mean
    // auxiliary embedding among graphs of (nearly) the victim's node count.
    let aux_embeddings: Vec<(usize, Matrix)> = auxiliaries
        .iter()
        .map(|g| Ok((g.node_count(), pooled_embedding(params, g)?)))
        .collect::<Result<_>>()?;
    let prior = EmbeddingPrior { entries: aux_embeddings, dim: decoder.input_dim() };

    let mut baseline_rng = rng_from_seed(derive_seed(seed, STREAM_BASELINE, 0));
    let mut rows = Vec::new();
    for (client, bundle) in transcript.client_bundles.iter().enumerate() {
        for &graph_index in &transcript.eval_batch_indices[client] {
            let truth = &manifest.graphs[graph_index];
            let n = truth.node_count();
            let mut row = AttackRow {
                seed,
                round: transcript.round,
                client,
                graph_index,
                node_count: n,
                feature_mse: None,
                feature_acc: None,
                structure_auc: None,
                structure_ap: None,
                edge_acc: None,
                extraction_residual: None,
                baseline: None,
                note: None,
            };
            if options.baseline_random {
                let baseline = random_baseline(n, manifest.feature_dim, &mut baseline_rng);
                let (auc, ap) =
                    structure_auc_ap(truth.adjacency(), &baseline.edge_probabilities)?;
                row.baseline = Some(BaselineRow {
                    feature_mse: feature_mse(truth.node_features(), &baseline.features_hat)?,
                    feature_acc: feature_acc(truth.node_features(), &baseline.features_hat)?,
                    structure_auc: auc,
                    structure_ap: ap,
                    edge_acc: edge_acc(truth.adjacency(), &baseline.adjacency_hat)?,
                });
            }

            let (metrics, note) =
                attack_single(params, bundle, &decoder, truth, &config, &prior)?;
            row.feature_mse = Some(metrics.0);
            row.feature_acc = Some(metrics.1);
            row.structure_auc = metrics.2;
            row.structure_ap = metrics.3;
            row.edge_acc = Some(metrics.4);
            row.extraction_residual = metrics.5;
            row.note = note;
            rows.push(row);
        }
    }
    Ok((
        rows,
        SeedReport {
            seed,
            decoder_reconstruction_loss: report.reconstruction_loss,
            decoder_adaptation_distance: report.adaptation_distance,
            decoder_total_loss: report.total_loss,
        },
    ))
}

type SingleMetrics = (f64, f64, Option<f64>, Option<f64>, f64, Option<f64>);

struct EmbeddingPrior {
    entries: Vec<(usize, Matrix)>,
    dim: usize,
}

impl EmbeddingPrior {
    /// Mean auxiliary embedding over graphs whose node count is as close as
    /// possible to `n`.
    fn for_node_count(&self, n: usize) -> Matrix {
        let mut best_gap = usize::MAX;
        for (count, _) in &self.entries {
            best_gap = best_gap.min(count.abs_diff(n));
        }
        let mut mean = Matrix::zeros(1, self.dim);
        let mut hits = 0usize;
        for (count, embedding) in &self.entries {
            if count.abs_diff(n) == best_gap {
                for (m, &v) in mean.data_mut().iter_mut().zip(embedding.data().iter()) {
                    *m += v;
                }
                hits += 1;
            }
        }
        if hits > 0 {
            mean = mean.scale(1.0 / hits as f64);
        }
        mean
    }
}

// Defenses can ruin a stage outright; an attacker then falls back to the
// stage's prior rather than producing nothing: the decoder's response to a
// zero embedding for structure, the all-zero minimum-norm estimate for
// features. Fallbacks are reported in the row note.
fn attack_single(
    params: &fgl_core::nn::ModelParams,
    bundle: &fgl_core::nn::GradientBundle,
    decoder: &StructureDecoder,
    truth: &Graph,
    config: &AttackConfig,
    prior: &EmbeddingPrior,
) -> Result<(SingleMetrics, Option<String>)> {
    let mut note: Option<String> = None;
    let prior_embedding = || LeakedEmbedding {
        pooled: prior.for_node_count(truth.node_count()),
        logit_gradient: bundle.grad_b.clone(),
        source: None,
    };
    let (leaked, residual) = match extract_embedding(bundle) {
        Ok(leaked) => {
            let residual = outer_product_residual(bundle, &leaked);
            // Pruned gradients are visible in the shared bundle itself (a
            // majority of exact zeros); when the extracted embedding is also
            // mostly zeroed, the division came back empty and the structural
            // prior beats a known-corrupt embedding.
            let bundle_zeros: usize = bundle
                .tensors()
                .iter()
                .map(|t| t.data().iter().filter(|v| **v == 0.0).count())
                .sum();
            let pruned_bundle = bundle_zeros * 2 > bundle.entry_count();
            let zeroed_embedding =
                leaked.pooled.data().iter().filter(|v| **v == 0.0).count() * 2
                    > leaked.pooled.data().len();
            if pruned_bundle && zeroed_embedding {
                note = Some(format!(
                    "structure prior fallback: bundle pruned ({bundle_zeros} zero entries), extracted embedding mostly zeroed"
                ));
                (prior_embedding(), Some(residual))
            } else {
                (leaked, Some(residual))
            }
        }
        Err(e @ Error::LeakageUnavailable(_)) => {
            note = Some(format!("structure prior fallback: {e}"));
            (prior_embedding(), None)
        }
        Err(e) => return Err(e),
    };
    let structure = recover_structure(decoder, &leaked, truth.node_count(), config)?;
    let features = match recover_features(params, bundle, &structure.adjacency, config) {
        Ok(recovery) => recovery.features,
        Err(e @ Error::RecoveryDegenerate(_)) => {
            note = Some(match note {
                Some(prev) => format!("{prev}; zero-feature fallback: {e}"),
                None => format!("zero-feature fallback: {e}"),
            });
            fgl_core::Matrix::zeros(truth.node_count(), truth.feature_dim())
        }
        Err(e) => return Err(e),
    };

    let n = truth.node_count();
    let probs = structure.probabilities.crop(n, n)?;
    let (auc, ap) = structure_auc_ap(truth.adjacency(), &probs)?;
    Ok((
        (
            feature_mse(truth.node_features(), &features)?,
            feature_acc(truth.node_features(), &features)?,
            auc,
            ap,
            edge_acc(truth.adjacency(), &structure.adjacency)?,
            residual,
        ),
        note,
    ))
}

/// Load everything `attack` needs from a recorded training run.
pub fn load_training_run(transcript_dir: &Path) -> Result<(DatasetManifest, Vec<RoundTranscript>)> {
    let record_path = transcript_dir.join("train_config.json");
    let text = std::fs::read_to_string(&record_path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", record_path.display())))
    })?;
    let record: TrainRecord = serde_json::from_str(&text)?;
    let manifest = load_manifest(&record.manifest_path)?;
    let transcripts = load_transcript_dir(transcript_dir)?;
    Ok((manifest, transcripts))
}

/// Config echo embedded in report headers; deliberately free of absolute
/// paths and worker counts so reruns compare byte-for-byte.
pub fn attack_config_echo(options: &AttackOptions) -> serde_json::Value {
    json!({
        "round": options.round,
        "aux": options.aux,
        "aux_count": options.aux_count,
        "lambda": if options.ablate_adapter { 0.0 } else { options.lambda },
        "adapter_reweighting": options.adapter_reweighting,
        "ablate_adapter": options.ablate_adapter,
        "decoder_epochs": options.decoder_epochs,
        "decoder_batch": options.decoder_batch,
        "edge_threshold": options.edge_threshold,
        "seeds": options.seeds,
        "baseline_random": options.baseline_random,
    })
}
