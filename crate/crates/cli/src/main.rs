//! `fgl`: prepare datasets, run recorded federations, attack the records,
//! verify the numerics.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 I/O or data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fgl_cli::experiment::{
    self, attack_transcripts, load_training_run, prepare_dataset, AttackOptions, AuxSource,
    DatasetSource, PrepareOptions, TrainOptions,
};
use fgl_cli::report;
use fgl_cli::verify::{run_suite, FaultInjection, SuiteOptions};
use fgl_core::error::Error;
use fgl_core::fed::DefenseConfig;
use fgl_core::graph::FeatureModel;
use fgl_core::nn::PoolingDescriptor;

#[derive(Parser)]
#[command(
    name = "fgl",
    about = "Federated graph learning simulator and gradient-leakage attack toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse or generate a dataset and partition it across clients.
    Prepare(PrepareArgs),
    /// Run the federation and record per-round transcripts.
    Train(TrainArgs),
    /// Reconstruct private graphs from recorded transcripts and score them.
    Attack(AttackArgs),
    /// Run the oracle and property suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// TU-format dataset directory (expects <dir>/<NAME>_*.txt).
    #[arg(long, conflicts_with = "synthetic")]
    tu: Option<PathBuf>,
    /// Dataset name inside the TU directory; defaults to the directory name.
    #[arg(long)]
    name: Option<String>,
    /// Synthetic source, e.g. `er:0.15`.
    #[arg(long)]
    synthetic: Option<String>,
    /// Synthetic feature model: onehot:K, gaussian:MEAN,VAR or uniform:LO,HI.
    #[arg(long, default_value = "onehot:8")]
    features: String,
    /// Feature vector dimension for the gaussian/uniform models.
    #[arg(long, default_value_t = 1)]
    feature_dim: usize,
    /// Synthetic graph count.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Largest node count (filter for TU data, bound for synthetic data).
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Graph label classes for synthetic data.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    clients: usize,
    /// Dirichlet concentration for the label partition.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "out/dataset")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest written by `prepare`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// sum, mean or max[:K].
    #[arg(long, default_value = "sum")]
    pool: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// none, gradient-compression:P, dp-gradients:B, dp-activations:B or
    /// dp-hybrid:B.
    #[arg(long, default_value = "none")]
    defense: String,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value = "out/run")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Transcript directory written by `train`.
    #[arg(long)]
    transcripts: PathBuf,
    /// Recorded round to attack (0 = the first).
    #[arg(long, default_value_t = 0)]
    round: usize,
    /// Auxiliary source: `dataset` or `er:P`.
    #[arg(long, default_value = "er:0.15")]
    aux: String,
    /// Feature model for generated auxiliaries.
    #[arg(long, default_value = "onehot:8")]
    aux_features: String,
    #[arg(long, default_value_t = 150)]
    aux_count: usize,
    /// Weight of the distribution-adaptation term.
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    /// Drop the adapter (the lambda = 0 ablation arm).
    #[arg(long, default_value_t = false)]
    ablate_adapter: bool,
    /// Also importance-weight auxiliary samples by embedding distance.
    #[arg(long, default_value_t = false)]
    adapter_reweighting: bool,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    decoder_batch: usize,
    #[arg(long, default_value_t = 0.5)]
    edge_threshold: f64,
    /// Comma-separated attack seeds.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Additionally score the uninformed random baseline.
    #[arg(long = "baseline", value_parser = ["random"])]
    baseline: Option<String>,
    #[arg(long, default_value = "out/attack")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Subset of checks that completes within a minute.
    #[arg(long, default_value_t = false)]
    quick: bool,
    /// Negative control: corrupt the gradient recursion and require the
    /// finite-difference check to catch it.
    #[arg(long, default_value_t = false)]
    inject_gradient_fault: bool,
}

/// `dim` applies to the gaussian/uniform vector models; one-hot features
/// carry their own dimension (the class count).
fn parse_features(text: &str, dim: usize) -> Result<FeatureModel, Error> {
    let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
    match kind {
        "onehot" => Ok(FeatureModel::OneHot {
            classes: rest
                .parse()
                .map_err(|_| Error::Config(format!("bad one-hot class count {rest:?}")))?,
        }),
        "gaussian" => {
            let (mean, variance) = rest
                .split_once(',')
                .ok_or_else(|| Error::Config("gaussian needs MEAN,VAR".into()))?;
            Ok(FeatureModel::Gaussian {
                mean: mean.parse().map_err(|_| Error::Config(format!("bad mean {mean:?}")))?,
                variance: variance
                    .parse()
                    .map_err(|_| Error::Config(format!("bad variance {variance:?}")))?,
                dim,
            })
        }
        "uniform" => {
            let (low, high) = rest
                .split_once(',')
                .ok_or_else(|| Error::Config("uniform needs LO,HI".into()))?;
            Ok(FeatureModel::Uniform {
                low: low.parse().map_err(|_| Error::Config(format!("bad bound {low:?}")))?,
                high: high.parse().map_err(|_| Error::Config(format!("bad bound {high:?}")))?,
                dim,
            })
        }
        other => Err(Error::Config(format!("unknown feature model {other:?}"))),
    }
}

fn parse_er(text: &str) -> Result<f64, Error> {
    let p = text
        .strip_prefix("er:")
        .ok_or_else(|| Error::Config(format!("expected er:P, got {text:?}")))?;
    p.parse().map_err(|_| Error::Config(format!("bad edge probability {p:?}")))
}

fn run_prepare(args: &PrepareArgs) -> Result<(), Error> {
    let source = match (&args.tu, &args.synthetic) {
        (Some(root), None) => {
            let name = args.name.clone().or_else(|| {
                root.file_name().map(|n| n.to_string_lossy().to_string())
            });
            DatasetSource::Tu {
                root: root.clone(),
                name: name.ok_or_else(|| Error::Config("cannot infer dataset name".into()))?,
                max_nodes: args.max_nodes,
            }
        }
        (None, Some(spec)) => DatasetSource::Synthetic {
            edge_probability: parse_er(spec)?,
            features: parse_features(&args.features, args.feature_dim)?,
            graph_count: args.count,
            max_nodes: args.max_nodes.unwrap_or(15),
            label_classes: args.classes,
        },
        _ => return Err(Error::Config("pass exactly one of --tu or --synthetic".into())),
    };
    let options =
        PrepareOptions { source, clients: args.clients, alpha: args.alpha, seed: args.seed };
    let (path, hash) = prepare_dataset(&options, &args.out)?;
    println!("manifest: {}", path.display());
    println!("sha256: {hash}");
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), Error> {
    let options = TrainOptions {
        rounds: args.rounds,
        gcn_layers: args.layers,
        hidden_dim: args.hidden,
        pooling: PoolingDescriptor::parse(&args.pool)?,
        learning_rate: args.lr,
        batch_size: args.batch,
        defense: DefenseConfig::parse(&args.defense)?,
        seed: args.seed,
    };
    let dir = experiment::train_federation(&args.manifest, &options, &args.out)?;
    println!("transcripts: {}", dir.display());
    Ok(())
}

fn run_attack(args: &AttackArgs) -> Result<(), Error> {
    let (manifest, transcripts) = load_training_run(&args.transcripts)?;
    // Generated auxiliaries must feed the recorded encoder, so vector
    // feature models inherit the dataset's feature dimension.
    let aux = if args.aux == "dataset" {
        AuxSource::Dataset
    } else {
        AuxSource::ErdosRenyi {
            edge_probability: parse_er(&args.aux)?,
            features: parse_features(&args.aux_features, manifest.feature_dim)?,
        }
    };
    let options = AttackOptions {
        round: args.round,
        aux,
        aux_count: args.aux_count,
        lambda: args.lambda,
        adapter_reweighting: args.adapter_reweighting,
        decoder_epochs: args.epochs,
        decoder_batch: args.decoder_batch,
        edge_threshold: args.edge_threshold,
        seeds: args.seeds.clone(),
        workers: args.workers,
        baseline_random: args.baseline.as_deref() == Some("random"),
        ablate_adapter: args.ablate_adapter,
    };
    let outcome = attack_transcripts(&manifest, &transcripts, &options)?;

    let out_dir = experiment::resolve_output(&args.out);
    let echo = experiment::attack_config_echo(&options);
    let csv_path = out_dir.join("metrics.csv");
    report::write_metrics_csv(&csv_path, &outcome, &echo)?;
    let full_config = serde_json::json!({
        "attack": echo,
        "workers": options.workers,
        "transcripts": args.transcripts,
    });
    let summary_path = out_dir.join("summary.json");
    report::write_summary_json(&summary_path, &outcome, &full_config)?;
    println!("metrics: {}", csv_path.display());
    println!("summary: {}", summary_path.display());
    Ok(())
}

fn exit_code_for(error: &Error) -> ExitCode {
    match error {
        Error::Config(_) | Error::Input(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Prepare(args) => run_prepare(args),
        Command::Train(args) => run_train(args),
        Command::Attack(args) => run_attack(args),
        Command::Verify(args) => {
            let fault = if args.inject_gradient_fault {
                FaultInjection::GradientRecursionSign
            } else {
                FaultInjection::None
            };
            let passed = run_suite(&SuiteOptions { quick: args.quick, fault });
            return if passed { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
