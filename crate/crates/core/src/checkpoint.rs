//! Versioned on-disk formats.
//!
//! Everything is JSON with `f64` values stored as hexadecimal bit patterns
//! (see the matrix serializer), so checkpoints round-trip bit-for-bit and
//! reruns can be compared byte-wise.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::RoundTranscript;
use crate::graph::{DatasetPartition, Graph};
use crate::nn::ModelParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u32,
    #[serde(flatten)]
    payload: T,
}

fn save_json<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let wrapped = Versioned { format_version: FORMAT_VERSION, payload };
    let mut text = serde_json::to_string_pretty(&wrapped)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let wrapped: Versioned<T> = serde_json::from_str(&text)?;
    if wrapped.format_version != FORMAT_VERSION {
        return Err(Error::Serialization(format!(
            "{}: format version {} unsupported (expected {})",
            path.display(),
            wrapped.format_version,
            FORMAT_VERSION
        )));
    }
    Ok(wrapped.payload)
}

// Wrappers keep #[serde(flatten)] happy for list-shaped payloads.
#[derive(Serialize, Deserialize)]
struct ParamsPayload {
    params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct TranscriptPayload {
    transcript: RoundTranscript,
}

/// Dataset manifest: the canonical graphs plus their client partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub feature_dim: usize,
    pub class_count: usize,
    pub max_nodes: usize,
    pub partition: DatasetPartition,
    pub seed: u64,
    /// Resolved preparation settings, echoed for the audit trail.
    pub config_echo: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestPayload {
    manifest: DatasetManifest,
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    save_json(path, &ParamsPayload { params: params.clone() })
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    Ok(load_json::<ParamsPayload>(path)?.params)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    save_json(path, &ManifestPayload { manifest: manifest.clone() })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(load_json::<ManifestPayload>(path)?.manifest)
}

pub fn transcript_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round:04}.json"))
}

pub fn save_transcript(dir: &Path, transcript: &RoundTranscript) -> Result<()> {
    save_json(
        &transcript_path(dir, transcript.round),
        &TranscriptPayload { transcript: transcript.clone() },
    )
}

pub fn load_transcript(path: &Path) -> Result<RoundTranscript> {
    Ok(load_json::<TranscriptPayload>(path)?.transcript)
}

/// All transcripts in a directory, ordered by round.
pub fn load_transcript_dir(dir: &Path) -> Result<Vec<RoundTranscript>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("round_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    let mut transcripts = Vec::with_capacity(paths.len());
    for p in paths {
        transcripts.push(load_transcript(&p)?);
    }
    for (i, t) in transcripts.iter().enumerate() {
        if t.round != i {
            return Err(Error::Integrity(format!(
                "{}: transcript rounds are not contiguous (found {} at position {i})",
                dir.display(),
                t.round
            )));
        }
    }
    Ok(transcripts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::{run_federation, DefenseConfig, FederationConfig};
    use crate::graph::{
        generate_auxiliary, partition_dirichlet, AuxiliarySpec, FeatureModel, StructureModel,
    };
    use crate::nn::{init_params, ModelConfig, PoolingDescriptor};
    use crate::rng::rng_from_seed;

    #[test]
    fn params_round_trip_bit_exact() {
        let params = init_params(
            &ModelConfig {
                feature_dim: 3,
                hidden_dim: 4,
                gcn_layers: 2,
                classes: 2,
                pooling: PoolingDescriptor::Mean,
            },
            &mut rng_from_seed(1),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        save_params(&path, &params).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(params, back);
        for (a, b) in params.tensors().iter().zip(back.tensors().iter()) {
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn transcript_directory_round_trip() {
        let graphs = generate_auxiliary(
            &AuxiliarySpec {
                structure: StructureModel::ErdosRenyi { edge_probability: 0.4 },
                features: FeatureModel::OneHot { classes: 3 },
                graph_count: 6,
                max_nodes: 5,
                label_classes: 2,
            },
            2,
        )
        .unwrap();
        let partition = partition_dirichlet(&graphs, 2, 1.0, 3).unwrap();
        let params = init_params(
            &ModelConfig {
                feature_dim: 3,
                hidden_dim: 4,
                gcn_layers: 2,
                classes: 2,
                pooling: PoolingDescriptor::Sum,
            },
            &mut rng_from_seed(4),
        )
        .unwrap();
        let transcripts = run_federation(
            &FederationConfig {
                client_count: 2,
                rounds: 2,
                batch_size: 1,
                learning_rate: 0.1,
                seed: 5,
            },
            &DefenseConfig::DpGradients { noise_scale: 0.05 },
            &graphs,
            &partition,
            &params,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        for t in &transcripts {
            save_transcript(dir.path(), t).unwrap();
        }
        let back = load_transcript_dir(dir.path()).unwrap();
        assert_eq!(transcripts, back);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        std::fs::write(&path, r#"{"format_version": 99, "params": {}}"#).unwrap();
        assert!(load_params(&path).is_err());
    }
}
