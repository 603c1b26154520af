//! CSV and JSON report writers.
//!
//! Reports embed the resolved configuration and the structure-metric
//! convention (strict upper triangle, diagonal excluded). Floats are written
//! in their shortest round-trip form, so identical runs produce identical
//! bytes.

use std::path::Path;

use serde_json::json;

use fgl_core::error::Result;

use crate::experiment::{AttackOutcome, AttackRow};

pub const CONVENTION_NOTE: &str =
    "structure metrics over the strict upper triangle: diagonal excluded, symmetric pairs deduplicated";

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "NA".to_string(),
    }
}

/// One CSV row per attacked graph; baseline columns are filled only when the
/// random baseline was requested.
pub fn write_metrics_csv(
    path: &Path,
    outcome: &AttackOutcome,
    config_echo: &serde_json::Value,
) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("# convention: {CONVENTION_NOTE}\n"));
    text.push_str(&format!("# config: {config_echo}\n"));
    text.push_str(
        "seed,round,client,graph_index,node_count,feature_mse,feature_acc,structure_auc,structure_ap,edge_acc,extraction_residual,baseline_feature_mse,baseline_feature_acc,baseline_structure_auc,baseline_structure_ap,baseline_edge_acc,note\n",
    );
    for row in &outcome.rows {
        let baseline = row.baseline.as_ref();
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.seed,
            row.round,
            row.client,
            row.graph_index,
            row.node_count,
            fmt_opt(row.feature_mse),
            fmt_opt(row.feature_acc),
            fmt_opt(row.structure_auc),
            fmt_opt(row.structure_ap),
            fmt_opt(row.edge_acc),
            fmt_opt(row.extraction_residual),
            fmt_opt(baseline.map(|b| b.feature_mse)),
            fmt_opt(baseline.map(|b| b.feature_acc)),
            fmt_opt(baseline.and_then(|b| b.structure_auc)),
            fmt_opt(baseline.and_then(|b| b.structure_ap)),
            fmt_opt(baseline.map(|b| b.edge_acc)),
            row.note.as_deref().unwrap_or(""),
        ));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Unweighted mean over the attacked graphs, skipping undefined entries.
pub fn mean_of(rows: &[AttackRow], f: impl Fn(&AttackRow) -> Option<f64>) -> Option<f64> {
    let values: Vec<f64> = rows.iter().filter_map(f).collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn aggregate(rows: &[AttackRow]) -> serde_json::Value {
    json!({
        "graphs": rows.len(),
        "fallback_rows": rows.iter().filter(|r| r.note.is_some()).count(),
        "feature_mse": mean_of(rows, |r| r.feature_mse),
        "feature_acc": mean_of(rows, |r| r.feature_acc),
        "structure_auc": mean_of(rows, |r| r.structure_auc),
        "structure_ap": mean_of(rows, |r| r.structure_ap),
        "edge_acc": mean_of(rows, |r| r.edge_acc),
        "baseline_feature_mse": mean_of(rows, |r| r.baseline.as_ref().map(|b| b.feature_mse)),
        "baseline_feature_acc": mean_of(rows, |r| r.baseline.as_ref().map(|b| b.feature_acc)),
        "baseline_structure_auc": mean_of(rows, |r| r.baseline.as_ref().and_then(|b| b.structure_auc)),
        "baseline_structure_ap": mean_of(rows, |r| r.baseline.as_ref().and_then(|b| b.structure_ap)),
        "baseline_edge_acc": mean_of(rows, |r| r.baseline.as_ref().map(|b| b.edge_acc)),
    })
}

/// Aggregate summary: per-seed and overall means plus the full config echo.
pub fn write_summary_json(
    path: &Path,
    outcome: &AttackOutcome,
    full_config: &serde_json::Value,
) -> Result<()> {
    let mut seeds: Vec<u64> = outcome.rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let per_seed: Vec<serde_json::Value> = seeds
        .iter()
        .map(|&seed| {
            let rows: Vec<AttackRow> =
                outcome.rows.iter().filter(|r| r.seed == seed).cloned().collect();
            let decoder = outcome.seed_reports.iter().find(|r| r.seed == seed);
            json!({
                "seed": seed,
                "aggregate": aggregate(&rows),
                "decoder": decoder.map(|d| json!({
                    "reconstruction_loss": d.decoder_reconstruction_loss,
                    "adaptation_distance": d.decoder_adaptation_distance,
                    "total_loss": d.decoder_total_loss,
                })),
            })
        })
        .collect();

    let summary = json!({
        "convention": CONVENTION_NOTE,
        "config": full_config,
        "per_seed": per_seed,
        "overall": aggregate(&outcome.rows),
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
