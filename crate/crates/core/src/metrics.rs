//! Recovery quality metrics.
//!
//! Structure metrics (AUC, AP, edge accuracy) are computed over the strict
//! upper triangle: the diagonal is never part of an adjacency and symmetric
//! pairs would only double every count. Reports state this convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Scores for one recovered graph. `structure_auc`/`structure_ap` are `None`
/// when the ground truth has no positive (or for AUC, no negative) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub feature_mse: f64,
    pub feature_acc: f64,
    pub structure_auc: Option<f64>,
    pub structure_ap: Option<f64>,
    pub edge_acc: f64,
}

/// Mean squared entry difference over the whole feature matrix.
pub fn feature_mse(x_true: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x_true.shape() != x_hat.shape() {
        return Err(Error::Shape(format!(
            "feature mse on {:?} vs {:?}",
            x_true.shape(),
            x_hat.shape()
        )));
    }
    let n = x_true.data().len() as f64;
    Ok(x_true
        .data()
        .iter()
        .zip(x_hat.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Fraction of nodes whose recovered argmax class matches the one-hot ground
/// truth. Argmax ties resolve to the lowest index.
pub fn feature_acc(x_true: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x_true.shape() != x_hat.shape() {
        return Err(Error::Shape(format!(
            "feature acc on {:?} vs {:?}",
            x_true.shape(),
            x_hat.shape()
        )));
    }
    let mut hits = 0usize;
    for i in 0..x_true.rows() {
        let row = x_true.row(i);
        let ones: Vec<usize> =
            row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, _)| j).collect();
        if ones.len() != 1 || row[ones[0]] != 1.0 {
            return Err(Error::Input(format!("ground-truth row {i} is not one-hot")));
        }
        if argmax(x_hat.row(i)) == ones[0] {
            hits += 1;
        }
    }
    Ok(hits as f64 / x_true.rows() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn upper_triangle_pairs(adj_true: &Matrix, scores: &Matrix) -> Result<Vec<(f64, bool)>> {
    if adj_true.rows() != adj_true.cols() || adj_true.shape() != scores.shape() {
        return Err(Error::Shape(format!(
            "structure metrics on {:?} vs {:?}",
            adj_true.shape(),
            scores.shape()
        )));
    }
    let n = adj_true.rows();
    let mut pairs = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((scores[(i, j)], adj_true[(i, j)] != 0.0));
        }
    }
    Ok(pairs)
}

/// ROC AUC (Mann–Whitney rank statistic with midrank tie handling) and
/// average precision over the upper-triangle edge scores.
pub fn structure_auc_ap(
    adj_true: &Matrix,
    edge_probs: &Matrix,
) -> Result<(Option<f64>, Option<f64>)> {
    let pairs = upper_triangle_pairs(adj_true, edge_probs)?;
    let positives = pairs.iter().filter(|(_, label)| *label).count();
    let negatives = pairs.len() - positives;
    let auc = if positives == 0 || negatives == 0 { None } else { Some(rank_auc(&pairs)) };
    let ap = if positives == 0 { None } else { Some(average_precision(&pairs)) };
    Ok((auc, ap))
}

fn rank_auc(pairs: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<&(f64, bool)> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let positives = pairs.iter().filter(|(_, l)| *l).count() as f64;
    let negatives = pairs.len() as f64 - positives;

    // Midranks over tie groups, accumulated for the positive class.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &sorted[i..j] {
            if item.1 {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives)
}

fn average_precision(pairs: &[(f64, bool)]) -> f64 {
    // Descending scores, ties broken by original pair order (stable sort).
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs[b].0.partial_cmp(&pairs[a].0).unwrap_or(std::cmp::Ordering::Equal)
    });
    let positives = pairs.iter().filter(|(_, l)| *l).count() as f64;
    let mut tp = 0.0;
    let mut seen = 0.0;
    let mut ap = 0.0;
    for &idx in &order {
        seen += 1.0;
        if pairs[idx].1 {
            tp += 1.0;
            ap += (tp / seen) / positives;
        }
    }
    ap
}

/// Fraction of agreeing upper-triangle entries between two binary
/// adjacencies. Vacuously 1 for single-node graphs.
pub fn edge_acc(adj_true: &Matrix, adj_hat: &Matrix) -> Result<f64> {
    if adj_true.rows() != adj_true.cols() || adj_true.shape() != adj_hat.shape() {
        return Err(Error::Shape(format!(
            "edge acc on {:?} vs {:?}",
            adj_true.shape(),
            adj_hat.shape()
        )));
    }
    let n = adj_true.rows();
    if n < 2 {
        return Ok(1.0);
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if (adj_true[(i, j)] != 0.0) == (adj_hat[(i, j)] != 0.0) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / total as f64)
}
