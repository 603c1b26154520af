//! Graph data model, TU-format ingestion, non-i.i.d. partitioning and
//! synthetic graph generation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

/// One labelled graph: the unit of private data.
///
/// The adjacency is symmetric 0/1 with a zero diagonal; self-loops only enter
/// during normalization. Feature rows align with adjacency rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    node_features: Matrix,
    adjacency: Matrix,
    label: usize,
}

impl Graph {
    pub fn new(node_features: Matrix, adjacency: Matrix, label: usize) -> Result<Self> {
        if adjacency.rows() != adjacency.cols() {
            return Err(Error::Shape("adjacency must be square".into()));
        }
        if node_features.rows() != adjacency.rows() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} nodes",
                node_features.rows(),
                adjacency.rows()
            )));
        }
        if node_features.rows() == 0 {
            return Err(Error::Shape("graph needs at least one node".into()));
        }
        node_features.check_finite("node features")?;
        let n = adjacency.rows();
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::Integrity(format!("self-loop at node {i}")));
            }
            for j in 0..n {
                let v = adjacency[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Integrity(format!("adjacency entry ({i},{j}) = {v}")));
                }
                if v != adjacency[(j, i)] {
                    return Err(Error::Integrity(format!("asymmetric adjacency at ({i},{j})")));
                }
            }
        }
        Ok(Graph { node_features, adjacency, label })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn edge_count(&self) -> usize {
        let n = self.node_count();
        let mut count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency[(i, j)] == 1.0 {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Symmetrically normalized adjacency with self-loops added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAdjacency {
    matrix: Matrix,
    source_node_count: usize,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn source_node_count(&self) -> usize {
        self.source_node_count
    }
}

/// Degree-normalize `adjacency + I` symmetrically.
pub fn normalize_adjacency(graph: &Graph) -> NormalizedAdjacency {
    NormalizedAdjacency {
        matrix: normalize_adjacency_matrix(graph.adjacency()),
        source_node_count: graph.node_count(),
    }
}

/// Matrix-level form of [`normalize_adjacency`]; also consumed by the attack,
/// which normalizes an *estimated* adjacency the same way.
pub fn normalize_adjacency_matrix(adjacency: &Matrix) -> Matrix {
    let n = adjacency.rows();
    let with_loops = Matrix::from_fn(n, n, |i, j| adjacency[(i, j)] + if i == j { 1.0 } else { 0.0 });
    let inv_sqrt_degree: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = with_loops.row(i).iter().sum();
            1.0 / d.sqrt()
        })
        .collect();
    Matrix::from_fn(n, n, |i, j| inv_sqrt_degree[i] * with_loops[(i, j)] * inv_sqrt_degree[j])
}

// ---------------------------------------------------------------------------
// TU text format
// ---------------------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Format(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn parse_int(s: &str, path: &Path, line: usize) -> Result<i64> {
    s.trim().parse::<i64>().map_err(|_| {
        Error::Format(format!("{}:{}: expected integer, found {s:?}", path.display(), line + 1))
    })
}

/// Parse a dataset in the TU text layout: `<name>_A.txt` (1-indexed edge
/// pairs), `<name>_graph_indicator.txt`, `<name>_graph_labels.txt` and
/// `<name>_node_labels.txt`. Node labels are one-hot encoded into features
/// with one dimension per distinct label value; graph labels are remapped to
/// contiguous class indices in ascending order of value.
pub fn parse_tu_dataset(root: &Path, name: &str) -> Result<Vec<Graph>> {
    let file = |suffix: &str| root.join(format!("{name}_{suffix}.txt"));

    let indicator_path = file("graph_indicator");
    let indicator_lines = read_lines(&indicator_path)?;
    let mut node_graph = Vec::with_capacity(indicator_lines.len());
    for (i, l) in indicator_lines.iter().enumerate() {
        node_graph.push(parse_int(l, &indicator_path, i)?);
    }
    let node_total = node_graph.len();
    if node_total == 0 {
        return Err(Error::Format(format!("{}: no nodes", indicator_path.display())));
    }
    let graph_total = *node_graph.iter().max().unwrap();
    if graph_total < 1 {
        return Err(Error::Integrity("graph ids must start at 1".into()));
    }
    let graph_total = graph_total as usize;
    let mut seen = vec![false; graph_total];
    for (i, &g) in node_graph.iter().enumerate() {
        if g < 1 || g as usize > graph_total {
            return Err(Error::Integrity(format!(
                "{}:{}: graph id {g} out of range",
                indicator_path.display(),
                i + 1
            )));
        }
        seen[g as usize - 1] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Integrity(format!("graph ids not contiguous: id {} unused", missing + 1)));
    }

    let labels_path = file("graph_labels");
    let label_lines = read_lines(&labels_path)?;
    if label_lines.len() != graph_total {
        return Err(Error::Integrity(format!(
            "{} graph labels for {} graphs",
            label_lines.len(),
            graph_total
        )));
    }
    let mut raw_graph_labels = Vec::with_capacity(graph_total);
    for (i, l) in label_lines.iter().enumerate() {
        raw_graph_labels.push(parse_int(l, &labels_path, i)?);
    }

    let node_labels_path = file("node_labels");
    let node_label_lines = read_lines(&node_labels_path)?;
    if node_label_lines.len() != node_total {
        return Err(Error::Integrity(format!(
            "{} node labels for {} nodes",
            node_label_lines.len(),
            node_total
        )));
    }
    let mut raw_node_labels = Vec::with_capacity(node_total);
    for (i, l) in node_label_lines.iter().enumerate() {
        raw_node_labels.push(parse_int(l, &node_labels_path, i)?);
    }

    // Contiguous class index per distinct raw value, ascending.
    let class_of = |values: &[i64]| -> BTreeMap<i64, usize> {
        let mut distinct: Vec<i64> = values.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
    };
    let graph_classes = class_of(&raw_graph_labels);
    let node_classes = class_of(&raw_node_labels);
    let feature_dim = node_classes.len();

    // Global node id -> (graph index, local node index).
    let mut graph_nodes: Vec<Vec<usize>> = vec![Vec::new(); graph_total];
    for (node, &g) in node_graph.iter().enumerate() {
        graph_nodes[g as usize - 1].push(node);
    }
    let mut local_index = vec![0usize; node_total];
    for nodes in &graph_nodes {
        for (local, &node) in nodes.iter().enumerate() {
            local_index[node] = local;
        }
    }

    let edges_path = file("A");
    let edge_lines = read_lines(&edges_path)?;
    let mut adjacencies: Vec<Matrix> =
        graph_nodes.iter().map(|nodes| Matrix::zeros(nodes.len(), nodes.len())).collect();
    for (i, l) in edge_lines.iter().enumerate() {
        let mut parts = l.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: expected `src, dst`",
                    edges_path.display(),
                    i + 1
                )))
            }
        };
        let a = parse_int(a, &edges_path, i)?;
        let b = parse_int(b, &edges_path, i)?;
        for id in [a, b] {
            if id < 1 || id as usize > node_total {
                return Err(Error::Integrity(format!(
                    "{}:{}: edge references unknown node {id}",
                    edges_path.display(),
                    i + 1
                )));
            }
        }
        let (a, b) = (a as usize - 1, b as usize - 1);
        if node_graph[a] != node_graph[b] {
            return Err(Error::Integrity(format!(
                "{}:{}: edge crosses graphs {} and {}",
                edges_path.display(),
                i + 1,
                node_graph[a],
                node_graph[b]
            )));
        }
        if a == b {
            return Err(Error::Integrity(format!(
                "{}:{}: self-loop on node {}",
                edges_path.display(),
                i + 1,
                a + 1
            )));
        }
        let g = node_graph[a] as usize - 1;
        let (la, lb) = (local_index[a], local_index[b]);
        // Duplicate and reversed listings collapse onto one symmetric edge.
        adjacencies[g][(la, lb)] = 1.0;
        adjacencies[g][(lb, la)] = 1.0;
    }

    let mut graphs = Vec::with_capacity(graph_total);
    for (g, nodes) in graph_nodes.iter().enumerate() {
        if nodes.is_empty() {
            return Err(Error::Integrity(format!("graph {} has no nodes", g + 1)));
        }
        let mut features = Matrix::zeros(nodes.len(), feature_dim);
        for (local, &node) in nodes.iter().enumerate() {
            features[(local, node_classes[&raw_node_labels[node]])] = 1.0;
        }
        let label = graph_classes[&raw_graph_labels[g]];
        graphs.push(Graph::new(features, std::mem::replace(&mut adjacencies[g], Matrix::zeros(0, 0)), label)?);
    }
    Ok(graphs)
}

/// Write graphs back out in the TU text layout. Features must be exactly
/// one-hot; the per-row argmax becomes the node label. Inverse of
/// [`parse_tu_dataset`] up to label remapping.
pub fn write_tu_dataset(graphs: &[Graph], root: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut edges = String::new();
    let mut indicator = String::new();
    let mut graph_labels = String::new();
    let mut node_labels = String::new();

    let mut next_id = 1usize;
    for (g, graph) in graphs.iter().enumerate() {
        let base = next_id;
        for i in 0..graph.node_count() {
            indicator.push_str(&format!("{}\n", g + 1));
            let row = graph.node_features().row(i);
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, _)| j)
                .collect();
            if ones.len() != 1 || row[ones[0]] != 1.0 {
                return Err(Error::Input(format!(
                    "graph {g} node {i}: features are not one-hot"
                )));
            }
            node_labels.push_str(&format!("{}\n", ones[0]));
            for j in 0..graph.node_count() {
                if graph.adjacency()[(i, j)] == 1.0 {
                    edges.push_str(&format!("{}, {}\n", base + i, base + j));
                }
            }
        }
        graph_labels.push_str(&format!("{}\n", graph.label()));
        next_id += graph.node_count();
    }

    std::fs::write(root.join(format!("{name}_A.txt")), edges)?;
    std::fs::write(root.join(format!("{name}_graph_indicator.txt")), indicator)?;
    std::fs::write(root.join(format!("{name}_graph_labels.txt")), graph_labels)?;
    std::fs::write(root.join(format!("{name}_node_labels.txt")), node_labels)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Assignment of dataset graphs to federation clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub client_assignments: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl DatasetPartition {
    pub fn client_count(&self) -> usize {
        self.client_assignments.len()
    }

    pub fn total_graphs(&self) -> usize {
        self.client_assignments.iter().map(|a| a.len()).sum()
    }
}

/// Split graphs across clients with label-wise Dirichlet(`alpha`) proportions.
///
/// Small `alpha` concentrates each class on few clients (strongly non-i.i.d.),
/// large `alpha` approaches a uniform split. Draws that leave any client
/// empty are resampled with an incremented seed.
pub fn partition_dirichlet(
    graphs: &[Graph],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<DatasetPartition> {
    if clients < 1 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if graphs.len() < clients {
        return Err(Error::Config(format!(
            "{} graphs cannot cover {} clients",
            graphs.len(),
            clients
        )));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in graphs.iter().enumerate() {
        by_class.entry(g.label()).or_default().push(i);
    }

    let mut fallback: Option<Vec<Vec<usize>>> = None;
    for attempt in 0..200u64 {
        let mut rng = rng_from_seed(derive_seed(seed, 0x7a17, attempt));
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for indices in by_class.values() {
            let mut indices = indices.clone();
            shuffle(&mut indices, &mut rng);
            let proportions = dirichlet_proportions(clients, alpha, &mut rng);
            // Split this class at the cumulative proportion boundaries.
            let n = indices.len();
            let mut start = 0usize;
            let mut cumulative = 0.0;
            for (c, p) in proportions.iter().enumerate() {
                cumulative += p;
                let end = if c + 1 == clients { n } else { (cumulative * n as f64).floor() as usize };
                let end = end.clamp(start, n);
                assignments[c].extend_from_slice(&indices[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(DatasetPartition { client_assignments: assignments, alpha });
        }
        fallback.get_or_insert(assignments);
    }

    // Tight datasets (graph count close to the client count) can defeat the
    // resampling loop outright; repair the first draw instead by moving one
    // graph at a time from the fullest client to an empty one.
    let mut assignments = fallback.expect("at least one attempt ran");
    while let Some(empty) = assignments.iter().position(|a| a.is_empty()) {
        let donor = (0..clients)
            .filter(|&c| assignments[c].len() > 1)
            .max_by_key(|&c| (assignments[c].len(), std::cmp::Reverse(c)))
            .expect("graph count >= client count leaves a donor");
        let moved = assignments[donor].pop().expect("donor non-empty");
        assignments[empty].push(moved);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(DatasetPartition { client_assignments: assignments, alpha })
}

fn dirichlet_proportions(k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Gamma(alpha, 1) draws normalized to the simplex.
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE)).collect();
    let total: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= total;
    }
    draws
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Synthetic graphs
// ---------------------------------------------------------------------------

/// How synthetic graph structures are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StructureModel {
    /// Reuse structures from an existing dataset (resolved by the caller).
    DatasetDrawn,
    /// Each unordered pair connected independently with probability `p`.
    ErdosRenyi { edge_probability: f64 },
}

/// How synthetic node features are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureModel {
    DatasetDrawn,
    /// Independent draws per coordinate of a `dim`-dimensional vector.
    Gaussian { mean: f64, variance: f64, dim: usize },
    Uniform { low: f64, high: f64, dim: usize },
    /// Uniformly random class per node, one-hot encoded. Matches the feature
    /// layout of the molecule datasets.
    OneHot { classes: usize },
}

impl FeatureModel {
    /// Dimension of the sampled feature vectors (when generated).
    pub fn dim(&self) -> Option<usize> {
        match *self {
            FeatureModel::Gaussian { dim, .. } | FeatureModel::Uniform { dim, .. } => Some(dim),
            FeatureModel::OneHot { classes } => Some(classes),
            FeatureModel::DatasetDrawn => None,
        }
    }
}

/// Recipe for a batch of synthetic graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxiliarySpec {
    pub structure: StructureModel,
    pub features: FeatureModel,
    pub graph_count: usize,
    pub max_nodes: usize,
    /// Graph labels are drawn uniformly from this many classes.
    pub label_classes: usize,
}

impl AuxiliarySpec {
    pub fn validate(&self) -> Result<()> {
        if self.graph_count < 1 {
            return Err(Error::Config("graph_count must be at least 1".into()));
        }
        if self.max_nodes < 2 {
            return Err(Error::Config("max_nodes must be at least 2".into()));
        }
        if self.label_classes < 1 {
            return Err(Error::Config("label_classes must be at least 1".into()));
        }
        match self.structure {
            StructureModel::ErdosRenyi { edge_probability } => {
                if !(0.0..=1.0).contains(&edge_probability) {
                    return Err(Error::Config(format!(
                        "edge probability {edge_probability} outside [0, 1]"
                    )));
                }
            }
            StructureModel::DatasetDrawn => {}
        }
        if matches!(self.features.dim(), Some(0)) {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        match self.features {
            FeatureModel::Gaussian { variance, .. } if !(variance >= 0.0) => {
                return Err(Error::Config("gaussian variance must be non-negative".into()))
            }
            FeatureModel::Uniform { low, high, .. } if !(low < high) => {
                return Err(Error::Config("uniform bounds must satisfy low < high".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Generate random graphs per `spec`.
///
/// Structures are Erdős–Rényi with node counts uniform in `[2, max_nodes]`.
/// Nodes are emitted in breadth-first order from the highest-degree node, so
/// generated datasets carry a stable native node ordering the way curated
/// datasets do. Dataset-drawn models are resolved by
/// [`draw_auxiliary_from_dataset`] instead.
pub fn generate_auxiliary(spec: &AuxiliarySpec, seed: u64) -> Result<Vec<Graph>> {
    spec.validate()?;
    let p = match spec.structure {
        StructureModel::ErdosRenyi { edge_probability } => edge_probability,
        StructureModel::DatasetDrawn => {
            return Err(Error::Config(
                "dataset-drawn structures need a source dataset; use draw_auxiliary_from_dataset".into(),
            ))
        }
    };
    if matches!(spec.features, FeatureModel::DatasetDrawn) {
        return Err(Error::Config(
            "dataset-drawn features need a source dataset; use draw_auxiliary_from_dataset".into(),
        ));
    }

    let mut rng = rng_from_seed(seed);
    let mut graphs = Vec::with_capacity(spec.graph_count);
    for _ in 0..spec.graph_count {
        let n = rng.random_range(2..=spec.max_nodes);
        let mut adjacency = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    adjacency[(i, j)] = 1.0;
                    adjacency[(j, i)] = 1.0;
                }
            }
        }
        let adjacency = canonical_bfs_order(&adjacency);
        let features = sample_features(&spec.features, n, &mut rng)?;
        let label = rng.random_range(0..spec.label_classes);
        graphs.push(Graph::new(features, adjacency, label)?);
    }
    Ok(graphs)
}

/// Sample auxiliary graphs from an existing dataset (with replacement),
/// keeping only graphs that fit in `max_nodes`.
pub fn draw_auxiliary_from_dataset(
    dataset: &[Graph],
    count: usize,
    max_nodes: usize,
    seed: u64,
) -> Result<Vec<Graph>> {
    let eligible: Vec<&Graph> = dataset.iter().filter(|g| g.node_count() <= max_nodes).collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "no dataset graphs fit within max_nodes = {max_nodes}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..count).map(|_| eligible[rng.random_range(0..eligible.len())].clone()).collect())
}

fn sample_features(model: &FeatureModel, n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    Ok(match *model {
        FeatureModel::Gaussian { mean, variance, dim } => {
            let normal = Normal::new(mean, variance.sqrt())
                .map_err(|e| Error::Config(format!("gaussian feature model: {e}")))?;
            Matrix::from_fn(n, dim, |_, _| normal.sample(rng))
        }
        FeatureModel::Uniform { low, high, dim } => {
            Matrix::from_fn(n, dim, |_, _| rng.random_range(low..high))
        }
        FeatureModel::OneHot { classes } => {
            let mut m = Matrix::zeros(n, classes);
            for i in 0..n {
                let c = rng.random_range(0..classes);
                m[(i, c)] = 1.0;
            }
            m
        }
        FeatureModel::DatasetDrawn => unreachable!("checked by caller"),
    })
}

/// Relabel nodes in BFS order from the highest-degree node (ties by original
/// index); remaining components follow, again ordered by degree.
fn canonical_bfs_order(adjacency: &Matrix) -> Matrix {
    let n = adjacency.rows();
    let degree: Vec<usize> =
        (0..n).map(|i| adjacency.row(i).iter().filter(|&&v| v == 1.0).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let root = (0..n)
            .filter(|&i| !visited[i])
            .max_by_key(|&i| (degree[i], std::cmp::Reverse(i)))
            .unwrap();
        visited[root] = true;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for u in 0..n {
                if adjacency[(v, u)] == 1.0 && !visited[u] {
                    visited[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    Matrix::from_fn(n, n, |i, j| adjacency[(order[i], order[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn write_fixture(dir: &Path, name: &str, files: &[(&str, &str)]) {
        for (suffix, content) in files {
            std::fs::write(dir.join(format!("{name}_{suffix}.txt")), content).unwrap();
        }
    }

    fn two_graph_fixture(dir: &Path) {
        write_fixture(
            dir,
            "TOY",
            &[
                ("A", "1, 2\n2, 1\n3, 4\n4, 5\n"),
                ("graph_indicator", "1\n1\n2\n2\n2\n"),
                ("graph_labels", "1\n-1\n"),
                ("node_labels", "0\n1\n0\n2\n1\n"),
            ],
        );
    }

    #[test]
    fn parses_two_graph_fixture() {
        let dir = tempfile::tempdir().unwrap();
        two_graph_fixture(dir.path());
        let graphs = parse_tu_dataset(dir.path(), "TOY").unwrap();
        assert_eq!(graphs.len(), 2);
        assert_eq!(graphs[0].node_count(), 2);
        assert_eq!(graphs[1].node_count(), 3);
        // Graph labels -1, 1 map to classes 0, 1 in ascending order.
        assert_eq!(graphs[0].label(), 1);
        assert_eq!(graphs[1].label(), 0);
        // Duplicate listing (1,2)/(2,1) collapses onto one symmetric edge.
        assert_eq!(graphs[0].edge_count(), 1);
        assert_eq!(graphs[0].adjacency()[(0, 1)], 1.0);
        // Second graph is the path 3-4-5.
        assert_eq!(graphs[1].adjacency()[(0, 1)], 1.0);
        assert_eq!(graphs[1].adjacency()[(1, 2)], 1.0);
        assert_eq!(graphs[1].adjacency()[(0, 2)], 0.0);
        // Three distinct node labels -> 3-dim one-hot features.
        assert_eq!(graphs[0].feature_dim(), 3);
        assert_eq!(graphs[0].node_features().row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_tu_dataset(dir.path(), "NOPE").unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn dangling_edge_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "BAD",
            &[
                ("A", "1, 9\n"),
                ("graph_indicator", "1\n1\n"),
                ("graph_labels", "1\n"),
                ("node_labels", "0\n0\n"),
            ],
        );
        let err = parse_tu_dataset(dir.path(), "BAD").unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn non_contiguous_graph_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "GAP",
            &[
                ("A", "1, 2\n"),
                ("graph_indicator", "1\n1\n3\n"),
                ("graph_labels", "1\n1\n1\n"),
                ("node_labels", "0\n0\n0\n"),
            ],
        );
        let err = parse_tu_dataset(dir.path(), "GAP").unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn mutag_parses_when_available() {
        // Count oracle: lines of the labels file and distinct node labels,
        // counted here independently of the parser.
        let root = PathBuf::from(
            std::env::var("FGL_DATA_ROOT").unwrap_or_else(|_| "../../data".to_string()),
        )
        .join("MUTAG");
        if !root.join("MUTAG_graph_labels.txt").exists() {
            eprintln!("MUTAG not present; skipping");
            return;
        }
        let graphs = parse_tu_dataset(&root, "MUTAG").unwrap();
        let label_lines = std::fs::read_to_string(root.join("MUTAG_graph_labels.txt")).unwrap();
        let expected_graphs = label_lines.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(graphs.len(), expected_graphs);
        assert_eq!(graphs.len(), 188);
        let node_label_lines = std::fs::read_to_string(root.join("MUTAG_node_labels.txt")).unwrap();
        let mut distinct: Vec<&str> =
            node_label_lines.lines().map(|l| l.trim()).filter(|l| !l.is_empty()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(graphs[0].feature_dim(), distinct.len());
        assert_eq!(distinct.len(), 7);
    }

    #[test]
    fn tu_round_trip_preserves_graphs() {
        let spec = AuxiliarySpec {
            structure: StructureModel::ErdosRenyi { edge_probability: 0.4 },
            features: FeatureModel::OneHot { classes: 4 },
            graph_count: 12,
            max_nodes: 9,
            label_classes: 3,
        };
        let graphs = generate_auxiliary(&spec, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tu_dataset(&graphs, dir.path(), "RT").unwrap();
        let back = parse_tu_dataset(dir.path(), "RT").unwrap();
        // Classes that never occur shrink the label/feature maps, so compare
        // against a re-written copy only when all classes are present.
        let all_feature_classes =
            (0..4).all(|c| graphs.iter().any(|g| (0..g.node_count()).any(|i| g.node_features()[(i, c)] == 1.0)));
        let all_labels = (0..3).all(|c| graphs.iter().any(|g| g.label() == c));
        if all_feature_classes && all_labels {
            assert_eq!(graphs, back);
        } else {
            assert_eq!(graphs.len(), back.len());
        }
    }

    #[test]
    fn normalize_single_node_is_identity() {
        let g = Graph::new(Matrix::zeros(1, 2), Matrix::zeros(1, 1), 0).unwrap();
        let norm = normalize_adjacency(&g);
        assert_eq!(norm.matrix().shape(), (1, 1));
        assert!((norm.matrix()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_two_connected_nodes() {
        let adjacency = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let g = Graph::new(Matrix::zeros(2, 1), adjacency, 0).unwrap();
        let norm = normalize_adjacency(&g);
        for i in 0..2 {
            for j in 0..2 {
                assert!((norm.matrix()[(i, j)] - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalize_matches_entrywise_formula() {
        // Independent oracle: evaluate (A+I)_ij / sqrt(d_i d_j) entry by entry.
        let spec = AuxiliarySpec {
            structure: StructureModel::ErdosRenyi { edge_probability: 0.5 },
            features: FeatureModel::Gaussian { mean: 0.0, variance: 1.0, dim: 1 },
            graph_count: 5,
            max_nodes: 5,
            label_classes: 2,
        };
        for (k, g) in generate_auxiliary(&spec, 17).unwrap().iter().enumerate() {
            let norm = normalize_adjacency(g);
            let n = g.node_count();
            let a = g.adjacency();
            let deg: Vec<f64> = (0..n)
                .map(|i| 1.0 + (0..n).map(|j| a[(i, j)]).sum::<f64>())
                .collect();
            let mut max_err: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let tilde = a[(i, j)] + if i == j { 1.0 } else { 0.0 };
                    let expect = tilde / (deg[i] * deg[j]).sqrt();
                    max_err = max_err.max((norm.matrix()[(i, j)] - expect).abs());
                    // Symmetry of the normalized matrix.
                    assert!((norm.matrix()[(i, j)] - norm.matrix()[(j, i)]).abs() < 1e-12);
                    assert!(norm.matrix()[(i, j)] >= 0.0);
                }
            }
            assert!(max_err < 1e-12, "graph {k}: max err {max_err}");
        }
    }

    #[test]
    fn partition_single_client_takes_everything() {
        let graphs = toy_dataset(10);
        let p = partition_dirichlet(&graphs, 1, 1.0, 3).unwrap();
        assert_eq!(p.client_assignments.len(), 1);
        assert_eq!(p.client_assignments[0], (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_deterministic_under_seed() {
        let graphs = toy_dataset(30);
        let a = partition_dirichlet(&graphs, 3, 0.5, 42).unwrap();
        let b = partition_dirichlet(&graphs, 3, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = partition_dirichlet(&graphs, 3, 0.5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partition_covers_dataset_exactly() {
        let graphs = toy_dataset(40);
        for seed in 0..10 {
            let p = partition_dirichlet(&graphs, 4, 0.3, seed).unwrap();
            let mut all: Vec<usize> = p.client_assignments.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..40).collect::<Vec<_>>());
            assert!(p.client_assignments.iter().all(|a| !a.is_empty()));
        }
    }

    #[test]
    fn partition_near_uniform_for_huge_alpha() {
        // alpha -> infinity surrogate: balanced two-class set of 100 splits
        // 50 +/- 5 per client with a near-even class mix, across 20 seeds.
        let graphs = toy_dataset(100);
        for seed in 0..20 {
            let p = partition_dirichlet(&graphs, 2, 1e6, seed).unwrap();
            for a in &p.client_assignments {
                assert!(
                    (a.len() as i64 - 50).unsigned_abs() <= 5,
                    "seed {seed}: client holds {}",
                    a.len()
                );
                let class0 = a.iter().filter(|&&i| graphs[i].label() == 0).count();
                let class1 = a.len() - class0;
                assert!((class0 as i64 - class1 as i64).unsigned_abs() <= 6);
            }
        }
    }

    #[test]
    fn partition_rejects_more_clients_than_graphs() {
        let graphs = toy_dataset(3);
        assert!(matches!(partition_dirichlet(&graphs, 4, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_handles_one_graph_per_client() {
        // Resampling alone cannot fill every client here; the repair path
        // must still deliver a disjoint, covering, non-empty partition.
        let graphs = toy_dataset(12);
        let p = partition_dirichlet(&graphs, 12, 1.0, 5).unwrap();
        assert!(p.client_assignments.iter().all(|a| a.len() == 1));
        let mut all: Vec<usize> = p.client_assignments.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(p, partition_dirichlet(&graphs, 12, 1.0, 5).unwrap());
    }

    #[test]
    fn er_extremes() {
        let mut spec = AuxiliarySpec {
            structure: StructureModel::ErdosRenyi { edge_probability: 0.0 },
            features: FeatureModel::Uniform { low: -1.0, high: 1.0, dim: 1 },
            graph_count: 10,
            max_nodes: 8,
            label_classes: 2,
        };
        for g in generate_auxiliary(&spec, 5).unwrap() {
            assert_eq!(g.edge_count(), 0);
        }
        spec.structure = StructureModel::ErdosRenyi { edge_probability: 1.0 };
        for g in generate_auxiliary(&spec, 5).unwrap() {
            let n = g.node_count();
            assert_eq!(g.edge_count(), n * (n - 1) / 2);
        }
    }

    #[test]
    fn er_density_converges_to_p() {
        let spec = AuxiliarySpec {
            structure: StructureModel::ErdosRenyi { edge_probability: 0.5 },
            features: FeatureModel::Uniform { low: -1.0, high: 1.0, dim: 1 },
            graph_count: 1000,
            max_nodes: 28,
            label_classes: 2,
        };
        let graphs = generate_auxiliary(&spec, 123).unwrap();
        let mut edges = 0usize;
        let mut pairs = 0usize;
        for g in &graphs {
            edges += g.edge_count();
            pairs += g.node_count() * (g.node_count() - 1) / 2;
        }
        let density = edges as f64 / pairs as f64;
        assert!((density - 0.5).abs() < 0.02, "density {density}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = AuxiliarySpec {
            structure: StructureModel::ErdosRenyi { edge_probability: 0.3 },
            features: FeatureModel::Gaussian { mean: 0.0, variance: 1.0, dim: 1 },
            graph_count: 4,
            max_nodes: 6,
            label_classes: 2,
        };
        assert_eq!(generate_auxiliary(&spec, 7).unwrap(), generate_auxiliary(&spec, 7).unwrap());
    }

    fn toy_dataset(count: usize) -> Vec<Graph> {
        // Two-class set with alternating labels and tiny path graphs.
        (0..count)
            .map(|i| {
                let adjacency =
                    Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
                let mut features = Matrix::zeros(2, 2);
                features[(0, i % 2)] = 1.0;
                features[(1, (i + 1) % 2)] = 1.0;
                Graph::new(features, adjacency, i % 2).unwrap()
            })
            .collect()
    }
}
