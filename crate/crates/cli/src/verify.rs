//! The verification suite behind `fgl verify`: independent oracles for the
//! gradient rule, the leakage identities, the recovery algorithm and the
//! ranking metrics, plus spot checks of the numeric plumbing.
//!
//! Every oracle here recomputes its expectation through a different route
//! than the implementation under test (finite differences against the
//! analytic backward pass, exhaustive pair enumeration against the rank
//! statistic, constructed instances with known solutions against the
//! recovery solver).

use std::time::Instant;

use fgl_core::attack::{
    extract_embedding, mmd_distance, recover_features, AttackConfig,
};
use fgl_core::error::Result;
use fgl_core::fed::apply_gradient_compression;
use fgl_core::graph::{
    generate_auxiliary, normalize_adjacency, parse_tu_dataset, write_tu_dataset, AuxiliarySpec,
    FeatureModel, Graph, StructureModel,
};
use fgl_core::linalg::{solve_min_norm, Matrix};
use fgl_core::metrics::structure_auc_ap;
use fgl_core::nn::{
    backward_analytic, backward_analytic_sign_faulted, forward, init_params, GradientBundle,
    ModelConfig, ModelParams, PoolingDescriptor,
};
use fgl_core::rng::{derive_seed, rng_from_seed, sample_laplace};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Inject a deliberate defect to prove a check can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultInjection {
    None,
    /// Flip the sign of the backward layer recursion.
    GradientRecursionSign,
}

pub struct SuiteOptions {
    pub quick: bool,
    pub fault: FaultInjection,
}

/// Run every check, print one line per check and a final verdict. Returns
/// true only if all checks passed.
pub fn run_suite(options: &SuiteOptions) -> bool {
    let quick = options.quick;
    let checks: Vec<CheckResult> = vec![
        timed("gradient-finite-difference", || {
            check_gradient_finite_difference(if quick { 30 } else { 200 }, options.fault)
        }),
        timed("embedding-leakage-exactness", || {
            check_embedding_exactness(if quick { 20 } else { 100 })
        }),
        timed("feature-recovery-exactness", || {
            check_exact_feature_recovery(if quick { 10 } else { 50 })
        }),
        timed("metric-rank-oracles", || check_metric_oracles(if quick { 100 } else { 1000 })),
        timed("pooling-matrix-equivalence", check_pooling_equivalence),
        timed("min-norm-solver", check_min_norm_solver),
        timed("adjacency-normalization", check_normalization_closed_form),
        timed("gradient-compression-counting", check_compression_counting),
        timed("laplace-noise-moments", check_laplace_moments),
        timed("mmd-identities", check_mmd_identities),
        timed("recovery-residual-consistency", check_recovery_residuals),
        timed("tu-format-round-trip", check_tu_round_trip),
    ];

    let mut all_passed = true;
    println!("{:<34} {:>6}  {:>8}  detail", "check", "status", "seconds");
    for check in &checks {
        all_passed &= check.passed;
        println!(
            "{:<34} {:>6}  {:>8.2}  {}",
            check.name,
            if check.passed { "PASS" } else { "FAIL" },
            check.seconds,
            check.detail
        );
    }
    println!("verdict: {}", if all_passed { "PASS" } else { "FAIL" });
    all_passed
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn er_graph(rng_seed: u64, max_nodes: usize, feature_dim: usize) -> Graph {
    generate_auxiliary(
        &AuxiliarySpec {
            structure: StructureModel::ErdosRenyi { edge_probability: 0.5 },
            features: FeatureModel::OneHot { classes: feature_dim },
            graph_count: 1,
            max_nodes,
            label_classes: 2,
        },
        rng_seed,
    )
    .expect("valid spec")
    .remove(0)
}

struct Instance {
    params: ModelParams,
    graph: Graph,
    label: usize,
}

/// Random model/graph pair whose pre-activations stay clear of the ReLU
/// kink; central differences are invalid across it.
fn sample_fd_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let feature_dim = rng.random_range(2..=5);
        let layers = rng.random_range(2..=4);
        let hidden = rng.random_range(2..=8);
        let classes = rng.random_range(2..=4);
        let pooling =
            if rng.random::<bool>() { PoolingDescriptor::Sum } else { PoolingDescriptor::Mean };
        let params = init_params(
            &ModelConfig { feature_dim, hidden_dim: hidden, gcn_layers: layers, classes, pooling },
            rng,
        )
        .expect("valid config");
        let graph = er_graph(rng.random::<u64>(), rng.random_range(2..=10), feature_dim);
        let label = rng.random_range(0..classes);
        let trace = forward(&params, &graph, label).expect("forward");
        let clear_of_kink = trace
            .pre_activations
            .iter()
            .all(|z| z.data().iter().all(|v| v.abs() > 1e-4));
        if clear_of_kink {
            return Instance { params, graph, label };
        }
    }
}

/// Central finite differences over every parameter entry, against the
/// analytic backward pass. Tolerance: relative error below 1e-5 with an
/// absolute floor of 1e-8.
pub fn check_gradient_finite_difference(instances: usize, fault: FaultInjection) -> (bool, String) {
    let mut rng = rng_from_seed(0xFD);
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for instance_index in 0..instances {
        let Instance { params, graph, label } = sample_fd_instance(&mut rng);
        let trace = forward(&params, &graph, label).expect("forward");
        let analytic = match fault {
            FaultInjection::None => backward_analytic(&trace, &params, &graph),
            FaultInjection::GradientRecursionSign => {
                backward_analytic_sign_faulted(&trace, &params, &graph)
            }
        }
        .expect("backward");

        let slots = params.tensors().len();
        for slot in 0..slots {
            let entries = params.tensors()[slot].data().len();
            for idx in 0..entries {
                let mut plus = params.clone();
                plus.tensors_mut()[slot].data_mut()[idx] += step;
                let mut minus = params.clone();
                minus.tensors_mut()[slot].data_mut()[idx] -= step;
                let numeric = (forward(&plus, &graph, label).expect("forward").loss
                    - forward(&minus, &graph, label).expect("forward").loss)
                    / (2.0 * step);
                let a = analytic.tensors()[slot].data()[idx];
                let tolerance = (1e-5 * a.abs().max(numeric.abs())).max(1e-8);
                let err = (a - numeric).abs();
                let scaled = err / tolerance;
                if scaled > worst {
                    worst = scaled;
                    worst_at = format!(
                        "instance {instance_index} tensor {slot} entry {idx}: analytic {a:.3e} numeric {numeric:.3e}"
                    );
                }
            }
        }
    }
    let passed = worst <= 1.0;
    (
        passed,
        format!(
            "{instances} instances, worst error at {:.3}x tolerance{}",
            worst,
            if passed { String::new() } else { format!(" ({worst_at})") }
        ),
    )
}

/// Extraction must reproduce the traced pooled embedding to 1e-9 on
/// undefended batch-1 bundles.
pub fn check_embedding_exactness(count: usize) -> (bool, String) {
    let mut rng = rng_from_seed(0xE0);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let feature_dim = rng.random_range(2..=6);
        let params = init_params(
            &ModelConfig {
                feature_dim,
                hidden_dim: rng.random_range(2..=16),
                gcn_layers: rng.random_range(1..=3),
                classes: rng.random_range(2..=5),
                pooling: if rng.random::<bool>() {
                    PoolingDescriptor::Sum
                } else {
                    PoolingDescriptor::Mean
                },
            },
            &mut rng,
        )
        .expect("valid config");
        let graph = er_graph(rng.random::<u64>(), rng.random_range(2..=12), feature_dim);
        let label = rng.random_range(0..params.class_count());
        let trace = forward(&params, &graph, label).expect("forward");
        let bundle = backward_analytic(&trace, &params, &graph).expect("backward");
        let leaked = extract_embedding(&bundle).expect("extraction");
        worst = worst.max(leaked.pooled.max_abs_diff(&trace.pooled));
    }
    (worst < 1e-9, format!("{count} bundles, max embedding error {worst:.3e}"))
}

/// Construct instances the recovery algorithm must solve exactly: regular
/// graphs (ring lattices, complete and edgeless graphs, single nodes) with
/// node-uniform positive features and positive weights keep every solve's
/// minimum-norm solution equal to the true layer input.
pub fn check_exact_feature_recovery(count: usize) -> (bool, String) {
    let mut rng = rng_from_seed(0xEC);
    let mut worst: f64 = 0.0;
    for index in 0..count {
        let nodes = 1 + index % 6;
        let layers = 1 + index % 4;
        let feature_dim = 2 + index % 3;
        let pooling =
            if index % 2 == 0 { PoolingDescriptor::Sum } else { PoolingDescriptor::Mean };
        // Hidden and class sizes at least the node count keep the letter of
        // the fully-determined-solve construction.
        let hidden = nodes.max(2) + rng.random_range(0..3);
        let mut params = init_params(
            &ModelConfig {
                feature_dim,
                hidden_dim: hidden,
                gcn_layers: layers,
                classes: nodes.max(2),
                pooling,
            },
            &mut rng,
        )
        .expect("valid config");
        for w in &mut params.gcn_weights {
            *w = w.map(|v| v.abs() + 0.1);
        }
        let adjacency = match index % 3 {
            0 if nodes >= 3 => Matrix::from_fn(nodes, nodes, |i, j| {
                let d = (i as i64 - j as i64).rem_euclid(nodes as i64);
                if d == 1 || d == nodes as i64 - 1 {
                    1.0
                } else {
                    0.0
                }
            }),
            1 => Matrix::from_fn(nodes, nodes, |i, j| if i != j { 1.0 } else { 0.0 }),
            _ => Matrix::zeros(nodes, nodes),
        };
        let shared: Vec<f64> = (0..feature_dim).map(|_| rng.random_range(0.2..1.2)).collect();
        let features = Matrix::from_fn(nodes, feature_dim, |_, j| shared[j]);
        let graph = Graph::new(features, adjacency, 0).expect("valid graph");

        let trace = forward(&params, &graph, 0).expect("forward");
        assert!(
            trace.relu_masks.iter().all(|m| m.data().iter().all(|&v| v == 1.0)),
            "construction must keep pre-activations positive"
        );
        let bundle = backward_analytic(&trace, &params, &graph).expect("backward");
        let recovered = recover_features(
            &params,
            &bundle,
            graph.adjacency(),
            &AttackConfig::new(nodes),
        )
        .expect("recovery");
        worst = worst.max(recovered.features.max_abs_diff(graph.node_features()));
    }
    (worst < 1e-6, format!("{count} instances, max feature error {worst:.3e}"))
}

/// Rank-statistic AUC and staircase AP against exhaustive enumeration.
pub fn check_metric_oracles(count: usize) -> (bool, String) {
    let mut rng = rng_from_seed(0x4C);
    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for _ in 0..count {
        let n = rng.random_range(3..=8);
        let mut adjacency = Matrix::zeros(n, n);
        let mut probs = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.4 {
                    adjacency[(i, j)] = 1.0;
                    adjacency[(j, i)] = 1.0;
                }
                // Mix a coarse grid (forcing ties) with continuous scores.
                let p = if rng.random::<bool>() {
                    (rng.random_range(0..5) as f64) / 4.0
                } else {
                    rng.random()
                };
                probs[(i, j)] = p;
                probs[(j, i)] = p;
            }
        }
        let (auc, ap) = structure_auc_ap(&adjacency, &probs).expect("metrics");

        // Oracle 1: P(score_pos > score_neg) + 0.5 P(tie), all pairs.
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if adjacency[(i, j)] != 0.0 {
                    pos.push(probs[(i, j)]);
                } else {
                    neg.push(probs[(i, j)]);
                }
            }
        }
        if !pos.is_empty() && !neg.is_empty() {
            let mut statistic = 0.0;
            for &p in &pos {
                for &q in &neg {
                    statistic += if p > q {
                        1.0
                    } else if p == q {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            let oracle = statistic / (pos.len() * neg.len()) as f64;
            worst = worst.max((auc.expect("defined") - oracle).abs());
            compared += 1;
        }

        // Oracle 2: explicit precision/recall staircase, descending scores,
        // stable on ties.
        if !pos.is_empty() {
            let mut rows: Vec<(f64, bool)> = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    rows.push((probs[(i, j)], adjacency[(i, j)] != 0.0));
                }
            }
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.sort_by(|&a, &b| rows[b].0.partial_cmp(&rows[a].0).unwrap());
            let total = pos.len() as f64;
            let mut tp = 0.0;
            let mut last_recall = 0.0;
            let mut staircase = 0.0;
            for (k, &idx) in order.iter().enumerate() {
                if rows[idx].1 {
                    tp += 1.0;
                    let recall = tp / total;
                    staircase += (recall - last_recall) * (tp / (k + 1) as f64);
                    last_recall = recall;
                }
            }
            worst = worst.max((ap.expect("defined") - staircase).abs());
        }
    }
    (worst < 1e-12, format!("{count} instances ({compared} with defined AUC), max deviation {worst:.3e}"))
}

/// Sum/mean pooling as an explicit matrix product, and the sharpness-bounded
/// max approximation.
pub fn check_pooling_equivalence() -> (bool, String) {
    let mut rng = rng_from_seed(0x90);
    let mut worst_linear: f64 = 0.0;
    let mut worst_max: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=6);
        let mut h = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..0.8));
        // A clear margin keeps the log-sum-exp error bound below 1e-3.
        for j in 0..d {
            let peak = rng.random_range(0..n);
            let col_max = (0..n).map(|i| h[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            h[(peak, j)] = (col_max + 0.15).min(1.0);
        }
        for pooling in [PoolingDescriptor::Sum, PoolingDescriptor::Mean] {
            let via_matrix = pooling.pooling_matrix(n).matmul(&h).expect("matmul");
            for j in 0..d {
                let direct: f64 = (0..n).map(|i| h[(i, j)]).sum();
                let direct = if matches!(pooling, PoolingDescriptor::Mean) {
                    direct / n as f64
                } else {
                    direct
                };
                worst_linear = worst_linear.max((via_matrix[(0, j)] - direct).abs());
            }
        }
        let k = 50.0;
        for j in 0..d {
            let exact = (0..n).map(|i| h[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = {
                let sum: f64 = (0..n).map(|i| ((h[(i, j)] - exact) * k).exp()).sum();
                exact + sum.ln() / k
            };
            worst_max = worst_max.max((lse - exact).abs());
        }
    }
    (
        worst_linear < 1e-12 && worst_max < 1e-3,
        format!("linear pooling error {worst_linear:.3e}, max approximation error {worst_max:.3e}"),
    )
}

/// Constructed-solution recovery and residual orthogonality.
pub fn check_min_norm_solver() -> (bool, String) {
    let mut rng = rng_from_seed(0x50);
    let mut worst_recovery: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    for _ in 0..30 {
        let m = rng.random_range(2..=9);
        let n = rng.random_range(2..=9);
        let k = rng.random_range(1..=4);
        let a = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        if m >= n {
            let x0 = Matrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
            let b = a.matmul(&x0).expect("matmul");
            let x = solve_min_norm(&a, &b).expect("solve");
            worst_recovery = worst_recovery.max(x.max_abs_diff(&x0));
        }
        let b = Matrix::from_fn(m, k, |_, _| rng.random_range(-1.0..1.0));
        let x = solve_min_norm(&a, &b).expect("solve");
        let residual = a.matmul(&x).expect("matmul").sub(&b).expect("sub");
        let at_r = a.transpose_matmul(&residual).expect("matmul").frobenius_norm();
        let bound = 1e-8 * a.transpose_matmul(&b).expect("matmul").frobenius_norm() + 1e-12;
        worst_orth = worst_orth.max(at_r / bound);
    }
    (
        worst_recovery < 1e-8 && worst_orth <= 1.0,
        format!("recovery error {worst_recovery:.3e}, orthogonality at {worst_orth:.3}x bound"),
    )
}

/// Normalized adjacency against the per-entry closed form.
pub fn check_normalization_closed_form() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let graph = er_graph(derive_seed(0xAD, seed, 0), 8, 3);
        let normalized = normalize_adjacency(&graph);
        let n = graph.node_count();
        let a = graph.adjacency();
        let degree: Vec<f64> =
            (0..n).map(|i| 1.0 + (0..n).map(|j| a[(i, j)]).sum::<f64>()).collect();
        for i in 0..n {
            for j in 0..n {
                let tilde = a[(i, j)] + if i == j { 1.0 } else { 0.0 };
                let expected = tilde / (degree[i] * degree[j]).sqrt();
                worst = worst.max((normalized.matrix()[(i, j)] - expected).abs());
            }
        }
    }
    (worst < 1e-12, format!("max entry deviation {worst:.3e}"))
}

/// The prune count must be exactly ceil(p * entries).
pub fn check_compression_counting() -> (bool, String) {
    let mut rng = rng_from_seed(0xCC);
    let bundle = GradientBundle {
        grad_gcn: vec![Matrix::from_fn(100, 50, |_, _| rng.random_range(-1.0..1.0))],
        grad_fc: Matrix::from_fn(99, 50, |_, _| rng.random_range(-1.0..1.0)),
        grad_b: Matrix::from_fn(50, 1, |_, _| rng.random_range(-1.0..1.0)),
        batch_size: 1,
        defense_tag: "none".into(),
    };
    let total = bundle.entry_count();
    let mut ok = true;
    let mut detail = String::new();
    for p in [0.25, 0.5, 0.99] {
        let pruned = apply_gradient_compression(&bundle, p).expect("compression");
        let zeros =
            pruned.tensors().iter().flat_map(|t| t.data().iter()).filter(|v| **v == 0.0).count();
        let expected = (p * total as f64).ceil() as usize;
        if zeros != expected {
            ok = false;
        }
        detail.push_str(&format!("p={p}: {zeros}/{expected} "));
    }
    (ok, detail.trim_end().to_string())
}

/// Laplace noise: E|x| = scale, median zero (sign-symmetric).
pub fn check_laplace_moments() -> (bool, String) {
    let mut rng = rng_from_seed(0x1A);
    let scale = 0.2;
    let n = 10_000;
    let samples: Vec<f64> = (0..n).map(|_| sample_laplace(&mut rng, scale)).collect();
    let mean_abs = samples.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let positives = samples.iter().filter(|v| **v > 0.0).count();
    let sigma = (n as f64 * 0.25).sqrt();
    let mean_ok = (mean_abs - scale).abs() / scale < 0.05;
    let sign_ok = (positives as f64 - n as f64 / 2.0).abs() < 4.0 * sigma;
    (
        mean_ok && sign_ok,
        format!("mean |x| = {mean_abs:.4} (target {scale}), positives {positives}/{n}"),
    )
}

/// MMD: identical sets at zero, symmetry, linearity under scaling.
pub fn check_mmd_identities() -> (bool, String) {
    let mut rng = rng_from_seed(0x3D);
    let a: Vec<Matrix> =
        (0..6).map(|_| Matrix::from_fn(1, 5, |_, _| rng.random_range(-1.0..1.0))).collect();
    let b: Vec<Matrix> =
        (0..9).map(|_| Matrix::from_fn(1, 5, |_, _| rng.random_range(-1.0..1.0))).collect();
    let self_distance = mmd_distance(&a, &a.clone());
    let ab = mmd_distance(&a, &b);
    let ba = mmd_distance(&b, &a);
    let scaled = mmd_distance(
        &a.iter().map(|m| m.scale(2.5)).collect::<Vec<_>>(),
        &b.iter().map(|m| m.scale(2.5)).collect::<Vec<_>>(),
    );
    let ok = self_distance == 0.0 && (ab - ba).abs() < 1e-15 && (scaled - 2.5 * ab).abs() < 1e-12;
    (ok, format!("self {self_distance:.1e}, sym gap {:.1e}, scaling gap {:.1e}", (ab - ba).abs(), (scaled - 2.5 * ab).abs()))
}

/// On all-positive instances with the true adjacency, every recovery solve
/// is consistent: its least-squares residual must vanish even where the
/// solution is not unique.
pub fn check_recovery_residuals() -> (bool, String) {
    let mut rng = rng_from_seed(0x77);
    let mut worst: f64 = 0.0;
    for seed in 0..8u64 {
        let base = er_graph(derive_seed(0x78, seed, 0), 7, 3);
        let graph = Graph::new(
            base.node_features().map(|v| v + 0.2),
            base.adjacency().clone(),
            0,
        )
        .expect("valid graph");
        let mut params = init_params(
            &ModelConfig {
                feature_dim: 3,
                hidden_dim: rng.random_range(4..=8),
                gcn_layers: rng.random_range(1..=3),
                classes: 3,
                pooling: PoolingDescriptor::Sum,
            },
            &mut rng,
        )
        .expect("valid config");
        for w in &mut params.gcn_weights {
            *w = w.map(|v| v.abs() + 0.05);
        }
        let trace = forward(&params, &graph, 0).expect("forward");
        let bundle = backward_analytic(&trace, &params, &graph).expect("backward");
        let recovered = recover_features(
            &params,
            &bundle,
            graph.adjacency(),
            &AttackConfig::new(graph.node_count()),
        )
        .expect("recovery");
        for r in &recovered.solve_residuals {
            worst = worst.max(*r);
        }
    }
    (worst < 1e-8, format!("max solve residual {worst:.3e}"))
}

/// Serialize generated graphs to the TU text layout and parse them back.
pub fn check_tu_round_trip() -> (bool, String) {
    let spec = AuxiliarySpec {
        structure: StructureModel::ErdosRenyi { edge_probability: 0.4 },
        features: FeatureModel::OneHot { classes: 3 },
        graph_count: 20,
        max_nodes: 9,
        label_classes: 2,
    };
    let graphs = generate_auxiliary(&spec, 0x7F).expect("generation");
    let all_classes = (0..3).all(|c| {
        graphs.iter().any(|g| (0..g.node_count()).any(|i| g.node_features()[(i, c)] == 1.0))
    }) && (0..2).all(|c| graphs.iter().any(|g| g.label() == c));
    if !all_classes {
        return (false, "fixture misses a class; adjust the seed".into());
    }
    let dir = std::env::temp_dir().join(format!("fgl-verify-{}", std::process::id()));
    let run = || -> Result<bool> {
        write_tu_dataset(&graphs, &dir, "RT")?;
        let back = parse_tu_dataset(&dir, "RT")?;
        Ok(back == graphs)
    };
    let outcome = run();
    let _ = std::fs::remove_dir_all(&dir);
    match outcome {
        Ok(true) => (true, format!("{} graphs preserved exactly", graphs.len())),
        Ok(false) => (false, "round trip altered the dataset".into()),
        Err(e) => (false, format!("round trip failed: {e}")),
    }
}
