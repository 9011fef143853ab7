//! Brute-force reference implementations shared by the integration suites and the
//! acceptance target. None of these call into the library's own math.
#![allow(dead_code)]

use dsg_core::graph::Edge;
use dsg_core::Tensor2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `Q = (1/2m) Σ_ij [A_ij − k_i k_j / 2m] δ(c_i, c_j)` straight from the definition.
pub fn brute_modularity(adj: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = adj.len();
    let k: Vec<f64> = adj.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += adj[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Erdős–Rényi graph on 2..=8 nodes with at least one edge; half the draws are weighted.
pub fn random_graph(rng: &mut ChaCha8Rng) -> (usize, Vec<Edge>) {
    loop {
        let n = rng.random_range(2..=8);
        let p = rng.random_range(0.2..0.8);
        let weighted = rng.random_bool(0.5);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(p) {
                    let weight = if weighted { rng.random_range(0.1..2.0) } else { 1.0 };
                    edges.push(Edge { u, v, weight });
                }
            }
        }
        if !edges.is_empty() {
            return (n, edges);
        }
    }
}

pub fn dense_adjacency(n: usize, edges: &[Edge]) -> Vec<Vec<f64>> {
    let mut adj = vec![vec![0.0; n]; n];
    for e in edges {
        adj[e.u][e.v] += e.weight;
        adj[e.v][e.u] += e.weight;
    }
    adj
}

/// The `i`-th labelling (base-3 digits) of `n` nodes into at most three clusters.
pub fn base3_labels(code: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect()
}

pub struct PhaseTally {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

pub fn tally_phases(preds: &[usize], truth: &[usize], classes: usize) -> PhaseTally {
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / truth.len() as f64;
    let mut per_class_f1 = Vec::new();
    for c in 0..classes {
        let tp = preds.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
        let fp = preds.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count();
        let fn_ = preds.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count();
        let denom = 2 * tp + fp + fn_;
        per_class_f1.push(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 });
    }
    let present: Vec<usize> = (0..classes).filter(|c| truth.contains(c)).collect();
    let macro_f1 = present.iter().map(|&c| per_class_f1[c]).sum::<f64>() / present.len() as f64;
    PhaseTally { accuracy, macro_f1, per_class_f1 }
}

pub fn tally_iou(preds: &[Vec<usize>], truth: &[Vec<usize>], class: usize) -> Option<f64> {
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, t) in preds.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            if a == class && b == class {
                inter += 1;
            }
            if a == class || b == class {
                union += 1;
            }
        }
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

pub fn tally_pac(preds: &[Vec<usize>], truth: &[Vec<usize>]) -> f64 {
    let total: usize = truth.iter().map(Vec::len).sum();
    let correct = preds.iter().flatten().zip(truth.iter().flatten()).filter(|(a, b)| a == b).count();
    correct as f64 / total as f64
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * ny)
}

/// All-pairs mutual-nearest-neighbour reference with lowest-index tie breaking.
pub fn brute_matches(a: &Tensor2, b: &Tensor2, min_conf: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let s = cosine(a.row(i), b.row(j));
            let best_in_b = (0..b.rows()).all(|k| {
                let t = cosine(a.row(i), b.row(k));
                t < s || (t == s && k >= j)
            });
            let best_in_a = (0..a.rows()).all(|k| {
                let t = cosine(a.row(k), b.row(j));
                t < s || (t == s && k >= i)
            });
            if best_in_b && best_in_a && s >= min_conf {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor2 {
    Tensor2::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}
