//! Central finite-difference checks for every differentiable tape op, both clustering
//! objectives and the full joint loss of [`DsgModel`].
//!
//! Each case owns a small [`ParamStore`] and records a scalar on a fresh tape. Every stored
//! entry is perturbed by `±STEP`; the error for one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, DENOMINATOR_FLOOR)`, so gradients far
//! below the floor are compared absolutely rather than amplified into noise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{clustering_loss_on_tape, GraphInputs, Objective};
use crate::downstream::{DsgModel, LossWeights, ModelConfig};
use crate::error::Result;
use crate::graph::{build_dynamic_graph, EncodingConfig, FeatureClip, GraphConfig, Grid};
use crate::layers::{Dense, GcnLayer};
use crate::matcher::{Match, MatchList};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tape::{GraphOperand, Tape, Var};
use crate::tensor::Tensor2;

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const DENOMINATOR_FLOOR: f64 = 1e-3;
/// Seeds used when none are given.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest error over all seeds and coordinates.
    pub max_rel_error: f64,
    pub seeds: usize,
    /// Coordinates compared, summed over seeds.
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed(self.tolerance))
    }

    /// One line per check: name, max relative error, verdict.
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{:<22} max_rel_err={:.3e} seeds={} coords={} {}",
                    c.name,
                    c.max_rel_error,
                    c.seeds,
                    c.coordinates,
                    if c.passed(self.tolerance) { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// A scalar function of the parameters in `store`.
struct Case {
    store: ParamStore,
    build: Build,
}

impl Case {
    fn eval(&self, store: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new();
        let out = (self.build)(&mut tape, store)?;
        Ok(tape.value(out).item())
    }

    fn gradients(&self) -> Result<Gradients> {
        let mut tape = Tape::new();
        let out = (self.build)(&mut tape, &self.store)?;
        tape.backward(out)
    }
}

/// Max relative error and coordinate count between `grads` and central differences of `f`.
fn compare(store: &ParamStore, grads: &Gradients, mut f: impl FnMut(&ParamStore) -> Result<f64>) -> Result<(f64, usize)> {
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let mut count = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        for e in 0..len {
            let original = probe.value(id).data()[e];
            probe.get_mut(id).value.data_mut()[e] = original + STEP;
            let plus = f(&probe)?;
            probe.get_mut(id).value.data_mut()[e] = original - STEP;
            let minus = f(&probe)?;
            probe.get_mut(id).value.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[e]);
            worst = worst.max(relative_error(analytic, numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Entries bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Weighted symmetric graph on `n` nodes with at least one edge per node.
fn random_operand(rng: &mut ChaCha8Rng, n: usize) -> Arc<GraphOperand> {
    let mut triplets = Vec::new();
    for i in 0..n {
        // A ring guarantees every node has an edge.
        let j = (i + 1) % n;
        let w = rng.random_range(0.2..1.0);
        triplets.push((i, j, w));
        triplets.push((j, i, w));
        for j in i + 2..n {
            if rng.random_bool(0.4) && !(i == 0 && j == n - 1) {
                let w = rng.random_range(0.2..1.0);
                triplets.push((i, j, w));
                triplets.push((j, i, w));
            }
        }
    }
    let adj = CsrMatrix::from_triplets(n, &triplets).expect("valid triplets");
    GraphOperand::new(adj).expect("graph has edges")
}

/// Contracts `out` with a fixed random weight matrix to obtain a scalar.
fn contract(tape: &mut Tape, out: Var, weights: &Tensor2) -> Result<Var> {
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w)?;
    let cols = tape.sum_rows(prod)?;
    let ones = tape.input(Tensor2::filled(weights.cols(), 1, 1.0));
    tape.matmul(cols, ones)
}

/// Case for an op with tensor output: `build` maps params to the op output.
fn op_case(
    inputs: Vec<Tensor2>,
    out_shape: (usize, usize),
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    rng: &mut ChaCha8Rng,
) -> Case {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.into_iter().enumerate().map(|(i, t)| store.add(format!("x{i}"), t)).collect();
    let weights = uniform(rng, out_shape.0, out_shape.1, -1.0, 1.0);
    let build: Build = Box::new(move |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = op(tape, &vars)?;
        contract(tape, out, &weights)
    });
    Case { store, build }
}

/// Case for a scalar-valued function of an assignment `C = softmax(Z)`.
fn assignment_case(
    rng: &mut ChaCha8Rng,
    nodes: usize,
    k: usize,
    loss: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Case {
    let mut store = ParamStore::new();
    let z = store.add("z", uniform(rng, nodes, k, -2.0, 2.0));
    let build: Build = Box::new(move |tape, store| {
        let zv = tape.param(store, z);
        let c = tape.softmax_rows(zv)?;
        loss(tape, c)
    });
    Case { store, build }
}

const OP_NAMES: [&str; 25] = [
    "matmul",
    "matmul_tn",
    "spmm",
    "add_bias",
    "add",
    "mul",
    "scale",
    "selu",
    "sigmoid",
    "softmax_rows",
    "sum_rows",
    "gcn_norm",
    "zero_diag",
    "pair_sum",
    "reshape",
    "symmetrize",
    "softmax_cross_entropy",
    "modularity",
    "collapse",
    "mincut_cut",
    "mincut_ortho",
    "dense_layer",
    "gcn_layer",
    "dmon_loss",
    "mincut_loss",
];

fn build_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    match name {
        "matmul" => {
            let (a, b) = (uniform(rng, 4, 3, -1.0, 1.0), uniform(rng, 3, 5, -1.0, 1.0));
            op_case(vec![a, b], (4, 5), |t, v| t.matmul(v[0], v[1]), rng)
        }
        "matmul_tn" => {
            let (a, b) = (uniform(rng, 4, 3, -1.0, 1.0), uniform(rng, 4, 5, -1.0, 1.0));
            op_case(vec![a, b], (3, 5), |t, v| t.matmul_tn(v[0], v[1]), rng)
        }
        "spmm" => {
            let mut triplets = Vec::new();
            for i in 0..5 {
                for j in 0..5 {
                    if rng.random_bool(0.5) {
                        triplets.push((i, j, rng.random_range(-1.0..1.0)));
                    }
                }
            }
            let m = Arc::new(CsrMatrix::from_triplets(5, &triplets).expect("valid triplets"));
            let x = uniform(rng, 5, 3, -1.0, 1.0);
            op_case(vec![x], (5, 3), move |t, v| t.spmm(Arc::clone(&m), v[0]), rng)
        }
        "add_bias" => {
            let (x, b) = (uniform(rng, 4, 3, -1.0, 1.0), uniform(rng, 1, 3, -1.0, 1.0));
            op_case(vec![x, b], (4, 3), |t, v| t.add_bias(v[0], v[1]), rng)
        }
        "add" => {
            let (a, b) = (uniform(rng, 4, 3, -1.0, 1.0), uniform(rng, 4, 3, -1.0, 1.0));
            op_case(vec![a, b], (4, 3), |t, v| t.add(v[0], v[1]), rng)
        }
        "mul" => {
            let (a, b) = (uniform(rng, 4, 3, -1.0, 1.0), uniform(rng, 4, 3, -1.0, 1.0));
            op_case(vec![a, b], (4, 3), |t, v| t.mul(v[0], v[1]), rng)
        }
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            op_case(vec![uniform(rng, 4, 3, -1.0, 1.0)], (4, 3), move |t, v| t.scale(v[0], s), rng)
        }
        "selu" => op_case(vec![off_zero(rng, 4, 3)], (4, 3), |t, v| t.selu(v[0]), rng),
        "sigmoid" => op_case(vec![uniform(rng, 4, 3, -3.0, 3.0)], (4, 3), |t, v| t.sigmoid(v[0]), rng),
        "softmax_rows" => op_case(vec![uniform(rng, 3, 4, -2.0, 2.0)], (3, 4), |t, v| t.softmax_rows(v[0]), rng),
        "sum_rows" => op_case(vec![uniform(rng, 4, 3, -1.0, 1.0)], (1, 3), |t, v| t.sum_rows(v[0]), rng),
        "gcn_norm" => op_case(vec![uniform(rng, 5, 5, 0.1, 1.0)], (5, 5), |t, v| t.gcn_norm(v[0]), rng),
        "zero_diag" => op_case(vec![uniform(rng, 4, 4, -1.0, 1.0)], (4, 4), |t, v| t.zero_diag(v[0]), rng),
        "pair_sum" => {
            let (u, w) = (uniform(rng, 3, 2, -1.0, 1.0), uniform(rng, 3, 2, -1.0, 1.0));
            op_case(vec![u, w], (9, 2), |t, v| t.pair_sum(v[0], v[1]), rng)
        }
        "reshape" => op_case(vec![uniform(rng, 6, 2, -1.0, 1.0)], (3, 4), |t, v| t.reshape(v[0], 3, 4), rng),
        "symmetrize" => op_case(vec![uniform(rng, 4, 4, -1.0, 1.0)], (4, 4), |t, v| t.symmetrize(v[0]), rng),
        "softmax_cross_entropy" => {
            let mut store = ParamStore::new();
            let z = store.add("z", uniform(rng, 4, 3, -2.0, 2.0));
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let build: Build = Box::new(move |tape, store| {
                let zv = tape.param(store, z);
                tape.softmax_cross_entropy(zv, &labels)
            });
            Case { store, build }
        }
        "modularity" => {
            let g = random_operand(rng, 6);
            assignment_case(rng, 6, 3, move |t, c| t.modularity(c, Arc::clone(&g)))
        }
        "collapse" => assignment_case(rng, 6, 3, |t, c| t.collapse(c)),
        "mincut_cut" => {
            let g = random_operand(rng, 6);
            assignment_case(rng, 6, 3, move |t, c| t.mincut_cut(c, Arc::clone(&g)))
        }
        "mincut_ortho" => assignment_case(rng, 6, 3, |t, c| t.mincut_ortho(c)),
        "dense_layer" => {
            let mut store = ParamStore::new();
            let layer = Dense::new(&mut store, "dense", 3, 4, rng);
            let x = store.add("x", uniform(rng, 5, 3, -1.0, 1.0));
            let weights = uniform(rng, 5, 4, -1.0, 1.0);
            let build: Build = Box::new(move |tape, store| {
                let xv = tape.param(store, x);
                let out = layer.forward(tape, store, xv)?;
                contract(tape, out, &weights)
            });
            Case { store, build }
        }
        "gcn_layer" => {
            let mut store = ParamStore::new();
            let layer = GcnLayer::new(&mut store, "gcn", 3, 4, crate::layers::Activation::Selu, rng);
            let a = store.add("a", uniform(rng, 5, 5, 0.1, 1.0));
            let x = store.add("x", uniform(rng, 5, 3, -1.0, 1.0));
            let weights = uniform(rng, 5, 4, -1.0, 1.0);
            let build: Build = Box::new(move |tape, store| {
                let (av, xv) = (tape.param(store, a), tape.param(store, x));
                let out = layer.forward_dense(tape, store, av, xv)?;
                contract(tape, out, &weights)
            });
            Case { store, build }
        }
        "dmon_loss" | "mincut_loss" => {
            let objective = if name == "dmon_loss" { Objective::Dmon } else { Objective::Mincut };
            let g = random_operand(rng, 7);
            let weight = rng.random_range(0.3..1.5);
            assignment_case(rng, 7, 3, move |t, c| Ok(clustering_loss_on_tape(t, c, &g, objective, weight)?.total))
        }
        other => unreachable!("unknown gradcheck case {other}"),
    }
}

/// Names of all checks, in report order.
pub fn check_names() -> Vec<&'static str> {
    OP_NAMES.iter().copied().chain(["joint_loss_dmon", "joint_loss_mincut"]).collect()
}

fn check_op(name: &str, seeds: &[u64]) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(name));
        let case = build_case(name, &mut rng);
        let grads = case.gradients()?;
        let (err, count) = compare(&case.store, &grads, |s| case.eval(s))?;
        worst = worst.max(err);
        coordinates += count;
    }
    Ok(CheckResult { name: name.to_string(), max_rel_error: worst, seeds: seeds.len(), coordinates })
}

/// Two-frame 3×3 toy clip with two planted feature groups, temporal matches and encodings.
fn toy_inputs(rng: &mut ChaCha8Rng, model: &ModelConfig) -> Result<GraphInputs> {
    let (w, grid, d) = (2, Grid::new(3, 3), 8);
    let n = grid.patches();
    let means = [uniform(rng, 1, d, -1.0, 1.0), uniform(rng, 1, d, -1.0, 1.0)];
    let groups: Vec<usize> = (0..n).map(|p| usize::from(p % 3 == 0 || rng.random_bool(0.3))).collect();
    let features = Tensor2::from_fn(w * n, d, |i, k| means[groups[i % n]].data()[k] + 0.1 * rng.random_range(-1.0..1.0));
    let clip = FeatureClip::new(w, grid, features, vec![0, 1], Some(0))?;
    let config = GraphConfig {
        tau: 0.8,
        normalize: true,
        encodings: EncodingConfig { temporal: true, spatial: true, scale: 0.5 },
        feature_scale: 1.0,
    };
    let matches = vec![MatchList { pairs: (0..n).map(|p| Match { src: p, dst: p, confidence: 0.9 }).collect() }];
    let g = build_dynamic_graph(&clip, &config, &matches)?;
    GraphInputs::new(&g, &model.clustering)
}

fn check_joint(objective: Objective, seeds: &[u64]) -> Result<CheckResult> {
    let name = match objective {
        Objective::Dmon => "joint_loss_dmon",
        Objective::Mincut => "joint_loss_mincut",
    };
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(name));
        let mut config = ModelConfig::default();
        config.clustering.k = 3;
        config.clustering.objective = objective;
        config.clustering.gcn_hidden = vec![5];
        config.clustering.mlp_hidden = vec![4];
        config.clustering.regularizer_weight = rng.random_range(0.5..1.5);
        config.edge_hidden = 4;
        config.classifier_hidden = vec![4];
        config.phases = 3;
        let inputs = toy_inputs(&mut rng, &config)?;
        let model = DsgModel::new(config, 8, seed)?;
        let label = Some(rng.random_range(0..3));
        let weights = LossWeights { unsupervised: rng.random_range(0.5..1.5), supervised: rng.random_range(0.5..1.5) };
        let (_, grads) = model.joint_loss(&inputs, label, weights, true)?;
        let mut probe = model.clone();
        let (err, count) = compare(&model.store, &grads, |s| {
            probe.store.clone_from(s);
            Ok(probe.joint_loss(&inputs, label, weights, true)?.0.l_joint)
        })?;
        worst = worst.max(err);
        coordinates += count;
    }
    Ok(CheckResult { name: name.to_string(), max_rel_error: worst, seeds: seeds.len(), coordinates })
}

/// Stable per-name seed offset so cases draw independent inputs.
fn fnv(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Runs every check over `seeds`.
pub fn run_gradcheck(seeds: &[u64]) -> Result<GradcheckReport> {
    let mut checks = Vec::with_capacity(OP_NAMES.len() + 2);
    for name in OP_NAMES {
        checks.push(check_op(name, seeds)?);
    }
    checks.push(check_joint(Objective::Dmon, seeds)?);
    checks.push(check_joint(Objective::Mincut, seeds)?);
    Ok(GradcheckReport { tolerance: GRADCHECK_TOLERANCE, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_one_seed() {
        let report = run_gradcheck(&[11]).unwrap();
        assert_eq!(report.checks.len(), check_names().len());
        for line in report.lines() {
            assert!(line.ends_with("ok"), "{line}");
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let case = build_case("matmul", &mut rng);
        let mut grads = case.gradients().unwrap();
        let id = case.store.ids().next().unwrap();
        let mut bad = grads.get(id).unwrap().clone();
        bad.data_mut()[0] += 0.1;
        grads = {
            let mut g = Gradients::default();
            for (pid, t) in grads.iter() {
                g.add(pid, if pid == id { &bad } else { t });
            }
            g
        };
        let (err, _) = compare(&case.store, &grads, |s| case.eval(s)).unwrap();
        assert!(err > GRADCHECK_TOLERANCE);
    }

    #[test]
    fn relative_error_floors_small_denominators() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2e-9, 1e-9) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
