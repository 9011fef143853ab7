//! Relaxed edge weights over the pooled scene graph, the sum-pooled GCN phase classifier,
//! and the joint model tying them to the clustering head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    clustering_loss_on_tape, ClusterAssignment, ClusteringConfig, ClusteringHead, ClusteringLoss, GraphInputs,
    LossVars, PooledSceneGraph,
};
use crate::error::{Error, Result};
use crate::layers::{Activation, Dense, GcnLayer};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor2};

/// `w_ij = σ(MLP([x_i ‖ x_j]))`, symmetrized. The first layer is split into source and
/// destination halves so all K² pairs share one `K × h` projection per side.
#[derive(Debug, Clone)]
pub struct EdgeWeightHead {
    pub src: ParamId,
    pub dst: ParamId,
    pub bias: ParamId,
    pub out: Dense,
}

impl EdgeWeightHead {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        // Glorot bounds for the full (2d × h) concatenated layer.
        let src = store.add_glorot_block("edge.src", dim, hidden, 2 * dim, hidden, rng);
        let dst = store.add_glorot_block("edge.dst", dim, hidden, 2 * dim, hidden, rng);
        let bias = store.add_zeros("edge.bias", 1, hidden);
        let out = Dense::new(store, "edge.out", hidden, 1, rng);
        Self { src, dst, bias, out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_pool: Var) -> Result<Var> {
        let k = tape.value(x_pool).rows();
        let ws = tape.param(store, self.src);
        let wd = tape.param(store, self.dst);
        let u = tape.matmul(x_pool, ws)?;
        let v = tape.matmul(x_pool, wd)?;
        let pairs = tape.pair_sum(u, v)?;
        let b = tape.param(store, self.bias);
        let h = tape.add_bias(pairs, b)?;
        let h = tape.selu(h)?;
        let logits = self.out.forward(tape, store, h)?;
        let square = tape.reshape(logits, k, k)?;
        let w = tape.sigmoid(square)?;
        tape.symmetrize(w)
    }
}

pub fn predict_edge_weights(head: &EdgeWeightHead, store: &ParamStore, sg: &mut PooledSceneGraph) -> Result<()> {
    let mut tape = Tape::new();
    let x = tape.input(sg.x_pool.clone());
    let w = head.forward(&mut tape, store, x)?;
    sg.w_pool = tape.value(w).clone();
    Ok(())
}

/// GCN stack over `A_pool ⊙ W_pool`, global sum pooling, then a dense layer to phase logits.
#[derive(Debug, Clone)]
pub struct PhaseClassifier {
    gcn: Vec<GcnLayer>,
    out: Dense,
}

impl PhaseClassifier {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: &[usize], phases: usize, rng: &mut impl Rng) -> Self {
        let mut width = dim;
        let mut gcn = Vec::new();
        for (i, &h) in hidden.iter().enumerate() {
            gcn.push(GcnLayer::new(store, &format!("classifier.gcn{i}"), width, h, Activation::Selu, rng));
            width = h;
        }
        let out = Dense::new(store, "classifier.out", width, phases, rng);
        Self { gcn, out }
    }

    /// Returns `1 × P` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_pool: Var, a_pool: Var, w_pool: Var) -> Result<Var> {
        let adj = tape.mul(a_pool, w_pool)?;
        let mut h = x_pool;
        for layer in &self.gcn {
            h = layer.forward_dense(tape, store, adj, h)?;
        }
        let pooled = tape.sum_rows(h)?;
        self.out.forward(tape, store, pooled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePrediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl PhasePrediction {
    pub fn from_logits(logits: &Tensor2) -> Self {
        let probs = crate::tape::softmax_rows_value(logits).into_data();
        let predicted = argmax(&probs);
        Self { logits: logits.data().to_vec(), probs, predicted }
    }
}

pub fn classify_phase(classifier: &PhaseClassifier, store: &ParamStore, sg: &PooledSceneGraph) -> Result<PhasePrediction> {
    let mut tape = Tape::new();
    let x = tape.input(sg.x_pool.clone());
    let a = tape.input(sg.a_pool.clone());
    let w = tape.input(sg.w_pool.clone());
    let logits = classifier.forward(&mut tape, store, x, a, w)?;
    Ok(PhasePrediction::from_logits(tape.value(logits)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub unsupervised: f64,
    pub supervised: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { unsupervised: 1.0, supervised: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossReport {
    pub l_u: f64,
    pub l_ce: f64,
    pub l_joint: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub clustering: ClusteringConfig,
    pub edge_hidden: usize,
    pub classifier_hidden: Vec<usize>,
    pub phases: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { clustering: ClusteringConfig::default(), edge_hidden: 16, classifier_hidden: vec![256], phases: 2 }
    }
}

/// Variables of one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub assignment: Var,
    pub clustering: LossVars,
    pub x_pool: Var,
    pub a_pool: Var,
    pub w_pool: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub assignment: ClusterAssignment,
    pub scene: PooledSceneGraph,
    pub prediction: PhasePrediction,
    pub loss: ClusteringLoss,
}

/// Clustering head, edge-weight head and phase classifier sharing one parameter store.
#[derive(Debug, Clone)]
pub struct DsgModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    dim: usize,
    clustering: ClusteringHead,
    edge: EdgeWeightHead,
    classifier: PhaseClassifier,
}

pub const CLUSTERING_PREFIX: &str = "cluster.";

impl DsgModel {
    pub fn new(config: ModelConfig, dim: usize, seed: u64) -> Result<Self> {
        if config.phases < 1 {
            return Err(Error::Config("phases must be at least 1".into()));
        }
        if config.clustering.k < 2 {
            return Err(Error::InvalidClusterCount { k: config.clustering.k, nodes: 0 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let clustering = ClusteringHead::new(&mut store, dim, &config.clustering, &mut rng);
        let edge = EdgeWeightHead::new(&mut store, dim, config.edge_hidden, &mut rng);
        let classifier = PhaseClassifier::new(&mut store, dim, &config.classifier_hidden, config.phases, &mut rng);
        Ok(Self { config, store, dim, clustering, edge, classifier })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clustering_head(&self) -> &ClusteringHead {
        &self.clustering
    }

    pub fn edge_head(&self) -> &EdgeWeightHead {
        &self.edge
    }

    pub fn classifier(&self) -> &PhaseClassifier {
        &self.classifier
    }

    /// Records graph → clusters → pooling → edge weights → logits. With `joint = false` the
    /// downstream path sees a detached copy of `C`, so L_CE does not reach the clustering head.
    pub fn forward(&self, tape: &mut Tape, inputs: &GraphInputs, joint: bool) -> Result<ForwardVars> {
        if inputs.features.cols() != self.dim {
            return Err(Error::shape("model", format!("features have {} dims, model expects {}", inputs.features.cols(), self.dim)));
        }
        let cfg = &self.config.clustering;
        let c = self.clustering.forward(tape, &self.store, inputs)?;
        let clustering = clustering_loss_on_tape(tape, c, inputs.operand()?, cfg.objective, cfg.regularizer_weight)?;
        let c_down = if joint { c } else { tape.detach(c) };
        let x = tape.input(inputs.features.clone());
        let x_pool = tape.matmul_tn(c_down, x)?;
        let ac = tape.spmm(inputs.adjacency.clone(), c_down)?;
        let a_full = tape.matmul_tn(c_down, ac)?;
        let a_pool = tape.zero_diag(a_full)?;
        let w_pool = self.edge.forward(tape, &self.store, x_pool)?;
        let logits = self.classifier.forward(tape, &self.store, x_pool, a_pool, w_pool)?;
        Ok(ForwardVars { assignment: c, clustering, x_pool, a_pool, w_pool, logits })
    }

    /// Full forward pass, returning the assignment, scene graph and phase prediction.
    pub fn infer(&self, inputs: &GraphInputs, frame_span: (i64, i64)) -> Result<Inference> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, inputs, true)?;
        let c = tape.value(vars.assignment).clone();
        let representatives = c.matmul_tn(&inputs.base_features)?;
        let scene = PooledSceneGraph {
            x_pool: tape.value(vars.x_pool).clone(),
            a_pool: tape.value(vars.a_pool).clone(),
            w_pool: tape.value(vars.w_pool).clone(),
            representatives,
            frame_span,
            cluster_labels: None,
        };
        let loss = ClusteringLoss {
            objective: self.config.clustering.objective,
            structure: tape.value(vars.clustering.structure).item(),
            regularizer: tape.value(vars.clustering.regularizer).item(),
            total: tape.value(vars.clustering.total).item(),
        };
        Ok(Inference {
            assignment: ClusterAssignment::new(c)?,
            scene,
            prediction: PhasePrediction::from_logits(tape.value(vars.logits)),
            loss,
        })
    }

    /// `L_joint = w_u · L_u + w_ce · L_CE` for one labelled window, with gradients for every parameter.
    pub fn joint_loss(&self, inputs: &GraphInputs, label: Option<usize>, weights: LossWeights, joint: bool) -> Result<(JointLossReport, Gradients)> {
        let label = label.ok_or(Error::MissingLabel)?;
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, inputs, joint)?;
        let ce = tape.softmax_cross_entropy(vars.logits, &[label])?;
        let lu = vars.clustering.total;
        let wu = if weights.unsupervised == 1.0 { lu } else { tape.scale(lu, weights.unsupervised)? };
        let wce = if weights.supervised == 1.0 { ce } else { tape.scale(ce, weights.supervised)? };
        let total = tape.add(wu, wce)?;
        let report = JointLossReport {
            l_u: tape.value(lu).item(),
            l_ce: tape.value(ce).item(),
            l_joint: tape.value(total).item(),
            weights,
        };
        let grads = tape.backward(total)?;
        Ok((report, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DynamicGraph, Edge};

    fn store_with_edge_head(dim: usize, seed: u64) -> (ParamStore, EdgeWeightHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = EdgeWeightHead::new(&mut store, dim, 8, &mut rng);
        (store, head)
    }

    fn scene(x_pool: Tensor2, a_pool: Tensor2) -> PooledSceneGraph {
        let k = x_pool.rows();
        PooledSceneGraph {
            representatives: x_pool.clone(),
            x_pool,
            w_pool: Tensor2::filled(k, k, 0.5),
            a_pool,
            frame_span: (0, 1),
            cluster_labels: None,
        }
    }

    #[test]
    fn edge_weights_symmetric_in_open_unit_interval() {
        let (store, head) = store_with_edge_head(3, 0);
        let x = Tensor2::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let mut sg = scene(x, Tensor2::zeros(4, 4));
        predict_edge_weights(&head, &store, &mut sg).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let w = sg.w_pool[(i, j)];
                assert!(w > 0.0 && w < 1.0);
                assert_eq!(w, sg.w_pool[(j, i)]);
            }
        }
    }

    #[test]
    fn saturated_bias_disconnects_graph() {
        let (mut store, head) = store_with_edge_head(3, 1);
        store.get_mut(head.out.bias).value = Tensor2::scalar(-1e3);
        let mut sg = scene(Tensor2::filled(3, 3, 0.2), Tensor2::zeros(3, 3));
        predict_edge_weights(&head, &store, &mut sg).unwrap();
        assert!(sg.w_pool.max_abs() < 1e-12);
    }

    #[test]
    fn identical_cluster_features_give_equal_weights() {
        let (store, head) = store_with_edge_head(3, 2);
        let mut sg = scene(Tensor2::from_fn(4, 3, |_, j| j as f64 - 0.5), Tensor2::zeros(4, 4));
        predict_edge_weights(&head, &store, &mut sg).unwrap();
        let w0 = sg.w_pool[(0, 0)];
        assert!(sg.w_pool.data().iter().all(|&w| w == w0));
    }

    fn classifier(dim: usize, seed: u64) -> (ParamStore, PhaseClassifier) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = PhaseClassifier::new(&mut store, dim, &[5], 3, &mut rng);
        (store, c)
    }

    #[test]
    fn zero_weights_still_give_distribution() {
        let (store, clf) = classifier(2, 3);
        let mut sg = scene(Tensor2::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]), Tensor2::from_rows(&[&[0.0, 3.0], &[3.0, 0.0]]));
        sg.w_pool = Tensor2::zeros(2, 2);
        let p = classify_phase(&clf, &store, &sg).unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.predicted, argmax(&p.probs));
    }

    #[test]
    fn duplicating_isolated_nodes_doubles_sum_pool() {
        // With no edges every node sees only itself, so duplicated nodes double the pooled vector.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let clf = PhaseClassifier::new(&mut store, 2, &[4], 2, &mut rng);
        let x = Tensor2::from_rows(&[&[0.5, -0.2], &[0.1, 0.9]]);
        let x2 = Tensor2::from_rows(&[&[0.5, -0.2], &[0.1, 0.9], &[0.5, -0.2], &[0.1, 0.9]]);
        let pooled = |x: &Tensor2| {
            let mut tape = Tape::new();
            let k = x.rows();
            let xv = tape.input(x.clone());
            let a = tape.input(Tensor2::zeros(k, k));
            let w = tape.input(Tensor2::zeros(k, k));
            let logits = clf.forward(&mut tape, &store, xv, a, w).unwrap();
            let bias = store.value(clf.out.bias).clone();
            tape.value(logits).sub(&bias).unwrap()
        };
        let single = pooled(&x);
        let double = pooled(&x2);
        for (a, b) in single.data().iter().zip(double.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_invariant_to_cluster_relabeling() {
        let (store, clf) = classifier(3, 5);
        let x = Tensor2::from_fn(4, 3, |i, j| ((i + 2 * j) as f64 * 0.7).cos());
        let a = Tensor2::from_fn(4, 4, |i, j| if i == j { 0.0 } else { (i + j) as f64 * 0.3 });
        let mut sg = scene(x.clone(), a.clone());
        sg.w_pool = Tensor2::from_fn(4, 4, |i, j| 0.1 + 0.05 * (i * j) as f64);
        let perm = [2, 0, 3, 1];
        let permuted = PooledSceneGraph {
            x_pool: x.select_rows(&perm),
            a_pool: a.permute_symmetric(&perm),
            w_pool: sg.w_pool.permute_symmetric(&perm),
            ..sg.clone()
        };
        let p = classify_phase(&clf, &store, &sg).unwrap();
        let q = classify_phase(&clf, &store, &permuted).unwrap();
        for (a, b) in p.probs.iter().zip(&q.probs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    pub(crate) fn toy_graph() -> DynamicGraph {
        // 2 frames × 4 patches, features in 3 dims, a few spatial and temporal edges.
        let features = Tensor2::from_fn(8, 3, |i, j| (((i * 5 + j * 3) % 7) as f64 - 3.0) / 4.0);
        DynamicGraph {
            window: 2,
            patches: 4,
            node_features: features,
            spatial_edges: vec![
                Edge { u: 0, v: 1, weight: 0.95 },
                Edge { u: 2, v: 3, weight: 0.92 },
                Edge { u: 4, v: 5, weight: 0.97 },
                Edge { u: 5, v: 6, weight: 0.91 },
            ],
            temporal_edges: vec![Edge { u: 0, v: 4, weight: 0.9 }, Edge { u: 3, v: 7, weight: 0.8 }],
        }
    }

    fn toy_model(joint_phases: usize) -> DsgModel {
        let config = ModelConfig {
            clustering: ClusteringConfig { k: 3, gcn_hidden: vec![4], mlp_hidden: vec![4], ..Default::default() },
            edge_hidden: 4,
            classifier_hidden: vec![4],
            phases: joint_phases,
        };
        DsgModel::new(config, 3, 11).unwrap()
    }

    #[test]
    fn joint_loss_is_sum_of_parts() {
        let model = toy_model(2);
        let inputs = GraphInputs::new(&toy_graph(), &model.config.clustering).unwrap();
        let (report, _) = model.joint_loss(&inputs, Some(1), LossWeights::default(), true).unwrap();
        assert_eq!(report.l_joint, report.l_u + report.l_ce);
    }

    #[test]
    fn missing_label_is_an_error() {
        let model = toy_model(2);
        let inputs = GraphInputs::new(&toy_graph(), &model.config.clustering).unwrap();
        assert!(matches!(model.joint_loss(&inputs, None, LossWeights::default(), true), Err(Error::MissingLabel)));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let model = toy_model(3);
        let inputs = GraphInputs::new(&toy_graph(), &model.config.clustering).unwrap();
        let (_, grads) = model.joint_loss(&inputs, Some(2), LossWeights::default(), true).unwrap();
        for (id, p) in model.store.iter() {
            let g = grads.get(id).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(g.max_abs() > 0.0, "{} has zero gradient", p.name);
        }
    }

    #[test]
    fn detached_path_keeps_clustering_gradient_unsupervised() {
        let model = toy_model(2);
        let inputs = GraphInputs::new(&toy_graph(), &model.config.clustering).unwrap();
        let ce_only = LossWeights { unsupervised: 0.0, supervised: 1.0 };
        let (_, grads) = model.joint_loss(&inputs, Some(0), ce_only, false).unwrap();
        for (id, p) in model.store.iter() {
            if p.name.starts_with(CLUSTERING_PREFIX) {
                assert_eq!(grads.get(id).map_or(0.0, Tensor2::max_abs), 0.0, "{}", p.name);
            }
        }
    }

    #[test]
    fn perfect_prediction_reduces_joint_to_unsupervised() {
        let mut model = toy_model(2);
        let inputs = GraphInputs::new(&toy_graph(), &model.config.clustering).unwrap();
        let bias = model.classifier.out.bias;
        model.store.get_mut(bias).value = Tensor2::from_rows(&[&[0.0, 1e3]]);
        let (report, _) = model.joint_loss(&inputs, Some(1), LossWeights::default(), true).unwrap();
        assert!(report.l_ce < 1e-12);
        assert!((report.l_joint - report.l_u).abs() < 1e-12);
    }
}
