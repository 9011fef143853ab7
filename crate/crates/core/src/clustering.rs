//! Differentiable graph clustering: a GCN + MLP + softmax head producing soft cluster
//! assignments, the DMON (modularity + collapse) and MinCut (cut + orthogonality)
//! objectives, and pooling of the patch graph into a scene graph.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DynamicGraph;
use crate::layers::{Activation, Dense, GcnLayer};
use crate::params::ParamStore;
use crate::sparse::CsrMatrix;
use crate::tape::{self, GraphOperand, Tape, Var};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dmon,
    Mincut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub k: usize,
    pub objective: Objective,
    /// Output widths of the GCN stack (SeLU after each layer).
    pub gcn_hidden: Vec<usize>,
    /// Hidden widths of the MLP between the GCN stack and the K-way softmax.
    pub mlp_hidden: Vec<usize>,
    /// Weight of the collapse (DMON) or orthogonality (MinCut) term.
    pub regularizer_weight: f64,
    pub spatial_weight: f64,
    pub temporal_weight: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 16,
            objective: Objective::Dmon,
            gcn_hidden: vec![256],
            mlp_hidden: vec![256],
            regularizer_weight: 1.0,
            spatial_weight: 1.0,
            temporal_weight: 1.0,
        }
    }
}

/// Row-stochastic `nodes × K` soft assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    c: Tensor2,
}

impl ClusterAssignment {
    pub fn new(c: Tensor2) -> Result<Self> {
        for i in 0..c.rows() {
            let row = c.row(i);
            if row.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v)) {
                return Err(Error::Invalid(format!("assignment row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("assignment row {i} sums to {s}")));
            }
        }
        Ok(Self { c })
    }

    /// One-hot assignment from hard labels.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidClusterCount { k, nodes: bad + 1 });
        }
        Ok(Self { c: Tensor2::from_fn(labels.len(), k, |i, j| if labels[i] == j { 1.0 } else { 0.0 }) })
    }

    pub fn uniform(nodes: usize, k: usize) -> Self {
        Self { c: Tensor2::filled(nodes, k, 1.0 / k as f64) }
    }

    pub fn matrix(&self) -> &Tensor2 {
        &self.c
    }

    pub fn k(&self) -> usize {
        self.c.cols()
    }

    pub fn nodes(&self) -> usize {
        self.c.rows()
    }

    /// Argmax cluster per node, lowest index on ties.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.c.rows()).map(|i| self.c.argmax_row(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringLoss {
    pub objective: Objective,
    /// Modularity term (DMON) or cut term (MinCut).
    pub structure: f64,
    /// Collapse term (DMON) or orthogonality term (MinCut).
    pub regularizer: f64,
    pub total: f64,
}

/// Graph tensors derived once per dynamic graph and reused by every forward pass.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    /// Merged spatial + temporal adjacency.
    pub adjacency: Arc<CsrMatrix>,
    /// Self-loop renormalized adjacency for the GCN stack.
    pub normalized: Arc<CsrMatrix>,
    /// `None` when the graph has no edges.
    pub operand: Option<Arc<GraphOperand>>,
    pub features: Tensor2,
    /// Features pooled into scene-graph representatives (before positional encodings).
    pub base_features: Tensor2,
}

impl GraphInputs {
    pub fn new(g: &DynamicGraph, config: &ClusteringConfig) -> Result<Self> {
        let adjacency = g.combined_adjacency(config.spatial_weight, config.temporal_weight);
        let normalized = Arc::new(adjacency.gcn_normalized()?);
        let operand = match GraphOperand::new(adjacency.clone()) {
            Ok(op) => Some(op),
            Err(Error::EdgelessGraph) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            adjacency: Arc::new(adjacency),
            normalized,
            operand,
            features: g.node_features.clone(),
            base_features: g.node_features.clone(),
        })
    }

    pub fn with_base_features(mut self, base: Tensor2) -> Result<Self> {
        if base.rows() != self.features.rows() {
            return Err(Error::shape("graph_inputs", format!("{} base rows for {} nodes", base.rows(), self.features.rows())));
        }
        self.base_features = base;
        Ok(self)
    }

    pub fn nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn operand(&self) -> Result<&Arc<GraphOperand>> {
        self.operand.as_ref().ok_or(Error::EdgelessGraph)
    }
}

/// GCN stack with SeLU, then an MLP ending in a K-way softmax.
#[derive(Debug, Clone)]
pub struct ClusteringHead {
    gcn: Vec<GcnLayer>,
    mlp: Vec<Dense>,
    out: Dense,
    k: usize,
}

impl ClusteringHead {
    pub fn new(store: &mut ParamStore, dim: usize, config: &ClusteringConfig, rng: &mut impl Rng) -> Self {
        let mut width = dim;
        let mut gcn = Vec::new();
        for (i, &h) in config.gcn_hidden.iter().enumerate() {
            gcn.push(GcnLayer::new(store, &format!("cluster.gcn{i}"), width, h, Activation::Selu, rng));
            width = h;
        }
        let mut mlp = Vec::new();
        for (i, &h) in config.mlp_hidden.iter().enumerate() {
            mlp.push(Dense::new(store, &format!("cluster.mlp{i}"), width, h, rng));
            width = h;
        }
        let out = Dense::new(store, "cluster.out", width, config.k, rng);
        Self { gcn, mlp, out, k: config.k }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Records the head on `tape` and returns the assignment variable.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &GraphInputs) -> Result<Var> {
        if self.k < 2 || self.k > inputs.nodes() {
            return Err(Error::InvalidClusterCount { k: self.k, nodes: inputs.nodes() });
        }
        let mut h = tape.input(inputs.features.clone());
        for layer in &self.gcn {
            h = layer.forward_sparse(tape, store, &inputs.normalized, h)?;
        }
        for layer in &self.mlp {
            let z = layer.forward(tape, store, h)?;
            h = tape.selu(z)?;
        }
        let logits = self.out.forward(tape, store, h)?;
        tape.softmax_rows(logits)
    }
}

pub fn assign_clusters(head: &ClusteringHead, store: &ParamStore, inputs: &GraphInputs) -> Result<ClusterAssignment> {
    let mut tape = Tape::new();
    let c = head.forward(&mut tape, store, inputs)?;
    Ok(ClusterAssignment { c: tape.value(c).clone() })
}

/// Variables for the clustering objective recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub structure: Var,
    pub regularizer: Var,
    pub total: Var,
}

pub fn clustering_loss_on_tape(
    tape: &mut Tape,
    c: Var,
    operand: &Arc<GraphOperand>,
    objective: Objective,
    regularizer_weight: f64,
) -> Result<LossVars> {
    let (structure, regularizer) = match objective {
        Objective::Dmon => (tape.modularity(c, Arc::clone(operand))?, tape.collapse(c)?),
        Objective::Mincut => (tape.mincut_cut(c, Arc::clone(operand))?, tape.mincut_ortho(c)?),
    };
    let weighted = if regularizer_weight == 1.0 { regularizer } else { tape.scale(regularizer, regularizer_weight)? };
    let total = tape.add(structure, weighted)?;
    Ok(LossVars { structure, regularizer, total })
}

fn operand_for(c: &ClusterAssignment, g: &DynamicGraph, config: &ClusteringConfig) -> Result<Arc<GraphOperand>> {
    if c.nodes() != g.nodes() {
        return Err(Error::shape("clustering_loss", format!("{} assignment rows for {} nodes", c.nodes(), g.nodes())));
    }
    GraphOperand::new(g.combined_adjacency(config.spatial_weight, config.temporal_weight))
}

/// DMON objective: `−Tr(CᵀBC)/2m + weight · ((√K/N)‖Cᵀ1‖ − 1)`.
pub fn dmon_loss(c: &ClusterAssignment, g: &DynamicGraph, config: &ClusteringConfig) -> Result<ClusteringLoss> {
    let op = operand_for(c, g, config)?;
    let structure = tape::modularity_term(&c.c, &op)?;
    let regularizer = tape::collapse_term(&c.c);
    Ok(ClusteringLoss {
        objective: Objective::Dmon,
        structure,
        regularizer,
        total: structure + config.regularizer_weight * regularizer,
    })
}

/// MinCut objective: `−Tr(CᵀAC)/Tr(CᵀDC) + weight · ‖CᵀC/‖CᵀC‖ − I/√K‖`.
pub fn mincut_loss(c: &ClusterAssignment, g: &DynamicGraph, config: &ClusteringConfig) -> Result<ClusteringLoss> {
    let op = operand_for(c, g, config)?;
    let structure = tape::mincut_cut_term(&c.c, &op)?;
    let regularizer = tape::mincut_ortho_term(&c.c)?;
    Ok(ClusteringLoss {
        objective: Objective::Mincut,
        structure,
        regularizer,
        total: structure + config.regularizer_weight * regularizer,
    })
}

/// Cluster-level scene graph for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSceneGraph {
    /// `CᵀX` over the node features the heads consume.
    pub x_pool: Tensor2,
    /// `CᵀAC` with the diagonal zeroed.
    pub a_pool: Tensor2,
    /// Relaxed edge weights in `[0, 1]`.
    pub w_pool: Tensor2,
    /// Pooled features before positional encodings; used for prototype scoring.
    pub representatives: Tensor2,
    pub frame_span: (i64, i64),
    pub cluster_labels: Option<Vec<usize>>,
}

impl PooledSceneGraph {
    pub fn k(&self) -> usize {
        self.a_pool.rows()
    }
}

/// Pools features and adjacency through `C`. `W_pool` starts as `A_pool` scaled to `[0, 1]`.
pub fn pool_graph(c: &ClusterAssignment, g: &DynamicGraph, config: &ClusteringConfig, base_features: Option<&Tensor2>) -> Result<PooledSceneGraph> {
    let adj = g.combined_adjacency(config.spatial_weight, config.temporal_weight);
    pool_with_adjacency(c, &adj, &g.node_features, base_features.unwrap_or(&g.node_features), (0, g.window as i64))
}

pub(crate) fn pool_with_adjacency(
    c: &ClusterAssignment,
    adj: &CsrMatrix,
    features: &Tensor2,
    base_features: &Tensor2,
    frame_span: (i64, i64),
) -> Result<PooledSceneGraph> {
    let x_pool = c.c.matmul_tn(features)?;
    let representatives = c.c.matmul_tn(base_features)?;
    let mut a_pool = c.c.matmul_tn(&adj.matmul(&c.c)?)?;
    for i in 0..a_pool.rows() {
        a_pool[(i, i)] = 0.0;
    }
    let max = a_pool.max_abs();
    let w_pool = if max > 0.0 { a_pool.scale(1.0 / max) } else { a_pool.clone() };
    Ok(PooledSceneGraph { x_pool, a_pool, w_pool, representatives, frame_span, cluster_labels: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Vec<f64>>,
}

impl From<&Tensor2> for MatrixJson {
    fn from(t: &Tensor2) -> Self {
        Self { rows: t.rows(), cols: t.cols(), values: (0..t.rows()).map(|i| t.row(i).to_vec()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphJson {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub x_pool: Option<MatrixJson>,
    pub a_pool: MatrixJson,
    pub w_pool: MatrixJson,
    pub cluster_labels: Option<Vec<usize>>,
    pub frame_span: (i64, i64),
}

impl PooledSceneGraph {
    pub fn to_json(&self, include_features: bool) -> SceneGraphJson {
        SceneGraphJson {
            k: self.k(),
            x_pool: include_features.then(|| MatrixJson::from(&self.x_pool)),
            a_pool: MatrixJson::from(&self.a_pool),
            w_pool: MatrixJson::from(&self.w_pool),
            cluster_labels: self.cluster_labels.clone(),
            frame_span: self.frame_span,
        }
    }

    /// Graphviz rendering with pen width proportional to the relaxed edge weight.
    pub fn to_dot(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::from("graph scene {\n  node [shape=box];\n");
        for k in 0..self.k() {
            let label = match (&self.cluster_labels, class_names) {
                (Some(l), Some(names)) => names.get(l[k]).cloned().unwrap_or_else(|| format!("class {}", l[k])),
                (Some(l), None) => format!("class {}", l[k]),
                _ => format!("cluster {k}"),
            };
            let _ = writeln!(out, "  c{k} [label=\"{label}\"];");
        }
        for i in 0..self.k() {
            for j in i + 1..self.k() {
                let w = self.w_pool[(i, j)];
                if self.a_pool[(i, j)] > 0.0 && w > 1e-3 {
                    let _ = writeln!(out, "  c{i} -- c{j} [penwidth={:.3}, label=\"{:.2}\"];", 0.5 + 4.5 * w, w);
                }
            }
        }
        out.push_str("}\n");
        out
    }
}
