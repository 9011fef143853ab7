//! Layer building blocks on top of the tape: affine maps, graph convolution and the
//! activations the clustering and classification heads use.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tape::{softmax_rows_value, Tape, Var};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Selu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Selu => tape.selu(x),
        }
    }
}

/// Affine layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add_zeros(format!("{name}.bias"), 1, fan_out);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        dense_forward(tape, store, x, self)
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }
}

pub fn dense_forward(tape: &mut Tape, store: &ParamStore, x: Var, layer: &Dense) -> Result<Var> {
    let (in_rows, _) = store.value(layer.weight).shape();
    if tape.value(x).cols() != in_rows {
        return Err(Error::shape(
            "dense_forward",
            format!("input has {} columns, weight has {} rows", tape.value(x).cols(), in_rows),
        ));
    }
    let w = tape.param(store, layer.weight);
    let b = tape.param(store, layer.bias);
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Graph convolution `act(Â X W + b)` with `Â` the self-loop renormalized adjacency.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub linear: Dense,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self { linear: Dense::new(store, name, fan_in, fan_out, rng), activation }
    }

    /// Applies the layer with a constant, already normalized sparse adjacency.
    pub fn forward_sparse(&self, tape: &mut Tape, store: &ParamStore, norm_adj: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let xw = self.project(tape, store, x)?;
        let h = tape.spmm(Arc::clone(norm_adj), xw)?;
        self.finish(tape, store, h)
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (in_rows, _) = store.value(self.linear.weight).shape();
        if tape.value(x).cols() != in_rows {
            return Err(Error::shape(
                "gcn_layer",
                format!("input has {} columns, weight has {} rows", tape.value(x).cols(), in_rows),
            ));
        }
        let w = tape.param(store, self.linear.weight);
        tape.matmul(x, w)
    }

    fn finish(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let b = tape.param(store, self.linear.bias);
        let h = tape.add_bias(h, b)?;
        self.activation.apply(tape, h)
    }

    /// Applies the layer with a dense adjacency recorded on the tape; normalization is
    /// differentiated through, so gradients reach whatever produced `adj`.
    pub fn forward_dense(&self, tape: &mut Tape, store: &ParamStore, adj: Var, x: Var) -> Result<Var> {
        gcn_layer(tape, store, adj, x, self)
    }
}

pub fn gcn_layer(tape: &mut Tape, store: &ParamStore, adj: Var, x: Var, layer: &GcnLayer) -> Result<Var> {
    let a = tape.value(adj);
    if a.rows() != a.cols() {
        return Err(Error::NonSquareAdjacency { rows: a.rows(), cols: a.cols() });
    }
    for i in 0..a.rows() {
        for (j, &v) in a.row(i).iter().enumerate() {
            if v < 0.0 {
                return Err(Error::NegativeAdjacency { row: i, col: j, value: v });
            }
        }
    }
    if a.rows() != tape.value(x).rows() {
        return Err(Error::shape("gcn_layer", format!("{} adjacency rows for {} nodes", a.rows(), tape.value(x).rows())));
    }
    let norm = tape.gcn_norm(adj)?;
    let xw = layer.project(tape, store, x)?;
    // Bias is added after propagation.
    let h = tape.matmul(norm, xw)?;
    layer.finish(tape, store, h)
}

/// Elementwise SeLU on a plain tensor.
pub fn selu(x: &Tensor2) -> Tensor2 {
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let y = tape.selu(v).expect("selu of finite input");
    tape.value(y).clone()
}

pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    softmax_rows_value(x)
}

/// Mean of `−ln probs[row][label]` over rows.
pub fn cross_entropy(probs: &Tensor2, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::shape("cross_entropy", format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= probs.cols() {
            return Err(Error::LabelOutOfRange { label: l, classes: probs.cols() });
        }
        total -= probs[(i, l)].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / labels.len() as f64)
}
