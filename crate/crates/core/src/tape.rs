//! Reverse-mode differentiation over a linear tape of dense matrix ops.
//!
//! Every op has a hand-derived backward rule. The tape owns copies of its inputs and
//! parameter values, so independent tapes can run on separate threads against the same
//! [`ParamStore`]; gradients come back as a [`Gradients`] value that the caller folds in.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor2;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Constant graph operand for the clustering objectives. `adjacency` must be symmetric.
#[derive(Debug)]
pub struct GraphOperand {
    pub adjacency: CsrMatrix,
    pub degrees: Vec<f64>,
    /// Sum of all adjacency entries, i.e. twice the total edge weight.
    pub two_m: f64,
}

impl GraphOperand {
    pub fn new(adjacency: CsrMatrix) -> Result<Arc<Self>> {
        let degrees = adjacency.degrees();
        let two_m: f64 = degrees.iter().sum();
        if two_m <= 0.0 {
            return Err(Error::EdgelessGraph);
        }
        Ok(Arc::new(Self { adjacency, degrees, two_m }))
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.dim()
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Selu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SumRows(Var),
    GcnNorm(Var),
    ZeroDiag(Var),
    PairSum(Var, Var),
    Reshape(Var),
    Symmetrize(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    Modularity(Var, Arc<GraphOperand>),
    Collapse(Var),
    MinCutCut(Var, Arc<GraphOperand>),
    MinCutOrtho(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    /// Forward intermediates kept for backward (softmax probabilities for the fused CE).
    saved: Option<Tensor2>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_finite(t: &Tensor2, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn selu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE * x
    } else {
        SELU_SCALE * SELU_ALPHA * (x.exp() - 1.0)
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_value(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` with D̃ the row sums of `A + I`.
pub fn gcn_normalize_dense(a: &Tensor2) -> Result<Tensor2> {
    if a.rows() != a.cols() {
        return Err(Error::NonSquareAdjacency { rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let mut s = a.clone();
    for i in 0..n {
        s[(i, i)] += 1.0;
    }
    let deg = s.row_sums();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::Invalid(format!("non-positive degree at node {i} during normalization")));
    }
    let r: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(Tensor2::from_fn(n, n, |i, j| s[(i, j)] * r[i] * r[j]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op, saved: None });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor2, op: Op, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        Ok(self.push(value, op))
    }

    /// Records a constant. Gradients are not propagated past it.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Records a copy of `v` as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push_checked(value, Op::MatMul(a, b), "matmul")
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_tn(self.value(b))?;
        self.push_checked(value, Op::MatMulTn(a, b), "matmul_tn")
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, m: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let value = m.matmul(self.value(x))?;
        self.push_checked(value, Op::SpMM(m, x), "spmm")
    }

    /// Adds the `1 × cols` row `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("add_bias", format!("bias {:?} for input {:?}", bv.shape(), xv.shape())));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (o, c) in value.row_mut(i).iter_mut().zip(bv.data()) {
                *o += c;
            }
        }
        self.push_checked(value, Op::AddBias(x, b), "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push_checked(value, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push_checked(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).scale(s);
        self.push_checked(value, Op::Scale(x, s), "scale")
    }

    pub fn selu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(selu_scalar);
        self.push_checked(value, Op::Selu(x), "selu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid_scalar);
        self.push_checked(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows_value(self.value(x));
        self.push_checked(value, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Column sums as a `1 × cols` row (sum pooling over nodes).
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).column_sums();
        self.push_checked(value, Op::SumRows(x), "sum_rows")
    }

    pub fn gcn_norm(&mut self, a: Var) -> Result<Var> {
        let value = gcn_normalize_dense(self.value(a))?;
        self.push_checked(value, Op::GcnNorm(a), "gcn_norm")
    }

    pub fn zero_diag(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        if value.rows() != value.cols() {
            return Err(Error::shape("zero_diag", format!("{:?} is not square", value.shape())));
        }
        for i in 0..value.rows() {
            value[(i, i)] = 0.0;
        }
        Ok(self.push(value, Op::ZeroDiag(a)))
    }

    /// For `u, v` of shape `K × h`, returns the `K² × h` matrix whose row `i·K + j` is `u_i + v_j`.
    pub fn pair_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.shape() != vv.shape() {
            return Err(Error::shape("pair_sum", format!("{:?} vs {:?}", uv.shape(), vv.shape())));
        }
        let (k, h) = uv.shape();
        let mut value = Tensor2::zeros(k * k, h);
        for i in 0..k {
            for j in 0..k {
                let row = value.row_mut(i * k + j);
                for c in 0..h {
                    row[c] = uv[(i, c)] + vv[(j, c)];
                }
            }
        }
        self.push_checked(value, Op::PairSum(u, v), "pair_sum")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `(W + Wᵀ) / 2`.
    pub fn symmetrize(&mut self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        if wv.rows() != wv.cols() {
            return Err(Error::shape("symmetrize", format!("{:?} is not square", wv.shape())));
        }
        let value = wv.add(&wv.transpose())?.scale(0.5);
        Ok(self.push(value, Op::Symmetrize(w)))
    }

    /// Mean over rows of `−log softmax(logits)[label]`, fused for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::shape("cross_entropy", format!("{} labels for {} rows", labels.len(), z.rows())));
        }
        for &l in labels {
            if l >= z.cols() {
                return Err(Error::LabelOutOfRange { label: l, classes: z.cols() });
            }
        }
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let probs = softmax_rows_value(z);
        let value = Tensor2::scalar(loss / labels.len() as f64);
        let var = self.push_checked(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() }, "cross_entropy")?;
        self.nodes[var.0].saved = Some(probs);
        Ok(var)
    }

    fn check_assignment(&self, c: Var, g: &GraphOperand, op: &'static str) -> Result<()> {
        let cv = self.value(c);
        if cv.rows() != g.nodes() {
            return Err(Error::shape(op, format!("{} assignment rows for {} nodes", cv.rows(), g.nodes())));
        }
        Ok(())
    }

    /// `−Tr(Cᵀ B C) / 2m` with `B = A − d dᵀ / 2m`.
    pub fn modularity(&mut self, c: Var, g: Arc<GraphOperand>) -> Result<Var> {
        self.check_assignment(c, &g, "modularity")?;
        let value = Tensor2::scalar(modularity_term(self.value(c), &g)?);
        self.push_checked(value, Op::Modularity(c, g), "modularity")
    }

    /// `(√K / N) · ‖column sums of C‖ − 1`.
    pub fn collapse(&mut self, c: Var) -> Result<Var> {
        let value = Tensor2::scalar(collapse_term(self.value(c)));
        self.push_checked(value, Op::Collapse(c), "collapse")
    }

    /// `−Tr(CᵀAC) / Tr(CᵀDC)`.
    pub fn mincut_cut(&mut self, c: Var, g: Arc<GraphOperand>) -> Result<Var> {
        self.check_assignment(c, &g, "mincut_cut")?;
        let value = Tensor2::scalar(mincut_cut_term(self.value(c), &g)?);
        self.push_checked(value, Op::MinCutCut(c, g), "mincut_cut")
    }

    /// `‖CᵀC / ‖CᵀC‖_F − I / √K‖_F`.
    pub fn mincut_ortho(&mut self, c: Var) -> Result<Var> {
        let value = Tensor2::scalar(mincut_ortho_term(self.value(c))?);
        self.push_checked(value, Op::MinCutOrtho(c), "mincut_ortho")
    }

    /// Back-propagates from the scalar `loss`. May run once per recorded forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, d: Tensor2| {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, g.matmul_nt(bv)?);
                    send(*b, av.matmul_tn(&g)?);
                }
                Op::MatMulTn(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, bv.matmul_nt(&g)?);
                    send(*b, av.matmul(&g)?);
                }
                Op::SpMM(m, x) => send(*x, m.matmul_t(&g)?),
                Op::AddBias(x, b) => {
                    send(*b, g.column_sums());
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, g.hadamard(bv)?);
                    send(*b, g.hadamard(av)?);
                }
                Op::Scale(x, s) => send(*x, g.scale(*s)),
                Op::Selu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut d = g;
                    for (dv, &xi) in d.data_mut().iter_mut().zip(xv.data()) {
                        *dv *= if xi > 0.0 { SELU_SCALE } else { SELU_SCALE * SELU_ALPHA * xi.exp() };
                    }
                    send(*x, d);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let mut d = g;
                    for (dv, &s) in d.data_mut().iter_mut().zip(y.data()) {
                        *dv *= s * (1.0 - s);
                    }
                    send(*x, d);
                }
                Op::SoftmaxRows(x) => {
                    let p = &node.value;
                    let mut d = Tensor2::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let dotp: f64 = g.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..p.cols() {
                            d[(i, j)] = p[(i, j)] * (g[(i, j)] - dotp);
                        }
                    }
                    send(*x, d);
                }
                Op::SumRows(x) => {
                    let rows = self.nodes[x.0].value.rows();
                    let d = Tensor2::from_fn(rows, g.cols(), |_, j| g[(0, j)]);
                    send(*x, d);
                }
                Op::GcnNorm(a) => send(*a, gcn_norm_backward(&self.nodes[a.0].value, &node.value, &g)),
                Op::ZeroDiag(a) => {
                    let mut d = g;
                    for i in 0..d.rows() {
                        d[(i, i)] = 0.0;
                    }
                    send(*a, d);
                }
                Op::PairSum(u, v) => {
                    let (k, h) = self.nodes[u.0].value.shape();
                    let mut du = Tensor2::zeros(k, h);
                    let mut dv = Tensor2::zeros(k, h);
                    for i in 0..k {
                        for j in 0..k {
                            let row = g.row(i * k + j);
                            for c in 0..h {
                                du[(i, c)] += row[c];
                                dv[(j, c)] += row[c];
                            }
                        }
                    }
                    send(*u, du);
                    send(*v, dv);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    send(*x, g.reshape(r, c)?);
                }
                Op::Symmetrize(w) => send(*w, g.add(&g.transpose())?.scale(0.5)),
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let p = node.saved.as_ref().expect("softmax probabilities saved");
                    let scale = g.item() / labels.len() as f64;
                    let mut d = p.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[(i, l)] -= 1.0;
                    }
                    send(*logits, d.scale(scale));
                }
                Op::Modularity(c, graph) => {
                    let d = modularity_grad(&self.nodes[c.0].value, graph)?;
                    send(*c, d.scale(g.item()));
                }
                Op::Collapse(c) => send(*c, collapse_grad(&self.nodes[c.0].value).scale(g.item())),
                Op::MinCutCut(c, graph) => {
                    let d = mincut_cut_grad(&self.nodes[c.0].value, graph)?;
                    send(*c, d.scale(g.item()));
                }
                Op::MinCutOrtho(c) => {
                    let d = mincut_ortho_grad(&self.nodes[c.0].value)?;
                    send(*c, d.scale(g.item()));
                }
            }
        }
        Ok(out)
    }
}

fn gcn_norm_backward(a: &Tensor2, out: &Tensor2, g: &Tensor2) -> Tensor2 {
    let n = a.rows();
    let mut deg = a.row_sums();
    deg.iter_mut().for_each(|d| *d += 1.0);
    let r: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    // Gradient through the degree vector: d_i appears in row i and column i of the output.
    let mut d_deg = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let contrib = g[(i, j)] * out[(i, j)];
            d_deg[i] += contrib;
            d_deg[j] += contrib;
        }
    }
    for (i, v) in d_deg.iter_mut().enumerate() {
        *v *= -0.5 / deg[i];
    }
    Tensor2::from_fn(n, n, |i, j| g[(i, j)] * r[i] * r[j] + d_deg[i])
}

fn weighted_trace_terms(c: &Tensor2, g: &GraphOperand) -> Result<(Tensor2, f64)> {
    let ac = g.adjacency.matmul(c)?;
    let tr: f64 = c.data().iter().zip(ac.data()).map(|(a, b)| a * b).sum();
    Ok((ac, tr))
}

pub(crate) fn modularity_term(c: &Tensor2, g: &GraphOperand) -> Result<f64> {
    let (_, tr_cac) = weighted_trace_terms(c, g)?;
    let mut ctd = vec![0.0; c.cols()];
    for i in 0..c.rows() {
        for (k, v) in c.row(i).iter().enumerate() {
            ctd[k] += g.degrees[i] * v;
        }
    }
    let null: f64 = ctd.iter().map(|v| v * v).sum::<f64>() / g.two_m;
    Ok(-(tr_cac - null) / g.two_m)
}

fn modularity_grad(c: &Tensor2, g: &GraphOperand) -> Result<Tensor2> {
    let ac = g.adjacency.matmul(c)?;
    let atc = g.adjacency.matmul_t(c)?;
    let mut ctd = vec![0.0; c.cols()];
    for i in 0..c.rows() {
        for (k, v) in c.row(i).iter().enumerate() {
            ctd[k] += g.degrees[i] * v;
        }
    }
    let m2 = g.two_m;
    Ok(Tensor2::from_fn(c.rows(), c.cols(), |i, k| {
        -(ac[(i, k)] + atc[(i, k)] - 2.0 * g.degrees[i] * ctd[k] / m2) / m2
    }))
}

pub(crate) fn collapse_term(c: &Tensor2) -> f64 {
    let k = c.cols() as f64;
    let n = c.rows() as f64;
    k.sqrt() / n * c.column_sums().frobenius() - 1.0
}

fn collapse_grad(c: &Tensor2) -> Tensor2 {
    let s = c.column_sums();
    let norm = s.frobenius();
    let coef = (c.cols() as f64).sqrt() / c.rows() as f64;
    if norm == 0.0 {
        return Tensor2::zeros(c.rows(), c.cols());
    }
    Tensor2::from_fn(c.rows(), c.cols(), |_, k| coef * s[(0, k)] / norm)
}

fn degree_trace(c: &Tensor2, g: &GraphOperand) -> f64 {
    (0..c.rows()).map(|i| g.degrees[i] * c.row(i).iter().map(|v| v * v).sum::<f64>()).sum()
}

pub(crate) fn mincut_cut_term(c: &Tensor2, g: &GraphOperand) -> Result<f64> {
    let (_, num) = weighted_trace_terms(c, g)?;
    let den = degree_trace(c, g);
    if den <= 0.0 {
        return Err(Error::Invalid("assignment has zero degree-weighted volume".into()));
    }
    Ok(-num / den)
}

fn mincut_cut_grad(c: &Tensor2, g: &GraphOperand) -> Result<Tensor2> {
    let (ac, num) = weighted_trace_terms(c, g)?;
    let atc = g.adjacency.matmul_t(c)?;
    let den = degree_trace(c, g);
    Ok(Tensor2::from_fn(c.rows(), c.cols(), |i, k| {
        let dnum = ac[(i, k)] + atc[(i, k)];
        let dden = 2.0 * g.degrees[i] * c[(i, k)];
        -(dnum * den - num * dden) / (den * den)
    }))
}

fn ortho_parts(c: &Tensor2) -> Result<(Tensor2, f64, Tensor2, f64)> {
    let s = c.matmul_tn(c)?;
    let f = s.frobenius();
    if f == 0.0 {
        return Err(Error::Invalid("assignment is identically zero".into()));
    }
    let k = c.cols();
    let inv_sqrt_k = 1.0 / (k as f64).sqrt();
    let u = Tensor2::from_fn(k, k, |i, j| s[(i, j)] / f - if i == j { inv_sqrt_k } else { 0.0 });
    let l = u.frobenius();
    Ok((s, f, u, l))
}

pub(crate) fn mincut_ortho_term(c: &Tensor2) -> Result<f64> {
    Ok(ortho_parts(c)?.3)
}

fn mincut_ortho_grad(c: &Tensor2) -> Result<Tensor2> {
    let (s, f, u, l) = ortho_parts(c)?;
    if l == 0.0 {
        return Ok(Tensor2::zeros(c.rows(), c.cols()));
    }
    let gu = u.scale(1.0 / l);
    let inner: f64 = gu.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
    let gs = gu.scale(1.0 / f).sub(&s.scale(inner / (f * f * f)))?;
    c.matmul(&gs.add(&gs.transpose())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::scalar(2.0));
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::scalar(3.0));
        let wv = tape.param(&store, w);
        let y = tape.matmul(x, wv).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 3.0);
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::scalar(2.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 4.0);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::scalar(f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }
}
