//! Dense row-major `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Tape`] records every differentiable operation executed through a [`Var`]
//! handle. [`Tape::backward`] replays the record in exact reverse order and
//! accumulates gradients additively, so a value used twice receives the sum of
//! both contributions.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Usage(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent; 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds every entry through `f32`, matching what the binary file formats store.
    pub fn to_f32_precision(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Usage(format!(
                "{op} expects a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Row-major matrix product `a[m×k] · b[k×n]`.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]` accumulated into `out[k×n]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Padding mode for [`Var::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

fn conv_geometry(t: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("conv1d stride must be positive".into()));
    }
    match padding {
        Padding::Same => {
            if k % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv1d with same padding needs an odd kernel, got k={k}"
                )));
            }
            Ok((t.div_ceil(stride), (k - 1) / 2))
        }
        Padding::Valid => {
            if k > t {
                return Err(Error::Config(format!(
                    "conv1d valid padding: kernel {k} longer than input {t}"
                )));
            }
            Ok(((t - k) / stride + 1, 0))
        }
    }
}

/// Focal-loss hyperparameters. `alpha = None` disables class weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: Option<f64>,
    pub gamma: f64,
}

/// Per-element focal loss and its derivative with respect to the logit.
pub fn focal_element(logit: f64, target: bool, p: FocalParams) -> (f64, f64) {
    let prob = sigmoid(logit);
    let gamma = p.gamma;
    // log p = -softplus(-x), log(1-p) = -softplus(x)
    if target {
        let w = p.alpha.unwrap_or(1.0);
        let q = 1.0 - prob;
        let log_p = -softplus(-logit);
        let qg = q.powf(gamma);
        (-w * qg * log_p, w * qg * (gamma * prob * log_p - q))
    } else {
        let w = p.alpha.map_or(1.0, |a| 1.0 - a);
        let q = 1.0 - prob;
        let log_q = -softplus(logit);
        let pg = prob.powf(gamma);
        (-w * pg * log_q, w * pg * (prob - gamma * q * log_q))
    }
}

/// DIoU loss between two 1-D segments, plus its gradient with respect to the
/// first segment's `(start, end)`.
pub fn diou_segments(pred: (f64, f64), target: (f64, f64)) -> (f64, [f64; 2]) {
    let (ps, pe) = pred;
    let (ts, te) = target;
    let raw_inter = pe.min(te) - ps.max(ts);
    let inter = raw_inter.max(0.0);
    let (di_ps, di_pe) = if raw_inter > 0.0 {
        (
            if ps > ts { -1.0 } else { 0.0 },
            if pe < te { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let union = (pe - ps) + (te - ts) - inter;
    let du_ps = -1.0 - di_ps;
    let du_pe = 1.0 - di_pe;
    let iou = inter / union;
    let diou_ps = (di_ps * union - inter * du_ps) / (union * union);
    let diou_pe = (di_pe * union - inter * du_pe) / (union * union);

    let c = pe.max(te) - ps.min(ts);
    let dc_ps = if ps < ts { -1.0 } else { 0.0 };
    let dc_pe = if pe > te { 1.0 } else { 0.0 };
    let delta = (ps + pe) / 2.0 - (ts + te) / 2.0;
    let rho2 = delta * delta;
    let c2 = c * c;
    let pen = rho2 / c2;
    let dpen_ps = delta / c2 - 2.0 * rho2 * dc_ps / (c2 * c);
    let dpen_pe = delta / c2 - 2.0 * rho2 * dc_pe / (c2 * c);

    (
        1.0 - iou + pen,
        [-diou_ps + dpen_ps, -diou_pe + dpen_pe],
    )
}

/// One regression term of the DIoU objective: which prediction row, and the
/// target offsets `(d_start, d_end)` measured from the same anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionTarget {
    pub row: usize,
    pub target: [f64; 2],
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    AddScalar(usize, usize),
    RowScale(usize, Rc<Vec<f64>>),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    Softplus(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    L2NormRows(usize, Vec<f64>),
    Sum(usize),
    /// Scalar-valued op with a precomputed local gradient for one input.
    Fused(usize, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleBy(a, b)
            | Op::AddScalar(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulT(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::RowScale(a, _)
            | Op::Softmax(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::SliceCols(a, _)
            | Op::L2NormRows(a, _)
            | Op::Sum(a)
            | Op::Fused(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv1d { x, kernel, .. } | Op::Depthwise { x, kernel, .. } => vec![*x, *kernel],
            Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], one slot per recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }

    /// Gradient as a tensor; zeros if nothing reached `v`.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = &self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Tensor {
                shape: shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match self.grads[v.id].take() {
            Some(data) => Tensor { shape, data },
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        self.push_rc(Rc::new(value), op)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let v = self.push_rc(value, Op::Leaf);
        self.nodes.borrow_mut()[v.id].needs_grad = requires_grad;
        v
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    /// Shared-buffer variant of [`Tape::param`].
    pub fn param_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Shared-buffer variant of [`Tape::constant`].
    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value.data;
            let bv = &nodes[*b].value.data;
            accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(grads, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            let n = nodes[*b].value.numel();
            accumulate_with(grads, nodes, *b, |db| {
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::ScaleBy(a, s) => {
            let sv = nodes[*s].value.data[0];
            let av = &nodes[*a].value.data;
            accumulate(grads, nodes, *a, g.iter().map(|v| v * sv).collect());
            let ds: f64 = g.iter().zip(av).map(|(g, a)| g * a).sum();
            accumulate(grads, nodes, *s, vec![ds]);
        }
        Op::AddScalar(a, s) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *s, vec![g.iter().sum()]);
        }
        Op::RowScale(a, scale) => {
            let n = out.cols();
            let mut d = g.to_vec();
            for (row, &s) in d.chunks_mut(n).zip(scale.iter()) {
                row.iter_mut().for_each(|v| *v *= s);
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
            let n = nodes[*b].value.shape[1];
            if nodes[*a].needs_grad {
                let bv = &nodes[*b].value.data;
                accumulate(grads, nodes, *a, gemm_nt(g, bv, m, n, k));
            }
            if nodes[*b].needs_grad {
                let av = &nodes[*a].value.data;
                accumulate_with(grads, nodes, *b, |db| gemm_tn_acc(av, g, m, k, n, db));
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
            let n = nodes[*b].value.shape[0];
            if nodes[*a].needs_grad {
                let bv = &nodes[*b].value.data;
                accumulate(grads, nodes, *a, gemm(g, bv, m, n, k));
            }
            if nodes[*b].needs_grad {
                let av = &nodes[*a].value.data;
                accumulate_with(grads, nodes, *b, |db| gemm_tn_acc(g, av, m, n, k, db));
            }
        }
        Op::Softmax(a) => {
            let n = out.cols();
            let mut d = vec![0.0; g.len()];
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *dv = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let gv = &nodes[*gain].value.data;
            if nodes[*x].needs_grad {
                let mut dx = vec![0.0; g.len()];
                let nf = n as f64;
                for (r, (dxr, gr)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let dxh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = inv_std[r] / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
            accumulate_with(grads, nodes, *gain, |dg| {
                for (gr, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        dg[j] += gr[j] * xh[j];
                    }
                }
            });
            accumulate_with(grads, nodes, *bias, |db| {
                for gr in g.chunks(n) {
                    for j in 0..n {
                        db[j] += gr[j];
                    }
                }
            });
        }
        Op::Conv1d {
            x,
            kernel,
            stride,
            pad,
        } => {
            let xv = &nodes[*x].value;
            let kv = &nodes[*kernel].value;
            let (t_in, c_in) = (xv.shape[0], xv.shape[1]);
            let (k, c_out) = (kv.shape[0], kv.shape[2]);
            let t_out = out.shape[0];
            let want_x = nodes[*x].needs_grad;
            let want_k = nodes[*kernel].needs_grad;
            let mut dx = if want_x { vec![0.0; xv.numel()] } else { vec![] };
            let mut dk = if want_k { vec![0.0; kv.numel()] } else { vec![] };
            for to in 0..t_out {
                let grow = &g[to * c_out..(to + 1) * c_out];
                for j in 0..k {
                    let ti = (to * stride + j) as isize - *pad as isize;
                    if ti < 0 || ti as usize >= t_in {
                        continue;
                    }
                    let ti = ti as usize;
                    for c in 0..c_in {
                        let kbase = (j * c_in + c) * c_out;
                        let krow = &kv.data[kbase..kbase + c_out];
                        if want_x {
                            dx[ti * c_in + c] +=
                                krow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if want_k {
                            let xval = xv.data[ti * c_in + c];
                            for (d, gv) in dk[kbase..kbase + c_out].iter_mut().zip(grow) {
                                *d += xval * gv;
                            }
                        }
                    }
                }
            }
            if want_x {
                accumulate(grads, nodes, *x, dx);
            }
            if want_k {
                accumulate(grads, nodes, *kernel, dk);
            }
        }
        Op::Depthwise {
            x,
            kernel,
            stride,
            pad,
        } => {
            let xv = &nodes[*x].value;
            let kv = &nodes[*kernel].value;
            let (t_in, c) = (xv.shape[0], xv.shape[1]);
            let k = kv.shape[0];
            let t_out = out.shape[0];
            let mut dx = vec![0.0; xv.numel()];
            let mut dk = vec![0.0; kv.numel()];
            for to in 0..t_out {
                for j in 0..k {
                    let ti = (to * stride + j) as isize - *pad as isize;
                    if ti < 0 || ti as usize >= t_in {
                        continue;
                    }
                    let ti = ti as usize;
                    for ch in 0..c {
                        let gv = g[to * c + ch];
                        dx[ti * c + ch] += gv * kv.data[j * c + ch];
                        dk[j * c + ch] += gv * xv.data[ti * c + ch];
                    }
                }
            }
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *kernel, dk);
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value.data;
            accumulate(
                grads,
                nodes,
                *a,
                g.iter()
                    .zip(av)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Softplus(a) => {
            let av = &nodes[*a].value.data;
            accumulate(
                grads,
                nodes,
                *a,
                g.iter().zip(av).map(|(g, &x)| g * sigmoid(x)).collect(),
            );
        }
        Op::SliceCols(a, start) => {
            let n_in = nodes[*a].value.cols();
            let n_out = out.cols();
            accumulate_with(grads, nodes, *a, |da| {
                for (drow, grow) in da.chunks_mut(n_in).zip(g.chunks(n_out)) {
                    for (d, v) in drow[*start..start + n_out].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let n = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate_with(grads, nodes, p, |dp| {
                    for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(n)) {
                        for (d, v) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                            *d += v;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::L2NormRows(a, norms) => {
            let n = out.cols();
            let mut d = vec![0.0; g.len()];
            for (r, ((drow, grow), yrow)) in d
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(out.data.chunks(n))
                .enumerate()
            {
                if norms[r] <= L2_EPS {
                    // clamped rows are a plain division by the constant
                    for j in 0..n {
                        drow[j] = grow[j] / L2_EPS;
                    }
                    continue;
                }
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    drow[j] = (grow[j] - yrow[j] * dot) / norms[r];
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.numel();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::Fused(a, local) => {
            accumulate(grads, nodes, *a, local.iter().map(|v| v * g[0]).collect());
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape != b.shape {
            return Err(Error::shape(op_name, &a.shape, &b.shape));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            op,
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let (a, b) = (self.value(), bias.value());
        let (_, n) = a.as_matrix("add_bias")?;
        if b.numel() != n {
            return Err(Error::shape("add_bias", &a.shape, &b.shape));
        }
        let mut data = a.data.clone();
        for row in data.chunks_mut(n) {
            for (v, c) in row.iter_mut().zip(&b.data) {
                *v += c;
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::AddBias(self.id, bias.id),
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let a = self.value();
        self.tape.push(a.map(|v| v * c), Op::Scale(self.id, c))
    }

    /// Multiplies by a one-element tensor.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s);
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", &[1], &sv.shape));
        }
        let c = sv.data[0];
        let a = self.value();
        Ok(self.tape.push(a.map(|v| v * c), Op::ScaleBy(self.id, s.id)))
    }

    /// Adds a one-element tensor to every entry.
    pub fn add_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s);
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::shape("add_scalar", &[1], &sv.shape));
        }
        let c = sv.data[0];
        let a = self.value();
        Ok(self.tape.push(a.map(|v| v + c), Op::AddScalar(self.id, s.id)))
    }

    /// Multiplies row `i` by the constant `scale[i]`.
    pub fn row_scale(&self, scale: Rc<Vec<f64>>) -> Result<Var<'t>> {
        let a = self.value();
        if scale.len() != a.rows() {
            return Err(Error::shape("row_scale", &a.shape, &[scale.len()]));
        }
        let n = a.cols();
        let mut data = a.data.clone();
        for (row, s) in data.chunks_mut(n).zip(scale.iter()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::RowScale(self.id, scale),
        ))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.as_matrix("matmul")?;
        let (k2, n) = b.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &a.shape, &b.shape));
        }
        let data = gemm(&a.data, &b.data, m, k, n);
        Ok(self.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(self.id, other.id),
        ))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.as_matrix("matmul_t")?;
        let (n, k2) = b.as_matrix("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", &a.shape, &b.shape));
        }
        let data = gemm_nt(&a.data, &b.data, m, k, n);
        Ok(self.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMulT(self.id, other.id),
        ))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.softmax_rows_masked(None)
    }

    /// Row-wise softmax where `key_mask[j] == false` columns get a logit of −∞.
    pub fn softmax_rows_masked(&self, key_mask: Option<&[bool]>) -> Result<Var<'t>> {
        let a = self.value();
        let (_, n) = a.as_matrix("softmax_rows")?;
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::shape("softmax_rows", &a.shape, &[mask.len()]));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::Numeric("softmax over a fully masked row".into()));
            }
        }
        if !a.is_finite() {
            return Err(Error::Numeric("softmax_rows received non-finite input".into()));
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut data = vec![0.0; a.numel()];
        for (orow, irow) in data.chunks_mut(n).zip(a.data.chunks(n)) {
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| irow[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (irow[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            orow.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::Softmax(self.id),
        ))
    }

    /// Per-row normalization followed by a per-column affine map.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(bias);
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let (m, n) = x.as_matrix("layer_norm")?;
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::shape("layer_norm", &x.shape, &gv.shape));
        }
        let nf = n as f64;
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &x.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                data[r * n + j] = h * gv.data[j] + bv.data[j];
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: x.shape.clone(),
                data,
            },
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Temporal convolution of `x[T×C_in]` with `kernel[k×C_in×C_out]`.
    pub fn conv1d(&self, kernel: &Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(kernel);
        let (x, kv) = (self.value(), kernel.value());
        let (t_in, c_in) = x.as_matrix("conv1d")?;
        let [k, kc_in, c_out] = kv.shape[..] else {
            return Err(Error::Usage(format!(
                "conv1d kernel must be rank 3, got {:?}",
                kv.shape
            )));
        };
        if kc_in != c_in {
            return Err(Error::shape("conv1d", &x.shape, &kv.shape));
        }
        let (t_out, pad) = conv_geometry(t_in, k, stride, padding)?;
        let mut data = vec![0.0; t_out * c_out];
        for to in 0..t_out {
            let orow = &mut data[to * c_out..(to + 1) * c_out];
            for j in 0..k {
                let ti = (to * stride + j) as isize - pad as isize;
                if ti < 0 || ti as usize >= t_in {
                    continue;
                }
                let ti = ti as usize;
                for c in 0..c_in {
                    let xval = x.data[ti * c_in + c];
                    if xval == 0.0 {
                        continue;
                    }
                    let kbase = (j * c_in + c) * c_out;
                    for (o, kw) in orow.iter_mut().zip(&kv.data[kbase..kbase + c_out]) {
                        *o += xval * kw;
                    }
                }
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![t_out, c_out],
                data,
            },
            Op::Conv1d {
                x: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
        ))
    }

    /// Per-channel temporal convolution of `x[T×C]` with `kernel[k×C]`, same padding.
    pub fn depthwise_conv1d(&self, kernel: &Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(kernel);
        let (x, kv) = (self.value(), kernel.value());
        let (t_in, c) = x.as_matrix("depthwise_conv1d")?;
        let (k, kc) = kv.as_matrix("depthwise_conv1d")?;
        if kc != c {
            return Err(Error::shape("depthwise_conv1d", &x.shape, &kv.shape));
        }
        let (t_out, pad) = conv_geometry(t_in, k, stride, Padding::Same)?;
        let mut data = vec![0.0; t_out * c];
        for to in 0..t_out {
            for j in 0..k {
                let ti = (to * stride + j) as isize - pad as isize;
                if ti < 0 || ti as usize >= t_in {
                    continue;
                }
                let ti = ti as usize;
                for ch in 0..c {
                    data[to * c + ch] += x.data[ti * c + ch] * kv.data[j * c + ch];
                }
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![t_out, c],
                data,
            },
            Op::Depthwise {
                x: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        self.tape.push(a.map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        let a = self.value();
        self.tape.push(a.map(softplus), Op::Softplus(self.id))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.as_matrix("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", &a.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in a.data.chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            Op::SliceCols(self.id, start),
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let m = values[0].as_matrix("concat_cols")?.0;
        for v in &values {
            let (rows, _) = v.as_matrix("concat_cols")?;
            if rows != m {
                return Err(Error::shape("concat_cols", &values[0].shape, &v.shape));
            }
        }
        let n: usize = values.iter().map(|v| v.shape[1]).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        Ok(first.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Scales each row to unit Euclidean norm; norms below 1e-12 are clamped.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (_, n) = a.as_matrix("l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(a.rows());
        let mut data = a.data.clone();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::L2NormRows(self.id, norms),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        self.tape
            .push(Tensor::scalar(a.data.iter().sum()), Op::Sum(self.id))
    }

    /// Focal loss over `logits[N×A]` against multi-hot `targets`, each row
    /// weighted by `row_weight` (0 for padding), divided by `normalizer`.
    pub fn focal_loss(
        &self,
        targets: &[bool],
        row_weight: &[f64],
        params: FocalParams,
        normalizer: f64,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.as_matrix("focal_loss")?;
        if targets.len() != m * n || row_weight.len() != m {
            return Err(Error::shape("focal_loss", &a.shape, &[targets.len()]));
        }
        let mut total = 0.0;
        let mut local = vec![0.0; m * n];
        for r in 0..m {
            let w = row_weight[r];
            if w == 0.0 {
                continue;
            }
            for c in 0..n {
                let i = r * n + c;
                let (l, d) = focal_element(a.data[i], targets[i], params);
                total += w * l;
                local[i] = w * d / normalizer;
            }
        }
        Ok(self
            .tape
            .push(Tensor::scalar(total / normalizer), Op::Fused(self.id, local)))
    }

    /// Mean DIoU loss between predicted offsets `self[N×2]` (distance to start,
    /// distance to end) and the listed targets sharing each row's anchor.
    pub fn diou_loss(&self, targets: &[RegressionTarget], normalizer: f64) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.as_matrix("diou_loss")?;
        if n != 2 {
            return Err(Error::shape("diou_loss", &a.shape, &[m, 2]));
        }
        let mut total = 0.0;
        let mut local = vec![0.0; m * 2];
        for t in targets {
            if t.row >= m {
                return Err(Error::Usage(format!("diou target row {} out of range", t.row)));
            }
            let (ds, de) = (a.data[t.row * 2], a.data[t.row * 2 + 1]);
            if t.target[0] + t.target[1] <= 0.0 {
                return Err(Error::Data("zero-length regression target".into()));
            }
            let (l, [g_start, g_end]) = diou_segments((-ds, de), (-t.target[0], t.target[1]));
            total += l;
            local[t.row * 2] += -g_start / normalizer;
            local[t.row * 2 + 1] += g_end / normalizer;
        }
        Ok(self
            .tape
            .push(Tensor::scalar(total / normalizer), Op::Fused(self.id, local)))
    }
}

/// Maximum over components of `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Usage(format!("grad_check step must be in (0, 1e-2], got {h}")));
    }
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    let analytic = tape.backward(loss)?.wrt(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.param(probe);
        Ok(f(&tape, v)?.value().item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Deterministic test input with entries in `±[0.2, 1.2)`, away from ReLU kinks.
pub fn probe_tensor(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let h = (i.wrapping_mul(7919) + salt.wrapping_mul(104_729) + 17) % 1000;
            let v = 0.2 + h as f64 / 1000.0;
            if (i + salt) % 3 == 0 { -v } else { v }
        })
        .collect();
    Tensor { shape: shape.to_vec(), data }
}

/// Gradient-check error of every differentiable op, each reduced to a scalar
/// by a fixed weighted sum. Binary ops are checked in both arguments.
pub fn op_grad_errors(h: f64) -> Result<Vec<(&'static str, f64)>> {
    fn weigh<'t>(t: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
        let w = probe_tensor(&y.shape(), 99);
        y.mul(&t.constant(w)).map(|v| v.sum())
    }
    let m34 = probe_tensor(&[3, 4], 1);
    let m34b = probe_tensor(&[3, 4], 2);
    let m42 = probe_tensor(&[4, 2], 3);
    let m24 = probe_tensor(&[2, 4], 4);
    let v4 = probe_tensor(&[4], 5);
    let one = Tensor::vector(vec![0.7]);
    let seq = probe_tensor(&[7, 3], 6);
    let k3 = probe_tensor(&[3, 3, 2], 7);
    let dk = probe_tensor(&[3, 3], 8);
    let pos = probe_tensor(&[4, 2], 9).map(|v| v.abs() + 0.5);
    let targets = [
        RegressionTarget { row: 0, target: [1.0, 2.0] },
        RegressionTarget { row: 2, target: [0.5, 0.4] },
        RegressionTarget { row: 3, target: [3.0, 0.2] },
    ];
    let hot: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
    let mask = [true, true, false, true];
    let scale = Rc::new(vec![0.5, -2.0, 1.5]);

    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {
            out.push(($name, grad_check(|$t, $v| weigh($t, $body), $x, h)?));
        };
    }
    check!("add.lhs", &m34, |t, x| x.add(&t.constant(m34b.clone()))?);
    check!("add.rhs", &m34b, |t, x| t.constant(m34.clone()).add(&x)?);
    check!("sub.lhs", &m34, |t, x| x.sub(&t.constant(m34b.clone()))?);
    check!("sub.rhs", &m34b, |t, x| t.constant(m34.clone()).sub(&x)?);
    check!("mul.lhs", &m34, |t, x| x.mul(&t.constant(m34b.clone()))?);
    check!("mul.rhs", &m34b, |t, x| t.constant(m34.clone()).mul(&x)?);
    check!("mul.self", &m34, |_t, x| x.mul(&x)?);
    check!("add_bias.x", &m34, |t, x| x.add_bias(&t.constant(v4.clone()))?);
    check!("add_bias.bias", &v4, |t, x| t.constant(m34.clone()).add_bias(&x)?);
    check!("scale", &m34, |_t, x| x.scale(-1.7));
    check!("scale_by.x", &m34, |t, x| x.scale_by(&t.constant(one.clone()))?);
    check!("scale_by.s", &one, |t, x| t.constant(m34.clone()).scale_by(&x)?);
    check!("add_scalar.x", &m34, |t, x| x.add_scalar(&t.constant(one.clone()))?);
    check!("add_scalar.s", &one, |t, x| t.constant(m34.clone()).add_scalar(&x)?);
    check!("row_scale", &m34, |_t, x| x.row_scale(scale.clone())?);
    check!("matmul.lhs", &m34, |t, x| x.matmul(&t.constant(m42.clone()))?);
    check!("matmul.rhs", &m42, |t, x| t.constant(m34.clone()).matmul(&x)?);
    check!("matmul_t.lhs", &m34, |t, x| x.matmul_t(&t.constant(m24.clone()))?);
    check!("matmul_t.rhs", &m24, |t, x| t.constant(m34.clone()).matmul_t(&x)?);
    check!("softmax_rows", &m34, |_t, x| x.softmax_rows()?);
    check!("softmax_rows_masked", &m34, |_t, x| x.softmax_rows_masked(Some(&mask))?);
    check!("layer_norm.x", &m34, |t, x| x.layer_norm(
        &t.constant(v4.clone()),
        &t.constant(v4.map(|v| v * 0.5)),
        LAYER_NORM_EPS
    )?);
    check!("layer_norm.gain", &v4, |t, x| t.constant(m34.clone()).layer_norm(
        &x,
        &t.constant(v4.clone()),
        LAYER_NORM_EPS
    )?);
    check!("layer_norm.bias", &v4, |t, x| t.constant(m34.clone()).layer_norm(
        &t.constant(v4.clone()),
        &x,
        LAYER_NORM_EPS
    )?);
    check!("conv1d.same.x", &seq, |t, x| x.conv1d(&t.constant(k3.clone()), 1, Padding::Same)?);
    check!("conv1d.valid.x", &seq, |t, x| x.conv1d(&t.constant(k3.clone()), 2, Padding::Valid)?);
    check!("conv1d.kernel", &k3, |t, x| t.constant(seq.clone()).conv1d(&x, 2, Padding::Same)?);
    check!("depthwise_conv1d.x", &seq, |t, x| x.depthwise_conv1d(&t.constant(dk.clone()), 2)?);
    check!("depthwise_conv1d.kernel", &dk, |t, x| t.constant(seq.clone()).depthwise_conv1d(&x, 1)?);
    check!("relu", &m34, |_t, x| x.relu());
    check!("softplus", &m34, |_t, x| x.softplus());
    check!("slice_cols", &m34, |_t, x| x.slice_cols(1, 2)?);
    check!("concat_cols", &m34, |t, x| Var::concat_cols(&[x, t.constant(m34b.clone()), x])?);
    check!("l2_normalize_rows", &m34, |_t, x| x.l2_normalize_rows()?);
    check!("sum", &m34, |_t, x| x.sum());
    let focal = [
        FocalParams { alpha: Some(0.25), gamma: 2.0 },
        FocalParams { alpha: None, gamma: 0.0 },
    ];
    check!("focal_loss", &m34, |_t, x| x.focal_loss(&hot, &[1.0, 0.0, 1.0], focal[0], 2.0)?);
    check!("focal_loss.ce", &m34, |_t, x| x.focal_loss(&hot, &[1.0, 1.0, 1.0], focal[1], 3.0)?);
    check!("diou_loss", &pos, |_t, x| x.diou_loss(&targets, 3.0)?);
    Ok(out)
}
