//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] replays the tape in reverse. Nodes that
//! do not depend on a gradient-requiring leaf are never visited on the way back,
//! so binding parameters as constants skips their weight-gradient work.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::tensor::{gemm, MatView, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Cols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Reshape(usize),
    Transpose(usize),
    SelectSum {
        x: usize,
        idx: Vec<usize>,
    },
    GaussLogDensity {
        x: usize,
        mean: Option<usize>,
        inv_var: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Not `Sync`: build one graph per thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    non_finite: Cell<Option<&'static str>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient with respect to `var`; exact zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(t) => t,
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::with_capacity(256)),
            non_finite: Cell::new(None),
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var<'_> {
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(name));
        }
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf_impl(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some("input"));
        }
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    /// Input that gradients are taken with respect to.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_impl(Arc::new(value), true)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.leaf_impl(value, true)
    }

    /// Input treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf_impl(Arc::new(value), false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.leaf_impl(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails if any recorded value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some(op) => Err(Error::NumericFailure(format!("non-finite value produced by {op}"))),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        if !root.requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NumericFailure("non-finite gradient".into()));
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta.reshaped(nodes[id].value.shape()).expect("grad shape")),
    }
}

/// Lazily allocated gradient buffer for `id`, or `None` if it needs no gradient.
fn grad_buf<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], id: usize) -> Option<&'a mut Tensor> {
    if !nodes[id].requires_grad {
        return None;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    slot.as_mut()
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(da) = grad_buf(nodes, grads, *a) {
                gemm(
                    m,
                    n,
                    k,
                    MatView::n(g.data(), n),
                    MatView::t(bv.data(), n),
                    1.0,
                    da.data_mut(),
                );
            }
            if let Some(db) = grad_buf(nodes, grads, *b) {
                gemm(
                    k,
                    m,
                    n,
                    MatView::t(av.data(), k),
                    MatView::n(g.data(), n),
                    1.0,
                    db.data_mut(),
                );
            }
        }
        Op::MatMulBt(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if let Some(da) = grad_buf(nodes, grads, *a) {
                gemm(
                    m,
                    n,
                    k,
                    MatView::n(g.data(), n),
                    MatView::n(bv.data(), k),
                    1.0,
                    da.data_mut(),
                );
            }
            if let Some(db) = grad_buf(nodes, grads, *b) {
                gemm(
                    n,
                    m,
                    k,
                    MatView::t(g.data(), n),
                    MatView::n(av.data(), k),
                    1.0,
                    db.data_mut(),
                );
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if let Some(db) = grad_buf(nodes, grads, *b) {
                let n = g.cols();
                let db = db.data_mut();
                for row in g.data().chunks_exact(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, gv), bx) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += gv * bx;
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *b) {
                for ((d, gv), ax) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv * ax;
                }
            }
        }
        Op::Scale(a, k) => {
            let k = *k;
            accumulate(nodes, grads, *a, g.map(|v| v * k));
        }
        Op::Sum(a) => {
            let gv = g.item();
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.data_mut().iter_mut().for_each(|d| *d += gv);
            }
        }
        Op::Gelu(a) => {
            let av = &nodes[*a].value;
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, gv), &x) in da.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv * gelu_grad(x);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = g.cols();
            let gain_v = nodes[*gain].value.data().to_vec();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let dx = dx.data_mut();
                for (r, grow) in g.data().chunks_exact(n).enumerate() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..n {
                        let dxh = grow[j] * gain_v[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dxh = grow[j] * gain_v[j];
                        dx[r * n + j] += inv_std[r] / nf * (nf * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
            }
            if let Some(dg) = grad_buf(nodes, grads, *gain) {
                let dg = dg.data_mut();
                for (grow, xh) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        dg[j] += grow[j] * xh[j];
                    }
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *bias) {
                let db = db.data_mut();
                for grow in g.data().chunks_exact(n) {
                    for j in 0..n {
                        db[j] += grow[j];
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let n = g.cols();
                let da = da.data_mut();
                for (r, (grow, yrow)) in g.data().chunks_exact(n).zip(out.data().chunks_exact(n)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[r * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let n = g.cols();
                let da = da.data_mut();
                for (r, (grow, lrow)) in g.data().chunks_exact(n).zip(out.data().chunks_exact(n)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for j in 0..n {
                        da[r * n + j] += grow[j] - lrow[j].exp() * total;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dt) = grad_buf(nodes, grads, *table) {
                let e = dt.cols();
                let dt = dt.data_mut();
                for (grow, &id) in g.data().chunks_exact(e).zip(ids) {
                    for j in 0..e {
                        dt[id * e + j] += grow[j];
                    }
                }
            }
        }
        Op::Cols { x, start } => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let w = g.cols();
                let n = dx.cols();
                let dx = dx.data_mut();
                for (r, grow) in g.data().chunks_exact(w).enumerate() {
                    for j in 0..w {
                        dx[r * n + start + j] += grow[j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = g.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(dp) = grad_buf(nodes, grads, p) {
                    let dp = dp.data_mut();
                    for (r, grow) in g.data().chunks_exact(n).enumerate() {
                        for j in 0..w {
                            dp[r * w + j] += grow[offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Conv1d { x, w, b, stride, pad } => {
            conv1d_backward(nodes, grads, g, *x, *w, *b, *stride, *pad);
        }
        Op::ConvTranspose1d { x, w, b, stride, pad } => {
            conv_transpose1d_backward(nodes, grads, g, *x, *w, *b, *stride, *pad);
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, g.clone());
        }
        Op::Transpose(a) => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let (r, c) = (g.rows(), g.cols());
                let da = da.data_mut();
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g.data()[i * c + j];
                    }
                }
            }
        }
        Op::SelectSum { x, idx } => {
            let gv = g.item();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let n = dx.cols();
                let dx = dx.data_mut();
                for (r, &j) in idx.iter().enumerate() {
                    dx[r * n + j] += gv;
                }
            }
        }
        Op::GaussLogDensity { x, mean, inv_var } => {
            let gv = g.item();
            let xv = nodes[*x].value.clone();
            let resid: Vec<f64> = match mean {
                Some(m) => xv
                    .data()
                    .iter()
                    .zip(nodes[*m].value.data())
                    .zip(inv_var)
                    .map(|((a, b), iv)| (a - b) * iv)
                    .collect(),
                None => xv.data().iter().zip(inv_var).map(|(a, iv)| a * iv).collect(),
            };
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for (d, r) in dx.data_mut().iter_mut().zip(&resid) {
                    *d -= gv * r;
                }
            }
            if let Some(m) = mean {
                if let Some(dm) = grad_buf(nodes, grads, *m) {
                    for (d, r) in dm.data_mut().iter_mut().zip(&resid) {
                        *d += gv * r;
                    }
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Output length of a strided convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= kernel, "conv1d: kernel larger than padded input");
    (len + 2 * pad - kernel) / stride + 1
}

/// Input row feeding output row `o` through tap `k`, if inside the signal.
#[inline]
fn conv_src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
) {
    let xv = nodes[x].value.clone();
    let wv = nodes[w].value.clone();
    let (kernel, c_in, c_out) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
    let (l_in, l_out) = (xv.rows(), g.rows());
    let mut gathered = vec![0.0; l_out * c_in];
    for k in 0..kernel {
        let wk = &wv.data()[k * c_in * c_out..(k + 1) * c_in * c_out];
        if let Some(dw) = grad_buf(nodes, grads, w) {
            gathered.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..l_out {
                if let Some(i) = conv_src(o, k, stride, pad, l_in) {
                    gathered[o * c_in..(o + 1) * c_in].copy_from_slice(xv.row(i));
                }
            }
            let dwk = &mut dw.data_mut()[k * c_in * c_out..(k + 1) * c_in * c_out];
            gemm(
                c_in,
                l_out,
                c_out,
                MatView::t(&gathered, c_in),
                MatView::n(g.data(), c_out),
                1.0,
                dwk,
            );
        }
        if let Some(dx) = grad_buf(nodes, grads, x) {
            let mut dg = vec![0.0; l_out * c_in];
            gemm(
                l_out,
                c_out,
                c_in,
                MatView::n(g.data(), c_out),
                MatView::t(wk, c_out),
                0.0,
                &mut dg,
            );
            let dx = dx.data_mut();
            for o in 0..l_out {
                if let Some(i) = conv_src(o, k, stride, pad, l_in) {
                    for j in 0..c_in {
                        dx[i * c_in + j] += dg[o * c_in + j];
                    }
                }
            }
        }
    }
    if let Some(db) = grad_buf(nodes, grads, b) {
        let db = db.data_mut();
        for grow in g.data().chunks_exact(c_out) {
            for j in 0..c_out {
                db[j] += grow[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose1d_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
) {
    let xv = nodes[x].value.clone();
    let wv = nodes[w].value.clone();
    let (kernel, c_in, c_out) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
    let (l_in, l_out) = (xv.rows(), g.rows());
    // Output row for input row i through tap k is the conv source index with roles swapped.
    let mut gathered = vec![0.0; l_in * c_out];
    for k in 0..kernel {
        gathered.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..l_in {
            if let Some(o) = conv_src(i, k, stride, pad, l_out) {
                gathered[i * c_out..(i + 1) * c_out].copy_from_slice(g.row(o));
            }
        }
        let wk = &wv.data()[k * c_in * c_out..(k + 1) * c_in * c_out];
        if let Some(dx) = grad_buf(nodes, grads, x) {
            gemm(
                l_in,
                c_out,
                c_in,
                MatView::n(&gathered, c_out),
                MatView::t(wk, c_out),
                1.0,
                dx.data_mut(),
            );
        }
        if let Some(dw) = grad_buf(nodes, grads, w) {
            let dwk = &mut dw.data_mut()[k * c_in * c_out..(k + 1) * c_in * c_out];
            gemm(
                c_in,
                l_in,
                c_out,
                MatView::t(xv.data(), c_in),
                MatView::n(&gathered, c_out),
                1.0,
                dwk,
            );
        }
    }
    if let Some(db) = grad_buf(nodes, grads, b) {
        let db = db.data_mut();
        for grow in g.data().chunks_exact(c_out) {
            for j in 0..c_out {
                db[j] += grow[j];
            }
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value; panics on non-scalar nodes.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn rg(&self, others: &[Var<'g>]) -> bool {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id].requires_grad || others.iter().any(|o| nodes[o.id].requires_grad)
    }

    /// `self · rhs` for 2-D operands.
    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = (a.rows(), a.cols());
        assert_eq!(b.rows(), k, "matmul: inner dims {:?} x {:?}", a.shape(), b.shape());
        let n = b.cols();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatView::n(a.data(), k), MatView::n(b.data(), n), 0.0, &mut out);
        let rg = self.rg(&[rhs]);
        self.graph.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMul(self.id, rhs.id),
            rg,
            "matmul",
        )
    }

    /// `self · rhsᵀ` for 2-D operands.
    pub fn matmul_bt(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = (a.rows(), a.cols());
        assert_eq!(b.cols(), k, "matmul_bt: {:?} x {:?}ᵀ", a.shape(), b.shape());
        let n = b.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatView::n(a.data(), k), MatView::t(b.data(), k), 0.0, &mut out);
        let rg = self.rg(&[rhs]);
        self.graph.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMulBt(self.id, rhs.id),
            rg,
            "matmul_bt",
        )
    }

    fn zip_with(self, rhs: Var<'g>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.numel(), b.numel(), "{name}: {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[rhs]);
        self.graph
            .push(Tensor::new(a.shape().to_vec(), data).unwrap(), op, rg, name)
    }

    pub fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.zip_with(rhs, Op::Add(self.id, rhs.id), "add", |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.zip_with(rhs, Op::Sub(self.id, rhs.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.zip_with(rhs, Op::Mul(self.id, rhs.id), "mul", |a, b| a * b)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        self.same_graph(&row);
        let (a, b) = (self.value(), row.value());
        let n = a.cols();
        assert_eq!(b.numel(), n, "add_row: {:?} + {:?}", a.shape(), b.shape());
        let mut data = a.data().to_vec();
        for r in data.chunks_exact_mut(n) {
            for (v, bb) in r.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let rg = self.rg(&[row]);
        self.graph.push(
            Tensor::new(a.shape().to_vec(), data).unwrap(),
            Op::AddRow(self.id, row.id),
            rg,
            "add_row",
        )
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        let a = self.value();
        let rg = self.rg(&[]);
        self.graph.push(a.map(|v| v * k), Op::Scale(self.id, k), rg, "scale")
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn sum(self) -> Var<'g> {
        let a = self.value();
        let rg = self.rg(&[]);
        self.graph
            .push(Tensor::scalar(a.data().iter().sum()), Op::Sum(self.id), rg, "sum")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g> {
        let a = self.value();
        let rg = self.rg(&[]);
        self.graph.push(a.map(gelu), Op::Gelu(self.id), rg, "gelu")
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Var<'g> {
        let a = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let n = a.cols();
        assert_eq!(gv.numel(), n, "layer_norm gain");
        assert_eq!(bv.numel(), n, "layer_norm bias");
        let rows = a.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let x = a.row(r);
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (x[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(&[gain, bias]);
        self.graph.push(
            Tensor::new(a.shape().to_vec(), out).unwrap(),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out for `j > i`.
    pub fn softmax(self, causal: bool) -> Var<'g> {
        let a = self.value();
        let n = a.cols();
        let mut out = vec![0.0; a.numel()];
        for r in 0..a.rows() {
            let x = a.row(r);
            let hi = if causal { (r + 1).min(n) } else { n };
            let max = x[..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..hi {
                let e = (x[j] - max).exp();
                out[r * n + j] = e;
                z += e;
            }
            for v in &mut out[r * n..r * n + hi] {
                *v /= z;
            }
        }
        let rg = self.rg(&[]);
        self.graph.push(
            Tensor::new(a.shape().to_vec(), out).unwrap(),
            Op::Softmax(self.id),
            rg,
            "softmax",
        )
    }

    pub fn log_softmax(self) -> Var<'g> {
        let a = self.value();
        let n = a.cols();
        let mut out = vec![0.0; a.numel()];
        for r in 0..a.rows() {
            let x = a.row(r);
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[r * n + j] = x[j] - lse;
            }
        }
        let rg = self.rg(&[]);
        self.graph.push(
            Tensor::new(a.shape().to_vec(), out).unwrap(),
            Op::LogSoftmax(self.id),
            rg,
            "log_softmax",
        )
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(self, ids: &[usize]) -> Var<'g> {
        let t = self.value();
        let e = t.cols();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            assert!(id < t.rows(), "embedding id {id} out of range {}", t.rows());
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(&[]);
        self.graph.push(
            Tensor::new(vec![ids.len(), e], out).unwrap(),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn cols(self, start: usize, len: usize) -> Var<'g> {
        let a = self.value();
        let n = a.cols();
        assert!(start + len <= n, "cols out of range");
        let mut out = Vec::with_capacity(a.rows() * len);
        for r in 0..a.rows() {
            out.extend_from_slice(&a.row(r)[start..start + len]);
        }
        let rg = self.rg(&[]);
        self.graph.push(
            Tensor::new(vec![a.rows(), len], out).unwrap(),
            Op::Cols { x: self.id, start },
            rg,
            "cols",
        )
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let graph = parts[0].graph;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == rows), "concat_cols row mismatch");
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let rg = parts[0].rg(&parts[1..]);
        graph.push(
            Tensor::new(vec![rows, total], out).unwrap(),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
            "concat_cols",
        )
    }

    /// 1-D convolution over rows (positions) of an `[len, c_in]` signal with a
    /// `[kernel, c_in, c_out]` weight and zero padding.
    pub fn conv1d(self, w: Var<'g>, b: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (kernel, c_in, c_out) = conv_dims(&wv);
        assert_eq!(xv.cols(), c_in, "conv1d channels");
        assert_eq!(bv.numel(), c_out, "conv1d bias");
        let l_in = xv.rows();
        let l_out = conv_out_len(l_in, kernel, stride, pad);
        let mut out = vec![0.0; l_out * c_out];
        for row in out.chunks_exact_mut(c_out) {
            row.copy_from_slice(bv.data());
        }
        let mut gathered = vec![0.0; l_out * c_in];
        for k in 0..kernel {
            gathered.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..l_out {
                if let Some(i) = conv_src(o, k, stride, pad, l_in) {
                    gathered[o * c_in..(o + 1) * c_in].copy_from_slice(xv.row(i));
                }
            }
            let wk = &wv.data()[k * c_in * c_out..(k + 1) * c_in * c_out];
            gemm(
                l_out,
                c_in,
                c_out,
                MatView::n(&gathered, c_in),
                MatView::n(wk, c_out),
                1.0,
                &mut out,
            );
        }
        let rg = self.rg(&[w, b]);
        self.graph.push(
            Tensor::new(vec![l_out, c_out], out).unwrap(),
            Op::Conv1d {
                x: self.id,
                w: w.id,
                b: b.id,
                stride,
                pad,
            },
            rg,
            "conv1d",
        )
    }

    /// Transposed 1-D convolution producing exactly `out_len` positions.
    pub fn conv_transpose1d(self, w: Var<'g>, b: Var<'g>, stride: usize, pad: usize, out_len: usize) -> Var<'g> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (kernel, c_in, c_out) = conv_dims(&wv);
        assert_eq!(xv.cols(), c_in, "conv_transpose1d channels");
        assert_eq!(bv.numel(), c_out, "conv_transpose1d bias");
        let l_in = xv.rows();
        let mut out = vec![0.0; out_len * c_out];
        for row in out.chunks_exact_mut(c_out) {
            row.copy_from_slice(bv.data());
        }
        let mut prod = vec![0.0; l_in * c_out];
        for k in 0..kernel {
            let wk = &wv.data()[k * c_in * c_out..(k + 1) * c_in * c_out];
            gemm(
                l_in,
                c_in,
                c_out,
                MatView::n(xv.data(), c_in),
                MatView::n(wk, c_out),
                0.0,
                &mut prod,
            );
            for i in 0..l_in {
                if let Some(o) = conv_src(i, k, stride, pad, out_len) {
                    for j in 0..c_out {
                        out[o * c_out + j] += prod[i * c_out + j];
                    }
                }
            }
        }
        let rg = self.rg(&[w, b]);
        self.graph.push(
            Tensor::new(vec![out_len, c_out], out).unwrap(),
            Op::ConvTranspose1d {
                x: self.id,
                w: w.id,
                b: b.id,
                stride,
                pad,
            },
            rg,
            "conv_transpose1d",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let a = self.value();
        let t = (*a).clone().reshaped(shape).expect("reshape");
        let rg = self.rg(&[]);
        self.graph.push(t, Op::Reshape(self.id), rg, "reshape")
    }

    pub fn transpose(self) -> Var<'g> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        let rg = self.rg(&[]);
        self.graph.push(
            Tensor::new(vec![c, r], out).unwrap(),
            Op::Transpose(self.id),
            rg,
            "transpose",
        )
    }

    /// `Σ_r self[r, idx[r]]`, one index per row.
    pub fn select_sum(self, idx: &[usize]) -> Var<'g> {
        let a = self.value();
        assert_eq!(a.rows(), idx.len(), "select_sum: one index per row");
        let n = a.cols();
        let total = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < n, "select_sum index {j} out of range {n}");
                a.data()[r * n + j]
            })
            .sum();
        let rg = self.rg(&[]);
        self.graph.push(
            Tensor::scalar(total),
            Op::SelectSum {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
            "select_sum",
        )
    }

    /// Summed cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g> {
        self.log_softmax().select_sum(targets).neg()
    }

    /// `Σ_i log N(self_i; mean_i, var_i)`; `mean = None` means zero mean.
    pub fn gaussian_log_density(self, mean: Option<Var<'g>>, var: &[f64]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.numel(), var.len(), "gaussian_log_density variance length");
        let m = mean.map(|m| m.value());
        if let Some(m) = &m {
            assert_eq!(m.numel(), x.numel(), "gaussian_log_density mean length");
        }
        let mut total = 0.0;
        for (i, (&xi, &v)) in x.data().iter().zip(var.iter()).enumerate() {
            let r = xi - m.as_ref().map_or(0.0, |m| m.data()[i]);
            total += -0.5 * (LN_2PI + v.ln()) - r * r / (2.0 * v);
        }
        let rg = match mean {
            Some(mv) => self.rg(&[mv]),
            None => self.rg(&[]),
        };
        self.graph.push(
            Tensor::scalar(total),
            Op::GaussLogDensity {
                x: self.id,
                mean: mean.map(|m| m.id),
                inv_var: var.iter().map(|v| 1.0 / v).collect(),
            },
            rg,
            "gaussian_log_density",
        )
    }
}

fn conv_dims(w: &Tensor) -> (usize, usize, usize) {
    assert_eq!(w.shape().len(), 3, "conv weight must be [kernel, c_in, c_out]");
    (w.shape()[0], w.shape()[1], w.shape()[2])
}

/// Value and gradients of a scalar function of several tensors.
pub fn grad<F>(inputs: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = f(&graph, &vars);
    let grads = graph.backward(loss)?;
    let value = loss.item();
    Ok((value, vars.iter().map(|v| grads.wrt(*v)).collect()))
}
