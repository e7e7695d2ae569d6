//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive evaluates
//! eagerly and appends a node; [`Tape::backward`] walks the nodes in reverse
//! once. Parameters enter the tape as leaves copied from a [`ParamStore`];
//! leaves from a store whose parameters have `requires_grad == false` are
//! plain constants and never receive a gradient.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, shape_err, Result, Tensor, TensorError};

type Derivative = Box<dyn Fn(f64) -> f64 + Send>;

enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Map(usize, Derivative),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: Vec<(f64, f64)>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
    RowMean(usize),
    Cosine {
        a: usize,
        b: usize,
        clamped: Vec<bool>,
    },
    Sum(usize),
    WeightedSum {
        x: usize,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<HashMap<(u64, ParamId), usize>>,
    track_params: bool,
    checked: bool,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
            track_params: true,
            checked: false,
            backward_done: Cell::new(false),
        }
    }

    /// A tape that verifies every op output is finite.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    /// A tape on which every parameter is a constant, for decoding.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_leaf(value, op, requires_grad))
    }

    /// Leaves are never checked; the first op that reads one is.
    fn push_leaf(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, Op::Leaf, true)
    }

    /// Registers (once per tape) the parameter `id` of `store` as a leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = (store.uid(), id);
        if let Some(&node) = self.leaves.borrow().get(&key) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let trainable = self.track_params && p.requires_grad;
        let op = if trainable {
            Op::Param {
                store: store.uid(),
                id,
            }
        } else {
            Op::Leaf
        };
        let v = self.push_leaf(p.value.clone(), op, trainable);
        self.leaves.borrow_mut().insert(key, v.id);
        v
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: root.value.shape().to_vec(),
            });
        }
        self.backward_done.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.checked && g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            propagate(&nodes, i, &g, &mut grads);
            match node.op {
                Op::Param { store, id } => {
                    out.params
                        .insert((store, id), Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
                }
                Op::Leaf => {
                    out.leaves
                        .insert(i, Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], idx: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let n = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param { .. } => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = acc(grads, nodes, *a) {
                kernels::matmul_nt_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::matmul_tn_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::MatMulNT(a, b) => {
            // out = a·bᵀ with a [m×k], b [n×k]
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            if let Some(ga) = acc(grads, nodes, *a) {
                kernels::matmul_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::matmul_tn_acc(g, av.data(), gb, m, n, k);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Reshape(a) | Op::AddScalar(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                    *x += gy * bb;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                    *x += gy * aa;
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            let c = out.cols();
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (x, gy) in ga.iter_mut().zip(g) {
                    *x += gy * s;
                }
            }
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gy), v) in ga.iter_mut().zip(g).zip(av) {
                    if *v > 0.0 {
                        *x += gy;
                    }
                }
            }
        }
        Op::Map(a, df) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gy), v) in ga.iter_mut().zip(g).zip(av) {
                    *x += gy * df(*v);
                }
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let s = kernels::dot(gy, y);
                    for j in 0..c {
                        gx[j] += y[j] * (gy[j] - s);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let s: f64 = gy.iter().sum();
                    for j in 0..c {
                        gx[j] += gy[j] - y[j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let d = out.cols();
            let xv = nodes[*x].value.data();
            let gv = nodes[*gain].value.data();
            let xhat: Vec<f64> = xv
                .chunks(d)
                .zip(stats)
                .flat_map(|(row, &(mean, rstd))| row.iter().map(move |v| (v - mean) * rstd))
                .collect();
            if let Some(gg) = acc(grads, nodes, *gain) {
                for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gy[j] * xh[j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for gy in g.chunks(d) {
                    add_into(gb, gy);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (((gxr, gy), xh), &(_, rstd)) in
                    gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(stats)
                {
                    for j in 0..d {
                        dxhat[j] = gy[j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = kernels::dot(&dxhat, xh) / d as f64;
                    for j in 0..d {
                        gxr[j] += rstd * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let c = out.cols();
            let xc = nodes[*x].value.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (gxr, gy) in gx.chunks_mut(xc).zip(g.chunks(c)) {
                    add_into(&mut gxr[*start..start + c], gy);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let c = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for (gpr, gy) in gp.chunks_mut(pc).zip(g.chunks(c)) {
                        add_into(gpr, &gy[offset..offset + pc]);
                    }
                }
                offset += pc;
            }
        }
        Op::SliceRows { x, start } => {
            let c = out.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
        }
        Op::Gather { table, ids } => {
            let c = out.cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
        }
        Op::Pick { x, idx } => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * c + j] += g[r];
                }
            }
        }
        Op::RowMean(x) => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, gxr) in gx.chunks_mut(c).enumerate() {
                    let v = g[r] / c as f64;
                    gxr.iter_mut().for_each(|e| *e += v);
                }
            }
        }
        Op::Cosine { a, b, clamped } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let d = av.cols();
            let rows = av.rows();
            let mut da = vec![0.0; d * rows];
            let mut db = vec![0.0; d * rows];
            for r in 0..rows {
                if clamped[r] {
                    continue;
                }
                let (u, v) = (av.row(r), bv.row(r));
                let nu = kernels::dot(u, u).sqrt();
                let nv = kernels::dot(v, v).sqrt();
                let uv = kernels::dot(u, v);
                let den = nu * nv + kernels::COS_EPS;
                for j in 0..d {
                    let du = if nu > 0.0 { nv * u[j] / nu } else { 0.0 };
                    let dv = if nv > 0.0 { nu * v[j] / nv } else { 0.0 };
                    da[r * d + j] = g[r] * (v[j] / den - uv * du / (den * den));
                    db[r * d + j] = g[r] * (u[j] / den - uv * dv / (den * den));
                }
            }
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, &da);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                add_into(gb, &db);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|e| *e += g[0]);
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (e, w) in gx.iter_mut().zip(weights) {
                    *e += g[0] * w;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: HashMap<(u64, ParamId), Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&(store.uid(), id))
    }

    /// Number of parameter gradients that belong to `store`.
    pub fn count_for(&self, store: &ParamStore) -> usize {
        self.params.keys().filter(|(s, _)| *s == store.uid()).count()
    }

    /// Adds this store's gradients into each parameter's `grad` slot.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let uid = store.uid();
        let mut keys: Vec<_> = self.params.keys().filter(|(s, _)| *s == uid).copied().collect();
        keys.sort();
        for key in keys {
            let g = &self.params[&key];
            let p = store.get_mut(key.1);
            match &mut p.grad {
                Some(existing) => add_into(existing.data_mut(), g.data()),
                None => p.grad = Some(g.clone()),
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
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

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands belong to different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        self.tape.push(value, op, self.requires_grad(), name)
    }

    fn binary(&self, other: &Var<'_>, value: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg, name)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&self, other: Var<'_>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        self.binary(&other, value, Op::MatMul(self.id, other.id), "matmul")
    }

    /// `[m×k] · [n×k]ᵀ`
    pub fn matmul_t(&self, other: Var<'_>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(shape_err("matmul_t", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let mut out = vec![0.0; m * n];
            kernels::matmul_nt_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        self.binary(&other, value, Op::MatMulNT(self.id, other.id), "matmul_t")
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if a.shape().len() != 2 {
                return Err(shape_err("transpose", a.shape(), &[]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        self.unary(value, Op::Transpose(self.id), "transpose")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            Tensor::new(shape.to_vec(), a.data().to_vec())
                .map_err(|_| shape_err("reshape", a.shape(), shape))?
        };
        self.unary(value, Op::Reshape(self.id), "reshape")
    }

    fn zip_same(&self, other: &Var<'_>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.tape.value_of(self.id);
        let b = other.tape.value_of(other.id);
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: Var<'_>) -> Result<Var<'t>> {
        let v = self.zip_same(&other, "add", |x, y| x + y)?;
        self.binary(&other, v, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(&self, other: Var<'_>) -> Result<Var<'t>> {
        let v = self.zip_same(&other, "sub", |x, y| x - y)?;
        self.binary(&other, v, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(&self, other: Var<'_>) -> Result<Var<'t>> {
        let v = self.zip_same(&other, "mul", |x, y| x * y)?;
        self.binary(&other, v, Op::Mul(self.id, other.id), "mul")
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&self, bias: Var<'_>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = bias.tape.value_of(bias.id);
            if b.len() != a.cols() || a.shape().is_empty() {
                return Err(shape_err("add_row", a.shape(), b.shape()));
            }
            let c = a.cols();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(c) {
                add_into(row, b.data());
            }
            Tensor::new(a.shape().to_vec(), out)?
        };
        self.binary(&bias, value, Op::AddRow(self.id, bias.id), "add_row")
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let value = self.map_values(|v| v * s);
        self.unary(value, Op::Scale(self.id, s), "scale")
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        let value = self.map_values(|v| v + s);
        self.unary(value, Op::AddScalar(self.id), "add_scalar")
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let value = self.map_values(|v| v.max(0.0));
        self.unary(value, Op::Relu(self.id), "relu")
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + Send + 'static,
    ) -> Result<Var<'t>> {
        let value = self.map_values(f);
        self.unary(value, Op::Map(self.id, Box::new(df)), "map")
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.tape.value_of(self.id);
        Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        self.masked_softmax(None)
    }

    /// Softmax along the last axis where `allow[i] == false` entries are
    /// excluded (probability exactly 0). A fully excluded row is all zeros.
    pub fn masked_softmax(&self, allow: Option<&[bool]>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if let Some(m) = allow {
                if m.len() != a.len() {
                    return Err(shape_err("masked_softmax", a.shape(), &[m.len()]));
                }
            }
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            for (r, (o, x)) in out.chunks_mut(c).zip(a.data().chunks(c)).enumerate() {
                kernels::softmax_row(x, allow.map(|m| &m[r * c..(r + 1) * c]), o);
            }
            Tensor::new(a.shape().to_vec(), out)?
        };
        self.unary(value, Op::Softmax(self.id), "softmax")
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            for (o, x) in out.chunks_mut(c).zip(a.data().chunks(c)) {
                kernels::log_softmax_row(x, o);
            }
            Tensor::new(a.shape().to_vec(), out)?
        };
        self.unary(value, Op::LogSoftmax(self.id), "log_softmax")
    }

    /// Per-row normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&self, gain: Var<'_>, bias: Var<'_>) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let (value, stats) = {
            let a = self.tape.value_of(self.id);
            let g = self.tape.value_of(gain.id);
            let b = self.tape.value_of(bias.id);
            let d = a.cols();
            if g.len() != d || b.len() != d || d == 0 {
                return Err(shape_err("layer_norm", a.shape(), g.shape()));
            }
            let mut out = vec![0.0; a.len()];
            let stats = out
                .chunks_mut(d)
                .zip(a.data().chunks(d))
                .map(|(o, x)| kernels::layer_norm_row(x, g.data(), b.data(), o))
                .collect::<Vec<_>>();
            (Tensor::new(a.shape().to_vec(), out)?, stats)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let c = a.cols();
            if a.shape().len() != 2 || start + len > c {
                return Err(shape_err("slice_cols", a.shape(), &[start, len]));
            }
            let data = a
                .data()
                .chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![a.rows(), len], data)?
        };
        self.unary(value, Op::SliceCols { x: self.id, start }, "slice_cols")
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if a.shape().len() != 2 || start + len > a.shape()[0] {
                return Err(shape_err("slice_rows", a.shape(), &[start, len]));
            }
            let c = a.cols();
            Tensor::new(vec![len, c], a.data()[start * c..(start + len) * c].to_vec())?
        };
        self.unary(value, Op::SliceRows { x: self.id, start }, "slice_rows")
    }

    /// Rows `ids` of a `[V×d]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let t = self.tape.value_of(self.id);
            if t.shape().len() != 2 {
                return Err(shape_err("gather_rows", t.shape(), &[]));
            }
            let (v, c) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= v {
                    return Err(TensorError::Invalid(format!("row {id} out of range for {v} rows")));
                }
                out.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), c], out)?
        };
        self.unary(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            "gather_rows",
        )
    }

    /// `out[r] = self[r, idx[r]]`.
    pub fn pick(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let c = a.cols();
            if a.rows() != idx.len() || idx.iter().any(|&j| j >= c) {
                return Err(shape_err("pick", a.shape(), &[idx.len()]));
            }
            Tensor::vector(idx.iter().enumerate().map(|(r, &j)| a.data()[r * c + j]).collect())
        };
        self.unary(
            value,
            Op::Pick {
                x: self.id,
                idx: idx.to_vec(),
            },
            "pick",
        )
    }

    /// Mean over the last axis, one value per row.
    pub fn row_mean(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let c = a.cols();
            Tensor::vector(a.data().chunks(c).map(|r| r.iter().sum::<f64>() / c as f64).collect())
        };
        self.unary(value, Op::RowMean(self.id), "row_mean")
    }

    /// Row-wise cosine similarity `u·v / (‖u‖‖v‖ + 1e-8)`, clamped to [-1, 1].
    pub fn cosine_rows(&self, other: Var<'_>) -> Result<Var<'t>> {
        let (value, clamped) = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.shape() != b.shape() {
                return Err(shape_err("cosine_rows", a.shape(), b.shape()));
            }
            let mut out = Vec::with_capacity(a.rows());
            let mut clamped = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let (u, v) = (a.row(r), b.row(r));
                let raw = kernels::dot(u, v) / (kernels::dot(u, u).sqrt() * kernels::dot(v, v).sqrt() + kernels::COS_EPS);
                clamped.push(!(-1.0..=1.0).contains(&raw));
                out.push(raw.clamp(-1.0, 1.0));
            }
            (Tensor::vector(out), clamped)
        };
        self.binary(
            &other,
            value,
            Op::Cosine {
                a: self.id,
                b: other.id,
                clamped,
            },
            "cosine_rows",
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.tape.value_of(self.id).data().iter().sum());
        self.unary(value, Op::Sum(self.id), "sum")
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if weights.len() != a.len() {
                return Err(shape_err("weighted_sum", a.shape(), &[weights.len()]));
            }
            Tensor::scalar(kernels::dot(a.data(), weights))
        };
        self.unary(
            value,
            Op::WeightedSum {
                x: self.id,
                weights: weights.to_vec(),
            },
            "weighted_sum",
        )
    }
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
    let tape = first.tape;
    let value = {
        let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
        let rows = vals[0].rows();
        for v in &vals {
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(shape_err("concat_cols", vals[0].shape(), v.shape()));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        Tensor::new(vec![rows, total], out)?
    };
    let rg = parts.iter().any(|p| {
        first.same_tape(p);
        p.requires_grad()
    });
    tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg, "concat_cols")
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub worst: usize,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn summarize(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let (worst, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .enumerate()
        .fold((0, 0.0), |(wi, wm), (i, e)| if e > wm { (i, e) } else { (wi, wm) });
    GradCheckReport {
        passed: max_rel_err <= tol,
        analytic,
        numeric,
        max_rel_err,
        worst,
    }
}

/// Checks `d f(x) / dx` for a scalar-valued `f` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(&tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.var(t.clone());
        Ok(f(&tape, v)?.item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let (up, down) = (orig + FD_STEP, orig - FD_STEP);
        probe.data_mut()[i] = up;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = down;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((hi - lo) / (up - down));
    }
    Ok(summarize(analytic, numeric, tol))
}

/// Checks gradients of a scalar function of the parameters in `store`
/// against central differences, for every element of every trainable
/// parameter accepted by `select`.
pub fn grad_check_params<F>(
    f: F,
    store: &mut ParamStore,
    select: impl Fn(&str) -> bool,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    grad_check_state(store, |s| s, f, select, tol)
}

/// Like [`grad_check_params`] for a loss that reads its parameters from a
/// larger structure; `store` selects the store to perturb.
pub fn grad_check_state<S, F, E>(
    state: &mut S,
    store: fn(&mut S) -> &mut ParamStore,
    f: F,
    select: impl Fn(&str) -> bool,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &S) -> std::result::Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let grads = {
        let tape = Tape::new();
        let y = f(&tape, state)?;
        tape.backward(y)?
    };
    let ids: Vec<ParamId> = store(state)
        .iter()
        .filter(|(_, p)| p.requires_grad && select(&p.name))
        .map(|(id, _)| id)
        .collect();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let eval = |state: &S| -> std::result::Result<f64, E> {
        let t = Tape::new();
        Ok(f(&t, state)?.item())
    };
    for id in ids {
        let n = store(state).value(id).len();
        match grads.param(store(state), id) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for i in 0..n {
            let orig = store(state).value(id).data()[i];
            let (up, down) = (orig + FD_STEP, orig - FD_STEP);
            store(state).get_mut(id).value.data_mut()[i] = up;
            let hi = eval(state)?;
            store(state).get_mut(id).value.data_mut()[i] = down;
            let lo = eval(state)?;
            store(state).get_mut(id).value.data_mut()[i] = orig;
            numeric.push((hi - lo) / (up - down));
        }
    }
    Ok(summarize(analytic, numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let t = Tape::new();
        let i2 = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(a).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = t.constant(m(1, 2, &[1.0, 2.0]));
        let c = t.constant(m(2, 1, &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn softmax_examples() {
        let t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax().unwrap().value().data(), &[0.5, 0.5]);
        let x = t.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = x.softmax().unwrap().value();
        for (got, want) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = x.softmax().unwrap().value();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let t = Tape::new();
        let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = t.constant(m(1, 2, &[5.0, 5.0]));
        assert_eq!(x.layer_norm(g, b).unwrap().value().data(), &[0.0, 0.0]);
        let x = t.constant(m(1, 2, &[1.0, 3.0]));
        let y = x.layer_norm(g, b).unwrap().value();
        // variance 1 plus epsilon
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-15 && (y.data()[1] - s).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cosine_examples() {
        let t = Tape::new();
        let cos = |u: &[f64], v: &[f64]| {
            let a = t.constant(m(1, u.len(), u));
            let b = t.constant(m(1, v.len(), v));
            a.cosine_rows(b).unwrap().item()
        };
        // the 1e-8 guard in the denominator is the only deviation from 1
        assert!((cos(&[0.3, -2.0, 1.5], &[0.3, -2.0, 1.5]) - 1.0).abs() < 1e-8);
        assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cos(&[1.0, 1.0], &[1.0, 0.0]) - 1.0 / 2f64.sqrt()).abs() < 1e-8);
        assert_eq!(cos(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn backward_examples() {
        let t = Tape::new();
        let x = t.var(Tensor::zeros(&[2, 3]));
        let g = t.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);

        let t = Tape::new();
        let x = t.var(Tensor::vector(vec![1.0, 2.0]));
        let g = t.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.var(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn checked_tape_reports_non_finite() {
        let t = Tape::checked();
        let x = t.var(Tensor::vector(vec![-1.0]));
        let err = x.map(f64::ln, |v| 1.0 / v).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "map" });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut frozen = store.clone();
        frozen.set_requires_grad(false);
        let t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&frozen, id);
        let loss = a.mul(b).unwrap().sum().unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.param(&store, id).unwrap().data(), &[1.0, 2.0]);
        assert!(g.param(&frozen, id).is_none());
        assert_eq!(g.count_for(&frozen), 0);
    }

    #[test]
    fn grad_check_sum_is_exact() {
        // zeros keep every perturbed sum exactly representable
        let x = Tensor::vector(vec![0.0; 4]);
        let r = grad_check(|_, v| v.sum(), &x, 0.0).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn grad_check_flags_wrong_derivative() {
        let x = Tensor::vector(vec![0.3, 1.2]);
        let r = grad_check(|_, v| v.map(|a| a * a, |a| 3.0 * a)?.sum(), &x, 1e-4).unwrap();
        assert!(!r.passed);
    }
}
