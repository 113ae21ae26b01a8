//! Define-by-run value graph.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when
//! it depends on a trainable leaf, the parents and operation needed to push
//! gradients back. Nodes that do not require gradients drop their parents at
//! construction, so long no-grad evaluations free memory as they go.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{Shape, Tensor};
use super::AutodiffError;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Floor applied inside `log` and `normalize`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Hadamard,
    Scale,
    ScaleConst(f64),
    AddConst,
    MatVec,
    VecMat,
    MatMul,
    Outer,
    Concat,
    Slice { start: usize },
    Reshape,
    Softmax,
    Sigmoid,
    Tanh,
    Log,
    Sum,
    Dot,
    DotConst(Rc<[f64]>),
    Scatter(Rc<[(usize, usize)]>),
    Write,
    Table { table: Rc<[usize]>, n: usize },
    TwoPoint { on: usize, off: usize },
    Pwl,
    Mix { base: Option<Vec<usize>>, items: Vec<usize> },
    Normalize,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    op: Op,
    param: Option<Rc<str>>,
}

impl Drop for Node {
    // Unwind long parent chains iteratively; a recursive drop of a
    // thousands-of-steps execution graph overflows the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Var> = std::mem::take(&mut self.parents);
        while let Some(var) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(var.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// Handle to a node of the value graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, left: Shape, right: Shape) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left, right }
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            parents: Vec::new(),
            op: Op::Leaf,
            param: None,
        }))
    }

    pub(crate) fn parameter(name: &str, value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents: Vec::new(),
            op: Op::Leaf,
            param: Some(Rc::from(name)),
        }))
    }

    fn from_op(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (op, parents) = if requires_grad { (op, parents) } else { (Op::Leaf, Vec::new()) };
        Var(Rc::new(Node { id: next_id(), value, requires_grad, parents, op, param: None }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn ptr_eq(a: &Var, b: &Var) -> bool {
        Rc::ptr_eq(&a.0, &b.0)
    }

    /// Copy of the value detached from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(mismatch(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    fn zip(&self, other: &Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::new(self.shape(), data))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape(), self.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        Ok(Var::from_op(v, Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        Ok(Var::from_op(v, Op::Sub, vec![self.clone(), other.clone()]))
    }

    pub fn hadamard(&self, other: &Var) -> Result<Var> {
        let v = self.zip(other, "hadamard", |a, b| a * b)?;
        Ok(Var::from_op(v, Op::Hadamard, vec![self.clone(), other.clone()]))
    }

    /// Multiply every element by the scalar node `s`.
    pub fn scalarmul(&self, s: &Var) -> Result<Var> {
        if s.shape() != Shape::Scalar {
            return Err(mismatch("scalarmul", s.shape(), self.shape()));
        }
        let k = s.item();
        Ok(Var::from_op(self.map(|x| k * x), Op::Scale, vec![s.clone(), self.clone()]))
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::from_op(self.map(|x| k * x), Op::ScaleConst(k), vec![self.clone()])
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        Var::from_op(self.map(|x| x + k), Op::AddConst, vec![self.clone()])
    }

    /// `M x` for an `r×c` matrix and length-`c` vector.
    pub fn matvec(&self, x: &Var) -> Result<Var> {
        let (r, c) = match (self.shape(), x.shape()) {
            (Shape::Matrix(r, c), Shape::Vector(n)) if n == c => (r, c),
            (a, b) => return Err(mismatch("matvec", a, b)),
        };
        let m = self.data();
        let xv = x.data();
        let out = (0..r).map(|i| m[i * c..(i + 1) * c].iter().zip(xv).map(|(a, b)| a * b).sum()).collect();
        Ok(Var::from_op(Tensor::vector(out), Op::MatVec, vec![self.clone(), x.clone()]))
    }

    /// `xᵀ M` for a length-`r` vector and `r×c` matrix.
    pub fn vecmat(&self, m: &Var) -> Result<Var> {
        let (r, c) = match (self.shape(), m.shape()) {
            (Shape::Vector(n), Shape::Matrix(r, c)) if n == r => (r, c),
            (a, b) => return Err(mismatch("vecmat", a, b)),
        };
        let mut out = vec![0.0; c];
        let md = m.data();
        for (i, &xi) in self.data().iter().enumerate().take(r) {
            if xi != 0.0 {
                for (o, &mij) in out.iter_mut().zip(&md[i * c..(i + 1) * c]) {
                    *o += xi * mij;
                }
            }
        }
        Ok(Var::from_op(Tensor::vector(out), Op::VecMat, vec![self.clone(), m.clone()]))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (r, k, c) = match (self.shape(), other.shape()) {
            (Shape::Matrix(r, k), Shape::Matrix(k2, c)) if k == k2 => (r, k, c),
            (a, b) => return Err(mismatch("matmul", a, b)),
        };
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for t in 0..k {
                let ait = a[i * k + t];
                if ait != 0.0 {
                    for j in 0..c {
                        out[i * c + j] += ait * b[t * c + j];
                    }
                }
            }
        }
        Ok(Var::from_op(Tensor::matrix(r, c, out), Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn outer(&self, other: &Var) -> Result<Var> {
        let (r, c) = match (self.shape(), other.shape()) {
            (Shape::Vector(r), Shape::Vector(c)) => (r, c),
            (a, b) => return Err(mismatch("outer", a, b)),
        };
        let mut out = Vec::with_capacity(r * c);
        for &a in self.data() {
            out.extend(other.data().iter().map(|&b| a * b));
        }
        Ok(Var::from_op(Tensor::matrix(r, c, out), Op::Outer, vec![self.clone(), other.clone()]))
    }

    /// Concatenate vectors (scalars count as length one).
    pub fn concat(parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for p in parts {
            if p.shape().rank() > 1 {
                return Err(mismatch("concat", p.shape(), Shape::Vector(0)));
            }
            out.extend_from_slice(p.data());
        }
        Ok(Var::from_op(Tensor::vector(out), Op::Concat, parts.to_vec()))
    }

    /// Contiguous slice of the flattened data, returned as a vector.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value().len() {
            return Err(mismatch("slice", self.shape(), Shape::Vector(start + len)));
        }
        let out = self.data()[start..start + len].to_vec();
        Ok(Var::from_op(Tensor::vector(out), Op::Slice { start }, vec![self.clone()]))
    }

    pub fn row(&self, i: usize) -> Result<Var> {
        match self.shape() {
            Shape::Matrix(r, c) if i < r => self.slice(i * c, c),
            s => Err(mismatch("row", s, Shape::Vector(i))),
        }
    }

    pub fn element(&self, i: usize) -> Result<Var> {
        let v = self.slice(i, 1)?;
        v.reshape(Shape::Scalar)
    }

    pub fn reshape(&self, shape: Shape) -> Result<Var> {
        if shape.len() != self.value().len() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        let t = Tensor::new(shape, self.data().to_vec());
        Ok(Var::from_op(t, Op::Reshape, vec![self.clone()]))
    }

    /// Max-subtracted softmax over all elements.
    pub fn softmax(&self) -> Var {
        let m = self.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.data().iter().map(|&x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let t = Tensor::new(self.shape(), e.into_iter().map(|x| x / s).collect());
        Var::from_op(t, Op::Softmax, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.map(|x| 1.0 / (1.0 + (-x).exp())), Op::Sigmoid, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.map(f64::tanh), Op::Tanh, vec![self.clone()])
    }

    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    pub fn log(&self) -> Var {
        Var::from_op(self.map(|x| x.max(LOG_FLOOR).ln()), Op::Log, vec![self.clone()])
    }

    pub fn sum(&self) -> Var {
        let s = self.data().iter().sum();
        Var::from_op(Tensor::scalar(s), Op::Sum, vec![self.clone()])
    }

    pub fn dot(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "dot")?;
        let s = self.data().iter().zip(other.data()).map(|(a, b)| a * b).sum();
        Ok(Var::from_op(Tensor::scalar(s), Op::Dot, vec![self.clone(), other.clone()]))
    }

    /// Inner product with a constant weight vector.
    pub fn dot_const(&self, w: Rc<[f64]>) -> Result<Var> {
        if w.len() != self.value().len() {
            return Err(mismatch("dot_const", self.shape(), Shape::Vector(w.len())));
        }
        let s = self.data().iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        Ok(Var::from_op(Tensor::scalar(s), Op::DotConst(w), vec![self.clone()]))
    }

    /// Linear scatter: `out[dst] += x[src]` for every `(src, dst)` pair.
    pub fn scatter(&self, pairs: Rc<[(usize, usize)]>, out_len: usize) -> Result<Var> {
        let x = self.data();
        let mut out = vec![0.0; out_len];
        for &(s, d) in pairs.iter() {
            if s >= x.len() || d >= out_len {
                return Err(mismatch("scatter", self.shape(), Shape::Vector(out_len)));
            }
            out[d] += x[s];
        }
        Ok(Var::from_op(Tensor::vector(out), Op::Scatter(pairs), vec![self.clone()]))
    }

    /// Erase-then-add memory write: `M - (a 1ᵀ) ⊙ M + a xᵀ`.
    pub fn write(memory: &Var, x: &Var, address: &Var) -> Result<Var> {
        let (r, c) = match memory.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => return Err(mismatch("write", s, x.shape())),
        };
        if x.shape() != Shape::Vector(c) {
            return Err(mismatch("write", memory.shape(), x.shape()));
        }
        if address.shape() != Shape::Vector(r) {
            return Err(mismatch("write", memory.shape(), address.shape()));
        }
        let m = memory.data();
        let xv = x.data();
        let mut out = m.to_vec();
        for (i, &ai) in address.data().iter().enumerate() {
            if ai != 0.0 {
                let row = &mut out[i * c..(i + 1) * c];
                for (o, &xj) in row.iter_mut().zip(xv) {
                    *o = *o * (1.0 - ai) + ai * xj;
                }
            }
        }
        Ok(Var::from_op(Tensor::matrix(r, c, out), Op::Write, vec![memory.clone(), x.clone(), address.clone()]))
    }

    /// Bilinear application of a table-encoded operation tensor:
    /// `out[table[i*n + j]] += a_i b_j`.
    pub fn table_op(a: &Var, b: &Var, table: Rc<[usize]>, n: usize) -> Result<Var> {
        if a.shape() != Shape::Vector(n) || b.shape() != Shape::Vector(n) || table.len() != n * n {
            return Err(mismatch("table_op", a.shape(), b.shape()));
        }
        let av = a.data();
        let bv = b.data();
        let mut out = vec![0.0; n];
        for (i, &ai) in av.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &table[i * n..(i + 1) * n];
            for (&k, &bj) in row.iter().zip(bv) {
                out[k] += ai * bj;
            }
        }
        Ok(Var::from_op(Tensor::vector(out), Op::Table { table, n }, vec![a.clone(), b.clone()]))
    }

    /// Length-`len` vector with `p` at `on` and `1 - p` at `off` (summed when equal).
    pub fn two_point(p: &Var, on: usize, off: usize, len: usize) -> Result<Var> {
        if p.shape() != Shape::Scalar || on >= len || off >= len {
            return Err(mismatch("two_point", p.shape(), Shape::Vector(len)));
        }
        let pv = p.item();
        let mut out = vec![0.0; len];
        out[on] += pv;
        out[off] += 1.0 - pv;
        Ok(Var::from_op(Tensor::vector(out), Op::TwoPoint { on, off }, vec![p.clone()]))
    }

    /// Piecewise-linear squashing `min(max(0, x + 0.5), 1)`.
    pub fn pwl(&self) -> Var {
        Var::from_op(self.map(phi_pwl), Op::Pwl, vec![self.clone()])
    }

    /// Weighted mixture `s·base + Σ w[i]·item_i` where `s = Σ_{j ∈ base_idx} w[j]`.
    pub fn mix(weights: &Var, base: Option<(&Var, Vec<usize>)>, items: &[(usize, Var)]) -> Result<Var> {
        let w = weights.data();
        let shape = match (&base, items.first()) {
            (Some((b, _)), _) => b.shape(),
            (None, Some((_, x))) => x.shape(),
            (None, None) => return Err(mismatch("mix", weights.shape(), Shape::Scalar)),
        };
        let mut out = vec![0.0; shape.len()];
        let mut parents = vec![weights.clone()];
        let base_idx = match base {
            Some((b, idx)) => {
                if idx.iter().any(|&i| i >= w.len()) {
                    return Err(mismatch("mix", weights.shape(), b.shape()));
                }
                let s: f64 = idx.iter().map(|&i| w[i]).sum();
                for (o, &x) in out.iter_mut().zip(b.data()) {
                    *o = s * x;
                }
                parents.push(b.clone());
                Some(idx)
            }
            None => None,
        };
        let mut item_idx = Vec::with_capacity(items.len());
        for (i, x) in items {
            if x.shape() != shape || *i >= w.len() {
                return Err(mismatch("mix", shape, x.shape()));
            }
            let wi = w[*i];
            if wi != 0.0 {
                for (o, &xv) in out.iter_mut().zip(x.data()) {
                    *o += wi * xv;
                }
            }
            item_idx.push(*i);
            parents.push(x.clone());
        }
        Ok(Var::from_op(Tensor::new(shape, out), Op::Mix { base: base_idx, items: item_idx }, parents))
    }

    /// Clamp at [`LOG_FLOOR`] and divide by the sum.
    pub fn normalize(&self) -> Var {
        let z: Vec<f64> = self.data().iter().map(|&x| x.max(LOG_FLOOR)).collect();
        let s: f64 = z.iter().sum();
        let t = Tensor::new(self.shape(), z.into_iter().map(|x| x / s).collect());
        Var::from_op(t, Op::Normalize, vec![self.clone()])
    }
}

pub fn phi_pwl(x: f64) -> f64 {
    (x + 0.5).clamp(0.0, 1.0)
}

fn add_into(acc: &mut HashMap<u64, Vec<f64>>, var: &Var, grad: Vec<f64>) {
    if !var.requires_grad() {
        return;
    }
    match acc.get_mut(&var.id()) {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(grad) {
                *a += b;
            }
        }
        None => {
            acc.insert(var.id(), grad);
        }
    }
}

/// Reverse sweep from a scalar `loss`; calls `sink` with every parameter
/// leaf reached and its accumulated gradient.
pub(crate) fn backward(loss: &Var, mut sink: impl FnMut(&str, Vec<f64>)) -> Result<()> {
    if loss.shape().len() != 1 {
        return Err(AutodiffError::NonScalarLoss(loss.shape()));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let mut seen = HashSet::new();
    let mut order: Vec<Var> = Vec::new();
    let mut stack = vec![loss.clone()];
    seen.insert(loss.id());
    while let Some(v) = stack.pop() {
        for p in &v.0.parents {
            if p.id() >= v.id() {
                return Err(AutodiffError::Cycle);
            }
            if p.requires_grad() && seen.insert(p.id()) {
                stack.push(p.clone());
            }
        }
        order.push(v);
    }
    order.sort_by_key(|v| std::cmp::Reverse(v.id()));

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for v in &order {
        let Some(g) = grads.remove(&v.id()) else { continue };
        if let Some(name) = &v.0.param {
            sink(name, g);
            continue;
        }
        propagate(v, &g, &mut grads);
    }
    Ok(())
}

fn propagate(v: &Var, g: &[f64], acc: &mut HashMap<u64, Vec<f64>>) {
    let node = &v.0;
    let ps = &node.parents;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            add_into(acc, &ps[0], g.to_vec());
            add_into(acc, &ps[1], g.to_vec());
        }
        Op::Sub => {
            add_into(acc, &ps[0], g.to_vec());
            add_into(acc, &ps[1], g.iter().map(|x| -x).collect());
        }
        Op::Hadamard => {
            let (a, b) = (ps[0].data(), ps[1].data());
            if ps[0].requires_grad() {
                add_into(acc, &ps[0], g.iter().zip(b).map(|(g, b)| g * b).collect());
            }
            if ps[1].requires_grad() {
                add_into(acc, &ps[1], g.iter().zip(a).map(|(g, a)| g * a).collect());
            }
        }
        Op::Scale => {
            let s = ps[0].item();
            let x = ps[1].data();
            if ps[0].requires_grad() {
                add_into(acc, &ps[0], vec![g.iter().zip(x).map(|(g, x)| g * x).sum()]);
            }
            if ps[1].requires_grad() {
                add_into(acc, &ps[1], g.iter().map(|g| g * s).collect());
            }
        }
        Op::ScaleConst(k) => add_into(acc, &ps[0], g.iter().map(|g| g * k).collect()),
        Op::AddConst | Op::Reshape => add_into(acc, &ps[0], g.to_vec()),
        Op::MatVec => {
            let (m, x) = (&ps[0], &ps[1]);
            let c = x.value().len();
            let md = m.data();
            if m.requires_grad() {
                let mut gm = vec![0.0; md.len()];
                for (i, &gi) in g.iter().enumerate() {
                    for (j, &xj) in x.data().iter().enumerate() {
                        gm[i * c + j] = gi * xj;
                    }
                }
                add_into(acc, m, gm);
            }
            if x.requires_grad() {
                let mut gx = vec![0.0; c];
                for (i, &gi) in g.iter().enumerate() {
                    for (j, o) in gx.iter_mut().enumerate() {
                        *o += md[i * c + j] * gi;
                    }
                }
                add_into(acc, x, gx);
            }
        }
        Op::VecMat => {
            let (x, m) = (&ps[0], &ps[1]);
            let c = g.len();
            let md = m.data();
            if x.requires_grad() {
                let gx = (0..x.value().len())
                    .map(|i| md[i * c..(i + 1) * c].iter().zip(g).map(|(a, b)| a * b).sum())
                    .collect();
                add_into(acc, x, gx);
            }
            if m.requires_grad() {
                let mut gm = vec![0.0; md.len()];
                for (i, &xi) in x.data().iter().enumerate() {
                    if xi != 0.0 {
                        for (o, &gj) in gm[i * c..(i + 1) * c].iter_mut().zip(g) {
                            *o = xi * gj;
                        }
                    }
                }
                add_into(acc, m, gm);
            }
        }
        Op::MatMul => {
            let (a, b) = (&ps[0], &ps[1]);
            let (r, k) = (a.value().rows(), a.value().cols());
            let c = b.value().cols();
            let (ad, bd) = (a.data(), b.data());
            if a.requires_grad() {
                let mut ga = vec![0.0; r * k];
                for i in 0..r {
                    for t in 0..k {
                        ga[i * k + t] = (0..c).map(|j| g[i * c + j] * bd[t * c + j]).sum();
                    }
                }
                add_into(acc, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; k * c];
                for t in 0..k {
                    for j in 0..c {
                        gb[t * c + j] = (0..r).map(|i| ad[i * k + t] * g[i * c + j]).sum();
                    }
                }
                add_into(acc, b, gb);
            }
        }
        Op::Outer => {
            let (a, b) = (&ps[0], &ps[1]);
            let c = b.value().len();
            if a.requires_grad() {
                let ga = (0..a.value().len())
                    .map(|i| g[i * c..(i + 1) * c].iter().zip(b.data()).map(|(g, b)| g * b).sum())
                    .collect();
                add_into(acc, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; c];
                for (i, &ai) in a.data().iter().enumerate() {
                    for (o, &gij) in gb.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *o += gij * ai;
                    }
                }
                add_into(acc, b, gb);
            }
        }
        Op::Concat => {
            let mut off = 0;
            for p in ps {
                let n = p.value().len();
                add_into(acc, p, g[off..off + n].to_vec());
                off += n;
            }
        }
        Op::Slice { start } => {
            let mut gx = vec![0.0; ps[0].value().len()];
            gx[*start..start + g.len()].copy_from_slice(g);
            add_into(acc, &ps[0], gx);
        }
        Op::Softmax => {
            let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
            add_into(acc, &ps[0], y.iter().zip(g).map(|(y, g)| y * (g - dot)).collect());
        }
        Op::Sigmoid => add_into(acc, &ps[0], y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect()),
        Op::Tanh => add_into(acc, &ps[0], y.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect()),
        Op::Log => {
            let x = ps[0].data();
            add_into(acc, &ps[0], x.iter().zip(g).map(|(&x, g)| if x > LOG_FLOOR { g / x } else { 0.0 }).collect());
        }
        Op::Sum => add_into(acc, &ps[0], vec![g[0]; ps[0].value().len()]),
        Op::Dot => {
            let (a, b) = (&ps[0], &ps[1]);
            if a.requires_grad() {
                add_into(acc, a, b.data().iter().map(|x| x * g[0]).collect());
            }
            if b.requires_grad() {
                add_into(acc, b, a.data().iter().map(|x| x * g[0]).collect());
            }
        }
        Op::DotConst(w) => add_into(acc, &ps[0], w.iter().map(|x| x * g[0]).collect()),
        Op::Scatter(pairs) => {
            let mut gx = vec![0.0; ps[0].value().len()];
            for &(s, d) in pairs.iter() {
                gx[s] += g[d];
            }
            add_into(acc, &ps[0], gx);
        }
        Op::Write => {
            let (m, x, a) = (&ps[0], &ps[1], &ps[2]);
            let c = x.value().len();
            let (md, xd, ad) = (m.data(), x.data(), a.data());
            if m.requires_grad() {
                let mut gm = g.to_vec();
                for (i, &ai) in ad.iter().enumerate() {
                    if ai != 0.0 {
                        for o in &mut gm[i * c..(i + 1) * c] {
                            *o *= 1.0 - ai;
                        }
                    }
                }
                add_into(acc, m, gm);
            }
            if x.requires_grad() {
                let mut gx = vec![0.0; c];
                for (i, &ai) in ad.iter().enumerate() {
                    if ai != 0.0 {
                        for (o, &gij) in gx.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *o += gij * ai;
                        }
                    }
                }
                add_into(acc, x, gx);
            }
            if a.requires_grad() {
                let ga = (0..ad.len()).map(|i| (0..c).map(|j| g[i * c + j] * (xd[j] - md[i * c + j])).sum()).collect();
                add_into(acc, a, ga);
            }
        }
        Op::Table { table, n } => {
            let n = *n;
            let (a, b) = (&ps[0], &ps[1]);
            let (ad, bd) = (a.data(), b.data());
            if a.requires_grad() {
                let ga = (0..n).map(|i| (0..n).map(|j| g[table[i * n + j]] * bd[j]).sum()).collect();
                add_into(acc, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; n];
                for i in 0..n {
                    if ad[i] != 0.0 {
                        for (j, o) in gb.iter_mut().enumerate() {
                            *o += g[table[i * n + j]] * ad[i];
                        }
                    }
                }
                add_into(acc, b, gb);
            }
        }
        Op::TwoPoint { on, off } => add_into(acc, &ps[0], vec![g[*on] - g[*off]]),
        Op::Pwl => {
            let x = ps[0].data();
            add_into(
                acc,
                &ps[0],
                x.iter().zip(g).map(|(&x, g)| if x + 0.5 > 0.0 && x + 0.5 < 1.0 { *g } else { 0.0 }).collect(),
            );
        }
        Op::Mix { base, items } => {
            let w = &ps[0];
            let wd = w.data();
            let mut gw = vec![0.0; wd.len()];
            let mut k = 1;
            if let Some(idx) = base {
                let b = &ps[1];
                let s: f64 = idx.iter().map(|&i| wd[i]).sum();
                let inner: f64 = g.iter().zip(b.data()).map(|(g, x)| g * x).sum();
                for &i in idx {
                    gw[i] += inner;
                }
                if b.requires_grad() {
                    add_into(acc, b, g.iter().map(|g| g * s).collect());
                }
                k = 2;
            }
            for (x, &i) in ps[k..].iter().zip(items) {
                gw[i] += g.iter().zip(x.data()).map(|(g, x)| g * x).sum::<f64>();
                if x.requires_grad() {
                    let wi = wd[i];
                    add_into(acc, x, g.iter().map(|g| g * wi).collect());
                }
            }
            if w.requires_grad() {
                add_into(acc, w, gw);
            }
        }
        Op::Normalize => {
            let x = ps[0].data();
            let s: f64 = x.iter().map(|&x| x.max(LOG_FLOOR)).sum();
            let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
            add_into(
                acc,
                &ps[0],
                x.iter().zip(g).map(|(&x, g)| if x > LOG_FLOOR { (g - dot) / s } else { 0.0 }).collect(),
            );
        }
    }
}
