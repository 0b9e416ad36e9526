//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns a
//! [`Gradients`] table that can be folded into a [`ParamStore`]. A graph is
//! built for one forward pass and then dropped; workers that run in parallel
//! each own a private graph.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{ParamStore, Tensor};
use crate::error::{DvamError, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Masking value used in place of negative infinity before a softmax.
pub const NEG_INF: f64 = -1e30;

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    graph: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat { parts: Vec<usize>, axis: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    Pick { src: usize, idx: Vec<usize> },
    Sum(usize),
    Mean(usize),
    SumAxis { src: usize, axis: usize },
    Reshape(usize),
    Slice { src: usize, axis: usize, start: usize },
    StopGrad,
    StraightThrough { hidden: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
    param_order: RefCell<Vec<(String, usize)>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast input.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - inp.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + offset] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..n).rev() {
            counter[d] += 1;
            pos += strides[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            param_order: RefCell::new(Vec::new()),
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(
            v.graph, self.id,
            "graph integrity: variable belongs to graph {} but was used in graph {}",
            v.graph, self.id
        );
        v.idx
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            idx: nodes.len() - 1,
            graph: self.id,
        }
    }

    fn node(&self, idx: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[idx])
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&self, shape: &[usize], value: Vec<f64>) -> Var {
        assert_eq!(numel(shape), value.len(), "constant shape/data mismatch");
        self.push(shape.to_vec(), value, Op::Leaf, false)
    }

    pub fn constant_tensor(&self, t: &Tensor) -> Var {
        self.constant(t.shape(), t.data().to_vec())
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(&[1], vec![v])
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&self, shape: &[usize], value: Vec<f64>) -> Var {
        assert_eq!(numel(shape), value.len(), "variable shape/data mismatch");
        self.push(shape.to_vec(), value, Op::Leaf, true)
    }

    /// Named leaf. Repeated calls with the same name return the same node.
    pub fn leaf(&self, name: &str, t: &Tensor, requires_grad: bool) -> Var {
        if let Some(&idx) = self.params.borrow().get(name) {
            return Var {
                idx,
                graph: self.id,
            };
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad);
        self.params.borrow_mut().insert(name.to_string(), v.idx);
        self.param_order.borrow_mut().push((name.to_string(), v.idx));
        v
    }

    /// Leaf for the parameter `name` of `store`.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var {
        let t = store.expect(name);
        self.leaf(name, t, t.requires_grad)
    }

    // ---- inspection ---------------------------------------------------

    pub fn value(&self, v: Var) -> Vec<f64> {
        let i = self.check(v);
        self.node(i).value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        let i = self.check(v);
        f(&self.node(i).value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        let i = self.check(v);
        self.node(i).shape.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let i = self.check(v);
        let n = self.node(i);
        assert_eq!(n.value.len(), 1, "scalar_value on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let i = self.check(v);
        let n = self.node(i);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (value, m, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[ia], &nodes[ib]);
            assert!(
                na.shape.len() == 2 && nb.shape.len() == 2 && na.shape[1] == nb.shape[0],
                "matmul shapes {:?} x {:?}",
                na.shape,
                nb.shape
            );
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            (matmul_raw(&na.value, &nb.value, m, k, n), m, n)
        };
        let ng = self.needs(ia) || self.needs(ib);
        self.push(vec![m, n], value, Op::MatMul(ia, ib), ng)
    }

    /// Applies `x W + b` over the last axis of `x` (any rank).
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let inner = *xs.last().unwrap();
        let rows = numel(&xs) / inner;
        let flat = self.reshape(x, &[rows, inner]);
        let mut y = self.matmul(flat, w);
        if let Some(b) = b {
            y = self.add(y, b);
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(ws[1]);
        self.reshape(y, &out_shape)
    }

    // ---- elementwise --------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[ia], &nodes[ib]);
            if na.shape == nb.shape {
                let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
                (na.shape.clone(), v)
            } else {
                let out = broadcast_shape(&na.shape, &nb.shape).unwrap_or_else(|| {
                    panic!("cannot broadcast {:?} with {:?}", na.shape, nb.shape)
                });
                let ma = broadcast_map(&out, &na.shape);
                let mb = broadcast_map(&out, &nb.shape);
                let v = ma
                    .iter()
                    .zip(&mb)
                    .map(|(&i, &j)| f(na.value[i], nb.value[j]))
                    .collect();
                (out, v)
            }
        };
        let ng = self.needs(ia) || self.needs(ib);
        self.push(shape, value, mk(ia, ib), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, |i| Op::Scale(i, s))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, mk: impl FnOnce(usize) -> Op) -> Var {
        let ia = self.check(a);
        let (shape, value) = {
            let n = self.node(ia);
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        let ng = self.needs(ia);
        self.push(shape, value, mk(ia), ng)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let ia = self.check(a);
        let (shape, value) = {
            let n = self.node(ia);
            let w = *n.shape.last().unwrap();
            (n.shape.clone(), softmax_rows(&n.value, w))
        };
        let ng = self.needs(ia);
        self.push(shape, value, Op::Softmax(ia), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let ia = self.check(a);
        let (shape, value) = {
            let n = self.node(ia);
            let w = *n.shape.last().unwrap();
            (n.shape.clone(), log_softmax_rows(&n.value, w))
        };
        let ng = self.needs(ia);
        self.push(shape, value, Op::LogSoftmax(ia), ng)
    }

    // ---- structure ----------------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[idx[0]].shape;
            assert!(axis < first.len(), "concat axis {axis} for rank {}", first.len());
            let mut shape = first.clone();
            shape[axis] = 0;
            for &i in &idx {
                let s = &nodes[i].shape;
                assert!(
                    s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(d, (x, y))| d == axis || x == y),
                    "concat shapes {:?} vs {:?} on axis {axis}",
                    s,
                    first
                );
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut value = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for &i in &idx {
                    let n = &nodes[i];
                    let block = n.shape[axis] * inner;
                    value.extend_from_slice(&n.value[o * block..(o + 1) * block]);
                }
            }
            (shape, value)
        };
        let ng = idx.iter().any(|&i| self.needs(i));
        self.push(shape, value, Op::Concat { parts: idx, axis }, ng)
    }

    /// Rows `ids` of a `[V, E]` table, giving `[ids.len(), E]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let it = self.check(table);
        let (shape, value) = {
            let n = self.node(it);
            assert_eq!(n.shape.len(), 2, "gather_rows needs a matrix");
            let (v, e) = (n.shape[0], n.shape[1]);
            let mut value = Vec::with_capacity(ids.len() * e);
            for &id in ids {
                assert!(id < v, "row {id} out of range for table of {v} rows");
                value.extend_from_slice(&n.value[id * e..(id + 1) * e]);
            }
            (vec![ids.len(), e], value)
        };
        let ng = self.needs(it);
        self.push(
            shape,
            value,
            Op::GatherRows {
                table: it,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// For `src` of shape `[..., V]`, selects one entry per leading row.
    pub fn pick(&self, src: Var, idx: &[usize]) -> Var {
        let is = self.check(src);
        let (shape, value) = {
            let n = self.node(is);
            let w = *n.shape.last().unwrap();
            let rows = n.value.len() / w;
            assert_eq!(rows, idx.len(), "pick needs one index per row");
            let value = idx
                .iter()
                .enumerate()
                .map(|(r, &k)| {
                    assert!(k < w, "pick index {k} out of range {w}");
                    n.value[r * w + k]
                })
                .collect();
            let mut shape = n.shape[..n.shape.len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, value)
        };
        let ng = self.needs(is);
        self.push(
            shape,
            value,
            Op::Pick {
                src: is,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let ia = self.check(a);
        let s = self.node(ia).value.iter().sum();
        let ng = self.needs(ia);
        self.push(vec![1], vec![s], Op::Sum(ia), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let ia = self.check(a);
        let m = {
            let n = self.node(ia);
            n.value.iter().sum::<f64>() / n.value.len() as f64
        };
        let ng = self.needs(ia);
        self.push(vec![1], vec![m], Op::Mean(ia), ng)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let ia = self.check(a);
        let (shape, value) = {
            let n = self.node(ia);
            assert!(axis < n.shape.len());
            let (outer, len, inner) = split_axis(&n.shape, axis);
            let mut value = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        value[o * inner + i] += n.value[base + i];
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, value)
        };
        let ng = self.needs(ia);
        self.push(shape, value, Op::SumAxis { src: ia, axis }, ng)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let ia = self.check(a);
        let value = {
            let n = self.node(ia);
            assert_eq!(
                numel(&n.shape),
                numel(shape),
                "reshape {:?} -> {:?}",
                n.shape,
                shape
            );
            n.value.clone()
        };
        let ng = self.needs(ia);
        self.push(shape.to_vec(), value, Op::Reshape(ia), ng)
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let ia = self.check(a);
        let (shape, value) = {
            let n = self.node(ia);
            assert!(axis < n.shape.len() && start < end && end <= n.shape[axis]);
            let (outer, len, inner) = split_axis(&n.shape, axis);
            let mut value = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                value.extend_from_slice(&n.value[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = end - start;
            (shape, value)
        };
        let ng = self.needs(ia);
        self.push(shape, value, Op::Slice { src: ia, axis, start }, ng)
    }

    /// Identity forward; no gradient flows back.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let ia = self.check(a);
        let (shape, value) = {
            let n = self.node(ia);
            (n.shape.clone(), n.value.clone())
        };
        self.push(shape, value, Op::StopGrad, false)
    }

    /// Forward value of `quantized`, gradient copied straight to `hidden`.
    ///
    /// Equivalent to `hidden + stop_gradient(quantized - hidden)` except that
    /// the forward value is `quantized` bit for bit.
    pub fn straight_through(&self, hidden: Var, quantized: Var) -> Var {
        let (ih, iq) = (self.check(hidden), self.check(quantized));
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[ih].shape, nodes[iq].shape,
                "straight_through shape mismatch"
            );
            (nodes[iq].shape.clone(), nodes[iq].value.clone())
        };
        let ng = self.needs(ih);
        self.push(shape, value, Op::StraightThrough { hidden: ih }, ng)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id {
            return Err(DvamError::GraphIntegrity(format!(
                "loss belongs to graph {}, not {}",
                loss.graph, self.id
            )));
        }
        let nodes = self.nodes.borrow();
        let root = loss.idx;
        if root >= nodes.len() {
            return Err(DvamError::GraphIntegrity(format!("dangling node {root}")));
        }
        if nodes[root].value.len() != 1 {
            return Err(DvamError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |j: usize, f: &dyn Fn(&mut [f64])| {
                if nodes[j].needs_grad {
                    let buf = lo[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                    acc(*a, &|ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &nb.value[p * n..(p + 1) * n];
                                ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    acc(*b, &|gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = na.value[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (gv, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *gv += av * x;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let same_a = na.shape == node.shape;
                    let same_b = nb.shape == node.shape;
                    let ma = (!same_a).then(|| broadcast_map(&node.shape, &na.shape));
                    let mb = (!same_b).then(|| broadcast_map(&node.shape, &nb.shape));
                    let ia = |t: usize| ma.as_ref().map_or(t, |m| m[t]);
                    let ib = |t: usize| mb.as_ref().map_or(t, |m| m[t]);
                    match &node.op {
                        Op::Add(..) => {
                            acc(*a, &|ga| g.iter().enumerate().for_each(|(t, x)| ga[ia(t)] += x));
                            acc(*b, &|gb| g.iter().enumerate().for_each(|(t, x)| gb[ib(t)] += x));
                        }
                        Op::Sub(..) => {
                            acc(*a, &|ga| g.iter().enumerate().for_each(|(t, x)| ga[ia(t)] += x));
                            acc(*b, &|gb| g.iter().enumerate().for_each(|(t, x)| gb[ib(t)] -= x));
                        }
                        Op::Div(..) => {
                            acc(*a, &|ga| {
                                g.iter()
                                    .enumerate()
                                    .for_each(|(t, x)| ga[ia(t)] += x / nb.value[ib(t)])
                            });
                            acc(*b, &|gb| {
                                g.iter().enumerate().for_each(|(t, x)| {
                                    let d = nb.value[ib(t)];
                                    gb[ib(t)] -= x * na.value[ia(t)] / (d * d)
                                })
                            });
                        }
                        _ => {
                            acc(*a, &|ga| {
                                g.iter()
                                    .enumerate()
                                    .for_each(|(t, x)| ga[ia(t)] += x * nb.value[ib(t)])
                            });
                            acc(*b, &|gb| {
                                g.iter()
                                    .enumerate()
                                    .for_each(|(t, x)| gb[ib(t)] += x * na.value[ia(t)])
                            });
                        }
                    }
                }
                Op::Scale(a, s) => acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x)),
                Op::Sigmoid(a) => acc(*a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * y * (1.0 - y);
                    }
                }),
                Op::Tanh(a) => acc(*a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * (1.0 - y * y);
                    }
                }),
                Op::Exp(a) => acc(*a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * y;
                    }
                }),
                Op::Log(a) => acc(*a, &|ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(&nodes[*a].value) {
                        *o += x / v;
                    }
                }),
                Op::Softplus(a) => acc(*a, &|ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(&nodes[*a].value) {
                        *o += x * sigmoid(*v);
                    }
                }),
                Op::Softmax(a) => {
                    let w = *node.shape.last().unwrap();
                    acc(*a, &|ga| {
                        for ((o, gr), y) in ga.chunks_mut(w).zip(g.chunks(w)).zip(node.value.chunks(w)) {
                            let dot: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                            for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(y) {
                                *oi += yi * (gi - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let w = *node.shape.last().unwrap();
                    acc(*a, &|ga| {
                        for ((o, gr), y) in ga.chunks_mut(w).zip(g.chunks(w)).zip(node.value.chunks(w)) {
                            let total: f64 = gr.iter().sum();
                            for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(y) {
                                *oi += gi - yi.exp() * total;
                            }
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = split_axis(&node.shape, *axis);
                    let mut offset = 0;
                    let row = node.shape[*axis] * inner;
                    for &p in parts {
                        let block = nodes[p].shape[*axis] * inner;
                        acc(p, &|gp| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + block];
                                for (d, s) in gp[o * block..(o + 1) * block].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                        offset += block;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let e = nodes[*table].shape[1];
                    acc(*table, &|gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (d, s) in gt[id * e..(id + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                                *d += s;
                            }
                        }
                    });
                }
                Op::Pick { src, idx } => {
                    let w = *nodes[*src].shape.last().unwrap();
                    acc(*src, &|gs| {
                        for (r, &k) in idx.iter().enumerate() {
                            gs[r * w + k] += g[r];
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &|ga| ga.iter_mut().for_each(|o| *o += g[0])),
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    acc(*a, &|ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
                }
                Op::SumAxis { src, axis } => {
                    let (outer, len, inner) = split_axis(&nodes[*src].shape, *axis);
                    acc(*src, &|gs| {
                        for o in 0..outer {
                            for k in 0..len {
                                let base = (o * len + k) * inner;
                                for i in 0..inner {
                                    gs[base + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::Reshape(a) | Op::StraightThrough { hidden: a } => {
                    acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x))
                }
                Op::Slice { src, axis, start } => {
                    let (outer, len, inner) = split_axis(&nodes[*src].shape, *axis);
                    let width = node.shape[*axis] * inner;
                    acc(*src, &|gs| {
                        for o in 0..outer {
                            let dst = &mut gs[(o * len + start) * inner..(o * len + start) * inner + width];
                            for (d, s) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                                *d += s;
                            }
                        }
                    });
                }
            }
        }

        Ok(Gradients {
            graph: self.id,
            grads,
            named: self.param_order.borrow().clone(),
        })
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    named: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient of a named leaf.
    pub fn named(&self, name: &str) -> Option<&[f64]> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, i)| self.grads.get(*i).and_then(|g| g.as_deref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.iter().map(|(n, _)| n.as_str())
    }

    /// Adds the gradient of every named leaf that `store` marks trainable.
    /// Leaves that received nothing contribute zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, idx) in &self.named {
            let Some(t) = store.get_mut(name) else { continue };
            if !t.requires_grad {
                continue;
            }
            match self.grads.get(*idx).and_then(|g| g.as_deref()) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    if t.grad().is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
        Ok(())
    }
}
