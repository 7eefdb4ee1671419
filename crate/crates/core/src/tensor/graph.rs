use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Abs(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so insertion order is a valid
/// topological order and [`Graph::backward`] simply walks it in reverse.
/// A graph is confined to one thread; build one per sample.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.index
    }

    fn needs(&self, idx: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        idx.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers parameter `id` once per graph; later calls return the same node.
    pub fn param(&self, id: usize, value: &Tensor) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param(id), true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Makes later `param(id, ..)` calls return `v` instead of a fresh node.
    /// Used to differentiate with respect to a single parameter.
    pub fn bind_param(&self, id: usize, v: Var) {
        self.check(v);
        self.params.borrow_mut().insert(id, v);
    }

    pub fn value(&self, v: Var) -> Tensor {
        let i = self.check(v);
        self.nodes.borrow()[i].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let i = self.check(v);
        f(&self.nodes.borrow()[i].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |t| t.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> f64 {
        self.with_value(v, |t| t.data()[0])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.matmul(&nodes[ib].value)?
        };
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[ia].value;
            let (r, c) = x.as_matrix("transpose")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        let rg = self.needs(&[ia]);
        Ok(self.push(value, Op::Transpose(ia), rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize, usize)> {
        let (ia, ib) = (self.check(a), self.check(b));
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[ia].value, &nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(Error::Dimension {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok((Tensor::new(x.shape().to_vec(), data)?, ia, ib))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(t, Op::Add(ia, ib), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip_same("sub", a, b, |p, q| p - q)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(t, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(t, Op::Mul(ia, ib), rg))
    }

    /// `x[.., n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x), self.check(bias));
        let value = {
            let nodes = self.nodes.borrow();
            let (xt, bt) = (&nodes[ix].value, &nodes[ib].value);
            let n = xt.last_dim();
            if bt.len() != n {
                return Err(Error::Dimension {
                    op: "add_row",
                    lhs: xt.shape().to_vec(),
                    rhs: bt.shape().to_vec(),
                });
            }
            let mut data = xt.data().to_vec();
            for row in data.chunks_mut(n.max(1)) {
                for (v, &b) in row.iter_mut().zip(bt.data()) {
                    *v += b;
                }
            }
            Tensor::new(xt.shape().to_vec(), data)?
        };
        let rg = self.needs(&[ix, ib]);
        Ok(self.push(value, Op::AddRow(ix, ib), rg))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ix].value;
            Tensor {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| f(v)).collect(),
            }
        };
        let rg = self.needs(&[ix]);
        self.push(value, op(ix), rg)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, |ix| Op::Scale(ix, c))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu)
    }

    /// Elementwise |x|. The derivative at exactly 0 is reported as NaN.
    pub fn abs(&self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs)
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x), self.check(gamma), self.check(beta));
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xt, gt, bt) = (&nodes[ix].value, &nodes[ig].value, &nodes[ib].value);
            let d = xt.last_dim();
            if d < 2 || gt.len() != d || bt.len() != d {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: xt.shape().to_vec(),
                    rhs: gt.shape().to_vec(),
                });
            }
            let rows = xt.rows();
            let mut out = vec![0.0; xt.len()];
            let mut xhat = vec![0.0; xt.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = xt.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gt.data()[j] + bt.data()[j];
                }
            }
            (Tensor::new(xt.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.needs(&[ix, ig, ib]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax after adding `mask` (entries 0 or `-inf`).
    ///
    /// `mask` may have the shape of `x` or a single row broadcast over all rows.
    pub fn softmax_masked(&self, x: Var, mask: &Tensor) -> Result<Var> {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            softmax_rows(&nodes[ix].value, Some(mask))?
        };
        let rg = self.needs(&[ix]);
        Ok(self.push(value, Op::Softmax(ix), rg))
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            softmax_rows(&nodes[ix].value, None)?
        };
        let rg = self.needs(&[ix]);
        Ok(self.push(value, Op::Softmax(ix), rg))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ix].value;
            let (r, c) = t.as_matrix("slice_cols")?;
            if start + len > c {
                return Err(Error::Dimension {
                    op: "slice_cols",
                    lhs: t.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], out)?
        };
        let rg = self.needs(&[ix]);
        Ok(self.push(value, Op::SliceCols { x: ix, start }, rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let mut rows = None;
            let mut widths = Vec::with_capacity(idx.len());
            for &i in &idx {
                let (r, c) = nodes[i].value.as_matrix("concat_cols")?;
                if *rows.get_or_insert(r) != r {
                    return Err(Error::Dimension {
                        op: "concat_cols",
                        lhs: nodes[idx[0]].value.shape().to_vec(),
                        rhs: nodes[i].value.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let r = rows.unwrap_or(0);
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(r * total);
            for row in 0..r {
                for (&i, &w) in idx.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[i].value.data()[row * w..(row + 1) * w]);
                }
            }
            Tensor::new(vec![r, total], out)?
        };
        let rg = self.needs(&idx);
        Ok(self.push(value, Op::ConcatCols(idx), rg))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        if idx.is_empty() {
            return Err(Error::contract("concat_rows of zero tensors"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[idx[0]].value.as_matrix("concat_rows")?.1;
            let mut rows = 0;
            let mut out = Vec::new();
            for &i in &idx {
                let (r, c) = nodes[i].value.as_matrix("concat_rows")?;
                if c != cols {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: nodes[idx[0]].value.shape().to_vec(),
                        rhs: nodes[i].value.shape().to_vec(),
                    });
                }
                rows += r;
                out.extend_from_slice(nodes[i].value.data());
            }
            Tensor::new(vec![rows, cols], out)?
        };
        let rg = self.needs(&idx);
        Ok(self.push(value, Op::ConcatRows(idx), rg))
    }

    /// Selects rows of a matrix (indices may repeat).
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ix].value;
            let (r, c) = t.as_matrix("gather_rows")?;
            let mut out = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= r {
                    return Err(Error::Dimension {
                        op: "gather_rows",
                        lhs: t.shape().to_vec(),
                        rhs: vec![i],
                    });
                }
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(vec![indices.len(), c], out)?
        };
        let rg = self.needs(&[ix]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x: ix,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let ix = self.check(x);
        let s = self.with_value(x, |t| t.data().iter().sum::<f64>());
        let rg = self.needs(&[ix]);
        self.push(Tensor::scalar(s), Op::Sum(ix), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let ix = self.check(x);
        let s = self.with_value(x, |t| t.data().iter().sum::<f64>() / t.len().max(1) as f64);
        let rg = self.needs(&[ix]);
        self.push(Tensor::scalar(s), Op::Mean(ix), rg)
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    ///
    /// Every gradient-requiring leaf gets an entry, zero when the loss does
    /// not depend on it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id {
            return Err(Error::contract("loss is not on this graph"));
        }
        let nodes = self.nodes.into_inner();
        if nodes[loss.index].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.index].requires_grad {
            grads[loss.index] = Some(vec![1.0]);
        }
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[*a].value.as_matrix("matmul")?;
                    let n = nodes[*b].value.last_dim();
                    let bv = nodes[*b].value.data();
                    accumulate(&mut grads, &nodes, *a, |d| kernels::matmul_nt(&g, bv, m, n, k, d));
                    let av = nodes[*a].value.data();
                    accumulate(&mut grads, &nodes, *b, |d| kernels::matmul_tn(av, &g, k, m, n, d));
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[*a].value.as_matrix("transpose")?;
                    accumulate(&mut grads, &nodes, *a, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, &nodes, *a, &g, 1.0);
                    add_into(&mut grads, &nodes, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, &nodes, *a, &g, 1.0);
                    add_into(&mut grads, &nodes, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    accumulate(&mut grads, &nodes, *a, |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += g * y;
                        }
                    });
                    accumulate(&mut grads, &nodes, *b, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(&g).zip(av) {
                            *d += g * x;
                        }
                    });
                }
                Op::AddRow(x, b) => {
                    add_into(&mut grads, &nodes, *x, &g, 1.0);
                    let n = nodes[*b].value.len();
                    accumulate(&mut grads, &nodes, *b, |d| {
                        for row in g.chunks(n.max(1)) {
                            for (d, &v) in d.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Scale(x, c) => add_into(&mut grads, &nodes, *x, &g, *c),
                Op::Gelu(x) => {
                    let xv = nodes[*x].value.data();
                    accumulate(&mut grads, &nodes, *x, |d| {
                        for ((d, &g), &v) in d.iter_mut().zip(&g).zip(xv) {
                            *d += g * gelu_grad(v);
                        }
                    });
                }
                Op::Abs(x) => {
                    let xv = nodes[*x].value.data();
                    accumulate(&mut grads, &nodes, *x, |d| {
                        for ((d, &g), &v) in d.iter_mut().zip(&g).zip(xv) {
                            let s = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                f64::NAN
                            };
                            *d += g * s;
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = nodes[*gamma].value.data();
                    let dim = gv.len();
                    accumulate(&mut grads, &nodes, *x, |d| {
                        let mut dxhat = vec![0.0; dim];
                        for (r, &is) in inv_std.iter().enumerate() {
                            let gr = &g[r * dim..(r + 1) * dim];
                            let hr = &xhat[r * dim..(r + 1) * dim];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..dim {
                                dxhat[j] = gr[j] * gv[j];
                                mean_dh += dxhat[j];
                                mean_dh_h += dxhat[j] * hr[j];
                            }
                            mean_dh /= dim as f64;
                            mean_dh_h /= dim as f64;
                            let dr = &mut d[r * dim..(r + 1) * dim];
                            for j in 0..dim {
                                dr[j] += is * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                    accumulate(&mut grads, &nodes, *gamma, |d| {
                        for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for j in 0..dim {
                                d[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    accumulate(&mut grads, &nodes, *beta, |d| {
                        for gr in g.chunks(dim) {
                            for j in 0..dim {
                                d[j] += gr[j];
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let n = y.last_dim();
                    accumulate(&mut grads, &nodes, *x, |d| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                d[r * n + j] += yr[j] * (gr[j] - s);
                            }
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[*x].value.last_dim();
                    let len = node.value.last_dim();
                    accumulate(&mut grads, &nodes, *x, |d| {
                        for (r, gr) in g.chunks(len.max(1)).enumerate() {
                            for (j, &v) in gr.iter().enumerate() {
                                d[r * c + start + j] += v;
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.last_dim();
                        accumulate(&mut grads, &nodes, p, |d| {
                            for (r, dr) in d.chunks_mut(w.max(1)).enumerate() {
                                for (j, dv) in dr.iter_mut().enumerate() {
                                    *dv += g[r * total + offset + j];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        let slice = &g[offset..offset + len];
                        add_into(&mut grads, &nodes, p, slice, 1.0);
                        offset += len;
                    }
                }
                Op::GatherRows { x, indices } => {
                    let c = node.value.last_dim();
                    accumulate(&mut grads, &nodes, *x, |d| {
                        for (r, &src) in indices.iter().enumerate() {
                            for j in 0..c {
                                d[src * c + j] += g[r * c + j];
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    accumulate(&mut grads, &nodes, *x, |d| d.iter_mut().for_each(|v| *v += g0));
                }
                Op::Mean(x) => {
                    let n = nodes[*x].value.len().max(1) as f64;
                    let g0 = g[0] / n;
                    accumulate(&mut grads, &nodes, *x, |d| d.iter_mut().for_each(|v| *v += g0));
                }
            }
        }

        let mut leaves = Vec::new();
        let mut params = Vec::new();
        for (i, node) in nodes.into_iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
            let t = Tensor { shape, data };
            match node.op {
                Op::Leaf => leaves.push((i, t)),
                Op::Param(id) => params.push((id, t)),
                _ => {}
            }
        }
        Ok(Gradients { leaves, params })
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    idx: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[idx].requires_grad {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
    f(slot);
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, g: &[f64], c: f64) {
    accumulate(grads, nodes, idx, |d| {
        for (d, &v) in d.iter_mut().zip(g) {
            *d += c * v;
        }
    });
}

fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let n = x.last_dim();
    if let Some(m) = mask {
        if m.shape() != x.shape() && m.len() != n {
            return Err(Error::Dimension {
                op: "softmax_masked",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let mrow = mask.map(|m| if m.len() == n { m.data() } else { m.row(r) });
        let biased = |j: usize| match mrow {
            Some(mr) => row[j] + mr[j],
            None => row[j],
        };
        let max = (0..n).map(biased).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let o = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for (j, oj) in o.iter_mut().enumerate() {
            let b = biased(j);
            *oj = if b == f64::NEG_INFINITY {
                0.0
            } else {
                (b - max).exp()
            };
            total += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
    params: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient for a [`Graph::leaf`] variable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(i, _)| *i == v.index)
            .map(|(_, t)| t)
    }

    /// Gradients keyed by parameter id, in registration order.
    pub fn params(&self) -> &[(usize, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(usize, Tensor)> {
        self.params
    }

    /// All reported gradients keyed by node id.
    pub fn by_node(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.leaves.iter().map(|(i, t)| (*i, t))
    }
}
