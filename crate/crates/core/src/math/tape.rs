//! Reverse-mode differentiation over batched tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes only ever
//! reference earlier nodes, so walking the node list backwards is a valid
//! reverse topological order. Binary element-wise primitives broadcast along
//! any axis of length one.

use std::collections::HashMap;

use super::tensor::{matmul_raw, Tensor};
use crate::error::{HvpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Square(Var),
    SumCols(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    Clip(Var, f64, f64),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Single-threaded recording of one computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(HvpError::Dimension(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = broadcast_shape(a, b)?;
    if a.rows() == r && a.cols() == c && b.rows() == r && b.cols() == c {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_rows(r, c, data));
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(at(a, i, j), at(b, i, j)));
        }
    }
    Ok(Tensor::from_rows(r, c, out))
}

#[inline]
fn at(t: &Tensor, i: usize, j: usize) -> f64 {
    let ii = if t.rows() == 1 { 0 } else { i };
    let jj = if t.cols() == 1 { 0 } else { j };
    t.data()[ii * t.cols() + jj]
}

/// Sums a broadcast gradient back down to `rows x cols`.
fn reduce_to(g: &Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows() == rows && g.cols() == cols {
        return g.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let ii = if rows == 1 { 0 } else { i };
            let jj = if cols == 1 { 0 } else { j };
            out.data_mut()[ii * cols + jj] += g.get(i, j);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a leaf that is not a named parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a trainable parameter. Binding the same name twice returns the
    /// first node, so a network reused across steps shares one leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.push(Op::Param(name.to_string()), t.clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Binds a frozen tensor under a name (no gradient is reported for it).
    pub fn frozen(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.constant(t.clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let data = t.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let out = Tensor::from_rows(t.rows(), 1, data);
        self.push(Op::SumCols(a), out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), out)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row squared norm: `[n, m] -> [n, 1]`.
    pub fn row_norm_sq(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum_cols(sq)
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - mx).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= z;
            }
        }
        let out = Tensor::from_rows(t.rows(), c, data);
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clip(a, lo, hi), out)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(HvpError::Dimension("concat row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::from_rows(rows, cols, data);
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    /// Reverse sweep from a `[1, 1]` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(HvpError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                ov.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::filled(ov.rows(), ov.cols(), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let bt = bv.transpose();
                    let ga = matmul_raw(g.data(), bt.data(), n, m, k);
                    accumulate(&mut grads, *a, Tensor::from_rows(n, k, ga));
                    let at = av.transpose();
                    let gb = matmul_raw(at.data(), g.data(), k, n, m);
                    accumulate(&mut grads, *b, Tensor::from_rows(k, m, gb));
                }
                Op::Add(a, b) => {
                    let (ar, ac) = (self.value(*a).rows(), self.value(*a).cols());
                    let (br, bc) = (self.value(*b).rows(), self.value(*b).cols());
                    accumulate(&mut grads, *a, reduce_to(&g, ar, ac));
                    accumulate(&mut grads, *b, reduce_to(&g, br, bc));
                }
                Op::Sub(a, b) => {
                    let (ar, ac) = (self.value(*a).rows(), self.value(*a).cols());
                    let (br, bc) = (self.value(*b).rows(), self.value(*b).cols());
                    accumulate(&mut grads, *a, reduce_to(&g, ar, ac));
                    accumulate(&mut grads, *b, reduce_to(&g.map(|x| -x), br, bc));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = broadcast_zip(&g, bv, |x, y| x * y)?;
                    let gb = broadcast_zip(&g, av, |x, y| x * y)?;
                    accumulate(&mut grads, *a, reduce_to(&ga, av.rows(), av.cols()));
                    accumulate(&mut grads, *b, reduce_to(&gb, bv.rows(), bv.cols()));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Silu(a) => {
                    let d = zip_same(&g, self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = zip_same(&g, self.value(*a), |gv, x| 2.0 * gv * x);
                    accumulate(&mut grads, *a, d);
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let data = (0..av.len()).map(|i| g.data()[i / c]).collect();
                    accumulate(&mut grads, *a, Tensor::from_rows(av.rows(), c, data));
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g.item()));
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let c = s.cols();
                    let mut d = Vec::with_capacity(s.len());
                    for (srow, grow) in s.data().chunks(c).zip(g.data().chunks(c)) {
                        let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        d.extend(srow.iter().zip(grow).map(|(sv, gv)| sv * (gv - dot)));
                    }
                    accumulate(&mut grads, *a, Tensor::from_rows(s.rows(), c, d));
                }
                Op::Clip(a, lo, hi) => {
                    let d = zip_same(&g, self.value(*a), |gv, x| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut data = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                        }
                        accumulate(&mut grads, p, Tensor::from_rows(rows, pc, data));
                        offset += pc;
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn zip_same(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_rows(x.rows(), x.cols(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to any recorded node; zero when unreached.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.by_node.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let s = &self.shapes[v.0];
                let (r, c) = match s.len() {
                    2 => (s[0], s[1]),
                    1 => (1, s[0]),
                    _ => (1, 1),
                };
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients for every named parameter bound on the tape.
    pub fn params(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}
