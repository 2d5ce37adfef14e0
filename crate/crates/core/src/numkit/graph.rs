//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! caches its value and records its inputs; [`Graph::backward`] then walks
//! the tape in reverse, accumulating vector-Jacobian products. Node ids are
//! indices into the tape, so inputs always precede their consumers.
//!
//! Shape mismatches inside the tape are programmer errors and panic; the
//! user-facing entry points (`Mlp::forward`, the Gaussian helpers) validate
//! shapes up front and return [`Error::Dimension`].

use crate::error::{Error, Result};

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor2};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    /// `n×m + 1×m`, bias broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n×m ⊙ n×1`, column vector broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    /// Per-row sum, `n×m → n×1`.
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    /// `1×m → n×m`.
    Broadcast(Var, usize),
    /// Row lookup into a table, `k×m → n×m`.
    Gather(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor2,
    pub grad: Option<Tensor2>,
    tracked: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Tensor2 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor2> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor2, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let t = self.tracked(a);
        self.push(op, value, t)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor2) -> Var {
        self.push(Op::Param, value.clone(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul shape mismatch");
        let value = matmul_nn(va, vb);
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::MatMul(a, b), value, t)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert!(vb.rows() == 1 && vb.cols() == va.cols(), "add_row shape mismatch");
        let m = va.cols();
        let mut data = va.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x += vb.data()[i % m];
        }
        let value = Tensor2::raw(va.rows(), m, data);
        let t = self.tracked(a) || self.tracked(bias);
        self.push(Op::AddRow(a, bias), value, t)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let value = va.zip_map(vb, f);
        let t = self.tracked(a) || self.tracked(b);
        self.push(op, value, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert!(vc.cols() == 1 && vc.rows() == va.rows(), "mul_col shape mismatch");
        let m = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vc.data()[i / m])
            .collect();
        let value = Tensor2::raw(va.rows(), m, data);
        let t = self.tracked(a) || self.tracked(col);
        self.push(Op::MulCol(a, col), value, t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp; the gradient passes only where the input lies inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let value = Tensor2::raw(va.rows(), 1, data);
        let t = self.tracked(a);
        self.push(Op::SumCols(a), value, t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(Op::Sum(a), value, t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor2::scalar(va.sum() / va.len() as f64);
        let t = self.tracked(a);
        self.push(Op::Mean(a), value, t)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor2::hcat(&values).expect("concat row mismatch");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Op::Concat(parts.to_vec()), value, t)
    }

    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start < end && end <= va.cols(), "slice out of range");
        let value = va.select_cols(start, end);
        let t = self.tracked(a);
        self.push(Op::Slice(a, start, end), value, t)
    }

    pub fn broadcast(&mut self, a: Var, rows: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "broadcast needs a row vector");
        let value = va.select_rows(&vec![0; rows]);
        let t = self.tracked(a);
        self.push(Op::Broadcast(a, rows), value, t)
    }

    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        assert!(idx.iter().all(|&i| i < vt.rows()), "gather index out of range");
        let value = vt.select_rows(idx);
        let t = self.tracked(table);
        self.push(Op::Gather(table, idx.to_vec()), value, t)
    }

    /// Back-propagates from a `1×1` node; returns gradients for every node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!("backward from a {r}x{c} node; loss must be 1x1")));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }

        Ok(Gradients {
            grads: self.nodes.iter().map(|n| n.grad.clone()).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&mut self, v: Var, g: Tensor2) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Tensor2) {
        let out = &self.nodes[i].value;
        match *op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(b));
                let gb = matmul_tn(self.value(a), g);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddRow(a, b) => {
                let m = g.cols();
                let mut gb = vec![0.0; m];
                for (k, &x) in g.data().iter().enumerate() {
                    gb[k % m] += x;
                }
                self.accumulate(a, g.clone());
                self.accumulate(b, Tensor2::raw(1, m, gb));
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(b), |x, y| x * y);
                let gb = g.zip_map(self.value(a), |x, y| x * y);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::MulCol(a, c) => {
                let (va, vc) = (self.value(a), self.value(c));
                let m = va.cols();
                let mut ga = g.clone();
                let mut gc = vec![0.0; va.rows()];
                for (k, x) in ga.data_mut().iter_mut().enumerate() {
                    gc[k / m] += *x * va.data()[k];
                    *x *= vc.data()[k / m];
                }
                let gc = Tensor2::raw(va.rows(), 1, gc);
                self.accumulate(a, ga);
                self.accumulate(c, gc);
            }
            Op::Scale(a, c) => self.accumulate(a, g.map(|x| x * c)),
            Op::AddScalar(a, _) => self.accumulate(a, g.clone()),
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |x, y| x * (1.0 - y * y));
                self.accumulate(a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(a), |x, z| x * sigmoid(z));
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |x, y| x * y * (1.0 - y));
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(out, |x, y| x * y);
                self.accumulate(a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(a), |x, z| x / z);
                self.accumulate(a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(a), |x, z| 2.0 * x * z);
                self.accumulate(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(a), |x, z| if (lo..=hi).contains(&z) { x } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(a);
                let data = (0..r * c).map(|k| g.data()[k / c]).collect();
                self.accumulate(a, Tensor2::raw(r, c, data));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Tensor2::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(a);
                let n = (r * c) as f64;
                self.accumulate(a, Tensor2::filled(r, c, g.data()[0] / n));
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let gp = g.select_cols(start, start + w);
                    start += w;
                    self.accumulate(p, gp);
                }
            }
            Op::Slice(a, start, end) => {
                let (r, c) = self.shape(a);
                let mut ga = Tensor2::zeros(r, c);
                for row in 0..r {
                    for (j, col) in (start..end).enumerate() {
                        ga.set(row, col, g.get(row, j));
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Broadcast(a, rows) => {
                let m = g.cols();
                let mut ga = vec![0.0; m];
                for r in 0..rows {
                    for (acc, &x) in ga.iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                self.accumulate(a, Tensor2::raw(1, m, ga));
            }
            Op::Gather(t, ref idx) => {
                let (r, c) = self.shape(t);
                let mut gt = Tensor2::zeros(r, c);
                for (row, &k) in idx.iter().enumerate() {
                    for col in 0..c {
                        let v = gt.get(k, col) + g.get(row, col);
                        gt.set(k, col, v);
                    }
                }
                self.accumulate(t, gt);
            }
        }
    }
}
