//! Define-by-run tape.
//!
//! Every operation appends a node whose inputs already exist, so the node
//! vector is a topological order and backward is a single reverse sweep.
//! Shape mismatches between operands are programming errors and panic.

use super::kernels;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    Shift(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap();
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(
            x.shape().len() == 2 && y.shape().len() == 2 && x.shape()[1] == y.shape()[0],
            "matmul: incompatible shapes {:?} x {:?}",
            x.shape(),
            y.shape()
        );
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let data = kernels::matmul(x.data(), y.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(value, Op::Softmax(a), needs)
    }

    /// Natural log; arguments are floored at [`kernels::LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), kernels::floored_ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Picks flat elements `indices` of `a` into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Var {
        let x = self.value(a);
        let data = indices
            .iter()
            .map(|&i| {
                assert!(i < x.len(), "gather: index {i} out of range {}", x.len());
                x.data()[i]
            })
            .collect();
        let value = Tensor::new(shape, data).expect("gather: bad output shape");
        let needs = self.needs(a);
        self.push(value, Op::Gather(a, indices), needs)
    }

    /// Rows `rows` of a 2-D tensor, stacked.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape().len(), 2, "select_rows on non-matrix");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut indices = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            assert!(row < r, "select_rows: row {row} out of range {r}");
            indices.extend(row * c..(row + 1) * c);
        }
        self.gather(a, indices, vec![rows.len(), c])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let total: f64 = x.data().iter().sum();
        let value = Tensor::scalar(total / x.len() as f64);
        let needs = self.needs(a);
        self.push(value, Op::Mean(a), needs)
    }

    /// `c * a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| c * v)
    }

    /// `a + c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |v| v + c)
    }

    /// Reverse sweep from a scalar `loss`; fills the `grad` of every
    /// differentiable leaf (zeros for leaves the loss does not reach).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |g| add_into(g, &dy));
                    self.accumulate(&mut grads, *b, |g| add_into(g, &dy));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |g| add_into(g, &dy));
                    self.accumulate(&mut grads, *b, |g| {
                        g.iter_mut().zip(&dy).for_each(|(g, d)| *g -= d)
                    });
                }
                Op::Mul(a, b) => {
                    let xb = self.value(*b).data();
                    let xa = self.value(*a).data();
                    self.accumulate(&mut grads, *a, |g| {
                        for ((g, d), v) in g.iter_mut().zip(&dy).zip(xb) {
                            *g += d * v;
                        }
                    });
                    self.accumulate(&mut grads, *b, |g| {
                        for ((g, d), v) in g.iter_mut().zip(&dy).zip(xa) {
                            *g += d * v;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (xa, xb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                    let (da, db) = (xa.data(), xb.data());
                    // dA = dC * B^T
                    self.accumulate(&mut grads, *a, |g| {
                        for r in 0..m {
                            let drow = &dy[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &db[p * n..(p + 1) * n];
                                let dot: f64 = drow.iter().zip(brow).map(|(d, b)| d * b).sum();
                                g[r * k + p] += dot;
                            }
                        }
                    });
                    // dB = A^T * dC
                    self.accumulate(&mut grads, *b, |g| {
                        for r in 0..m {
                            let drow = &dy[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = da[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (g, d) in g[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                    *g += av * d;
                                }
                            }
                        }
                    });
                }
                Op::Tanh(a) => self.accumulate(&mut grads, *a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(&dy).zip(y) {
                        *g += d * (1.0 - y * y);
                    }
                }),
                Op::Softmax(a) => {
                    let cols = node.value.cols();
                    self.accumulate(&mut grads, *a, |g| {
                        for ((g, d), y) in g
                            .chunks_mut(cols)
                            .zip(dy.chunks(cols))
                            .zip(y.chunks(cols))
                        {
                            let dot: f64 = d.iter().zip(y).map(|(d, y)| d * y).sum();
                            for ((g, d), y) in g.iter_mut().zip(d).zip(y) {
                                *g += y * (d - dot);
                            }
                        }
                    })
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    self.accumulate(&mut grads, *a, |g| {
                        for ((g, d), x) in g.iter_mut().zip(&dy).zip(x) {
                            *g += d / x.max(kernels::LOG_FLOOR);
                        }
                    })
                }
                Op::Exp(a) => self.accumulate(&mut grads, *a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(&dy).zip(y) {
                        *g += d * y;
                    }
                }),
                Op::Gather(a, indices) => self.accumulate(&mut grads, *a, |g| {
                    for (&i, d) in indices.iter().zip(&dy) {
                        g[i] += d;
                    }
                }),
                Op::Sum(a) => self.accumulate(&mut grads, *a, |g| {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }),
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    self.accumulate(&mut grads, *a, |g| {
                        g.iter_mut().for_each(|g| *g += dy[0] / n);
                    })
                }
                Op::Scale(a, c) => self.accumulate(&mut grads, *a, |g| {
                    for (g, d) in g.iter_mut().zip(&dy) {
                        *g += c * d;
                    }
                }),
                Op::Shift(a) => self.accumulate(&mut grads, *a, |g| add_into(g, &dy)),
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(target) {
            return;
        }
        let slot = &mut grads[target.0];
        let g = slot.get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(g);
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (g, d) in g.iter_mut().zip(d) {
        *g += d;
    }
}
