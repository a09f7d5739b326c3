//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is always a valid topological order
//! and [`Tape::backward`] is a single reverse sweep. The tape is rebuilt for
//! every forward pass, which lets routing masks change from batch to batch.
//!
//! [`Tape::add_routed`] is the one primitive that is not a plain function: it
//! computes `a + b` but may refuse to send gradient to either operand. That is
//! how residual blocks restrict the backward pass to the skip or to the
//! residual branch without changing the forward values.

use super::tensor::Tensor;
use super::{Mode, BN_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Use the statistics of the batch itself.
    Batch,
    /// Use fixed running averages.
    Running { mean: &'a [f64], var: &'a [f64] },
}

impl<'a> NormStats<'a> {
    pub fn for_mode(mode: Mode, mean: &'a [f64], var: &'a [f64]) -> Self {
        match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running { mean, var },
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    AddRow(Var, Var),
    Add {
        a: Var,
        b: Var,
        to_a: bool,
        to_b: bool,
    },
    Scale(Var, f64),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Tape(format!("node {} is not on this tape", v.0)))
        }
    }

    /// Records a parameter or input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x · wᵀ` with `w` stored as `out × in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let out = self.value(x).matmul_nt(self.value(w))?;
        self.push(out, Op::Linear(x, w), "linear")
    }

    /// Adds a `1 × c` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let out = self.value(x).add_row(self.value(bias))?;
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_routed(a, b, true, true)
    }

    /// `a + b` in the forward pass; the backward pass only reaches the
    /// operands whose flag is set.
    pub fn add_routed(&mut self, a: Var, b: Var, to_a: bool, to_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add { a, b, to_a, to_b }, "add")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), "relu")
    }

    /// Per-feature normalization with learned scale and shift.
    ///
    /// Returns the batch statistics when normalizing with the batch, so the
    /// caller can fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != (1, cols) {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    left: (rows, cols),
                    right: s,
                });
            }
        }
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch { rows });
                }
                let n = rows as f64;
                let mean: Vec<f64> = xv.sum_rows().data().iter().map(|s| s / n).collect();
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for (c, v) in xv.row(r).iter().enumerate() {
                        let d = v - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::Dimension {
                        op: "batch_norm",
                        left: (rows, cols),
                        right: (1, mean.len()),
                    });
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                x_hat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
            batch,
        };
        let v = self.push(out, op, "batch_norm")?;
        Ok((v, batch.then_some(BatchStats { mean, var })))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        self.push(Tensor::full(1, 1, s), Op::Sum(x), "sum")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (probs, loss) = softmax_cross_entropy_forward(self.value(logits), labels)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::full(1, 1, loss), op, "softmax_cross_entropy")
    }

    /// Reverse sweep from a scalar node. Each recorded node is visited once,
    /// last to first.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Linear(x, w) => {
                    let gx = g.matmul(self.value(*w))?;
                    let gw = g.matmul_tn(self.value(*x))?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                }
                Op::AddRow(x, bias) => {
                    accumulate(&mut grads, *bias, g.sum_rows())?;
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::Add { a, b, to_a, to_b } => {
                    if *to_b {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                    if *to_a {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scale(*s))?,
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    batch,
                } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dgamma[c] += g.get(r, c) * x_hat.get(r, c);
                            dbeta[c] += g.get(r, c);
                        }
                    }
                    let mut gx = Tensor::zeros(rows, cols);
                    if *batch {
                        // dx = inv_std/N * (N*dxh - sum(dxh) - xh*sum(dxh*xh)), dxh = g*gamma
                        let n = rows as f64;
                        for c in 0..cols {
                            let sum_d = gam[c] * dbeta[c];
                            let sum_dx = gam[c] * dgamma[c];
                            for r in 0..rows {
                                let d = g.get(r, c) * gam[c];
                                let v = inv_std[c] / n * (n * d - sum_d - x_hat.get(r, c) * sum_dx);
                                gx.set(r, c, v);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                gx.set(r, c, g.get(r, c) * gam[c] * inv_std[c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, Tensor::row_vector(&dgamma))?;
                    accumulate(&mut grads, *beta, Tensor::row_vector(&dbeta))?;
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Tensor::full(r, c, g.get(0, 0)))?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        gl.set(r, l, gl.get(r, l) - 1.0);
                    }
                    accumulate(&mut grads, *logits, gl.scale(scale))?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Row-wise softmax probabilities and mean cross-entropy against `labels`,
/// stabilized by subtracting each row's maximum.
pub fn softmax_cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, f64)> {
    let (rows, classes) = logits.shape();
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: (rows, classes),
            right: (labels.len(), 1),
        });
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut probs = Tensor::zeros(rows, classes);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            probs.set(r, c, (v - max).exp() / denom);
        }
        total += denom.ln() - (row[label] - max);
    }
    Ok((probs, total / rows as f64))
}
