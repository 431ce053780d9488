//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. The
//! tape is rebuilt for each forward pass; [`Tape::backward`] walks the
//! recorded nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.
//!
//! The op set is deliberately small: what an MLP classifier, its
//! cross-entropy loss and an input-space attack need.
//!
//! ```
//! use orat_core::autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
//! let w = tape.constant(Tensor::matrix(2, 1, vec![3.0, -1.0]).unwrap());
//! let b = tape.constant(Tensor::vector(vec![0.5]));
//! let y = x.linear(w, b).unwrap().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[3.0, -1.0]);
//! ```

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix (1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size `m x k` and `op(b)` of
/// size `k x n`. A transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu {
        input: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        input: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    WeightedSum {
        input: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Not `Sync`: a tape belongs to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// Records a tensor that gradients flow back to.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a tensor that is treated as a constant by `backward`.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Gradients of every node that
    /// (transitively) depends on a leaf are returned; fan-out accumulates.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(root)?;
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Linear { input, weight, bias } => {
                    let x = &nodes[*input].value;
                    let w = &nodes[*weight].value;
                    let (n, d, h) = (x.rows(), x.cols(), w.cols());
                    if nodes[*input].requires_grad {
                        let mut dx = vec![0.0; n * d];
                        gemm(n, h, d, &g, false, &w.data, true, 0.0, &mut dx);
                        accumulate(&mut grads[*input], dx);
                    }
                    if nodes[*weight].requires_grad {
                        let mut dw = vec![0.0; d * h];
                        gemm(d, n, h, &x.data, true, &g, false, 0.0, &mut dw);
                        accumulate(&mut grads[*weight], dw);
                    }
                    if nodes[*bias].requires_grad {
                        let mut db = vec![0.0; h];
                        for row in g.chunks_exact(h) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads[*bias], db);
                    }
                }
                Op::Relu { input } => {
                    if nodes[*input].requires_grad {
                        let x = &nodes[*input].value.data;
                        let dx = g
                            .iter()
                            .zip(x)
                            .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[*input], dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if nodes[*logits].requires_grad {
                        let c = nodes[*logits].value.cols();
                        let mut dz = probs.clone();
                        for (i, (row, &label)) in dz.chunks_exact_mut(c).zip(labels).enumerate() {
                            row[label] -= 1.0;
                            for v in row.iter_mut() {
                                *v *= g[i];
                            }
                        }
                        accumulate(&mut grads[*logits], dz);
                    }
                }
                Op::Sum { input } => {
                    if nodes[*input].requires_grad {
                        let len = nodes[*input].value.len();
                        accumulate(&mut grads[*input], vec![g[0]; len]);
                    }
                }
                Op::Scale { input, factor } => {
                    if nodes[*input].requires_grad {
                        accumulate(&mut grads[*input], g.iter().map(|v| v * factor).collect());
                    }
                }
                Op::Add { lhs, rhs } => {
                    for side in [*lhs, *rhs] {
                        if nodes[side].requires_grad {
                            accumulate(&mut grads[side], g.clone());
                        }
                    }
                }
                Op::WeightedSum { input, weights } => {
                    if nodes[*input].requires_grad {
                        accumulate(&mut grads[*input], weights.iter().map(|w| w * g[0]).collect());
                    }
                }
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn check_owner(&self, var: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to a different tape".into()))
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Result of a backward sweep, indexed by the variables of one tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        self.tape.check_owner(other)
    }

    fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// `input[n x d] * weight[d x h] + bias[h]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let out = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[0] {
                return Err(Error::Shape {
                    op: "linear",
                    left: x.shape.clone(),
                    right: w.shape.clone(),
                });
            }
            if b.shape != [w.shape[1]] {
                return Err(Error::Shape {
                    op: "linear bias",
                    left: w.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            x.ensure_finite("linear input")?;
            w.ensure_finite("linear weight")?;
            b.ensure_finite("linear bias")?;
            let (n, d, h) = (x.shape[0], x.shape[1], w.shape[1]);
            let mut out = Vec::with_capacity(n * h);
            for _ in 0..n {
                out.extend_from_slice(&b.data);
            }
            gemm(n, d, h, &x.data, false, &w.data, false, 1.0, &mut out);
            Tensor {
                shape: vec![n, h],
                data: out,
            }
        };
        let requires = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Linear {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            requires,
        ))
    }

    /// Elementwise `max(0, x)`; the backward pass uses `1[x > 0]`.
    pub fn relu(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            x.ensure_finite("relu input")?;
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            }
        };
        let requires = self.requires_grad();
        Ok(self.tape.push(out, Op::Relu { input: self.id }, requires))
    }

    /// Per-sample `-log softmax(logits_i)[label_i]`, stabilised by the row max.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let (out, probs) = {
            let z = self.value();
            if z.shape.len() != 2 || z.shape[0] != labels.len() {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    left: z.shape.clone(),
                    right: vec![labels.len()],
                });
            }
            z.ensure_finite("cross_entropy logits")?;
            let c = z.shape[1];
            let mut losses = Vec::with_capacity(labels.len());
            let mut probs = Vec::with_capacity(z.len());
            for (row, &label) in z.data.chunks_exact(c).zip(labels) {
                if label >= c {
                    return Err(Error::Index {
                        what: "label",
                        index: label,
                        bound: c,
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                // Both terms are non-negative in floating point: max >= z_y and total >= 1.
                losses.push((max - row[label]) + total.ln());
                probs.extend(exps.iter().map(|e| e / total));
            }
            (Tensor::vector(losses), probs)
        };
        let requires = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            requires,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().data.iter().sum();
        let requires = self.requires_grad();
        self.tape
            .push(Tensor::scalar(total), Op::Sum { input: self.id }, requires)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = {
            let x = self.value();
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|v| v * factor).collect(),
            }
        };
        let requires = self.requires_grad();
        self.tape.push(
            out,
            Op::Scale {
                input: self.id,
                factor,
            },
            requires,
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let out = {
            let (a, b) = (self.value(), rhs.value());
            if a.shape != b.shape {
                return Err(Error::Shape {
                    op: "add",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
            }
        };
        let requires = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Add {
                lhs: self.id,
                rhs: rhs.id,
            },
            requires,
        ))
    }

    /// Scalar `sum_i weights[i] * x[i]`, accumulated in index order.
    pub fn weighted_sum(self, weights: &[f64]) -> Result<Var<'t>> {
        let total = {
            let x = self.value();
            if x.len() != weights.len() {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    left: x.shape.clone(),
                    right: vec![weights.len()],
                });
            }
            x.data.iter().zip(weights).map(|(v, w)| v * w).sum()
        };
        let requires = self.requires_grad();
        Ok(self.tape.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                input: self.id,
                weights: weights.to_vec(),
            },
            requires,
        ))
    }
}
