//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node to a [`Tape`] and returns a [`Var`] handle. Nodes
//! are only ever appended, so a node's inputs always precede it and a single
//! reverse sweep visits each node once. Quantizers plug in through
//! [`CustomGrad`], which replaces the analytic Jacobian with a user rule.

mod loss;
mod nn;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use loss::{softmax_rows, PROB_EPS};
pub use nn::{BnBatchStats, BN_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A backward rule that overrides the analytic gradient of a forward computation.
///
/// `backward` receives the forward inputs, the forward output and the upstream
/// gradient, and returns one gradient per input (`None` for inputs that get none).
pub trait CustomGrad: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    KlDiv {
        p: Var,
        q: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    AvgPool {
        x: Var,
        kernel: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomGrad>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::Custom { rule, .. } => rule.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Softmax(a) => vec![*a],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::KlDiv { p, q } => vec![*p, *q],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::AvgPool { x, .. } | Op::MaxPool { x, .. } => vec![*x],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of every value computed in one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    eps_clamps: usize,
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

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf)
    }

    /// Copies `v` into a fresh constant, cutting it out of the gradient graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = Tensor::new(
            self.value(v).shape().to_vec(),
            self.value(v).data().to_vec(),
        )?;
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Number of times a probability or log argument had to be clamped to
    /// [`PROB_EPS`] or a batch variance fell below it.
    pub fn eps_clamps(&self) -> usize {
        self.eps_clamps
    }

    pub(crate) fn flag_eps(&mut self, n: usize) {
        self.eps_clamps += n;
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub(crate) fn push(&mut self, mut value: Tensor, op: Op) -> Result<Var> {
        let idx = self.nodes.len();
        let inputs = op.inputs();
        if inputs.iter().any(|i| i.0 >= idx) {
            return Err(Error::Structural(format!(
                "{} node references a later node",
                op.name()
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        if !matches!(op, Op::Leaf) {
            value.requires_grad = inputs.iter().any(|i| self.requires_grad(*i));
        }
        value.zero_grad();
        self.nodes.push(Node { value, op });
        Ok(Var(idx))
    }

    /// Records a computation whose backward rule is supplied by `rule`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn CustomGrad>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// `loss` must hold exactly one value. Gradients from a previous call are
    /// overwritten.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            for (input, gi) in self.backward_node(idx, &g)? {
                if input.0 >= idx {
                    return Err(Error::Structural(format!(
                        "cycle through node {idx} ({})",
                        self.nodes[idx].op.name()
                    )));
                }
                if !self.requires_grad(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("backward of {}", self.nodes[idx].op.name()),
                    });
                }
                let node = &mut self.nodes[idx];
                if node.value.requires_grad {
                    node.value.set_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Relu(a) => vec![(
                *a,
                self.value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    (self.requires_grad(*a), self.requires_grad(*b)),
                );
                ga.map(|ga| (*a, ga))
                    .into_iter()
                    .chain(gb.map(|gb| (*b, gb)))
                    .collect()
            }
            Op::AddBias(x, bias) => {
                let f = self.value(*bias).numel();
                let mut gb = vec![0.0; f];
                for (i, v) in g.iter().enumerate() {
                    gb[i % f] += v;
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Softmax(a) => vec![(*a, loss::softmax_backward(out, g))],
            Op::CrossEntropy { probs, labels } => {
                vec![(
                    *probs,
                    loss::cross_entropy_backward(self.value(*probs), labels, g[0]),
                )]
            }
            Op::KlDiv { p, q } => {
                let (gp, gq) = loss::kl_backward(self.value(*p), self.value(*q), g[0]);
                vec![(*p, gp), (*q, gq)]
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (gx, gw) =
                    nn::conv2d_backward(self.value(*x), self.value(*w), *stride, *padding, g);
                vec![(*x, gx), (*w, gw)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (gx, gg, gb) = nn::batchnorm_backward(
                    self.value(*x).shape(),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    *batch_stats,
                    g,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::AvgPool { x, kernel } => {
                vec![(
                    *x,
                    nn::avg_pool_backward(self.value(*x).shape(), *kernel, g),
                )]
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                vec![(*x, gx)]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = rule.backward(&ins, out, g);
                if gs.len() != inputs.len() {
                    return Err(Error::Structural(format!(
                        "{} returned {} gradients for {} inputs",
                        rule.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                let mut res = Vec::new();
                for ((v, t), gi) in inputs.iter().zip(&ins).zip(gs) {
                    if let Some(gi) = gi {
                        if gi.len() != t.numel() {
                            return Err(Error::Structural(format!(
                                "{} gradient has {} entries, input has {}",
                                rule.name(),
                                gi.len(),
                                t.numel()
                            )));
                        }
                        res.push((*v, gi));
                    }
                }
                res
            }
        };
        Ok(grads)
    }
}
