//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! op kind, operand handles and the computed value. [`Tape::backward`] zeroes
//! all gradients, seeds the scalar loss with 1 and replays the tape in
//! reverse creation order (a valid reverse topological order, since an
//! operand always precedes its consumers), accumulating vector-Jacobian
//! products into each node's gradient buffer.
//!
//! Tensors are plain values; a [`Var`] is a cheap handle into the tape that
//! is only meaningful for the pass that created it. Parameters enter a pass
//! through [`Tape::param`], which snapshots the stored tensor and remembers
//! the binding so gradients can be collected by name afterwards.

mod backward;
mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::{grad_check, grad_check_named};

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Forward/evaluation switch. Only dropout and batch normalization change
/// behavior between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub needs_grad: bool,
    pub op: Op,
}

/// Recorded operations. Saved fields hold whatever forward state the
/// backward rule needs (argmax routes, normalization statistics, masks).
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2 {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        x: Var,
        kh: usize,
        kw: usize,
        stride: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMeanMap(Var),
    ChannelMaxMap {
        x: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropyLogits {
        logits: Var,
        labels: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    IndexAxis0 {
        x: Var,
        index: usize,
    },
    MeanAxis0(Var),
    SelectRC {
        x: Var,
        row: usize,
        col: usize,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    MulRowScale {
        x: Var,
        s: Var,
    },
    MulChannelGate {
        x: Var,
        gate: Var,
    },
    MulSpatialGate {
        x: Var,
        gate: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        // per-element normalized input and per-channel 1/sqrt(var+eps)
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        // number of elements reduced per channel
        count: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNormChannels {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    PatchExtract {
        x: Var,
        patch: usize,
    },
}

impl Op {
    fn parents(&self, out: &mut Vec<Var>) {
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            AddScalar(a) | MulScalar(a, _) | Relu(a) | Gelu(a) | Sigmoid(a) | Log(a) | Exp(a)
            | Sum(a) | Mean(a) | Reshape(a) | GlobalAvgPool(a) | ChannelMeanMap(a)
            | MeanAxis0(a) => out.push(*a),
            Matmul { a, b, .. } => {
                out.push(*a);
                out.push(*b);
            }
            Transpose2 { x, .. }
            | AvgPool2d { x, .. }
            | MaxPool2d { x, .. }
            | GlobalMaxPool { x, .. }
            | ChannelMaxMap { x, .. }
            | UpsampleNearest { x, .. }
            | Softmax { x, .. }
            | IndexAxis0 { x, .. }
            | SelectRC { x, .. }
            | Dropout { x, .. }
            | PatchExtract { x, .. } => out.push(*x),
            CrossEntropyLogits { logits, .. } => out.push(*logits),
            Conv2d { x, w, bias, .. } | DepthwiseConv2d { x, w, bias, .. } => {
                out.push(*x);
                out.push(*w);
                out.push(*bias);
            }
            Concat { parts, .. } => out.extend(parts.iter().copied()),
            AddRowBias { x, b } | AddChannelBias { x, b } => {
                out.push(*x);
                out.push(*b);
            }
            MulRowScale { x, s } | ScaleChannels { x, s } => {
                out.push(*x);
                out.push(*s);
            }
            MulChannelGate { x, gate } | MulSpatialGate { x, gate } => {
                out.push(*x);
                out.push(*gate);
            }
            BatchNormTrain { x, gamma, beta, .. }
            | LayerNorm { x, gamma, beta, .. }
            | LayerNormChannels { x, gamma, beta, .. } => {
                out.push(*x);
                out.push(*gamma);
                out.push(*beta);
            }
        }
    }
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
    binding_of: BTreeMap<String, usize>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Evaluation-mode tape without an RNG.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            binding_of: BTreeMap::new(),
            mode: Mode::Eval,
            rng: None,
        }
    }

    /// Training-mode tape. The RNG drives dropout masks for this pass.
    pub fn for_training(rng: ChaCha8Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            binding_of: BTreeMap::new(),
            mode: Mode::Train,
            rng: Some(rng),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub(crate) fn rng_mut(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = match &op {
            Op::Leaf => false, // set explicitly by leaf()
            other => {
                let mut ps = Vec::new();
                other.parents(&mut ps);
                ps.iter().any(|p| self.nodes[p.0].needs_grad)
            }
        };
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor as a leaf node.
    pub fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> Var {
        let v = self.push(value.shape().to_vec(), value.data().to_vec(), Op::Leaf);
        self.nodes[v.0].needs_grad = requires_grad;
        v
    }

    /// Registers a constant (non-differentiated) leaf.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter from the store onto the tape. Binding the same
    /// name twice returns the same node, so shared weights accumulate
    /// gradients from every use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&i) = self.binding_of.get(name) {
            return Ok(self.bindings[i].1);
        }
        let entry = store.entry(name)?;
        let var = self.leaf(&entry.value, entry.trainable);
        self.binding_of.insert(name.to_string(), self.bindings.len());
        self.bindings.push((name.to_string(), var));
        Ok(var)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Copies a node's value out as a tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape/data consistent")
    }

    /// Gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].shape.clone(), g.clone()).expect("grad shape matches node")
        })
    }

    /// Gradients for every trainable parameter bound to this tape, keyed by
    /// name. Parameters the loss never reached get zero gradients.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.bindings {
            let node = &self.nodes[var.0];
            if !node.needs_grad {
                continue;
            }
            let grad = match &node.grad {
                Some(g) => Tensor::new(node.shape.clone(), g.clone()).expect("grad shape"),
                None => Tensor::zeros(&node.shape),
            };
            out.insert(name.clone(), grad);
        }
        out
    }

    /// Reverse pass from a scalar loss. Zeroes every gradient on the tape
    /// first, so at most one loss per pass is meaningful.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].shape
                ),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        // Mark nodes reachable from the loss.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        let mut parents = Vec::new();
        while let Some(id) = stack.pop() {
            if reachable[id] {
                continue;
            }
            reachable[id] = true;
            parents.clear();
            self.nodes[id].op.parents(&mut parents);
            for p in &parents {
                if !reachable[p.0] {
                    stack.push(p.0);
                }
            }
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            if !reachable[id] || self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(node.data.len(), contrib.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}
