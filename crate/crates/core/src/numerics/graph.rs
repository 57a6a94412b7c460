//! Tape-based reverse-mode differentiation over the kernels in [`super::ops`].
//!
//! A [`Graph`] either records every operation (training, gradient checks) or
//! runs in inference mode, where nothing is retained and intermediate values
//! are freed as soon as their [`Var`] handles drop.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::ops::{self, Direction, NormCache, NumericMode};
use super::Tensor;
use crate::attention_net::ParamTree;
use crate::{Error, Result};

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    ChannelNorm {
        input: usize,
        gain: usize,
        shift: usize,
        cache: NormCache,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    Sweep {
        input: usize,
        weight: usize,
        dir: Direction,
    },
    Sum(usize),
    WeightedL1 {
        pred: usize,
        target: usize,
        weights: Vec<f64>,
    },
    MeanSquaredDiff(usize, usize),
    SumSquaredDiff(usize, usize),
    BceLogits(usize, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Recorder for a single forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    mode: NumericMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph in exact mode.
    pub fn new() -> Self {
        Self::with_mode(NumericMode::Exact)
    }

    pub fn with_mode(mode: NumericMode) -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            mode,
        }
    }

    /// A non-recording graph; [`Graph::backward`] on it fails.
    pub fn inference(mode: NumericMode) -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
            mode,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn mode(&self) -> NumericMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Bind every tensor of `tree` as a leaf, differentiable iff `trainable`.
    pub fn bind(&mut self, tree: &ParamTree, trainable: bool) -> BoundParams {
        let vars = tree
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let value = Rc::new(value);
        if !self.recording {
            return Var { id: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value: value.clone(),
            requires_grad,
        });
        Var {
            id: Some(id),
            value,
        }
    }

    fn id(&self, v: &Var) -> usize {
        v.id.unwrap_or(usize::MAX)
    }

    fn needs(&self, vars: &[&Var]) -> bool {
        self.recording
            && vars
                .iter()
                .any(|v| v.id.is_some_and(|i| self.nodes[i].requires_grad))
    }

    pub fn conv2d(
        &mut self,
        input: &Var,
        kernel: &Var,
        bias: &Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = ops::conv2d_with(&input.value, &kernel.value, &bias.value, stride, pad, self.mode)?;
        let rg = self.needs(&[input, kernel, bias]);
        let op = Op::Conv2d {
            input: self.id(input),
            kernel: self.id(kernel),
            bias: self.id(bias),
            stride,
            pad,
        };
        Ok(self.push(op, y, rg))
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        let y = ops::relu(&x.value);
        let rg = self.needs(&[x]);
        self.push(Op::Relu(self.id(x)), y, rg)
    }

    pub fn leaky_relu(&mut self, x: &Var, slope: f64) -> Result<Var> {
        let y = ops::leaky_relu(&x.value, slope)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::LeakyRelu(self.id(x), slope), y, rg))
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let y = ops::sigmoid(&x.value);
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid(self.id(x)), y, rg)
    }

    pub fn channel_norm(&mut self, x: &Var, gain: &Var, shift: &Var, eps: f64) -> Result<Var> {
        let (y, cache) = ops::channel_norm_forward(&x.value, &gain.value, &shift.value, eps)?;
        let rg = self.needs(&[x, gain, shift]);
        let op = Op::ChannelNorm {
            input: self.id(x),
            gain: self.id(gain),
            shift: self.id(shift),
            cache,
        };
        Ok(self.push(op, y, rg))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(&a.value, &b.value)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(self.id(a), self.id(b)), y, rg))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::mul(&a.value, &b.value)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(self.id(a), self.id(b)), y, rg))
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Var {
        let y = ops::scale(&x.value, factor);
        let rg = self.needs(&[x]);
        self.push(Op::Scale(self.id(x), factor), y, rg)
    }

    pub fn concat_channels(&mut self, parts: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| v.value.as_ref()).collect();
        let y = ops::concat_channels(&values)?;
        let rg = self.needs(parts);
        let ids = parts.iter().map(|v| self.id(v)).collect();
        Ok(self.push(Op::Concat(ids), y, rg))
    }

    pub fn directional_sweep(&mut self, x: &Var, weight: &Var, dir: Direction) -> Result<Var> {
        let y = ops::directional_sweep(&x.value, &weight.value, dir)?;
        let rg = self.needs(&[x, weight]);
        let op = Op::Sweep {
            input: self.id(x),
            weight: self.id(weight),
            dir,
        };
        Ok(self.push(op, y, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: &Var) -> Var {
        let y = Tensor::scalar(x.value.sum());
        let rg = self.needs(&[x]);
        self.push(Op::Sum(self.id(x)), y, rg)
    }

    pub fn weighted_l1(&mut self, pred: &Var, target: &Var, weights: &[f64]) -> Result<Var> {
        let y = Tensor::scalar(ops::weighted_l1(&pred.value, &target.value, weights)?);
        let rg = self.needs(&[pred, target]);
        let op = Op::WeightedL1 {
            pred: self.id(pred),
            target: self.id(target),
            weights: weights.to_vec(),
        };
        Ok(self.push(op, y, rg))
    }

    pub fn mean_squared_diff(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = Tensor::scalar(ops::mean_squared_diff(&a.value, &b.value)?);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MeanSquaredDiff(self.id(a), self.id(b)), y, rg))
    }

    pub fn sum_squared_diff(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = Tensor::scalar(ops::sum_squared_diff(&a.value, &b.value)?);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::SumSquaredDiff(self.id(a), self.id(b)), y, rg))
    }

    pub fn bce_with_logits(&mut self, logits: &Var, target: f64) -> Var {
        let y = Tensor::scalar(ops::bce_with_logits(&logits.value, target));
        let rg = self.needs(&[logits]);
        self.push(Op::BceLogits(self.id(logits), target), y, rg)
    }

    /// Reverse traversal from a scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Grads> {
        let root = match loss.id {
            Some(id) if self.recording => id,
            _ => return Err(Error::NotRecorded),
        };
        if loss.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::ones(loss.shape()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |i: usize| self.nodes[i].value.as_ref();
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut acc = |i: usize, d: Tensor| {
            if wants(i) {
                accumulate(grads, i, d)
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let cg = ops::conv2d_backward(
                    val(input),
                    val(kernel),
                    stride,
                    pad,
                    g,
                    [wants(input), wants(kernel), wants(bias)],
                    self.mode,
                )?;
                for (i, d) in [(input, cg.input), (kernel, cg.kernel), (bias, cg.bias)] {
                    if let Some(d) = d {
                        acc(i, d);
                    }
                }
            }
            &Op::Relu(x) => acc(x, ops::relu_backward(val(x), g)),
            &Op::LeakyRelu(x, slope) => acc(x, ops::leaky_relu_backward(val(x), g, slope)),
            &Op::Sigmoid(x) => acc(x, ops::sigmoid_backward(&node.value, g)),
            Op::ChannelNorm {
                input,
                gain,
                shift,
                cache,
            } => {
                let (dx, dg, ds) = ops::channel_norm_backward(cache, val(*gain), g)?;
                acc(*input, dx);
                acc(*gain, dg);
                acc(*shift, ds);
            }
            &Op::Add(a, b) => {
                let (da, db) = ops::add_backward(val(a), val(b), g)?;
                acc(a, da);
                acc(b, db);
            }
            &Op::Mul(a, b) => {
                let (da, db) = ops::mul_backward(val(a), val(b), g)?;
                acc(a, da);
                acc(b, db);
            }
            &Op::Scale(x, f) => acc(x, ops::scale(g, f)),
            Op::Concat(parts) => {
                let channels: Vec<usize> = parts.iter().map(|&p| val(p).shape()[0]).collect();
                for (&p, d) in parts.iter().zip(ops::concat_backward(&channels, g)?) {
                    acc(p, d);
                }
            }
            &Op::Sweep { input, weight, dir } => {
                let (dx, dw) = ops::directional_sweep_backward(&node.value, val(weight), dir, g)?;
                acc(input, dx);
                acc(weight, dw);
            }
            &Op::Sum(x) => {
                let s = g.item()?;
                acc(x, Tensor::full(val(x).shape(), s));
            }
            Op::WeightedL1 {
                pred,
                target,
                weights,
            } => {
                let d = ops::weighted_l1_backward(val(*pred), val(*target), weights, g.item()?)?;
                if wants(*target) {
                    acc(*target, ops::scale(&d, -1.0));
                }
                acc(*pred, d);
            }
            &Op::MeanSquaredDiff(a, b) | &Op::SumSquaredDiff(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let n = if matches!(node.op, Op::MeanSquaredDiff(..)) {
                    ta.numel() as f64
                } else {
                    1.0
                };
                let f = 2.0 * g.item()? / n;
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| f * (x - y))
                    .collect();
                let da = Tensor::new(ta.shape(), data)?;
                if wants(b) {
                    acc(b, ops::scale(&da, -1.0));
                }
                acc(a, da);
            }
            &Op::BceLogits(x, target) => {
                acc(x, ops::bce_with_logits_backward(val(x), target, g.item()?))
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, d: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Gradients of one backward pass, indexed by the leaf [`Var`]s.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a differentiable leaf; `None` if the loss does not depend
    /// on it or it is not a leaf.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, or zeros shaped like it when unreached.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    /// Gradient tree mirroring the names of `params`.
    pub fn collect(&self, params: &BoundParams) -> ParamTree {
        let mut tree = ParamTree::new();
        for (name, v) in &params.vars {
            tree.insert(name.clone(), self.get_or_zeros(v));
        }
        tree
    }
}

/// A [`ParamTree`] bound into a [`Graph`] as named leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wrap already created leaves, e.g. the inputs of a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 3], |i| i as f64 - 4.0));
        let s = g.sum(&x);
        let grads = g.backward(&s).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dead_relu_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 2, 2], -0.5));
        let r = g.relu(&x);
        let s = g.sum(&r);
        let grads = g.backward(&s).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 2], 3.0));
        let y = g.add(&x, &x).unwrap();
        let z = g.mul(&y, &x).unwrap(); // 2x^2
        let s = g.sum(&z);
        let grads = g.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[12.0, 12.0]);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference(NumericMode::Exact);
        let x = g.input(Tensor::ones(&[1, 1, 1]));
        let s = g.sum(&x);
        assert!(matches!(g.backward(&s), Err(Error::NotRecorded)));
        assert!(g.is_empty());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 2, 2]));
        let r = g.relu(&x);
        assert!(g.backward(&r).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 1, 2]));
        let c = g.constant(Tensor::full(&[1, 1, 2], 2.0));
        let y = g.mul(&x, &c).unwrap();
        let s = g.sum(&y);
        let grads = g.backward(&s).unwrap();
        assert!(grads.get(&c).is_none());
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 2.0]);
    }
}
