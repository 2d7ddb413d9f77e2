use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{ensure, Result};
use crate::optim::{ParamId, ParamSet};

use super::{ops, PadMode, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, pad: PadMode },
    Pool2d { input: Var },
    Pool1d { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    LogSoftmax { input: Var },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    SmoothL1 { pred: Var, target: Tensor, beta: f32 },
    Bce { logits: Var, targets: Tensor },
    Reshape { input: Var },
    Gather { input: Var, indices: Vec<usize> },
    Resize { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f32 },
    Dot { input: Var, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Ordered record of executed operations. Replaying it backwards from a scalar
/// yields gradients for every recorded value.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per parameter of `set`; parameters that never reached the
    /// loss get zeros. A parameter bound more than once accumulates.
    pub fn for_params(&self, set: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = set.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (o, v) in out[pid.index()].data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
        }
        out
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of the sign pattern of every relu input on the tape. Two
    /// evaluations with equal signatures lie on the same linear piece of
    /// every relu.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                for &v in self.value(input).data() {
                    (v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Records a constant or input tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records parameter `id` of `set` so its gradient can be collected.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let v = self.push(set.tensor(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// [`GradTape::param`] looked up by name.
    pub fn param_named(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        let id = set
            .id(name)
            .ok_or_else(|| crate::Error::contract("GradTape::param", format!("unknown parameter `{name}`")))?;
        Ok(self.param(set, id))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: PadMode) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { input, kernel, bias, stride, pad }))
    }

    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::adaptive_avg_pool2d(self.value(input), out_h, out_w)?;
        Ok(self.push(y, Op::Pool2d { input }))
    }

    pub fn adaptive_avg_pool1d(&mut self, input: Var, out_len: usize) -> Result<Var> {
        let y = ops::adaptive_avg_pool1d(self.value(input), out_len)?;
        Ok(self.push(y, Op::Pool1d { input }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(y, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu { input })
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let y = ops::log_softmax(self.value(input))?;
        Ok(self.push(y, Op::LogSoftmax { input }))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let y = ops::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(Tensor::scalar(y), Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    pub fn smooth_l1(&mut self, pred: Var, target: Tensor, beta: f32) -> Result<Var> {
        let y = ops::smooth_l1(self.value(pred), &target, beta)?;
        Ok(self.push(Tensor::scalar(y), Op::SmoothL1 { pred, target, beta }))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let y = ops::bce_with_logits(self.value(logits), &targets)?;
        Ok(self.push(Tensor::scalar(y), Op::Bce { logits, targets }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(input).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { input }))
    }

    /// Flat-index gather; the backward pass scatter-adds.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let y = ops::gather(self.value(input), &indices, shape)?;
        Ok(self.push(y, Op::Gather { input, indices }))
    }

    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::resize_bilinear(self.value(input), out_h, out_w)?;
        Ok(self.push(y, Op::Resize { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let y = self.value(input).map(|v| v * factor);
        self.push(y, Op::Scale { input, factor })
    }

    /// Scalar `sum_i x_i * w_i` with fixed weights.
    pub fn dot(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        let y = ops::dot(self.value(input), &weights)?;
        Ok(self.push(Tensor::scalar(y), Op::Dot { input, weights }))
    }

    /// Reverse-mode sweep from the single-element value `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).len() == 1,
            "GradTape::backward",
            "loss must be a single element, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut emit = |v: Var, t: Tensor| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::Conv2d { input, kernel, bias, stride, pad } => {
                    let (gi, gk, gb) =
                        ops::conv2d_backward(self.value(*input), self.value(*kernel), *stride, *pad, &g)?;
                    emit(*input, gi);
                    emit(*kernel, gk);
                    emit(*bias, gb);
                }
                Op::Pool2d { input } => emit(*input, ops::adaptive_avg_pool2d_backward(self.shape(*input), &g)?),
                Op::Pool1d { input } => emit(*input, ops::adaptive_avg_pool1d_backward(self.shape(*input), &g)?),
                Op::Linear { input, weight, bias } => {
                    let (gi, gw, gb) = ops::linear_backward(self.value(*input), self.value(*weight), &g)?;
                    emit(*input, gi);
                    emit(*weight, gw);
                    emit(*bias, gb);
                }
                Op::Relu { input } => emit(*input, ops::relu_backward(self.value(*input), &g)),
                Op::LogSoftmax { input } => emit(*input, ops::log_softmax_backward(&node.value, &g)),
                Op::CrossEntropy { logits, targets } => {
                    emit(*logits, ops::cross_entropy_backward(self.value(*logits), targets, g.item())?)
                }
                Op::SmoothL1 { pred, target, beta } => {
                    emit(*pred, ops::smooth_l1_backward(self.value(*pred), target, *beta, g.item()))
                }
                Op::Bce { logits, targets } => {
                    emit(*logits, ops::bce_with_logits_backward(self.value(*logits), targets, g.item()))
                }
                Op::Reshape { input } => emit(*input, g.into_shape(self.shape(*input))?),
                Op::Gather { input, indices } => {
                    emit(*input, ops::gather_backward(self.shape(*input), indices, &g))
                }
                Op::Resize { input } => emit(*input, ops::resize_bilinear_backward(self.shape(*input), &g)?),
                Op::Add { a, b } => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::Scale { input, factor } => emit(*input, g.map(|v| v * factor)),
                Op::Dot { input, weights } => {
                    let s = g.item();
                    emit(*input, weights.map(|w| w * s).into_shape(self.shape(*input))?)
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}
