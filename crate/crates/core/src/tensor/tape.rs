use super::conv::{self, ConvParams};
use super::ops::{self, BatchNormConfig, BatchNormGrads, LabelMap, ResizePlan};
use super::{ensure_finite, Element, Result, Shape, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: ConvParams,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        training: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Softmax(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Resize {
        input: Var,
        plan: ResizePlan,
    },
    CrossEntropy {
        logits: Var,
        target: LabelMap,
        probs: Vec<T>,
        weights: Vec<T>,
    },
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed ops. Nodes are appended as ops run, so every
/// op's inputs precede it and a single reverse sweep is a valid backward
/// traversal.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Convolution multiply-accumulates executed on this tape so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass. Leaves that require a gradient but
    /// were not reached hold zeros; constants hold `None`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, params: ConvParams) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = bias.map(|b| self.value(b));
        let os = conv::output_shape(x.shape(), w.shape(), b.map(|b| b.shape()), &params)?;
        let out = conv::forward_raw(x.data(), x.shape(), w.data(), w.shape(), b.map(|b| b.data()), os, params);
        ensure_finite("conv2d", &out)?;
        self.macs += conv::mac_count(x.shape(), w.shape(), os, params);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_vec(os, out)?,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            },
        ))
    }

    /// Depthwise spatial convolution followed by a 1×1 pointwise convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise_separable_conv(
        &mut self,
        input: Var,
        depthwise: Var,
        pointwise: Var,
        pointwise_bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let groups = self.value(input).shape().c;
        let spatial = self.conv2d(input, depthwise, None, ConvParams::new(stride, padding, dilation, groups))?;
        self.conv2d(spatial, pointwise, pointwise_bias, ConvParams::default())
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let r = ops::batch_norm_raw(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            cfg,
        )?;
        let shape = self.value(input).shape();
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(shape, r.out)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: r.xhat,
                invstd: r.invstd,
                training: cfg.training,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Relu(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(out, rg, Op::Concat(inputs.to_vec())))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let out = ops::global_avg_pool(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::GlobalAvgPool(input))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Var {
        let out = ops::softmax_channels(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Softmax(input))
    }

    pub fn max_pool(&mut self, input: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool_indexed(self.value(input), k, stride, padding)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::MaxPool { input, argmax }))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let plan = ResizePlan::new(self.value(input).shape(), out_h, out_w)?;
        let out = Tensor::from_vec(plan.out_shape(), plan.forward(self.value(input).data()))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Resize { input, plan }))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: &LabelMap, class_weights: Option<&[f64]>) -> Result<Var> {
        let r = ops::cross_entropy_raw(self.value(logits), target, class_weights)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(r.loss),
            rg,
            Op::CrossEntropy {
                logits,
                target: target.clone(),
                probs: r.probs,
                weights: r.weights,
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        ensure_finite("sum", &[s])?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(input)))
    }

    /// `Σ input ⊙ weights` against a constant weight tensor of equal shape.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} vs {}", x.shape(), weights.shape()),
            });
        }
        let s = x
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        ensure_finite("weighted_sum", &[s])?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the gradient of
    /// every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape.numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.requires_grad {
                continue;
            }
            let shape = node.value.shape();
            let g = match g {
                Some(g) => g,
                None if matches!(node.op, Op::Leaf) => vec![T::zero(); shape.numel()],
                None => continue,
            };
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(Tensor::from_vec(shape, g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out_shape = nodes[i].value.shape();
        macro_rules! buf {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            } => {
                let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
                if let Some(gi) = buf!(*input) {
                    conv::backward_input(g, out_shape, w.data(), w.shape(), x.shape(), *params, gi);
                }
                if let Some(gw) = buf!(*weight) {
                    conv::backward_weight(g, out_shape, x.data(), x.shape(), w.shape(), *params, gw);
                }
                if let Some(gb) = bias.and_then(|b| buf!(b)) {
                    conv::backward_bias(g, out_shape, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                invstd,
                training,
            } => {
                let mut gi = buf!(*input).map(std::mem::take);
                let mut gg = buf!(*gamma).map(std::mem::take);
                let mut gb = buf!(*beta).map(std::mem::take);
                ops::batch_norm_backward(
                    g,
                    out_shape,
                    xhat,
                    invstd,
                    nodes[gamma.0].value.data(),
                    *training,
                    BatchNormGrads {
                        input: gi.as_deref_mut(),
                        gamma: gg.as_deref_mut(),
                        beta: gb.as_deref_mut(),
                    },
                );
                for (v, taken) in [(*input, gi), (*gamma, gg), (*beta, gb)] {
                    if let Some(t) = taken {
                        grads[v.0] = Some(t);
                    }
                }
            }
            Op::Relu(input) => {
                if let Some(gi) = buf!(*input) {
                    ops::relu_backward(nodes[input.0].value.data(), g, gi);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = buf!(v) {
                        for (x, &y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Concat(inputs) => {
                let shapes: Vec<Shape> = inputs.iter().map(|v| nodes[v.0].value.shape()).collect();
                for (k, v) in inputs.iter().enumerate() {
                    if let Some(gv) = buf!(*v) {
                        ops::concat_backward(g, out_shape, &shapes, k, gv);
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                if let Some(gi) = buf!(*input) {
                    ops::global_avg_pool_backward(g, nodes[input.0].value.shape(), gi);
                }
            }
            Op::Softmax(input) => {
                if let Some(gi) = buf!(*input) {
                    ops::softmax_backward(nodes[i].value.data(), out_shape, g, gi);
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(gi) = buf!(*input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gi[src] += gv;
                    }
                }
            }
            Op::Resize { input, plan } => {
                if let Some(gi) = buf!(*input) {
                    plan.backward(g, gi);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
                weights,
            } => {
                if let Some(gi) = buf!(*logits) {
                    ops::cross_entropy_backward(g[0], nodes[logits.0].value.shape(), probs, target, weights, gi);
                }
            }
            Op::Sum(input) => {
                if let Some(gi) = buf!(*input) {
                    for x in gi.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::WeightedSum { input, weights } => {
                if let Some(gi) = buf!(*input) {
                    for (x, &w) in gi.iter_mut().zip(weights) {
                        *x += g[0] * w;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, T: Element>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}
