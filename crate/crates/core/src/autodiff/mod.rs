//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Parameters enter
//! the graph as named leaves and their gradients are collected by name.

pub mod kernels;

use crate::adversarial::grl_backward;
use crate::error::{Error, Result};
use crate::params::{Gradients, ParameterSet, RunningStats};
use crate::tensor::{Real, Tensor};
use kernels::{BnCache, Dims4};

/// Variance floor added inside batch-norm square roots.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Deliberate backward-pass corruption used to prove the gradient checker
/// can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    ConvKernel,
}

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(String),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache<F>,
    },
    Relu(NodeId),
    AvgPool2x2(NodeId),
    GlobalAvgPool(NodeId),
    Concat(Vec<NodeId>),
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Grl {
        input: NodeId,
        lambda: F,
    },
    Add(NodeId, NodeId),
    Sum(NodeId),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    fault: Option<GradFault>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`, if the loss
    /// depends on it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn input(&mut self, t: Tensor<F>) -> NodeId {
        self.push(Op::Input, t)
    }

    /// Bind the named parameter as a trainable leaf.
    pub fn param(&mut self, params: &ParameterSet<F>, name: &str) -> Result<NodeId> {
        let t = params.get(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), t))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (b, c, h, w) = x.dims4("conv2d")?;
        let (f, kc, kh, kw) = k.dims4("conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {c} channels but kernel {:?} expects {kc}", x.shape(), k.shape()),
            ));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} must be 1x1 or 3x3", k.shape()),
            ));
        }
        let bias_data = match bias {
            Some(bid) => {
                let bt = self.value(bid);
                if bt.shape() != [f] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} does not match kernel {:?}", bt.shape(), k.shape()),
                    ));
                }
                Some(bt.data())
            }
            None => None,
        };
        let d = Dims4 { b, c, h, w };
        let y = kernels::conv2d_forward(x.data(), d, k.data(), f, kh, bias_data);
        let value = Tensor::new(vec![b, f, h, w], y)?;
        Ok(self.push(Op::Conv2d { input, kernel, bias }, value))
    }

    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
        stats: &mut RunningStats<F>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("batch_norm")?;
        let g = self.value(gamma);
        let bt = self.value(beta);
        if g.shape() != [c] || bt.shape() != [c] || stats.channels() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {:?} vs gamma {:?}, beta {:?}, running stats of {} channels",
                    x.shape(),
                    g.shape(),
                    bt.shape(),
                    stats.channels()
                ),
            ));
        }
        let d = Dims4 { b, c, h, w };
        let eps = F::of(BN_EPSILON);
        let (y, cache) = match mode {
            Mode::Train => {
                let count = b * h * w;
                if count < 2 {
                    return Err(Error::DegenerateBatch { count });
                }
                let (mean, var) = kernels::channel_moments(x.data(), d);
                let out = kernels::batch_norm_apply(x.data(), d, &mean, &var, g.data(), bt.data(), eps, true);
                let m = F::of(BN_MOMENTUM);
                let unbias = F::of(count as f64 / (count - 1) as f64);
                for ch in 0..c {
                    stats.mean[ch] = m * stats.mean[ch] + (F::one() - m) * mean[ch];
                    stats.var[ch] = m * stats.var[ch] + (F::one() - m) * var[ch] * unbias;
                }
                out
            }
            Mode::Eval => kernels::batch_norm_apply(
                x.data(),
                d,
                &stats.mean,
                &stats.var,
                g.data(),
                bt.data(),
                eps,
                false,
            ),
        };
        let value = Tensor::new(vec![b, c, h, w], y)?;
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            value,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(Op::Relu(input), value)
    }

    pub fn avg_pool_2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("avg_pool_2x2")?;
        let (y, oh, ow) = kernels::avg_pool_2x2_forward(x.data(), Dims4 { b, c, h, w });
        let value = Tensor::new(vec![b, c, oh, ow], y)?;
        Ok(self.push(Op::AvgPool2x2(input), value))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("global_avg_pool")?;
        let n = F::of((h * w) as f64);
        let y: Vec<F> = x
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<F>() / n)
            .collect();
        let value = Tensor::new(vec![b, c], y)?;
        Ok(self.push(Op::GlobalAvgPool(input), value))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (b, _, h, w) = self.value(*first).dims4("concat_channels")?;
        let mut total = 0;
        for &id in inputs {
            let t = self.value(id);
            let (tb, tc, th, tw) = t.dims4("concat_channels")?;
            if (tb, th, tw) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.value(*first).shape(), t.shape()),
                ));
            }
            total += tc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for &id in inputs {
                let t = self.value(id);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![b, total, h, w], data)?;
        Ok(self.push(Op::Concat(inputs.to_vec()), value))
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let wt = self.value(weight);
        let bt = self.value(bias);
        let (rows, inner) = x.dims2("affine")?;
        let (win, cols) = wt.dims2("affine")?;
        if win != inner || bt.shape() != [cols] {
            return Err(Error::shape(
                "affine",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), wt.shape(), bt.shape()),
            ));
        }
        let y = kernels::affine_forward(x.data(), rows, inner, wt.data(), cols, bt.data());
        let value = Tensor::new(vec![rows, cols], y)?;
        Ok(self.push(Op::Affine { input, weight, bias }, value))
    }

    /// Batch-summed softmax cross-entropy; yields a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        let (rows, cols) = z.dims2("softmax_cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), z.shape()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index {
                target: bad,
                classes: cols,
            });
        }
        let loss = kernels::cross_entropy_sum(z.data(), cols, targets);
        let probs = kernels::softmax_rows(z.data(), rows, cols);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Gradient reversal: identity forward, `-lambda` times the gradient backward.
    pub fn grl(&mut self, input: NodeId, lambda: F) -> NodeId {
        let value = self.value(input).clone();
        self.push(Op::Grl { input, lambda }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut value = x.clone();
        value.add_assign(y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(input), value))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum();
        self.push(Op::Sum(input), Tensor::scalar(s))
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<F>) {
        match &mut self.nodes[id.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Populate gradients of the scalar `loss` with respect to every node it
    /// depends on. Gradients from a previous call are discarded first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor<F>) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::Conv2d { input, kernel, bias } => {
                let x = self.value(input);
                let k = self.value(kernel);
                let (b, c, h, w) = x.dims4("conv2d")?;
                let (f, _, ks, _) = k.dims4("conv2d")?;
                let (gx, mut gk, gb) =
                    kernels::conv2d_backward(x.data(), Dims4 { b, c, h, w }, k.data(), f, ks, g.data());
                if self.fault == Some(GradFault::ConvKernel) {
                    gk.iter_mut().for_each(|v| *v *= F::of(1.01));
                }
                let (xs, ks_) = (x.shape().to_vec(), k.shape().to_vec());
                self.accumulate(input, Tensor::new(xs, gx)?);
                self.accumulate(kernel, Tensor::new(ks_, gk)?);
                if let Some(bid) = bias {
                    self.accumulate(bid, Tensor::new(vec![f], gb)?);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let (b, c, h, w) = node.value.dims4("batch_norm")?;
                let (gx, gg, gb) = kernels::batch_norm_backward(
                    g.data(),
                    Dims4 { b, c, h, w },
                    self.value(gamma).data(),
                    cache,
                );
                self.accumulate(input, Tensor::new(vec![b, c, h, w], gx)?);
                self.accumulate(gamma, Tensor::new(vec![c], gg)?);
                self.accumulate(beta, Tensor::new(vec![c], gb)?);
            }
            &Op::Relu(input) => {
                let x = self.value(input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                let t = Tensor::new(x.shape().to_vec(), data)?;
                self.accumulate(input, t);
            }
            &Op::AvgPool2x2(input) => {
                let x = self.value(input);
                let (b, c, h, w) = x.dims4("avg_pool_2x2")?;
                let gx = kernels::avg_pool_2x2_backward(g.data(), Dims4 { b, c, h, w });
                let t = Tensor::new(x.shape().to_vec(), gx)?;
                self.accumulate(input, t);
            }
            &Op::GlobalAvgPool(input) => {
                let x = self.value(input);
                let (_, _, h, w) = x.dims4("global_avg_pool")?;
                let n = F::of((h * w) as f64);
                let mut gx = Vec::with_capacity(x.numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat(gv / n).take(h * w));
                }
                let t = Tensor::new(x.shape().to_vec(), gx)?;
                self.accumulate(input, t);
            }
            Op::Concat(inputs) => {
                let inputs = inputs.clone();
                let (b, total, h, w) = node.value.dims4("concat_channels")?;
                let plane = h * w;
                let mut offset = 0;
                for id in inputs {
                    let c = self.value(id).shape()[1];
                    let mut part = Vec::with_capacity(b * c * plane);
                    for bi in 0..b {
                        let start = (bi * total + offset) * plane;
                        part.extend_from_slice(&g.data()[start..start + c * plane]);
                    }
                    offset += c;
                    self.accumulate(id, Tensor::new(vec![b, c, h, w], part)?);
                }
            }
            &Op::Affine { input, weight, bias } => {
                let x = self.value(input);
                let wt = self.value(weight);
                let (rows, inner) = x.dims2("affine")?;
                let cols = wt.shape()[1];
                let (gx, gw, gb) = kernels::affine_backward(x.data(), rows, inner, wt.data(), cols, g.data());
                self.accumulate(input, Tensor::new(vec![rows, inner], gx)?);
                self.accumulate(weight, Tensor::new(vec![inner, cols], gw)?);
                self.accumulate(bias, Tensor::new(vec![cols], gb)?);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let upstream = g.data()[0];
                let cols = self.value(logits).shape()[1];
                let mut gz = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gz[r * cols + t] -= F::one();
                }
                gz.iter_mut().for_each(|v| *v *= upstream);
                let shape = self.value(logits).shape().to_vec();
                self.accumulate(logits, Tensor::new(shape, gz)?);
            }
            &Op::Grl { input, lambda } => {
                self.accumulate(input, grl_backward(g, lambda));
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            &Op::Reshape(input) => {
                let shape = self.value(input).shape().to_vec();
                self.accumulate(input, g.clone().reshape(shape)?);
            }
            &Op::Sum(input) => {
                let t = Tensor::full(self.value(input).shape(), g.data()[0]);
                self.accumulate(input, t);
            }
        }
        Ok(())
    }

    /// Gradients for every parameter in `params`; parameters the last loss
    /// did not depend on get all-zero gradients.
    pub fn param_grads(&self, params: &ParameterSet<F>) -> Gradients<F> {
        let mut grads = params.zeros_like();
        for node in &self.nodes {
            if let (Op::Param(name), Some(g)) = (&node.op, &node.grad) {
                if let Some(slot) = grads.tensors.get_mut(name) {
                    slot.add_assign(g);
                }
            }
        }
        grads
    }
}
