//! Reverse-mode autodiff: a tape of op records replayed backwards.
//!
//! Forward computations are expressed through [`Tape`] builder methods, each
//! of which runs the corresponding kernel eagerly, stores whatever the
//! backward pass will need (argmax records, dropout masks, batch statistics,
//! softmax probabilities), and returns a [`ValueId`] handle. Because every op
//! only consumes previously created ids, record order is a topological order,
//! and [`Tape::backward`] simply walks it in reverse, summing gradient
//! contributions into shared inputs.
//!
//! A tape lives for one forward/backward pass and is confined to one worker.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Padding, Pcg32, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    /// Whether any leaf under this node wants a gradient; nodes with no such
    /// leaf are skipped entirely during backward.
    needs_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        strides: (usize, usize),
        padding: Padding,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    Relu {
        x: ValueId,
    },
    Maxout {
        x: ValueId,
        argmax: Vec<usize>,
    },
    InnerProduct {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    },
    BatchNorm {
        x: ValueId,
        gamma: Option<ValueId>,
        beta: Option<ValueId>,
        mean: Tensor<S>,
        var: Tensor<S>,
        epsilon: S,
    },
    Dropout {
        x: ValueId,
        mask: Vec<bool>,
        keep_prob: f64,
    },
    SoftmaxXent {
        x: ValueId,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    ScaledSumSquares {
        x: ValueId,
        scale: S,
    },
    SumScalars {
        xs: Vec<ValueId>,
    },
}

/// Wengert tape: values, op records, and (after [`Tape::backward`]) gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Records a leaf value. Only leaves with `requires_grad` accumulate a
    /// gradient; constants (inputs, delayed-edge reads) use `false`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a gradient-blocked leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> ValueId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the last [`Tape::backward`] call.
    ///
    /// `None` for nodes that do not require gradients or were not reached.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Moves the gradient out of the tape (used when draining results).
    pub fn take_grad(&mut self, id: ValueId) -> Option<Tensor<S>> {
        self.nodes[id.0].grad.take()
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> ValueId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        strides: (usize, usize),
        padding: Padding,
    ) -> Result<ValueId> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
            strides,
            padding,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || b.is_some_and(|id| self.needs(id));
        Ok(self.push(out, needs, Op::Conv2d { x, w, b, strides, padding }))
    }

    pub fn maxpool2d(
        &mut self,
        x: ValueId,
        ksize: (usize, usize),
        strides: (usize, usize),
        padding: Padding,
    ) -> Result<ValueId> {
        let (out, argmax) = kernels::maxpool2d(self.value(x), ksize, strides, padding)?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = kernels::relu(self.value(x));
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn maxout(&mut self, x: ValueId, group_size: usize) -> Result<ValueId> {
        let (out, argmax) = kernels::maxout(self.value(x), group_size)?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Maxout { x, argmax }))
    }

    pub fn inner_product(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    ) -> Result<ValueId> {
        let out = kernels::inner_product(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
        )?;
        let needs =
            self.needs(x) || self.needs(w) || b.is_some_and(|id| self.needs(id));
        Ok(self.push(out, needs, Op::InnerProduct { x, w, b }))
    }

    /// Train-mode batch normalization; also returns the batch statistics so
    /// the caller can fold them into running averages.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: Option<ValueId>,
        beta: Option<ValueId>,
        epsilon: S,
    ) -> Result<(ValueId, Tensor<S>, Tensor<S>)> {
        let got = kernels::batch_norm_train(
            self.value(x),
            gamma.map(|id| self.value(id)),
            beta.map(|id| self.value(id)),
            epsilon,
        )?;
        let needs = self.needs(x)
            || gamma.is_some_and(|id| self.needs(id))
            || beta.is_some_and(|id| self.needs(id));
        let id = self.push(
            got.output,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: got.mean.clone(),
                var: got.var.clone(),
                epsilon,
            },
        );
        Ok((id, got.mean, got.var))
    }

    pub fn dropout(&mut self, x: ValueId, keep_prob: f64, rng: &mut Pcg32) -> Result<ValueId> {
        let (out, mask) = kernels::dropout_train(self.value(x), keep_prob, rng)?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Dropout { x, mask, keep_prob }))
    }

    /// Records the softmax cross-entropy loss; also returns the probabilities
    /// for prediction/accuracy readouts.
    pub fn softmax_cross_entropy(
        &mut self,
        x: ValueId,
        labels: Vec<usize>,
    ) -> Result<(ValueId, Tensor<S>)> {
        let got = kernels::softmax_cross_entropy(self.value(x), &labels)?;
        let needs = self.needs(x);
        let probs = got.probs.clone();
        let id = self.push(
            Tensor::scalar(got.loss),
            needs,
            Op::SoftmaxXent { x, labels, probs: got.probs },
        );
        Ok((id, probs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Add { a, b }))
    }

    /// `scale · Σ x²`, the weight-decay penalty, as a scalar node.
    pub fn scaled_sum_squares(&mut self, x: ValueId, scale: S) -> ValueId {
        let out = Tensor::scalar(kernels::scaled_sum_squares(self.value(x), scale));
        let needs = self.needs(x);
        self.push(out, needs, Op::ScaledSumSquares { x, scale })
    }

    /// Sum of scalar nodes (task loss + weight-decay terms).
    pub fn sum_scalars(&mut self, xs: Vec<ValueId>) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Config("sum_scalars needs at least one term".into()));
        }
        let mut total = S::zero();
        for &id in &xs {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::shape(
                    "sum_scalars",
                    format!("term has shape {:?}, expected a scalar", v.shape()),
                ));
            }
            total += v.item();
        }
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(Tensor::scalar(total), needs, Op::SumScalars { xs }))
    }

    /// Replays the tape in reverse from `root`, accumulating gradients.
    ///
    /// `root` must hold a scalar. Any gradients from a previous call are
    /// discarded first.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be a scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(S::one()));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(upstream) = self.nodes[id].grad.clone() else {
                continue; // not on any path from the root
            };
            // Inputs always precede the node, so split off the prefix for
            // mutable accumulation while the node itself stays borrowed.
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, strides, padding } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &before[x.0].value,
                        &before[w.0].value,
                        *strides,
                        *padding,
                        &upstream,
                    )?;
                    accumulate(before, *x, gx)?;
                    accumulate(before, *w, gw)?;
                    if let Some(b) = b {
                        accumulate(before, *b, gb)?;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let gx = kernels::maxpool2d_backward(
                        before[x.0].value.shape(),
                        argmax,
                        &upstream,
                    )?;
                    accumulate(before, *x, gx)?;
                }
                Op::Relu { x } => {
                    let gx = kernels::relu_backward(&before[x.0].value, &upstream)?;
                    accumulate(before, *x, gx)?;
                }
                Op::Maxout { x, argmax } => {
                    let gx = kernels::maxout_backward(
                        before[x.0].value.shape(),
                        argmax,
                        &upstream,
                    )?;
                    accumulate(before, *x, gx)?;
                }
                Op::InnerProduct { x, w, b } => {
                    let (gx, gw, gb) = kernels::inner_product_backward(
                        &before[x.0].value,
                        &before[w.0].value,
                        &upstream,
                    )?;
                    accumulate(before, *x, gx)?;
                    accumulate(before, *w, gw)?;
                    if let Some(b) = b {
                        accumulate(before, *b, gb)?;
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, var, epsilon } => {
                    let (gx, ggamma, gbeta) = kernels::batch_norm_backward(
                        &before[x.0].value,
                        gamma.map(|id| &before[id.0].value),
                        mean,
                        var,
                        *epsilon,
                        &upstream,
                    )?;
                    accumulate(before, *x, gx)?;
                    if let Some(g) = gamma {
                        accumulate(before, *g, ggamma)?;
                    }
                    if let Some(b) = beta {
                        accumulate(before, *b, gbeta)?;
                    }
                }
                Op::Dropout { x, mask, keep_prob } => {
                    let gx = kernels::dropout_backward(mask, *keep_prob, &upstream)?;
                    accumulate(before, *x, gx)?;
                }
                Op::SoftmaxXent { x, labels, probs } => {
                    let gx = kernels::softmax_cross_entropy_backward(
                        probs,
                        labels,
                        upstream.item(),
                    );
                    accumulate(before, *x, gx)?;
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(before, a, upstream.clone())?;
                    accumulate(before, b, upstream)?;
                }
                Op::ScaledSumSquares { x, scale } => {
                    let gx = kernels::scaled_sum_squares_backward(
                        &before[x.0].value,
                        *scale,
                        upstream.item(),
                    );
                    accumulate(before, *x, gx)?;
                }
                Op::SumScalars { xs } => {
                    for &term in xs {
                        accumulate(before, term, upstream.clone())?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sums `g` into the gradient slot of `id`, creating it on first touch.
fn accumulate<S: Scalar>(nodes: &mut [Node<S>], id: ValueId, g: Tensor<S>) -> Result<()> {
    let node = &mut nodes[id.0];
    if !node.needs_grad {
        return Ok(()); // constant: gradient is blocked here
    }
    match &mut node.grad {
        Some(acc) => acc.accumulate(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_receives_summed_gradient() {
        // y = x + x on a scalar: dy/dx must be exactly 2.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn relu_routes_gradient_by_input_sign() {
        // loss = ½ Σ relu(x)² → dloss/dx = relu(x) masked by x > 0.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        let loss = tape.scaled_sum_squares(y, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn constants_block_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 1.0);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreached_nodes_have_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let orphan = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.scaled_sum_squares(x, 1.0);
        tape.backward(y).unwrap();
        assert!(tape.grad(orphan).is_none());
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn second_backward_resets_accumulators() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.scaled_sum_squares(x, 1.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0, "gradients must not double");
    }

    #[test]
    fn image_pipeline_end_to_end_shapes() {
        let mut rng = Pcg32::new(1, 1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::rand_uniform(vec![2, 8, 8, 1], 1.0, &mut rng));
        let w = tape.leaf(Tensor::rand_uniform(vec![3, 3, 1, 4], 0.5, &mut rng), true);
        let b = tape.leaf(Tensor::zeros(vec![4]), true);
        let c = tape.conv2d(x, w, Some(b), (1, 1), Padding::Same).unwrap();
        let r = tape.relu(c);
        let p = tape.maxpool2d(r, (2, 2), (2, 2), Padding::Same).unwrap();
        let fw = tape.leaf(Tensor::rand_uniform(vec![64, 3], 0.5, &mut rng), true);
        let ip = tape.inner_product(p, fw, None).unwrap();
        let (loss, probs) = tape.softmax_cross_entropy(ip, vec![0, 2]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(probs.shape(), &[2, 3]);
        assert_eq!(tape.grad(w).unwrap().shape(), &[3, 3, 1, 4]);
        assert_eq!(tape.grad(b).unwrap().shape(), &[4]);
        assert_eq!(tape.grad(fw).unwrap().shape(), &[64, 3]);
        assert!(tape.grad(x).is_none(), "input was a constant");
    }
}
