//! The brain: a DAG assembler over blocks.
//!
//! Blocks are attached in order; each names its inputs by referring to the
//! outputs of earlier blocks (or the reserved system input). Feedback is
//! expressed with `delayed` references, realized as one-step-delay buffers:
//! a delayed input reads the producer's output from the previous pass (zero
//! on the first pass) and never carries gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{Block, Mode, Param, TrainPass};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::ValueId;
use crate::tensor::{Pcg32, Tensor};

/// Reserved input name: the tensors handed to the brain itself.
pub const SYSTEM_IN: &str = "system_in";

/// A named edge: which block (or system input) to read, which of its output
/// indices, and whether the read is delayed by one pass (feedback).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRef {
    pub name: String,
    #[serde(default = "default_idxs")]
    pub idxs: Vec<usize>,
    #[serde(default)]
    pub delayed: bool,
}

fn default_idxs() -> Vec<usize> {
    vec![0]
}

impl InputRef {
    pub fn new(name: impl Into<String>, idxs: Vec<usize>) -> Self {
        InputRef {
            name: name.into(),
            idxs,
            delayed: false,
        }
    }

    /// A feedback edge: reads the producer's previous-pass output.
    pub fn delayed(name: impl Into<String>, idxs: Vec<usize>) -> Self {
        InputRef {
            name: name.into(),
            idxs,
            delayed: true,
        }
    }
}

/// One attached block plus its resolved input edges and latest outputs.
pub struct BrainNode<S: Scalar> {
    block: Box<dyn Block<S>>,
    /// Refs as given at attach time; `None` means "outputs of the previous
    /// block" (or system input 0 for the first block), filled in at setup.
    given_refs: Option<Vec<InputRef>>,
    /// Materialized refs (valid once the brain is set up).
    refs: Vec<InputRef>,
    last_outputs: Vec<Tensor<S>>,
}

impl<S: Scalar> BrainNode<S> {
    pub fn block(&self) -> &dyn Block<S> {
        self.block.as_ref()
    }

    /// The resolved input edges (empty before setup).
    pub fn input_refs(&self) -> &[InputRef] {
        &self.refs
    }

    /// Refs exactly as given at attach time; `None` means the default
    /// previous-block wiring, resolved at setup.
    pub fn given_refs(&self) -> Option<&[InputRef]> {
        self.given_refs.as_deref()
    }

    pub fn last_outputs(&self) -> &[Tensor<S>] {
        &self.last_outputs
    }
}

/// Result of an inference pass.
#[derive(Debug)]
pub struct ForwardOutcome<S: Scalar> {
    /// Task loss (no weight decay).
    pub loss: S,
    /// Evaluation metric (accuracy) if the loss block reports one.
    pub eval: Option<S>,
    /// Outputs of the last attached block.
    pub outputs: Vec<Tensor<S>>,
}

/// Result of a training pass: losses, metric, and the gradient census.
#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    /// Task loss (no weight decay).
    pub loss: S,
    /// Task loss plus all block weight-decay terms; this is what the
    /// gradients differentiate.
    pub total_loss: S,
    pub eval: Option<S>,
    /// Gradient of `total_loss` for every parameter touched this pass, by
    /// full name. Parameters off the loss path get zero gradients.
    pub grads: BTreeMap<String, Tensor<S>>,
}

/// An ordered collection of blocks forming a network.
///
/// Attach order is execution order; every non-delayed input must come from an
/// earlier block. The brain owns the delayed-edge buffers, scopes parameter
/// names (`<brain>/<block>/<var>`), and extracts loss/eval from its single
/// loss-bearing block.
pub struct Brain<S: Scalar> {
    name: String,
    nodes: Vec<BrainNode<S>>,
    index: BTreeMap<String, usize>,
    system_input_count: usize,
    loss_index: Option<usize>,
    /// (producer index, output index) → previous-pass output. Zeros before
    /// the first pass.
    buffers: BTreeMap<(usize, usize), Tensor<S>>,
    setup_done: bool,
}

impl<S: Scalar> Brain<S> {
    pub fn new(name: impl Into<String>) -> Self {
        Brain {
            name: name.into(),
            nodes: Vec::new(),
            index: BTreeMap::new(),
            system_input_count: 0,
            loss_index: None,
            buffers: BTreeMap::new(),
            setup_done: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_setup(&self) -> bool {
        self.setup_done
    }

    pub fn block_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.block.name()).collect()
    }

    pub fn nodes(&self) -> &[BrainNode<S>] {
        &self.nodes
    }

    /// Adds a block to the end of the execution order.
    ///
    /// `inputs: None` chains from the previous block (the first block reads
    /// system input 0). Explicit refs must point at already-attached blocks
    /// or `system_in` unless marked `delayed`.
    pub fn attach(
        &mut self,
        block: Box<dyn Block<S>>,
        inputs: Option<Vec<InputRef>>,
    ) -> Result<()> {
        if self.setup_done {
            return Err(Error::AlreadySetup(format!(
                "brain {}: attach after setup",
                self.name
            )));
        }
        let name = block.name().to_string();
        if name == SYSTEM_IN {
            return Err(Error::Config(format!(
                "{SYSTEM_IN:?} is reserved and cannot name a block"
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        if let Some(refs) = &inputs {
            if refs.is_empty() {
                return Err(Error::Config(format!(
                    "block {name}: explicit inputs must not be empty"
                )));
            }
            for r in refs {
                if r.idxs.is_empty() {
                    return Err(Error::Config(format!(
                        "block {name}: input ref to {:?} has no output indices",
                        r.name
                    )));
                }
                if !r.delayed && r.name != SYSTEM_IN && !self.index.contains_key(&r.name) {
                    return Err(Error::DanglingReference(format!(
                        "block {name} reads {:?}, which is not attached yet",
                        r.name
                    )));
                }
            }
        }
        self.index.insert(name, self.nodes.len());
        self.nodes.push(BrainNode {
            block,
            given_refs: inputs,
            refs: Vec::new(),
            last_outputs: Vec::new(),
        });
        Ok(())
    }

    /// One-time initialization: resolves every edge, runs block setup in
    /// attach order, scopes parameter names, allocates delayed-edge buffers,
    /// and checks the single-loss rule.
    pub fn setup(&mut self, inputs: &[Tensor<S>], rng: &mut Pcg32) -> Result<()> {
        if self.setup_done {
            return Err(Error::AlreadySetup(format!("brain {}", self.name)));
        }
        if inputs.is_empty() {
            return Err(Error::Config(format!(
                "brain {} needs at least one system input",
                self.name
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::Config(format!(
                "brain {} has no blocks attached",
                self.name
            )));
        }
        self.system_input_count = inputs.len();

        // Delayed refs whose producer had not run yet: check their assumed
        // shapes once every block is set up.
        let mut pending: Vec<(String, usize, usize, Vec<usize>)> = Vec::new();

        for i in 0..self.nodes.len() {
            // Materialize default refs now that the previous block's output
            // count is known.
            let refs = match self.nodes[i].given_refs.clone() {
                Some(refs) => refs,
                None if i == 0 => vec![InputRef::new(SYSTEM_IN, vec![0])],
                None => {
                    let prev = &self.nodes[i - 1];
                    let count = prev.last_outputs.len();
                    vec![InputRef::new(
                        prev.block.name(),
                        (0..count).collect(),
                    )]
                }
            };

            // Resolve non-delayed inputs first; delayed ones may need the
            // shape of a sibling input as a placeholder.
            let consumer = self.nodes[i].block.name().to_string();
            let mut slots: Vec<Option<Tensor<S>>> = Vec::new();
            let mut delayed_slots: Vec<(usize, usize, usize)> = Vec::new();
            for r in &refs {
                for &idx in &r.idxs {
                    if r.delayed {
                        let p = *self.index.get(&r.name).ok_or_else(|| {
                            Error::DanglingReference(format!(
                                "block {consumer} reads delayed {:?}, which is not attached",
                                r.name
                            ))
                        })?;
                        delayed_slots.push((slots.len(), p, idx));
                        slots.push(None);
                    } else {
                        slots.push(Some(self.resolve_eager(&consumer, r, idx, inputs, i)?));
                    }
                }
            }
            for (slot, p, idx) in delayed_slots {
                let tensor = if p < i {
                    // Producer already ran: read its recorded shape.
                    let outs = &self.nodes[p].last_outputs;
                    let t = outs.get(idx).ok_or_else(|| {
                        self.out_of_range(&consumer, p, idx, outs.len())
                    })?;
                    Tensor::zeros(t.shape().to_vec())
                } else {
                    // Forward reference: borrow the shape of a sibling input
                    // and verify against the producer once it has run.
                    let like = slots.iter().flatten().next().ok_or_else(|| {
                        Error::Config(format!(
                            "block {consumer}: cannot infer the shape of a delayed input \
                             without at least one non-delayed input"
                        ))
                    })?;
                    pending.push((consumer.clone(), p, idx, like.shape().to_vec()));
                    Tensor::zeros(like.shape().to_vec())
                };
                slots[slot] = Some(tensor);
            }
            let resolved: Vec<Tensor<S>> = slots.into_iter().map(|s| s.unwrap()).collect();

            let brain_name = self.name.clone();
            let node = &mut self.nodes[i];
            let outputs = node.block.setup(&resolved, rng)?;
            node.block.scope_params(&brain_name);
            node.last_outputs = outputs;
            node.refs = refs;
        }

        // Forward-referenced delayed shapes must match what was assumed.
        for (consumer, p, idx, shape) in pending {
            let outs = &self.nodes[p].last_outputs;
            let got = outs
                .get(idx)
                .ok_or_else(|| self.out_of_range(&consumer, p, idx, outs.len()))?;
            if got.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "brain.setup",
                    format!(
                        "delayed edge {}:{idx} → {consumer}: producer emits {:?} but the \
                         consumer was set up with {shape:?}",
                        self.nodes[p].block.name(),
                        got.shape()
                    ),
                ));
            }
        }

        // Delayed buffers start at zero, shaped like the producer's output.
        for i in 0..self.nodes.len() {
            for r in self.nodes[i].refs.clone() {
                if !r.delayed {
                    continue;
                }
                let p = self.index[&r.name];
                for &idx in &r.idxs {
                    let shape = self.nodes[p].last_outputs[idx].shape().to_vec();
                    self.buffers.insert((p, idx), Tensor::zeros(shape));
                }
            }
        }

        let loss_blocks: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.block.loss_output_index().is_some())
            .map(|(i, _)| i)
            .collect();
        if loss_blocks.len() != 1 {
            return Err(Error::Config(format!(
                "brain {} must have exactly one loss-bearing block, found {}",
                self.name,
                loss_blocks.len()
            )));
        }
        self.loss_index = Some(loss_blocks[0]);
        self.setup_done = true;
        Ok(())
    }

    fn out_of_range(&self, consumer: &str, p: usize, idx: usize, count: usize) -> Error {
        Error::Config(format!(
            "block {consumer} reads output {idx} of {:?}, which has {count} output(s)",
            self.nodes[p].block.name()
        ))
    }

    /// Resolves one non-delayed (ref, idx) pair against system inputs or the
    /// outputs of an earlier block. `upto` is the consumer's position.
    fn resolve_eager(
        &self,
        consumer: &str,
        r: &InputRef,
        idx: usize,
        inputs: &[Tensor<S>],
        upto: usize,
    ) -> Result<Tensor<S>> {
        if r.name == SYSTEM_IN {
            return inputs.get(idx).cloned().ok_or_else(|| {
                Error::Config(format!(
                    "block {consumer} reads system input {idx}, but only {} were given",
                    inputs.len()
                ))
            });
        }
        let p = *self.index.get(&r.name).ok_or_else(|| {
            Error::DanglingReference(format!(
                "block {consumer} reads {:?}, which is not attached",
                r.name
            ))
        })?;
        if p >= upto {
            return Err(Error::DanglingReference(format!(
                "block {consumer} reads {:?} non-delayed, but it runs later",
                r.name
            )));
        }
        let outs = &self.nodes[p].last_outputs;
        outs.get(idx)
            .cloned()
            .ok_or_else(|| self.out_of_range(consumer, p, idx, outs.len()))
    }

    fn ensure_setup(&self) -> Result<()> {
        if !self.setup_done {
            return Err(Error::NotSetup(format!("brain {}", self.name)));
        }
        Ok(())
    }

    fn check_input_count(&self, inputs: &[Tensor<S>]) -> Result<()> {
        if inputs.len() != self.system_input_count {
            return Err(Error::Config(format!(
                "brain {} was bound to {} system input(s), got {}",
                self.name,
                self.system_input_count,
                inputs.len()
            )));
        }
        Ok(())
    }

    fn loss_node(&self) -> (usize, usize, Option<usize>) {
        let li = self.loss_index.expect("checked at setup");
        let block = &self.nodes[li].block;
        (
            li,
            block.loss_output_index().expect("loss block"),
            block.eval_output_index(),
        )
    }

    /// Executes all blocks eagerly and refreshes the delayed-edge buffers.
    ///
    /// `rng` is only consulted by train-mode dropout.
    pub fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        mode: Mode,
        mut rng: Option<&mut Pcg32>,
    ) -> Result<ForwardOutcome<S>> {
        self.ensure_setup()?;
        self.check_input_count(inputs)?;
        for i in 0..self.nodes.len() {
            let resolved: Vec<Tensor<S>> = {
                let consumer = self.nodes[i].block.name().to_string();
                let mut slots = Vec::new();
                for r in &self.nodes[i].refs {
                    for &idx in &r.idxs {
                        if r.delayed {
                            let p = self.index[&r.name];
                            slots.push(self.buffers[&(p, idx)].clone());
                        } else {
                            slots.push(self.resolve_eager(&consumer, r, idx, inputs, i)?);
                        }
                    }
                }
                slots
            };
            let node = &mut self.nodes[i];
            node.last_outputs = node.block.forward(&resolved, mode, rng.as_deref_mut())?;
        }
        self.refresh_buffers();
        let (li, loss_idx, eval_idx) = self.loss_node();
        Ok(ForwardOutcome {
            loss: self.nodes[li].last_outputs[loss_idx].item(),
            eval: eval_idx.map(|e| self.nodes[li].last_outputs[e].item()),
            outputs: self.nodes.last().expect("non-empty").last_outputs.clone(),
        })
    }

    /// One training pass: tapes every block, differentiates
    /// `task loss + Σ weight decay`, and returns the per-parameter gradients.
    ///
    /// Delayed inputs enter the tape as constants, so their gradient is
    /// exactly zero; the buffers are refreshed from this pass's outputs
    /// afterwards.
    pub fn forward_backward(
        &mut self,
        inputs: &[Tensor<S>],
        rng: Pcg32,
    ) -> Result<TrainOutcome<S>> {
        self.ensure_setup()?;
        self.check_input_count(inputs)?;
        let mut pass = TrainPass::new(rng);
        let mut sys_ids: Vec<Option<ValueId>> = vec![None; inputs.len()];
        let mut out_ids: Vec<Vec<ValueId>> = Vec::with_capacity(self.nodes.len());

        for i in 0..self.nodes.len() {
            let mut resolved: Vec<ValueId> = Vec::new();
            {
                let consumer = self.nodes[i].block.name();
                for r in &self.nodes[i].refs {
                    for &idx in &r.idxs {
                        if r.delayed {
                            let p = self.index[&r.name];
                            resolved
                                .push(pass.tape.constant(self.buffers[&(p, idx)].clone()));
                        } else if r.name == SYSTEM_IN {
                            if idx >= inputs.len() {
                                return Err(Error::Config(format!(
                                    "block {consumer} reads system input {idx}, but only {} \
                                     were given",
                                    inputs.len()
                                )));
                            }
                            let id = *sys_ids[idx]
                                .get_or_insert_with(|| pass.tape.constant(inputs[idx].clone()));
                            resolved.push(id);
                        } else {
                            let p = self.index[&r.name];
                            let ids = &out_ids[p];
                            let id = ids.get(idx).copied().ok_or_else(|| {
                                self.out_of_range(consumer, p, idx, ids.len())
                            })?;
                            resolved.push(id);
                        }
                    }
                }
            }
            let ids = self.nodes[i].block.forward_taped(&mut pass, &resolved)?;
            out_ids.push(ids);
        }

        let (li, loss_idx, eval_idx) = self.loss_node();
        let task_loss_id = out_ids[li][loss_idx];
        let total_id = if pass.extra_losses.is_empty() {
            task_loss_id
        } else {
            let mut terms = vec![task_loss_id];
            terms.extend(pass.extra_losses.iter().copied());
            pass.tape.sum_scalars(terms)?
        };
        pass.tape.backward(total_id)?;

        let TrainPass {
            mut tape,
            param_leaves,
            ..
        } = pass;
        let mut grads = BTreeMap::new();
        for (name, id) in &param_leaves {
            let grad = tape
                .take_grad(*id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape().to_vec()));
            grads.insert(name.clone(), grad);
        }

        for (i, ids) in out_ids.iter().enumerate() {
            self.nodes[i].last_outputs = ids.iter().map(|&id| tape.value(id).clone()).collect();
        }
        self.refresh_buffers();

        Ok(TrainOutcome {
            loss: tape.value(task_loss_id).item(),
            total_loss: tape.value(total_id).item(),
            eval: eval_idx.map(|e| self.nodes[li].last_outputs[e].item()),
            grads,
        })
    }

    /// Copies this pass's producer outputs into the delayed-edge buffers.
    fn refresh_buffers(&mut self) {
        let keys: Vec<(usize, usize)> = self.buffers.keys().copied().collect();
        for (p, idx) in keys {
            let fresh = self.nodes[p].last_outputs[idx].clone();
            self.buffers.insert((p, idx), fresh);
        }
    }

    /// Every parameter of every block, in attach order.
    pub fn params(&self) -> Vec<Param<S>> {
        self.nodes.iter().flat_map(|n| n.block.params()).collect()
    }

    /// Parameters the optimizer may update (excludes running statistics).
    pub fn trainable_params(&self) -> Vec<Param<S>> {
        self.params()
            .into_iter()
            .filter(|p| p.kind().trainable())
            .collect()
    }

    /// Full name → parameter handle.
    pub fn param_map(&self) -> BTreeMap<String, Param<S>> {
        self.params()
            .into_iter()
            .map(|p| (p.name().to_string(), p))
            .collect()
    }

    /// The `idx`-th output of the named block from the most recent pass.
    pub fn data(&self, block: &str, idx: usize) -> Result<Tensor<S>> {
        let i = *self
            .index
            .get(block)
            .ok_or_else(|| Error::UnknownName(block.to_string()))?;
        self.nodes[i].last_outputs.get(idx).cloned().ok_or_else(|| {
            self.out_of_range(block, i, idx, self.nodes[i].last_outputs.len())
        })
    }

    fn clone_with(
        &self,
        clone_block: impl Fn(&dyn Block<S>) -> Box<dyn Block<S>>,
    ) -> Brain<S> {
        Brain {
            name: self.name.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| BrainNode {
                    block: clone_block(n.block.as_ref()),
                    given_refs: n.given_refs.clone(),
                    refs: n.refs.clone(),
                    last_outputs: n.last_outputs.clone(),
                })
                .collect(),
            index: self.index.clone(),
            system_input_count: self.system_input_count,
            loss_index: self.loss_index,
            buffers: self.buffers.clone(),
            setup_done: self.setup_done,
        }
    }

    /// Inference clone sharing every parameter: batch norm uses running
    /// statistics and dropout is disabled regardless of the requested mode.
    pub fn get_val_copy(&self) -> Result<Brain<S>> {
        self.ensure_setup()?;
        Ok(self.clone_with(|b| b.clone_for_validation()))
    }

    /// Training replica with its own parameter storage (data-parallel
    /// towers).
    pub fn clone_replica(&self) -> Result<Brain<S>> {
        self.ensure_setup()?;
        Ok(self.clone_with(|b| b.clone_replica()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{IpConfig, LossConfig};
    use crate::blocks::{InnerProductLayer, ReLULayer, SoftmaxWithLossLayer};

    fn ip(name: &str, out: usize) -> Box<dyn Block<f64>> {
        let cfg: IpConfig =
            serde_json::from_value(serde_json::json!({"out_channel_num": out})).unwrap();
        Box::new(InnerProductLayer::new(name, &cfg).unwrap())
    }

    fn loss(name: &str, classes: usize) -> Box<dyn Block<f64>> {
        Box::new(SoftmaxWithLossLayer::new(name, &LossConfig { class_num: classes }).unwrap())
    }

    fn two_block_brain() -> Brain<f64> {
        let mut brain = Brain::new("brain");
        brain.attach(ip("ip1", 3), None).unwrap();
        brain
            .attach(
                loss("loss", 3),
                Some(vec![
                    InputRef::new("ip1", vec![0]),
                    InputRef::new(SYSTEM_IN, vec![1]),
                ]),
            )
            .unwrap();
        brain
    }

    fn xy() -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::new(vec![2, 4], (0..8).map(|v| v as f64 / 10.0).collect()).unwrap(),
            Tensor::new(vec![2], vec![0.0, 2.0]).unwrap(),
        )
    }

    #[test]
    fn reserved_name_is_rejected() {
        let mut brain = Brain::<f64>::new("brain");
        let err = brain.attach(Box::new(ReLULayer::new(SYSTEM_IN)), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut brain = Brain::<f64>::new("brain");
        brain.attach(Box::new(ReLULayer::new("a")), None).unwrap();
        let err = brain.attach(Box::new(ReLULayer::new("a")), None).unwrap_err();
        assert!(matches!(err, Error::DuplicateName(_)));
    }

    #[test]
    fn dangling_reference_is_rejected_at_attach() {
        let mut brain = Brain::<f64>::new("brain");
        let err = brain
            .attach(
                Box::new(ReLULayer::new("a")),
                Some(vec![InputRef::new("nope", vec![0])]),
            )
            .unwrap_err();
        assert!(matches!(err, Error::DanglingReference(_)));
    }

    #[test]
    fn setup_requires_at_least_one_input() {
        let mut brain = two_block_brain();
        let err = brain.setup(&[], &mut Pcg32::new(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn exactly_one_loss_block_is_required() {
        let mut brain = Brain::<f64>::new("brain");
        brain.attach(ip("ip1", 3), None).unwrap();
        let (x, _) = xy();
        let err = brain.setup(&[x], &mut Pcg32::new(1, 1)).unwrap_err();
        assert!(err.to_string().contains("loss-bearing"), "got {err}");
    }

    #[test]
    fn attach_after_setup_is_rejected() {
        let mut brain = two_block_brain();
        let (x, y) = xy();
        brain.setup(&[x, y], &mut Pcg32::new(1, 1)).unwrap();
        let err = brain.attach(Box::new(ReLULayer::new("late")), None).unwrap_err();
        assert!(matches!(err, Error::AlreadySetup(_)));
    }

    #[test]
    fn default_refs_chain_from_the_previous_block() {
        let mut brain = two_block_brain();
        let (x, y) = xy();
        brain.setup(&[x, y], &mut Pcg32::new(1, 1)).unwrap();
        assert_eq!(
            brain.nodes()[0].input_refs(),
            &[InputRef::new(SYSTEM_IN, vec![0])]
        );
        assert_eq!(brain.nodes()[1].input_refs().len(), 2);
    }

    #[test]
    fn params_are_scoped_with_the_brain_name() {
        let mut brain = two_block_brain();
        let (x, y) = xy();
        brain.setup(&[x, y], &mut Pcg32::new(1, 1)).unwrap();
        let names: Vec<String> =
            brain.params().iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names, vec!["brain/ip1/weights", "brain/ip1/biases"]);
    }

    #[test]
    fn forward_requires_setup() {
        let mut brain = two_block_brain();
        let (x, y) = xy();
        let err = brain.forward(&[x, y], Mode::Inference, None).unwrap_err();
        assert!(matches!(err, Error::NotSetup(_)));
    }

    #[test]
    fn data_access_by_name_and_unknown_name_error() {
        let mut brain = two_block_brain();
        let (x, y) = xy();
        brain.setup(&[x.clone(), y.clone()], &mut Pcg32::new(1, 1)).unwrap();
        brain.forward(&[x, y], Mode::Inference, None).unwrap();
        assert_eq!(brain.data("ip1", 0).unwrap().shape(), &[2, 3]);
        assert!(matches!(brain.data("nope", 0), Err(Error::UnknownName(_))));
        assert!(brain.data("ip1", 5).is_err());
    }

    #[test]
    fn gradients_cover_exactly_the_trainable_params() {
        let mut brain = two_block_brain();
        let (x, y) = xy();
        brain.setup(&[x.clone(), y.clone()], &mut Pcg32::new(1, 1)).unwrap();
        let out = brain.forward_backward(&[x, y], Pcg32::new(2, 2)).unwrap();
        let names: Vec<&String> = out.grads.keys().collect();
        assert_eq!(names, vec!["brain/ip1/biases", "brain/ip1/weights"]);
        assert!(out.loss > 0.0);
        assert_eq!(out.loss, out.total_loss, "no weight decay configured");
    }
}
