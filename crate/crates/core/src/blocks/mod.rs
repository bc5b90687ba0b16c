//! The Block abstraction: named, stateful processing entities.
//!
//! Everything that processes signals is a [`Block`]: it is created from a
//! config, set up exactly once against concrete input tensors (allocating its
//! parameters and fixing its output shapes), and then run forward eagerly
//! (inference) or onto a [`Tape`] (training, so gradients can be replayed).
//! Parameters are shared-by-handle ([`Param`]): a validation clone of a block
//! sees the trainer's parameter updates for free, while a data-parallel
//! replica deep-copies the storage.

pub mod config;
pub mod layers;

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, ValueId};
use crate::tensor::{Pcg32, Tensor};

pub use config::{
    ActivationConfig, BnConfig, CnnBlockConfig, ConvConfig, DropoutConfig, InitPara, IpConfig,
    LossConfig, PoolConfig, WeightDecay,
};
pub use layers::{
    AddLayer, BatchNormLayer, ConvolutionLayer, DropoutLayer, InnerProductLayer, MaxoutLayer,
    PoolingLayer, ReLULayer, SoftmaxWithLossLayer,
};

/// Execution mode: training uses batch statistics, dropout, and augmentation;
/// inference is deterministic and consumes no randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// What a parameter tensor is for; decides trainability and checkpoint role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale.
    Gamma,
    /// Batch-norm shift.
    Beta,
    /// Non-trainable state (batch-norm running statistics).
    State,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::State)
    }
}

struct ParamSlot<S> {
    value: Tensor<S>,
    /// Bumped on every write; lets readers detect torn parameter sets.
    generation: u64,
}

/// Named, shared handle to a parameter tensor.
///
/// Cloning shares the storage (validation copies); [`Param::deep_clone`]
/// duplicates it (data-parallel replicas). All access goes through a lock so
/// an optimizer step and a concurrent reader never interleave element-wise.
#[derive(Clone)]
pub struct Param<S> {
    local: String,
    scoped: Option<String>,
    kind: ParamKind,
    slot: Arc<RwLock<ParamSlot<S>>>,
}

impl<S: Scalar> Param<S> {
    pub fn new(local: impl Into<String>, kind: ParamKind, value: Tensor<S>) -> Self {
        Param {
            local: local.into(),
            scoped: None,
            kind,
            slot: Arc::new(RwLock::new(ParamSlot { value, generation: 0 })),
        }
    }

    /// Hierarchical name: `<scope>/<local>` once scoped, `<local>` before.
    pub fn name(&self) -> &str {
        self.scoped.as_deref().unwrap_or(&self.local)
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    /// Prefixes the name; called once when the owning block joins a brain.
    fn scope(&mut self, prefix: &str) {
        self.scoped = Some(format!("{prefix}/{}", self.local));
    }

    /// Snapshot of the current value.
    pub fn value(&self) -> Tensor<S> {
        self.slot.read().expect("param lock poisoned").value.clone()
    }

    /// Snapshot of value and generation taken under one lock acquisition.
    pub fn value_and_generation(&self) -> (Tensor<S>, u64) {
        let guard = self.slot.read().expect("param lock poisoned");
        (guard.value.clone(), guard.generation)
    }

    pub fn generation(&self) -> u64 {
        self.slot.read().expect("param lock poisoned").generation
    }

    pub fn shape(&self) -> Vec<usize> {
        self.slot.read().expect("param lock poisoned").value.shape().to_vec()
    }

    /// Replaces the value (must keep the shape) and bumps the generation.
    pub fn set_value(&self, value: Tensor<S>) -> Result<()> {
        let mut guard = self.slot.write().expect("param lock poisoned");
        if guard.value.shape() != value.shape() {
            return Err(Error::shape(
                "Param::set_value",
                format!(
                    "parameter {} has shape {:?}, refusing {:?}",
                    self.name(),
                    guard.value.shape(),
                    value.shape()
                ),
            ));
        }
        guard.value = value;
        guard.generation += 1;
        Ok(())
    }

    /// In-place update under the write lock; bumps the generation.
    pub fn update_with(&self, f: impl FnOnce(&mut Tensor<S>)) {
        let mut guard = self.slot.write().expect("param lock poisoned");
        f(&mut guard.value);
        guard.generation += 1;
    }

    /// New handle with its own storage (same name/kind, copied value).
    pub fn deep_clone(&self) -> Self {
        Param {
            local: self.local.clone(),
            scoped: self.scoped.clone(),
            kind: self.kind,
            slot: Arc::new(RwLock::new(ParamSlot {
                value: self.value(),
                generation: 0,
            })),
        }
    }

    /// Whether two handles share the same storage.
    pub fn shares_storage_with(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.slot, &other.slot)
    }
}

/// Per-pass training context: the tape, the leaf registered for each
/// parameter, extra loss terms (weight decay), and the pass RNG.
pub struct TrainPass<S: Scalar> {
    pub tape: Tape<S>,
    /// Full parameter name → tape leaf created for it this pass.
    pub param_leaves: BTreeMap<String, ValueId>,
    /// Scalar loss terms beyond the task loss (weight decay).
    pub extra_losses: Vec<ValueId>,
    pub rng: Pcg32,
}

impl<S: Scalar> TrainPass<S> {
    pub fn new(rng: Pcg32) -> Self {
        TrainPass {
            tape: Tape::new(),
            param_leaves: BTreeMap::new(),
            extra_losses: Vec::new(),
            rng,
        }
    }

    /// Tape leaf holding the parameter's current value; reused if the same
    /// parameter was already registered this pass.
    pub fn leaf_for(&mut self, param: &Param<S>) -> ValueId {
        if let Some(&id) = self.param_leaves.get(param.name()) {
            return id;
        }
        let id = self.tape.leaf(param.value(), param.kind().trainable());
        self.param_leaves.insert(param.name().to_string(), id);
        id
    }
}

/// A named, stateful processing entity.
///
/// Lifecycle: construct → [`setup`](Block::setup) exactly once (binds input
/// shapes, allocates parameters, computes the first outputs) → any number of
/// [`forward`](Block::forward) / [`forward_taped`](Block::forward_taped)
/// calls.
pub trait Block<S: Scalar>: Send {
    fn name(&self) -> &str;

    /// Stable layer-kind label (used in graph exports and error messages).
    fn kind(&self) -> &'static str;

    fn is_setup(&self) -> bool;

    /// One-time initialization against concrete inputs. Allocates parameters
    /// (drawing from `rng`), fixes output shapes, and returns the first
    /// outputs.
    fn setup(&mut self, inputs: &[Tensor<S>], rng: &mut Pcg32) -> Result<Vec<Tensor<S>>>;

    /// Eager re-execution with current parameters. `rng` is only consulted by
    /// train-mode dropout.
    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        mode: Mode,
        rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>>;

    /// Train-mode execution onto a tape so gradients can be replayed.
    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>>;

    /// Every parameter this block allocated (trainable and state).
    fn params(&self) -> Vec<Param<S>> {
        Vec::new()
    }

    /// Prefixes all parameter names with `prefix` (called at attach time).
    fn scope_params(&mut self, prefix: &str) {
        let _ = prefix;
    }

    /// Output shapes fixed at setup.
    fn output_shapes(&self) -> Result<Vec<Vec<usize>>>;

    /// Index of the loss scalar among the outputs, if this block bears one.
    fn loss_output_index(&self) -> Option<usize> {
        None
    }

    /// Index of the evaluation scalar (accuracy) among the outputs, if any.
    fn eval_output_index(&self) -> Option<usize> {
        None
    }

    /// Inference-mode clone sharing parameter storage.
    fn clone_for_validation(&self) -> Box<dyn Block<S>>;

    /// Replica with its own parameter storage (data-parallel towers).
    fn clone_replica(&self) -> Box<dyn Block<S>>;
}

/// Shared setup-state guard used by the layer implementations.
fn ensure_not_setup(done: bool, name: &str) -> Result<()> {
    if done {
        return Err(Error::AlreadySetup(format!("block {name}")));
    }
    Ok(())
}

/// Shared "must be setup" guard.
fn ensure_setup(done: bool, name: &str) -> Result<()> {
    if !done {
        return Err(Error::NotSetup(format!("block {name}")));
    }
    Ok(())
}

fn expect_arity(inputs_len: usize, want: usize, name: &str) -> Result<()> {
    if inputs_len != want {
        return Err(Error::Config(format!(
            "block {name} expects {want} input(s), got {inputs_len}"
        )));
    }
    Ok(())
}

/// A block made of sub-blocks chained in sequence.
///
/// Used by [`cnn_block`]; forwards feed each sub-block the previous one's
/// outputs, parameters are the union of the sub-blocks' parameters, and the
/// composite's outputs are the last sub-block's.
pub struct CompositeBlock<S: Scalar> {
    name: String,
    sub_blocks: Vec<Box<dyn Block<S>>>,
    setup_done: bool,
}

impl<S: Scalar> CompositeBlock<S> {
    pub fn new(name: impl Into<String>, sub_blocks: Vec<Box<dyn Block<S>>>) -> Result<Self> {
        let name = name.into();
        if sub_blocks.is_empty() {
            return Err(Error::Config(format!(
                "composite block {name} needs at least one sub-block"
            )));
        }
        Ok(CompositeBlock {
            name,
            sub_blocks,
            setup_done: false,
        })
    }

    pub fn sub_blocks(&self) -> &[Box<dyn Block<S>>] {
        &self.sub_blocks
    }
}

impl<S: Scalar> Block<S> for CompositeBlock<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "cnn_block"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        let mut current = inputs.to_vec();
        for sub in &mut self.sub_blocks {
            current = sub.setup(&current, rng)?;
        }
        self.setup_done = true;
        Ok(current)
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        mode: Mode,
        mut rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        let mut current = inputs.to_vec();
        for sub in &mut self.sub_blocks {
            current = sub.forward(&current, mode, rng.as_deref_mut())?;
        }
        Ok(current)
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        let mut current = inputs.to_vec();
        for sub in &mut self.sub_blocks {
            current = sub.forward_taped(pass, &current)?;
        }
        Ok(current)
    }

    fn params(&self) -> Vec<Param<S>> {
        self.sub_blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn scope_params(&mut self, prefix: &str) {
        for sub in &mut self.sub_blocks {
            sub.scope_params(prefix);
        }
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        self.sub_blocks.last().expect("non-empty").output_shapes()
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(CompositeBlock {
            name: self.name.clone(),
            sub_blocks: self.sub_blocks.iter().map(|b| b.clone_for_validation()).collect(),
            setup_done: self.setup_done,
        })
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        Box::new(CompositeBlock {
            name: self.name.clone(),
            sub_blocks: self.sub_blocks.iter().map(|b| b.clone_replica()).collect(),
            setup_done: self.setup_done,
        })
    }
}

/// Builds the composite convolutional block: convolution, optional batch
/// norm, an activation (relu or maxout), pooling, optional dropout.
///
/// Sub-blocks are named `<name>_conv`, `<name>_bn`, `<name>_relu` /
/// `<name>_maxout`, `<name>_pool`, `<name>_dropout`.
pub fn cnn_block<S: Scalar>(cfg: &CnnBlockConfig) -> Result<CompositeBlock<S>> {
    let base = &cfg.name;
    if base.is_empty() {
        return Err(Error::Config("cnn_block needs a non-empty name".into()));
    }
    let mut subs: Vec<Box<dyn Block<S>>> = Vec::new();
    subs.push(Box::new(ConvolutionLayer::new(
        format!("{base}_conv"),
        &ConvConfig {
            ksize: cfg.ksize.clone(),
            out_channel_num: cfg.out_channel_num,
            strides: cfg.strides.clone(),
            padding: cfg.padding,
            init_para: cfg.init_para.clone(),
            wd: cfg.wd.clone(),
            bias: true,
        },
    )?));
    if cfg.bn {
        subs.push(Box::new(BatchNormLayer::new(
            format!("{base}_bn"),
            &BnConfig::default(),
        )?));
    }
    match cfg.activation.kind.as_str() {
        "relu" => subs.push(Box::new(ReLULayer::new(format!("{base}_relu")))),
        "maxout" => {
            let group_size = cfg.activation.group_size.ok_or_else(|| {
                Error::Config("maxout activation requires group_size".into())
            })?;
            subs.push(Box::new(MaxoutLayer::new(format!("{base}_maxout"), group_size)?));
        }
        other => {
            return Err(Error::Config(format!(
                "unsupported activation type {other:?} (relu or maxout)"
            )))
        }
    }
    subs.push(Box::new(PoolingLayer::new(
        format!("{base}_pool"),
        &PoolConfig {
            ksize: cfg.pool_size.clone(),
            strides: cfg.pool_stride.clone(),
            padding: cfg.pool_padding,
        },
    )?));
    if let Some(keep_prob) = cfg.keep_prob {
        subs.push(Box::new(DropoutLayer::new(
            format!("{base}_dropout"),
            &DropoutConfig { keep_prob },
        )?));
    }
    CompositeBlock::new(base.clone(), subs)
}
