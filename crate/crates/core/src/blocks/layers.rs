//! The layer library: concrete [`Block`] implementations over the kernels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::ValueId;
use crate::tensor::{kernels, Padding, Pcg32, Tensor};

use super::config::{
    spatial_pair, BnConfig, ConvConfig, DropoutConfig, InitPara, IpConfig, LossConfig, PoolConfig,
};
use super::{
    ensure_not_setup, ensure_setup, expect_arity, Block, Mode, Param, ParamKind, TrainPass,
};

fn scalar_from<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}

/// 2-D convolution with owned kernel and bias variables.
#[derive(Clone)]
pub struct ConvolutionLayer<S: Scalar> {
    name: String,
    ksize: (usize, usize),
    strides: (usize, usize),
    padding: Padding,
    out_channels: usize,
    init: InitPara,
    wd_scale: Option<f64>,
    use_bias: bool,
    weights: Option<Param<S>>,
    bias: Option<Param<S>>,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
}

impl<S: Scalar> ConvolutionLayer<S> {
    pub fn new(name: impl Into<String>, cfg: &ConvConfig) -> Result<Self> {
        let ksize = spatial_pair(&cfg.ksize, "ksize")?;
        let strides = match &cfg.strides {
            Some(s) => spatial_pair(s, "strides")?,
            None => (1, 1),
        };
        cfg.init_para.validate()?;
        if let Some(wd) = &cfg.wd {
            wd.validate()?;
        }
        if cfg.out_channel_num == 0 {
            return Err(Error::Config("out_channel_num must be ≥ 1".into()));
        }
        Ok(ConvolutionLayer {
            name: name.into(),
            ksize,
            strides,
            padding: cfg.padding,
            out_channels: cfg.out_channel_num,
            init: cfg.init_para.clone(),
            wd_scale: cfg.wd.as_ref().map(|w| w.scale),
            use_bias: cfg.bias,
            weights: None,
            bias: None,
            out_shapes: Vec::new(),
            setup_done: false,
        })
    }

    fn weights(&self) -> &Param<S> {
        self.weights.as_ref().expect("setup allocated weights")
    }
}

impl<S: Scalar> Block<S> for ConvolutionLayer<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "conv"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let shape = inputs[0].shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "conv.setup",
                format!("block {} expects [N,H,W,C] input, got {shape:?}", self.name),
            ));
        }
        let cin = shape[3];
        let (kh, kw) = self.ksize;
        self.weights = Some(Param::new(
            "weights",
            ParamKind::Weight,
            Tensor::rand_uniform(vec![kh, kw, cin, self.out_channels], self.init.range, rng),
        ));
        if self.use_bias {
            self.bias = Some(Param::new(
                "biases",
                ParamKind::Bias,
                Tensor::zeros(vec![self.out_channels]),
            ));
        }
        self.setup_done = true;
        let out = self.forward(inputs, Mode::Inference, None)?;
        self.out_shapes = out.iter().map(|t| t.shape().to_vec()).collect();
        Ok(out)
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        _mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let w = self.weights().value();
        let b = self.bias.as_ref().map(|p| p.value());
        let out = kernels::conv2d(&inputs[0], &w, b.as_ref(), self.strides, self.padding)?;
        Ok(vec![out])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let w = pass.leaf_for(self.weights());
        let b = self.bias.as_ref().map(|p| pass.leaf_for(p));
        let out = pass.tape.conv2d(inputs[0], w, b, self.strides, self.padding)?;
        if let Some(scale) = self.wd_scale {
            if scale > 0.0 {
                let wd = pass.tape.scaled_sum_squares(w, scalar_from(scale));
                pass.extra_losses.push(wd);
            }
        }
        Ok(vec![out])
    }

    fn params(&self) -> Vec<Param<S>> {
        self.weights.iter().chain(self.bias.iter()).cloned().collect()
    }

    fn scope_params(&mut self, prefix: &str) {
        let scope = format!("{prefix}/{}", self.name);
        if let Some(w) = &mut self.weights {
            w.scope(&scope);
        }
        if let Some(b) = &mut self.bias {
            b.scope(&scope);
        }
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        let mut copy = self.clone();
        copy.weights = copy.weights.map(|p| p.deep_clone());
        copy.bias = copy.bias.map(|p| p.deep_clone());
        Box::new(copy)
    }
}

/// Fully connected layer; flattens non-2D inputs to `[N, D]`.
#[derive(Clone)]
pub struct InnerProductLayer<S: Scalar> {
    name: String,
    out_channels: usize,
    init: InitPara,
    wd_scale: Option<f64>,
    use_bias: bool,
    weights: Option<Param<S>>,
    bias: Option<Param<S>>,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
}

impl<S: Scalar> InnerProductLayer<S> {
    pub fn new(name: impl Into<String>, cfg: &IpConfig) -> Result<Self> {
        cfg.init_para.validate()?;
        if let Some(wd) = &cfg.wd {
            wd.validate()?;
        }
        if cfg.out_channel_num == 0 {
            return Err(Error::Config("out_channel_num must be ≥ 1".into()));
        }
        Ok(InnerProductLayer {
            name: name.into(),
            out_channels: cfg.out_channel_num,
            init: cfg.init_para.clone(),
            wd_scale: cfg.wd.as_ref().map(|w| w.scale),
            use_bias: cfg.bias,
            weights: None,
            bias: None,
            out_shapes: Vec::new(),
            setup_done: false,
        })
    }

    fn weights(&self) -> &Param<S> {
        self.weights.as_ref().expect("setup allocated weights")
    }
}

impl<S: Scalar> Block<S> for InnerProductLayer<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "ip"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        if inputs[0].rank() < 2 {
            return Err(Error::shape(
                "ip.setup",
                format!(
                    "block {} needs an explicit batch axis (rank ≥ 2), got {:?}",
                    self.name,
                    inputs[0].shape()
                ),
            ));
        }
        let d = inputs[0].len() / inputs[0].shape()[0];
        self.weights = Some(Param::new(
            "weights",
            ParamKind::Weight,
            Tensor::rand_uniform(vec![d, self.out_channels], self.init.range, rng),
        ));
        if self.use_bias {
            self.bias = Some(Param::new(
                "biases",
                ParamKind::Bias,
                Tensor::zeros(vec![self.out_channels]),
            ));
        }
        self.setup_done = true;
        let out = self.forward(inputs, Mode::Inference, None)?;
        self.out_shapes = out.iter().map(|t| t.shape().to_vec()).collect();
        Ok(out)
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        _mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let w = self.weights().value();
        let b = self.bias.as_ref().map(|p| p.value());
        Ok(vec![kernels::inner_product(&inputs[0], &w, b.as_ref())?])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let w = pass.leaf_for(self.weights());
        let b = self.bias.as_ref().map(|p| pass.leaf_for(p));
        let out = pass.tape.inner_product(inputs[0], w, b)?;
        if let Some(scale) = self.wd_scale {
            if scale > 0.0 {
                let wd = pass.tape.scaled_sum_squares(w, scalar_from(scale));
                pass.extra_losses.push(wd);
            }
        }
        Ok(vec![out])
    }

    fn params(&self) -> Vec<Param<S>> {
        self.weights.iter().chain(self.bias.iter()).cloned().collect()
    }

    fn scope_params(&mut self, prefix: &str) {
        let scope = format!("{prefix}/{}", self.name);
        if let Some(w) = &mut self.weights {
            w.scope(&scope);
        }
        if let Some(b) = &mut self.bias {
            b.scope(&scope);
        }
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        let mut copy = self.clone();
        copy.weights = copy.weights.map(|p| p.deep_clone());
        copy.bias = copy.bias.map(|p| p.deep_clone());
        Box::new(copy)
    }
}

/// Elementwise rectifier.
#[derive(Clone)]
pub struct ReLULayer {
    name: String,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
}

impl ReLULayer {
    pub fn new(name: impl Into<String>) -> Self {
        ReLULayer {
            name: name.into(),
            out_shapes: Vec::new(),
            setup_done: false,
        }
    }
}

impl<S: Scalar> Block<S> for ReLULayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "relu"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], _rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        self.setup_done = true;
        self.out_shapes = vec![inputs[0].shape().to_vec()];
        Ok(vec![kernels::relu(&inputs[0])])
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        _mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        Ok(vec![kernels::relu(&inputs[0])])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        Ok(vec![pass.tape.relu(inputs[0])])
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }
}

/// Maxout activation over consecutive channel groups.
#[derive(Clone)]
pub struct MaxoutLayer {
    name: String,
    group_size: usize,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
}

impl MaxoutLayer {
    pub fn new(name: impl Into<String>, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::Config("maxout group_size must be ≥ 1".into()));
        }
        Ok(MaxoutLayer {
            name: name.into(),
            group_size,
            out_shapes: Vec::new(),
            setup_done: false,
        })
    }
}

impl<S: Scalar> Block<S> for MaxoutLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "maxout"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], _rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let (out, _) = kernels::maxout(&inputs[0], self.group_size)?;
        self.setup_done = true;
        self.out_shapes = vec![out.shape().to_vec()];
        Ok(vec![out])
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        _mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        Ok(vec![kernels::maxout(&inputs[0], self.group_size)?.0])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        Ok(vec![pass.tape.maxout(inputs[0], self.group_size)?])
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }
}

/// Spatial max pooling.
#[derive(Clone)]
pub struct PoolingLayer {
    name: String,
    ksize: (usize, usize),
    strides: (usize, usize),
    padding: Padding,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
}

impl PoolingLayer {
    pub fn new(name: impl Into<String>, cfg: &PoolConfig) -> Result<Self> {
        let ksize = spatial_pair(&cfg.ksize, "ksize")?;
        let strides = match &cfg.strides {
            Some(s) => spatial_pair(s, "strides")?,
            // Stride defaults to the window: non-overlapping pooling.
            None => ksize,
        };
        Ok(PoolingLayer {
            name: name.into(),
            ksize,
            strides,
            padding: cfg.padding,
            out_shapes: Vec::new(),
            setup_done: false,
        })
    }
}

impl<S: Scalar> Block<S> for PoolingLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "pool"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], _rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let (out, _) = kernels::maxpool2d(&inputs[0], self.ksize, self.strides, self.padding)?;
        self.setup_done = true;
        self.out_shapes = vec![out.shape().to_vec()];
        Ok(vec![out])
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        _mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        Ok(vec![
            kernels::maxpool2d(&inputs[0], self.ksize, self.strides, self.padding)?.0,
        ])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        Ok(vec![pass.tape.maxpool2d(inputs[0], self.ksize, self.strides, self.padding)?])
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }
}

/// Batch normalization with running statistics.
///
/// Train mode normalizes by batch statistics and folds them into the running
/// mean/variance with an exponential moving average; inference mode (and any
/// validation clone) normalizes by the running statistics.
#[derive(Clone)]
pub struct BatchNormLayer<S: Scalar> {
    name: String,
    momentum: f64,
    epsilon: f64,
    affine: bool,
    gamma: Option<Param<S>>,
    beta: Option<Param<S>>,
    running_mean: Option<Param<S>>,
    running_var: Option<Param<S>>,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
    inference_only: bool,
}

impl<S: Scalar> BatchNormLayer<S> {
    pub fn new(name: impl Into<String>, cfg: &BnConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::Config(format!(
                "bn momentum must be in [0, 1), got {}",
                cfg.momentum
            )));
        }
        if !(cfg.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "bn epsilon must be positive, got {}",
                cfg.epsilon
            )));
        }
        Ok(BatchNormLayer {
            name: name.into(),
            momentum: cfg.momentum,
            epsilon: cfg.epsilon,
            affine: cfg.affine,
            gamma: None,
            beta: None,
            running_mean: None,
            running_var: None,
            out_shapes: Vec::new(),
            setup_done: false,
            inference_only: false,
        })
    }

    fn running(&self) -> (&Param<S>, &Param<S>) {
        (
            self.running_mean.as_ref().expect("setup allocated running mean"),
            self.running_var.as_ref().expect("setup allocated running var"),
        )
    }

    /// Folds fresh batch statistics into the running averages.
    fn fold_running(&self, mean: &Tensor<S>, var: &Tensor<S>) {
        let m = scalar_from::<S>(self.momentum);
        let one_minus = S::one() - m;
        let (rm, rv) = self.running();
        rm.update_with(|t| {
            for (r, &b) in t.data_mut().iter_mut().zip(mean.data()) {
                *r = *r * m + b * one_minus;
            }
        });
        rv.update_with(|t| {
            for (r, &b) in t.data_mut().iter_mut().zip(var.data()) {
                *r = *r * m + b * one_minus;
            }
        });
    }
}

impl<S: Scalar> Block<S> for BatchNormLayer<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "bn"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], _rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let c = *inputs[0].shape().last().ok_or_else(|| {
            Error::shape(
                "bn.setup",
                format!("block {} needs a channel axis (rank ≥ 1)", self.name),
            )
        })?;
        if self.affine {
            self.gamma = Some(Param::new(
                "gamma",
                ParamKind::Gamma,
                Tensor::full(vec![c], S::one()),
            ));
            self.beta = Some(Param::new("beta", ParamKind::Beta, Tensor::zeros(vec![c])));
        }
        self.running_mean = Some(Param::new(
            "running_mean",
            ParamKind::State,
            Tensor::zeros(vec![c]),
        ));
        self.running_var = Some(Param::new(
            "running_var",
            ParamKind::State,
            Tensor::full(vec![c], S::one()),
        ));
        // Setup computes shapes with batch statistics but leaves the fresh
        // running averages untouched.
        let got = kernels::batch_norm_train(
            &inputs[0],
            self.gamma.as_ref().map(|p| p.value()).as_ref(),
            self.beta.as_ref().map(|p| p.value()).as_ref(),
            scalar_from(self.epsilon),
        )?;
        self.setup_done = true;
        self.out_shapes = vec![got.output.shape().to_vec()];
        Ok(vec![got.output])
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let gamma = self.gamma.as_ref().map(|p| p.value());
        let beta = self.beta.as_ref().map(|p| p.value());
        let eps = scalar_from(self.epsilon);
        let effective = if self.inference_only { Mode::Inference } else { mode };
        match effective {
            Mode::Train => {
                let got =
                    kernels::batch_norm_train(&inputs[0], gamma.as_ref(), beta.as_ref(), eps)?;
                self.fold_running(&got.mean, &got.var);
                Ok(vec![got.output])
            }
            Mode::Inference => {
                let (rm, rv) = self.running();
                let (rm, rv) = (rm.value(), rv.value());
                Ok(vec![kernels::batch_norm_infer(
                    &inputs[0],
                    gamma.as_ref(),
                    beta.as_ref(),
                    &rm,
                    &rv,
                    eps,
                )?])
            }
        }
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let gamma = self.gamma.as_ref().map(|p| pass.leaf_for(p));
        let beta = self.beta.as_ref().map(|p| pass.leaf_for(p));
        let (out, mean, var) =
            pass.tape
                .batch_norm_train(inputs[0], gamma, beta, scalar_from(self.epsilon))?;
        self.fold_running(&mean, &var);
        Ok(vec![out])
    }

    fn params(&self) -> Vec<Param<S>> {
        self.gamma
            .iter()
            .chain(self.beta.iter())
            .chain(self.running_mean.iter())
            .chain(self.running_var.iter())
            .cloned()
            .collect()
    }

    fn scope_params(&mut self, prefix: &str) {
        let scope = format!("{prefix}/{}", self.name);
        for p in [
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
        .into_iter()
        .flatten()
        {
            p.scope(&scope);
        }
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        let mut copy = self.clone();
        copy.inference_only = true;
        Box::new(copy)
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        let mut copy = self.clone();
        copy.gamma = copy.gamma.map(|p| p.deep_clone());
        copy.beta = copy.beta.map(|p| p.deep_clone());
        copy.running_mean = copy.running_mean.map(|p| p.deep_clone());
        copy.running_var = copy.running_var.map(|p| p.deep_clone());
        Box::new(copy)
    }
}

/// Inverted dropout; identity in inference mode.
#[derive(Clone)]
pub struct DropoutLayer {
    name: String,
    keep_prob: f64,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
    inference_only: bool,
}

impl DropoutLayer {
    pub fn new(name: impl Into<String>, cfg: &DropoutConfig) -> Result<Self> {
        if !(cfg.keep_prob > 0.0 && cfg.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep_prob must be in (0, 1], got {}",
                cfg.keep_prob
            )));
        }
        Ok(DropoutLayer {
            name: name.into(),
            keep_prob: cfg.keep_prob,
            out_shapes: Vec::new(),
            setup_done: false,
            inference_only: false,
        })
    }
}

impl<S: Scalar> Block<S> for DropoutLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], _rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        self.setup_done = true;
        self.out_shapes = vec![inputs[0].shape().to_vec()];
        Ok(vec![inputs[0].clone()])
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        mode: Mode,
        rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let effective = if self.inference_only { Mode::Inference } else { mode };
        if effective == Mode::Inference || self.keep_prob == 1.0 {
            return Ok(vec![inputs[0].clone()]);
        }
        let rng = rng.ok_or_else(|| {
            Error::Config(format!(
                "block {} needs an RNG for train-mode dropout",
                self.name
            ))
        })?;
        Ok(vec![kernels::dropout_train(&inputs[0], self.keep_prob, rng)?.0])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 1, &self.name)?;
        let TrainPass { tape, rng, .. } = pass;
        Ok(vec![tape.dropout(inputs[0], self.keep_prob, rng)?])
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        let mut copy = self.clone();
        copy.inference_only = true;
        Box::new(copy)
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }
}

/// Softmax cross-entropy loss with accuracy readout.
///
/// Inputs: `[logits, labels]` where labels travel as a rank-1 tensor of
/// integer class values. Outputs: `[loss, accuracy, predictions]`.
#[derive(Clone)]
pub struct SoftmaxWithLossLayer {
    name: String,
    class_num: usize,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
}

impl SoftmaxWithLossLayer {
    pub fn new(name: impl Into<String>, cfg: &LossConfig) -> Result<Self> {
        if cfg.class_num < 2 {
            return Err(Error::Config(format!(
                "class_num must be ≥ 2, got {}",
                cfg.class_num
            )));
        }
        Ok(SoftmaxWithLossLayer {
            name: name.into(),
            class_num: cfg.class_num,
            out_shapes: Vec::new(),
            setup_done: false,
        })
    }

    /// Decodes a rank-1 label tensor into class indices, validating range and
    /// integrality.
    pub fn decode_labels<S: Scalar>(labels: &Tensor<S>, class_num: usize) -> Result<Vec<usize>> {
        if labels.rank() != 1 {
            return Err(Error::shape(
                "loss.labels",
                format!("labels must be rank 1 [N], got {:?}", labels.shape()),
            ));
        }
        labels
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = v.to_f64_lossy();
                let rounded = f.round();
                if (f - rounded).abs() > 1e-6 || rounded < 0.0 {
                    return Err(Error::Config(format!(
                        "label at position {i} is {f}, not a class index"
                    )));
                }
                let idx = rounded as usize;
                if idx >= class_num {
                    return Err(Error::Config(format!(
                        "label {idx} out of range for {class_num} classes (position {i})"
                    )));
                }
                Ok(idx)
            })
            .collect()
    }

    fn check_logits<S: Scalar>(&self, logits: &Tensor<S>) -> Result<()> {
        if logits.rank() != 2 || logits.shape()[1] != self.class_num {
            return Err(Error::shape(
                "loss.logits",
                format!(
                    "block {} expects logits [N, {}], got {:?} (class axis)",
                    self.name,
                    self.class_num,
                    logits.shape()
                ),
            ));
        }
        Ok(())
    }

    fn readouts<S: Scalar>(
        logits: &Tensor<S>,
        labels: &[usize],
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let preds = kernels::predictions(logits)?;
        let acc = kernels::accuracy(&preds, labels);
        let preds_tensor = Tensor::new(
            vec![preds.len()],
            preds.iter().map(|&p| S::from_usize(p).unwrap()).collect(),
        )?;
        Ok((Tensor::scalar(scalar_from(acc)), preds_tensor))
    }
}

impl<S: Scalar> Block<S> for SoftmaxWithLossLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "loss"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], _rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 2, &self.name)?;
        self.check_logits(&inputs[0])?;
        self.setup_done = true;
        let out = self.forward(inputs, Mode::Inference, None)?;
        self.out_shapes = out.iter().map(|t| t.shape().to_vec()).collect();
        Ok(out)
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        _mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 2, &self.name)?;
        self.check_logits(&inputs[0])?;
        let labels = Self::decode_labels(&inputs[1], self.class_num)?;
        let got = kernels::softmax_cross_entropy(&inputs[0], &labels)?;
        let (acc, preds) = Self::readouts(&inputs[0], &labels)?;
        Ok(vec![Tensor::scalar(got.loss), acc, preds])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 2, &self.name)?;
        let logits = pass.tape.value(inputs[0]).clone();
        self.check_logits(&logits)?;
        let labels = Self::decode_labels(pass.tape.value(inputs[1]), self.class_num)?;
        let (loss, _probs) = pass.tape.softmax_cross_entropy(inputs[0], labels.clone())?;
        let (acc, preds) = Self::readouts(&logits, &labels)?;
        let acc = pass.tape.constant(acc);
        let preds = pass.tape.constant(preds);
        Ok(vec![loss, acc, preds])
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn loss_output_index(&self) -> Option<usize> {
        Some(0)
    }

    fn eval_output_index(&self) -> Option<usize> {
        Some(1)
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }
}

/// Elementwise merge of two inputs (residual joins).
#[derive(Clone)]
pub struct AddLayer {
    name: String,
    out_shapes: Vec<Vec<usize>>,
    setup_done: bool,
}

impl AddLayer {
    pub fn new(name: impl Into<String>) -> Self {
        AddLayer {
            name: name.into(),
            out_shapes: Vec::new(),
            setup_done: false,
        }
    }
}

impl<S: Scalar> Block<S> for AddLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "add"
    }

    fn is_setup(&self) -> bool {
        self.setup_done
    }

    fn setup(&mut self, inputs: &[Tensor<S>], _rng: &mut Pcg32) -> Result<Vec<Tensor<S>>> {
        ensure_not_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 2, &self.name)?;
        let out = kernels::add(&inputs[0], &inputs[1])?;
        self.setup_done = true;
        self.out_shapes = vec![out.shape().to_vec()];
        Ok(vec![out])
    }

    fn forward(
        &mut self,
        inputs: &[Tensor<S>],
        _mode: Mode,
        _rng: Option<&mut Pcg32>,
    ) -> Result<Vec<Tensor<S>>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 2, &self.name)?;
        Ok(vec![kernels::add(&inputs[0], &inputs[1])?])
    }

    fn forward_taped(
        &mut self,
        pass: &mut TrainPass<S>,
        inputs: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        ensure_setup(self.setup_done, &self.name)?;
        expect_arity(inputs.len(), 2, &self.name)?;
        Ok(vec![pass.tape.add(inputs[0], inputs[1])?])
    }

    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        ensure_setup(self.setup_done, &self.name)?;
        Ok(self.out_shapes.clone())
    }

    fn clone_for_validation(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }

    fn clone_replica(&self) -> Box<dyn Block<S>> {
        Box::new(self.clone())
    }
}
