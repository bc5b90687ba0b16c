//! The training driver ("kid"): owns sensor, brain, optimizer and engine,
//! runs the practice loop on the global clock, validates on an inference
//! clone, and checkpoints everything needed to resume bit-exactly.
//!
//! The clock counts optimizer applications: it starts at 0, increments by
//! exactly one per step, and every piece of run randomness (shuffles,
//! augmentation, dropout) is keyed by it, which is what makes checkpoint
//! resume reproduce an uninterrupted run.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brain::Brain;
use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::kongfu::KongFu;
use crate::observer::{DistributionSink, ScalarSink};
use crate::scalar::Scalar;
use crate::sensor::FeedSensor;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"AKCK";
const CHECKPOINT_VERSION: u32 = 1;
/// Checkpoint entry holding the clock (rank 0).
const CLOCK_ENTRY: &str = "clock";
/// Prefix for optimizer velocity entries.
const VELOCITY_PREFIX: &str = "velocity/";

/// When to stop practicing. Exactly one bound; a config offering both (or
/// neither) is rejected rather than guessed at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    MaxSteps(u64),
    MaxEpoch(u64),
}

/// Serde form of the driver section:
/// `{"max_steps": 100, "val_interval": 50}` or `{"max_epoch": 2}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KidConfig {
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub max_epoch: Option<u64>,
    #[serde(default = "default_val_interval")]
    pub val_interval: u64,
    #[serde(default)]
    pub log_dir: Option<String>,
}

fn default_val_interval() -> u64 {
    50
}

impl KidConfig {
    pub fn stop_rule(&self) -> Result<StopRule> {
        match (self.max_steps, self.max_epoch) {
            (Some(steps), None) if steps > 0 => Ok(StopRule::MaxSteps(steps)),
            (None, Some(epochs)) if epochs > 0 => Ok(StopRule::MaxEpoch(epochs)),
            (Some(_), Some(_)) => Err(Error::Config(
                "give max_steps or max_epoch, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "one of max_steps or max_epoch is required".into(),
            )),
            _ => Err(Error::Config("stopping bound must be at least 1".into())),
        }
    }
}

/// What a finished (or interrupted-at-bound) practice run reports.
#[derive(Clone, Debug)]
pub struct Metrics {
    pub clock: u64,
    pub train_loss: f64,
    pub train_eval: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Assembles sensor + brain + optimizer (+ engine) and drives training.
pub struct Kid<S: Scalar> {
    sensor: FeedSensor<S>,
    brain: Brain<S>,
    val_brain: Option<Brain<S>>,
    kongfu: KongFu<S>,
    engine_config: EngineConfig,
    engine: Option<Engine<S>>,
    stop: StopRule,
    val_interval: u64,
    clock: u64,
    seed: u64,
    log_dir: Option<PathBuf>,
    scalars: Option<ScalarSink>,
    distributions: Option<DistributionSink>,
    setup_done: bool,
}

impl<S: Scalar> Kid<S> {
    pub fn new(sensor: FeedSensor<S>, brain: Brain<S>, kongfu: KongFu<S>, stop: StopRule) -> Self {
        Kid {
            sensor,
            brain,
            val_brain: None,
            kongfu,
            engine_config: EngineConfig::default(),
            engine: None,
            stop,
            val_interval: default_val_interval(),
            clock: 0,
            seed: 0,
            log_dir: None,
            scalars: None,
            distributions: None,
            setup_done: false,
        }
    }

    pub fn with_engine(mut self, config: EngineConfig) -> Self {
        self.engine_config = config;
        self
    }

    pub fn with_val_interval(mut self, interval: u64) -> Result<Self> {
        if interval == 0 {
            return Err(Error::Config("val_interval must be at least 1".into()));
        }
        self.val_interval = interval;
        Ok(self)
    }

    /// Seed for every run-level random stream (tower dropout, shuffles go
    /// through the sensor's own seed).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Enables CSV summaries and the final checkpoint under this directory.
    pub fn with_log_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.log_dir = Some(dir.into());
        self
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn brain(&self) -> &Brain<S> {
        &self.brain
    }

    pub fn brain_mut(&mut self) -> &mut Brain<S> {
        &mut self.brain
    }

    pub fn sensor(&self) -> &FeedSensor<S> {
        &self.sensor
    }

    pub fn kongfu(&self) -> &KongFu<S> {
        &self.kongfu
    }

    pub fn kongfu_mut(&mut self) -> &mut KongFu<S> {
        &mut self.kongfu
    }

    /// Total steps this kid will run to, given its stopping rule.
    pub fn target_steps(&self) -> u64 {
        match self.stop {
            StopRule::MaxSteps(steps) => steps,
            StopRule::MaxEpoch(epochs) => self.sensor.steps_per_epoch() as u64 * epochs,
        }
    }

    /// Wires everything: sets the brain up from a sensor batch (unless the
    /// caller already did), builds the inference clone and engine towers,
    /// and opens the summary sinks.
    pub fn setup(&mut self) -> Result<()> {
        if self.setup_done {
            return Err(Error::AlreadySetup("kid".into()));
        }
        if !self.brain.is_setup() {
            let (data, labels) = self.sensor.setup_batch()?;
            let mut rng = crate::tensor::Pcg32::for_stream(
                self.seed,
                crate::tensor::streams::INIT,
                0,
            );
            self.brain.setup(&[data, labels], &mut rng)?;
        }
        self.val_brain = Some(self.brain.get_val_copy()?);
        self.engine = Some(Engine::new(&self.engine_config, &self.brain, self.seed)?);
        if let Some(dir) = &self.log_dir {
            self.scalars = Some(ScalarSink::create(&dir.join("scalars.csv"))?);
            self.distributions = Some(DistributionSink::create(&dir.join("distributions.csv"))?);
        }
        self.setup_done = true;
        Ok(())
    }

    fn ensure_setup(&self) -> Result<()> {
        if self.setup_done {
            Ok(())
        } else {
            Err(Error::NotSetup("kid".into()))
        }
    }

    /// Full pass over the validation split with the inference clone:
    /// `(loss, accuracy)`, size-weighted over batches. Touches no training
    /// state — no parameter, no running statistic, no RNG draw.
    pub fn validate(&mut self) -> Result<(f64, f64)> {
        self.ensure_setup()?;
        let num_val = self.sensor.source().num_val();
        if num_val == 0 {
            return Err(Error::Config("validation split is empty".into()));
        }
        let val_brain = self.val_brain.as_mut().expect("setup built the clone");
        let mut loss = 0.0;
        let mut accuracy = 0.0;
        for i in 0..self.sensor.val_batch_count() {
            let (data, labels) = self.sensor.val_batch(i)?;
            let weight = data.shape()[0] as f64 / num_val as f64;
            let outcome = val_brain.forward(
                &[data, labels],
                crate::blocks::Mode::Inference,
                None,
            )?;
            loss += weight * outcome.loss.to_f64_lossy();
            accuracy += weight
                * outcome
                    .eval
                    .map(|e| e.to_f64_lossy())
                    .ok_or_else(|| Error::Config("loss block reports no accuracy".into()))?;
        }
        Ok((loss, accuracy))
    }

    fn record_scalar(&mut self, clock: u64, tag: &str, value: f64) -> Result<()> {
        if let Some(sink) = &mut self.scalars {
            sink.record(clock, tag, value)?;
        }
        Ok(())
    }

    fn record_validation(&mut self, clock: u64) -> Result<(f64, f64)> {
        let (val_loss, val_accuracy) = self.validate()?;
        self.record_scalar(clock, "val/loss", val_loss)?;
        self.record_scalar(clock, "val/accuracy", val_accuracy)?;
        if let Some(sink) = &mut self.distributions {
            for param in self.brain.trainable_params() {
                sink.record(clock, param.name(), &param.value())?;
            }
        }
        Ok((val_loss, val_accuracy))
    }

    /// The training loop: batch → engine step → clock, with a validation
    /// pass every `val_interval` steps and at the end of the run. Resumable:
    /// practicing after a checkpoint load continues at the restored clock.
    pub fn practice(&mut self) -> Result<Metrics> {
        self.ensure_setup()?;
        let target = self.target_steps();
        let has_val = self.sensor.source().num_val() > 0;
        let mut last = Metrics {
            clock: self.clock,
            train_loss: f64::NAN,
            train_eval: None,
            val_loss: None,
            val_accuracy: None,
        };
        while self.clock < target {
            let (data, labels) = self.sensor.next_train_batch()?;
            let engine = self.engine.as_mut().expect("setup built the engine");
            let outcome = engine.step(&self.brain, &mut self.kongfu, &data, &labels, self.clock)?;
            let step_clock = self.clock;
            self.clock += 1;
            last.clock = self.clock;
            last.train_loss = outcome.loss.to_f64_lossy();
            last.train_eval = outcome.eval.map(|e| e.to_f64_lossy());
            self.record_scalar(step_clock, "train/loss", last.train_loss)?;
            if let Some(eval) = last.train_eval {
                self.record_scalar(step_clock, "train/accuracy", eval)?;
            }
            self.record_scalar(step_clock, "lr", self.kongfu.learning_rate(step_clock)?)?;
            if has_val && self.clock % self.val_interval == 0 {
                let (val_loss, val_accuracy) = self.record_validation(self.clock)?;
                last.val_loss = Some(val_loss);
                last.val_accuracy = Some(val_accuracy);
            }
        }
        // End-of-run validation, unless this clock already validated above.
        if has_val && self.clock % self.val_interval != 0 {
            let (val_loss, val_accuracy) = self.record_validation(self.clock)?;
            last.val_loss = Some(val_loss);
            last.val_accuracy = Some(val_accuracy);
        }
        if let Some(dir) = self.log_dir.clone() {
            self.save_checkpoint(&dir.join("checkpoint.akck"))?;
        }
        Ok(last)
    }

    /// Serializes parameters, optimizer velocity and the clock. Values are
    /// stored as little-endian `f32`, so the round-trip is bit-exact for
    /// single-precision training.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.ensure_setup()?;
        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for (name, param) in self.brain.param_map() {
            let value = param.value();
            entries.push((name, value.shape().to_vec(), to_f32(&value)));
        }
        for (name, velocity) in self.kongfu.velocity() {
            entries.push((
                format!("{VELOCITY_PREFIX}{name}"),
                velocity.shape().to_vec(),
                to_f32(velocity),
            ));
        }
        entries.push((CLOCK_ENTRY.into(), Vec::new(), vec![self.clock as f32]));

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&u32::try_from(entries.len()).expect("entry count").to_le_bytes())?;
        for (name, shape, values) in &entries {
            let name_bytes = name.as_bytes();
            let len = u16::try_from(name_bytes.len()).map_err(|_| {
                Error::Checkpoint(format!("entry name too long: {name:?}"))
            })?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(name_bytes)?;
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::Checkpoint(format!("rank too large for {name:?}")))?;
            out.write_all(&[rank])?;
            for &extent in shape {
                let extent = u32::try_from(extent)
                    .map_err(|_| Error::Checkpoint(format!("extent too large in {name:?}")))?;
                out.write_all(&extent.to_le_bytes())?;
            }
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Restores a checkpoint saved by [`Kid::save_checkpoint`]: every
    /// parameter, the optimizer velocity, the clock, and the sensor position
    /// implied by the clock.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.ensure_setup()?;
        let entries = read_checkpoint(path)?;
        let mut entries: BTreeMap<String, (Vec<usize>, Vec<f32>)> = entries.into_iter().collect();

        let params = self.brain.param_map();
        for (name, param) in &params {
            let (shape, values) = entries.remove(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
            })?;
            let expected = param.shape();
            if shape != expected {
                return Err(Error::shape(
                    "kid.load_checkpoint",
                    format!("{name}: checkpoint has {shape:?}, model needs {expected:?}"),
                ));
            }
            param.set_value(from_f32::<S>(shape, values)?)?;
        }

        let mut velocity = BTreeMap::new();
        let mut clock = None;
        for (name, (shape, values)) in entries {
            if let Some(param_name) = name.strip_prefix(VELOCITY_PREFIX) {
                let param = params.get(param_name).ok_or_else(|| {
                    Error::Checkpoint(format!("velocity for unknown parameter {param_name}"))
                })?;
                if shape != param.shape() {
                    return Err(Error::shape(
                        "kid.load_checkpoint",
                        format!("{name}: checkpoint has {shape:?}, model needs {:?}", param.shape()),
                    ));
                }
                velocity.insert(param_name.to_string(), from_f32::<S>(shape, values)?);
            } else if name == CLOCK_ENTRY {
                clock = Some(values.first().copied().unwrap_or(0.0) as u64);
            } else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint entry {name:?} matches nothing in this model"
                )));
            }
        }
        self.kongfu.set_velocity(velocity);
        self.clock = clock
            .ok_or_else(|| Error::Checkpoint("checkpoint has no clock entry".into()))?;
        self.sensor.seek(self.clock);
        // Replicas must start from the restored parameters.
        if let Some(engine) = &mut self.engine {
            engine.sync_replicas(&self.brain)?;
        }
        Ok(())
    }
}

fn to_f32<S: Scalar>(tensor: &Tensor<S>) -> Vec<f32> {
    tensor.data().iter().map(|v| v.to_f64_lossy() as f32).collect()
}

fn from_f32<S: Scalar>(shape: Vec<usize>, values: Vec<f32>) -> Result<Tensor<S>> {
    Tensor::new(
        shape,
        values.into_iter().map(|v| S::from_f64_lossy(v as f64)).collect(),
    )
}

type RawEntry = (String, (Vec<usize>, Vec<f32>));

fn read_checkpoint(path: &Path) -> Result<Vec<RawEntry>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for a header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut file)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let count = read_u32(&mut file)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        file.read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated entry header".into()))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        file.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated entry name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        file.read_exact(&mut rank)
            .map_err(|_| Error::Checkpoint(format!("truncated rank for {name:?}")))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut file)? as usize);
        }
        let len = shape.iter().product::<usize>().max(1);
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let mut v = [0u8; 4];
            file.read_exact(&mut v)
                .map_err(|_| Error::Checkpoint(format!("truncated values for {name:?}")))?;
            values.push(f32::from_le_bytes(v));
        }
        entries.push((name, (shape, values)));
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }
    Ok(entries)
}

fn read_u32(file: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    file.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated 32-bit field".into()))?;
    Ok(u32::from_le_bytes(buf))
}
