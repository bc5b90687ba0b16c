//! Declarative experiment files: one JSON document describing the source,
//! sensor, brain, optimizer, engine and driver, assembled into a ready
//! [`Kid`]. The programmatic API stays the primary path; this is its
//! serializable mirror.
//!
//! Parsing is strict: unknown keys anywhere are rejected, and every error
//! is prefixed with the config path it came from (`brain.blocks[2]`, …).
//! A parsed config re-serializes to an equivalent document, so configs
//! round-trip.

use serde::de::DeserializeOwned;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blocks::{
    cnn_block, AddLayer, BatchNormLayer, BnConfig, CnnBlockConfig, ConvConfig, ConvolutionLayer,
    DropoutConfig, DropoutLayer, InnerProductLayer, IpConfig, LossConfig, MaxoutLayer, PoolConfig,
    PoolingLayer, ReLULayer, SoftmaxWithLossLayer,
};
use crate::brain::{Brain, InputRef};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::kid::{Kid, KidConfig};
use crate::kongfu::KongFuConfig;
use crate::scalar::Scalar;
use crate::sensor::{FeedSensor, JokerConfig, Source, SourceConfig};

/// The whole experiment document.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub source: SourceConfig,
    pub sensor: SensorSection,
    pub brain: BrainSection,
    pub kongfu: KongFuConfig,
    pub engine: EngineConfig,
    pub kid: KidConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSection {
    pub batch_size: usize,
    #[serde(default)]
    pub jokers: Vec<JokerConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrainSection {
    #[serde(default = "default_brain_name")]
    pub name: String,
    pub blocks: Vec<BlockEntry>,
}

fn default_brain_name() -> String {
    "brain".into()
}

/// One block in the brain list: `name`, `type`, optional `inputs`, and the
/// layer's own parameters inline. The parameters are kept as raw JSON so a
/// document round-trips exactly; [`BlockEntry::typed`] validates them.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockEntry {
    pub name: String,
    pub kind: String,
    pub inputs: Option<Vec<InputRef>>,
    pub params: serde_json::Map<String, Value>,
}

/// A block entry with its parameters parsed for its kind.
#[derive(Clone, Debug)]
pub enum TypedBlock {
    Conv(ConvConfig),
    Ip(IpConfig),
    Relu,
    Maxout { group_size: usize },
    Pool(PoolConfig),
    Bn(BnConfig),
    Dropout(DropoutConfig),
    Loss(LossConfig),
    Add,
    CnnBlock(CnnBlockConfig),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaxoutParams {
    group_size: usize,
}

impl BlockEntry {
    fn parse_params<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(Value::Object(self.params.clone()))
            .map_err(|e| Error::Config(format!("block {:?}: {e}", self.name)))
    }

    /// Parses the inline parameters against this entry's kind.
    pub fn typed(&self) -> Result<TypedBlock> {
        match self.kind.as_str() {
            "conv" => Ok(TypedBlock::Conv(self.parse_params()?)),
            "ip" => Ok(TypedBlock::Ip(self.parse_params()?)),
            "relu" => {
                self.no_params()?;
                Ok(TypedBlock::Relu)
            }
            "maxout" => {
                let p: MaxoutParams = self.parse_params()?;
                Ok(TypedBlock::Maxout {
                    group_size: p.group_size,
                })
            }
            "pool" => Ok(TypedBlock::Pool(self.parse_params()?)),
            "bn" => Ok(TypedBlock::Bn(self.parse_params()?)),
            "dropout" => Ok(TypedBlock::Dropout(self.parse_params()?)),
            "loss" => Ok(TypedBlock::Loss(self.parse_params()?)),
            "add" => {
                self.no_params()?;
                Ok(TypedBlock::Add)
            }
            "cnn_block" => {
                // The composite carries its name inside its own config.
                let mut map = self.params.clone();
                map.insert("name".into(), Value::String(self.name.clone()));
                Ok(TypedBlock::CnnBlock(
                    serde_json::from_value(Value::Object(map))
                        .map_err(|e| Error::Config(format!("block {:?}: {e}", self.name)))?,
                ))
            }
            other => Err(Error::Config(format!(
                "block {:?} has unknown type {other:?}",
                self.name
            ))),
        }
    }

    fn no_params(&self) -> Result<()> {
        if let Some(key) = self.params.keys().next() {
            return Err(Error::Config(format!(
                "block {:?} of type {:?} takes no parameters, got {key:?}",
                self.name, self.kind
            )));
        }
        Ok(())
    }

    /// Builds the layer this entry describes.
    pub fn build<S: Scalar>(&self) -> Result<Box<dyn crate::blocks::Block<S>>> {
        Ok(match self.typed()? {
            TypedBlock::Conv(cfg) => Box::new(ConvolutionLayer::new(&self.name, &cfg)?),
            TypedBlock::Ip(cfg) => Box::new(InnerProductLayer::new(&self.name, &cfg)?),
            TypedBlock::Relu => Box::new(ReLULayer::new(&self.name)),
            TypedBlock::Maxout { group_size } => Box::new(MaxoutLayer::new(&self.name, group_size)?),
            TypedBlock::Pool(cfg) => Box::new(PoolingLayer::new(&self.name, &cfg)?),
            TypedBlock::Bn(cfg) => Box::new(BatchNormLayer::new(&self.name, &cfg)?),
            TypedBlock::Dropout(cfg) => Box::new(DropoutLayer::new(&self.name, &cfg)?),
            TypedBlock::Loss(cfg) => Box::new(SoftmaxWithLossLayer::new(&self.name, &cfg)?),
            TypedBlock::Add => Box::new(AddLayer::new(&self.name)),
            TypedBlock::CnnBlock(cfg) => Box::new(cnn_block(&cfg)?),
        })
    }
}

impl Serialize for BlockEntry {
    fn serialize<Ser: serde::Serializer>(&self, serializer: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        let extra = 2 + usize::from(self.inputs.is_some());
        let mut map = serializer.serialize_map(Some(self.params.len() + extra))?;
        map.serialize_entry("name", &self.name)?;
        map.serialize_entry("type", &self.kind)?;
        if let Some(inputs) = &self.inputs {
            map.serialize_entry("inputs", inputs)?;
        }
        for (key, value) in &self.params {
            map.serialize_entry(key, value)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for BlockEntry {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let Value::Object(mut map) = Value::deserialize(deserializer)? else {
            return Err(DeError::custom("a block entry must be an object"));
        };
        let name = match map.remove("name") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(DeError::custom("block name must be a string")),
            None => return Err(DeError::missing_field("name")),
        };
        let kind = match map.remove("type") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(DeError::custom("block type must be a string")),
            None => return Err(DeError::missing_field("type")),
        };
        let inputs = match map.remove("inputs") {
            None => None,
            Some(v) => {
                Some(serde_json::from_value(v).map_err(DeError::custom)?)
            }
        };
        Ok(BlockEntry {
            name,
            kind,
            inputs,
            params: map,
        })
    }
}

/// Strict top-level shape; sections are re-parsed one by one so errors can
/// say which section they came from.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    source: Value,
    sensor: Value,
    brain: Value,
    kongfu: Value,
    #[serde(default)]
    engine: Option<Value>,
    kid: Value,
    #[serde(default)]
    seed: Option<Value>,
}

fn section<T: DeserializeOwned>(value: Value, label: &str) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{label}: {e}")))
}

/// Parses the brain section by hand so structural errors carry the block
/// index (`brain.blocks[2]: …`) instead of a section-wide message.
fn parse_brain(value: Value) -> Result<BrainSection> {
    let Value::Object(mut map) = value else {
        return Err(Error::Config("brain: must be an object".into()));
    };
    let name = match map.remove("name") {
        None => default_brain_name(),
        Some(Value::String(s)) => s,
        Some(_) => return Err(Error::Config("brain.name: must be a string".into())),
    };
    let blocks_value = map
        .remove("blocks")
        .ok_or_else(|| Error::Config("brain: missing field `blocks`".into()))?;
    if let Some(stray) = map.keys().next() {
        return Err(Error::Config(format!("brain: unknown field `{stray}`")));
    }
    let Value::Array(items) = blocks_value else {
        return Err(Error::Config("brain.blocks: must be an array".into()));
    };
    let blocks = items
        .into_iter()
        .enumerate()
        .map(|(i, item)| section(item, &format!("brain.blocks[{i}]")))
        .collect::<Result<Vec<BlockEntry>>>()?;
    Ok(BrainSection { name, blocks })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawExperiment = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        Self::from_raw(raw)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let raw: RawExperiment = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawExperiment) -> Result<Self> {
        let config = ExperimentConfig {
            source: section(raw.source, "source")?,
            sensor: section(raw.sensor, "sensor")?,
            brain: parse_brain(raw.brain)?,
            kongfu: section(raw.kongfu, "kongfu")?,
            engine: match raw.engine {
                Some(v) => section(v, "engine")?,
                None => EngineConfig::default(),
            },
            kid: section(raw.kid, "kid")?,
            seed: match raw.seed {
                Some(v) => section(v, "seed")?,
                None => 0,
            },
        };
        config.validate()?;
        Ok(config)
    }

    /// Schema-level validation before any work: every block entry parses
    /// for its kind, names are non-empty, and the driver/optimizer configs
    /// are coherent. Does not touch the filesystem or the network.
    pub fn validate(&self) -> Result<()> {
        if self.brain.blocks.is_empty() {
            return Err(Error::Config("brain.blocks must not be empty".into()));
        }
        for (i, entry) in self.brain.blocks.iter().enumerate() {
            if entry.name.is_empty() {
                return Err(Error::Config(format!("brain.blocks[{i}]: empty name")));
            }
            entry
                .typed()
                .map_err(|e| Error::Config(format!("brain.blocks[{i}]: {e}")))?;
        }
        if self.sensor.batch_size == 0 {
            return Err(Error::Config("sensor.batch_size must be at least 1".into()));
        }
        for (i, joker) in self.sensor.jokers.iter().enumerate() {
            joker
                .build()
                .map_err(|e| Error::Config(format!("sensor.jokers[{i}]: {e}")))?;
        }
        self.source.backing().map_err(|e| Error::Config(format!("source: {e}")))?;
        self.kongfu.build::<f64>().map_err(|e| Error::Config(format!("kongfu: {e}")))?;
        self.engine.towers().map_err(|e| Error::Config(format!("engine: {e}")))?;
        self.kid.stop_rule().map_err(|e| Error::Config(format!("kid: {e}")))?;
        if self.kid.val_interval == 0 {
            return Err(Error::Config("kid.val_interval must be at least 1".into()));
        }
        Ok(())
    }

    /// Builds the brain described by the `brain` section (attach order =
    /// document order).
    pub fn build_brain<S: Scalar>(&self) -> Result<Brain<S>> {
        let mut brain = Brain::new(self.brain.name.clone());
        for entry in &self.brain.blocks {
            brain.attach(entry.build()?, entry.inputs.clone())?;
        }
        Ok(brain)
    }

    /// Assembles the full student: source (cached or downloaded unless
    /// `offline` forbids it), sensor, brain, optimizer, engine, driver.
    pub fn build_kid<S: Scalar>(&self, offline: bool) -> Result<Kid<S>> {
        let mut source = Source::from_config(&self.source)?;
        source.setup(offline)?;
        let jokers = self
            .sensor
            .jokers
            .iter()
            .map(|j| j.build())
            .collect::<Result<Vec<_>>>()?;
        let sensor = FeedSensor::new(source, self.sensor.batch_size, jokers, self.seed)?;
        let brain = self.build_brain()?;
        let kongfu = self.kongfu.build()?;
        let mut kid = Kid::new(sensor, brain, kongfu, self.kid.stop_rule()?)
            .with_engine(self.engine.clone())
            .with_val_interval(self.kid.val_interval)?
            .with_seed(self.seed);
        if let Some(dir) = &self.kid.log_dir {
            kid = kid.with_log_dir(dir);
        }
        Ok(kid)
    }

    /// Applies one `--section.key=value` override; the value is parsed as a
    /// JSON literal, falling back to a plain string.
    pub fn apply_override(document: &mut Value, path: &str, raw_value: &str) -> Result<()> {
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override path {path:?}")));
        }
        let value: Value = serde_json::from_str(raw_value)
            .unwrap_or_else(|_| Value::String(raw_value.to_string()));
        let mut current = document;
        for part in &parts[..parts.len() - 1] {
            current = match current {
                Value::Object(map) => map
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default())),
                Value::Array(items) => {
                    let index: usize = part.parse().map_err(|_| {
                        Error::Config(format!("override {path:?}: {part:?} is not an index"))
                    })?;
                    items.get_mut(index).ok_or_else(|| {
                        Error::Config(format!("override {path:?}: index {index} out of range"))
                    })?
                }
                _ => {
                    return Err(Error::Config(format!(
                        "override {path:?}: {part:?} is not an object"
                    )))
                }
            };
        }
        let last = parts[parts.len() - 1];
        match current {
            Value::Object(map) => {
                map.insert(last.to_string(), value);
            }
            Value::Array(items) => {
                let index: usize = last.parse().map_err(|_| {
                    Error::Config(format!("override {path:?}: {last:?} is not an index"))
                })?;
                let slot = items.get_mut(index).ok_or_else(|| {
                    Error::Config(format!("override {path:?}: index {index} out of range"))
                })?;
                *slot = value;
            }
            _ => {
                return Err(Error::Config(format!(
                    "override {path:?}: target is not an object"
                )))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "source": {"type": "synthetic", "num_train": 20, "num_val": 10, "seed": 1},
            "sensor": {"batch_size": 5},
            "brain": {"blocks": [
                {"name": "ip1", "type": "ip", "out_channel_num": 10},
                {"name": "loss", "type": "loss", "class_num": 10,
                 "inputs": [{"name": "ip1"}, {"name": "system_in", "idxs": [1]}]}
            ]},
            "kongfu": {"type": "momentum", "lr_scheme": {"type": "constant", "lr": 0.1}},
            "kid": {"max_steps": 3},
            "seed": 5
        })
    }

    #[test]
    fn minimal_config_parses_and_builds() {
        let config = ExperimentConfig::from_value(minimal()).unwrap();
        assert_eq!(config.brain.blocks.len(), 2);
        assert_eq!(config.brain.blocks[0].kind, "ip");
        assert_eq!(config.seed, 5);
        let brain: Brain<f32> = config.build_brain().unwrap();
        assert_eq!(brain.nodes().len(), 2);
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let config = ExperimentConfig::from_value(minimal()).unwrap();
        let first = serde_json::to_value(&config).unwrap();
        let reparsed = ExperimentConfig::from_value(first.clone()).unwrap();
        let second = serde_json::to_value(&reparsed).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let mut doc = minimal();
        doc["beans"] = json!(1);
        let err = ExperimentConfig::from_value(doc).unwrap_err().to_string();
        assert!(err.contains("beans"), "{err}");
    }

    #[test]
    fn unknown_block_key_is_rejected_with_its_index() {
        let mut doc = minimal();
        doc["brain"]["blocks"][0]["colour"] = json!("red");
        let err = ExperimentConfig::from_value(doc).unwrap_err().to_string();
        assert!(
            err.contains("brain.blocks[0]") && err.contains("colour"),
            "{err}"
        );
    }

    #[test]
    fn unknown_block_type_is_rejected() {
        let mut doc = minimal();
        doc["brain"]["blocks"][0]["type"] = json!("quantum");
        let err = ExperimentConfig::from_value(doc).unwrap_err().to_string();
        assert!(err.contains("quantum"), "{err}");
    }

    #[test]
    fn sensor_typo_is_rejected_with_its_section() {
        let mut doc = minimal();
        doc["sensor"] = json!({"batch_size": 5, "jockers": []});
        let err = ExperimentConfig::from_value(doc).unwrap_err().to_string();
        assert!(err.contains("sensor") && err.contains("jockers"), "{err}");
    }

    #[test]
    fn both_stopping_bounds_are_rejected() {
        let mut doc = minimal();
        doc["kid"] = json!({"max_steps": 5, "max_epoch": 1});
        let err = ExperimentConfig::from_value(doc).unwrap_err().to_string();
        assert!(err.contains("max_steps") && err.contains("max_epoch"), "{err}");
    }

    #[test]
    fn built_kid_trains_end_to_end() {
        let config = ExperimentConfig::from_value(minimal()).unwrap();
        let mut kid = config.build_kid::<f32>(true).unwrap();
        kid.setup().unwrap();
        let metrics = kid.practice().unwrap();
        assert_eq!(metrics.clock, 3);
        assert!(metrics.train_loss.is_finite());
        assert!(metrics.val_accuracy.is_some());
    }

    #[test]
    fn overrides_parse_json_literals_with_string_fallback() {
        let mut doc = minimal();
        ExperimentConfig::apply_override(&mut doc, "kid.max_steps", "7").unwrap();
        ExperimentConfig::apply_override(&mut doc, "engine.name", "single").unwrap();
        ExperimentConfig::apply_override(&mut doc, "sensor.jokers", "[]").unwrap();
        assert_eq!(doc["kid"]["max_steps"], json!(7));
        assert_eq!(doc["engine"]["name"], json!("single"));
        assert_eq!(doc["sensor"]["jokers"], json!([]));
        let config = ExperimentConfig::from_value(doc).unwrap();
        assert_eq!(config.kid.max_steps, Some(7));
        assert_eq!(config.engine.name, "single");
    }

    #[test]
    fn overrides_can_index_into_the_block_list() {
        let mut doc = minimal();
        ExperimentConfig::apply_override(
            &mut doc,
            "brain.blocks.0.out_channel_num",
            "16",
        )
        .unwrap();
        let config = ExperimentConfig::from_value(doc).unwrap();
        let TypedBlock::Ip(ip) = config.brain.blocks[0].typed().unwrap() else {
            panic!("expected an ip block");
        };
        assert_eq!(ip.out_channel_num, 16);
    }

    #[test]
    fn bad_override_paths_are_rejected() {
        let mut doc = minimal();
        assert!(ExperimentConfig::apply_override(&mut doc, "", "1").is_err());
        assert!(ExperimentConfig::apply_override(&mut doc, "a..b", "1").is_err());
        assert!(
            ExperimentConfig::apply_override(&mut doc, "brain.blocks.9.x", "1").is_err()
        );
        assert!(ExperimentConfig::apply_override(&mut doc, "seed.nested", "1").is_err());
    }

    #[test]
    fn composite_cnn_block_entry_builds() {
        let entry: BlockEntry = serde_json::from_value(json!({
            "name": "stage1", "type": "cnn_block",
            "ksize": [3, 3], "out_channel_num": 4, "pool_size": [2, 2]
        }))
        .unwrap();
        assert!(matches!(entry.typed().unwrap(), TypedBlock::CnnBlock(_)));
        assert!(entry.build::<f32>().is_ok());
    }

    #[test]
    fn maxout_and_paramless_blocks_validate_their_params() {
        let relu: BlockEntry =
            serde_json::from_value(json!({"name": "r", "type": "relu", "slope": 2})).unwrap();
        assert!(relu.typed().is_err());
        let maxout: BlockEntry =
            serde_json::from_value(json!({"name": "m", "type": "maxout", "group_size": 2}))
                .unwrap();
        assert!(matches!(
            maxout.typed().unwrap(),
            TypedBlock::Maxout { group_size: 2 }
        ));
    }
}
