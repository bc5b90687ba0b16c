//! Serializable per-layer parameter records.
//!
//! These structs are the single source of layer defaults: the programmatic
//! API, the composite CNN builder, and the CLI's experiment files all funnel
//! through them. Unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Padding;

/// Parameter initialization: uniform draws in `[-range, range)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitPara {
    pub name: String,
    pub range: f64,
}

impl Default for InitPara {
    fn default() -> Self {
        InitPara {
            name: "uniform".into(),
            range: 0.1,
        }
    }
}

impl InitPara {
    pub fn validate(&self) -> Result<()> {
        if self.name != "uniform" {
            return Err(Error::Config(format!(
                "unsupported init_para name {:?} (only \"uniform\" is available)",
                self.name
            )));
        }
        if !(self.range > 0.0) {
            return Err(Error::Config(format!(
                "init_para range must be positive, got {}",
                self.range
            )));
        }
        Ok(())
    }
}

/// Weight decay applied to a layer's weight (not bias) variables.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WeightDecay {
    #[serde(rename = "type")]
    pub kind: String,
    pub scale: f64,
}

impl WeightDecay {
    pub fn validate(&self) -> Result<()> {
        if self.kind != "l2" {
            return Err(Error::Config(format!(
                "unsupported weight decay type {:?} (only \"l2\" is available)",
                self.kind
            )));
        }
        if self.scale < 0.0 {
            return Err(Error::Config(format!(
                "weight decay scale must be non-negative, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Activation choice inside a composite CNN block.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub group_size: Option<usize>,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig {
            kind: "relu".into(),
            group_size: None,
        }
    }
}

fn default_padding() -> Padding {
    Padding::Same
}

fn default_true() -> bool {
    true
}

/// Convolution layer parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    /// Spatial window, `[kh, kw]` (a 4-element `[1, kh, kw, 1]` form is also
    /// accepted).
    pub ksize: Vec<usize>,
    pub out_channel_num: usize,
    #[serde(default)]
    pub strides: Option<Vec<usize>>,
    #[serde(default = "default_padding")]
    pub padding: Padding,
    #[serde(default)]
    pub init_para: InitPara,
    #[serde(default)]
    pub wd: Option<WeightDecay>,
    #[serde(default = "default_true")]
    pub bias: bool,
}

/// Inner-product (fully connected) layer parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IpConfig {
    pub out_channel_num: usize,
    #[serde(default)]
    pub init_para: InitPara,
    #[serde(default)]
    pub wd: Option<WeightDecay>,
    #[serde(default = "default_true")]
    pub bias: bool,
}

/// Pooling layer parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Spatial window, `[kh, kw]` (or `[1, kh, kw, 1]`).
    pub ksize: Vec<usize>,
    #[serde(default)]
    pub strides: Option<Vec<usize>>,
    #[serde(default = "default_padding")]
    pub padding: Padding,
}

fn default_momentum() -> f64 {
    0.99
}

fn default_epsilon() -> f64 {
    1e-5
}

/// Batch-normalization layer parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BnConfig {
    /// Exponential moving-average coefficient for the running statistics.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Whether to learn a per-channel scale (gamma) and shift (beta).
    #[serde(default = "default_true")]
    pub affine: bool,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            momentum: default_momentum(),
            epsilon: default_epsilon(),
            affine: true,
        }
    }
}

/// Dropout layer parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub keep_prob: f64,
}

/// Softmax-with-loss layer parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub class_num: usize,
}

/// Composite CNN block parameters: convolution, optional batch norm, an
/// activation, pooling, and optional dropout.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CnnBlockConfig {
    pub name: String,
    pub ksize: Vec<usize>,
    pub out_channel_num: usize,
    #[serde(default)]
    pub strides: Option<Vec<usize>>,
    #[serde(default = "default_padding")]
    pub padding: Padding,
    #[serde(default)]
    pub init_para: InitPara,
    #[serde(default)]
    pub wd: Option<WeightDecay>,
    #[serde(default)]
    pub bn: bool,
    #[serde(default)]
    pub activation: ActivationConfig,
    pub pool_size: Vec<usize>,
    #[serde(default)]
    pub pool_stride: Option<Vec<usize>>,
    #[serde(default = "default_padding")]
    pub pool_padding: Padding,
    #[serde(default)]
    pub keep_prob: Option<f64>,
}

/// Normalizes a window/stride spec to `(h, w)`.
///
/// Accepts `[h, w]` or the 4-element `[1, h, w, 1]` convention.
pub fn spatial_pair(v: &[usize], what: &str) -> Result<(usize, usize)> {
    match *v {
        [h, w] => Ok((h, w)),
        [1, h, w, 1] => Ok((h, w)),
        _ => Err(Error::Config(format!(
            "{what} must be [h, w] or [1, h, w, 1], got {v:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ConvConfig>(
            r#"{"ksize": [5, 5], "out_channel_num": 32, "colour": "red"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("colour"), "got: {err}");
    }

    #[test]
    fn conv_defaults_fill_in() {
        let cfg: ConvConfig =
            serde_json::from_str(r#"{"ksize": [5, 5], "out_channel_num": 32}"#).unwrap();
        assert_eq!(cfg.padding, Padding::Same);
        assert_eq!(cfg.init_para, InitPara::default());
        assert!(cfg.bias);
        assert!(cfg.wd.is_none());
    }

    #[test]
    fn spatial_pair_accepts_both_arities() {
        assert_eq!(spatial_pair(&[5, 5], "ksize").unwrap(), (5, 5));
        assert_eq!(spatial_pair(&[1, 5, 5, 1], "ksize").unwrap(), (5, 5));
        assert!(spatial_pair(&[5], "ksize").is_err());
        assert!(spatial_pair(&[2, 5, 5, 1], "ksize").is_err());
    }

    #[test]
    fn init_para_validates_kind_and_range() {
        assert!(InitPara::default().validate().is_ok());
        let bad = InitPara { name: "gaussian".into(), range: 0.1 };
        assert!(bad.validate().is_err());
        let bad = InitPara { name: "uniform".into(), range: 0.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weight_decay_validates_kind() {
        assert!(WeightDecay { kind: "l2".into(), scale: 0.0005 }.validate().is_ok());
        assert!(WeightDecay { kind: "l1".into(), scale: 0.0005 }.validate().is_err());
    }

    #[test]
    fn bn_defaults_match_documentation() {
        let cfg = BnConfig::default();
        assert_eq!(cfg.momentum, 0.99);
        assert_eq!(cfg.epsilon, 1e-5);
        assert!(cfg.affine);
    }
}
