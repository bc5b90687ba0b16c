//! Jokers: training-time data augmentation steps.
//!
//! Jokers run in their configured order over `[N, H, W, C]` batches, drawing
//! per-example randomness from the stream handed in by the sensor.
//! Validation batches never see jokers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Pcg32, Tensor};

/// One augmentation step.
#[derive(Clone, Debug, PartialEq)]
pub enum Joker {
    /// Cuts a `height × width` window at a uniform random offset, chosen
    /// independently per example.
    Crop { height: usize, width: usize },
    /// Mirrors the width axis with the given probability per example.
    Flip { probability: f64 },
}

/// Serde form: `{"type": "crop", "height": 24, "width": 24}` or
/// `{"type": "flip", "probability": 0.5}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JokerConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub height: Option<usize>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub probability: Option<f64>,
}

impl JokerConfig {
    pub fn build(&self) -> Result<Joker> {
        match self.kind.as_str() {
            "crop" => {
                let (height, width) = match (self.height, self.width) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                    _ => {
                        return Err(Error::Config(
                            "crop joker needs positive height and width".into(),
                        ))
                    }
                };
                if self.probability.is_some() {
                    return Err(Error::Config("crop joker takes no probability".into()));
                }
                Ok(Joker::Crop { height, width })
            }
            "flip" => {
                let probability = self.probability.ok_or_else(|| {
                    Error::Config("flip joker needs a probability".into())
                })?;
                if !(0.0..=1.0).contains(&probability) {
                    return Err(Error::Config(format!(
                        "flip probability must be in [0, 1], got {probability}"
                    )));
                }
                if self.height.is_some() || self.width.is_some() {
                    return Err(Error::Config("flip joker takes no height/width".into()));
                }
                Ok(Joker::Flip { probability })
            }
            other => Err(Error::Config(format!(
                "unknown joker type {other:?} (crop or flip)"
            ))),
        }
    }
}

fn expect_nhwc<S: Scalar>(data: &Tensor<S>, op: &str) -> Result<(usize, usize, usize, usize)> {
    let shape = data.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            op,
            format!("jokers expect [N,H,W,C] batches, got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn crop<S: Scalar>(
    data: &Tensor<S>,
    height: usize,
    width: usize,
    rng: &mut Pcg32,
) -> Result<Tensor<S>> {
    let (n, h, w, c) = expect_nhwc(data, "joker.crop")?;
    if height > h || width > w {
        return Err(Error::shape(
            "joker.crop",
            format!("cannot crop {h}×{w} inputs to {height}×{width}"),
        ));
    }
    let src = data.data();
    let mut out = vec![S::zero(); n * height * width * c];
    for i in 0..n {
        let dy = rng.bounded((h - height + 1) as u32) as usize;
        let dx = rng.bounded((w - width + 1) as u32) as usize;
        for y in 0..height {
            let src_row = ((i * h + dy + y) * w + dx) * c;
            let dst_row = ((i * height + y) * width) * c;
            out[dst_row..dst_row + width * c]
                .copy_from_slice(&src[src_row..src_row + width * c]);
        }
    }
    Tensor::new(vec![n, height, width, c], out)
}

fn flip<S: Scalar>(data: &Tensor<S>, probability: f64, rng: &mut Pcg32) -> Result<Tensor<S>> {
    let (n, h, w, c) = expect_nhwc(data, "joker.flip")?;
    let mut out = data.clone();
    for i in 0..n {
        // next_f64 is in (0, 1], so p = 0 never flips and p = 1 always does.
        if rng.next_f64() > probability {
            continue;
        }
        let buf = out.data_mut();
        for y in 0..h {
            let row = (i * h + y) * w * c;
            for x in 0..w / 2 {
                for ch in 0..c {
                    buf.swap(row + x * c + ch, row + (w - 1 - x) * c + ch);
                }
            }
        }
    }
    Ok(out)
}

/// Runs the jokers in order over a training batch.
pub fn apply_jokers<S: Scalar>(
    jokers: &[Joker],
    data: &Tensor<S>,
    rng: &mut Pcg32,
) -> Result<Tensor<S>> {
    let mut current = data.clone();
    for joker in jokers {
        current = match joker {
            Joker::Crop { height, width } => crop(&current, *height, *width, rng)?,
            Joker::Flip { probability } => flip(&current, *probability, rng)?,
        };
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Tensor<f32> {
        Tensor::new(
            vec![1, 2, 3, 1],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap()
    }

    #[test]
    fn flip_probability_zero_is_identity() {
        let x = batch();
        let mut rng = Pcg32::new(1, 1);
        let out = apply_jokers(&[Joker::Flip { probability: 0.0 }], &x, &mut rng).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let x = batch();
        let mut rng = Pcg32::new(1, 1);
        let once = apply_jokers(&[Joker::Flip { probability: 1.0 }], &x, &mut rng).unwrap();
        assert_eq!(once.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let twice =
            apply_jokers(&[Joker::Flip { probability: 1.0 }], &once, &mut rng).unwrap();
        assert_eq!(twice, x);
    }

    #[test]
    fn crop_shrinks_the_spatial_axes() {
        let mut rng = Pcg32::new(2, 2);
        let x = Tensor::<f32>::zeros(vec![3, 28, 28, 2]);
        let out = apply_jokers(
            &[Joker::Crop { height: 24, width: 24 }],
            &x,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.shape(), &[3, 24, 24, 2]);
    }

    #[test]
    fn crop_window_contents_come_from_the_source_image() {
        // Full-size crop is the identity regardless of the rng.
        let x = batch();
        let mut rng = Pcg32::new(3, 3);
        let out = apply_jokers(&[Joker::Crop { height: 2, width: 3 }], &x, &mut rng).unwrap();
        assert_eq!(out, x);
        // A 2×2 crop of the 2×3 image is one of the two possible windows.
        let mut rng = Pcg32::new(4, 4);
        let out = apply_jokers(&[Joker::Crop { height: 2, width: 2 }], &x, &mut rng).unwrap();
        let a = vec![1.0, 2.0, 4.0, 5.0];
        let b = vec![2.0, 3.0, 5.0, 6.0];
        assert!(out.data() == a.as_slice() || out.data() == b.as_slice());
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let mut rng = Pcg32::new(5, 5);
        let err =
            apply_jokers(&[Joker::Crop { height: 4, width: 1 }], &batch(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn configs_build_and_validate() {
        let crop: JokerConfig =
            serde_json::from_str(r#"{"type": "crop", "height": 24, "width": 24}"#).unwrap();
        assert_eq!(crop.build().unwrap(), Joker::Crop { height: 24, width: 24 });
        let flip: JokerConfig =
            serde_json::from_str(r#"{"type": "flip", "probability": 0.5}"#).unwrap();
        assert_eq!(flip.build().unwrap(), Joker::Flip { probability: 0.5 });
        let bad: JokerConfig = serde_json::from_str(r#"{"type": "blur"}"#).unwrap();
        assert!(bad.build().is_err());
        let bad: JokerConfig =
            serde_json::from_str(r#"{"type": "flip", "probability": 1.5}"#).unwrap();
        assert!(bad.build().is_err());
    }
}
