//! Tiling small tensors (filters, feature maps) into one viewable image.
//!
//! `n` tiles go into a near-square grid: `cols = ceil(sqrt(n))`,
//! `rows = ceil(n / cols)`, with a one-pixel pad around and between tiles.
//! Each tile is min-max normalized to `[0, 255]` on its own; a zero-range
//! tile renders mid-gray so constant filters stay visible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gray level for the pad between tiles and for unused grid cells.
const BACKGROUND: u8 = 0;
/// Gray level for a tile whose values are all equal.
const MID_GRAY: u8 = 128;

/// An 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    fn filled(width: usize, height: usize, level: u8) -> Self {
        Image {
            width,
            height,
            rgb: vec![level; width * height * 3],
        }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let at = (y * self.width + x) * 3;
        self.rgb[at..at + 3].copy_from_slice(&rgb);
    }

    /// Pixel as RGB (handy for tests).
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let at = (y * self.width + x) * 3;
        [self.rgb[at], self.rgb[at + 1], self.rgb[at + 2]]
    }
}

/// Near-square grid for `n` tiles: `(rows, cols)`.
pub fn tile_grid(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (rows, cols)
}

/// Expected image extent for `n` tiles of `h×w`: the grid plus one pixel of
/// pad around and between tiles.
pub fn tiled_extent(n: usize, h: usize, w: usize) -> (usize, usize) {
    let (rows, cols) = tile_grid(n);
    (rows * h + rows + 1, cols * w + cols + 1)
}

/// Tiles rank-2 `[h, w]` (gray) or rank-3 `[h, w, 3]` (RGB) tensors, all of
/// one shape, into a single image.
pub fn tile<S: Scalar>(tiles: &[Tensor<S>]) -> Result<Image> {
    if tiles.is_empty() {
        return Err(Error::shape("observer.tile", "no tiles given".to_string()));
    }
    let shape = tiles[0].shape().to_vec();
    let (h, w, channels) = match shape.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, 3] => (*h, *w, 3),
        other => {
            return Err(Error::shape(
                "observer.tile",
                format!("tiles must be [h,w] or [h,w,3], got {other:?}"),
            ))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::shape("observer.tile", "empty tile".to_string()));
    }
    for t in tiles {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(
                "observer.tile",
                format!("mixed tile shapes: {:?} vs {shape:?}", t.shape()),
            ));
        }
    }
    let (_, cols) = tile_grid(tiles.len());
    let (height, width) = tiled_extent(tiles.len(), h, w);
    let mut image = Image::filled(width, height, BACKGROUND);
    for (i, t) in tiles.iter().enumerate() {
        let row = i / cols;
        let col = i % cols;
        let y0 = 1 + row * (h + 1);
        let x0 = 1 + col * (w + 1);
        let data = t.data();
        let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        for y in 0..h {
            for x in 0..w {
                let level = |c: usize| {
                    if range == 0.0 {
                        MID_GRAY
                    } else {
                        let v = data[(y * w + x) * channels + c].to_f64_lossy();
                        ((v - lo) / range * 255.0).round() as u8
                    }
                };
                let rgb = if channels == 3 {
                    [level(0), level(1), level(2)]
                } else {
                    let g = level(0);
                    [g, g, g]
                };
                image.put(x0 + x, y0 + y, rgb);
            }
        }
    }
    Ok(image)
}

/// Per-output-channel views of a conv weight tensor `[kh, kw, cin, cout]`:
/// RGB tiles when `cin = 3`, first-input-channel gray tiles otherwise.
pub fn filter_tiles<S: Scalar>(weights: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    let &[kh, kw, cin, cout] = weights.shape() else {
        return Err(Error::shape(
            "observer.filter_tiles",
            format!("expected [kh,kw,cin,cout] weights, got {:?}", weights.shape()),
        ));
    };
    let mut tiles = Vec::with_capacity(cout);
    for o in 0..cout {
        if cin == 3 {
            let mut data = Vec::with_capacity(kh * kw * 3);
            for y in 0..kh {
                for x in 0..kw {
                    for c in 0..3 {
                        data.push(weights.at(&[y, x, c, o]));
                    }
                }
            }
            tiles.push(Tensor::new(vec![kh, kw, 3], data)?);
        } else {
            let mut data = Vec::with_capacity(kh * kw);
            for y in 0..kh {
                for x in 0..kw {
                    data.push(weights.at(&[y, x, 0, o]));
                }
            }
            tiles.push(Tensor::new(vec![kh, kw], data)?);
        }
    }
    Ok(tiles)
}

/// Per-channel feature maps of example 0 in a `[N, H, W, C]` activation.
pub fn activation_tiles<S: Scalar>(activation: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    let &[n, h, w, c] = activation.shape() else {
        return Err(Error::shape(
            "observer.activation_tiles",
            format!("expected [N,H,W,C] activations, got {:?}", activation.shape()),
        ));
    };
    if n == 0 {
        return Err(Error::shape(
            "observer.activation_tiles",
            "empty batch".to_string(),
        ));
    }
    let mut tiles = Vec::with_capacity(c);
    for ch in 0..c {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(activation.at(&[0, y, x, ch]));
            }
        }
        tiles.push(Tensor::new(vec![h, w], data)?);
    }
    Ok(tiles)
}
