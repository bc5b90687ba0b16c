//! Telemetry and visualization: scalar/distribution summary sinks, filter
//! and activation tile images, and DOT graph export.

mod dot;
mod ppm;
mod summary;
mod tiles;

pub use dot::export_dot;
pub use ppm::{ppm_bytes, write_ppm};
pub use summary::{percentiles, DistributionSink, ScalarSink, PERCENTILE_LEVELS};
pub use tiles::{activation_tiles, filter_tiles, tile, tile_grid, tiled_extent, Image};

use std::path::{Path, PathBuf};

use crate::blocks::Mode;
use crate::brain::Brain;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Writes one tiled-filter image per convolution layer as
/// `<layer>_filters_<clock>.ppm` and returns the paths written.
pub fn visualize_filters<S: Scalar>(
    brain: &Brain<S>,
    out_dir: &Path,
    clock: u64,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for node in brain.nodes() {
        let block = node.block();
        if block.kind() != "conv" {
            continue;
        }
        let weights = block
            .params()
            .into_iter()
            .find(|p| p.name().ends_with("weights"))
            .ok_or_else(|| {
                Error::NotSetup(format!("conv block {} has no weights yet", block.name()))
            })?;
        let image = tile(&filter_tiles(&weights.value())?)?;
        let path = out_dir.join(format!("{}_filters_{clock}.ppm", block.name()));
        write_ppm(&path, &image)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs one inference pass and writes a feature-map tile image for example 0
/// of every block with an image-shaped first output, named
/// `<layer>_activation_<clock>.ppm`.
pub fn visualize_activation<S: Scalar>(
    brain: &mut Brain<S>,
    inputs: &[Tensor<S>],
    out_dir: &Path,
    clock: u64,
) -> Result<Vec<PathBuf>> {
    brain.forward(inputs, Mode::Inference, None)?;
    let mut written = Vec::new();
    for node in brain.nodes() {
        let Some(first) = node.last_outputs().first() else {
            continue;
        };
        if first.rank() != 4 {
            continue;
        }
        let image = tile(&activation_tiles(first)?)?;
        let path = out_dir.join(format!("{}_activation_{clock}.ppm", node.block().name()));
        write_ppm(&path, &image)?;
        written.push(path);
    }
    Ok(written)
}
