//! Kernel bank images as binary PGM (P5) or PPM (P6).
//!
//! Every kernel is min-max normalized on its own to 0..=255; a constant
//! kernel renders as 128. Tiles are separated by one black pixel.

use std::path::Path;

use super::{write_atomic, DataError};
use crate::acl::AclLayer;
use crate::kernels::WeightMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderLayout {
    /// Grayscale tiles in bank order (output-major), row by row.
    Grid { rows: usize, cols: usize },
    /// Needs 3 input channels: one row per output channel, three tiles per
    /// row, tile `p` drawn in colour channel `p`.
    Rgb,
}

impl RenderLayout {
    /// RGB for 3-channel layers, otherwise one row per output channel.
    pub fn auto(layer: &AclLayer) -> Self {
        if layer.in_channels() == 3 {
            RenderLayout::Rgb
        } else {
            RenderLayout::Grid { rows: layer.out_channels(), cols: layer.in_channels() }
        }
    }
}

fn normalize(m: &WeightMatrix) -> Vec<u8> {
    let min = m.data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![128; m.data.len()];
    }
    m.data.iter().map(|v| ((v - min) / (max - min) * 255.0).round() as u8).collect()
}

pub fn render_layer(layer: &AclLayer, layout: RenderLayout) -> Result<Vec<u8>, DataError> {
    let size = layer.kernel_size();
    let tiles: Vec<Vec<u8>> = layer
        .specs()
        .iter()
        .map(|s| s.sample().map(|m| normalize(&m)))
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Corrupt(e.to_string()))?;
    let (rows, cols, channels) = match layout {
        RenderLayout::Grid { rows, cols } => {
            if rows * cols < tiles.len() {
                return Err(DataError::Layout { needed: tiles.len(), available: rows * cols });
            }
            (rows, cols, 1)
        }
        RenderLayout::Rgb => {
            if layer.in_channels() != 3 {
                return Err(DataError::Layout { needed: layer.in_channels(), available: 3 });
            }
            (layer.out_channels(), 3, 3)
        }
    };
    let width = cols * size.w + cols.saturating_sub(1);
    let height = rows * size.h + rows.saturating_sub(1);
    let header = format!("{}\n{width} {height}\n255\n", if channels == 1 { "P5" } else { "P6" });
    let mut px = vec![0u8; width * height * channels];
    for (k, tile) in tiles.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        let colour = if channels == 3 { c } else { 0 };
        for i in 0..size.h {
            for j in 0..size.w {
                let y = r * (size.h + 1) + i;
                let x = c * (size.w + 1) + j;
                px[(y * width + x) * channels + colour] = tile[i * size.w + j];
            }
        }
    }
    let mut out = header.into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_render(layer: &AclLayer, layout: RenderLayout, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &render_layer(layer, layout)?)
}
