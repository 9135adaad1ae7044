//! Attention rollout: the product of residual-mixed, head-averaged
//! attention maps, and its projection back onto the volume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{save_archive, NamedTensors};
use crate::encoder::{forward, AttentionStack, ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize_2d, matmul, Real, Tensor};
use crate::tokenizer::{PatchGeometry, Volume, PATCH};

/// Tolerance on attention row sums accepted as input.
pub const ROW_TOLERANCE: f64 = 1e-3;

/// Tensor name of an exported heatmap.
pub const HEATMAP_TENSOR: &str = "heatmap";

fn check_layer<T: Real>(layer: &Tensor<T>, index: usize) -> Result<()> {
    let t = layer.last_dim();
    for (r, row) in layer.data().chunks_exact(t).enumerate() {
        let mut sum = 0.0;
        for v in row {
            let v = v.wide();
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("layer {index} row {r} has entry {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::invalid(format!("layer {index} row {r} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// Head mean, then `½A + ½I`, then rows renormalized.
fn mixed_layer<T: Real>(layer: &Tensor<T>) -> Result<Tensor<f64>> {
    let (heads, t) = (layer.shape()[0], layer.shape()[1]);
    let mut a = vec![0.0f64; t * t];
    for h in layer.data().chunks_exact(t * t) {
        for (acc, v) in a.iter_mut().zip(h) {
            *acc += v.wide();
        }
    }
    for (r, row) in a.chunks_exact_mut(t).enumerate() {
        for v in row.iter_mut() {
            *v = 0.5 * *v / heads as f64;
        }
        row[r] += 0.5;
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(&[t, t], a)
}

/// Rollout `A'_L · … · A'_1` of an attention stack, as a `T × T` matrix.
pub fn attention_rollout<T: Real>(stack: &AttentionStack<T>) -> Result<Tensor<f64>> {
    let first = stack.layers.first().ok_or_else(|| Error::invalid("empty attention stack"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::invalid(format!("attention layers must be heads×T×T, got {shape:?}")));
    }
    let mut rollout: Option<Tensor<f64>> = None;
    for (i, layer) in stack.layers.iter().enumerate() {
        if layer.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "attention_rollout",
                lhs: shape.clone(),
                rhs: layer.shape().to_vec(),
            });
        }
        check_layer(layer, i)?;
        let a = mixed_layer(layer)?;
        rollout = Some(match rollout {
            None => a,
            Some(r) => matmul(&a, &r)?,
        });
    }
    Ok(rollout.expect("non-empty stack"))
}

/// Class-token row of `rollout` without its class entry, projected onto a
/// `depth × height × width` grid and min-max normalized to [0, 1]. A
/// constant map normalizes to all zeros.
pub fn class_heatmap(rollout: &Tensor<f64>, geometry: PatchGeometry, height: usize, width: usize) -> Result<Tensor<f32>> {
    let t = geometry.num_tokens();
    if rollout.shape() != [t, t] {
        return Err(Error::Shape {
            op: "class_heatmap",
            lhs: rollout.shape().to_vec(),
            rhs: vec![t, t],
        });
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("heatmap height and width must be positive"));
    }
    let patch_row = &rollout.row(0)[1..];
    let per_slice = geometry.patches_per_slice();
    let mut data = Vec::with_capacity(geometry.depth * height * width);
    for d in 0..geometry.depth {
        let grid = Tensor::new(
            &[geometry.grid_h, geometry.grid_w],
            patch_row[d * per_slice..(d + 1) * per_slice].to_vec(),
        )?;
        data.extend_from_slice(bilinear_resize_2d(&grid, height, width)?.data());
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let normalized = data
        .into_iter()
        .map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect();
    Tensor::new(&[geometry.depth, height, width], normalized)
}

/// Runs the model on `v` and returns the prediction with its heatmap over
/// the padded volume (`D × 16·Gh × 16·Gw`).
pub fn volume_heatmap(v: &Volume, params: &ModelParams<f32>, cfg: &ViTConfig) -> Result<(f64, Tensor<f32>)> {
    let (p, stack) = forward(v, params, cfg)?;
    let geometry = v.geometry();
    let r = attention_rollout(&stack)?;
    let h = class_heatmap(&r, geometry, PATCH * geometry.grid_h, PATCH * geometry.grid_w)?;
    Ok((p, h))
}

/// Crops a padded `D × Hp × Wp` heatmap back to `height × width` slices.
pub fn crop_heatmap(h: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (d, hp, wp) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if height > hp || width > wp {
        return Err(Error::invalid(format!("cannot crop {hp}x{wp} to {height}x{width}")));
    }
    let mut data = Vec::with_capacity(d * height * width);
    for z in 0..d {
        for y in 0..height {
            let start = (z * hp + y) * wp;
            data.extend_from_slice(&h.data()[start..start + width]);
        }
    }
    Tensor::new(&[d, height, width], data)
}

/// Binary PGM (P5, maxval 255) of one `h × w` slice with values in [0, 1].
pub fn pgm_bytes(slice: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(slice.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Writes `<stem>.nta` with tensor `heatmap` and `<stem>_<slice>.pgm` for
/// every slice, returning the written paths.
pub fn export_heatmap(heatmap: &Tensor<f32>, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    if heatmap.rank() != 3 {
        return Err(Error::invalid(format!("heatmap must be D×H×W, got {:?}", heatmap.shape())));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let nta = dir.join(format!("{stem}.nta"));
    save_archive(&nta, &NamedTensors::from([(HEATMAP_TENSOR.to_string(), heatmap.clone())]))?;
    let mut written = vec![nta];
    let (depth, h, w) = (heatmap.shape()[0], heatmap.shape()[1], heatmap.shape()[2]);
    let width = depth.saturating_sub(1).to_string().len().max(2);
    for d in 0..depth {
        let path = dir.join(format!("{stem}_{d:0width$}.pgm"));
        let mut f = fs::File::create(&path)?;
        f.write_all(&pgm_bytes(&heatmap.data()[d * h * w..(d + 1) * h * w], h, w))?;
        written.push(path);
    }
    Ok(written)
}

/// Share of total heatmap mass that falls on `mask` voxels.
pub fn mass_fraction(heatmap: &Tensor<f32>, mask: &[bool]) -> Result<f64> {
    if mask.len() != heatmap.numel() {
        return Err(Error::invalid(format!(
            "mask has {} voxels, heatmap {}",
            mask.len(),
            heatmap.numel()
        )));
    }
    let total: f64 = heatmap.data().iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = heatmap
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .sum();
    Ok(inside / total)
}
