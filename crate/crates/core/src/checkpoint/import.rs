use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NamedTensors;
use crate::encoder::{parameter_shapes, ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tokenizer::{build_position_table, PatchGeometry, PATCH_DIM};

/// Name of the 2D position grid `[Gh0 × Gw0 × dim]` in a pretrained archive.
pub const POS_GRID: &str = "pos.grid";

const HEAD_STD: f64 = 0.02;

/// What happened to each target tensor during import.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    /// Copied byte-for-byte from the 2D archive.
    pub copied: Vec<String>,
    /// Derived from a pretrained tensor (the per-slice position table).
    pub adapted: Vec<String>,
    /// Subset of `adapted` that went through bicubic resizing.
    pub resized: Vec<String>,
    /// Freshly initialized (the classification head).
    pub reinitialized: Vec<String>,
    pub source_grid: [usize; 2],
    pub target_geometry: [usize; 3],
}

fn expect_shape(named: &NamedTensors, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = named.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if t.shape() != shape {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t.clone())
}

/// Turns a 2D pretrained checkpoint into a 3D model for `target`.
///
/// Encoder, projection, class token and final norm are copied verbatim; the
/// 2D position grid is resized (if needed) and replicated per slice; the
/// classification head is drawn fresh from `rng` (truncated normal std 0.02
/// weights, zero bias). A head present in the archive is ignored.
pub fn import_2d_vit(
    archive: &NamedTensors,
    target: PatchGeometry,
    cfg: &ViTConfig,
    rng: &mut SeededRng,
) -> Result<(ModelParams<f32>, ImportReport)> {
    cfg.validate()?;
    let grid = archive
        .get(POS_GRID)
        .ok_or_else(|| Error::MissingTensor(POS_GRID.to_string()))?;
    if grid.rank() != 3 || grid.shape()[2] != cfg.dim {
        return Err(Error::TensorShape {
            name: POS_GRID.to_string(),
            expected: vec![0, 0, cfg.dim],
            found: grid.shape().to_vec(),
        });
    }
    let source_grid = [grid.shape()[0], grid.shape()[1]];
    let class_pe = expect_shape(archive, "pos.cls", &[1, cfg.dim])?;
    let table = build_position_table(&class_pe, grid, target)?;

    let mut named = BTreeMap::new();
    let mut report = ImportReport {
        copied: Vec::new(),
        adapted: Vec::new(),
        resized: Vec::new(),
        reinitialized: Vec::new(),
        source_grid,
        target_geometry: [target.depth, target.grid_h, target.grid_w],
    };
    for (name, shape) in parameter_shapes(cfg, target) {
        let tensor = match name.as_str() {
            "pos.patch" => {
                report.adapted.push(name.clone());
                if source_grid != [target.grid_h, target.grid_w] {
                    report.resized.push(name.clone());
                }
                table.patch_pe.clone()
            }
            "head.w" => {
                report.reinitialized.push(name.clone());
                Tensor::from_fn(&shape, |_| rng.truncated_normal(HEAD_STD) as f32)
            }
            "head.b" => {
                report.reinitialized.push(name.clone());
                Tensor::zeros(&shape)
            }
            _ => {
                report.copied.push(name.clone());
                expect_shape(archive, &name, &shape)?
            }
        };
        named.insert(name, tensor);
    }
    Ok((ModelParams::from_named(named, cfg)?, report))
}

/// A stand-in for a public 2D checkpoint: random DeiT-style weights for a
/// `grid_h × grid_w` pretraining grid, deterministic in `seed`.
///
/// Weight matrices are drawn with std `1/√fan_in`, the scale of trained
/// weights rather than of a fresh init. The position grid is a smooth 2D
/// sinusoidal field plus small noise, so resizing it behaves like resizing a
/// trained embedding grid.
pub fn synthetic_pretrained_2d(cfg: &ViTConfig, grid_h: usize, grid_w: usize, seed: u64) -> Result<NamedTensors> {
    cfg.validate()?;
    let geometry = PatchGeometry::new(1, grid_h, grid_w)?;
    let mut rng = SeededRng::new(seed);
    let params = ModelParams::<f32>::init(cfg, geometry, &mut rng)?;
    let mut named = params.to_named();
    named.remove("pos.patch");
    named.remove("head.w");
    named.remove("head.b");
    for (name, t) in named.iter_mut() {
        if name.ends_with(".w") {
            let std = 1.0 / (t.shape()[0] as f64).sqrt();
            *t = Tensor::from_fn(t.shape(), |_| rng.truncated_normal(std) as f32);
        }
    }
    let dim = cfg.dim;
    let grid = Tensor::from_fn(&[grid_h, grid_w, dim], |i| {
        let c = i % dim;
        let x = (i / dim) % grid_w;
        let y = i / (dim * grid_w);
        let (pos, axis_len) = if c % 2 == 0 { (y, grid_h) } else { (x, grid_w) };
        let freq = 1.0 + (c / 2 % 4) as f64;
        let phase = std::f64::consts::PI * freq * pos as f64 / axis_len as f64;
        let wave = if c / 8 % 2 == 0 { phase.sin() } else { phase.cos() };
        (0.02 * wave + rng.truncated_normal(0.002)) as f32
    });
    named.insert(POS_GRID.to_string(), grid);
    debug_assert_eq!(named["proj.w"].shape(), &[PATCH_DIM, dim]);
    Ok(named)
}
