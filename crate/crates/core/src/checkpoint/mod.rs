//! Tensor archives and the 2D → 3D weight import.

mod archive;
mod import;

pub use archive::{load_archive, read_archive, save_archive, write_archive, ArchiveError, NamedTensors, MAGIC};
pub use import::{import_2d_vit, synthetic_pretrained_2d, ImportReport, POS_GRID};

use crate::encoder::{ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Volume;

/// Tensor name under which volumes are stored.
pub const VOLUME_TENSOR: &str = "volume";

pub fn volume_to_archive(v: &Volume) -> NamedTensors {
    NamedTensors::from([(VOLUME_TENSOR.to_string(), v.voxels().clone())])
}

pub fn volume_from_archive(named: &NamedTensors) -> Result<Volume> {
    let t: &Tensor<f32> = named
        .get(VOLUME_TENSOR)
        .ok_or_else(|| Error::MissingTensor(VOLUME_TENSOR.into()))?;
    Volume::new(t.clone())
}

pub fn model_from_archive(named: NamedTensors, cfg: &ViTConfig) -> Result<ModelParams<f32>> {
    ModelParams::from_named(named, cfg)
}
