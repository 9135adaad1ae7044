//! Volume → token sequence.
//!
//! A `D × H × W` volume is treated as `D` independent grayscale slices. Each
//! slice is replicated to three channels and cut into 16×16 patches exactly
//! as a 2D vision transformer would, so the pretrained patch projection
//! applies unchanged. Tokens are ordered slice-major, then patch row, then
//! patch column; every flattened patch is channel-major, then row-major.
//!
//! Spatial information enters through a per-slice copy of the 2D position
//! embedding grid (resized bicubically when the slice grid differs from the
//! pretraining grid). The copies start identical and are trained
//! independently afterwards.

use crate::error::{Error, Result};
use crate::tensor::{bicubic_resize_2d, matmul, Real, Tensor};

pub const PATCH: usize = 16;
pub const CHANNELS: usize = 3;
/// Flattened patch width, `3 · 16 · 16`.
pub const PATCH_DIM: usize = CHANNELS * PATCH * PATCH;

/// A scan: `D` slices of `H × W` voxels with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    voxels: Tensor<f32>,
}

impl Volume {
    pub fn new(voxels: Tensor<f32>) -> Result<Self> {
        if voxels.rank() != 3 {
            return Err(Error::invalid(format!(
                "volume must be D×H×W, got shape {:?}",
                voxels.shape()
            )));
        }
        if let Some(bad) = voxels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "voxel value {bad} outside [0, 1]"
            )));
        }
        Ok(Volume { voxels })
    }

    pub fn zeros(depth: usize, height: usize, width: usize) -> Self {
        Volume {
            voxels: Tensor::zeros(&[depth, height, width]),
        }
    }

    pub fn depth(&self) -> usize {
        self.voxels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.voxels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.voxels.shape()[2]
    }

    pub fn voxels(&self) -> &Tensor<f32> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Tensor<f32> {
        self.voxels
    }

    pub fn get(&self, d: usize, y: usize, x: usize) -> f32 {
        self.voxels.data()[(d * self.height() + y) * self.width() + x]
    }

    /// Geometry this volume will have after padding.
    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry::for_volume(self.depth(), self.height(), self.width())
    }
}

/// Token grid of a padded volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGeometry {
    pub depth: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeometry {
    pub fn new(depth: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if depth == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid(format!(
                "patch geometry must be positive, got {depth}×{grid_h}×{grid_w}"
            )));
        }
        Ok(PatchGeometry {
            depth,
            grid_h,
            grid_w,
        })
    }

    /// Geometry for an unpadded `D × H × W` volume: `⌈H/16⌉ × ⌈W/16⌉` per slice.
    pub fn for_volume(depth: usize, height: usize, width: usize) -> Self {
        PatchGeometry {
            depth,
            grid_h: height.div_ceil(PATCH),
            grid_w: width.div_ceil(PATCH),
        }
    }

    pub fn patches_per_slice(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_patches(&self) -> usize {
        self.depth * self.patches_per_slice()
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Patch index of `(slice, row, col)` in token order (class token excluded).
    pub fn patch_index(&self, d: usize, gh: usize, gw: usize) -> usize {
        (d * self.grid_h + gh) * self.grid_w + gw
    }

    pub fn padded_height(&self) -> usize {
        self.grid_h * PATCH
    }

    pub fn padded_width(&self) -> usize {
        self.grid_w * PATCH
    }
}

/// Input sequence for the encoder: class token in row 0, patches after.
#[derive(Clone, Debug)]
pub struct TokenSequence<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub geometry: PatchGeometry,
}

/// Learnable position embeddings for a 3D token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable<T: Real = f32> {
    /// `[1 × dim]`
    pub class_pe: Tensor<T>,
    /// `[D × Gh × Gw × dim]`
    pub patch_pe: Tensor<T>,
}

impl<T: Real> PositionTable<T> {
    pub fn geometry(&self) -> PatchGeometry {
        let s = self.patch_pe.shape();
        PatchGeometry {
            depth: s[0],
            grid_h: s[1],
            grid_w: s[2],
        }
    }

    pub fn dim(&self) -> usize {
        self.patch_pe.last_dim()
    }

    /// Embedding slab of one slice, `[Gh × Gw × dim]`, as a flat slice.
    pub fn slice(&self, d: usize) -> &[T] {
        let per = self.patch_pe.numel() / self.patch_pe.shape()[0];
        &self.patch_pe.data()[d * per..(d + 1) * per]
    }
}

/// Copies the single grayscale channel into three identical channels.
pub fn replicate_channels(v: &Volume) -> Tensor<f32> {
    let (d, h, w) = (v.depth(), v.height(), v.width());
    let plane = h * w;
    let src = v.voxels.data();
    let mut out = Vec::with_capacity(d * CHANNELS * plane);
    for s in 0..d {
        let slice = &src[s * plane..(s + 1) * plane];
        for _ in 0..CHANNELS {
            out.extend_from_slice(slice);
        }
    }
    Tensor::new(&[d, CHANNELS, h, w], out).expect("replicated shape")
}

/// Zero-pads the bottom and right edges up to the next multiple of 16.
pub fn pad_to_patch_multiple(v: &Volume) -> Volume {
    let (d, h, w) = (v.depth(), v.height(), v.width());
    let geo = v.geometry();
    let (ph, pw) = (geo.padded_height(), geo.padded_width());
    if ph == h && pw == w {
        return v.clone();
    }
    let src = v.voxels.data();
    let mut out = vec![0.0f32; d * ph * pw];
    for s in 0..d {
        for y in 0..h {
            let from = (s * h + y) * w;
            let to = (s * ph + y) * pw;
            out[to..to + w].copy_from_slice(&src[from..from + w]);
        }
    }
    Volume {
        voxels: Tensor::new(&[d, ph, pw], out).expect("padded shape"),
    }
}

/// `[D × 3 × H × W]` → `[N × 768]`.
pub fn patchify<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[1] != CHANNELS {
        return Err(Error::invalid(format!(
            "patchify expects D×3×H×W, got {:?}",
            x.shape()
        )));
    }
    let (d, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::invalid(format!(
            "slice size {h}×{w} is not a multiple of {PATCH}; call pad_to_patch_multiple first"
        )));
    }
    let (gh, gw) = (h / PATCH, w / PATCH);
    let src = x.data();
    let mut out = Vec::with_capacity(d * gh * gw * PATCH_DIM);
    for s in 0..d {
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..CHANNELS {
                    let plane = (s * CHANNELS + c) * h * w;
                    for r in 0..PATCH {
                        let start = plane + (py * PATCH + r) * w + px * PATCH;
                        out.extend_from_slice(&src[start..start + PATCH]);
                    }
                }
            }
        }
    }
    Tensor::new(&[d * gh * gw, PATCH_DIM], out)
}

/// Inverse of [`patchify`] for a known geometry.
pub fn unpatchify<T: Real>(patches: &Tensor<T>, geometry: PatchGeometry) -> Result<Tensor<T>> {
    if patches.shape() != [geometry.num_patches(), PATCH_DIM] {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![geometry.num_patches(), PATCH_DIM],
        });
    }
    let (h, w) = (geometry.padded_height(), geometry.padded_width());
    let d = geometry.depth;
    let mut out = vec![T::zero(); d * CHANNELS * h * w];
    for (idx, patch) in patches.data().chunks_exact(PATCH_DIM).enumerate() {
        let s = idx / geometry.patches_per_slice();
        let py = (idx / geometry.grid_w) % geometry.grid_h;
        let px = idx % geometry.grid_w;
        for c in 0..CHANNELS {
            let plane = (s * CHANNELS + c) * h * w;
            for r in 0..PATCH {
                let start = plane + (py * PATCH + r) * w + px * PATCH;
                let from = (c * PATCH + r) * PATCH;
                out[start..start + PATCH].copy_from_slice(&patch[from..from + PATCH]);
            }
        }
    }
    Tensor::new(&[d, CHANNELS, h, w], out)
}

/// Pads, replicates channels and patchifies in one pass.
pub fn volume_patches<T: Real>(v: &Volume) -> Result<(Tensor<T>, PatchGeometry)> {
    let padded = pad_to_patch_multiple(v);
    let geometry = padded.geometry();
    let patches = patchify(&replicate_channels(&padded))?;
    Ok((patches.cast(), geometry))
}

/// `patches · proj_w + proj_b`.
pub fn project_patches<T: Real>(patches: &Tensor<T>, proj_w: &Tensor<T>, proj_b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = matmul(patches, proj_w)?;
    let dim = out.last_dim();
    if proj_b.numel() != dim {
        return Err(Error::Shape {
            op: "project_patches",
            lhs: out.shape().to_vec(),
            rhs: proj_b.shape().to_vec(),
        });
    }
    for row in out.data_mut().chunks_exact_mut(dim) {
        for (v, &b) in row.iter_mut().zip(proj_b.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Adapts a 2D position-embedding grid `[Gh0 × Gw0 × dim]` to a 3D token grid.
///
/// The grid is resized bicubically when its size differs from `Gh × Gw`, then
/// copied once per slice. The class embedding passes through unchanged.
pub fn build_position_table<T: Real>(
    class_pe: &Tensor<T>,
    grid: &Tensor<T>,
    target: PatchGeometry,
) -> Result<PositionTable<T>> {
    if grid.rank() != 3 {
        return Err(Error::invalid(format!(
            "2D position grid must be Gh×Gw×dim, got {:?}",
            grid.shape()
        )));
    }
    let (gh0, gw0, dim) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if gh0 < 2 || gw0 < 2 {
        return Err(Error::invalid(format!(
            "source position grid {gh0}×{gw0} is degenerate; need at least 2×2"
        )));
    }
    if class_pe.numel() != dim {
        return Err(Error::Shape {
            op: "build_position_table",
            lhs: class_pe.shape().to_vec(),
            rhs: grid.shape().to_vec(),
        });
    }
    let slice = if (target.grid_h, target.grid_w) == (gh0, gw0) {
        grid.clone()
    } else {
        bicubic_resize_2d(grid, target.grid_h, target.grid_w)?
    };
    let mut data = Vec::with_capacity(target.depth * slice.numel());
    for _ in 0..target.depth {
        data.extend_from_slice(slice.data());
    }
    Ok(PositionTable {
        class_pe: class_pe.clone().reshape(&[1, dim])?,
        patch_pe: Tensor::new(&[target.depth, target.grid_h, target.grid_w, dim], data)?,
    })
}

/// Prepends the class token and adds position embeddings.
pub fn assemble_sequence<T: Real>(
    embeddings: &Tensor<T>,
    class_token: &Tensor<T>,
    table: &PositionTable<T>,
) -> Result<TokenSequence<T>> {
    let geometry = table.geometry();
    let dim = table.dim();
    if embeddings.shape() != [geometry.num_patches(), dim] || class_token.numel() != dim {
        return Err(Error::Shape {
            op: "assemble_sequence",
            lhs: embeddings.shape().to_vec(),
            rhs: table.patch_pe.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity((geometry.num_patches() + 1) * dim);
    data.extend(
        class_token
            .data()
            .iter()
            .zip(table.class_pe.data())
            .map(|(&c, &p)| c + p),
    );
    data.extend(
        embeddings
            .data()
            .iter()
            .zip(table.patch_pe.data())
            .map(|(&e, &p)| e + p),
    );
    Ok(TokenSequence {
        tokens: Tensor::new(&[geometry.num_tokens(), dim], data)?,
        geometry,
    })
}
