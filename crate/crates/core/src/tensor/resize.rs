use super::{Real, Tensor};
use crate::error::{Error, Result};

const CUBIC_A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn catmull_rom_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x * x * x - (CUBIC_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        CUBIC_A * x * x * x - 5.0 * CUBIC_A * x * x + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Align-corners source coordinate for output index `i`.
fn align_corners_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    if out_len == 1 {
        0.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

/// Four (index, weight) taps around `src`, with indices clamped to the edge.
fn cubic_taps(src: f64, len: usize) -> [(usize, f64); 4] {
    let base = src.floor();
    let frac = src - base;
    let base = base as isize;
    let mut taps = [(0usize, 0.0f64); 4];
    for (slot, off) in taps.iter_mut().zip(-1isize..=2) {
        let idx = (base + off).clamp(0, len as isize - 1) as usize;
        *slot = (idx, catmull_rom_weight(frac - off as f64));
    }
    taps
}

/// Channelwise bicubic resize of an `h × w × d` grid.
///
/// Sampling is align-corners, so corners map to corners and a resize to the
/// input size returns the input unchanged.
pub fn bicubic_resize_2d<T: Real>(grid: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if grid.rank() != 3 {
        return Err(Error::invalid(format!(
            "bicubic_resize_2d expects an h×w×d grid, got {:?}",
            grid.shape()
        )));
    }
    let (h, w, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "cannot interpolate a {h}×{w} grid; grids smaller than 2×2 must be replicated instead"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be at least 1×1"));
    }
    if out_h == h && out_w == w {
        return Ok(grid.clone());
    }
    let src = grid.data();
    let row_taps: Vec<_> = (0..out_h)
        .map(|i| cubic_taps(align_corners_coord(i, h, out_h), h))
        .collect();
    let col_taps: Vec<_> = (0..out_w)
        .map(|j| cubic_taps(align_corners_coord(j, w, out_w), w))
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w * d);
    let mut acc = vec![0.0f64; d];
    for rt in &row_taps {
        for ct in &col_taps {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(y, wy) in rt {
                for &(x, wx) in ct {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let base = (y * w + x) * d;
                    for (a, v) in acc.iter_mut().zip(&src[base..base + d]) {
                        *a += wgt * v.wide();
                    }
                }
            }
            out.extend(acc.iter().map(|&a| T::of(a)));
        }
    }
    Tensor::new(&[out_h, out_w, d], out)
}

/// Single-channel bilinear resize of an `h × w` map with half-pixel centres.
pub fn bilinear_resize_2d<T: Real>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if map.rank() != 2 {
        return Err(Error::invalid(format!(
            "bilinear_resize_2d expects an h×w map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let taps = |i: usize, in_len: usize, out_len: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, s - lo as f64)
    };
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = taps(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = taps(j, w, out_w);
            let v = |y: usize, x: usize| src[y * w + x].wide();
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(T::of(top * (1.0 - fy) + bottom * fy));
        }
    }
    Tensor::new(&[out_h, out_w], out)
}
