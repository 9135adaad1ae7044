//! Hand-derived gradients of the binary cross-entropy loss with respect to
//! every parameter, including the position table, class token and patch
//! projection.

use super::forward::{column_block, forward_trace, sigmoid, BlockTrace};
use super::{BlockParams, ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, matmul, matmul_nt, matmul_tn, LayerNormStats, Real, Tensor};
use crate::tokenizer::Volume;

/// Probabilities are clamped to `[P_MIN, 1 - P_MIN]` inside the log.
pub const P_MIN: f64 = 1e-7;

/// Binary cross-entropy of a logit and its derivative with respect to the logit.
pub fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let clamped = p.clamp(P_MIN, 1.0 - P_MIN);
    let loss = -(label * clamped.ln() + (1.0 - label) * (1.0 - clamped).ln());
    // Zero slope where the clamp is active.
    let dlogit = if p < P_MIN || p > 1.0 - P_MIN { 0.0 } else { p - label };
    (loss, dlogit)
}

fn col_sums<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    let n = x.last_dim();
    let mut acc = vec![0.0f64; n];
    for row in x.data().chunks_exact(n) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.wide();
        }
    }
    acc
}

fn store<T: Real>(dst: &mut Tensor<T>, src: &[f64]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d = T::of(s);
    }
}

/// Backward through `y = x·w + b`: writes `dw`, `db`, returns `dx`.
fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    *dw = matmul_tn(x, dy)?;
    store(db, &col_sums(dy));
    matmul_nt(dy, w)
}

/// Backward through layer norm: writes `dgamma`, `dbeta`, returns `dx`.
fn layer_norm_backward<T: Real>(
    stats: &LayerNormStats<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let d = dy.last_dim();
    let mut dg = vec![0.0f64; d];
    let mut dbt = vec![0.0f64; d];
    let mut dx = Vec::with_capacity(dy.numel());
    let mut dxhat = vec![0.0f64; d];
    for (r, &rstd) in stats.rstd.iter().enumerate() {
        let dyr = dy.row(r);
        let xh = stats.xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let g = dyr[j].wide();
            let h = xh[j].wide();
            dg[j] += g * h;
            dbt[j] += g;
            let v = g * gamma.data()[j].wide();
            dxhat[j] = v;
            mean_dxhat += v;
            mean_dxhat_xhat += v * h;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx.push(T::of(
                rstd * (dxhat[j] - mean_dxhat - xh[j].wide() * mean_dxhat_xhat),
            ));
        }
    }
    store(dgamma, &dg);
    store(dbeta, &dbt);
    Tensor::new(dy.shape(), dx)
}

/// Backward through all attention heads: `d(mixed)` → `d(qkv)`.
fn attend_backward<T: Real>(
    trace: &BlockTrace<T>,
    dmixed: &Tensor<T>,
    cfg: &ViTConfig,
) -> Result<Tensor<T>> {
    let tokens = dmixed.rows();
    let (dim, hd) = (cfg.dim, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dqkv = Tensor::<T>::zeros(&[tokens, 3 * dim]);
    let per_head = tokens * tokens;
    for h in 0..cfg.heads {
        let q = column_block(&trace.qkv, h * hd, hd);
        let k = column_block(&trace.qkv, dim + h * hd, hd);
        let v = column_block(&trace.qkv, 2 * dim + h * hd, hd);
        let attn = Tensor::new(
            &[tokens, tokens],
            trace.attn.data()[h * per_head..(h + 1) * per_head].to_vec(),
        )?;
        let dout = column_block(dmixed, h * hd, hd);

        let dattn = matmul_nt(&dout, &v)?;
        let dv = matmul_tn(&attn, &dout)?;

        // softmax backward, row by row, then the 1/sqrt(hd) scale
        let mut dscores = Vec::with_capacity(per_head);
        for r in 0..tokens {
            let a = attn.row(r);
            let da = dattn.row(r);
            let dot: f64 = a.iter().zip(da).map(|(x, y)| x.wide() * y.wide()).sum();
            dscores.extend(
                a.iter()
                    .zip(da)
                    .map(|(x, y)| T::of(x.wide() * (y.wide() - dot) * scale)),
            );
        }
        let dscores = Tensor::new(&[tokens, tokens], dscores)?;
        let dq = matmul(&dscores, &k)?;
        let dk = matmul_tn(&dscores, &q)?;

        for r in 0..tokens {
            let row = dqkv.row_mut(r);
            row[h * hd..(h + 1) * hd].copy_from_slice(dq.row(r));
            row[dim + h * hd..dim + (h + 1) * hd].copy_from_slice(dk.row(r));
            row[2 * dim + h * hd..2 * dim + (h + 1) * hd].copy_from_slice(dv.row(r));
        }
    }
    Ok(dqkv)
}

fn add_into<T: Real>(acc: &mut Tensor<T>, x: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

/// Gradient of one block given the gradient at its output; returns the
/// gradient at its input.
fn block_backward<T: Real>(
    block: &BlockParams<T>,
    trace: &BlockTrace<T>,
    dout: Tensor<T>,
    grads: &mut BlockParams<T>,
    cfg: &ViTConfig,
) -> Result<Tensor<T>> {
    // x2 = x1 + fc2(gelu(fc1(ln2(x1))))
    let dact = linear_backward(&trace.act, &block.mlp_fc2_w, &dout, &mut grads.mlp_fc2_w, &mut grads.mlp_fc2_b)?;
    let dfc1 = Tensor::new(
        dact.shape(),
        dact.data()
            .iter()
            .zip(trace.fc1.data())
            .map(|(g, x)| T::of(g.wide() * gelu_grad_scalar(x.wide())))
            .collect(),
    )?;
    let dh2 = linear_backward(&trace.h2, &block.mlp_fc1_w, &dfc1, &mut grads.mlp_fc1_w, &mut grads.mlp_fc1_b)?;
    let dx1_mlp = layer_norm_backward(&trace.ln2, &block.ln2_g, &dh2, &mut grads.ln2_g, &mut grads.ln2_b)?;
    let mut dx1 = dout;
    add_into(&mut dx1, &dx1_mlp);

    // x1 = x + out(attend(qkv(ln1(x))))
    let dmixed = linear_backward(
        &trace.mixed,
        &block.attn_out_w,
        &dx1,
        &mut grads.attn_out_w,
        &mut grads.attn_out_b,
    )?;
    let dqkv = attend_backward(trace, &dmixed, cfg)?;
    let dh1 = linear_backward(&trace.h1, &block.qkv_w, &dqkv, &mut grads.qkv_w, &mut grads.qkv_b)?;
    let dx_attn = layer_norm_backward(&trace.ln1, &block.ln1_g, &dh1, &mut grads.ln1_g, &mut grads.ln1_b)?;
    let mut dx = dx1;
    add_into(&mut dx, &dx_attn);
    Ok(dx)
}

/// Binary cross-entropy of the model's prediction for `v` against `label`
/// (1 = case, 0 = control), with the gradient of every parameter.
pub fn loss_and_grads<T: Real>(
    v: &Volume,
    label: u8,
    params: &ModelParams<T>,
    cfg: &ViTConfig,
) -> Result<(f64, ModelParams<T>)> {
    if label > 1 {
        return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
    }
    let trace = forward_trace(v, params, cfg)?;
    let (loss, dlogit) = bce_with_logit(trace.logit, label as f64);
    let mut grads = params.zeros_like();

    // head
    for (g, c) in grads.head_w.data_mut().iter_mut().zip(trace.class_embedding.data()) {
        *g = T::of(c.wide() * dlogit);
    }
    grads.head_b.data_mut()[0] = T::of(dlogit);
    let dclass = Tensor::new(
        &[1, cfg.dim],
        params.head_w.data().iter().map(|w| T::of(w.wide() * dlogit)).collect(),
    )?;

    // final layer norm sees only the class row
    let dclass_row = layer_norm_backward(
        &trace.final_ln,
        &params.norm_g,
        &dclass,
        &mut grads.norm_g,
        &mut grads.norm_b,
    )?;
    let geometry = params.geometry();
    let tokens = geometry.num_tokens();
    let mut dx = Tensor::<T>::zeros(&[tokens, cfg.dim]);
    dx.row_mut(0).copy_from_slice(dclass_row.data());

    for (i, (block, trace)) in params.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        dx = block_backward(block, trace, dx, &mut grads.blocks[i], cfg)?;
    }

    // sequence assembly: row 0 = cls + pos.cls, rows 1.. = proj(patches) + pos.patch
    grads.cls.data_mut().copy_from_slice(dx.row(0));
    grads.pos.class_pe.data_mut().copy_from_slice(dx.row(0));
    grads.pos.patch_pe.data_mut().copy_from_slice(&dx.data()[cfg.dim..]);
    let demb = Tensor::new(&[geometry.num_patches(), cfg.dim], dx.data()[cfg.dim..].to_vec())?;
    grads.proj_w = matmul_tn(&trace.patches, &demb)?;
    store(&mut grads.proj_b, &col_sums(&demb));

    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        let (l, d) = bce_with_logit(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d + 0.5).abs() < 1e-12);
        let (l, d) = bce_with_logit(0.0, 0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d - 0.5).abs() < 1e-12);
        // saturated and correct: clamped loss, no gradient
        let (l, d) = bce_with_logit(40.0, 1.0);
        assert!(l < 1e-6 && d == 0.0);
        let (l, _) = bce_with_logit(-40.0, 1.0);
        assert!((l - (-(P_MIN.ln()))).abs() < 1e-9);
    }
}
