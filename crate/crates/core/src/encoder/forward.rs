use super::{BlockParams, ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::{
    gelu_scalar, layer_norm_with_stats, matmul, matmul_nt, softmax_rows_in_place, LayerNormStats, Real, Tensor,
};
use crate::tokenizer::{assemble_sequence, project_patches, volume_patches, TokenSequence, Volume};

pub const LN_EPS: f64 = 1e-6;

/// Post-softmax attention of every layer, each `[heads × T × T]`.
#[derive(Clone, Debug)]
pub struct AttentionStack<T: Real = f32> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Real> AttentionStack<T> {
    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[1])
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[0])
    }
}

/// Activations of one block kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockTrace<T: Real> {
    pub ln1: LayerNormStats<T>,
    pub h1: Tensor<T>,
    pub qkv: Tensor<T>,
    pub attn: Tensor<T>,
    pub mixed: Tensor<T>,
    pub ln2: LayerNormStats<T>,
    pub h2: Tensor<T>,
    pub fc1: Tensor<T>,
    pub act: Tensor<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardTrace<T: Real> {
    pub patches: Tensor<T>,
    pub blocks: Vec<BlockTrace<T>>,
    /// Final layer norm of the class row only.
    pub final_ln: LayerNormStats<T>,
    pub class_embedding: Tensor<T>,
    pub logit: f64,
}

/// `x · w + b` with `b` broadcast over rows.
pub(crate) fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    let n = y.last_dim();
    if b.numel() != n {
        return Err(Error::Shape {
            op: "linear",
            lhs: y.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    for row in y.data_mut().chunks_exact_mut(n) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Columns `[start, start + width)` of a matrix, as a new contiguous matrix.
pub(crate) fn column_block<T: Real>(x: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x.row(r)[start..start + width]);
    }
    Tensor::new(&[rows, width], out).expect("column block shape")
}

/// Scaled dot-product attention over all heads.
///
/// Returns the concatenated head outputs `[T × dim]` and the attention
/// probabilities `[heads × T × T]`.
pub(crate) fn attend<T: Real>(qkv: &Tensor<T>, cfg: &ViTConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    let tokens = qkv.rows();
    let (dim, hd) = (cfg.dim, cfg.head_dim());
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut mixed = Tensor::zeros(&[tokens, dim]);
    let mut attn = Vec::with_capacity(cfg.heads * tokens * tokens);
    for h in 0..cfg.heads {
        let q = column_block(qkv, h * hd, hd);
        let k = column_block(qkv, dim + h * hd, hd);
        let v = column_block(qkv, 2 * dim + h * hd, hd);
        let mut scores = matmul_nt(&q, &k)?;
        scores.scale(scale);
        if !scores.all_finite() {
            return Err(Error::NonFinite(format!("attention scores of head {h}")));
        }
        softmax_rows_in_place(scores.data_mut(), tokens);
        let out = matmul(&scores, &v)?;
        for r in 0..tokens {
            mixed.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(out.row(r));
        }
        attn.extend_from_slice(scores.data());
    }
    Ok((mixed, Tensor::new(&[cfg.heads, tokens, tokens], attn)?))
}

/// Multi-head self-attention on an already layer-normed stream `[T × dim]`.
///
/// Returns the sublayer output (before the residual add) and the attention
/// probabilities of every head.
pub fn mhsa_forward<T: Real>(
    x_norm: &Tensor<T>,
    block: &BlockParams<T>,
    cfg: &ViTConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let qkv = linear(x_norm, &block.qkv_w, &block.qkv_b)?;
    let (mixed, attn) = attend(&qkv, cfg)?;
    Ok((linear(&mixed, &block.attn_out_w, &block.attn_out_b)?, attn))
}

fn add_in_place<T: Real>(x: &mut Tensor<T>, y: &Tensor<T>) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

pub(crate) fn block_forward<T: Real>(
    x: &Tensor<T>,
    block: &BlockParams<T>,
    cfg: &ViTConfig,
) -> Result<(Tensor<T>, BlockTrace<T>)> {
    let (h1, ln1) = layer_norm_with_stats(x, &block.ln1_g, &block.ln1_b, LN_EPS)?;
    let qkv = linear(&h1, &block.qkv_w, &block.qkv_b)?;
    let (mixed, attn) = attend(&qkv, cfg)?;
    let attn_out = linear(&mixed, &block.attn_out_w, &block.attn_out_b)?;
    let mut x1 = x.clone();
    add_in_place(&mut x1, &attn_out);

    let (h2, ln2) = layer_norm_with_stats(&x1, &block.ln2_g, &block.ln2_b, LN_EPS)?;
    let fc1 = linear(&h2, &block.mlp_fc1_w, &block.mlp_fc1_b)?;
    let act = fc1.map(|v| T::of(gelu_scalar(v.wide())));
    let fc2 = linear(&act, &block.mlp_fc2_w, &block.mlp_fc2_b)?;
    let mut x2 = x1;
    add_in_place(&mut x2, &fc2);
    Ok((
        x2,
        BlockTrace {
            ln1,
            h1,
            qkv,
            attn,
            mixed,
            ln2,
            h2,
            fc1,
            act,
        },
    ))
}

fn run_encoder<T: Real>(
    tokens: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ViTConfig,
) -> Result<(Tensor<T>, LayerNormStats<T>, Vec<BlockTrace<T>>)> {
    if tokens.rank() != 2 || tokens.last_dim() != cfg.dim {
        return Err(Error::Shape {
            op: "encoder_forward",
            lhs: tokens.shape().to_vec(),
            rhs: vec![0, cfg.dim],
        });
    }
    if params.blocks.len() != cfg.depth {
        return Err(Error::invalid(format!(
            "model has {} blocks, config says {}",
            params.blocks.len(),
            cfg.depth
        )));
    }
    let mut x = tokens.clone();
    let mut traces = Vec::with_capacity(cfg.depth);
    for (i, block) in params.blocks.iter().enumerate() {
        let (next, trace) = block_forward(&x, block, cfg).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("block {i}: {what}")),
            other => other,
        })?;
        if !next.all_finite() {
            return Err(Error::NonFinite(format!("activations of block {i}")));
        }
        x = next;
        traces.push(trace);
    }
    let class_row = Tensor::new(&[1, cfg.dim], x.row(0).to_vec())?;
    let (class_embedding, stats) = layer_norm_with_stats(&class_row, &params.norm_g, &params.norm_b, LN_EPS)?;
    Ok((class_embedding, stats, traces))
}

/// Runs the pre-norm blocks and the final layer norm; returns the encoded
/// class token `[dim]` and every layer's attention.
pub fn encoder_forward<T: Real>(
    seq: &TokenSequence<T>,
    params: &ModelParams<T>,
    cfg: &ViTConfig,
) -> Result<(Tensor<T>, AttentionStack<T>)> {
    let (class_embedding, _, traces) = run_encoder(&seq.tokens, params, cfg)?;
    Ok((
        class_embedding.reshape(&[cfg.dim])?,
        AttentionStack {
            layers: traces.into_iter().map(|t| t.attn).collect(),
        },
    ))
}

/// Single logit from the encoded class token.
pub fn classify<T: Real>(class_embedding: &Tensor<T>, head_w: &Tensor<T>, head_b: &Tensor<T>) -> Result<f64> {
    if class_embedding.numel() != head_w.numel() || head_b.numel() != 1 {
        return Err(Error::Shape {
            op: "classify",
            lhs: class_embedding.shape().to_vec(),
            rhs: head_w.shape().to_vec(),
        });
    }
    if !class_embedding.all_finite() {
        return Err(Error::NonFinite("class embedding".into()));
    }
    let dot: f64 = class_embedding
        .data()
        .iter()
        .zip(head_w.data())
        .map(|(a, b)| a.wide() * b.wide())
        .sum();
    Ok(dot + head_b.data()[0].wide())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Full pipeline up to the logit, keeping every activation.
pub(crate) fn forward_trace<T: Real>(v: &Volume, params: &ModelParams<T>, cfg: &ViTConfig) -> Result<ForwardTrace<T>> {
    let (patches, geometry) = volume_patches::<T>(v)?;
    if geometry != params.geometry() {
        return Err(Error::invalid(format!(
            "volume tokenizes to {geometry:?} but the position table is {:?}",
            params.geometry()
        )));
    }
    let embeddings = project_patches(&patches, &params.proj_w, &params.proj_b)?;
    let seq = assemble_sequence(&embeddings, &params.cls, &params.pos)?;
    let (class_embedding, final_ln, blocks) = run_encoder(&seq.tokens, params, cfg)?;
    let logit = classify(&class_embedding, &params.head_w, &params.head_b)?;
    Ok(ForwardTrace {
        patches,
        blocks,
        final_ln,
        class_embedding,
        logit,
    })
}

/// Probability that `v` is a case, plus the attention of every layer.
pub fn forward<T: Real>(v: &Volume, params: &ModelParams<T>, cfg: &ViTConfig) -> Result<(f64, AttentionStack<T>)> {
    let trace = forward_trace(v, params, cfg)?;
    let p = sigmoid(trace.logit);
    Ok((
        p,
        AttentionStack {
            layers: trace.blocks.into_iter().map(|b| b.attn).collect(),
        },
    ))
}

/// Probability only.
pub fn predict<T: Real>(v: &Volume, params: &ModelParams<T>, cfg: &ViTConfig) -> Result<f64> {
    Ok(sigmoid(forward_trace(v, params, cfg)?.logit))
}
