//! Reference ViT encoder in 64-bit floating point.
//!
//! Each block is pre-norm:
//!
//! ```text
//! z'_j = MSA(LN(z_{j-1})) + z_{j-1}
//! z_j  = MLP(LN(z'_j)) + z'_j
//! ```
//!
//! with `MSA(x) = [head_1(x); …; head_n(x)] · W_MSA`, each head computing
//! `softmax(q·kᵀ / sqrt(K_h)) · v`, and `MLP = Linear → GELU → Linear`. There
//! is no class token, no dropout and no final normalization after the last
//! block.
//!
//! The free functions here compute the same quantities directly; [`forward`]
//! records them on a [`Tape`] for [`backward`].

pub mod ops;
pub mod params;
pub mod tape;

use ndarray::{s, Array2, ArrayView2, Axis};
use thiserror::Error;

pub use ops::{gelu, layer_norm, softmax_rows};
pub use params::{LayerParams, LayerTensor, ParamKey, ViTConfig, ViTParams};
pub use tape::{Gradients, NodeId, Source, Tape};

use crate::tokenizer::EmbeddingParams;

#[derive(Debug, Error, PartialEq)]
pub enum VitError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("tape mismatch: {0}")]
    TapeMismatch(String),
}

/// `softmax(q·kᵀ / sqrt(K_h)) · v` for one head.
pub fn attention_head(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    softmax_rows(logits.view()).dot(&v)
}

/// Attention weights of one head, rows summing to 1.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    softmax_rows((q.dot(&k.t()) * scale).view())
}

fn check_width(z: &ArrayView2<f64>, cfg: &ViTConfig) -> Result<(), VitError> {
    cfg.validate()?;
    if z.ncols() != cfg.hidden {
        return Err(VitError::ShapeMismatch(format!("input width {} vs hidden {}", z.ncols(), cfg.hidden)));
    }
    Ok(())
}

/// Multi-head self-attention with heads concatenated in head order.
pub fn msa(z: ArrayView2<f64>, layer: &LayerParams, cfg: &ViTConfig) -> Result<Array2<f64>, VitError> {
    check_width(&z, cfg)?;
    let q = z.dot(&layer.w_q);
    let k = z.dot(&layer.w_k);
    let v = z.dot(&layer.w_v);
    let dh = cfg.head_dim();
    let heads: Vec<Array2<f64>> = (0..cfg.heads)
        .map(|h| {
            let cols = s![.., h * dh..(h + 1) * dh];
            attention_head(q.slice(cols), k.slice(cols), v.slice(cols))
        })
        .collect();
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    let concat = ndarray::concatenate(Axis(1), &views).expect("heads share a row count");
    Ok(concat.dot(&layer.w_msa))
}

pub fn mlp(x: ArrayView2<f64>, layer: &LayerParams) -> Array2<f64> {
    let hidden = (x.dot(&layer.mlp_w1) + &layer.mlp_b1).mapv(gelu);
    hidden.dot(&layer.mlp_w2) + &layer.mlp_b2
}

/// One pre-norm residual block.
pub fn encoder_block(z: ArrayView2<f64>, layer: &LayerParams, cfg: &ViTConfig) -> Result<Array2<f64>, VitError> {
    let eps = cfg.layer_norm_eps;
    let attn_in = layer_norm(z, layer.attn_norm_gamma.view(), layer.attn_norm_beta.view(), eps);
    let mid = msa(attn_in.view(), layer, cfg)? + z;
    let mlp_in = layer_norm(mid.view(), layer.mlp_norm_gamma.view(), layer.mlp_norm_beta.view(), eps);
    Ok(mlp(mlp_in.view(), layer) + &mid)
}

/// Record one block on the tape and return its output node.
fn record_block<'a>(tape: &mut Tape<'a>, z: NodeId, j: usize, layer: &'a LayerParams, cfg: &ViTConfig) -> NodeId {
    let p = |t: LayerTensor| Source::Param(ParamKey::Layer(j, t));
    let eps = cfg.layer_norm_eps;

    let g1 = tape.leaf(p(LayerTensor::AttnNormGamma), &layer.attn_norm_gamma);
    let b1 = tape.leaf(p(LayerTensor::AttnNormBeta), &layer.attn_norm_beta);
    let x = tape.layer_norm(z, g1, b1, eps);

    let wq = tape.leaf(p(LayerTensor::Query), &layer.w_q);
    let wk = tape.leaf(p(LayerTensor::Key), &layer.w_k);
    let wv = tape.leaf(p(LayerTensor::Value), &layer.w_v);
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let logits = tape.matmul_transposed(qh, kh);
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits);
        heads.push(tape.matmul(weights, vh));
    }
    let concat = tape.concat_cols(heads);
    let w_msa = tape.leaf(p(LayerTensor::AttnOut), &layer.w_msa);
    let attn = tape.matmul(concat, w_msa);
    let mid = tape.add(attn, z);

    let g2 = tape.leaf(p(LayerTensor::MlpNormGamma), &layer.mlp_norm_gamma);
    let b2 = tape.leaf(p(LayerTensor::MlpNormBeta), &layer.mlp_norm_beta);
    let y = tape.layer_norm(mid, g2, b2, eps);
    let w1 = tape.leaf(p(LayerTensor::MlpInWeight), &layer.mlp_w1);
    let bias1 = tape.leaf(p(LayerTensor::MlpInBias), &layer.mlp_b1);
    let w2 = tape.leaf(p(LayerTensor::MlpOutWeight), &layer.mlp_w2);
    let bias2 = tape.leaf(p(LayerTensor::MlpOutBias), &layer.mlp_b2);
    let h = tape.matmul(y, w1);
    let h = tape.add_row(h, bias1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, bias2);
    tape.add(h, mid)
}

fn record_encoder<'a>(
    tape: &mut Tape<'a>,
    mut z: NodeId,
    cfg: &ViTConfig,
    params: &'a ViTParams,
) -> Result<Array2<f64>, VitError> {
    for (j, layer) in params.layers.iter().enumerate() {
        z = record_block(tape, z, j, layer, cfg);
        if !tape.value(z).iter().all(|v| v.is_finite()) {
            return Err(VitError::NonFiniteActivation { layer: j + 1 });
        }
    }
    tape.set_output(z);
    Ok(tape.value(z).clone())
}

/// Run the encoder on `z₀`, recording the tape.
pub fn forward<'a>(
    z0: &'a Array2<f64>,
    cfg: &ViTConfig,
    params: &'a ViTParams,
) -> Result<(Array2<f64>, Tape<'a>), VitError> {
    params.check(cfg)?;
    check_width(&z0.view(), cfg)?;
    let mut tape = Tape::new();
    let z = tape.leaf(Source::Tokens, z0);
    tape.set_tokens(z);
    let out = record_encoder(&mut tape, z, cfg, params)?;
    Ok((out, tape))
}

/// Embed raw patches with the parameters' `E`/`E_pos` and run the encoder,
/// so the embedding tensors receive gradients too.
pub fn forward_patches<'a>(
    patches: &'a Array2<f64>,
    cfg: &ViTConfig,
    params: &'a ViTParams,
) -> Result<(Array2<f64>, Tape<'a>), VitError> {
    params.check(cfg)?;
    let embedding: &'a EmbeddingParams = params
        .embedding
        .as_ref()
        .ok_or_else(|| VitError::ShapeMismatch("parameters carry no embedding".into()))?;
    embedding.check(&patches.view()).map_err(|e| VitError::ShapeMismatch(e.to_string()))?;
    let mut tape = Tape::new();
    let x = tape.leaf(Source::Patches, patches);
    let e = tape.leaf(Source::Param(ParamKey::PatchProjection), &embedding.projection);
    let pos = tape.leaf(Source::Param(ParamKey::Positional), &embedding.positional);
    let projected = tape.matmul(x, e);
    let z0 = tape.add(projected, pos);
    tape.set_tokens(z0);
    let out = record_encoder(&mut tape, z0, cfg, params)?;
    Ok((out, tape))
}

pub fn backward(tape: &Tape<'_>, d_out: &Array2<f64>) -> Result<Gradients, VitError> {
    tape.backward(d_out)
}

/// Sum, sum of squares and max-abs of an activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Checksum {
    pub sum: f64,
    pub sum_sq: f64,
    pub max_abs: f64,
    /// FNV-1a over the little-endian bit patterns.
    pub bits_fnv1a: u64,
}

pub fn checksum(x: &Array2<f64>) -> Checksum {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x.iter() {
        for b in v.to_bits().to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Checksum {
        sum: x.sum(),
        sum_sq: x.iter().map(|v| v * v).sum(),
        max_abs: x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        bits_fnv1a: hash,
    }
}
