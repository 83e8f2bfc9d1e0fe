//! Plain ViT encoder (patch embedding + pre-norm transformer blocks) and the
//! lightweight heatmap decoder (two stacked 2x deconvolutions followed by a
//! 1x1 convolution).
//!
//! Weights live in a [`ParamSet`]; the functions here build the forward
//! graph on a [`Tape`] through a [`TapeBinding`]. Shared attention plumbing
//! for the fusion module also lives here.

use rand::Rng;
use thiserror::Error;

use crate::params::{trunc_normal_init, ParamId, ParamSet, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, TensorId};

/// Epsilon used by every normalization layer in the network.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
}

/// Geometry and width of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Patch downsampling ratio d.
    pub patch: usize,
    /// Token embedding width C.
    pub channels: usize,
    /// Encoder block count.
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden expansion factor.
    pub mlp_ratio: usize,
    /// Number of keypoints N.
    pub n_joints: usize,
    /// Channel width of both deconvolution stages.
    pub decoder_mid: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 48,
            patch: 16,
            channels: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            n_joints: 15,
            decoder_mid: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(ConfigError::Invalid(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.n_joints == 0 {
            return Err(ConfigError::Invalid("n_joints must be >= 1".into()));
        }
        if self.image_h % 4 != 0 || self.image_w % 4 != 0 {
            return Err(ConfigError::Invalid(
                "image dims must be divisible by 4 for quarter-resolution heatmaps".into(),
            ));
        }
        if self.mlp_ratio == 0 || self.decoder_mid == 0 {
            return Err(ConfigError::Invalid(
                "mlp_ratio and decoder_mid must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn token_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn token_w(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.token_h() * self.token_w()
    }

    pub fn heatmap_h(&self) -> usize {
        self.image_h / 4
    }

    pub fn heatmap_w(&self) -> usize {
        self.image_w / 4
    }
}

/// Per-frame encoder output: an h×w grid of C-dim tokens, flattened
/// row-major (token index = y*w + x) into an (h*w)×C tape tensor.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: TensorId,
}

// ── Parameter bundles ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub out: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub norm1: NormIds,
    pub attn: AttnIds,
    pub norm2: NormIds,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub patch: LinearIds,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderIds {
    pub deconv1: LinearIds,
    pub norm1: NormIds,
    pub deconv2: LinearIds,
    pub norm2: NormIds,
    pub head: LinearIds,
}

pub(crate) fn init_linear<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) -> LinearIds {
    LinearIds {
        w: set.add(
            format!("{prefix}.w"),
            trunc_normal_init(rng, &[in_dim, out_dim], 0.02),
        ),
        b: set.add(format!("{prefix}.b"), Tensor::zeros(&[out_dim])),
    }
}

pub(crate) fn init_norm<S: Scalar>(set: &mut ParamSet<S>, prefix: &str, dim: usize) -> NormIds {
    NormIds {
        gain: set.add(format!("{prefix}.gain"), Tensor::full(&[dim], S::one())),
        bias: set.add(format!("{prefix}.bias"), Tensor::zeros(&[dim])),
    }
}

pub(crate) fn init_attn<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    prefix: &str,
    channels: usize,
) -> AttnIds {
    AttnIds {
        q: init_linear(set, rng, &format!("{prefix}.q"), channels, channels),
        k: init_linear(set, rng, &format!("{prefix}.k"), channels, channels),
        v: init_linear(set, rng, &format!("{prefix}.v"), channels, channels),
        out: init_linear(set, rng, &format!("{prefix}.out"), channels, channels),
    }
}

pub(crate) fn init_mlp<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    prefix: &str,
    channels: usize,
    ratio: usize,
) -> MlpIds {
    MlpIds {
        fc1: init_linear(set, rng, &format!("{prefix}.fc1"), channels, channels * ratio),
        fc2: init_linear(set, rng, &format!("{prefix}.fc2"), channels * ratio, channels),
    }
}

pub(crate) fn init_block<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    prefix: &str,
    channels: usize,
    ratio: usize,
) -> BlockIds {
    BlockIds {
        norm1: init_norm(set, &format!("{prefix}.norm1"), channels),
        attn: init_attn(set, rng, &format!("{prefix}.attn"), channels),
        norm2: init_norm(set, &format!("{prefix}.norm2"), channels),
        mlp: init_mlp(set, rng, &format!("{prefix}.mlp"), channels, ratio),
    }
}

/// Register all encoder weights under `encoder.*`.
pub fn init_encoder<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    cfg: &BackboneConfig,
) -> EncoderIds {
    let patch_dim = 3 * cfg.patch * cfg.patch;
    let patch = init_linear(set, rng, "encoder.patch", patch_dim, cfg.channels);
    let pos = set.add(
        "encoder.pos",
        trunc_normal_init(rng, &[cfg.tokens(), cfg.channels], 0.02),
    );
    let blocks = (0..cfg.depth)
        .map(|i| {
            init_block(
                set,
                rng,
                &format!("encoder.block{i}"),
                cfg.channels,
                cfg.mlp_ratio,
            )
        })
        .collect();
    EncoderIds { patch, pos, blocks }
}

/// Register all decoder weights under `decoder.*`.
pub fn init_decoder<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    cfg: &BackboneConfig,
) -> DecoderIds {
    let (c, mid, n) = (cfg.channels, cfg.decoder_mid, cfg.n_joints);
    DecoderIds {
        deconv1: LinearIds {
            w: set.add(
                "decoder.deconv1.w",
                trunc_normal_init(rng, &[c, mid, 4, 4], 0.02),
            ),
            b: set.add("decoder.deconv1.b", Tensor::zeros(&[mid])),
        },
        norm1: init_norm(set, "decoder.norm1", mid),
        deconv2: LinearIds {
            w: set.add(
                "decoder.deconv2.w",
                trunc_normal_init(rng, &[mid, mid, 4, 4], 0.02),
            ),
            b: set.add("decoder.deconv2.b", Tensor::zeros(&[mid])),
        },
        norm2: init_norm(set, "decoder.norm2", mid),
        // conv weight layout is [C_out, C_in]
        head: LinearIds {
            w: set.add("decoder.head.w", trunc_normal_init(rng, &[n, mid], 0.02)),
            b: set.add("decoder.head.b", Tensor::zeros(&[n])),
        },
    }
}

// ── Graph builders ───────────────────────────────────────────────────

pub(crate) fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    ids: LinearIds,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let prod = tape.matmul(x, bound.id(ids.w))?;
    tape.add_row_bias(prod, bound.id(ids.b))
}

pub(crate) fn norm<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    ids: NormIds,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    tape.layer_norm(x, bound.id(ids.gain), bound.id(ids.bias), NORM_EPS)
}

/// Result of [`multi_head_attention`]: the projected output plus the
/// per-head softmax probability matrices, kept for mask-semantics
/// inspection.
pub struct AttentionOutput {
    pub out: TensorId,
    pub head_probs: Vec<TensorId>,
}

/// Multi-head attention: q/k/v projections, per-head scaled dot-product
/// with an optional shared additive mask, head concat, output projection.
/// The residual is the caller's responsibility.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    w: &AttnIds,
    heads: usize,
    q_input: TensorId,
    kv_input: TensorId,
    mask: Option<TensorId>,
) -> Result<AttentionOutput, TensorError> {
    let channels = tape.shape(q_input)[1];
    debug_assert_eq!(channels % heads, 0, "channels must divide heads");
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(tape, bound, w.q, q_input)?;
    let k = linear(tape, bound, w.k, kv_input)?;
    let v = linear(tape, bound, w.v, kv_input)?;

    let mut contexts = Vec::with_capacity(heads);
    let mut head_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, scale);
        let probs = tape.softmax_lastdim(scores, mask)?;
        head_probs.push(probs);
        contexts.push(tape.matmul(probs, vh)?);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    let out = linear(tape, bound, w.out, ctx)?;
    Ok(AttentionOutput { out, head_probs })
}

/// Pre-norm MLP sublayer with residual.
pub(crate) fn mlp_block<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    norm_ids: NormIds,
    mlp: MlpIds,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let normed = norm(tape, bound, norm_ids, x)?;
    let hidden = linear(tape, bound, mlp.fc1, normed)?;
    let act = tape.gelu(hidden);
    let out = linear(tape, bound, mlp.fc2, act)?;
    tape.add(x, out)
}

/// Cut the image into patches, embed linearly, add the learnable
/// positional embedding.
pub fn patch_embed<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    enc: &EncoderIds,
    cfg: &BackboneConfig,
    image: TensorId,
) -> Result<TokenGrid, TensorError> {
    let patches = tape.extract_patches(image, cfg.patch)?;
    let embedded = linear(tape, bound, enc.patch, patches)?;
    let tokens = tape.add(embedded, bound.id(enc.pos))?;
    Ok(TokenGrid {
        h: cfg.token_h(),
        w: cfg.token_w(),
        tokens,
    })
}

/// Standard pre-norm ViT block: MHSA with residual, then MLP with residual.
pub fn encoder_block<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    blk: &BlockIds,
    heads: usize,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let n1 = norm(tape, bound, blk.norm1, x)?;
    let attn = multi_head_attention(tape, bound, &blk.attn, heads, n1, n1, None)?;
    let x1 = tape.add(x, attn.out)?;
    mlp_block(tape, bound, blk.norm2, blk.mlp, x1)
}

/// Full encoder: patch embedding followed by `depth` blocks.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    enc: &EncoderIds,
    cfg: &BackboneConfig,
    image: TensorId,
) -> Result<TokenGrid, TensorError> {
    let grid = patch_embed(tape, bound, enc, cfg, image)?;
    let mut tokens = grid.tokens;
    for blk in &enc.blocks {
        tokens = encoder_block(tape, bound, blk, cfg.heads, tokens)?;
    }
    Ok(TokenGrid { tokens, ..grid })
}

/// Lightweight decoder: two 2x deconvolutions with per-channel norm + GELU,
/// then a 1x1 convolution to N raw heatmaps at quarter input resolution.
/// The final convolution has no activation; heatmaps are unbounded reals.
pub fn decode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    dec: &DecoderIds,
    grid: &TokenGrid,
) -> Result<TensorId, TensorError> {
    let channels = tape.shape(grid.tokens)[1];
    let t = tape.transpose(grid.tokens)?;
    let x = tape.reshape(t, &[channels, grid.h, grid.w])?;

    let d1 = tape.deconv2d(x, bound.id(dec.deconv1.w), bound.id(dec.deconv1.b))?;
    let n1 = tape.channel_norm(d1, bound.id(dec.norm1.gain), bound.id(dec.norm1.bias), NORM_EPS)?;
    let a1 = tape.gelu(n1);

    let d2 = tape.deconv2d(a1, bound.id(dec.deconv2.w), bound.id(dec.deconv2.b))?;
    let n2 = tape.channel_norm(d2, bound.id(dec.norm2.gain), bound.id(dec.norm2.bias), NORM_EPS)?;
    let a2 = tape.gelu(n2);

    tape.conv2d_1x1(a2, bound.id(dec.head.w), bound.id(dec.head.b))
}
