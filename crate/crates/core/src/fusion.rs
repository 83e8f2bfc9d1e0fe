//! Temporal fusion: joint-specific attention masks, joint-centric temporal
//! aggregation (JTA), and global restoring attention (GRA).
//!
//! N learnable joint query tokens attend, under spatial masks derived from
//! thresholded heatmaps, to the token grids of all frames in a clip. The
//! aggregated queries are then injected back into the current frame's
//! tokens by a cross-attention in the opposite direction.

use rand::Rng;
use thiserror::Error;

use crate::backbone::{
    init_attn, init_mlp, init_norm, mlp_block, multi_head_attention, norm, AttnIds, ConfigError,
    MlpIds, NormIds, TokenGrid,
};
use crate::params::{trunc_normal_init, ParamId, ParamSet, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, TensorId, NEG_LARGE};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask: {0}")]
    Mask(String),
}

/// Depths, threshold, and temporal extent of the fusion stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub jta_layers: usize,
    pub gra_layers: usize,
    /// Heatmap threshold for mask construction.
    pub phi: f64,
    /// Frames on each side of the current frame; clip length is 2T+1.
    pub temporal_span: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            jta_layers: 6,
            gra_layers: 1,
            phi: 0.2,
            temporal_span: 2,
            heads: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.jta_layers == 0 {
            return Err(ConfigError::Invalid("jta_layers must be >= 1".into()));
        }
        if self.gra_layers == 0 {
            return Err(ConfigError::Invalid("gra_layers must be >= 1".into()));
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "phi must lie in (0, 1), got {}",
                self.phi
            )));
        }
        if self.heads == 0 {
            return Err(ConfigError::Invalid("heads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        2 * self.temporal_span + 1
    }
}

/// Boolean relevance mask over (joint, frame-major token) pairs, derived
/// solely from thresholded heatmaps plus the per-(joint, frame) argmax
/// fallback. Every row has at least one relevant entry per frame.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub n_joints: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    relevant: Vec<bool>,
    /// Per (joint, frame): whether the fallback unmasked the argmax token.
    fallback: Vec<bool>,
}

impl AttnMask {
    /// Mask with every position relevant; attention under it must equal
    /// unmasked attention.
    pub fn all_relevant(n_joints: usize, frames: usize, tokens_per_frame: usize) -> AttnMask {
        AttnMask {
            n_joints,
            frames,
            tokens_per_frame,
            relevant: vec![true; n_joints * frames * tokens_per_frame],
            fallback: vec![false; n_joints * frames],
        }
    }

    pub fn is_relevant(&self, joint: usize, frame: usize, token: usize) -> bool {
        self.relevant[self.flat(joint, frame, token)]
    }

    pub fn fallback_fired(&self, joint: usize, frame: usize) -> bool {
        self.fallback[joint * self.frames + frame]
    }

    fn flat(&self, joint: usize, frame: usize, token: usize) -> usize {
        (joint * self.frames + frame) * self.tokens_per_frame + token
    }

    pub fn row_len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    /// Additive form: 0 where relevant, [`NEG_LARGE`] elsewhere.
    pub fn to_additive<S: Scalar>(&self) -> Tensor<S> {
        let data = self
            .relevant
            .iter()
            .map(|&r| if r { S::zero() } else { S::from_f64(NEG_LARGE) })
            .collect();
        Tensor::new(vec![self.n_joints, self.row_len()], data).expect("mask dims agree")
    }

    /// Reorder frame blocks; used to test frame-permutation equivariance.
    pub fn permute_frames(&self, order: &[usize]) -> AttnMask {
        assert_eq!(order.len(), self.frames);
        let mut relevant = vec![false; self.relevant.len()];
        let mut fallback = vec![false; self.fallback.len()];
        for j in 0..self.n_joints {
            for (dst, &src) in order.iter().enumerate() {
                fallback[j * self.frames + dst] = self.fallback[j * self.frames + src];
                for t in 0..self.tokens_per_frame {
                    relevant[self.flat(j, dst, t)] = self.relevant[self.flat(j, src, t)];
                }
            }
        }
        AttnMask {
            relevant,
            fallback,
            ..*self
        }
    }

    /// Grayscale view of one joint's relevance over one frame, for export.
    pub fn frame_plane(&self, joint: usize, frame: usize, h: usize, w: usize) -> Tensor<f32> {
        assert_eq!(h * w, self.tokens_per_frame);
        let data = (0..self.tokens_per_frame)
            .map(|t| {
                if self.is_relevant(joint, frame, t) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(vec![h, w], data).expect("plane dims agree")
    }
}

/// Max-pool one heatmap plane down to the token grid; returns the pooled
/// values plus the argmax token (ties to the lowest flat index).
fn pool_plane<S: Scalar>(
    plane: &[S],
    heat_h: usize,
    heat_w: usize,
    factor: usize,
) -> (Vec<S>, usize) {
    let (h, w) = (heat_h / factor, heat_w / factor);
    let mut pooled = vec![S::zero(); h * w];
    let mut best_token = 0usize;
    let mut best_val = S::neg_infinity();
    for ty in 0..h {
        for tx in 0..w {
            let mut m = S::neg_infinity();
            for dy in 0..factor {
                for dx in 0..factor {
                    let v = plane[(ty * factor + dy) * heat_w + tx * factor + dx];
                    if v > m {
                        m = v;
                    }
                }
            }
            pooled[ty * w + tx] = m;
            if m > best_val {
                best_val = m;
                best_token = ty * w + tx;
            }
        }
    }
    (pooled, best_token)
}

/// Build the joint-specific relevance mask from per-frame heatmap stacks at
/// quarter input resolution. Each plane is max-pooled to the token grid and
/// thresholded at `phi`; a (joint, frame) whose pooled plane never reaches
/// `phi` falls back to unmasking its argmax token so no attention row is
/// ever fully masked.
pub fn build_masks<S: Scalar>(
    aux_heatmaps: &[Tensor<S>],
    phi: f64,
    token_h: usize,
    token_w: usize,
) -> Result<AttnMask, FusionError> {
    if aux_heatmaps.is_empty() {
        return Err(FusionError::Mask("no frames".into()));
    }
    let shape = aux_heatmaps[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(FusionError::Mask(format!(
            "heatmaps must be N x h x w, got {shape:?}"
        )));
    }
    let (n, heat_h, heat_w) = (shape[0], shape[1], shape[2]);
    if token_h == 0 || token_w == 0 || heat_h % token_h != 0 || heat_w % token_w != 0 {
        return Err(FusionError::Mask(format!(
            "heatmap {heat_h}x{heat_w} does not divide down to token grid {token_h}x{token_w}"
        )));
    }
    let factor = heat_h / token_h;
    if heat_w / token_w != factor {
        return Err(FusionError::Mask(format!(
            "anisotropic pool factors {}x{}",
            heat_h / token_h,
            heat_w / token_w
        )));
    }
    let frames = aux_heatmaps.len();
    let tokens = token_h * token_w;
    let threshold = S::from_f64(phi);

    let mut relevant = vec![false; n * frames * tokens];
    let mut fallback = vec![false; n * frames];
    for (f, maps) in aux_heatmaps.iter().enumerate() {
        if maps.shape() != shape.as_slice() {
            return Err(FusionError::Mask(format!(
                "frame {f} heatmap shape {:?} differs from {shape:?}",
                maps.shape()
            )));
        }
        for j in 0..n {
            let plane = &maps.data()[j * heat_h * heat_w..(j + 1) * heat_h * heat_w];
            let (pooled, argmax) = pool_plane(plane, heat_h, heat_w, factor);
            let base = (j * frames + f) * tokens;
            let mut any = false;
            for (t, &v) in pooled.iter().enumerate() {
                if v >= threshold {
                    relevant[base + t] = true;
                    any = true;
                }
            }
            if !any {
                relevant[base + argmax] = true;
                fallback[j * frames + f] = true;
            }
        }
    }
    Ok(AttnMask {
        n_joints: n,
        frames,
        tokens_per_frame: tokens,
        relevant,
        fallback,
    })
}

// ── Parameter bundles ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct McaIds {
    pub norm_q: NormIds,
    pub norm_kv: NormIds,
    pub attn: AttnIds,
}

#[derive(Debug, Clone, Copy)]
pub struct JtaLayerIds {
    pub cross: McaIds,
    pub norm_self: NormIds,
    pub self_attn: AttnIds,
    pub norm_mlp: NormIds,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone, Copy)]
pub struct GraLayerIds {
    pub norm_q: NormIds,
    pub norm_kv: NormIds,
    pub attn: AttnIds,
}

#[derive(Debug, Clone)]
pub struct FusionIds {
    pub joint_queries: ParamId,
    pub jta: Vec<JtaLayerIds>,
    pub gra: Vec<GraLayerIds>,
}

fn init_mca<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    prefix: &str,
    channels: usize,
) -> McaIds {
    McaIds {
        norm_q: init_norm(set, &format!("{prefix}.norm_q"), channels),
        norm_kv: init_norm(set, &format!("{prefix}.norm_kv"), channels),
        attn: init_attn(set, rng, &format!("{prefix}.cross"), channels),
    }
}

/// Register joint queries, JTA layers, and GRA layers.
pub fn init_fusion<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    channels: usize,
    mlp_ratio: usize,
    n_joints: usize,
    cfg: &FusionConfig,
) -> FusionIds {
    let joint_queries = set.add(
        "joint_queries",
        trunc_normal_init(rng, &[n_joints, channels], 0.02),
    );
    let jta = (0..cfg.jta_layers)
        .map(|i| {
            let prefix = format!("jta.layer{i}");
            JtaLayerIds {
                cross: init_mca(set, rng, &prefix, channels),
                norm_self: init_norm(set, &format!("{prefix}.norm_self"), channels),
                self_attn: init_attn(set, rng, &format!("{prefix}.self_attn"), channels),
                norm_mlp: init_norm(set, &format!("{prefix}.norm_mlp"), channels),
                mlp: init_mlp(set, rng, &format!("{prefix}.mlp"), channels, mlp_ratio),
            }
        })
        .collect();
    let gra = (0..cfg.gra_layers)
        .map(|i| {
            let prefix = format!("gra.layer{i}");
            GraLayerIds {
                norm_q: init_norm(set, &format!("{prefix}.norm_q"), channels),
                norm_kv: init_norm(set, &format!("{prefix}.norm_kv"), channels),
                attn: init_attn(set, rng, &format!("{prefix}.attn"), channels),
            }
        })
        .collect();
    FusionIds {
        joint_queries,
        jta,
        gra,
    }
}

// ── Graph builders ───────────────────────────────────────────────────

/// Mask-aware feature-to-joint cross-attention with residual:
/// pre-norm on both sides, shared additive mask across heads.
/// Returns the updated queries and the per-head probability matrices.
pub fn masked_cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    ids: &McaIds,
    heads: usize,
    q_prev: TensorId,
    f_all: TensorId,
    mask: Option<TensorId>,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let qn = norm(tape, bound, ids.norm_q, q_prev)?;
    let kvn = norm(tape, bound, ids.norm_kv, f_all)?;
    let attn = multi_head_attention(tape, bound, &ids.attn, heads, qn, kvn, mask)?;
    let out = tape.add(q_prev, attn.out)?;
    Ok((out, attn.head_probs))
}

/// One JTA layer: masked feature-to-joint attention, joint-to-joint
/// self-attention, MLP; all pre-norm with residuals.
pub fn jta_layer<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    ids: &JtaLayerIds,
    heads: usize,
    q_prev: TensorId,
    f_all: TensorId,
    mask: Option<TensorId>,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let (q1, probs) = masked_cross_attention(tape, bound, &ids.cross, heads, q_prev, f_all, mask)?;
    let sn = norm(tape, bound, ids.norm_self, q1)?;
    let self_attn = multi_head_attention(tape, bound, &ids.self_attn, heads, sn, sn, None)?;
    let q2 = tape.add(q1, self_attn.out)?;
    let q3 = mlp_block(tape, bound, ids.norm_mlp, ids.mlp, q2)?;
    Ok((q3, probs))
}

/// Output of [`jta`]: the aggregated queries, the concatenated frame
/// features, and every cross-attention probability matrix per layer/head.
pub struct JtaOutput {
    pub q_tilde: TensorId,
    pub f_all: TensorId,
    pub cross_probs: Vec<Vec<TensorId>>,
}

/// Joint-centric temporal aggregation: frame features are concatenated
/// frame-major (matching the mask layout) and the joint queries are
/// iteratively updated through the layer stack starting from Q^0.
pub fn jta<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    fusion: &FusionIds,
    heads: usize,
    frames: &[TokenGrid],
    mask: &AttnMask,
) -> Result<JtaOutput, FusionError> {
    let token_ids: Vec<TensorId> = frames.iter().map(|g| g.tokens).collect();
    let f_all = tape.concat_rows(&token_ids)?;
    if tape.shape(f_all)[0] != mask.row_len() {
        return Err(FusionError::Mask(format!(
            "frame features stack to {} tokens but mask rows cover {}",
            tape.shape(f_all)[0],
            mask.row_len()
        )));
    }
    let additive = mask.to_additive::<S>();
    let n = tape.shape(bound.id(fusion.joint_queries))[0];
    if additive.shape()[0] != n {
        return Err(FusionError::Mask(format!(
            "mask has {} joint rows, queries have {n}",
            additive.shape()[0]
        )));
    }
    let mask_id = tape.constant(&additive);
    let mut q = bound.id(fusion.joint_queries);
    let mut cross_probs = Vec::with_capacity(fusion.jta.len());
    for layer in &fusion.jta {
        let (next, probs) = jta_layer(tape, bound, layer, heads, q, f_all, Some(mask_id))?;
        q = next;
        cross_probs.push(probs);
    }
    Ok(JtaOutput {
        q_tilde: q,
        f_all,
        cross_probs,
    })
}

/// Global restoring attention: current-frame tokens query the aggregated
/// joint tokens (keys and values), with residual, preserving the spatial
/// token grid. Returns the enhanced grid and per-layer/head probabilities.
pub fn gra<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    layers: &[GraLayerIds],
    heads: usize,
    f_t: &TokenGrid,
    q_tilde: TensorId,
) -> Result<(TokenGrid, Vec<Vec<TensorId>>), TensorError> {
    let mut tokens = f_t.tokens;
    let mut all_probs = Vec::with_capacity(layers.len());
    for layer in layers {
        let qn = norm(tape, bound, layer.norm_q, tokens)?;
        let kvn = norm(tape, bound, layer.norm_kv, q_tilde)?;
        let attn = multi_head_attention(tape, bound, &layer.attn, heads, qn, kvn, None)?;
        tokens = tape.add(tokens, attn.out)?;
        all_probs.push(attn.head_probs);
    }
    Ok((TokenGrid { tokens, ..*f_t }, all_probs))
}
