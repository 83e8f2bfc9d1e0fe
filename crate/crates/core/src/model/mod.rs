//! End-to-end model: the temporal aggregate-and-restore pipeline, the
//! single-frame baseline, the ablation fusion variants, the heatmap loss,
//! and an analytical FLOP estimator for the fusion stage.

pub mod flops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{
    decode, encode, encoder_block, init_block, init_decoder, init_encoder, init_mlp, init_norm,
    BackboneConfig, BlockIds, ConfigError, DecoderIds, EncoderIds, MlpIds, NormIds, TokenGrid,
};
use crate::fusion::{
    build_masks, gra, init_fusion, jta, masked_cross_attention, AttnMask, FusionConfig,
    FusionError, FusionIds, McaIds,
};
use crate::params::{ParamSet, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("clip has {got} frames, config expects {want}")]
    FrameCount { got: usize, want: usize },
    #[error("variant {variant} has no auxiliary tokens at temporal_span 0")]
    NoAuxiliaryFrames { variant: &'static str },
    #[error("loss: heatmap shape {lhs:?} does not match ground truth {rhs:?}")]
    LossShape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("visibility has {got} flags, heatmaps have {want} joints")]
    VisibilityLen { got: usize, want: usize },
}

/// Which fusion path the model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    /// Joint queries + masks + JTA + GRA.
    JointSpecific,
    /// Self-attention over the concatenated tokens of all frames.
    SelfAll,
    /// Current-frame tokens as queries over auxiliary-frame tokens.
    CrossOnly,
    /// Per-frame self-attention over auxiliary tokens, then [`FusionVariant::CrossOnly`].
    SelfAuxThenCross,
    /// No temporal machinery at all.
    SingleFrame,
}

impl FusionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::JointSpecific => "joint_specific",
            FusionVariant::SelfAll => "self_all",
            FusionVariant::CrossOnly => "cross_only",
            FusionVariant::SelfAuxThenCross => "selfaux_then_cross",
            FusionVariant::SingleFrame => "single_frame",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "joint_specific" => FusionVariant::JointSpecific,
            "self_all" => FusionVariant::SelfAll,
            "cross_only" => FusionVariant::CrossOnly,
            "selfaux_then_cross" => FusionVariant::SelfAuxThenCross,
            "single_frame" => FusionVariant::SingleFrame,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub variant: FusionVariant,
    /// Depth of the ablation variant stacks (a)-(c).
    pub variant_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            variant: FusionVariant::JointSpecific,
            variant_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate()?;
        if self.variant != FusionVariant::SingleFrame {
            self.fusion.validate()?;
        }
        if matches!(
            self.variant,
            FusionVariant::SelfAll | FusionVariant::CrossOnly | FusionVariant::SelfAuxThenCross
        ) && self.variant_layers == 0
        {
            return Err(ConfigError::Invalid("variant_layers must be >= 1".into()));
        }
        Ok(())
    }

    /// Clip length consumed by `forward`. The single-frame baseline takes 1.
    pub fn expected_frames(&self) -> usize {
        if self.variant == FusionVariant::SingleFrame {
            1
        } else {
            self.fusion.frames()
        }
    }
}

/// A keypoint in crop pixel coordinates. `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// 2T+1 cropped RGB frames centered on the target frame, plus ground-truth
/// keypoints per frame. `center_occlusions` lists joints whose center-frame
/// visibility was flipped by the synthetic occluder; their coordinates stay
/// valid, which is what makes occlusion A/B evaluation possible.
#[derive(Debug, Clone)]
pub struct PersonClip<S: Scalar> {
    pub frames: Vec<Tensor<S>>,
    pub gt_keypoints: Vec<Vec<Keypoint>>,
    pub center_occlusions: Vec<usize>,
}

impl<S: Scalar> PersonClip<S> {
    /// The clip reduced to its center frame, for single-frame baselines
    /// trained and evaluated against the same scenes.
    pub fn center_only(&self) -> PersonClip<S> {
        let c = self.center_index();
        PersonClip {
            frames: vec![self.frames[c].clone()],
            gt_keypoints: vec![self.gt_keypoints[c].clone()],
            center_occlusions: self.center_occlusions.clone(),
        }
    }

    pub fn center_index(&self) -> usize {
        self.frames.len() / 2
    }

    pub fn center_frame(&self) -> &Tensor<S> {
        &self.frames[self.center_index()]
    }

    pub fn center_keypoints(&self) -> &[Keypoint] {
        &self.gt_keypoints[self.center_index()]
    }

    pub fn center_visibility(&self) -> Vec<bool> {
        self.center_keypoints().iter().map(|k| k.visible).collect()
    }
}

// ── Variant parameter stacks ─────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct CrossLayerIds {
    pub mca: McaIds,
    pub norm_mlp: NormIds,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone)]
pub enum VariantIds {
    SelfAll {
        layers: Vec<BlockIds>,
    },
    CrossOnly {
        layers: Vec<CrossLayerIds>,
    },
    SelfAuxThenCross {
        aux: Vec<BlockIds>,
        cross: Vec<CrossLayerIds>,
    },
}

fn init_cross_layer<S: Scalar, R: rand::Rng>(
    set: &mut ParamSet<S>,
    rng: &mut R,
    prefix: &str,
    channels: usize,
    ratio: usize,
) -> CrossLayerIds {
    CrossLayerIds {
        mca: McaIds {
            norm_q: init_norm(set, &format!("{prefix}.norm_q"), channels),
            norm_kv: init_norm(set, &format!("{prefix}.norm_kv"), channels),
            attn: crate::backbone::init_attn(set, rng, &format!("{prefix}.cross"), channels),
        },
        norm_mlp: init_norm(set, &format!("{prefix}.norm_mlp"), channels),
        mlp: init_mlp(set, rng, &format!("{prefix}.mlp"), channels, ratio),
    }
}

/// A model: configuration, the parameter store, and typed handles into it.
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub set: ParamSet<S>,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
    pub fusion: Option<FusionIds>,
    pub variant: Option<VariantIds>,
}

/// Build and initialize a model from a config and a weight seed.
pub fn init_model<S: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelParams<S>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    let bb = &config.backbone;
    let encoder = init_encoder(&mut set, &mut rng, bb);
    let decoder = init_decoder(&mut set, &mut rng, bb);
    let fusion = match config.variant {
        FusionVariant::JointSpecific => Some(init_fusion(
            &mut set,
            &mut rng,
            bb.channels,
            bb.mlp_ratio,
            bb.n_joints,
            &config.fusion,
        )),
        _ => None,
    };
    let variant = match config.variant {
        FusionVariant::SelfAll => Some(VariantIds::SelfAll {
            layers: (0..config.variant_layers)
                .map(|i| {
                    init_block(
                        &mut set,
                        &mut rng,
                        &format!("variant.layer{i}"),
                        bb.channels,
                        bb.mlp_ratio,
                    )
                })
                .collect(),
        }),
        FusionVariant::CrossOnly => Some(VariantIds::CrossOnly {
            layers: (0..config.variant_layers)
                .map(|i| {
                    init_cross_layer(
                        &mut set,
                        &mut rng,
                        &format!("variant.layer{i}"),
                        bb.channels,
                        bb.mlp_ratio,
                    )
                })
                .collect(),
        }),
        FusionVariant::SelfAuxThenCross => {
            let aux = (0..config.variant_layers)
                .map(|i| {
                    init_block(
                        &mut set,
                        &mut rng,
                        &format!("variant.layer{i}.aux"),
                        bb.channels,
                        bb.mlp_ratio,
                    )
                })
                .collect();
            let cross = (0..config.variant_layers)
                .map(|i| {
                    init_cross_layer(
                        &mut set,
                        &mut rng,
                        &format!("variant.layer{i}.cross"),
                        bb.channels,
                        bb.mlp_ratio,
                    )
                })
                .collect();
            Some(VariantIds::SelfAuxThenCross { aux, cross })
        }
        _ => None,
    };
    Ok(ModelParams {
        config,
        set,
        encoder,
        decoder,
        fusion,
        variant,
    })
}

/// One forward pass worth of tape state.
pub struct ForwardOutput {
    pub heatmaps: TensorId,
    /// Relevance mask, present on the joint-specific path.
    pub mask: Option<AttnMask>,
}

/// Run the decoder over token-grid values without recording gradients:
/// a scratch tape receives the values as constants and is dropped after
/// the heatmaps are extracted.
fn decode_detached<S: Scalar>(
    params: &ModelParams<S>,
    grids: &[(usize, usize, Tensor<S>)],
) -> Result<Vec<Tensor<S>>, ModelError> {
    let mut scratch = Tape::new();
    let bound = params.set.bind(&mut scratch);
    let mut out = Vec::with_capacity(grids.len());
    for (h, w, tokens) in grids {
        let tid = scratch.constant(tokens);
        let grid = TokenGrid {
            h: *h,
            w: *w,
            tokens: tid,
        };
        let maps = decode(&mut scratch, &bound, &params.decoder, &grid)?;
        out.push(scratch.to_tensor(maps));
    }
    Ok(out)
}

fn check_frames<S: Scalar>(
    params: &ModelParams<S>,
    clip: &PersonClip<S>,
) -> Result<(), ModelError> {
    let want = params.config.expected_frames();
    if clip.frames.len() != want {
        return Err(ModelError::FrameCount {
            got: clip.frames.len(),
            want,
        });
    }
    Ok(())
}

/// Joint-specific forward on an existing tape/binding: encode every frame,
/// decode each detached for mask construction, aggregate with JTA, restore
/// with GRA, decode the enhanced current frame.
pub fn forward_on<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    params: &ModelParams<S>,
    clip: &PersonClip<S>,
) -> Result<ForwardOutput, ModelError> {
    check_frames(params, clip)?;
    debug_assert_eq!(params.config.variant, FusionVariant::JointSpecific);

    let bb = &params.config.backbone;
    let mut grids = Vec::with_capacity(clip.frames.len());
    for frame in &clip.frames {
        let image = tape.input(frame, false);
        grids.push(encode(tape, bound, &params.encoder, bb, image)?);
    }

    // Mask source: detached decode of every frame's tokens. Thresholding is
    // gradient-free, so the heatmaps feeding it never join the main tape.
    let grid_values: Vec<(usize, usize, Tensor<S>)> = grids
        .iter()
        .map(|g| (g.h, g.w, tape.to_tensor(g.tokens)))
        .collect();
    let aux_heatmaps = decode_detached(params, &grid_values)?;
    let mask = build_masks(&aux_heatmaps, params.config.fusion.phi, bb.token_h(), bb.token_w())?;

    forward_with_mask(tape, bound, params, &grids, &mask).map(|heatmaps| ForwardOutput {
        heatmaps,
        mask: Some(mask),
    })
}

/// Fusion + decode under an externally supplied mask. Gradient checking
/// uses this entry point so finite differences see the same frozen mask the
/// tape treats as constant.
pub fn forward_with_mask<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    params: &ModelParams<S>,
    grids: &[TokenGrid],
    mask: &AttnMask,
) -> Result<TensorId, ModelError> {
    let fusion = params
        .fusion
        .as_ref()
        .expect("joint_specific model carries fusion weights");
    let heads = params.config.fusion.heads;
    let center = grids.len() / 2;

    let agg = jta(tape, bound, fusion, heads, grids, mask)?;
    let (restored, _) = gra(tape, bound, &fusion.gra, heads, &grids[center], agg.q_tilde)?;
    let maps = decode(tape, bound, &params.decoder, &restored)?;
    tape.label(maps, "heatmaps");
    Ok(maps)
}

/// Single-frame baseline: decode(encode(frame)), no temporal machinery.
pub fn forward_baseline_on<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    params: &ModelParams<S>,
    frame: &Tensor<S>,
) -> Result<ForwardOutput, ModelError> {
    let bb = &params.config.backbone;
    let image = tape.input(frame, false);
    let grid = encode(tape, bound, &params.encoder, bb, image)?;
    let maps = decode(tape, bound, &params.decoder, &grid)?;
    tape.label(maps, "heatmaps");
    Ok(ForwardOutput {
        heatmaps: maps,
        mask: None,
    })
}

/// The fusion stack of an ablation variant, from per-frame token grids to
/// the enhanced current-frame grid. Factored out so the instrumented FLOP
/// oracle can run it in isolation.
pub fn variant_fusion_stack<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    ids: &VariantIds,
    heads: usize,
    grids: &[TokenGrid],
) -> Result<TokenGrid, ModelError> {
    let center = grids.len() / 2;
    let cur = grids[center];
    match ids {
        VariantIds::SelfAll { layers } => {
            let all_ids: Vec<TensorId> = grids.iter().map(|g| g.tokens).collect();
            let mut all = tape.concat_rows(&all_ids)?;
            for blk in layers {
                all = encoder_block(tape, bound, blk, heads, all)?;
            }
            let hw = cur.h * cur.w;
            let tokens = tape.slice_rows(all, center * hw, hw)?;
            Ok(TokenGrid { tokens, ..cur })
        }
        VariantIds::CrossOnly { layers } => {
            let aux = aux_tokens(tape, grids, center, "cross_only")?;
            let mut tokens = cur.tokens;
            for layer in layers {
                tokens = cross_layer(tape, bound, layer, heads, tokens, aux)?;
            }
            Ok(TokenGrid { tokens, ..cur })
        }
        VariantIds::SelfAuxThenCross { aux, cross } => {
            let mut aux_grids: Vec<TensorId> = grids
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != center)
                .map(|(_, g)| g.tokens)
                .collect();
            if aux_grids.is_empty() {
                return Err(ModelError::NoAuxiliaryFrames {
                    variant: "selfaux_then_cross",
                });
            }
            let mut tokens = cur.tokens;
            for (self_blk, cross_ids) in aux.iter().zip(cross.iter()) {
                for t in aux_grids.iter_mut() {
                    *t = encoder_block(tape, bound, self_blk, heads, *t)?;
                }
                let aux_all = tape.concat_rows(&aux_grids)?;
                tokens = cross_layer(tape, bound, cross_ids, heads, tokens, aux_all)?;
            }
            Ok(TokenGrid { tokens, ..cur })
        }
    }
}

fn aux_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    grids: &[TokenGrid],
    center: usize,
    variant: &'static str,
) -> Result<TensorId, ModelError> {
    let aux_ids: Vec<TensorId> = grids
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != center)
        .map(|(_, g)| g.tokens)
        .collect();
    if aux_ids.is_empty() {
        return Err(ModelError::NoAuxiliaryFrames { variant });
    }
    Ok(tape.concat_rows(&aux_ids)?)
}

fn cross_layer<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    ids: &CrossLayerIds,
    heads: usize,
    cur: TensorId,
    aux: TensorId,
) -> Result<TensorId, ModelError> {
    let (attended, _) = masked_cross_attention(tape, bound, &ids.mca, heads, cur, aux, None)?;
    Ok(crate::backbone::mlp_block(
        tape,
        bound,
        ids.norm_mlp,
        ids.mlp,
        attended,
    )?)
}

/// Ablation-variant forward: encode all frames, run the variant fusion
/// stack, decode the enhanced current frame.
pub fn forward_variant_on<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    params: &ModelParams<S>,
    clip: &PersonClip<S>,
) -> Result<ForwardOutput, ModelError> {
    check_frames(params, clip)?;
    let ids = params
        .variant
        .as_ref()
        .expect("variant model carries variant weights");
    let bb = &params.config.backbone;
    let mut grids = Vec::with_capacity(clip.frames.len());
    for frame in &clip.frames {
        let image = tape.input(frame, false);
        grids.push(encode(tape, bound, &params.encoder, bb, image)?);
    }
    let enhanced = variant_fusion_stack(tape, bound, ids, params.config.fusion.heads, &grids)?;
    let maps = decode(tape, bound, &params.decoder, &enhanced)?;
    tape.label(maps, "heatmaps");
    Ok(ForwardOutput {
        heatmaps: maps,
        mask: None,
    })
}

/// Dispatch on the configured variant.
pub fn forward_clip_on<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    params: &ModelParams<S>,
    clip: &PersonClip<S>,
) -> Result<ForwardOutput, ModelError> {
    match params.config.variant {
        FusionVariant::JointSpecific => forward_on(tape, bound, params, clip),
        FusionVariant::SingleFrame => {
            check_frames(params, clip)?;
            forward_baseline_on(tape, bound, params, &clip.frames[0])
        }
        _ => forward_variant_on(tape, bound, params, clip),
    }
}

/// Convenience wrapper: fresh tape, bind, forward.
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    clip: &PersonClip<S>,
) -> Result<(Tape<S>, TapeBinding, ForwardOutput), ModelError> {
    let mut tape = Tape::new();
    let bound = params.set.bind(&mut tape);
    let out = forward_clip_on(&mut tape, &bound, params, clip)?;
    Ok((tape, bound, out))
}

/// Heatmaps as plain values, for evaluation and inference.
pub fn predict_heatmaps<S: Scalar>(
    params: &ModelParams<S>,
    clip: &PersonClip<S>,
) -> Result<Tensor<S>, ModelError> {
    let (tape, _, out) = forward(params, clip)?;
    Ok(tape.to_tensor(out.heatmaps))
}

/// Sum of squared differences between predicted and ground-truth heatmaps,
/// with joints flagged invisible contributing zero.
pub fn heatmap_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    gt: &Tensor<S>,
    visibility: &[bool],
) -> Result<TensorId, ModelError> {
    let shape = tape.shape(pred).to_vec();
    if shape != gt.shape() {
        return Err(ModelError::LossShape {
            lhs: shape,
            rhs: gt.shape().to_vec(),
        });
    }
    if shape.len() != 3 || visibility.len() != shape[0] {
        return Err(ModelError::VisibilityLen {
            got: visibility.len(),
            want: shape.first().copied().unwrap_or(0),
        });
    }
    let plane = shape[1] * shape[2];
    let mut weights = Tensor::<S>::zeros(&shape);
    for (j, &vis) in visibility.iter().enumerate() {
        if vis {
            weights.data_mut()[j * plane..(j + 1) * plane].fill(S::one());
        }
    }
    let gt_id = tape.constant(gt);
    let w_id = tape.constant(&weights);
    let diff = tape.sub(pred, gt_id)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, w_id)?;
    let loss = tape.sum(weighted);
    tape.label(loss, "loss");
    Ok(loss)
}

/// Zero the weights and biases of every residual-branch output projection
/// in the fusion stage (JTA cross/self attention outputs, JTA MLP second
/// layers, GRA attention outputs). With these at zero the temporal path
/// contributes exactly nothing and `forward` must equal the baseline on the
/// center frame bit for bit.
pub fn zero_fusion_output_projections<S: Scalar>(params: &mut ModelParams<S>) {
    let zero = |ids: crate::backbone::LinearIds, set: &mut ParamSet<S>| {
        set.get_mut(ids.w).data_mut().fill(S::zero());
        set.get_mut(ids.b).data_mut().fill(S::zero());
    };
    if let Some(fusion) = params.fusion.clone() {
        for layer in &fusion.jta {
            zero(layer.cross.attn.out, &mut params.set);
            zero(layer.self_attn.out, &mut params.set);
            zero(layer.mlp.fc2, &mut params.set);
        }
        for layer in &fusion.gra {
            zero(layer.attn.out, &mut params.set);
        }
    }
    if let Some(variant) = params.variant.clone() {
        let blocks: Vec<BlockIds> = match &variant {
            VariantIds::SelfAll { layers } => layers.clone(),
            VariantIds::SelfAuxThenCross { aux, .. } => aux.clone(),
            VariantIds::CrossOnly { .. } => Vec::new(),
        };
        for blk in blocks {
            zero(blk.attn.out, &mut params.set);
            zero(blk.mlp.fc2, &mut params.set);
        }
        let crosses: Vec<CrossLayerIds> = match &variant {
            VariantIds::CrossOnly { layers } => layers.clone(),
            VariantIds::SelfAuxThenCross { cross, .. } => cross.clone(),
            VariantIds::SelfAll { .. } => Vec::new(),
        };
        for layer in crosses {
            zero(layer.mca.attn.out, &mut params.set);
            zero(layer.mlp.fc2, &mut params.set);
        }
    }
}
