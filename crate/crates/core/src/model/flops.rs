//! Analytical multiply-accumulate model of the fusion stage.
//!
//! Counts cover projections, score matrices, weighted sums, and MLPs of the
//! temporal fusion only; the shared encoder/decoder are excluded so the
//! comparison isolates fusion cost. One MAC is reported as two FLOPs.
//!
//! The closed forms mirror the graph builders exactly, which is what the
//! instrumented-counter oracle in the tests relies on.

use super::FusionVariant;

/// Shape parameters the estimate depends on.
#[derive(Debug, Clone, Copy)]
pub struct FlopConfig {
    pub channels: usize,
    pub tokens_per_frame: usize,
    /// Clip length 2T+1.
    pub frames: usize,
    pub n_joints: usize,
    pub mlp_ratio: usize,
    pub gra_layers: usize,
}

/// MAC counts split into projection-like terms (scale with C^2) and
/// attention score/weighted-sum terms (scale with C).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopProfile {
    pub proj_macs: u128,
    pub attn_macs: u128,
}

impl FlopProfile {
    pub const ZERO: FlopProfile = FlopProfile {
        proj_macs: 0,
        attn_macs: 0,
    };

    pub fn macs(&self) -> u128 {
        self.proj_macs + self.attn_macs
    }

    pub fn total_flops(&self) -> u128 {
        2 * self.macs()
    }

    fn add(self, other: FlopProfile) -> FlopProfile {
        FlopProfile {
            proj_macs: self.proj_macs + other.proj_macs,
            attn_macs: self.attn_macs + other.attn_macs,
        }
    }

    fn times(self, n: usize) -> FlopProfile {
        FlopProfile {
            proj_macs: self.proj_macs * n as u128,
            attn_macs: self.attn_macs * n as u128,
        }
    }
}

/// q/k/v/out projections plus score and weighted-sum matmuls for one
/// attention with `nq` queries and `nk` keys at width C.
fn attention(nq: usize, nk: usize, c: usize) -> FlopProfile {
    let (nq, nk, c) = (nq as u128, nk as u128, c as u128);
    FlopProfile {
        proj_macs: (2 * nq + 2 * nk) * c * c,
        attn_macs: 2 * nq * nk * c,
    }
}

/// Two-layer MLP over n tokens with hidden expansion `ratio`.
fn mlp(n: usize, c: usize, ratio: usize) -> FlopProfile {
    FlopProfile {
        proj_macs: 2 * (ratio as u128) * (n as u128) * (c as u128) * (c as u128),
        attn_macs: 0,
    }
}

/// MAC profile of one fusion stage at the given depth.
pub fn flop_estimate(cfg: &FlopConfig, variant: FusionVariant, depth: usize) -> FlopProfile {
    let c = cfg.channels;
    let s_cur = cfg.tokens_per_frame;
    let s_all = cfg.tokens_per_frame * cfg.frames;
    let s_aux = s_all - s_cur;
    let n = cfg.n_joints;
    match variant {
        FusionVariant::SingleFrame => FlopProfile::ZERO,
        FusionVariant::JointSpecific => {
            let jta_layer = attention(n, s_all, c)
                .add(attention(n, n, c))
                .add(mlp(n, c, cfg.mlp_ratio));
            let gra_layer = attention(s_cur, n, c);
            jta_layer.times(depth).add(gra_layer.times(cfg.gra_layers))
        }
        FusionVariant::SelfAll => attention(s_all, s_all, c)
            .add(mlp(s_all, c, cfg.mlp_ratio))
            .times(depth),
        FusionVariant::CrossOnly => attention(s_cur, s_aux, c)
            .add(mlp(s_cur, c, cfg.mlp_ratio))
            .times(depth),
        FusionVariant::SelfAuxThenCross => {
            let per_frame_self =
                attention(s_cur, s_cur, c).add(mlp(s_cur, c, cfg.mlp_ratio));
            per_frame_self
                .times(cfg.frames - 1)
                .add(attention(s_cur, s_aux, c))
                .add(mlp(s_cur, c, cfg.mlp_ratio))
                .times(depth)
        }
    }
}

/// The four temporal strategies in the order they are usually compared.
pub const COMPARED_VARIANTS: [FusionVariant; 4] = [
    FusionVariant::JointSpecific,
    FusionVariant::CrossOnly,
    FusionVariant::SelfAuxThenCross,
    FusionVariant::SelfAll,
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, TokenGrid};
    use crate::fusion::{gra, jta, AttnMask, FusionConfig};
    use crate::model::{init_model, variant_fusion_stack, FusionVariant, ModelConfig};
    use crate::tensor::{Tape, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Full-scale shape: C=768, 432 tokens per frame, 5 frames, 15 joints.
    fn paper_scale() -> FlopConfig {
        FlopConfig {
            channels: 768,
            tokens_per_frame: 432,
            frames: 5,
            n_joints: 15,
            mlp_ratio: 4,
            gra_layers: 1,
        }
    }

    #[test]
    fn joint_specific_is_strictly_cheapest_at_paper_scale() {
        let cfg = paper_scale();
        for depth in [1usize, 2, 4, 6] {
            let flops: Vec<u128> = COMPARED_VARIANTS
                .iter()
                .map(|&v| flop_estimate(&cfg, v, depth).total_flops())
                .collect();
            // joint_specific < cross_only < selfaux_then_cross < self_all
            assert!(
                flops[0] < flops[1] && flops[1] < flops[2] && flops[2] < flops[3],
                "ordering broken at depth {depth}: {flops:?}"
            );
        }
    }

    #[test]
    fn doubling_channels_scales_components_as_expected() {
        let cfg = paper_scale();
        let mut doubled = cfg;
        doubled.channels *= 2;
        for &variant in &COMPARED_VARIANTS {
            let base = flop_estimate(&cfg, variant, 2);
            let big = flop_estimate(&doubled, variant, 2);
            assert_eq!(big.proj_macs, 4 * base.proj_macs, "{variant:?} proj");
            assert_eq!(big.attn_macs, 2 * base.attn_macs, "{variant:?} attn");
        }
    }

    /// Tiny config: 1 layer, 2 tokens per frame, C=4, 1 head. The closed
    /// form must equal the tape's instrumented MAC counter exactly.
    #[test]
    fn tiny_config_matches_instrumented_counter() {
        let flop_cfg = FlopConfig {
            channels: 4,
            tokens_per_frame: 2,
            frames: 3,
            n_joints: 2,
            mlp_ratio: 4,
            gra_layers: 1,
        };
        let model_cfg = ModelConfig {
            backbone: BackboneConfig {
                image_h: 16,
                image_w: 32,
                channels: 4,
                depth: 0,
                heads: 1,
                n_joints: 2,
                decoder_mid: 2,
                ..BackboneConfig::default()
            },
            fusion: FusionConfig {
                jta_layers: 1,
                gra_layers: 1,
                temporal_span: 1,
                heads: 1,
                ..FusionConfig::default()
            },
            variant_layers: 1,
            variant: FusionVariant::JointSpecific,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut grids_data = Vec::new();
        for _ in 0..3 {
            grids_data.push(
                Tensor::<f64>::new(
                    vec![2, 4],
                    (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            );
        }

        // joint-specific: jta + gra
        {
            let params = init_model::<f64>(model_cfg.clone(), 2).unwrap();
            let fusion = params.fusion.as_ref().unwrap();
            let mut tape = Tape::new();
            let bound = params.set.bind(&mut tape);
            let grids: Vec<TokenGrid> = grids_data
                .iter()
                .map(|t| TokenGrid {
                    h: 1,
                    w: 2,
                    tokens: tape.constant(t),
                })
                .collect();
            let mask = AttnMask::all_relevant(2, 3, 2);
            let agg = jta(&mut tape, &bound, fusion, 1, &grids, &mask).unwrap();
            gra(&mut tape, &bound, &fusion.gra, 1, &grids[1], agg.q_tilde).unwrap();
            let estimate = flop_estimate(&flop_cfg, FusionVariant::JointSpecific, 1);
            assert_eq!(tape.mac_count(), estimate.macs());
        }

        // ablation variants share the same oracle
        for variant in [
            FusionVariant::SelfAll,
            FusionVariant::CrossOnly,
            FusionVariant::SelfAuxThenCross,
        ] {
            let cfg = ModelConfig {
                variant,
                ..model_cfg.clone()
            };
            let params = init_model::<f64>(cfg, 3).unwrap();
            let ids = params.variant.as_ref().unwrap();
            let mut tape = Tape::new();
            let bound = params.set.bind(&mut tape);
            let grids: Vec<TokenGrid> = grids_data
                .iter()
                .map(|t| TokenGrid {
                    h: 1,
                    w: 2,
                    tokens: tape.constant(t),
                })
                .collect();
            variant_fusion_stack(&mut tape, &bound, ids, 1, &grids).unwrap();
            let estimate = flop_estimate(&flop_cfg, variant, 1);
            assert_eq!(
                tape.mac_count(),
                estimate.macs(),
                "instrumented mismatch for {variant:?}"
            );
        }
    }

    #[test]
    fn single_frame_costs_nothing() {
        assert_eq!(
            flop_estimate(&paper_scale(), FusionVariant::SingleFrame, 6).total_flops(),
            0
        );
    }
}
