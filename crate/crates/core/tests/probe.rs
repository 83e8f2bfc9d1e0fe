//! Scratch experiment harness for tuning the occlusion benchmark. Ignored
//! by default; run explicitly while calibrating.

use tarpose::backbone::BackboneConfig;
use tarpose::fusion::FusionConfig;
use tarpose::model::{init_model, FusionVariant, ModelConfig, PersonClip};
use tarpose::synth::{make_benchmark, BenchmarkKind, SkeletonSpec};
use tarpose::train::{evaluate, evaluate_occluded, train, TrainConfig};

fn cfg(image_h: usize, image_w: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_h,
            image_w,
            channels: 32,
            depth: 2,
            heads: 4,
            n_joints: 15,
            decoder_mid: 32,
            ..BackboneConfig::default()
        },
        fusion: FusionConfig {
            jta_layers: 2,
            gra_layers: 1,
            temporal_span: 1,
            heads: 4,
            ..FusionConfig::default()
        },
        variant: FusionVariant::JointSpecific,
        variant_layers: 1,
    }
}

#[test]
#[ignore]
fn occlusion_probe() {
    let image_h: usize = std::env::var("PROBE_H").map_or(64, |v| v.parse().unwrap());
    let image_w: usize = std::env::var("PROBE_W").map_or(48, |v| v.parse().unwrap());
    let pre_steps: usize = std::env::var("PROBE_PRE").map_or(200, |v| v.parse().unwrap());
    let cont_steps: usize = std::env::var("PROBE_CONT").map_or(250, |v| v.parse().unwrap());
    let seed: u64 = std::env::var("PROBE_SEED").map_or(1, |v| v.parse().unwrap());

    let train_set =
        make_benchmark::<f32>(BenchmarkKind::Occlusion, 64, 1, 9001, image_h, image_w).unwrap();
    let test_set =
        make_benchmark::<f32>(BenchmarkKind::Occlusion, 32, 1, 9002, image_h, image_w).unwrap();
    let baseline_train: Vec<PersonClip<f32>> =
        train_set.clips.iter().map(|c| c.center_only()).collect();
    let baseline_test: Vec<PersonClip<f32>> =
        test_set.clips.iter().map(|c| c.center_only()).collect();
    let skeleton = SkeletonSpec::default_15();

    let pretrain = TrainConfig {
        epochs: 1000,
        batch_size: 4,
        base_lr: 2e-3,
        augment: false,
        max_steps: Some(pre_steps),
        seed: 1000 + seed,
        ..TrainConfig::default()
    };
    let cont = TrainConfig {
        max_steps: Some(cont_steps),
        seed: 2000 + seed,
        ..pretrain.clone()
    };

    let base_config = ModelConfig {
        variant: FusionVariant::SingleFrame,
        ..cfg(image_h, image_w)
    };
    let mut pretrained = init_model::<f32>(base_config, seed).unwrap();
    train(&mut pretrained, &skeleton, &baseline_train, &[], &pretrain).unwrap();

    let mut tar = init_model::<f32>(cfg(image_h, image_w), seed).unwrap();
    tar.set.copy_matching(&pretrained.set);
    let out = train(&mut tar, &skeleton, &train_set.clips, &[], &cont).unwrap();
    eprintln!("tar final loss {:.2}", out.final_loss);

    let mut base = pretrained;
    train(&mut base, &skeleton, &baseline_train, &[], &cont).unwrap();

    for alpha in [0.05, 0.1, 0.15, 0.2] {
        let t = evaluate_occluded(&tar, &test_set.clips, alpha).unwrap().unwrap();
        let b = evaluate_occluded(&base, &baseline_test, alpha).unwrap().unwrap();
        eprintln!("occluded pck@{alpha}: tar {t:.3} base {b:.3} gap {:+.3}", t - b);
    }
    let t_all = evaluate(&tar, &test_set.clips, "t").unwrap();
    let b_all = evaluate(&base, &baseline_test, "t").unwrap();
    eprintln!(
        "visible pck@0.1: tar {:.3} base {:.3}; pck@0.05: tar {:.3} base {:.3}",
        t_all.mean[1], b_all.mean[1], t_all.mean[0], b_all.mean[0]
    );
}
