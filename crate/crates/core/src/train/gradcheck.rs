//! Consolidated gradient-check suite: every differentiable operation and
//! the end-to-end micro model, tape gradients against central finite
//! differences in f64.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::fusion::{jta_layer, FusionConfig};
use crate::model::{
    forward_on, forward_with_mask, heatmap_loss, init_model, FusionVariant, Keypoint,
    ModelConfig, ModelParams, PersonClip,
};
use crate::synth::gt_heatmaps;
use crate::tensor::{finite_diff_grad, rel_error, Tape, Tensor, TensorError, TensorId, NEG_LARGE};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const TRIALS: usize = 20;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{:<28} max_rel_err {:>12.3e}  tol {:.0e}  {}\n",
                e.name,
                e.max_rel_err,
                e.tolerance,
                if e.passed() { "pass" } else { "FAIL" }
            ));
        }
        out.push_str(if self.all_passed() {
            "gradcheck: all checks passed\n"
        } else {
            "gradcheck: FAILURES present\n"
        });
        out
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// Check one graph builder over `TRIALS` random instances. The builder maps
/// registered input ids to an output id; the checker appends a random
/// projection and a sum so every output element carries a distinct
/// gradient.
fn check_graph(
    name: &str,
    seed: u64,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
    entries: &mut Vec<GradCheckEntry>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let inputs = make_inputs(&mut rng);
        let out_shape = {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = inputs.iter().map(|t| tape.constant(t)).collect();
            let out = build(&mut tape, &ids).expect("graph builds");
            tape.shape(out).to_vec()
        };
        let projection = rand_tensor(&mut rng, &out_shape);

        let loss_of = |replaced: Option<(usize, &Tensor<f64>)>| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| match replaced {
                    Some((j, r)) if j == i => tape.constant(r),
                    _ => tape.constant(t),
                })
                .collect();
            let out = build(&mut tape, &ids).expect("graph builds");
            let p = tape.constant(&projection);
            let prod = tape.mul(out, p).expect("projection shape matches");
            let loss = tape.sum(prod);
            tape.data(loss)[0]
        };

        // analytic gradients
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.input(t, true)).collect();
        let out = build(&mut tape, &ids).expect("graph builds");
        let p = tape.constant(&projection);
        let prod = tape.mul(out, p).expect("projection shape matches");
        let loss = tape.sum(prod);
        tape.backward(loss).expect("scalar loss");

        for (i, input) in inputs.iter().enumerate() {
            let analytic: Vec<f64> = match tape.grad(ids[i]) {
                Some(g) => g.to_vec(),
                None => vec![0.0; input.numel()],
            };
            let fd = finite_diff_grad(|t| loss_of(Some((i, t))), input, FD_EPS);
            for (a, b) in analytic.iter().zip(fd.data().iter()) {
                worst = worst.max(rel_error(*a, *b));
            }
        }
    }
    entries.push(GradCheckEntry {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: GRADCHECK_TOLERANCE,
    });
}

/// Random mask with at least one unmasked entry per row.
fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut mask = Tensor::<f64>::zeros(&[rows, cols]);
    for r in 0..rows {
        let keep = rng.random_range(0..cols);
        for c in 0..cols {
            if c != keep && rng.random::<f64>() < 0.4 {
                mask.set(&[r, c], NEG_LARGE);
            }
        }
    }
    mask
}

/// Pool input whose windows have comfortably separated maxima, keeping
/// central differences away from the argmax switch points.
fn pool_safe_input(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, f: usize) -> Tensor<f64> {
    loop {
        let t = rand_tensor(rng, &[n, h, w]);
        let mut ok = true;
        'scan: for m in 0..n {
            for oy in 0..h / f {
                for ox in 0..w / f {
                    let mut vals = Vec::with_capacity(f * f);
                    for dy in 0..f {
                        for dx in 0..f {
                            vals.push(t.at(&[m, oy * f + dy, ox * f + dx]));
                        }
                    }
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals.len() > 1 && vals[0] - vals[1] < 1e-3 {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            return t;
        }
    }
}

fn op_checks(entries: &mut Vec<GradCheckEntry>) {
    check_graph(
        "op.matmul",
        101,
        |rng| vec![rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4, 5])],
        |tape, ids| tape.matmul(ids[0], ids[1]),
        entries,
    );
    check_graph(
        "op.transpose",
        102,
        |rng| vec![rand_tensor(rng, &[3, 5])],
        |tape, ids| tape.transpose(ids[0]),
        entries,
    );
    check_graph(
        "op.reshape",
        103,
        |rng| vec![rand_tensor(rng, &[2, 6])],
        |tape, ids| tape.reshape(ids[0], &[3, 4]),
        entries,
    );
    check_graph(
        "op.add",
        104,
        |rng| vec![rand_tensor(rng, &[4, 3]), rand_tensor(rng, &[4, 3])],
        |tape, ids| tape.add(ids[0], ids[1]),
        entries,
    );
    check_graph(
        "op.sub",
        105,
        |rng| vec![rand_tensor(rng, &[4, 3]), rand_tensor(rng, &[4, 3])],
        |tape, ids| tape.sub(ids[0], ids[1]),
        entries,
    );
    check_graph(
        "op.mul",
        106,
        |rng| vec![rand_tensor(rng, &[4, 3]), rand_tensor(rng, &[4, 3])],
        |tape, ids| tape.mul(ids[0], ids[1]),
        entries,
    );
    check_graph(
        "op.add_row_bias",
        107,
        |rng| vec![rand_tensor(rng, &[5, 4]), rand_tensor(rng, &[4])],
        |tape, ids| tape.add_row_bias(ids[0], ids[1]),
        entries,
    );
    check_graph(
        "op.scale",
        108,
        |rng| vec![rand_tensor(rng, &[3, 3])],
        |tape, ids| Ok(tape.scale(ids[0], 0.37)),
        entries,
    );
    check_graph(
        "op.gelu",
        109,
        |rng| vec![rand_tensor(rng, &[4, 4])],
        |tape, ids| Ok(tape.gelu(ids[0])),
        entries,
    );
    check_graph(
        "op.softmax",
        110,
        |rng| vec![rand_tensor(rng, &[4, 6])],
        |tape, ids| tape.softmax_lastdim(ids[0], None),
        entries,
    );
    {
        // masked softmax: the mask is a constant; masked entries must carry
        // exactly zero gradient, which finite differences confirm
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let masks: Vec<Tensor<f64>> = (0..TRIALS).map(|_| random_mask(&mut rng, 4, 6)).collect();
        let trial = std::cell::Cell::new(0usize);
        check_graph(
            "op.softmax_masked",
            112,
            |rng| {
                trial.set(trial.get() + 1);
                vec![rand_tensor(rng, &[4, 6])]
            },
            |tape, ids| {
                let m = tape.constant(&masks[(trial.get() - 1) % TRIALS]);
                tape.softmax_lastdim(ids[0], Some(m))
            },
            entries,
        );
    }
    check_graph(
        "op.layer_norm",
        113,
        |rng| {
            vec![
                rand_tensor(rng, &[4, 6]),
                rand_tensor(rng, &[6]),
                rand_tensor(rng, &[6]),
            ]
        },
        |tape, ids| tape.layer_norm(ids[0], ids[1], ids[2], 1e-5),
        entries,
    );
    check_graph(
        "op.channel_norm",
        114,
        |rng| {
            vec![
                rand_tensor(rng, &[3, 4, 4]),
                rand_tensor(rng, &[3]),
                rand_tensor(rng, &[3]),
            ]
        },
        |tape, ids| tape.channel_norm(ids[0], ids[1], ids[2], 1e-5),
        entries,
    );
    check_graph(
        "op.conv2d_1x1",
        115,
        |rng| {
            vec![
                rand_tensor(rng, &[3, 4, 5]),
                rand_tensor(rng, &[2, 3]),
                rand_tensor(rng, &[2]),
            ]
        },
        |tape, ids| tape.conv2d_1x1(ids[0], ids[1], ids[2]),
        entries,
    );
    check_graph(
        "op.deconv2d",
        116,
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3, 3]),
                rand_tensor(rng, &[2, 3, 4, 4]),
                rand_tensor(rng, &[3]),
            ]
        },
        |tape, ids| tape.deconv2d(ids[0], ids[1], ids[2]),
        entries,
    );
    check_graph(
        "op.max_pool2d",
        117,
        |rng| vec![pool_safe_input(rng, 2, 4, 4, 2)],
        |tape, ids| tape.max_pool2d(ids[0], 2),
        entries,
    );
    check_graph(
        "op.extract_patches",
        118,
        |rng| vec![rand_tensor(rng, &[3, 8, 8])],
        |tape, ids| tape.extract_patches(ids[0], 4),
        entries,
    );
    check_graph(
        "op.concat_rows",
        119,
        |rng| vec![rand_tensor(rng, &[2, 4]), rand_tensor(rng, &[3, 4])],
        |tape, ids| tape.concat_rows(ids),
        entries,
    );
    check_graph(
        "op.concat_cols",
        120,
        |rng| vec![rand_tensor(rng, &[3, 2]), rand_tensor(rng, &[3, 5])],
        |tape, ids| tape.concat_cols(ids),
        entries,
    );
    check_graph(
        "op.slice_rows",
        121,
        |rng| vec![rand_tensor(rng, &[6, 3])],
        |tape, ids| tape.slice_rows(ids[0], 1, 3),
        entries,
    );
    check_graph(
        "op.slice_cols",
        122,
        |rng| vec![rand_tensor(rng, &[3, 6])],
        |tape, ids| tape.slice_cols(ids[0], 2, 3),
        entries,
    );
    check_graph(
        "op.composite_softmax_mse",
        123,
        |rng| {
            vec![
                rand_tensor(rng, &[3, 4]),
                rand_tensor(rng, &[4, 3]),
                rand_tensor(rng, &[3, 3]),
            ]
        },
        |tape, ids| {
            let mm = tape.matmul(ids[0], ids[1])?;
            let sm = tape.softmax_lastdim(mm, None)?;
            let d = tape.sub(sm, ids[2])?;
            tape.mul(d, d)
        },
        entries,
    );
}

fn module_checks(entries: &mut Vec<GradCheckEntry>) {
    // масked JTA layer over data inputs, including zero-gradient paths
    // through masked attention entries
    let c = 8usize;
    let cfg = FusionConfig {
        jta_layers: 1,
        temporal_span: 1,
        heads: 2,
        ..FusionConfig::default()
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(200);
    let mut set = crate::params::ParamSet::<f64>::new();
    let fusion = crate::fusion::init_fusion(&mut set, &mut init_rng, c, 2, 3, &cfg);
    let layer = fusion.jta[0];
    let mut mask_rng = ChaCha8Rng::seed_from_u64(201);
    let masks: Vec<Tensor<f64>> = (0..TRIALS)
        .map(|_| random_mask(&mut mask_rng, 3, 8))
        .collect();
    let trial = std::cell::Cell::new(0usize);
    check_graph(
        "module.jta_layer_masked",
        202,
        |rng| {
            trial.set(trial.get() + 1);
            vec![rand_tensor(rng, &[3, c]), rand_tensor(rng, &[8, c])]
        },
        |tape, ids| {
            let bound = set.bind(tape);
            let m = tape.constant(&masks[(trial.get() - 1) % TRIALS]);
            let (out, _) = jta_layer(tape, &bound, &layer, 2, ids[0], ids[1], Some(m))?;
            Ok(out)
        },
        entries,
    );
}

/// The fixed micro model for the end-to-end check: C=8, depth 1, one JTA
/// layer, N=2 joints, span 1, 32x32 input.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_h: 32,
            image_w: 32,
            channels: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            n_joints: 2,
            decoder_mid: 4,
            ..BackboneConfig::default()
        },
        fusion: FusionConfig {
            jta_layers: 1,
            gra_layers: 1,
            temporal_span: 1,
            heads: 2,
            ..FusionConfig::default()
        },
        variant: FusionVariant::JointSpecific,
        variant_layers: 1,
    }
}

fn micro_clip(config: &ModelConfig, seed: u64) -> PersonClip<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = &config.backbone;
    let frames = (0..config.fusion.frames())
        .map(|_| {
            let data = (0..3 * bb.image_h * bb.image_w)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            Tensor::new(vec![3, bb.image_h, bb.image_w], data).expect("frame dims")
        })
        .collect::<Vec<_>>();
    let gt = frames
        .iter()
        .map(|_| {
            (0..bb.n_joints)
                .map(|j| Keypoint {
                    x: 8.0 + 10.0 * j as f64,
                    y: 12.0 + 6.0 * j as f64,
                    visible: true,
                })
                .collect()
        })
        .collect();
    PersonClip {
        frames,
        gt_keypoints: gt,
        center_occlusions: Vec::new(),
    }
}

/// Loss of the micro model under a frozen mask. The mask path is
/// non-differentiable by construction (thresholding over a detached
/// decode), so both the tape and the finite differences hold it constant.
fn micro_loss(
    params: &ModelParams<f64>,
    clip: &PersonClip<f64>,
    mask: &crate::fusion::AttnMask,
    gt: &Tensor<f64>,
    vis: &[bool],
) -> f64 {
    let mut tape = Tape::new();
    let bound = params.set.bind(&mut tape);
    let bb = &params.config.backbone;
    let grids: Vec<_> = clip
        .frames
        .iter()
        .map(|frame| {
            let image = tape.input(frame, false);
            crate::backbone::encode(&mut tape, &bound, &params.encoder, bb, image)
                .expect("encode builds")
        })
        .collect();
    let maps =
        forward_with_mask(&mut tape, &bound, params, &grids, mask).expect("forward builds");
    let loss = heatmap_loss(&mut tape, maps, gt, vis).expect("loss builds");
    tape.data(loss)[0]
}

/// End-to-end check: analytic gradients for every weight group of the
/// micro model against central differences, under the frozen mask.
fn end_to_end_check(entries: &mut Vec<GradCheckEntry>) {
    let config = micro_model_config();
    let mut params = init_model::<f64>(config.clone(), 9000).expect("valid micro config");
    let clip = micro_clip(&config, 9001);
    let gt = gt_heatmaps::<f64>(
        clip.center_keypoints(),
        config.backbone.image_h,
        config.backbone.image_w,
        2.0,
    );
    let vis = vec![true, false]; // one invisible joint exercises loss masking

    // freeze the mask exactly as the real forward would build it
    let mask = {
        let mut tape = Tape::new();
        let bound = params.set.bind(&mut tape);
        let out = forward_on(&mut tape, &bound, &params, &clip).expect("forward builds");
        out.mask.expect("joint-specific forward produces a mask")
    };

    // analytic gradients for every parameter
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let bound = params.set.bind(&mut tape);
        let bb = &params.config.backbone;
        let grids: Vec<_> = clip
            .frames
            .iter()
            .map(|frame| {
                let image = tape.input(frame, false);
                crate::backbone::encode(&mut tape, &bound, &params.encoder, bb, image)
                    .expect("encode builds")
            })
            .collect();
        let maps =
            forward_with_mask(&mut tape, &bound, &params, &grids, &mask).expect("forward builds");
        let loss = heatmap_loss(&mut tape, maps, &gt, &vis).expect("loss builds");
        tape.backward(loss).expect("scalar loss");
        params
            .set
            .ids()
            .map(|id| match tape.grad(bound.id(id)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; params.set.get(id).numel()],
            })
            .collect()
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = params.set.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let numel = params.set.get(*id).numel();
        for i in 0..numel {
            let orig = params.set.get(*id).data()[i];
            params.set.get_mut(*id).data_mut()[i] = orig + FD_EPS;
            let plus = micro_loss(&params, &clip, &mask, &gt, &vis);
            params.set.get_mut(*id).data_mut()[i] = orig - FD_EPS;
            let minus = micro_loss(&params, &clip, &mask, &gt, &vis);
            params.set.get_mut(*id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_EPS);
            worst = worst.max(rel_error(analytic[pi][i], fd));
        }
    }
    entries.push(GradCheckEntry {
        name: "model.end_to_end_micro".to_string(),
        max_rel_err: worst,
        tolerance: GRADCHECK_TOLERANCE,
    });
}

/// Run every check and collect the report. Failures are report entries,
/// never panics.
pub fn gradcheck_suite() -> GradCheckReport {
    let mut entries = Vec::new();
    op_checks(&mut entries);
    module_checks(&mut entries);
    end_to_end_check(&mut entries);
    GradCheckReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    // The full suite runs as acceptance criterion 1; here we keep a cheap
    // smoke test over a representative subset.
    #[test]
    fn op_and_module_checks_pass() {
        let mut entries = Vec::new();
        op_checks(&mut entries);
        module_checks(&mut entries);
        let report = GradCheckReport { entries };
        assert!(report.all_passed(), "\n{}", report.render());
    }
}
