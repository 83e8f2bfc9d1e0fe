//! tarpose command line: train, evaluate, and inspect temporal
//! aggregate-and-restore pose models on synthetic clip benchmarks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error,
//! 3 gradient-check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tarpose::io::{
    load_clip_frames, load_dataset, load_params, save_dataset, save_params, write_overlay_ppm,
    write_pgm, RunConfig,
};
use tarpose::model::{
    flops::{flop_estimate, FlopConfig, COMPARED_VARIANTS},
    init_model, predict_heatmaps, FusionVariant, Keypoint, ModelParams, PersonClip,
};
use tarpose::synth::{make_benchmark, BenchmarkKind, SkeletonSpec};
use tarpose::tensor::Tensor;
use tarpose::train::{
    argmax_decode, evaluate, evaluate_occluded, gradcheck_suite, train, EvalReport,
};

#[derive(Parser)]
#[command(name = "tarpose", version, about = "Temporal aggregate-and-restore pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as specified by a run configuration file
    Train {
        /// Run configuration (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint, metrics, and report
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory produced by gen-data
        #[arg(long)]
        dataset: PathBuf,
        /// Where to write the PCK report CSV
        #[arg(long)]
        report: PathBuf,
        /// Run configuration; defaults to config.toml next to the checkpoint
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a checkpoint over one clip directory of PPM frames
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding frame_00.ppm .. frame_NN.ppm
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; defaults to config.toml next to the checkpoint
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the gradient-check suite (exit 3 on failure)
    Gradcheck,
    /// Print fusion-stage FLOP estimates for every temporal variant
    Flops {
        /// Derive shape parameters from a run configuration instead of the
        /// full-scale defaults (C=768, 432 tokens/frame, 5 frames)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fusion depth applied to every variant
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
    /// Generate a synthetic benchmark dataset
    GenData {
        /// One of: plain, occlusion, blur
        #[arg(long)]
        kind: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Frames on each side of the center frame
        #[arg(long, default_value_t = 1)]
        span: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval {
            checkpoint,
            dataset,
            report,
            config,
        } => cmd_eval(&checkpoint, &dataset, &report, config.as_deref()),
        Command::Infer {
            checkpoint,
            clip,
            out,
            config,
        } => cmd_infer(&checkpoint, &clip, &out, config.as_deref()),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Flops { config, depth } => cmd_flops(config.as_deref(), depth),
        Command::GenData {
            kind,
            count,
            seed,
            out,
            span,
            height,
            width,
        } => cmd_gen_data(&kind, count, seed, &out, span, height, width),
    }
}

fn render_report(report: &EvalReport) -> String {
    let mut out = String::from("joint,pck@0.05,pck@0.1,pck@0.2\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for (j, row) in report.per_joint.iter().enumerate() {
        out.push_str(&format!(
            "{j},{},{},{}\n",
            fmt(row[0]),
            fmt(row[1]),
            fmt(row[2])
        ));
    }
    out.push_str(&format!(
        "mean,{:.4},{:.4},{:.4}\n",
        report.mean[0], report.mean[1], report.mean[2]
    ));
    out
}

fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<ExitCode> {
    let run_config = RunConfig::load(config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    let model_config = run_config.model_config()?;
    let train_config = run_config.train_config();
    let kind = run_config.data_kind()?;
    let bb = &model_config.backbone;
    let span = if model_config.variant == FusionVariant::SingleFrame {
        0
    } else {
        model_config.fusion.temporal_span
    };

    eprintln!(
        "generating {} train / {} test {} clips (span {span})",
        run_config.data.train_count,
        run_config.data.test_count,
        kind.as_str()
    );
    let train_set = make_benchmark::<f32>(
        kind,
        run_config.data.train_count,
        span,
        run_config.data.seed,
        bb.image_h,
        bb.image_w,
    )?;
    let test_set = make_benchmark::<f32>(
        kind,
        run_config.data.test_count,
        span,
        run_config.data.seed ^ 0x7465_7374,
        bb.image_h,
        bb.image_w,
    )?;

    let mut params = init_model::<f32>(model_config, train_config.seed)?;
    eprintln!(
        "training {} ({} parameters) for {} epochs",
        run_config.model.variant,
        params.set.scalar_count(),
        train_config.epochs
    );
    let outcome = train(
        &mut params,
        &SkeletonSpec::default_15(),
        &train_set.clips,
        &test_set.clips,
        &train_config,
    )?;

    std::fs::create_dir_all(out_dir)?;
    save_params(&out_dir.join("checkpoint.tarv"), &params.set)?;
    run_config.save(&out_dir.join("config.toml"))?;
    std::fs::write(out_dir.join("metrics.csv"), &outcome.metrics_csv)?;
    std::fs::write(out_dir.join("report.csv"), render_report(&outcome.report))?;
    eprintln!(
        "done: {} steps, loss {:.4} -> {:.4}, eval PCK@0.2 {:.3}",
        outcome.steps, outcome.initial_loss, outcome.final_loss, outcome.report.mean[2]
    );
    println!("{}", out_dir.join("checkpoint.tarv").display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(ModelParams<f32>, RunConfig)> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("config.toml"),
    };
    let run_config = RunConfig::load(&config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    let model_config = run_config.model_config()?;
    let mut params = init_model::<f32>(model_config, 0)?;
    load_params(checkpoint, &mut params.set)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok((params, run_config))
}

fn cmd_eval(
    checkpoint: &Path,
    dataset_dir: &Path,
    report_path: &Path,
    config: Option<&Path>,
) -> Result<ExitCode> {
    let (params, _) = load_model(checkpoint, config)?;
    let dataset = load_dataset::<f32>(dataset_dir)
        .with_context(|| format!("loading {}", dataset_dir.display()))?;
    let report = evaluate(&params, &dataset.clips, "test")?;
    std::fs::write(report_path, render_report(&report))?;
    println!(
        "pck@0.05 {:.4}  pck@0.1 {:.4}  pck@0.2 {:.4}  ({} clips)",
        report.mean[0],
        report.mean[1],
        report.mean[2],
        dataset.clips.len()
    );
    if let Some(occ) = evaluate_occluded(&params, &dataset.clips, 0.1)? {
        println!("occluded-joint pck@0.1 {occ:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(
    checkpoint: &Path,
    clip_dir: &Path,
    out_dir: &Path,
    config: Option<&Path>,
) -> Result<ExitCode> {
    let (params, _) = load_model(checkpoint, config)?;
    let frames = load_clip_frames(clip_dir)?;
    let expected = params.config.expected_frames();
    if frames.len() != expected {
        bail!(
            "clip has {} frames; this model consumes {expected}",
            frames.len()
        );
    }
    let n = params.config.backbone.n_joints;
    let placeholder = vec![
        Keypoint {
            x: 0.0,
            y: 0.0,
            visible: false
        };
        n
    ];
    let clip = PersonClip {
        gt_keypoints: vec![placeholder; frames.len()],
        frames,
        center_occlusions: Vec::new(),
    };
    let maps = predict_heatmaps(&params, &clip)?;
    let decoded = argmax_decode(&maps);

    std::fs::create_dir_all(out_dir)?;
    let (h, w) = (maps.shape()[1], maps.shape()[2]);
    let mut csv = String::from("joint,x,y,score\n");
    for j in 0..n {
        let plane = Tensor::<f32>::new(
            vec![h, w],
            maps.data()[j * h * w..(j + 1) * h * w].to_vec(),
        )
        .expect("plane dims agree");
        write_pgm(&out_dir.join(format!("heatmap_{j:02}.pgm")), &plane)?;
        let score = plane.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        csv.push_str(&format!(
            "{j},{:.2},{:.2},{score:.4}\n",
            decoded[j].0, decoded[j].1
        ));
    }
    let overlay_kps: Vec<Keypoint> = decoded
        .iter()
        .map(|&(x, y)| Keypoint {
            x,
            y,
            visible: true,
        })
        .collect();
    write_overlay_ppm(
        &out_dir.join("overlay.ppm"),
        clip.center_frame(),
        &overlay_kps,
        &SkeletonSpec::default_15(),
    )?;
    std::fs::write(out_dir.join("keypoints.csv"), csv)?;
    println!("{}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck() -> Result<ExitCode> {
    let report = gradcheck_suite();
    print!("{}", report.render());
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

fn cmd_flops(config: Option<&Path>, depth: usize) -> Result<ExitCode> {
    let flop_config = match config {
        Some(path) => {
            let run_config = RunConfig::load(path)?;
            let model = run_config.model_config()?;
            FlopConfig {
                channels: model.backbone.channels,
                tokens_per_frame: model.backbone.tokens(),
                frames: model.fusion.frames(),
                n_joints: model.backbone.n_joints,
                mlp_ratio: model.backbone.mlp_ratio,
                gra_layers: model.fusion.gra_layers,
            }
        }
        // full-scale reference shape
        None => FlopConfig {
            channels: 768,
            tokens_per_frame: 432,
            frames: 5,
            n_joints: 15,
            mlp_ratio: 4,
            gra_layers: 1,
        },
    };
    println!(
        "fusion-stage FLOPs at depth {depth} (C={}, {} tokens/frame, {} frames, N={})",
        flop_config.channels,
        flop_config.tokens_per_frame,
        flop_config.frames,
        flop_config.n_joints
    );
    let mut table: Vec<(FusionVariant, u128)> = COMPARED_VARIANTS
        .iter()
        .map(|&v| (v, flop_estimate(&flop_config, v, depth).total_flops()))
        .collect();
    for (variant, flops) in &table {
        println!(
            "{:<20} {:>10.3} GFLOPs",
            variant.as_str(),
            *flops as f64 / 1e9
        );
    }
    table.sort_by_key(|&(_, f)| f);
    println!("minimum: {}", table[0].0.as_str());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(
    kind: &str,
    count: usize,
    seed: u64,
    out: &Path,
    span: usize,
    height: usize,
    width: usize,
) -> Result<ExitCode> {
    let kind = BenchmarkKind::parse(kind)
        .with_context(|| format!("unknown kind {kind:?}; expected plain, occlusion, or blur"))?;
    let dataset = make_benchmark::<f32>(kind, count, span, seed, height, width)?;
    save_dataset(out, &dataset)?;
    println!(
        "{} clips ({} frames each) under {}",
        count,
        2 * span + 1,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
