//! occ-forge: stage-by-stage and end-to-end runs of the LiDAR-camera BEV
//! fusion pipeline on procedural scenes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Point3;

use occ_forge::error::Error;
use occ_forge::fusion::FuseDirection;
use occ_forge::io;
use occ_forge::metrics::{accumulate, binary_iou, distance_binned_eval, miou};
use occ_forge::pipeline::{
    loss_report, run_fusion_pipeline, run_kl_path, run_perturbation_sweep, run_view_transform,
    with_thread_limit, PipelineConfig,
};
use occ_forge::scene::SceneSpec;
use occ_forge::view_transform::LayersMeaning;

#[derive(Parser)]
#[command(
    name = "occ-forge",
    about = "LiDAR-camera BEV fusion and semantic occupancy prediction on procedural scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    #[value(name = "camera_source", alias = "camera-source")]
    CameraSource,
    #[value(name = "lidar_source", alias = "lidar-source")]
    LidarSource,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayersMeaningArg {
    #[value(name = "per_side", alias = "per-side")]
    PerSide,
    Total,
}

/// Flags shared by pipeline-backed subcommands. Values from `--config` take
/// precedence over individual flags.
#[derive(Args)]
struct PipelineArgs {
    /// Scene description JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Pipeline config JSON; overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Depth-diffusion radius in pixels.
    #[arg(long)]
    radius: Option<usize>,
    /// Discretization range in meters.
    #[arg(long, value_name = "METERS")]
    range_m: Option<f64>,
    /// Diffusion feature layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Whether `layers` counts hypotheses per side or in total.
    #[arg(long)]
    layers_meaning: Option<LayersMeaningArg>,
    /// Neighborhood attention window (odd).
    #[arg(long, short = 'k')]
    k: Option<usize>,
    /// Active-region distillation weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Inactive-region distillation weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict evaluation to camera-observable voxels.
    #[arg(long, conflicts_with = "no_visible_mask")]
    visible_mask: bool,
    /// Evaluate over every voxel.
    #[arg(long)]
    no_visible_mask: bool,
    /// Use the toy voxel grid (20x20x8 over ±5 m) instead of the full-scale default.
    #[arg(long)]
    toy_grid: bool,
}

impl PipelineArgs {
    fn build(&self) -> Result<(PipelineConfig, SceneSpec), Error> {
        let mut cfg = if self.toy_grid {
            PipelineConfig::toy()
        } else {
            PipelineConfig::default()
        };
        if let Some(r) = self.radius {
            cfg.diffusion_radius_px = r;
        }
        if let Some(r) = self.range_m {
            cfg.range_m = r;
        }
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        if let Some(m) = self.layers_meaning {
            cfg.layers_meaning = match m {
                LayersMeaningArg::PerSide => LayersMeaning::PerSide,
                LayersMeaningArg::Total => LayersMeaning::Total,
            };
        }
        if let Some(k) = self.k {
            cfg.window = k;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.visible_mask {
            cfg.visible_mask = true;
        }
        if self.no_visible_mask {
            cfg.visible_mask = false;
        }
        if let Some(path) = &self.config {
            cfg = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        }
        cfg.validate()?;
        let scene: SceneSpec = serde_json::from_str(&std::fs::read_to_string(&self.scene)?)?;
        scene.validate()?;
        Ok((cfg, scene))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene data: point cloud, camera renders, and ground truth.
    Generate {
        /// Scene description JSON.
        #[arg(long, conflicts_with = "toy")]
        spec: Option<PathBuf>,
        /// Use the built-in desk-scale fixture scene.
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project the LiDAR cloud into each camera (sparse depth + classes).
    Project {
        #[command(flatten)]
        args: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffuse sparse depth within same-class mask regions.
    Diffuse {
        #[command(flatten)]
        args: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift image features to BEV through the full view transformation.
    Lift {
        #[command(flatten)]
        args: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse camera and LiDAR BEV maps with neighborhood attention.
    Fuse {
        #[command(flatten)]
        args: PipelineArgs,
        #[arg(long, value_enum, default_value = "camera_source")]
        direction: DirectionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute AR/IR distillation weights and the imitation loss.
    DistillWeights {
        #[command(flatten)]
        args: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full fusion pipeline and decode an occupancy grid.
    Predict {
        #[command(flatten)]
        args: PipelineArgs,
        /// Also write one PGM image per height slice of the prediction.
        #[arg(long)]
        dump_slices: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a pipeline run: metrics, loss components, distance bins.
    Eval {
        #[command(flatten)]
        args: PipelineArgs,
        /// Distance bin upper edges in meters, comma separated.
        #[arg(long, value_delimiter = ',')]
        bins: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extrinsic-perturbation robustness sweep.
    Perturb {
        #[command(flatten)]
        args: PipelineArgs,
        /// Translation magnitudes in meters, comma separated
        /// (default: the configured perturbation translation).
        #[arg(long, value_delimiter = ',')]
        translations: Option<Vec<f64>>,
        /// Rotation magnitudes in degrees, comma separated, paired with
        /// translations (default: the configured perturbation rotation).
        #[arg(long, value_delimiter = ',')]
        rotations: Option<Vec<f64>>,
        /// Perturbation seeds, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Perturb the whole rig once per seed instead of per camera.
        #[arg(long)]
        per_sequence: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn report_to_csv(path: &Path, report: &occ_forge::pipeline::FusionReport) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
    w.write_record(["binary_iou", &fmt(report.binary_iou)])?;
    w.write_record(["miou", &fmt(report.miou)])?;
    w.write_record(["evaluated_voxels", &report.evaluated_voxels.to_string()])?;
    for c in &report.per_class {
        w.write_record([&format!("iou_class_{}", c.class), &fmt(c.iou)])?;
    }
    w.flush()?;
    Ok(())
}

fn sweep_to_csv(path: &Path, report: &occ_forge::pipeline::SweepReport) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "translation_m",
        "rotation_deg",
        "seed",
        "binary_iou",
        "miou",
        "delta_binary_iou",
        "delta_miou",
        "mean_copoint_displacement_px",
    ])?;
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
    for e in &report.entries {
        w.write_record([
            e.translation_m.to_string(),
            e.rotation_deg.to_string(),
            e.seed.to_string(),
            fmt(e.binary_iou),
            fmt(e.miou),
            fmt(e.delta_binary_iou),
            fmt(e.delta_miou),
            e.mean_copoint_displacement_px.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            spec,
            toy,
            seed,
            out,
        } => {
            let scene = match (spec, toy) {
                (Some(path), false) => {
                    let mut scene: SceneSpec =
                        serde_json::from_str(&std::fs::read_to_string(path)?)?;
                    if let Some(s) = seed {
                        scene.seed = s;
                    }
                    scene
                }
                (None, true) => SceneSpec::toy_fixture(seed.unwrap_or(2024)),
                _ => {
                    return Err(Error::config(
                        "generate requires exactly one of --spec or --toy",
                    ))
                }
            };
            scene.validate()?;
            std::fs::create_dir_all(&out)?;
            save_json(&out.join("scene.json"), &scene)?;
            io::save_cameras(&out.join("cameras.json"), &scene.cameras)?;
            let cloud = occ_forge::scene::raycast_lidar(&scene)?;
            io::save_point_cloud(&out.join("cloud.bin"), &cloud)?;
            io::save_point_cloud_csv(&out.join("cloud.csv"), &cloud)?;
            for (i, cam) in scene.cameras.iter().enumerate() {
                let (mask, depth) = occ_forge::scene::render_semantics_and_depth(&scene, cam)?;
                io::save_tensor(
                    &out.join(format!("cam{i}_semantics")),
                    &io::semantic_mask_to_tensor(&mask),
                )?;
                io::save_tensor(
                    &out.join(format!("cam{i}_depth_oracle")),
                    &io::depth_map_to_tensor(&depth),
                )?;
            }
            let cfg = PipelineConfig::toy();
            let gt = occ_forge::scene::ground_truth_occupancy(&scene, &cfg.grid)?;
            io::save_tensor(&out.join("gt_occupancy"), &io::occupancy_to_tensor(&gt)?)?;
            println!(
                "generated {} points, {} cameras -> {}",
                cloud.len(),
                scene.cameras.len(),
                out.display()
            );
            Ok(())
        }
        Command::Project { args, out } => {
            let (cfg, scene) = args.build()?;
            std::fs::create_dir_all(&out)?;
            let run = run_view_transform(&cfg, &scene, None)?;
            for (i, stage) in run.cameras.iter().enumerate() {
                io::save_tensor(
                    &out.join(format!("cam{i}_sparse_depth")),
                    &io::depth_map_to_tensor(&stage.sparse_depth),
                )?;
                io::save_tensor(
                    &out.join(format!("cam{i}_point_classes")),
                    &io::semantic_mask_to_tensor(&stage.point_classes),
                )?;
            }
            println!("projected cloud into {} cameras", run.cameras.len());
            Ok(())
        }
        Command::Diffuse { args, out } => {
            let (cfg, scene) = args.build()?;
            std::fs::create_dir_all(&out)?;
            let run = run_view_transform(&cfg, &scene, None)?;
            for (i, stage) in run.cameras.iter().enumerate() {
                io::save_tensor(
                    &out.join(format!("cam{i}_extended_depth")),
                    &io::depth_map_to_tensor(&stage.extended_depth),
                )?;
            }
            println!(
                "diffused depth with radius {} px in {} cameras",
                cfg.diffusion_radius_px,
                run.cameras.len()
            );
            Ok(())
        }
        Command::Lift { args, out } => {
            let (cfg, scene) = args.build()?;
            std::fs::create_dir_all(&out)?;
            let run = run_view_transform(&cfg, &scene, None)?;
            for (i, stage) in run.cameras.iter().enumerate() {
                io::save_tensor(&out.join(format!("cam{i}_bev")), &io::bev_to_tensor(&stage.bev))?;
            }
            io::save_tensor(&out.join("camera_bev"), &io::bev_to_tensor(&run.camera_bev))?;
            println!(
                "lifted {} cameras to a {}x{} BEV grid",
                run.cameras.len(),
                run.camera_bev.height(),
                run.camera_bev.width()
            );
            Ok(())
        }
        Command::Fuse {
            args,
            direction,
            out,
        } => {
            let (cfg, scene) = args.build()?;
            std::fs::create_dir_all(&out)?;
            match direction {
                DirectionArg::CameraSource => {
                    let run = run_fusion_pipeline(&cfg, &scene)?;
                    io::save_tensor(&out.join("camera_bev"), &io::bev_to_tensor(&run.camera_bev))?;
                    io::save_tensor(&out.join("lidar_bev"), &io::bev_to_tensor(&run.lidar_bev))?;
                    io::save_tensor(&out.join("fused_bev"), &io::bev_to_tensor(&run.fused))?;
                }
                DirectionArg::LidarSource => {
                    let kl = run_kl_path(&cfg, &scene)?;
                    io::save_tensor(&out.join("camera_bev"), &io::bev_to_tensor(&kl.camera_bev))?;
                    io::save_tensor(&out.join("lidar_bev"), &io::bev_to_tensor(&kl.lidar_bev))?;
                    io::save_tensor(&out.join("fused_bev"), &io::bev_to_tensor(&kl.fused))?;
                }
            }
            // Record the fixture parameters actually used for the fusion.
            let channels = scene.class_count() * cfg.grid.nz();
            let params = occ_forge::pipeline::pipeline_attention_params(channels, &cfg)?;
            io::save_attention_params(&out, "attention_params", &params)?;
            io::save_gate_params(
                &out,
                "gate_params",
                &occ_forge::pipeline::pipeline_gate_params(channels),
            )?;
            let dir = match direction {
                DirectionArg::CameraSource => FuseDirection::CameraSource,
                DirectionArg::LidarSource => FuseDirection::LidarSource,
            };
            println!("fused with window k={} direction {:?}", cfg.window, dir);
            Ok(())
        }
        Command::DistillWeights { args, out } => {
            let (cfg, scene) = args.build()?;
            std::fs::create_dir_all(&out)?;
            let kl = run_kl_path(&cfg, &scene)?;
            let weights = kl.weights.weights();
            let tensor = io::Tensor::new(
                io::TensorData::F32(weights.data().iter().map(|&w| w as f32).collect()),
                vec![weights.height(), weights.width()],
                &["h", "w"],
            )?;
            io::save_tensor(&out.join("distill_weights"), &tensor)?;
            io::write_pgm(&out.join("distill_weights.pgm"), weights)?;
            save_json(&out.join("kl_report.json"), &kl.report)?;
            println!(
                "distill weights: N_AR={} N_IR={} rho={:.4} loss={:.6}",
                kl.report.n_ar, kl.report.n_ir, kl.report.rho, kl.report.loss
            );
            Ok(())
        }
        Command::Predict {
            args,
            dump_slices,
            out,
        } => {
            let (cfg, scene) = args.build()?;
            std::fs::create_dir_all(&out)?;
            let run = run_fusion_pipeline(&cfg, &scene)?;
            io::save_tensor(
                &out.join("occupancy"),
                &io::occupancy_to_tensor(&run.prediction)?,
            )?;
            if dump_slices {
                io::write_occupancy_slices(&out, "occupancy", &run.prediction)?;
            }
            io::save_tensor(
                &out.join("gt_occupancy"),
                &io::occupancy_to_tensor(&run.ground_truth)?,
            )?;
            save_json(&out.join("report.json"), &run.report)?;
            report_to_csv(&out.join("report.csv"), &run.report)?;
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
            println!(
                "predicted occupancy: binary IoU {} mIoU {}",
                fmt(run.report.binary_iou),
                fmt(run.report.miou)
            );
            Ok(())
        }
        Command::Eval { args, bins, out } => {
            let (cfg, scene) = args.build()?;
            std::fs::create_dir_all(&out)?;
            let run = run_fusion_pipeline(&cfg, &scene)?;
            save_json(&out.join("report.json"), &run.report)?;
            report_to_csv(&out.join("report.csv"), &run.report)?;
            let losses = loss_report(&cfg, &scene)?;
            save_json(&out.join("loss_report.json"), &losses)?;
            if !bins.is_empty() {
                let include: Vec<u16> = (1..scene.class_count() as u16 - 1).collect();
                let ego = Point3::new(
                    scene.lidar.origin[0],
                    scene.lidar.origin[1],
                    scene.lidar.origin[2],
                );
                let reports = distance_binned_eval(
                    &run.prediction,
                    &run.ground_truth,
                    &cfg.grid,
                    &ego,
                    &bins,
                    run.visible.as_ref(),
                    &include,
                    cfg.undefined_iou,
                )?;
                save_json(&out.join("distance_bins.json"), &reports)?;
                let mut w = csv::Writer::from_path(out.join("distance_bins.csv"))?;
                w.write_record(["lo_m", "hi_m", "voxels", "binary_iou", "miou"])?;
                let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
                for r in &reports {
                    w.write_record([
                        r.lo_m.to_string(),
                        r.hi_m.to_string(),
                        r.voxels.to_string(),
                        fmt(r.binary_iou),
                        fmt(r.miou),
                    ])?;
                }
                w.flush()?;
            }
            // One direct confusion pass for the console line.
            let cm = accumulate(&run.prediction, &run.ground_truth, run.visible.as_ref())?;
            let include: Vec<u16> = (1..scene.class_count() as u16 - 1).collect();
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
            if !include.is_empty() {
                let (_, mean) = miou(&cm, &include, cfg.undefined_iou)?;
                println!(
                    "eval: binary IoU {} mIoU {} total loss {:.4}",
                    fmt(binary_iou(&cm)),
                    fmt(mean),
                    losses.total
                );
            }
            Ok(())
        }
        Command::Perturb {
            args,
            translations,
            rotations,
            seeds,
            per_sequence,
            out,
        } => {
            let (mut cfg, scene) = args.build()?;
            if per_sequence {
                cfg.perturb_per_frame = false;
            }
            let translations = translations.unwrap_or_else(|| vec![cfg.perturb_translation_m]);
            let rotations = rotations.unwrap_or_else(|| vec![cfg.perturb_rotation_deg]);
            if translations.len() != rotations.len() {
                return Err(Error::config(
                    "translations and rotations must pair up one to one",
                ));
            }
            std::fs::create_dir_all(&out)?;
            let magnitudes: Vec<(f64, f64)> = translations
                .iter()
                .cloned()
                .zip(rotations.iter().cloned())
                .collect();
            let report = run_perturbation_sweep(&cfg, &scene, &magnitudes, &seeds)?;
            save_json(&out.join("sweep.json"), &report)?;
            sweep_to_csv(&out.join("sweep.csv"), &report)?;
            for s in &report.summaries {
                let fmt =
                    |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:+.4}"));
                println!(
                    "perturb ({} m, {} deg): mean dIoU {} mean dmIoU {} displacement {:.3} px",
                    s.translation_m,
                    s.rotation_deg,
                    fmt(s.mean_delta_binary_iou),
                    fmt(s.mean_delta_miou),
                    s.mean_copoint_displacement_px
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let threads = std::env::var("OCC_FORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    match with_thread_limit(threads, run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
