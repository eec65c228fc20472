//! End-to-end orchestration: stage-by-stage execution of the fusion path, the
//! distillation (KL) path, and the extrinsic-robustness sweep.
//!
//! Learned network outputs are replaced by oracle-derived stand-ins so the
//! geometry of the whole chain is testable: texture features are one-hot
//! (class, height-bin) indicators from the rendered semantic mask, and depth
//! logits are a Gaussian score around the rendered oracle depth.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::distill::{
    distill_loss, distill_weights, occupancy_mask, region_split, DistillWeightMap, OccupancyMask2D,
};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_bev, AttentionParams, AttentionScale, FuseDirection, GateParams,
};
use crate::geometry::{back_project, perturb_extrinsics, project, Extrinsics, PixelDepth};
use crate::grid::{BevFeatureMap, Grid3};
use crate::losses::{
    cross_entropy, lovasz_softmax, masked_cross_entropy, total_loss, LossComponents, LossWeights,
};
use crate::metrics::{
    accumulate, binary_iou, miou, ClassIou, UndefinedIouPolicy, VisibilityMask,
};
use crate::numeric::softmax;
use crate::occupancy::{
    channel_to_height, decode_labels, LogitsGrid, OccupancyGrid, VoxelGridSpec,
};
use crate::scene::{
    ground_truth_occupancy, raycast_lidar, render_semantics_and_depth, SceneSpec,
};
use crate::view_transform::{
    diffuse_depth, discretize_depths, lift_to_bev, scatter_copoints, DepthHypotheses, DepthMap,
    ImageFeatureMap, LayersMeaning, SemanticMask,
};

/// Relative-bias boost (pre-scale, in units of the logit denominator) put on
/// the window center in the default pipeline attention parameters. Large
/// enough that a query attends almost entirely to its own cell, keeping the
/// fused map spatially crisp without learned projections.
const CENTER_BIAS_LOGITS: f64 = 30.0;

/// Gate bias of the default pipeline parameters; saturates the sigmoid so the
/// gate passes features through unscaled.
const GATE_SATURATION_BIAS: f64 = 50.0;

/// Logit floor added to the empty-class channels before decoding, so voxels
/// that received no feature mass decode to empty instead of class 0.
const EMPTY_LOGIT_FLOOR: f64 = 1e-6;

/// All pipeline knobs; serializable as the `--config` JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid: VoxelGridSpec,
    /// Depth-diffusion disk radius in feature-map pixels.
    pub diffusion_radius_px: usize,
    /// Bidirectional discretization range in meters.
    pub range_m: f64,
    /// Diffusion feature layers; interpreted per `layers_meaning`.
    pub layers: usize,
    pub layers_meaning: LayersMeaning,
    /// Neighborhood-attention window size (odd).
    pub window: usize,
    pub alpha: f64,
    pub beta: f64,
    pub loss_weights: LossWeights,
    /// Restrict evaluation to camera-observable voxels.
    pub visible_mask: bool,
    /// Occupancy threshold on the channel-wise L1 norm.
    pub occupancy_eps: f64,
    pub attention_scale: AttentionScale,
    /// Sharpness of the oracle depth logits (meters).
    pub depth_logit_sigma_m: f64,
    pub perturb_translation_m: f64,
    pub perturb_rotation_deg: f64,
    /// Perturb each camera independently (true) or once for the whole rig.
    pub perturb_per_frame: bool,
    pub undefined_iou: UndefinedIouPolicy,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: VoxelGridSpec::occ3d_default(),
            diffusion_radius_px: 7,
            range_m: 1.0,
            layers: 8,
            layers_meaning: LayersMeaning::PerSide,
            window: 7,
            alpha: 1.0,
            beta: 1.0,
            loss_weights: LossWeights::default(),
            visible_mask: true,
            occupancy_eps: 0.0,
            attention_scale: AttentionScale::ValueDim,
            depth_logit_sigma_m: 0.25,
            perturb_translation_m: 0.1,
            perturb_rotation_deg: 1.0,
            perturb_per_frame: true,
            undefined_iou: UndefinedIouPolicy::Exclude,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Desk-scale configuration matching [`SceneSpec::toy_fixture`]: a
    /// 20×20×8 voxel grid over ±5 m.
    pub fn toy() -> Self {
        Self {
            grid: VoxelGridSpec {
                x_min: -5.0,
                x_max: 5.0,
                y_min: -5.0,
                y_max: 5.0,
                z_min: -0.4,
                z_max: 2.8,
                cell_xy: 0.5,
                cell_z: 0.4,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.window.is_multiple_of(2) || self.window == 0 {
            return Err(Error::config("window must be odd and >= 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be >= 1"));
        }
        if self.range_m.is_nan() || self.range_m <= 0.0 {
            return Err(Error::config("range_m must be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("alpha and beta must be non-negative"));
        }
        if self.occupancy_eps < 0.0 {
            return Err(Error::config("occupancy_eps must be non-negative"));
        }
        if self.depth_logit_sigma_m.is_nan() || self.depth_logit_sigma_m <= 0.0 {
            return Err(Error::config("depth_logit_sigma_m must be positive"));
        }
        if self.perturb_translation_m < 0.0 || self.perturb_rotation_deg < 0.0 {
            return Err(Error::config("perturbation magnitudes must be non-negative"));
        }
        self.layers_meaning.side_layers(self.layers)?;
        self.loss_weights.validate()?;
        Ok(())
    }

    /// Hypotheses per pixel (B) implied by the layer settings.
    pub fn depth_bins(&self) -> Result<usize> {
        Ok(2 * self.layers_meaning.side_layers(self.layers)?)
    }
}

/// Runs `f` inside a rayon pool capped at `threads` (None = default pool).
pub fn with_thread_limit<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}

/// Per-camera intermediate products of the view transformation.
pub struct CameraStage {
    pub semantic_mask: SemanticMask,
    pub oracle_depth: DepthMap,
    pub sparse_depth: DepthMap,
    pub point_classes: SemanticMask,
    pub extended_depth: DepthMap,
    pub hypotheses: DepthHypotheses,
    pub features: ImageFeatureMap,
    pub bev: BevFeatureMap,
}

/// Everything produced by one fusion-path run.
pub struct FusionArtifacts {
    pub cloud: Vec<crate::geometry::LidarPoint>,
    pub cameras: Vec<CameraStage>,
    pub camera_bev: BevFeatureMap,
    pub lidar_bev: BevFeatureMap,
    pub fused: BevFeatureMap,
    pub logits: LogitsGrid,
    pub prediction: OccupancyGrid,
    pub ground_truth: OccupancyGrid,
    pub visible: Option<VisibilityMask>,
    pub report: FusionReport,
}

/// Metrics summary of a fusion run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub seed: u64,
    pub visible_mask_used: bool,
    pub evaluated_voxels: u64,
    pub binary_iou: Option<f64>,
    pub miou: Option<f64>,
    pub per_class: Vec<ClassIou>,
}

/// Outputs of the distillation (KL) path.
pub struct KlArtifacts {
    pub camera_bev: BevFeatureMap,
    pub lidar_bev: BevFeatureMap,
    pub fused: BevFeatureMap,
    pub fused_mask: OccupancyMask2D,
    pub image_mask: OccupancyMask2D,
    pub weights: DistillWeightMap,
    pub gradient: BevFeatureMap,
    pub report: KlReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub loss: f64,
    /// Loss divided by the total weight mass, when nonzero.
    pub loss_normalized: Option<f64>,
    pub n_ar: usize,
    pub n_ir: usize,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Loss components measured on a fixture scene by the `eval` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: LossComponents,
    /// The pts component split into its two parts (combined 1:1 above).
    pub pts_cross_entropy: f64,
    pub pts_lovasz: f64,
    pub weights: LossWeights,
    pub total: f64,
}

/// Default fixture attention parameters: identity projections with a strongly
/// center-favoring relative bias.
pub fn pipeline_attention_params(channels: usize, cfg: &PipelineConfig) -> Result<AttentionParams> {
    use nalgebra::DMatrix;
    let params = AttentionParams::new(
        DMatrix::identity(channels, channels),
        DMatrix::identity(channels, channels),
        DMatrix::identity(channels, channels),
        {
            let e = 2 * cfg.window - 1;
            let mut bias = crate::grid::Grid2::filled(e, e, 0.0);
            // Offset (0,0) sits at (k-1, k-1); identity projections mean the
            // scale denominator dimension equals the channel count.
            let center = cfg.window - 1;
            bias.set(center, center, CENTER_BIAS_LOGITS * (channels as f64).sqrt());
            bias
        },
        cfg.window,
        cfg.attention_scale,
    )?;
    Ok(params)
}

/// Default fixture gate: saturated, so features pass through unscaled.
pub fn pipeline_gate_params(channels: usize) -> GateParams {
    GateParams::constant_bias(channels, GATE_SATURATION_BIAS)
}

fn height_bin(grid: &VoxelGridSpec, z: f64) -> Option<usize> {
    if z < grid.z_min {
        return None;
    }
    let iz = ((z - grid.z_min) / grid.cell_z).floor() as usize;
    (iz < grid.nz()).then_some(iz)
}

/// Builds the stand-in image feature map: one-hot (class, height-bin)
/// indicators at pixels with extended depth, plus Gaussian depth logits
/// centered on the oracle depth.
#[allow(clippy::too_many_arguments)]
fn build_image_features(
    cfg: &PipelineConfig,
    class_count: usize,
    mask: &SemanticMask,
    oracle_depth: &DepthMap,
    extended: &DepthMap,
    hypotheses: &DepthHypotheses,
    ex: &Extrinsics,
    k: &crate::geometry::CameraIntrinsics,
) -> Result<ImageFeatureMap> {
    let nz = cfg.grid.nz();
    let channels = class_count * nz;
    let bins = cfg.depth_bins()?;
    let (h, w) = (mask.height(), mask.width());
    let mut img = ImageFeatureMap::zeros(channels, h, w, bins);
    let sigma2 = cfg.depth_logit_sigma_m * cfg.depth_logit_sigma_m;
    let mut feature = vec![0.0; channels];
    for row in 0..h {
        for col in 0..w {
            let d = *extended.get(row, col);
            if d <= 0.0 {
                continue;
            }
            let class = *mask.get(row, col) as usize;
            if class == 0 || class >= class_count {
                continue;
            }
            let pd = PixelDepth {
                u: col as f64 + 0.5,
                v: row as f64 + 0.5,
                depth: d,
            };
            let p = back_project(&pd, ex, k)?;
            let Some(iz) = height_bin(&cfg.grid, p.z) else {
                continue;
            };
            feature.fill(0.0);
            feature[class * nz + iz] = 1.0;
            img.set_feature(row, col, &feature);

            let oracle = *oracle_depth.get(row, col);
            if oracle > 0.0 {
                let logits: Vec<f64> = hypotheses
                    .at(row, col)
                    .iter()
                    .map(|&hd| -((hd - oracle) * (hd - oracle)) / (2.0 * sigma2))
                    .collect();
                img.set_logits(row, col, &logits);
            }
        }
    }
    Ok(img)
}

/// Runs the view transformation for one camera. `believed` is the extrinsics
/// the pipeline uses for projection and lifting; rendering (which stands in
/// for the real image content) always uses the true scene extrinsics.
fn camera_stage(
    cfg: &PipelineConfig,
    scene: &SceneSpec,
    class_count: usize,
    cam_idx: usize,
    cloud: &[crate::geometry::LidarPoint],
    believed: &Extrinsics,
) -> Result<CameraStage> {
    let cam = &scene.cameras[cam_idx];
    let (semantic_mask, oracle_depth) = render_semantics_and_depth(scene, cam)?;
    let (sparse_depth, point_classes) = scatter_copoints(cloud, believed, &cam.intrinsics);
    let extended = diffuse_depth(&sparse_depth, &semantic_mask, cfg.diffusion_radius_px)?;
    let side_layers = cfg.layers_meaning.side_layers(cfg.layers)?;
    let hypotheses = discretize_depths(&extended, cfg.range_m, side_layers)?;
    let features = build_image_features(
        cfg,
        class_count,
        &semantic_mask,
        &oracle_depth,
        &extended,
        &hypotheses,
        believed,
        &cam.intrinsics,
    )?;
    let bev_spec = cfg.grid.bev_spec(class_count * cfg.grid.nz());
    let bev = lift_to_bev(&features, &hypotheses, believed, &cam.intrinsics, &bev_spec)?;
    Ok(CameraStage {
        semantic_mask,
        oracle_depth,
        sparse_depth,
        point_classes,
        extended_depth: extended,
        hypotheses,
        features,
        bev,
    })
}

/// Scatters LiDAR points into the BEV plane with one-hot (class, height-bin)
/// features, the stand-in for a learned point-cloud encoder.
pub fn lidar_bev_features(
    cfg: &PipelineConfig,
    class_count: usize,
    cloud: &[crate::geometry::LidarPoint],
) -> BevFeatureMap {
    let nz = cfg.grid.nz();
    let bev_spec = cfg.grid.bev_spec(class_count * nz);
    let mut bev = BevFeatureMap::zeros(bev_spec.channels, bev_spec.height(), bev_spec.width());
    for p in cloud {
        let Some((iy, ix)) = bev_spec.cell_index(p.position.x, p.position.y) else {
            continue;
        };
        let Some(iz) = height_bin(&cfg.grid, p.position.z) else {
            continue;
        };
        let class = p.class as usize;
        if class == 0 || class >= class_count {
            continue;
        }
        *bev.at_mut(class * nz + iz, iy, ix) += 1.0;
    }
    bev
}

/// Normalizes each cell's feature vector to unit L1 mass (cells with no mass
/// stay zero). Applied to both BEV branches before fusion so attention logits
/// stay bounded regardless of point density, standing in for the bounded
/// activations a learned encoder would produce.
pub fn normalize_cell_features(map: &mut BevFeatureMap) {
    let (c_n, h, w) = (map.channels(), map.height(), map.width());
    for y in 0..h {
        for x in 0..w {
            let l1: f64 = (0..c_n).map(|c| map.at(c, y, x).abs()).sum();
            if l1 > 0.0 {
                for c in 0..c_n {
                    *map.at_mut(c, y, x) /= l1;
                }
            }
        }
    }
}

/// Adds the empty-class logit floor so zero-mass voxels decode to empty.
pub fn apply_empty_floor(logits: &mut LogitsGrid, class_count: usize) {
    let empty = class_count - 1;
    for z in 0..logits.depth() {
        for y in 0..logits.height() {
            for x in 0..logits.width() {
                *logits.at_mut(empty, z, y, x) += EMPTY_LOGIT_FLOOR;
            }
        }
    }
}

/// Marks voxels observable by at least one camera: the voxel center projects
/// into the frame and is not behind the first rendered surface (with half a
/// voxel diagonal of slack). Uses the true scene extrinsics.
pub fn compute_visible_mask(
    scene: &SceneSpec,
    grid: &VoxelGridSpec,
    renders: &[(SemanticMask, DepthMap)],
) -> VisibilityMask {
    let (ny, nx, nz) = (grid.ny(), grid.nx(), grid.nz());
    let slack = 0.5
        * (grid.cell_xy * grid.cell_xy + grid.cell_xy * grid.cell_xy + grid.cell_z * grid.cell_z)
            .sqrt();
    let mut mask = Grid3::filled(ny, nx, nz, false);
    for (cam, (_, depth)) in scene.cameras.iter().zip(renders) {
        for iy in 0..ny {
            for ix in 0..nx {
                for iz in 0..nz {
                    if *mask.get(iy, ix, iz) {
                        continue;
                    }
                    let (x, y, z) = grid.voxel_center(iy, ix, iz);
                    if let Some(pd) =
                        project(&Point3::new(x, y, z), &cam.extrinsics, &cam.intrinsics)
                    {
                        let rendered = *depth.get(pd.v.floor() as usize, pd.u.floor() as usize);
                        if rendered == 0.0 || pd.depth <= rendered + slack {
                            mask.set(iy, ix, iz, true);
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Class ids entering the mIoU mean: every real surface class; background 0
/// and the trailing empty class are left out.
fn miou_classes(class_count: usize) -> Vec<u16> {
    (1..class_count as u16 - 1).collect()
}

/// Everything up to and including the BEV branches: the view transformation
/// for each camera plus the LiDAR scatter, with both maps cell-normalized.
pub struct ViewTransformArtifacts {
    pub cloud: Vec<crate::geometry::LidarPoint>,
    pub cameras: Vec<CameraStage>,
    pub camera_bev: BevFeatureMap,
    pub lidar_bev: BevFeatureMap,
}

/// Runs the pipeline through the view transformation only, with optional
/// believed extrinsics replacing the true calibration.
pub fn run_view_transform(
    cfg: &PipelineConfig,
    scene: &SceneSpec,
    believed: Option<&[Extrinsics]>,
) -> Result<ViewTransformArtifacts> {
    cfg.validate()?;
    scene.validate()?;
    if let Some(b) = believed {
        if b.len() != scene.cameras.len() {
            return Err(Error::config("one believed extrinsics per camera required"));
        }
    }
    let class_count = scene.class_count();
    let channels = class_count * cfg.grid.nz();

    let cloud = raycast_lidar(scene)?;
    let mut cameras = Vec::with_capacity(scene.cameras.len());
    let mut camera_bev = BevFeatureMap::zeros(
        channels,
        cfg.grid.bev_spec(channels).height(),
        cfg.grid.bev_spec(channels).width(),
    );
    for cam_idx in 0..scene.cameras.len() {
        let ex = match believed {
            Some(b) => b[cam_idx].clone(),
            None => scene.cameras[cam_idx].extrinsics.clone(),
        };
        let stage = camera_stage(cfg, scene, class_count, cam_idx, &cloud, &ex)?;
        for (dst, src) in camera_bev.data_mut().iter_mut().zip(stage.bev.data()) {
            *dst += src;
        }
        cameras.push(stage);
    }
    normalize_cell_features(&mut camera_bev);

    let mut lidar_bev = lidar_bev_features(cfg, class_count, &cloud);
    normalize_cell_features(&mut lidar_bev);
    Ok(ViewTransformArtifacts {
        cloud,
        cameras,
        camera_bev,
        lidar_bev,
    })
}

fn run_fusion_with_believed(
    cfg: &PipelineConfig,
    scene: &SceneSpec,
    believed: Option<&[Extrinsics]>,
) -> Result<FusionArtifacts> {
    let class_count = scene.class_count();
    let nz = cfg.grid.nz();
    let channels = class_count * nz;

    let ViewTransformArtifacts {
        cloud,
        cameras,
        camera_bev,
        lidar_bev,
    } = run_view_transform(cfg, scene, believed)?;
    let ground_truth = ground_truth_occupancy(scene, &cfg.grid)?;

    let params = pipeline_attention_params(channels, cfg)?;
    let gate = pipeline_gate_params(channels);
    let fused = fuse_bev(&camera_bev, &lidar_bev, &params, &gate, FuseDirection::CameraSource)?;

    let mut logits = channel_to_height(&fused, class_count, nz)?;
    apply_empty_floor(&mut logits, class_count);
    let prediction = decode_labels(&logits);

    let visible = if cfg.visible_mask {
        let renders: Vec<(SemanticMask, DepthMap)> = cameras
            .iter()
            .map(|c| (c.semantic_mask.clone(), c.oracle_depth.clone()))
            .collect();
        Some(compute_visible_mask(scene, &cfg.grid, &renders))
    } else {
        None
    };

    let cm = accumulate(&prediction, &ground_truth, visible.as_ref())?;
    let include = miou_classes(class_count);
    // A scene with no surface classes has nothing to average over.
    let (per_class, mean) = if include.is_empty() {
        (Vec::new(), None)
    } else {
        miou(&cm, &include, cfg.undefined_iou)?
    };
    let report = FusionReport {
        seed: cfg.seed,
        visible_mask_used: cfg.visible_mask,
        evaluated_voxels: cm.total(),
        binary_iou: binary_iou(&cm),
        miou: mean,
        per_class,
    };

    Ok(FusionArtifacts {
        cloud,
        cameras,
        camera_bev,
        lidar_bev,
        fused,
        logits,
        prediction,
        ground_truth,
        visible,
        report,
    })
}

/// Full SDG-Fusion path: generate → project/scatter → diffuse → discretize →
/// lift → fuse (camera source) → channel-to-height → decode → evaluate.
pub fn run_fusion_pipeline(cfg: &PipelineConfig, scene: &SceneSpec) -> Result<FusionArtifacts> {
    run_fusion_with_believed(cfg, scene, None)
}

/// Distillation path: LiDAR-source fusion, AR/IR split, adaptive weights, and
/// the weighted imitation loss against the camera BEV map.
pub fn run_kl_path(cfg: &PipelineConfig, scene: &SceneSpec) -> Result<KlArtifacts> {
    let branches = run_view_transform(cfg, scene, None)?;
    let channels = branches.camera_bev.channels();
    let params = pipeline_attention_params(channels, cfg)?;
    let gate = pipeline_gate_params(channels);
    let fused = fuse_bev(
        &branches.camera_bev,
        &branches.lidar_bev,
        &params,
        &gate,
        FuseDirection::LidarSource,
    )?;
    let fused_mask = occupancy_mask(&fused, cfg.occupancy_eps);
    let image_mask = occupancy_mask(&branches.camera_bev, cfg.occupancy_eps);
    let (ar, ir) = region_split(&fused_mask, &image_mask)?;
    let weights = distill_weights(&ar, &ir, cfg.alpha, cfg.beta)?;
    let (loss, gradient) = distill_loss(&fused, &branches.camera_bev, &weights)?;
    let total_weight = weights.ar_total_weight() + weights.ir_total_weight();
    let report = KlReport {
        loss,
        loss_normalized: (total_weight > 0.0).then(|| loss / total_weight),
        n_ar: weights.n_ar(),
        n_ir: weights.n_ir(),
        rho: weights.rho,
        alpha: weights.alpha,
        beta: weights.beta,
    };
    Ok(KlArtifacts {
        camera_bev: branches.camera_bev,
        lidar_bev: branches.lidar_bev,
        fused,
        fused_mask,
        image_mask,
        weights,
        gradient,
        report,
    })
}

/// One perturbed run of the robustness sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub seed: u64,
    pub binary_iou: Option<f64>,
    pub miou: Option<f64>,
    pub delta_binary_iou: Option<f64>,
    pub delta_miou: Option<f64>,
    /// Mean pixel displacement of projected co-points under the perturbation.
    pub mean_copoint_displacement_px: f64,
}

/// Aggregates of one (translation, rotation) magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub mean_delta_binary_iou: Option<f64>,
    pub worst_delta_binary_iou: Option<f64>,
    pub mean_delta_miou: Option<f64>,
    pub worst_delta_miou: Option<f64>,
    pub mean_copoint_displacement_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub baseline: FusionReport,
    pub entries: Vec<SweepEntry>,
    pub summaries: Vec<SweepSummary>,
}

fn perturbation_seed(base: u64, cam_idx: usize) -> u64 {
    base ^ ((cam_idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mean pixel displacement of cloud points projected with true versus
/// believed extrinsics, over points valid under both.
fn mean_copoint_displacement(
    scene: &SceneSpec,
    cloud: &[crate::geometry::LidarPoint],
    believed: &[Extrinsics],
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (cam, bex) in scene.cameras.iter().zip(believed) {
        for p in cloud {
            let a = project(&p.position, &cam.extrinsics, &cam.intrinsics);
            let b = project(&p.position, bex, &cam.intrinsics);
            if let (Some(a), Some(b)) = (a, b) {
                total += ((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    if n > 0 {
        total / n as f64
    } else {
        0.0
    }
}

/// Repeats the fusion pipeline under random extrinsic perturbations and
/// reports metric deltas and co-point displacement statistics.
pub fn run_perturbation_sweep(
    cfg: &PipelineConfig,
    scene: &SceneSpec,
    magnitudes: &[(f64, f64)],
    seeds: &[u64],
) -> Result<SweepReport> {
    if magnitudes.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one magnitude and seed"));
    }
    let baseline = run_fusion_pipeline(cfg, scene)?;
    let cloud = raycast_lidar(scene)?;
    let mut entries = Vec::new();
    let mut summaries = Vec::new();
    for &(d_trans, d_rot) in magnitudes {
        let mut deltas_binary = Vec::new();
        let mut deltas_miou = Vec::new();
        let mut displacements = Vec::new();
        for &seed in seeds {
            let believed: Vec<Extrinsics> = scene
                .cameras
                .iter()
                .enumerate()
                .map(|(i, cam)| {
                    let s = if cfg.perturb_per_frame {
                        perturbation_seed(seed, i)
                    } else {
                        seed
                    };
                    perturb_extrinsics(&cam.extrinsics, d_trans, d_rot, s)
                })
                .collect();
            let run = run_fusion_with_believed(cfg, scene, Some(&believed))?;
            let displacement = mean_copoint_displacement(scene, &cloud, &believed);
            let delta_binary = match (run.report.binary_iou, baseline.report.binary_iou) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            let delta_miou = match (run.report.miou, baseline.report.miou) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            if let Some(d) = delta_binary {
                deltas_binary.push(d);
            }
            if let Some(d) = delta_miou {
                deltas_miou.push(d);
            }
            displacements.push(displacement);
            entries.push(SweepEntry {
                translation_m: d_trans,
                rotation_deg: d_rot,
                seed,
                binary_iou: run.report.binary_iou,
                miou: run.report.miou,
                delta_binary_iou: delta_binary,
                delta_miou,
                mean_copoint_displacement_px: displacement,
            });
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let worst = |xs: &[f64]| xs.iter().cloned().fold(f64::INFINITY, f64::min);
        summaries.push(SweepSummary {
            translation_m: d_trans,
            rotation_deg: d_rot,
            mean_delta_binary_iou: (!deltas_binary.is_empty()).then(|| mean(&deltas_binary)),
            worst_delta_binary_iou: (!deltas_binary.is_empty()).then(|| worst(&deltas_binary)),
            mean_delta_miou: (!deltas_miou.is_empty()).then(|| mean(&deltas_miou)),
            worst_delta_miou: (!deltas_miou.is_empty()).then(|| worst(&deltas_miou)),
            mean_copoint_displacement_px: mean(&displacements),
        });
    }
    Ok(SweepReport {
        baseline: baseline.report,
        entries,
        summaries,
    })
}

/// Computes fixture-scene loss components from pipeline artifacts.
///
/// depth: cross-entropy of the per-pixel depth logits against the hypothesis
/// nearest the oracle depth. seg: agreement between scattered co-point classes
/// and the rendered mask. pts: per-LiDAR-point voxel supervision (CE + Lovász,
/// combined 1:1). mask_occ: masked CE of the decoded logits against ground
/// truth over visible voxels. distill: the KL-path loss.
pub fn loss_report(cfg: &PipelineConfig, scene: &SceneSpec) -> Result<LossReport> {
    const SEG_MARGIN: f64 = 10.0;
    let fusion = run_fusion_pipeline(cfg, scene)?;
    let kl = run_kl_path(cfg, scene)?;
    let class_count = scene.class_count();

    // Depth: CE over hypothesis bins for pixels carrying hypotheses.
    let mut depth_logits = Vec::new();
    let mut depth_targets = Vec::new();
    let bins = cfg.depth_bins()?;
    for stage in &fusion.cameras {
        let (h, w) = (stage.oracle_depth.height(), stage.oracle_depth.width());
        for row in 0..h {
            for col in 0..w {
                let hyp = stage.hypotheses.at(row, col);
                let oracle = *stage.oracle_depth.get(row, col);
                if hyp.is_empty() || oracle <= 0.0 {
                    continue;
                }
                let target = hyp
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        (*a - oracle).abs().partial_cmp(&(*b - oracle).abs()).unwrap()
                    })
                    .map(|(i, _)| i as u16)
                    .unwrap();
                depth_logits.extend_from_slice(stage.features.logits_at(row, col));
                depth_targets.push(target);
            }
        }
    }
    let depth = if depth_targets.is_empty() {
        0.0
    } else {
        cross_entropy(&depth_logits, bins, &depth_targets)?.0
    };

    // Seg: cross-modal class agreement at co-point pixels.
    let mut seg_logits = Vec::new();
    let mut seg_targets = Vec::new();
    for stage in &fusion.cameras {
        for (i, j, &cls) in stage.point_classes.indexed_iter() {
            if *stage.sparse_depth.get(i, j) <= 0.0 {
                continue;
            }
            let target = *stage.semantic_mask.get(i, j);
            if target == 0 || target as usize >= class_count {
                continue;
            }
            let mut row = vec![0.0; class_count];
            row[cls as usize] = SEG_MARGIN;
            seg_logits.extend_from_slice(&row);
            seg_targets.push(target);
        }
    }
    let seg = if seg_targets.is_empty() {
        0.0
    } else {
        cross_entropy(&seg_logits, class_count, &seg_targets)?.0
    };

    // Pts: per-point CE + Lovász on the fused voxel class distribution.
    let mut pts_probs_cols: Vec<Vec<f64>> = Vec::new();
    let mut pts_targets = Vec::new();
    let mut pts_logits = Vec::new();
    for p in &fusion.cloud {
        let Some((iy, ix, iz)) = cfg.grid.voxel_index(p.position.x, p.position.y, p.position.z)
        else {
            continue;
        };
        let logits_row: Vec<f64> = (0..class_count)
            .map(|c| fusion.logits.at(c, iz, iy, ix))
            .collect();
        pts_probs_cols.push(softmax(&logits_row));
        pts_logits.extend_from_slice(&logits_row);
        pts_targets.push(p.class);
    }
    let (pts_ce, pts_lov) = if pts_targets.is_empty() {
        (0.0, 0.0)
    } else {
        let n = pts_targets.len();
        let mut probs = vec![0.0; class_count * n];
        for (i, col) in pts_probs_cols.iter().enumerate() {
            for c in 0..class_count {
                probs[c * n + i] = col[c];
            }
        }
        let ce = cross_entropy(&pts_logits, class_count, &pts_targets)?.0;
        let lov = lovasz_softmax(&probs, class_count, &pts_targets)?.0;
        (ce, lov)
    };

    // Mask-occ: masked CE of decoded logits against ground truth.
    let (ny, nx, nzv) = fusion.ground_truth.dims();
    let mut occ_logits = Vec::new();
    let mut occ_targets = Vec::new();
    let mut occ_mask = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nzv {
                for c in 0..class_count {
                    occ_logits.push(fusion.logits.at(c, z, y, x));
                }
                occ_targets.push(fusion.ground_truth.label(y, x, z));
                occ_mask.push(match &fusion.visible {
                    Some(v) => *v.get(y, x, z),
                    None => true,
                });
            }
        }
    }
    let mask_occ = masked_cross_entropy(&occ_logits, class_count, &occ_targets, &occ_mask)?.0;

    let components = LossComponents {
        depth,
        seg,
        pts: pts_ce + pts_lov,
        mask_occ,
        distill: kl.report.loss,
    };
    Ok(LossReport {
        components,
        pts_cross_entropy: pts_ce,
        pts_lovasz: pts_lov,
        weights: cfg.loss_weights,
        total: total_loss(&components, &cfg.loss_weights),
    })
}
