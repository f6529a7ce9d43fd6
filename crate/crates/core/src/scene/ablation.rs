//! Toy-scale comparison of an encoder-only depth regressor against the
//! encoder/decoder that receives ground-depth location queries.
//!
//! Every scene holds one object. The head reads the output feature at the
//! object's centroid cell and regresses the disparity encoding of the
//! contact depth, normalized by its value at the near end of the depth range.

use crate::camera::CameraIntrinsics;
use crate::error::SceneError;
use crate::fusion::train::{Adam, AdamConfig};
use crate::fusion::{AttentionMask, FusionModel, FusionParams, HeadExample, MaskMode, ModelConfig, PositionEncoding};
use crate::ground::{encode_disparity_from_depth, GroundPlaneConfig};

use super::{generate_scene, trial_rng, ExperimentConfig, SceneCamera, SyntheticSample, NEAR_FAR_SPLIT};

/// Stream offset separating held-out scenes from training scenes.
const TEST_STREAM: u64 = 1 << 40;
/// Stream used for model initialization.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationSettings {
    pub test_scenes: usize,
    /// Optimizer steps; zero leaves both models at initialization.
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Encoder depth of the baseline. Matching `encoder_layers + decoder_layers`
    /// keeps the two models at the same number of attention/FFN stages.
    pub baseline_layers: usize,
    pub heads: usize,
    pub window_radius: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            test_scenes: 256,
            steps: 1600,
            batch: 8,
            adam: AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() },
            encoder_layers: 1,
            decoder_layers: 1,
            baseline_layers: 2,
            heads: 1,
            window_radius: 8,
        }
    }
}

/// Which network is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Encoder and head only.
    Baseline,
    /// Encoder, decoder with ground-depth queries, head.
    Fused,
    /// Fused architecture with every depth query set to zero.
    ZeroedDepth,
}

/// Mean absolute depth error per bucket, meters. `NaN` for an empty bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketMae {
    pub near: f64,
    pub far: f64,
    pub all: f64,
}

impl BucketMae {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mae = |f: &dyn Fn(f64) -> bool| {
            let errs: Vec<f64> = pairs.iter().filter(|p| f(p.0)).map(|p| (p.1 - p.0).abs()).collect();
            if errs.is_empty() {
                f64::NAN
            } else {
                errs.iter().sum::<f64>() / errs.len() as f64
            }
        };
        Self { near: mae(&|z| z < NEAR_FAR_SPLIT), far: mae(&|z| z >= NEAR_FAR_SPLIT), all: mae(&|_| true) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationReport {
    pub seed: u64,
    pub baseline: BucketMae,
    pub fused: BucketMae,
    /// Ground depth read at the contact cell's center: the best any reader of
    /// the feature-resolution map can do.
    pub oracle: BucketMae,
}

impl ExperimentConfig {
    /// Narrow toy camera whose stride-4 feature map is 4 × 24 cells, with the
    /// level horizon three cells below the top edge. Scenes carry 3° pose
    /// noise and pose-corrected maps, so only the ground-depth queries tell a
    /// model where the horizon actually is.
    pub fn ablation_default() -> Self {
        let camera = SceneCamera {
            intrinsics: CameraIntrinsics { fx: 264.0, fy: 264.0, cx: 8.0, cy: 12.0 },
            width: 16,
            height: 96,
        };
        let kf = camera.intrinsics.downscaled(4.0);
        let ground = GroundPlaneConfig::with_default_stabilizer(1.65, 0.54, &kf).expect("valid ground config");
        Self {
            objects_per_scene: 1,
            depth_range: (8.0, 45.0),
            height_range: (1.0, 1.9),
            width_range: (1.5, 1.9),
            length_range: (3.5, 4.5),
            pose_noise_sigma: 3.0,
            use_pose_correction: true,
            camera,
            ground,
            stride: 4,
            channels: 8,
            ..Self::default()
        }
    }
}

struct Prepared {
    sample: SyntheticSample,
    depth: Vec<f64>,
    readout: (usize, f64),
}

struct Task {
    kf: CameraIntrinsics<f64>,
    scale: f64,
    pe: PositionEncoding<f64>,
    mask: AttentionMask,
}

impl Task {
    fn new(cfg: &ExperimentConfig, settings: &AblationSettings) -> Result<Self, SceneError> {
        let kf = cfg.feature_intrinsics();
        let (ws, hs) = cfg.feature_size();
        let scale = encode_disparity_from_depth(cfg.depth_range.0, &kf, &cfg.ground)?;
        Ok(Self {
            kf,
            scale,
            pe: PositionEncoding::sinusoidal(ws, hs, cfg.channels)?,
            mask: AttentionMask::window(ws, hs, settings.window_radius),
        })
    }

    fn prepare(&self, cfg: &ExperimentConfig, stream: u64, zero_depth: bool) -> Result<Prepared, SceneError> {
        let sample = generate_scene(cfg, &mut trial_rng(cfg.seed, stream))?;
        let depth = if zero_depth {
            vec![0.0; sample.depth_map.encoded().len()]
        } else {
            sample.depth_map.encoded().iter().map(|d| d / self.scale).collect()
        };
        let target = encode_disparity_from_depth(sample.targets[0], &self.kf, &cfg.ground)? / self.scale;
        let readout = (sample.cell_index(sample.centroid_cells[0]), target);
        Ok(Prepared { sample, depth, readout })
    }

    /// Inverts the normalized disparity; non-positive or tiny disparities
    /// saturate at `max_depth`.
    fn depth_of(&self, pred: f64, cfg: &ExperimentConfig) -> f64 {
        let d = pred * self.scale;
        let g = &cfg.ground;
        let num = self.kf.fy * self.kf.fy * g.baseline * g.el;
        if d * cfg.max_depth * (self.kf.fy * g.el + g.stabilizer) <= num {
            cfg.max_depth
        } else {
            num / (d * (self.kf.fy * g.el + g.stabilizer))
        }
    }
}

fn model_config(cfg: &ExperimentConfig, settings: &AblationSettings, variant: Variant) -> ModelConfig {
    ModelConfig {
        channels: cfg.channels,
        heads: settings.heads,
        encoder_layers: if variant == Variant::Baseline { settings.baseline_layers } else { settings.encoder_layers },
        decoder_layers: if variant == Variant::Baseline { 0 } else { settings.decoder_layers },
        window_radius: settings.window_radius,
        mask_mode: MaskMode::Additive,
        ..ModelConfig::default()
    }
}

fn prepare_set(
    task: &Task,
    cfg: &ExperimentConfig,
    offset: u64,
    n: usize,
    zero_depth: bool,
) -> Result<Vec<Prepared>, SceneError> {
    (0..n as u64).map(|i| task.prepare(cfg, offset + i, zero_depth)).collect()
}

/// Trains one variant on freshly generated scenes (`batch` new scenes per
/// step, identical across variants) and returns
/// `(true depth, estimated depth)` for every held-out scene.
pub fn train_variant(
    cfg: &ExperimentConfig,
    settings: &AblationSettings,
    variant: Variant,
) -> Result<Vec<(f64, f64)>, SceneError> {
    cfg.validate()?;
    if cfg.objects_per_scene != 1 {
        return Err(SceneError::InvalidConfig("the ablation uses one object per scene".into()));
    }
    if settings.batch == 0 || settings.test_scenes == 0 {
        return Err(SceneError::InvalidConfig("batch and test scene count must be positive".into()));
    }
    let task = Task::new(cfg, settings)?;
    let zero = variant == Variant::ZeroedDepth;
    let test = prepare_set(&task, cfg, TEST_STREAM, settings.test_scenes, zero)?;

    let mut rng = trial_rng(cfg.seed, INIT_STREAM);
    let mut model = FusionModel::random(model_config(cfg, settings, variant), &mut rng)?;
    let mut adam = Adam::new(settings.adam, &model.params);
    let inv_batch = 1.0 / settings.batch as f64;
    for step in 0..settings.steps {
        // cosine decay to zero over the budget
        let progress = step as f64 / settings.steps as f64;
        adam.set_learning_rate(settings.adam.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut acc = FusionParams::zeros(&model.config);
        for b in 0..settings.batch {
            let ex = task.prepare(cfg, (step * settings.batch + b) as u64, zero)?;
            let head = HeadExample {
                image: &ex.sample.features,
                depth: &ex.depth,
                readouts: std::slice::from_ref(&ex.readout),
            };
            let (_, g) = model.loss_and_gradients(&head, &task.pe, &task.mask)?;
            acc.add_scaled(&g.params, inv_batch);
        }
        adam.step(&mut model.params, &acc);
    }

    test.iter()
        .map(|ex| {
            let trace = model.forward(&ex.sample.features, &ex.depth, &task.pe, &task.mask)?;
            let pred = model.predict(&trace, ex.readout.0);
            Ok((ex.sample.targets[0], task.depth_of(pred, cfg)))
        })
        .collect()
}

/// Contact-row lookup on the held-out scenes: the map's depth at the center
/// of the cell containing the true contact pixel.
pub fn oracle_pairs(cfg: &ExperimentConfig, settings: &AblationSettings) -> Result<Vec<(f64, f64)>, SceneError> {
    cfg.validate()?;
    let task = Task::new(cfg, settings)?;
    prepare_set(&task, cfg, TEST_STREAM, settings.test_scenes, false)?
        .iter()
        .map(|ex| {
            let (col, row) = ex.sample.contact_cells[0];
            let z = ex.sample.depth_map.depth_at(col, row);
            Ok((ex.sample.targets[0], if z > 0.0 { z.min(cfg.max_depth) } else { cfg.max_depth }))
        })
        .collect()
}

/// Trains the encoder-only baseline and the fused model on identical data.
/// With `cfg.use_fusion` off the fused model gets zeroed depth queries.
pub fn run_ablation(cfg: &ExperimentConfig, settings: &AblationSettings) -> Result<AblationReport, SceneError> {
    let fused = if cfg.use_fusion { Variant::Fused } else { Variant::ZeroedDepth };
    Ok(AblationReport {
        seed: cfg.seed,
        baseline: BucketMae::from_pairs(&train_variant(cfg, settings, Variant::Baseline)?),
        fused: BucketMae::from_pairs(&train_variant(cfg, settings, fused)?),
        oracle: BucketMae::from_pairs(&oracle_pairs(cfg, settings)?),
    })
}
