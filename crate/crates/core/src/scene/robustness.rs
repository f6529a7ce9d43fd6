//! Depth error of ground-contact reads under camera pose noise.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::SceneError;
use crate::pose::{fit_pose, render_observations, CameraPose, HorizonLine, PoseObservation, VanishingPoint};

use super::{read_ground_depth, sample_layout, sample_pose_noise, trial_rng, ContactView, ExperimentConfig};

/// Pose used to build the corrected map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PoseSource {
    /// The pose the scene was rendered with.
    #[default]
    True,
    /// [`fit_pose`] on `observations` horizon/vanishing-point pairs, each
    /// perturbed by uniform noise of `noise_px` pixels.
    Fitted { observations: usize, noise_px: f64 },
}

/// One row of the per-trial CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub sigma_deg: f64,
    pub trial: usize,
    pub object_id: usize,
    pub true_depth_m: f64,
    pub est_depth_m: f64,
    pub corrected: bool,
}

impl TrialRecord {
    pub fn abs_err(&self) -> f64 {
        (self.est_depth_m - self.true_depth_m).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSummary {
    pub sigma_deg: f64,
    pub objects: usize,
    pub uncorrected_mae: f64,
    pub uncorrected_sd: f64,
    /// `None` when pose correction is off.
    pub corrected_mae: Option<f64>,
    pub corrected_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<SigmaSummary>,
}

pub const TRIAL_HEADER: &str = "sigma_deg,trial,object_id,true_depth_m,est_depth_m,abs_err_m,corrected";
pub const SUMMARY_HEADER: &str =
    "sigma_deg,objects,uncorrected_mae_m,uncorrected_sd_m,corrected_mae_m,corrected_sd_m";

impl RobustnessReport {
    /// Uncorrected error strictly increases along the configured σ order.
    pub fn uncorrected_strictly_increasing(&self) -> bool {
        self.summary.windows(2).all(|w| w[0].uncorrected_mae < w[1].uncorrected_mae)
    }

    pub fn write_trials_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{TRIAL_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.sigma_deg,
                r.trial,
                r.object_id,
                r.true_depth_m,
                r.est_depth_m,
                r.abs_err(),
                u8::from(r.corrected)
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{SUMMARY_HEADER}")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.summary {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.sigma_deg,
                s.objects,
                s.uncorrected_mae,
                s.uncorrected_sd,
                opt(s.corrected_mae),
                opt(s.corrected_sd)
            )?;
        }
        Ok(())
    }
}

fn mean_sd(errs: &[f64]) -> (f64, f64) {
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fitted_pose<R: Rng>(
    pose: &CameraPose<f64>,
    cfg: &ExperimentConfig,
    observations: usize,
    noise_px: f64,
    rng: &mut R,
) -> Result<CameraPose<f64>, SceneError> {
    let k = &cfg.camera.intrinsics;
    let (gp, vp) = render_observations(pose, k)?;
    let half_width = cfg.camera.width as f64 / 2.0;
    let mut jitter = |scale: f64| if noise_px > 0.0 { rng.gen_range(-noise_px..noise_px) * scale } else { 0.0 };
    let obs: Vec<PoseObservation<f64>> = (0..observations)
        .map(|_| PoseObservation {
            horizon: HorizonLine { angle: gp.angle + jitter(1.0 / half_width), row_at_cx: gp.row_at_cx + jitter(1.0) },
            vp: VanishingPoint { u: vp.u + jitter(1.0), v: vp.v + jitter(1.0) },
        })
        .collect();
    Ok(fit_pose(&obs, k)?)
}

fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<TrialRecord>, SceneError> {
    let mut rng = trial_rng(cfg.seed, trial as u64);
    let objects = sample_layout(cfg, &mut rng)?;
    let (xp, xr) = sample_pose_noise(&mut rng);
    let k = &cfg.camera.intrinsics;
    let level = CameraPose::identity();
    let mut out = Vec::new();
    for &sigma in &cfg.sigmas {
        let pose = CameraPose::from_degrees(sigma * xp, sigma * xr);
        let correction = match (cfg.use_pose_correction, cfg.pose_source) {
            (false, _) => None,
            (true, PoseSource::True) => Some(pose),
            (true, PoseSource::Fitted { observations, noise_px }) => {
                Some(fitted_pose(&pose, cfg, observations, noise_px, &mut rng)?)
            }
        };
        for (object_id, obj) in objects.iter().enumerate() {
            let view = ContactView::new(obj, k, &pose)?;
            let est = read_ground_depth(view.pixel, k, &level, &cfg.ground, cfg.max_depth)?;
            let record = |est_depth_m, corrected| TrialRecord {
                sigma_deg: sigma,
                trial,
                object_id,
                true_depth_m: view.depth(),
                est_depth_m,
                corrected,
            };
            out.push(record(est, false));
            if let Some(p) = &correction {
                let est = read_ground_depth(view.pixel, k, p, &cfg.ground, cfg.max_depth)?;
                out.push(record(est, true));
            }
        }
    }
    Ok(out)
}

/// Reads every object's depth at its exact contact pixel from the level-pose
/// ground field (uncorrected) and, when pose correction is on, from the field
/// of the true or fitted pose (corrected).
///
/// Each trial draws one layout and one standard-normal `(ξ_pitch, ξ_roll)`
/// pair; noise level σ uses the pose `(σ·ξ_pitch, σ·ξ_roll)` degrees, so all
/// σ share the same random numbers. Trials run in parallel on independent
/// streams.
pub fn run_robustness(cfg: &ExperimentConfig) -> Result<RobustnessReport, SceneError> {
    cfg.validate()?;
    if cfg.sigmas.is_empty() {
        return Err(SceneError::InvalidConfig("no sigma values".into()));
    }
    let per_trial: Vec<Vec<TrialRecord>> =
        (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect::<Result<_, _>>()?;
    let mut records: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();
    records.sort_by(|a, b| {
        let key = |r: &TrialRecord| (cfg.sigmas.iter().position(|&s| s == r.sigma_deg), r.trial, r.object_id, r.corrected);
        key(a).cmp(&key(b))
    });
    let summary = cfg
        .sigmas
        .iter()
        .map(|&sigma| {
            let errs = |corrected: bool| -> Vec<f64> {
                records
                    .iter()
                    .filter(|r| r.sigma_deg == sigma && r.corrected == corrected)
                    .map(TrialRecord::abs_err)
                    .collect()
            };
            let unc = errs(false);
            let (uncorrected_mae, uncorrected_sd) = mean_sd(&unc);
            let cor = errs(true);
            let (corrected_mae, corrected_sd) = if cor.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_sd(&cor);
                (Some(m), Some(s))
            };
            SigmaSummary { sigma_deg: sigma, objects: unc.len(), uncorrected_mae, uncorrected_sd, corrected_mae, corrected_sd }
        })
        .collect();
    Ok(RobustnessReport { records, summary })
}
