//! Central finite-difference check of the analytic gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::FusionError;

use super::feature::FeatureMap;
use super::layers::MaskMode;
use super::mask::AttentionMask;
use super::model::{FusionModel, FusionParams, HeadExample, ModelConfig};
use super::posenc::PositionEncoding;
use super::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor. Central differences carry roughly `ε·|loss|/h`
    /// absolute roundoff (~1e-9 here), so gradients below the floor are judged
    /// on absolute error `tolerance · floor`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-4 }
    }
}

/// Worst relative error seen for one parameter class (a tensor name with the
/// layer index stripped, or `input.image` / `input.depth`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: String,
    pub worst_relative_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub classes: Vec<ClassReport>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.classes.iter().all(|c| c.worst_relative_error < tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.classes.iter().map(|c| c.worst_relative_error).fold(0.0, f64::max)
    }

    /// Merges another report, keeping the worst error per class.
    pub fn merge(&mut self, other: &GradCheckReport) {
        let mut by_class: BTreeMap<String, ClassReport> =
            self.classes.drain(..).map(|c| (c.class.clone(), c)).collect();
        for c in &other.classes {
            by_class
                .entry(c.class.clone())
                .and_modify(|e| {
                    e.worst_relative_error = e.worst_relative_error.max(c.worst_relative_error);
                    e.entries += c.entries;
                })
                .or_insert_with(|| c.clone());
        }
        self.classes = by_class.into_values().collect();
    }
}

/// `encoder.1.attn.wq` → `encoder.attn.wq`
pub fn parameter_class(name: &str) -> String {
    name.split('.').filter(|part| part.parse::<usize>().is_err()).collect::<Vec<_>>().join(".")
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Minimum distance of any ReLU input from zero in a generated case.
pub const KINK_MARGIN: f64 = 1e-3;

/// Minimum layer-norm row standard deviation in a generated case.
pub const NORM_MARGIN: f64 = 0.05;

/// A random configuration for the gradient suite.
pub struct GradCase {
    pub model: FusionModel<f64>,
    pub image: FeatureMap<f64>,
    pub depth: Vec<f64>,
    pub readouts: Vec<(usize, f64)>,
    pub pe: PositionEncoding<f64>,
    pub mask: AttentionMask,
}

impl GradCase {
    /// `ws × hs × channels` map, two encoder and two decoder layers, window
    /// radius 1, random norms and biases so every path carries gradient.
    ///
    /// Draws are repeated (deterministically) until no ReLU input lies within
    /// [`KINK_MARGIN`] of zero and no layer-norm row has a standard deviation
    /// below [`NORM_MARGIN`]. With two channels a layer norm is a steep sigmoid
    /// of the channel difference near zero, and the central difference error
    /// (third derivative times `h²`) swamps the comparison there.
    pub fn random(seed: u64, ws: usize, hs: usize, channels: usize, heads: usize, mode: MaskMode) -> Result<Self, FusionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let case = Self::draw(&mut rng, ws, hs, channels, heads, mode)?;
            let trace = case.model.forward(&case.image, &case.depth, &case.pe, &case.mask)?;
            if trace.min_abs_relu_input() > KINK_MARGIN && trace.min_layer_norm_std() > NORM_MARGIN {
                return Ok(case);
            }
        }
    }

    fn draw(
        rng: &mut ChaCha8Rng,
        ws: usize,
        hs: usize,
        channels: usize,
        heads: usize,
        mode: MaskMode,
    ) -> Result<Self, FusionError> {
        let config = ModelConfig {
            channels,
            heads,
            encoder_layers: 2,
            decoder_layers: 2,
            window_radius: 1,
            mask_mode: mode,
            ..ModelConfig::default()
        };
        let mut params = FusionParams::random(&config, rng);
        params.for_each_tensor_mut(|name, t| {
            if name.ends_with(".gamma") {
                t.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            } else if name.ends_with(".beta") || name.ends_with("bias") {
                t.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        });
        let model = FusionModel::new(config, params)?;
        let n = ws * hs;
        let image = FeatureMap::new(ws, hs, Mat::from_fn(n, channels, |_, _| rng.gen_range(-1.0..1.0)))?;
        let depth = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let readouts = (0..3).map(|_| (rng.gen_range(0..n), rng.gen_range(-1.0..1.0))).collect();
        Ok(Self {
            model,
            image,
            depth,
            readouts,
            pe: PositionEncoding::sinusoidal(ws, hs, channels)?,
            mask: AttentionMask::window(ws, hs, 1),
        })
    }

    fn example(&self) -> HeadExample<'_, f64> {
        HeadExample { image: &self.image, depth: &self.depth, readouts: &self.readouts }
    }

    /// Compares every analytic gradient entry against a central difference.
    /// `corrupt` names a parameter class whose analytic gradient is
    /// deliberately perturbed (negative control).
    pub fn check(&self, cfg: &GradCheckConfig, corrupt: Option<&str>) -> Result<GradCheckReport, FusionError> {
        let (_, mut grads) = self.model.loss_and_gradients(&self.example(), &self.pe, &self.mask)?;
        if let Some(target) = corrupt {
            let mut done = false;
            grads.params.for_each_tensor_mut(|name, t| {
                if !done && parameter_class(&name) == target && !t.is_empty() {
                    t[0] = t[0] * 1.01 + 1e-3;
                    done = true;
                }
            });
            if !done {
                return Err(FusionError::InvalidConfig(format!("no parameter class {target:?} to corrupt")));
            }
        }

        let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut record = |class: String, rel: f64| {
            let e = worst.entry(class).or_insert((0.0, 0));
            e.0 = e.0.max(rel);
            e.1 += 1;
        };

        let mut analytic = Vec::new();
        grads.params.for_each_tensor(|name, t| analytic.push((name, t.to_vec())));
        let h = cfg.step;
        for (name, values) in &analytic {
            for (idx, &a) in values.iter().enumerate() {
                let numeric = self.central_difference(h, |m, delta| {
                    m.params.for_each_tensor_mut(|n, t| {
                        if n == *name {
                            t[idx] += delta;
                        }
                    })
                })?;
                record(parameter_class(name), relative_error(a, numeric, cfg.floor));
            }
        }

        for idx in 0..self.image.matrix().data().len() {
            let mut image = self.image.clone();
            image.matrix_mut().data_mut()[idx] += h;
            let plus = self.model.loss(&HeadExample { image: &image, ..self.example() }, &self.pe, &self.mask)?;
            image.matrix_mut().data_mut()[idx] -= 2.0 * h;
            let minus = self.model.loss(&HeadExample { image: &image, ..self.example() }, &self.pe, &self.mask)?;
            let numeric = (plus - minus) / (2.0 * h);
            record("input.image".into(), relative_error(grads.image.data()[idx], numeric, cfg.floor));
        }

        for idx in 0..self.depth.len() {
            let mut depth = self.depth.clone();
            depth[idx] += h;
            let plus = self.model.loss(&HeadExample { depth: &depth, ..self.example() }, &self.pe, &self.mask)?;
            depth[idx] -= 2.0 * h;
            let minus = self.model.loss(&HeadExample { depth: &depth, ..self.example() }, &self.pe, &self.mask)?;
            let numeric = (plus - minus) / (2.0 * h);
            record("input.depth".into(), relative_error(grads.depth[idx], numeric, cfg.floor));
        }

        Ok(GradCheckReport {
            classes: worst
                .into_iter()
                .map(|(class, (w, entries))| ClassReport { class, worst_relative_error: w, entries })
                .collect(),
        })
    }

    fn central_difference(
        &self,
        h: f64,
        perturb: impl Fn(&mut FusionModel<f64>, f64),
    ) -> Result<f64, FusionError> {
        let mut model = self.model.clone();
        perturb(&mut model, h);
        let plus = model.loss(&self.example(), &self.pe, &self.mask)?;
        perturb(&mut model, -2.0 * h);
        let minus = model.loss(&self.example(), &self.pe, &self.mask)?;
        Ok((plus - minus) / (2.0 * h))
    }
}

/// Runs `configs` random 4×4×2 cases, alternating head count (1, 2) and mask
/// mode, and merges their reports.
pub fn run_suite(seed: u64, configs: usize, cfg: &GradCheckConfig, corrupt: Option<&str>) -> Result<GradCheckReport, FusionError> {
    let mut report = GradCheckReport::default();
    for i in 0..configs {
        let heads = if i % 2 == 0 { 1 } else { 2 };
        let mode = if (i / 2) % 2 == 0 { MaskMode::Renormalize } else { MaskMode::Additive };
        let case = GradCase::random(seed.wrapping_add(i as u64), 4, 4, 2, heads, mode)?;
        report.merge(&case.check(cfg, corrupt)?);
    }
    Ok(report)
}
