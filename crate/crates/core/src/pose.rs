//! Camera pose from horizon and vanishing-point observations.
//!
//! The pose matrix `A` maps ground-aligned directions into the current camera
//! frame and is composed as `A = R_x(pitch) · R_z(roll)` with right-handed
//! rotations. Under this convention a positive pitch raises the horizon:
//! it sits at row `cy − fy·tan(pitch)`.

use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, HORIZON_EPS};
use crate::error::PoseError;
use crate::scalar::Scalar;

pub type Mat3<T> = [[T; 3]; 3];

/// Pitch/roll camera pose and its rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose<T> {
    pitch: T,
    roll: T,
    matrix: Mat3<T>,
}

impl<T: Scalar> CameraPose<T> {
    pub fn identity() -> Self {
        Self::from_angles(T::zero(), T::zero())
    }

    /// Angles in radians.
    pub fn from_angles(pitch: T, roll: T) -> Self {
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let z = T::zero();
        let matrix = [
            [cr, -sr, z],
            [cp * sr, cp * cr, -sp],
            [sp * sr, sp * cr, cp],
        ];
        Self { pitch, roll, matrix }
    }

    pub fn from_degrees(pitch_deg: T, roll_deg: T) -> Self {
        Self::from_angles(pitch_deg.to_radians(), roll_deg.to_radians())
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }

    pub fn roll(&self) -> T {
        self.roll
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.matrix
    }

    /// Ground normal `A·(0,1,0)ᵀ` in the camera frame.
    #[inline]
    pub fn ground_normal(&self) -> [T; 3] {
        [self.matrix[0][1], self.matrix[1][1], self.matrix[2][1]]
    }

    /// Ground-frame forward direction `A·(0,0,1)ᵀ` in the camera frame.
    #[inline]
    pub fn forward(&self) -> [T; 3] {
        [self.matrix[0][2], self.matrix[1][2], self.matrix[2][2]]
    }

    /// Maps a ground-frame vector into the camera frame.
    pub fn rotate(&self, v: [T; 3]) -> [T; 3] {
        let m = &self.matrix;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// `‖AᵀA − I‖∞`.
    pub fn orthonormality_error(&self) -> T {
        let m = &self.matrix;
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let dot = m[0][i] * m[0][j] + m[1][i] * m[1][j] + m[2][i] * m[2][j];
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanishingPoint<T> {
    pub u: T,
    pub v: T,
}

/// Image horizon. `angle` is the inclination measured counter-clockwise as the
/// image is displayed (rows grow downward), so a line with `dv/du = −tan(angle)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonLine<T> {
    pub angle: T,
    pub row_at_cx: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseObservation<T> {
    pub horizon: HorizonLine<T>,
    pub vp: VanishingPoint<T>,
}

/// Maps a horizon/vanishing-point observation to the pose it implies.
///
/// Pitch comes from the vanishing point row and roll from the horizon slope.
/// The slope of the imaged horizon also depends on pitch and on `fx/fy`, which
/// is undone here so this is the exact inverse of [`render_observations`].
pub fn g_map<T: Scalar>(gp: &HorizonLine<T>, vp: &VanishingPoint<T>, k: &CameraIntrinsics<T>) -> CameraPose<T> {
    let pitch = (k.cy - vp.v).atan2(k.fy);
    let normalized_slope = -gp.angle.tan() * k.fx / k.fy;
    let roll = (normalized_slope * pitch.cos()).atan();
    CameraPose::from_angles(pitch, roll)
}

/// Forward model: the horizon and vanishing point a camera with `pose` sees.
pub fn render_observations<T: Scalar>(
    pose: &CameraPose<T>,
    k: &CameraIntrinsics<T>,
) -> Result<(HorizonLine<T>, VanishingPoint<T>), PoseError> {
    let f = pose.forward();
    if !(f[2] > T::lit(HORIZON_EPS)) {
        return Err(PoseError::ForwardDirectionBehindCamera(f[2].as_f64()));
    }
    let vp = VanishingPoint {
        u: k.fx * f[0] / f[2] + k.cx,
        v: k.fy * f[1] / f[2] + k.cy,
    };
    // Horizon in normalized coordinates: n·(x, y, 1) = 0.
    let n = pose.ground_normal();
    let dv_du = -(n[0] / n[1]) * k.fy / k.fx;
    let angle = (-dv_du).atan();
    let row_at_cx = k.cy - k.fy * n[2] / n[1];
    Ok((HorizonLine { angle, row_at_cx }, vp))
}

/// Element-wise L1 distance between the two pose matrices.
pub fn pose_loss<T: Scalar>(predicted: &CameraPose<T>, target: &CameraPose<T>) -> T {
    let mut acc = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            acc += (predicted.matrix[i][j] - target.matrix[i][j]).abs();
        }
    }
    acc
}

pub const FIT_TOLERANCE: f64 = 1e-8;
pub const FIT_MAX_ITERATIONS: usize = 200;
const SEARCH_HALF_WIDTH: f64 = 0.25;

/// Fits the pose that minimizes the mean [`pose_loss`] against `g_map` of every
/// observation. Coordinate descent over pitch and roll, each step a golden
/// section search, starting from the level pose.
pub fn fit_pose<T: Scalar>(
    observations: &[PoseObservation<T>],
    k: &CameraIntrinsics<T>,
) -> Result<CameraPose<T>, PoseError> {
    if observations.is_empty() {
        return Err(PoseError::EmptyObservations);
    }
    let targets: Vec<CameraPose<T>> = observations.iter().map(|o| g_map(&o.horizon, &o.vp, k)).collect();
    let objective = |p: T, r: T| mean_loss(&CameraPose::from_angles(p, r), &targets);

    let half = T::lit(SEARCH_HALF_WIDTH);
    let limit = T::FRAC_PI_2() - T::lit(1e-6);
    let tol = T::lit(FIT_TOLERANCE);
    let (mut pitch, mut roll) = (T::zero(), T::zero());
    // Axis directions first, then the two diagonals: L1 kinks can pin a pure
    // axis search at a non-optimal corner.
    let s = T::FRAC_1_SQRT_2();
    let directions = [(T::one(), T::zero()), (T::zero(), T::one()), (s, s), (s, -s)];
    for _ in 0..FIT_MAX_ITERATIONS {
        let mut moved = T::zero();
        for &(dp, dr) in &directions {
            let f = |t: T| objective(pitch + t * dp, roll + t * dr);
            let t = golden_section(f, -half, half, tol * T::lit(0.01));
            let best = if f(t) < f(T::zero()) { t } else { T::zero() };
            pitch = (pitch + best * dp).max(-limit).min(limit);
            roll = (roll + best * dr).max(-limit).min(limit);
            moved = moved.max(best.abs());
        }
        if moved < tol {
            break;
        }
    }
    Ok(CameraPose::from_angles(pitch, roll))
}

fn mean_loss<T: Scalar>(pose: &CameraPose<T>, targets: &[CameraPose<T>]) -> T {
    let sum: T = targets.iter().map(|t| pose_loss(pose, t)).sum();
    sum / T::from_usize(targets.len()).unwrap()
}

fn golden_section<T: Scalar, F: Fn(T) -> T>(f: F, mut a: T, mut b: T, tol: T) -> T {
    let inv_phi = T::lit(0.618_033_988_749_894_8);
    let mut c = b - (b - a) * inv_phi;
    let mut d = a + (b - a) * inv_phi;
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * inv_phi;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * inv_phi;
            fd = f(d);
        }
    }
    (a + b) * T::lit(0.5)
}
