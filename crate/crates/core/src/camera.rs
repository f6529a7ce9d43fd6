//! Pinhole camera primitives.
//!
//! Camera frame convention: x right, y down, z forward. Image rows grow
//! downward, so pixels below the principal row (`v > cy`) look at the ground
//! when the camera is level. The ground plane of the level camera is `y = EL`.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::ground::GroundPlaneConfig;
use crate::pose::CameraPose;
use crate::scalar::Scalar;

/// Threshold on the ray's ground-normal component below which a ray is
/// treated as parallel to, or pointing above, the ground plane.
pub const HORIZON_EPS: f64 = 1e-9;

/// Singularity threshold for the displaced-contact denominator.
pub const DISPLACEMENT_EPS: f64 = 1e-9;

/// Pinhole intrinsics `K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    /// Focal length along x, pixels.
    pub fx: T,
    /// Focal length along y, pixels.
    pub fy: T,
    /// Principal-point column, pixels.
    pub cx: T,
    /// Principal-point row, pixels.
    pub cy: T,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite();
        if !finite || self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(GeometryError::InvalidIntrinsics {
                fx: self.fx.as_f64(),
                fy: self.fy.as_f64(),
                cx: self.cx.as_f64(),
                cy: self.cy.as_f64(),
            });
        }
        Ok(())
    }

    /// Intrinsics of an image down-sampled by `stride` (feature-map resolution).
    pub fn downscaled(&self, stride: T) -> Self {
        Self {
            fx: self.fx / stride,
            fy: self.fy / stride,
            cx: self.cx / stride,
            cy: self.cy / stride,
        }
    }

    /// Normalized ray direction through `p`, scaled so that `z = 1`.
    #[inline]
    pub fn ray(&self, p: PixelCoord<T>) -> [T; 3] {
        [(p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, T::one()]
    }
}

/// A point in the camera frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3D<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Point3D<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Real-valued pixel coordinate. Sub-pixel and out-of-frame values are legal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord<T> {
    /// Column.
    pub u: T,
    /// Row.
    pub v: T,
}

impl<T: Scalar> PixelCoord<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }
}

/// Lifts pixel `p` at depth `z` into the camera frame.
#[inline]
pub fn back_project<T: Scalar>(p: PixelCoord<T>, z: T, k: &CameraIntrinsics<T>) -> Point3D<T> {
    Point3D {
        x: (p.u - k.cx) / k.fx * z,
        y: (p.v - k.cy) / k.fy * z,
        z,
    }
}

/// Projects a camera-frame point to the image.
#[inline]
pub fn project<T: Scalar>(p: Point3D<T>, k: &CameraIntrinsics<T>) -> Result<PixelCoord<T>, GeometryError> {
    if !(p.z > T::zero()) {
        return Err(GeometryError::NonPositiveDepth(p.z.as_f64()));
    }
    Ok(PixelCoord {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
    })
}

/// Camera-forward depth at which the ray through `p` meets the ground plane.
///
/// The plane is `{X : n·X = EL}` with `n = A·(0, 1, 0)ᵀ`, the ground normal
/// expressed in the (posed) camera frame. With the identity pose this is
/// exactly `fy·EL / (v − cy)`.
#[inline]
pub fn ray_ground_intersection<T: Scalar>(
    p: PixelCoord<T>,
    k: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    cfg: &GroundPlaneConfig<T>,
) -> Result<T, GeometryError> {
    let n = pose.ground_normal();
    let r = k.ray(p);
    let along = n[0] * r[0] + n[1] * r[1] + n[2] * r[2];
    if !(along > T::lit(HORIZON_EPS)) {
        return Err(GeometryError::RayParallelOrAbove { normal_component: along.as_f64() });
    }
    // r.z == 1, so the ray parameter is the camera-forward depth.
    Ok(cfg.el / along)
}

/// Depth inferred when the ground contact is picked `t_y` rows above the true
/// contact at depth `z_r`: `EL·fy·z_r / (EL·fy − z_r·t_y)`.
pub fn depth_from_displaced_contact<T: Scalar>(
    z_r: T,
    t_y: T,
    k: &CameraIntrinsics<T>,
    cfg: &GroundPlaneConfig<T>,
) -> Result<T, GeometryError> {
    let elf = cfg.el * k.fy;
    let denom = elf - z_r * t_y;
    if denom.abs() < T::lit(DISPLACEMENT_EPS) {
        return Err(GeometryError::DisplacementSingularity { denominator: denom.as_f64() });
    }
    // elf / denom is exactly 1 when t_y = 0, so zero displacement returns z_r bit for bit
    Ok(z_r * (elf / denom))
}
