//! Pose-specific ground depth feature maps.
//!
//! Every pixel is assigned the depth of an imagined infinite ground plane seen
//! through it, then encoded as a virtual-stereo disparity
//! `d = ReLU(fy·B·(v − cy) / (fy·EL + b))` so the map stays continuous across
//! the horizon.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{ray_ground_intersection, CameraIntrinsics, PixelCoord};
use crate::error::GeometryError;
use crate::pose::CameraPose;
use crate::scalar::Scalar;

/// Mean KITTI camera height above the ground, meters.
pub const DEFAULT_ELEVATION: f64 = 1.65;
/// KITTI stereo baseline reused for the virtual stereo encoding, meters.
pub const DEFAULT_BASELINE: f64 = 0.54;
/// Default stabilizer as a fraction of `fy·EL`.
pub const DEFAULT_STABILIZER_FRACTION: f64 = 0.01;
/// Default image-to-feature-map down-sampling factor.
pub const DEFAULT_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlaneConfig<T> {
    /// Camera elevation above the ground, meters.
    pub el: T,
    /// Virtual stereo baseline, meters.
    pub baseline: T,
    /// Stabilizer `b` added to `fy·EL` in the disparity denominator.
    pub stabilizer: T,
}

impl<T: Scalar> GroundPlaneConfig<T> {
    pub fn new(el: T, baseline: T, stabilizer: T) -> Result<Self, GeometryError> {
        if !(el > T::zero() && el.is_finite()) {
            return Err(GeometryError::InvalidGroundConfig(format!("elevation must be > 0, got {el}")));
        }
        if !(baseline > T::zero() && baseline.is_finite()) {
            return Err(GeometryError::InvalidGroundConfig(format!("baseline must be > 0, got {baseline}")));
        }
        if !(stabilizer >= T::zero() && stabilizer.is_finite()) {
            return Err(GeometryError::InvalidGroundConfig(format!(
                "stabilizer must be >= 0, got {stabilizer}"
            )));
        }
        Ok(Self { el, baseline, stabilizer })
    }

    /// Config with `b = 0.01·fy·EL` for the given intrinsics.
    pub fn with_default_stabilizer(el: T, baseline: T, k: &CameraIntrinsics<T>) -> Result<Self, GeometryError> {
        Self::new(el, baseline, default_stabilizer(el, k))
    }
}

pub fn default_stabilizer<T: Scalar>(el: T, k: &CameraIntrinsics<T>) -> T {
    T::lit(DEFAULT_STABILIZER_FRACTION) * k.fy * el
}

/// Virtual-stereo disparity for a pixel `v_offset = v − cy` rows below the
/// principal row of a level camera.
#[inline]
pub fn encode_disparity<T: Scalar>(v_offset: T, k: &CameraIntrinsics<T>, cfg: &GroundPlaneConfig<T>) -> T {
    let d = k.fy * cfg.baseline * v_offset / (k.fy * cfg.el + cfg.stabilizer);
    d.max(T::zero())
}

/// The same encoding written in terms of ground depth `z`, which is what a
/// posed camera produces after the ray/plane intersection.
#[inline]
pub fn encode_disparity_from_depth<T: Scalar>(
    z: T,
    k: &CameraIntrinsics<T>,
    cfg: &GroundPlaneConfig<T>,
) -> Result<T, GeometryError> {
    if !(z > T::zero()) {
        return Err(GeometryError::NonPositiveDepth(z.as_f64()));
    }
    let d = k.fy * k.fy * cfg.baseline * cfg.el / (z * (k.fy * cfg.el + cfg.stabilizer));
    Ok(d.max(T::zero()))
}

/// Dense per-pixel ground depth and its disparity encoding, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundDepthMap<T> {
    width: usize,
    height: usize,
    encoded: Vec<T>,
    depth: Vec<T>,
}

impl<T: Scalar> GroundDepthMap<T> {
    /// Map with every pixel set to "no ground".
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            encoded: vec![T::zero(); width * height],
            depth: vec![T::zero(); width * height],
        }
    }

    /// Map from precomputed grids. Both must hold `width · height` values.
    pub fn from_values(width: usize, height: usize, encoded: Vec<T>, depth: Vec<T>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::ZeroDimension { width, height });
        }
        if encoded.len() != width * height || depth.len() != width * height {
            return Err(GeometryError::InvalidGroundConfig(format!(
                "{}/{} values for a {width}x{height} map",
                encoded.len(),
                depth.len()
            )));
        }
        Ok(Self { width, height, encoded, depth })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn encoded(&self) -> &[T] {
        &self.encoded
    }

    /// Raw ground depth in meters; 0 where the pixel sees no ground.
    pub fn depth(&self) -> &[T] {
        &self.depth
    }

    pub fn encoded_at(&self, col: usize, row: usize) -> T {
        self.encoded[row * self.width + col]
    }

    pub fn depth_at(&self, col: usize, row: usize) -> T {
        self.depth[row * self.width + col]
    }

    /// First row (top to bottom) containing any ground pixel.
    pub fn horizon_row(&self) -> Option<usize> {
        (0..self.height).find(|&r| self.encoded[r * self.width..(r + 1) * self.width].iter().any(|&d| d > T::zero()))
    }

    /// Smallest and largest encoded value.
    pub fn encoded_range(&self) -> (T, T) {
        self.encoded
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &d| (lo.min(d), hi.max(d)))
    }

    /// Writes the encoded grid as CSV, one image row per line, every value in
    /// shortest round-trip decimal form.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write_grid_csv(&mut out, &self.encoded, self.width)
    }

    /// Writes the raw depth grid as CSV in the same layout as [`Self::write_csv`].
    pub fn write_depth_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write_grid_csv(&mut out, &self.depth, self.width)
    }

    /// Writes a binary 16-bit PGM (P5). Encoded values are quantized linearly,
    /// `q = round(clamp(d / d_max, 0, 1) · 65535)`, and `d_max` is recorded in a
    /// `# d_max <value>` header comment. Samples are big-endian as PGM requires.
    pub fn write_pgm<W: Write>(&self, mut out: W, d_max: T) -> io::Result<()> {
        let d_max = d_max.as_f64();
        write!(out, "P5\n# d_max {d_max}\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.encoded.len() * 2);
        for &d in &self.encoded {
            buf.extend_from_slice(&quantize(d.as_f64(), d_max).to_be_bytes());
        }
        out.write_all(&buf)
    }
}

/// 16-bit PGM quantization used by [`GroundDepthMap::write_pgm`].
pub fn quantize(d: f64, d_max: f64) -> u16 {
    if !(d_max > 0.0) {
        return 0;
    }
    ((d / d_max).clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_grid_csv<T: Scalar, W: Write>(out: &mut W, data: &[T], width: usize) -> io::Result<()> {
    for row in data.chunks(width) {
        let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Builds the ground depth map for a `width × height` grid whose pixel centers
/// sit at `(u + 0.5, v + 0.5)`.
pub fn build_map<T: Scalar>(
    width: usize,
    height: usize,
    k: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    cfg: &GroundPlaneConfig<T>,
) -> Result<GroundDepthMap<T>, GeometryError> {
    build_map_chunked(width, height, k, pose, cfg, 16)
}

/// [`build_map`] with an explicit number of rows per parallel work item.
/// Output does not depend on `rows_per_chunk`.
pub fn build_map_chunked<T: Scalar>(
    width: usize,
    height: usize,
    k: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    cfg: &GroundPlaneConfig<T>,
    rows_per_chunk: usize,
) -> Result<GroundDepthMap<T>, GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::ZeroDimension { width, height });
    }
    k.validate()?;
    let mut map = GroundDepthMap::zeros(width, height);
    let chunk = rows_per_chunk.max(1) * width;
    let half = T::lit(0.5);
    map.depth
        .par_chunks_mut(chunk)
        .zip(map.encoded.par_chunks_mut(chunk))
        .enumerate()
        .for_each(|(c, (depth, encoded))| {
            let first_row = c * rows_per_chunk.max(1);
            for (i, (z_out, d_out)) in depth.iter_mut().zip(encoded.iter_mut()).enumerate() {
                let row = first_row + i / width;
                let col = i % width;
                let px = PixelCoord::new(
                    T::from_usize(col).unwrap() + half,
                    T::from_usize(row).unwrap() + half,
                );
                if let Ok(z) = ray_ground_intersection(px, k, pose, cfg) {
                    *z_out = z;
                    *d_out = encode_disparity_from_depth(z, k, cfg).unwrap_or(T::zero());
                }
            }
        });
    Ok(map)
}
