use crate::error::FusionError;
use crate::scalar::Scalar;

use super::tensor::Mat;

const TEMPERATURE: f64 = 10000.0;

/// Fixed 2D sinusoidal position encoding.
///
/// The first `C/2` channels encode the column and the last `C/2` the row.
/// Within an axis, channel `j` uses frequency `TEMPERATURE^(-2⌊j/2⌋/(C/2))`
/// on the position normalized to `(idx + 0.5) / len · 2π`, sine for even `j`
/// and cosine for odd `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEncoding<T> {
    ws: usize,
    hs: usize,
    data: Mat<T>,
}

impl<T: Scalar> PositionEncoding<T> {
    pub fn sinusoidal(ws: usize, hs: usize, channels: usize) -> Result<Self, FusionError> {
        if channels == 0 || channels % 2 != 0 {
            return Err(FusionError::InvalidConfig(format!(
                "position encoding needs an even channel count, got {channels}"
            )));
        }
        let per_axis = channels / 2;
        let two_pi = std::f64::consts::TAU;
        let data = Mat::from_fn(ws * hs, channels, |i, c| {
            let (row, col) = (i / ws, i % ws);
            let (pos, len, j) = if c < per_axis { (col, ws, c) } else { (row, hs, c - per_axis) };
            let p = (pos as f64 + 0.5) / len as f64 * two_pi;
            let freq = TEMPERATURE.powf(-2.0 * (j / 2) as f64 / per_axis as f64);
            let v = if j % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() };
            T::lit(v)
        });
        Ok(Self { ws, hs, data })
    }

    /// All-zero encoding, useful to switch positional information off.
    pub fn zeros(ws: usize, hs: usize, channels: usize) -> Self {
        Self { ws, hs, data: Mat::zeros(ws * hs, channels) }
    }

    pub fn ws(&self) -> usize {
        self.ws
    }

    pub fn hs(&self) -> usize {
        self.hs
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.data
    }

    /// Rows reordered so row `perm[i]` of the result is row `i` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Mat::zeros(self.data.rows(), self.data.cols());
        for (i, &p) in perm.iter().enumerate() {
            data.row_mut(p).copy_from_slice(self.data.row(i));
        }
        Self { ws: self.ws, hs: self.hs, data }
    }
}
