use crate::error::FusionError;
use crate::scalar::Scalar;

use super::tensor::Mat;

/// Flattened `N × C` feature tensor of a `hs × ws` map; pixel `(row, col)` is
/// row `row * ws + col` of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    ws: usize,
    hs: usize,
    data: Mat<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(ws: usize, hs: usize, data: Mat<T>) -> Result<Self, FusionError> {
        if data.rows() != ws * hs {
            return Err(FusionError::DimensionMismatch(format!(
                "{} rows for a {ws}x{hs} map",
                data.rows()
            )));
        }
        if data.data().iter().any(|v| !v.is_finite()) {
            return Err(FusionError::InvalidConfig("feature map has non-finite entries".into()));
        }
        Ok(Self { ws, hs, data })
    }

    pub fn zeros(ws: usize, hs: usize, channels: usize) -> Self {
        Self { ws, hs, data: Mat::zeros(ws * hs, channels) }
    }

    pub fn ws(&self) -> usize {
        self.ws
    }

    pub fn hs(&self) -> usize {
        self.hs
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.ws + col
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.data
    }

    pub fn matrix_mut(&mut self) -> &mut Mat<T> {
        &mut self.data
    }

    pub fn into_matrix(self) -> Mat<T> {
        self.data
    }

    pub(crate) fn from_parts(ws: usize, hs: usize, data: Mat<T>) -> Self {
        Self { ws, hs, data }
    }
}
