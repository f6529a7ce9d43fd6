use crate::error::FusionError;

/// Binary attention visibility over an `N × N` grid of flattened pixels.
///
/// Pixel `(row, col)` of a `ws × hs` map has index `row * ws + col`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    window_radius: Option<usize>,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Pixels attend to every pixel within Chebyshev distance `radius`.
    pub fn window(ws: usize, hs: usize, radius: usize) -> Self {
        let n = ws * hs;
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            let (ri, ci) = (i / ws, i % ws);
            for j in 0..n {
                let (rj, cj) = (j / ws, j % ws);
                allowed[i * n + j] = ri.abs_diff(rj).max(ci.abs_diff(cj)) <= radius;
            }
        }
        Self { n, window_radius: Some(radius), allowed }
    }

    pub fn full(n: usize) -> Self {
        Self { n, window_radius: None, allowed: vec![true; n * n] }
    }

    /// Explicit mask. Must be symmetric with a full diagonal.
    pub fn from_dense(n: usize, allowed: Vec<bool>) -> Result<Self, FusionError> {
        if allowed.len() != n * n {
            return Err(FusionError::DimensionMismatch(format!(
                "mask has {} entries, expected {}",
                allowed.len(),
                n * n
            )));
        }
        for i in 0..n {
            if !allowed[i * n + i] {
                return Err(FusionError::InvalidConfig(format!("mask diagonal entry {i} is zero")));
            }
            for j in 0..i {
                if allowed[i * n + j] != allowed[j * n + i] {
                    return Err(FusionError::InvalidConfig(format!("mask not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, window_radius: None, allowed })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn window_radius(&self) -> Option<usize> {
        self.window_radius
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// Mask with rows and columns reordered: entry `(p(i), p(j))` of the result
    /// equals entry `(i, j)` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[perm[i] * n + perm[j]] = self.allows(i, j);
            }
        }
        Self { n, window_radius: None, allowed }
    }
}
