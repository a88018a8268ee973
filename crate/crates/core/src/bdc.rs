//! Brownian distance covariance.
//!
//! A feature vector is viewed as a set of observations (rows of a square
//! reshape), turned into its Euclidean distance matrix, double-centered, and
//! compared with another such matrix through dCov², the mean of the
//! element-wise product.

use crate::error::{Result, TataError};
use crate::exec::Execution;
use crate::numerics::Embedding;

/// `rows` observations of `cols` coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ObservationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(TataError::TooFewPoints {
                needed: 2,
                got: rows,
            });
        }
        if cols == 0 || data.len() != rows * cols {
            return Err(TataError::DimensionMismatch {
                expected: rows * cols.max(1),
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TataError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TataError::Parse("ragged observation rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// A dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(TataError::DimensionMismatch {
                expected: n * n,
                actual: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Double-centered distance matrix of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BdcMatrix {
    inner: SquareMatrix,
}

impl BdcMatrix {
    /// Observation count (the matrix side).
    pub fn n(&self) -> usize {
        self.inner.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.inner.data
    }

    /// Largest absolute row or column sum; zero up to rounding.
    pub fn max_abs_margin(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| self.get(i, j)).sum();
            let col: f64 = (0..n).map(|j| self.get(j, i)).sum();
            worst = worst.max(row.abs()).max(col.abs());
        }
        worst
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Zero-pads to the next perfect square `s*s >= D` and reshapes row-major to `s x s`.
pub fn reshape_to_observations(v: &Embedding) -> Result<ObservationMatrix> {
    let d = v.dim();
    if d < 4 {
        return Err(TataError::DimensionTooSmall(d));
    }
    let mut side = (d as f64).sqrt() as usize;
    while side * side < d {
        side += 1;
    }
    while side > 0 && (side - 1) * (side - 1) >= d {
        side -= 1;
    }
    let mut data = v.as_slice().to_vec();
    data.resize(side * side, 0.0);
    ObservationMatrix::new(side, side, data)
}

pub fn pairwise_distance_matrix(m: &ObservationMatrix) -> SquareMatrix {
    let n = m.rows;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let ri = m.row(i);
        for j in (i + 1)..n {
            let d = ri
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    SquareMatrix { n, data }
}

/// `a_ij - rowmean_i - colmean_j + grandmean`.
pub fn double_center(a: &SquareMatrix) -> BdcMatrix {
    let n = a.n;
    let inv = 1.0 / n as f64;
    let row_means: Vec<f64> = (0..n)
        .map(|i| a.data[i * n..(i + 1) * n].iter().sum::<f64>() * inv)
        .collect();
    let col_means: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| a.data[i * n + j]).sum::<f64>() * inv)
        .collect();
    let grand = row_means.iter().sum::<f64>() * inv;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = a.data[i * n + j] - row_means[i] - col_means[j] + grand;
        }
    }
    BdcMatrix {
        inner: SquareMatrix { n, data },
    }
}

/// `(1/n²) Σ_ij A_ij B_ij`, with tiny negative rounding clamped to zero.
pub fn dcov2(a: &BdcMatrix, b: &BdcMatrix) -> Result<f64> {
    if a.n() != b.n() {
        return Err(TataError::SizeMismatch(a.n(), b.n()));
    }
    let n = a.n() as f64;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum();
    let value = sum / (n * n);
    Ok(if value < 0.0 && value > -1e-12 {
        0.0
    } else {
        value
    })
}

pub fn bdc_from_observations(m: &ObservationMatrix) -> BdcMatrix {
    double_center(&pairwise_distance_matrix(m))
}

pub fn bdc_matrix(v: &Embedding) -> Result<BdcMatrix> {
    Ok(bdc_from_observations(&reshape_to_observations(v)?))
}

/// dCov² of `query` against each prototype, in prototype order.
pub fn dcov2_against(
    query: &BdcMatrix,
    prototypes: &[&BdcMatrix],
    exec: Execution,
) -> Result<Vec<f64>> {
    exec.map(prototypes, |p| dcov2(query, p))
        .into_iter()
        .collect()
}
