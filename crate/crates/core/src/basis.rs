//! Cubic B-spline bases for the temporal log-scale curves.
//!
//! Station and grid curves are always evaluated on the same knot set, so
//! their coefficient vectors are comparable coordinate by coordinate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGREE: usize = 3;

/// Clamped cubic B-spline space on `[t_min, t_max]` with `m` functions and
/// equally spaced interior knots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub m: usize,
    pub t_min: f64,
    pub t_max: f64,
}

/// The (at most) four non-zero basis values at one time point, starting at
/// column `first`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisRow {
    pub first: usize,
    pub w: [f64; 4],
}

impl BasisRow {
    #[inline]
    pub fn dot(&self, coef: &[f64]) -> f64 {
        let c = &coef[self.first..self.first + 4];
        self.w[0] * c[0] + self.w[1] * c[1] + self.w[2] * c[2] + self.w[3] * c[3]
    }
}

impl BasisSpec {
    pub fn new(m: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if m < DEGREE + 1 {
            return Err(Error::Config(format!("basis dimension must be at least 4, got {m}")));
        }
        if !(t_max > t_min) || !t_min.is_finite() || !t_max.is_finite() {
            return Err(Error::Input(format!("invalid basis domain [{t_min}, {t_max}]")));
        }
        Ok(Self { m, t_min, t_max })
    }

    /// Full clamped knot vector (length `m + 4`).
    pub fn knots(&self) -> Vec<f64> {
        let n_interior = self.m - DEGREE - 1;
        let mut k = vec![self.t_min; DEGREE + 1];
        let step = (self.t_max - self.t_min) / (n_interior + 1) as f64;
        k.extend((1..=n_interior).map(|i| self.t_min + step * i as f64));
        k.extend(std::iter::repeat(self.t_max).take(DEGREE + 1));
        k
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }

    pub fn row(&self, t: f64) -> Result<BasisRow> {
        if !self.contains(t) {
            return Err(Error::Input(format!(
                "time {t} outside basis domain [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(self.row_unchecked(&self.knots(), t))
    }

    pub fn rows(&self, times: &[f64]) -> Result<Vec<BasisRow>> {
        let knots = self.knots();
        times
            .iter()
            .map(|&t| {
                if self.contains(t) {
                    Ok(self.row_unchecked(&knots, t))
                } else {
                    Err(Error::Input(format!(
                        "time {t} outside basis domain [{}, {}]",
                        self.t_min, self.t_max
                    )))
                }
            })
            .collect()
    }

    fn row_unchecked(&self, knots: &[f64], t: f64) -> BasisRow {
        // Knot span s with knots[s] <= t < knots[s+1]; the right end uses the
        // last non-degenerate span.
        let span = if t >= self.t_max {
            self.m - 1
        } else {
            let idx = knots.partition_point(|&k| k <= t);
            (idx - 1).clamp(DEGREE, self.m - 1)
        };
        let mut n = [0.0f64; 4];
        let mut left = [0.0f64; 4];
        let mut right = [0.0f64; 4];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        BasisRow { first: span - DEGREE, w: n }
    }
}

/// Basis functions evaluated at a set of time points.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub m: usize,
    pub rows: Vec<BasisRow>,
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = &self.rows[i];
        if j >= r.first && j < r.first + 4 {
            r.w[j - r.first]
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows(), self.m, |i, j| self.get(i, j))
    }

    /// `Phi * coef` for every row.
    pub fn apply(&self, coef: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(coef)).collect()
    }
}

/// Evaluate the basis at `timestamps`, enforcing that every column is
/// supported by at least one time point.
pub fn build_basis(timestamps: &[f64], m: usize, domain: (f64, f64)) -> Result<BasisMatrix> {
    let spec = BasisSpec::new(m, domain.0, domain.1)?;
    let mut distinct: Vec<f64> = timestamps.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if m > distinct.len() {
        return Err(Error::Input(format!(
            "basis dimension {m} exceeds the {} distinct timestamps",
            distinct.len()
        )));
    }
    let rows = spec.rows(timestamps)?;
    let mut support = vec![false; m];
    for r in &rows {
        for (k, w) in r.w.iter().enumerate() {
            if *w > 0.0 {
                support[r.first + k] = true;
            }
        }
    }
    if let Some(col) = support.iter().position(|s| !s) {
        return Err(Error::Input(format!("basis column {col} has no support on the observed times")));
    }
    Ok(BasisMatrix { m, rows })
}

/// Ridge-stabilised least-squares coefficients for `rows * c ≈ values`.
pub fn least_squares(rows: &[BasisRow], values: &[f64], m: usize, ridge: f64) -> Result<Vec<f64>> {
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DVector::<f64>::zeros(m);
    for (r, &v) in rows.iter().zip(values) {
        for a in 0..4 {
            let ia = r.first + a;
            atb[ia] += r.w[a] * v;
            for b in 0..4 {
                ata[(ia, r.first + b)] += r.w[a] * r.w[b];
            }
        }
    }
    for i in 0..m {
        ata[(i, i)] += ridge;
    }
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::Numerical("least-squares normal equations are singular".into()))?;
    Ok(chol.solve(&atb).iter().copied().collect())
}
