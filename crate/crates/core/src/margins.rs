//! Pseudo-observations, marginal estimators and the joint density
//! `h(x) = c(F_1(x_1), ..., F_D(x_D)) * f_1(x_1) * ... * f_D(x_D)`.

use crate::copula::CopulaModel;
use crate::error::{Error, Result};

/// `N` points in the unit hypercube, row-major `N x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    dim: usize,
    values: Vec<f64>,
}

impl PseudoSample {
    /// Wraps points that are already on the copula scale, e.g. true uniform
    /// scores from a simulation.
    pub fn from_unit_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            for (axis, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: t, col: axis });
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::OutOfUnitInterval { axis, value: v });
                }
            }
            values.extend_from_slice(row);
        }
        Ok(Self { dim, values })
    }

    pub(crate) fn from_flat(dim: usize, values: Vec<f64>) -> Self {
        debug_assert!(dim > 0 && values.len() % dim == 0);
        Self { dim, values }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    /// Values of one axis.
    pub fn axis(&self, j: usize) -> Vec<f64> {
        self.points().map(|p| p[j]).collect()
    }

    /// The subset of points with the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &t in indices {
            values.extend_from_slice(self.point(t));
        }
        Self {
            dim: self.dim,
            values,
        }
    }
}

fn check_matrix(data: &[Vec<f64>]) -> Result<usize> {
    let dim = data.first().map_or(0, Vec::len);
    for (row, r) in data.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        if let Some(col) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(dim)
}

/// Rank-rescaled scores `u_t = #{s : x_s <= x_t} / (N + 1)` per axis.
///
/// Tied values share the largest rank of their block.
pub fn pseudo_observations(data: &[Vec<f64>]) -> Result<PseudoSample> {
    let dim = check_matrix(data)?;
    if data.len() < 2 {
        return Err(Error::TooFewObservations {
            needed: 2,
            got: data.len(),
        });
    }
    let n = data.len();
    let scale = 1.0 / (n as f64 + 1.0);
    let mut values = vec![0.0; n * dim];
    for j in 0..dim {
        let mut sorted: Vec<f64> = data.iter().map(|r| r[j]).collect();
        sorted.sort_by(f64::total_cmp);
        for (t, row) in data.iter().enumerate() {
            let rank = sorted.partition_point(|&s| s <= row[j]);
            values[t * dim + j] = rank as f64 * scale;
        }
    }
    Ok(PseudoSample::from_flat(dim, values))
}

/// One margin: rescaled empirical distribution function and a Gaussian
/// kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalModel {
    sample: Vec<f64>,
    bandwidth: f64,
}

impl MarginalModel {
    /// Uses Silverman's rule `1.06 * min(sd, IQR / 1.34) * N^(-1/5)`.
    pub fn new(sample: &[f64]) -> Result<Self> {
        if sample.len() < 2 {
            return Err(Error::TooFewObservations {
                needed: 2,
                got: sample.len(),
            });
        }
        if let Some(row) = sample.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row, col: 0 });
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if sd <= 0.0 || !sd.is_finite() {
            return Err(Error::ZeroVariance);
        }
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let bandwidth = 1.06 * spread * n.powf(-0.2);
        Ok(Self {
            sample: sorted,
            bandwidth,
        })
    }

    pub fn with_bandwidth(sample: &[f64], bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth {bandwidth} must be positive"
            )));
        }
        let mut model = Self::new(sample)?;
        model.bandwidth = bandwidth;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn sorted_sample(&self) -> &[f64] {
        &self.sample
    }

    /// `F(x) = #{x_t <= x} / (N + 1)`.
    pub fn ecdf(&self, x: f64) -> f64 {
        self.sample.partition_point(|&s| s <= x) as f64 / (self.sample.len() as f64 + 1.0)
    }

    pub fn kde(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self.sample.iter().map(|&xi| normal_pdf((x - xi) / h)).sum();
        s / (self.sample.len() as f64 * h)
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Joint density `c(F_1(x_1), ...) * prod f_j(x_j)` from a copula and margins.
pub fn joint_density(model: &CopulaModel, margins: &[MarginalModel], point: &[f64]) -> Result<f64> {
    if margins.len() != model.ndim() {
        return Err(Error::DimensionMismatch {
            expected: model.ndim(),
            got: margins.len(),
        });
    }
    if point.len() != model.ndim() {
        return Err(Error::DimensionMismatch {
            expected: model.ndim(),
            got: point.len(),
        });
    }
    let u: Vec<f64> = margins.iter().zip(point).map(|(m, &x)| m.ecdf(x)).collect();
    let c = model.density(&u)?;
    Ok(margins
        .iter()
        .zip(point)
        .fold(c, |acc, (m, &x)| acc * m.kde(x)))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation followed by
/// one Newton step on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    let density = normal_pdf(x);
    if density > 0.0 {
        Ok(x - (normal_cdf(x) - p) / density)
    } else {
        Ok(x)
    }
}
