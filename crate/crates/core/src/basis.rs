//! Clamped, equally spaced B-spline systems on `[0, 1]`.
//!
//! A [`BasisSystem`] of degree `d` and count `m` uses `p = m - d` equal knot
//! intervals, with the boundary knots repeated `d + 1` times. Each basis
//! function `N_k` is normalized by its integral `q_k` into a probability
//! density `phi_k = N_k / q_k` on `[0, 1]`, whose distribution function is
//! `Phi_k`. With `m = d + 1` there are no interior knots and the system is
//! the Bernstein basis of degree `d`.
//!
//! Basis indices are 0-based throughout.

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Largest supported polynomial degree.
pub const MAX_DEGREE: usize = 30;

#[derive(Debug, Clone)]
pub struct BasisSystem {
    degree: usize,
    count: usize,
    knots: Vec<f64>,
    weights: Vec<f64>,
    rule: GaussLegendre,
    /// `cumulative[k * (p + 1) + i]` is the integral of `N_k` over `[0, i / p]`.
    cumulative: Vec<f64>,
}

impl BasisSystem {
    /// Builds the clamped uniform system with `count - degree` knot intervals.
    ///
    /// Degree 0 gives the piecewise-constant (histogram) system.
    pub fn uniform(degree: usize, count: usize) -> Result<Self> {
        if degree > MAX_DEGREE || count < degree + 1 {
            return Err(Error::InvalidBasis { degree, count });
        }
        let intervals = count - degree;
        let mut knots = Vec::with_capacity(count + degree + 1);
        knots.extend(std::iter::repeat_n(0.0, degree));
        for i in 0..=intervals {
            knots.push(i as f64 / intervals as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, degree));
        debug_assert_eq!(knots.len(), count + degree + 1);

        let weights = closed_form_integrals(&knots, degree, count);
        let mut sys = Self {
            degree,
            count,
            knots,
            weights,
            rule: GaussLegendre::new(degree + 2),
            cumulative: Vec::new(),
        };
        sys.cumulative = sys.interval_cumulative();
        Ok(sys)
    }

    /// Bernstein system of the given degree (no interior knots).
    pub fn bernstein(degree: usize) -> Result<Self> {
        Self::uniform(degree, degree + 1)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Number of knot intervals `p`.
    pub fn intervals(&self) -> usize {
        self.count - self.degree
    }

    pub fn interior_knot_count(&self) -> usize {
        self.intervals() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Integrals `q_k` of the unnormalized basis functions; they sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Knot interval containing `x`, with `x = 1` assigned to the last one.
    pub fn interval_of(&self, x: f64) -> usize {
        let p = self.intervals();
        if x <= 0.0 {
            return 0;
        }
        let i = (x * p as f64).floor() as usize;
        // Guard against `i / p` rounding above `x`.
        let i = i.min(p - 1);
        if i > 0 && x < self.knots[self.degree + i] {
            i - 1
        } else if i + 1 < p && x >= self.knots[self.degree + i + 1] {
            i + 1
        } else {
            i
        }
    }

    /// Evaluates the `degree + 1` basis functions that may be nonzero at `x`.
    ///
    /// Writes them into `out[..=degree]` and returns the index of the first.
    /// This is the triangular form of the Cox–de Boor recurrence.
    pub fn eval_active(&self, x: f64, out: &mut [f64]) -> usize {
        let interval = self.interval_of(x);
        self.eval_in_interval(interval, x, out);
        interval
    }

    fn eval_in_interval(&self, interval: usize, x: f64, out: &mut [f64]) {
        let d = self.degree;
        let span = interval + d;
        let t = &self.knots;
        let mut left = [0.0f64; MAX_DEGREE + 1];
        let mut right = [0.0f64; MAX_DEGREE + 1];
        out[0] = 1.0;
        for j in 1..=d {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// All `count` basis values at `x`.
    pub fn eval_all(&self, x: f64) -> Vec<f64> {
        let mut active = vec![0.0; self.degree + 1];
        let first = self.eval_active(x, &mut active);
        let mut all = vec![0.0; self.count];
        all[first..first + self.degree + 1].copy_from_slice(&active);
        all
    }

    /// Value of basis function `k` at `x`.
    pub fn eval(&self, k: usize, x: f64) -> Result<f64> {
        self.check_index(k)?;
        let mut active = vec![0.0; self.degree + 1];
        let first = self.eval_active(x, &mut active);
        Ok(if (first..=first + self.degree).contains(&k) {
            active[k - first]
        } else {
            0.0
        })
    }

    /// Normalized density `phi_k(x) = N_k(x) / q_k`.
    pub fn phi(&self, k: usize, x: f64) -> Result<f64> {
        Ok(self.eval(k, x)? / self.weights[k])
    }

    /// Active normalized densities at `x`; same layout as [`Self::eval_active`].
    pub fn phi_active(&self, x: f64, out: &mut [f64]) -> usize {
        let first = self.eval_active(x, out);
        for (v, q) in out[..=self.degree].iter_mut().zip(&self.weights[first..]) {
            *v /= q;
        }
        first
    }

    /// All `count` normalized densities at `x`.
    pub fn phi_all(&self, x: f64) -> Vec<f64> {
        self.eval_all(x)
            .into_iter()
            .zip(&self.weights)
            .map(|(n, q)| n / q)
            .collect()
    }

    /// Distribution function `Phi_k(x)` of the normalized density `phi_k`.
    pub fn cdf(&self, k: usize, x: f64) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.cdf_all(x)[k])
    }

    /// `Phi_k(x)` for every `k`.
    pub fn cdf_all(&self, x: f64) -> Vec<f64> {
        let m = self.count;
        let d = self.degree;
        if x <= 0.0 {
            return vec![0.0; m];
        }
        if x >= 1.0 {
            return vec![1.0; m];
        }
        let interval = self.interval_of(x);
        let p = self.intervals();
        let a = self.knots[d + interval];
        let mut partial = vec![0.0; d + 1];
        let mut scratch = vec![0.0; d + 1];
        for (node, w) in self.rule.mapped(a, x) {
            self.eval_in_interval(interval, node, &mut scratch);
            for (acc, v) in partial.iter_mut().zip(&scratch) {
                *acc += w * v;
            }
        }
        (0..m)
            .map(|k| {
                if k < interval {
                    1.0
                } else if k > interval + d {
                    0.0
                } else {
                    let below = self.cumulative[k * (p + 1) + interval];
                    let value = (below + partial[k - interval]) / self.weights[k];
                    value.clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    /// Integrals `q_k` recomputed by per-interval Gauss–Legendre quadrature.
    pub fn quadrature_integrals(&self) -> Vec<f64> {
        let p = self.intervals();
        (0..self.count)
            .map(|k| self.cumulative[k * (p + 1) + p])
            .collect()
    }

    fn interval_cumulative(&self) -> Vec<f64> {
        let p = self.intervals();
        let d = self.degree;
        let mut cumulative = vec![0.0; self.count * (p + 1)];
        let mut scratch = vec![0.0; d + 1];
        for i in 0..p {
            let (a, b) = (self.knots[d + i], self.knots[d + i + 1]);
            let mut local = vec![0.0; d + 1];
            for (node, w) in self.rule.mapped(a, b) {
                self.eval_in_interval(i, node, &mut scratch);
                for (acc, v) in local.iter_mut().zip(&scratch) {
                    *acc += w * v;
                }
            }
            for k in 0..self.count {
                let prev = cumulative[k * (p + 1) + i];
                let add = if (i..=i + d).contains(&k) {
                    local[k - i]
                } else {
                    0.0
                };
                cumulative[k * (p + 1) + i + 1] = prev + add;
            }
        }
        cumulative
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k >= self.count {
            Err(Error::IndexOutOfRange {
                index: k,
                count: self.count,
            })
        } else {
            Ok(())
        }
    }
}

impl PartialEq for BasisSystem {
    fn eq(&self, other: &Self) -> bool {
        self.degree == other.degree && self.count == other.count
    }
}

/// `q_k = (t_{k+d+1} - t_k) / (d + 1)`, the integral of a B-spline over its support.
fn closed_form_integrals(knots: &[f64], degree: usize, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| (knots[k + degree + 1] - knots[k]) / (degree as f64 + 1.0))
        .collect()
}
