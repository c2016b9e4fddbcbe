//! Cross-validation over the SCAD tuning pair and the basis sizes, the
//! pseudo-AIC, and estimation error against a known truth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::copula::{CopulaModel, ParamTensor};
use crate::em::{fit_nd, FitConfig, ScadParams};
use crate::error::{Error, Result};
use crate::margins::PseudoSample;
use crate::par::par_map;

/// How raw data reach the copula scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PseudoMode {
    /// Rescaled ranks `#{x_s <= x} / (N + 1)`.
    #[default]
    Rank,
    /// Data are already uniform scores.
    Identity,
}

impl PseudoMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rank" => Some(Self::Rank),
            "identity" => Some(Self::Identity),
            _ => None,
        }
    }
}

/// Rescaled empirical distribution functions of a reference sample.
struct Ecdfs {
    sorted: Vec<Vec<f64>>,
}

impl Ecdfs {
    fn new(rows: &[&[f64]], dim: usize) -> Self {
        let sorted = (0..dim)
            .map(|j| {
                let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                col.sort_by(f64::total_cmp);
                col
            })
            .collect();
        Self { sorted }
    }

    fn transform(&self, rows: &[&[f64]]) -> PseudoSample {
        let dim = self.sorted.len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            for (j, col) in self.sorted.iter().enumerate() {
                let rank = col.partition_point(|&s| s <= r[j]);
                values.push(rank as f64 / (col.len() as f64 + 1.0));
            }
        }
        PseudoSample::from_flat(dim, values)
    }
}

/// Validated data with a fixed transform to the copula scale.
#[derive(Debug, Clone)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
    mode: PseudoMode,
}

impl Dataset {
    pub fn new(rows: &[Vec<f64>], mode: PseudoMode) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::TooFewObservations { needed: 1, got: 0 });
        }
        if mode == PseudoMode::Identity {
            PseudoSample::from_unit_rows(rows)?;
        }
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
            values.extend_from_slice(r);
        }
        Ok(Self { dim, values, mode })
    }

    /// Wraps a sample that is already on the copula scale.
    pub fn from_uniform(sample: &PseudoSample) -> Self {
        Self {
            dim: sample.dim(),
            values: sample.points().flatten().copied().collect(),
            mode: PseudoMode::Identity,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> PseudoMode {
        self.mode
    }

    fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Copula-scale sample of the whole data set.
    pub fn pseudo(&self) -> PseudoSample {
        let all: Vec<usize> = (0..self.len()).collect();
        self.split(&all, &[]).0
    }

    /// Training and test samples; ranks come from the training rows only.
    fn split(&self, train: &[usize], test: &[usize]) -> (PseudoSample, PseudoSample) {
        let train_rows: Vec<&[f64]> = train.iter().map(|&t| self.row(t)).collect();
        let test_rows: Vec<&[f64]> = test.iter().map(|&t| self.row(t)).collect();
        match self.mode {
            PseudoMode::Identity => {
                let flat = |rows: &[&[f64]]| PseudoSample::from_flat(self.dim, rows.concat());
                (flat(&train_rows), flat(&test_rows))
            }
            PseudoMode::Rank => {
                let ecdf = Ecdfs::new(&train_rows, self.dim);
                (ecdf.transform(&train_rows), ecdf.transform(&test_rows))
            }
        }
    }
}

/// Random partition of `0..n` into `folds` test sets whose sizes differ by
/// at most one.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidConfig(format!(
            "need 2 <= folds <= {n}, got {folds}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = vec![Vec::with_capacity(n / folds + 1); folds];
    for (i, t) in order.into_iter().enumerate() {
        parts[i % folds].push(t);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Basis counts per axis.
    pub sizes: Vec<Vec<usize>>,
    pub folds: usize,
    pub seed: u64,
}

impl SelectionGrid {
    pub const DEFAULT_ALPHAS: [f64; 7] = [0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25];
    pub const DEFAULT_BETAS: [f64; 4] = [2.0, 3.0, 3.7, 4.0];

    /// Default tuning grids with five folds at one size.
    pub fn tuning(size: Vec<usize>, seed: u64) -> Self {
        Self {
            alphas: Self::DEFAULT_ALPHAS.to_vec(),
            betas: Self::DEFAULT_BETAS.to_vec(),
            sizes: vec![size],
            folds: 5,
            seed,
        }
    }

    fn validate(&self, n: usize, dim: usize) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() || self.sizes.is_empty() {
            return Err(Error::InvalidConfig("selection grids must be non-empty".into()));
        }
        if let Some(s) = self.sizes.iter().find(|s| s.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.len(),
            });
        }
        for &a in &self.alphas {
            for &b in &self.betas {
                ScadParams::new(a, b)?;
            }
        }
        fold_partition(n, self.folds, self.seed).map(|_| ())
    }
}

/// Outcome of one fit inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Mean test log-density; NaN if the fit failed.
    pub score: f64,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub size: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub folds: Vec<FoldResult>,
    /// Sum of the fold scores; NaN if any fold failed.
    pub score: f64,
    /// Every fold fit converged.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicCell {
    pub size: Vec<usize>,
    /// NaN if the fit failed.
    pub aic: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionReport {
    pub cv: Vec<CvCell>,
    pub aic: Vec<AicCell>,
    /// Index into `cv` of the largest score.
    pub best_cv: Option<usize>,
    /// Index into `aic` of the smallest value.
    pub best_aic: Option<usize>,
}

fn argbest(values: impl Iterator<Item = f64>, larger: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if v.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, b)) => (larger && v > b) || (!larger && v < b),
        };
        if better {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Bases of degree `degrees[j]` with `size[j]` functions.
pub fn bases_for(degrees: &[usize], size: &[usize]) -> Result<Vec<BasisSystem>> {
    if degrees.len() != size.len() {
        return Err(Error::DimensionMismatch {
            expected: size.len(),
            got: degrees.len(),
        });
    }
    degrees
        .iter()
        .zip(size)
        .map(|(&d, &m)| BasisSystem::uniform(d, m))
        .collect()
}

fn fold_fit(
    data: &Dataset,
    folds: &[Vec<usize>],
    i: usize,
    bases: &[BasisSystem],
    p: ScadParams,
    cfg: &FitConfig,
) -> FoldResult {
    let train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(f, _)| f != i)
        .flat_map(|(_, idx)| idx.iter().copied())
        .collect();
    let (train, test) = data.split(&train, &folds[i]);
    let outcome = fit_nd(&train, bases, p, cfg).and_then(|report| {
        let model = report.model(bases)?;
        let score = mean_log_density(&model, &test)?;
        Ok((score, report.converged, report.iterations))
    });
    match outcome {
        Ok((score, converged, iterations)) => FoldResult {
            score,
            converged,
            iterations,
            error: None,
        },
        Err(e) => FoldResult {
            score: f64::NAN,
            converged: false,
            iterations: 0,
            error: Some(e.to_string()),
        },
    }
}

/// `(1/N) sum_t log c(u_t)`; `-inf` if the density vanishes at a point.
pub fn mean_log_density(model: &CopulaModel, sample: &PseudoSample) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::TooFewObservations { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for p in sample.points() {
        total += model.density(p)?.ln();
    }
    Ok(total / sample.len() as f64)
}

/// `CV(alpha, beta; size) = sum_i L*_i`, where `L*_i` is the mean test
/// log-density of fold `i` under the fit to the other folds.
///
/// Every grid cell uses the same seeded partition. A failed fold fit marks
/// its cell with a NaN score instead of aborting the sweep.
pub fn cross_validate(
    data: &Dataset,
    grid: &SelectionGrid,
    degrees: &[usize],
    cfg: &FitConfig,
) -> Result<SelectionReport> {
    grid.validate(data.len(), data.dim())?;
    let folds = fold_partition(data.len(), grid.folds, grid.seed)?;
    let mut cells = Vec::new();
    for size in &grid.sizes {
        let bases = bases_for(degrees, size)?;
        for &alpha in &grid.alphas {
            for &beta in &grid.betas {
                cells.push((size.clone(), bases.clone(), alpha, beta));
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..grid.folds).map(move |i| (c, i)))
        .collect();
    let results = par_map(&jobs, |&(c, i)| {
        let (_, bases, alpha, beta) = &cells[c];
        // Checked by the grid validation above.
        let p = ScadParams::new(*alpha, *beta).expect("validated tuning pair");
        fold_fit(data, &folds, i, bases, p, cfg)
    });
    let mut results = results.into_iter();
    let cv: Vec<CvCell> = cells
        .into_iter()
        .map(|(size, _, alpha, beta)| {
            let folds: Vec<FoldResult> = results.by_ref().take(grid.folds).collect();
            let score = folds.iter().map(|f| f.score).sum();
            let converged = folds.iter().all(|f| f.converged);
            CvCell {
                size,
                alpha,
                beta,
                folds,
                score,
                converged,
            }
        })
        .collect();
    let best_cv = argbest(cv.iter().map(|c| c.score), true);
    Ok(SelectionReport {
        cv,
        aic: Vec::new(),
        best_cv,
        best_aic: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeMethod {
    Cv,
    Aic,
    Both,
}

impl SizeMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cv" => Some(Self::Cv),
            "aic" => Some(Self::Aic),
            "both" => Some(Self::Both),
            _ => None,
        }
    }
}

/// Chooses the basis sizes at a fixed tuning pair by cross-validation, by
/// the pseudo-AIC of a fit to all the data, or both.
#[allow(clippy::too_many_arguments)]
pub fn select_size(
    data: &Dataset,
    sizes: &[Vec<usize>],
    degrees: &[usize],
    p: ScadParams,
    folds: usize,
    seed: u64,
    cfg: &FitConfig,
    method: SizeMethod,
) -> Result<SelectionReport> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("size grid must be non-empty".into()));
    }
    let mut report = if method == SizeMethod::Aic {
        SelectionReport::default()
    } else {
        let grid = SelectionGrid {
            alphas: vec![p.alpha],
            betas: vec![p.beta],
            sizes: sizes.to_vec(),
            folds,
            seed,
        };
        cross_validate(data, &grid, degrees, cfg)?
    };
    if method != SizeMethod::Cv {
        let sample = data.pseudo();
        let cells = par_map(sizes, |size| {
            let outcome = bases_for(degrees, size).and_then(|bases| {
                let fit = fit_nd(&sample, &bases, p, cfg)?;
                let aic = pseudo_aic(&fit.model(&bases)?, &sample)?;
                Ok((aic, fit.converged))
            });
            match outcome {
                Ok((aic, converged)) => AicCell {
                    size: size.clone(),
                    aic,
                    converged,
                    error: None,
                },
                Err(e) => AicCell {
                    size: size.clone(),
                    aic: f64::NAN,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        });
        report.best_aic = argbest(cells.iter().map(|c| c.aic), false);
        report.aic = cells;
    }
    Ok(report)
}

/// Free parameters of a tensor with the given sizes once every marginal
/// constraint is imposed: `prod m_j - 1 - sum (m_j - 1)`, which is
/// `(m - 1)(n - 1)` in two dimensions.
pub fn free_parameters(size: &[usize]) -> usize {
    let cells: usize = size.iter().product();
    cells - 1 - size.iter().map(|m| m - 1).sum::<usize>()
}

/// `-2 sum_t log c(u_t) + 2 * free_parameters`, the penalty counted as if it
/// were not a parameter. Meaningful for a converged fit.
pub fn pseudo_aic(model: &CopulaModel, sample: &PseudoSample) -> Result<f64> {
    let mut loglik = 0.0;
    for (index, p) in sample.points().enumerate() {
        let c = model.density(p)?;
        if !(c > 0.0) {
            return Err(Error::ZeroDensity { index });
        }
        loglik += c.ln();
    }
    let size: Vec<usize> = model.params().dims().to_vec();
    Ok(-2.0 * loglik + 2.0 * free_parameters(&size) as f64)
}

/// `(1/J) sum_j sum_c (r_hat_c^(j) - r_c)^2`.
pub fn mse(estimates: &[ParamTensor], truth: &ParamTensor) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidConfig("no estimates".into()));
    }
    let mut total = 0.0;
    for e in estimates {
        if e.dims() != truth.dims() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: e.len(),
            });
        }
        total += e
            .entries()
            .iter()
            .zip(truth.entries())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / estimates.len() as f64)
}

/// `(1/N) sum_i (h_hat(x_i) - h(x_i))^2` over the data points.
pub fn mse_joint_density<E, T>(estimate: E, truth: T, data: &[Vec<f64>]) -> Result<f64>
where
    E: Fn(&[f64]) -> Result<f64>,
    T: Fn(&[f64]) -> Result<f64>,
{
    if data.is_empty() {
        return Err(Error::TooFewObservations { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for x in data {
        let d = estimate(x)? - truth(x)?;
        total += d * d;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_every_point_once() {
        let parts = fold_partition(103, 5, 9).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(parts, fold_partition(103, 5, 9).unwrap());
    }

    #[test]
    fn partition_rejects_bad_fold_counts() {
        assert!(fold_partition(10, 1, 0).is_err());
        assert!(fold_partition(3, 4, 0).is_err());
    }

    #[test]
    fn free_parameters_match_two_dimensional_count() {
        assert_eq!(free_parameters(&[4, 5]), 12);
        assert_eq!(free_parameters(&[20, 20, 2]), 800 - 1 - 39);
    }

    #[test]
    fn mse_examples() {
        let t = ParamTensor::outer_product(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(mse(&[t.clone(), t.clone()], &t).unwrap(), 0.0);
        let mut e = t.entries().to_vec();
        e[0] += 0.1;
        let shifted = t.with_entries(e).unwrap();
        assert!((mse(&[shifted.clone()], &t).unwrap() - 0.01).abs() < 1e-15);
        // Order of the estimates does not matter.
        let a = mse(&[shifted.clone(), t.clone()], &t).unwrap();
        let b = mse(&[t.clone(), shifted], &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_mse_of_constant_offset() {
        let data: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 0.3]).collect();
        let h = |x: &[f64]| Ok((-x[0] * x[0]).exp());
        let v = mse_joint_density(|x| Ok(h(x)? + 0.25), h, &data).unwrap();
        assert!((v - 0.0625).abs() < 1e-15);
        assert_eq!(mse_joint_density(h, h, &data).unwrap(), 0.0);
    }

    #[test]
    fn test_ranks_use_training_distribution() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64)]).collect();
        let data = Dataset::new(&rows, PseudoMode::Rank).unwrap();
        let (train, test) = data.split(&[0, 2, 4, 6, 8], &[9]);
        assert_eq!(train.point(4), &[5.0 / 6.0, 1.0 / 6.0]);
        assert_eq!(test.point(0), &[5.0 / 6.0, 0.0]);
    }
}
