//! Simulation drivers: estimation error over tuning grids, cross-validated
//! tuning and size selection on the reference fixtures, the trivariate
//! joint-density comparison, and the small-sample runs.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::copula::CopulaModel;
use crate::em::{fit_nd, FitConfig, ScadParams};
use crate::error::{Error, Result};
use crate::fixtures::Fixture;
use crate::margins::{joint_density, normal_cdf, normal_pdf, MarginalModel, PseudoSample};
use crate::par::par_map;
use crate::sample::{baker_model, baker_trivariate, generate_study_data, SamplerConfig};
use crate::select::{cross_validate, mse, select_size, Dataset, SelectionGrid, SizeMethod};

/// `count` equally spaced values from `lo` to `hi`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn study_data(fixture: Fixture, sample_size: usize, datasets: usize, seed: u64) -> Result<(CopulaModel, Vec<PseudoSample>)> {
    let model = fixture.model()?;
    let runs = generate_study_data(&model, sample_size, datasets, &SamplerConfig::with_seed(seed))?;
    Ok((model, runs.into_iter().map(|r| r.points).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCell {
    pub alpha: f64,
    pub beta: f64,
    /// Over the data sets whose fit succeeded; NaN if none did.
    pub mse: f64,
    pub converged: usize,
    pub failed: usize,
}

/// Mean squared error of the fitted tensor over a tuning grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseGrid {
    pub fixture: Fixture,
    pub sample_size: usize,
    pub datasets: usize,
    pub cells: Vec<MseCell>,
}

impl MseGrid {
    pub fn at(&self, alpha: f64, beta: f64) -> Option<&MseCell> {
        self.cells
            .iter()
            .find(|c| (c.alpha - alpha).abs() < 1e-9 && (c.beta - beta).abs() < 1e-9)
    }

    /// Mean of the cell MSEs.
    pub fn mean(&self) -> f64 {
        mean_sd(&self.cells.iter().map(|c| c.mse).collect::<Vec<_>>()).0
    }
}

/// Fits `datasets` samples of `sample_size` true uniform scores from the
/// fixture at every `(alpha, beta)` pair with cubic bases of the true size.
pub fn mse_grid(
    fixture: Fixture,
    sample_size: usize,
    datasets: usize,
    alphas: &[f64],
    betas: &[f64],
    seed: u64,
    cfg: &FitConfig,
) -> Result<MseGrid> {
    let (model, data) = study_data(fixture, sample_size, datasets, seed)?;
    let bases = fixture.bases()?;
    let mut pairs = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            pairs.push(ScadParams::new(alpha, beta)?);
        }
    }
    let jobs: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|c| (0..datasets).map(move |j| (c, j)))
        .collect();
    let fits = par_map(&jobs, |&(c, j)| fit_nd(&data[j], &bases, pairs[c], cfg));
    let mut fits = fits.into_iter();
    let mut cells = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let mut estimates = Vec::new();
        let mut converged = 0;
        let mut failed = 0;
        for fit in fits.by_ref().take(datasets) {
            match fit {
                Ok(f) => {
                    converged += usize::from(f.converged);
                    estimates.push(f.params);
                }
                Err(_) => failed += 1,
            }
        }
        let value = if estimates.is_empty() {
            f64::NAN
        } else {
            mse(&estimates, model.params())?
        };
        cells.push(MseCell {
            alpha: p.alpha,
            beta: p.beta,
            mse: value,
            converged,
            failed,
        });
    }
    Ok(MseGrid {
        fixture,
        sample_size,
        datasets,
        cells,
    })
}

/// Whether a sparse fixture is estimated best at an interior `alpha` and a
/// dense one at the ends, judged at the three given values and one `beta`.
///
/// Sparse: `MSE(mid) < MSE(lo)` and `MSE(mid) < MSE(hi)`. Dense: `MSE(mid)`
/// above both ends and `MSE(lo) <= MSE(hi)`. Once `alpha` exceeds every
/// entry the penalty derivative is the same constant in every cell and the
/// fit coincides with the unpenalized one, so the two ends may tie up to
/// rounding; the last comparison allows a relative slack of `1e-9`.
pub fn penalization_pattern(grid: &MseGrid, lo: f64, mid: f64, hi: f64, beta: f64) -> Option<bool> {
    let get = |a: f64| grid.at(a, beta).map(|c| c.mse);
    let (l, m, h) = (get(lo)?, get(mid)?, get(hi)?);
    Some(if sparse(grid.fixture) {
        m < l && m < h
    } else {
        m > l && m > h && l <= h * (1.0 + 1e-9)
    })
}

/// Fixtures with zero entries.
pub fn sparse(fixture: Fixture) -> bool {
    fixture != Fixture::R2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummaryCell {
    pub size: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// Mean and standard deviation over the replicates with a valid score.
    pub mean: f64,
    pub sd: f64,
    pub valid: usize,
    /// Replicates whose every fold fit converged.
    pub converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvStudy {
    pub fixture: Fixture,
    pub sample_size: usize,
    pub datasets: usize,
    pub folds: usize,
    pub cells: Vec<CvSummaryCell>,
    /// Index of the largest mean score.
    pub best: Option<usize>,
}

fn best_index(values: impl Iterator<Item = f64>, larger: bool) -> Option<usize> {
    values
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, b)) if (larger && v <= b) || (!larger && v >= b) => acc,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Mean cross-validation score over replicates for every tuning pair, at
/// the fixture's own size.
pub fn cv_study(
    fixture: Fixture,
    sample_size: usize,
    datasets: usize,
    alphas: &[f64],
    betas: &[f64],
    folds: usize,
    seed: u64,
    cfg: &FitConfig,
) -> Result<CvStudy> {
    let (m, n) = fixture.size();
    let (_, data) = study_data(fixture, sample_size, datasets, seed)?;
    let mut per_cell: Vec<Vec<(f64, bool)>> = Vec::new();
    let mut layout = Vec::new();
    for (j, sample) in data.iter().enumerate() {
        let grid = SelectionGrid {
            alphas: alphas.to_vec(),
            betas: betas.to_vec(),
            sizes: vec![vec![m, n]],
            folds,
            seed: seed.wrapping_add(j as u64),
        };
        let report = cross_validate(&Dataset::from_uniform(sample), &grid, &[3, 3], cfg)?;
        if per_cell.is_empty() {
            per_cell = vec![Vec::new(); report.cv.len()];
            layout = report
                .cv
                .iter()
                .map(|c| (c.size.clone(), c.alpha, c.beta))
                .collect();
        }
        for (acc, cell) in per_cell.iter_mut().zip(&report.cv) {
            acc.push((cell.score, cell.converged));
        }
    }
    let cells: Vec<CvSummaryCell> = layout
        .into_iter()
        .zip(per_cell)
        .map(|((size, alpha, beta), scores)| {
            let valid: Vec<f64> = scores.iter().map(|s| s.0).filter(|v| !v.is_nan()).collect();
            let (mean, sd) = mean_sd(&valid);
            CvSummaryCell {
                size,
                alpha,
                beta,
                mean,
                sd,
                valid: valid.len(),
                converged: scores.iter().filter(|s| s.1).count(),
            }
        })
        .collect();
    let best = best_index(cells.iter().map(|c| c.mean), true);
    Ok(CvStudy {
        fixture,
        sample_size,
        datasets,
        folds,
        cells,
        best,
    })
}

/// Whether the best mean CV sits at an interior `alpha` for a sparse
/// fixture and at an end of the `alpha` grid for a dense one.
pub fn tuning_pattern(study: &CvStudy) -> Option<bool> {
    let best = &study.cells[study.best?];
    let lo = study.cells.iter().map(|c| c.alpha).fold(f64::INFINITY, f64::min);
    let hi = study.cells.iter().map(|c| c.alpha).fold(f64::NEG_INFINITY, f64::max);
    let interior = best.alpha > lo && best.alpha < hi;
    Some(interior == sparse(study.fixture))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCell {
    pub size: Vec<usize>,
    pub cv_mean: f64,
    pub cv_sd: f64,
    pub aic_mean: f64,
    pub aic_sd: f64,
    pub cv_valid: usize,
    pub aic_valid: usize,
    /// Replicates whose full-data fit converged.
    pub aic_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStudy {
    pub fixture: Fixture,
    pub sample_size: usize,
    pub datasets: usize,
    pub cells: Vec<SizeCell>,
    pub best_cv: Option<usize>,
    pub best_aic: Option<usize>,
}

impl SizeStudy {
    /// Sizes ordered from best to worst mean CV.
    pub fn cv_ranking(&self) -> Vec<Vec<usize>> {
        self.ranking(|c| c.cv_mean, true)
    }

    /// Sizes ordered from best to worst mean AIC.
    pub fn aic_ranking(&self) -> Vec<Vec<usize>> {
        self.ranking(|c| c.aic_mean, false)
    }

    fn ranking(&self, key: impl Fn(&SizeCell) -> f64, larger: bool) -> Vec<Vec<usize>> {
        let mut cells: Vec<&SizeCell> = self.cells.iter().filter(|c| !key(c).is_nan()).collect();
        cells.sort_by(|a, b| {
            let o = key(a).total_cmp(&key(b));
            if larger {
                o.reverse()
            } else {
                o
            }
        });
        cells.into_iter().map(|c| c.size.clone()).collect()
    }
}

/// Mean CV and mean pseudo-AIC over replicates for every size, unpenalized.
pub fn size_study(
    fixture: Fixture,
    sample_size: usize,
    datasets: usize,
    sizes: &[Vec<usize>],
    folds: usize,
    seed: u64,
    cfg: &FitConfig,
) -> Result<SizeStudy> {
    let (_, data) = study_data(fixture, sample_size, datasets, seed)?;
    let mut cv: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
    let mut aic: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
    let mut aic_converged = vec![0; sizes.len()];
    for (j, sample) in data.iter().enumerate() {
        let report = select_size(
            &Dataset::from_uniform(sample),
            sizes,
            &[3, 3],
            ScadParams::none(),
            folds,
            seed.wrapping_add(j as u64),
            cfg,
            SizeMethod::Both,
        )?;
        for (i, c) in report.cv.iter().enumerate() {
            if !c.score.is_nan() {
                cv[i].push(c.score);
            }
        }
        for (i, c) in report.aic.iter().enumerate() {
            if !c.aic.is_nan() {
                aic[i].push(c.aic);
            }
            aic_converged[i] += usize::from(c.converged);
        }
    }
    let cells: Vec<SizeCell> = sizes
        .iter()
        .enumerate()
        .map(|(i, size)| {
            let (cv_mean, cv_sd) = mean_sd(&cv[i]);
            let (aic_mean, aic_sd) = mean_sd(&aic[i]);
            SizeCell {
                size: size.clone(),
                cv_mean,
                cv_sd,
                aic_mean,
                aic_sd,
                cv_valid: cv[i].len(),
                aic_valid: aic[i].len(),
                aic_converged: aic_converged[i],
            }
        })
        .collect();
    let best_cv = best_index(cells.iter().map(|c| c.cv_mean), true);
    let best_aic = best_index(cells.iter().map(|c| c.aic_mean), false);
    Ok(SizeStudy {
        fixture,
        sample_size,
        datasets,
        cells,
        best_cv,
        best_aic,
    })
}

/// Whether both criteria pick the true size, or, for the dense fixture,
/// rank `4 x 4` and `4 x 5` as the top two.
pub fn size_pattern(study: &SizeStudy) -> bool {
    let (m, n) = study.fixture.size();
    let check = |ranking: Vec<Vec<usize>>| {
        if sparse(study.fixture) {
            ranking.first() == Some(&vec![m, n])
        } else {
            let mut top: Vec<Vec<usize>> = ranking.into_iter().take(2).collect();
            top.sort();
            top == vec![vec![4, 4], vec![4, 5]]
        }
    };
    check(study.cv_ranking()) && check(study.aic_ranking())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFit {
    pub name: String,
    pub size: Vec<usize>,
    pub degrees: Vec<usize>,
    pub mse: f64,
    /// Largest marginal-sum residual over all axes.
    pub constraint_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDensityStudy {
    pub sample_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub fits: Vec<JointFit>,
}

/// The three models compared on the trivariate block data.
pub fn joint_density_models() -> Vec<(&'static str, Vec<usize>, Vec<usize>)> {
    vec![
        ("bernstein", vec![20, 20, 2], vec![19, 19, 1]),
        ("bspline", vec![20, 20, 2], vec![3, 3, 1]),
        ("bspline", vec![10, 10, 2], vec![3, 3, 1]),
    ]
}

/// Draws `sample_size` points with standard normal margins from the
/// `20 x 20 x 2` block Bernstein copula, fits each model to the rank scores,
/// and compares `c_hat(F_hat(x)) prod f_hat(x_j)` (kernel margins) with the
/// true joint density at the data points.
pub fn joint_density_study(sample_size: usize, p: ScadParams, seed: u64, cfg: &FitConfig) -> Result<JointDensityStudy> {
    let truth = baker_model(20, 20, 2)?;
    let draws = baker_trivariate(sample_size, 20, 20, 2, &SamplerConfig::with_seed(seed))?;
    let data = &draws.normals;
    let pseudo = Dataset::new(data, crate::select::PseudoMode::Rank)?.pseudo();
    let margins = (0..3)
        .map(|j| MarginalModel::new(&data.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let true_density = |x: &[f64]| -> Result<f64> {
        let u: Vec<f64> = x.iter().map(|&v| normal_cdf(v)).collect();
        Ok(x.iter().fold(truth.density(&u)?, |acc, &v| acc * normal_pdf(v)))
    };
    let specs = joint_density_models();
    let fits = par_map(&specs, |(name, size, degrees)| -> Result<JointFit> {
        let bases = degrees
            .iter()
            .zip(size)
            .map(|(&d, &m)| BasisSystem::uniform(d, m))
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_nd(&pseudo, &bases, p, cfg)?;
        let model = fit.model(&bases)?;
        let value = crate::select::mse_joint_density(|x| joint_density(&model, &margins, x), true_density, data)?;
        let constraint_residual = model.validate().max_residual();
        Ok(JointFit {
            name: name.to_string(),
            size: size.clone(),
            degrees: degrees.clone(),
            mse: value,
            constraint_residual,
            converged: fit.converged,
            iterations: fit.iterations,
        })
    });
    Ok(JointDensityStudy {
        sample_size,
        seed,
        alpha: p.alpha,
        beta: p.beta,
        fits: fits.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallSampleStudy {
    pub fixture: Fixture,
    /// One grid per sample size, in increasing size.
    pub grids: Vec<MseGrid>,
}

impl SmallSampleStudy {
    /// Mean MSE over the tuning grid falls as the sample grows.
    pub fn decreasing(&self) -> bool {
        self.grids.windows(2).all(|w| w[1].mean() < w[0].mean())
    }
}

pub fn small_sample_study(
    fixture: Fixture,
    sample_sizes: &[usize],
    datasets: usize,
    alphas: &[f64],
    betas: &[f64],
    seed: u64,
    cfg: &FitConfig,
) -> Result<SmallSampleStudy> {
    let mut sizes = sample_sizes.to_vec();
    sizes.sort_unstable();
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no sample sizes".into()));
    }
    let grids = sizes
        .iter()
        .map(|&n| mse_grid(fixture, n, datasets, alphas, betas, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SmallSampleStudy { fixture, grids })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_endpoints() {
        let v = linspace(0.0, 0.25, 6);
        assert_eq!((v[0], v[5]), (0.0, 0.25));
        for (x, want) in v.iter().zip([0.0, 0.05, 0.1, 0.15, 0.2, 0.25]) {
            assert!((x - want).abs() < 1e-16);
        }
        assert_eq!(linspace(2.0, 4.5, 1), vec![2.0]);
    }

    #[test]
    fn best_index_skips_nan() {
        let v = [f64::NAN, 1.0, 3.0, 2.0];
        assert_eq!(best_index(v.iter().copied(), true), Some(2));
        assert_eq!(best_index(v.iter().copied(), false), Some(1));
    }
}
