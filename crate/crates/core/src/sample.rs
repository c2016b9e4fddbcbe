//! Rejection sampling from a copula model and the simulation data generators.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::copula::{CopulaModel, ParamTensor};
use crate::error::{Error, Result};
use crate::margins::{normal_quantile, PseudoSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Points per axis in the envelope search grid.
    pub grid_resolution: usize,
    /// Multiplier applied to the grid maximum.
    pub safety_factor: f64,
    /// Consecutive rejections tolerated before giving up.
    pub max_attempts_per_draw: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_resolution: 201,
            safety_factor: 1.05,
            max_attempts_per_draw: 1_000_000,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution < 51 {
            return Err(Error::InvalidConfig(format!(
                "grid resolution {} is below 51",
                self.grid_resolution
            )));
        }
        if !(self.safety_factor >= 1.0 && self.safety_factor.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "safety factor {} must be at least 1",
                self.safety_factor
            )));
        }
        if self.max_attempts_per_draw == 0 {
            return Err(Error::InvalidConfig("max attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Search axis: `G` equally spaced points plus every distinct knot.
fn search_axis(basis: &BasisSystem, resolution: usize) -> Vec<f64> {
    let mut axis: Vec<f64> = (0..resolution)
        .map(|i| i as f64 / (resolution - 1) as f64)
        .chain(basis.knots().iter().copied())
        .collect();
    axis.sort_by(f64::total_cmp);
    axis.dedup();
    axis
}

/// Largest density on the search grid, before the safety factor.
pub fn grid_max_density(model: &CopulaModel, resolution: usize) -> Result<f64> {
    let axes: Vec<Vec<f64>> = model
        .bases()
        .iter()
        .map(|b| search_axis(b, resolution))
        .collect();
    let grid = model.density_grid(&axes)?;
    Ok(grid.into_iter().fold(0.0, f64::max))
}

/// Envelope constant: grid maximum times the safety factor.
pub fn max_density(model: &CopulaModel, cfg: &SamplerConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(grid_max_density(model, cfg.grid_resolution)? * cfg.safety_factor)
}

/// Draws plus run statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub points: PseudoSample,
    /// Proposals made in the final (uncorrected) pass.
    pub proposals: u64,
    /// Envelope in force during the final pass.
    pub envelope: f64,
    /// Times the envelope had to be raised.
    pub restarts: usize,
}

impl SampleRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.points.len() as f64 / self.proposals as f64
    }
}

fn draw(
    model: &CopulaModel,
    count: usize,
    mut envelope: f64,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleRun> {
    let dim = model.ndim();
    let mut values = Vec::with_capacity(count * dim);
    let mut proposal = vec![0.0; dim];
    let mut proposals = 0u64;
    let mut restarts = 0;
    let mut misses = 0u64;
    while values.len() < count * dim {
        for u in proposal.iter_mut() {
            *u = rng.sample(Open01);
        }
        let s: f64 = rng.sample(Open01);
        proposals += 1;
        let c = model.density_unchecked(&proposal);
        if c > envelope {
            envelope = 1.05 * c;
            restarts += 1;
            values.clear();
            proposals = 0;
            misses = 0;
            continue;
        }
        if s * envelope <= c {
            values.extend_from_slice(&proposal);
            misses = 0;
        } else {
            misses += 1;
            if misses >= cfg.max_attempts_per_draw {
                return Err(Error::SamplerBudget { attempts: misses });
            }
        }
    }
    Ok(SampleRun {
        points: PseudoSample::from_flat(dim, values),
        proposals,
        envelope,
        restarts,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `count` independent draws by uniform proposals accepted with probability
/// `c(u) / envelope`.
pub fn rejection_sample(
    model: &CopulaModel,
    count: usize,
    cfg: &SamplerConfig,
) -> Result<SampleRun> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample size must be positive".into()));
    }
    let envelope = max_density(model, cfg)?;
    draw(model, count, envelope, cfg, &mut stream_rng(cfg.seed, 0))
}

/// `datasets` independent samples of size `count`, dataset `j` drawn from
/// stream `j` of the master seed.
pub fn generate_study_data(
    model: &CopulaModel,
    count: usize,
    datasets: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<SampleRun>> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample size must be positive".into()));
    }
    let envelope = max_density(model, cfg)?;
    let run = |j: usize| {
        draw(
            model,
            count,
            envelope,
            cfg,
            &mut stream_rng(cfg.seed, j as u64),
        )
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..datasets).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..datasets).map(run).collect()
    }
}

/// Parameter tensor of the trivariate Bernstein copula whose first slab along
/// the third axis is independent and whose second slab is the diagonal.
///
/// `r[k1, k2, 0] = 1 / (2 n1 n2)` and `r[k, k, 1] = 1 / (2 n1)`; the
/// dependence between the first two axes therefore grows with the third.
pub fn baker_params(n1: usize, n2: usize, n3: usize) -> Result<ParamTensor> {
    if n1 != n2 || n3 != 2 || n1 < 2 {
        return Err(Error::InvalidConfig(format!(
            "block tensor needs n1 = n2 >= 2 and n3 = 2, got ({n1}, {n2}, {n3})"
        )));
    }
    let mut entries = vec![0.0; n1 * n2 * n3];
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let base = (k1 * n2 + k2) * n3;
            entries[base] = 1.0 / (2.0 * (n1 * n2) as f64);
            if k1 == k2 {
                entries[base + 1] = 1.0 / (2.0 * n1 as f64);
            }
        }
    }
    let targets = [n1, n2, n3]
        .iter()
        .map(|&n| vec![1.0 / n as f64; n])
        .collect();
    ParamTensor::new(vec![n1, n2, n3], entries, targets)
}

pub fn baker_model(n1: usize, n2: usize, n3: usize) -> Result<CopulaModel> {
    let params = baker_params(n1, n2, n3)?;
    let bases = [n1, n2, n3]
        .iter()
        .map(|&n| BasisSystem::bernstein(n - 1))
        .collect::<Result<Vec<_>>>()?;
    CopulaModel::new(bases, params)
}

/// Draws from the block Bernstein copula, on the copula scale and with
/// standard normal margins.
#[derive(Debug, Clone, PartialEq)]
pub struct BakerSample {
    pub uniforms: PseudoSample,
    pub normals: Vec<Vec<f64>>,
    pub run: SampleRun,
}

pub fn baker_trivariate(
    count: usize,
    n1: usize,
    n2: usize,
    n3: usize,
    cfg: &SamplerConfig,
) -> Result<BakerSample> {
    let model = baker_model(n1, n2, n3)?;
    let run = rejection_sample(&model, count, cfg)?;
    let normals = run
        .points
        .points()
        .map(|p| {
            p.iter()
                .map(|&u| normal_quantile(u))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BakerSample {
        uniforms: run.points.clone(),
        normals,
        run,
    })
}

/// Kolmogorov–Smirnov distance between a sample and the uniform law on `[0, 1]`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let above = (i as f64 + 1.0) / n - u;
            let below = u - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Largest gap between the empirical copula of a bivariate sample and the
/// model distribution function over a `grid x grid` lattice on `[0, 1]^2`.
pub fn empirical_copula_distance(
    model: &CopulaModel,
    sample: &PseudoSample,
    grid: usize,
) -> Result<f64> {
    if model.ndim() != 2 || sample.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: sample.dim(),
        });
    }
    if grid < 2 {
        return Err(Error::InvalidConfig(
            "grid needs at least two points".into(),
        ));
    }
    let axis: Vec<f64> = (0..grid).map(|i| i as f64 / (grid - 1) as f64).collect();
    // counts[a][b]: points with u in the a-th cell and v in the b-th cell,
    // where cell a covers (axis[a-1], axis[a]].
    let cell = |x: f64| axis.partition_point(|&g| g < x);
    let mut counts = vec![0u64; grid * grid];
    for p in sample.points() {
        counts[cell(p[0]) * grid + cell(p[1])] += 1;
    }
    for a in 0..grid {
        for b in 0..grid {
            let mut v = counts[a * grid + b];
            if a > 0 {
                v += counts[(a - 1) * grid + b];
            }
            if b > 0 {
                v += counts[a * grid + b - 1];
            }
            if a > 0 && b > 0 {
                v -= counts[(a - 1) * grid + b - 1];
            }
            counts[a * grid + b] = v;
        }
    }
    let model_cdf = model.cdf_grid(&[axis.clone(), axis.clone()])?;
    let n = sample.len() as f64;
    Ok(counts
        .iter()
        .zip(&model_cdf)
        .map(|(&c, &m)| (c as f64 / n - m).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::independence_model;

    #[test]
    fn independence_accepts_everything_without_safety() {
        let b = BasisSystem::uniform(3, 4).unwrap();
        let model = independence_model(&b, &b);
        let cfg = SamplerConfig {
            safety_factor: 1.0,
            ..SamplerConfig::with_seed(7)
        };
        let env = max_density(&model, &cfg).unwrap();
        assert!((env - 1.0).abs() < 1e-12);
        let run = rejection_sample(&model, 500, &cfg).unwrap();
        assert_eq!(run.proposals, 500);
        assert_eq!(run.restarts, 0);
    }

    #[test]
    fn baker_slabs_and_margins() {
        let params = baker_params(20, 20, 2).unwrap();
        let slabs = params.marginal_sums(2);
        assert!((slabs[0] - 0.5).abs() < 1e-14 && (slabs[1] - 0.5).abs() < 1e-14);
        let model = baker_model(20, 20, 2).unwrap();
        assert!(!model.validate().violated);
    }

    #[test]
    fn ks_of_a_perfect_grid_is_small() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&v) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_grid() {
        let cfg = SamplerConfig {
            grid_resolution: 50,
            ..SamplerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
