//! Browser bindings: show a copula density, draw from it, and fit a copula
//! to the draws.

use bspcopula::basis::BasisSystem;
use bspcopula::copula::{independence_model, CopulaModel};
use bspcopula::em::{fit_nd, FitConfig, ScadParams};
use bspcopula::error::{Error, Result};
use bspcopula::fixtures::Fixture;
use bspcopula::margins::PseudoSample;
use bspcopula::sample::{rejection_sample, SamplerConfig};
use bspcopula::select::mse;
use wasm_bindgen::prelude::*;

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// A bivariate copula.
#[wasm_bindgen]
pub struct Model {
    inner: CopulaModel,
}

impl Model {
    pub fn named(name: &str) -> Result<Model> {
        let inner = match name {
            "independence" => {
                let b = BasisSystem::uniform(3, 5)?;
                independence_model(&b, &b)
            }
            _ => Fixture::parse(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown model '{name}'")))?
                .model()?,
        };
        Ok(Model { inner })
    }

    pub fn grid(&self, resolution: usize) -> Result<Vec<f64>> {
        if resolution < 2 {
            return Err(Error::InvalidConfig("resolution must be at least 2".into()));
        }
        let axis: Vec<f64> = (0..resolution)
            .map(|i| i as f64 / (resolution - 1) as f64)
            .collect();
        self.inner.density_grid(&[axis.clone(), axis])
    }

    pub fn draw(&self, count: usize, seed: u64) -> Result<Vec<f64>> {
        let run = rejection_sample(&self.inner, count, &SamplerConfig::with_seed(seed))?;
        Ok(run.points.points().flatten().copied().collect())
    }
}

#[wasm_bindgen]
impl Model {
    /// `R1`, `R2`, `R3` or `independence`.
    #[wasm_bindgen(constructor)]
    pub fn new(name: &str) -> std::result::Result<Model, JsError> {
        js(Model::named(name))
    }

    /// Density on a `resolution x resolution` grid over `[0, 1]^2`, with
    /// `u` varying slowest.
    pub fn density_grid(&self, resolution: usize) -> std::result::Result<Vec<f64>, JsError> {
        js(self.grid(resolution))
    }

    /// `count` draws flattened as `u0, v0, u1, v1, ...`.
    pub fn sample(&self, count: usize, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
        js(self.draw(count, seed))
    }

    /// Row-major parameter matrix.
    pub fn entries(&self) -> Vec<f64> {
        self.inner.params().entries().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.inner.params().dims()[0]
    }

    pub fn cols(&self) -> usize {
        self.inner.params().dims()[1]
    }

    /// Summed squared difference of the parameter matrices, NaN when the
    /// sizes differ.
    pub fn squared_error(&self, other: &Model) -> f64 {
        mse(&[self.inner.params().clone()], other.inner.params()).unwrap_or(f64::NAN)
    }
}

/// Outcome of [`fit`].
#[wasm_bindgen]
pub struct Fit {
    model: CopulaModel,
    iterations: usize,
    converged: bool,
    objective: f64,
}

#[wasm_bindgen]
impl Fit {
    pub fn model(&self) -> Model {
        Model {
            inner: self.model.clone(),
        }
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    #[wasm_bindgen(getter)]
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Final penalized pseudo-log-likelihood.
    #[wasm_bindgen(getter)]
    pub fn objective(&self) -> f64 {
        self.objective
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fit_points(
    points: &[f64],
    degree: usize,
    m: usize,
    n: usize,
    alpha: f64,
    beta: f64,
    max_iters: usize,
) -> Result<Fit> {
    if points.len() % 2 != 0 {
        return Err(Error::InvalidConfig("points must come in (u, v) pairs".into()));
    }
    let rows: Vec<Vec<f64>> = points.chunks(2).map(<[f64]>::to_vec).collect();
    let sample = PseudoSample::from_unit_rows(&rows)?;
    let bases = vec![BasisSystem::uniform(degree, m)?, BasisSystem::uniform(degree, n)?];
    let cfg = FitConfig {
        max_outer_iters: max_iters,
        ..FitConfig::default()
    };
    let report = fit_nd(&sample, &bases, ScadParams::new(alpha, beta)?, &cfg)?;
    Ok(Fit {
        model: report.model(&bases)?,
        iterations: report.iterations,
        converged: report.converged,
        objective: report.lp_trajectory.last().copied().unwrap_or(f64::NAN),
    })
}

/// Fits an `m x n` copula of the given degree to points in `[0, 1]^2`
/// flattened as `u0, v0, u1, v1, ...`.
#[wasm_bindgen]
pub fn fit(
    points: &[f64],
    degree: usize,
    m: usize,
    n: usize,
    alpha: f64,
    beta: f64,
    max_iters: usize,
) -> std::result::Result<Fit, JsError> {
    js(fit_points(points, degree, m, n, alpha, beta, max_iters))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independence_grid_is_flat() {
        let grid = Model::named("independence").unwrap().density_grid(11).unwrap();
        assert_eq!(grid.len(), 121);
        assert!(grid.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unknown_model_and_tiny_grid_are_errors() {
        assert!(Model::named("R9").is_err());
        assert!(Model::named("R1").unwrap().grid(1).is_err());
    }

    #[test]
    fn sampled_points_fit_back_close_to_the_truth() {
        let truth = Model::new("R1").unwrap();
        let points = truth.sample(1000, 4).unwrap();
        assert_eq!(points.len(), 2000);
        let fitted = fit(&points, 3, 4, 5, 0.1, 3.0, 2000).unwrap();
        let model = fitted.model();
        assert_eq!((model.rows(), model.cols()), (4, 5));
        assert!(model.squared_error(&truth) < 0.01);
        assert!(fitted.objective().is_finite());
    }

    #[test]
    fn odd_point_buffer_is_rejected() {
        assert!(fit_points(&[0.1, 0.2, 0.3], 3, 4, 4, 0.0, 3.0, 10).is_err());
    }
}
