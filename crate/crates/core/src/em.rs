//! Penalized pseudo-likelihood EM for the copula parameter tensor.
//!
//! Each iteration computes mean responsibilities `tau` (E-step), freezes
//! the SCAD derivative at the current iterate, solves for one Lagrange
//! multiplier vector per axis so that the update
//! `r = tau / (sum_j mult_j + pdot)` meets every marginal constraint, and
//! applies that update (M-step). Freezing the derivative of a concave
//! penalty gives a minorize-maximize step, so the penalized objective never
//! decreases.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::copula::{strides_of, CopulaModel, ParamTensor};
use crate::error::{Error, Result};
use crate::margins::PseudoSample;

/// SCAD tuning pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScadParams {
    pub alpha: f64,
    pub beta: f64,
}

impl ScadParams {
    /// Requires `alpha >= 0` and `beta >= 2`.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite() && beta >= 2.0 && beta.is_finite()) {
            return Err(Error::InvalidScad { alpha, beta });
        }
        Ok(Self { alpha, beta })
    }

    /// No penalty.
    pub fn none() -> Self {
        Self {
            alpha: 0.0,
            beta: 3.0,
        }
    }
}

/// SCAD penalty value at `r >= 0`.
pub fn scad(r: f64, p: ScadParams) -> f64 {
    let ScadParams { alpha, beta } = p;
    if r <= alpha {
        alpha * r
    } else if r <= alpha * beta {
        (2.0 * alpha * beta * r - r * r - alpha * alpha) / (2.0 * (beta - 1.0))
    } else {
        alpha * alpha * (beta + 1.0) / 2.0
    }
}

/// SCAD derivative at `r >= 0`.
pub fn scad_deriv(r: f64, p: ScadParams) -> f64 {
    let ScadParams { alpha, beta } = p;
    if r <= alpha {
        alpha
    } else {
        (alpha * beta - r).max(0.0) / (beta - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Stop when the largest entry change falls below this.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    /// Stop the multiplier sweeps when no multiplier moves by more than this.
    pub inner_tol: f64,
    pub max_inner_iters: usize,
    /// Width at which a one-dimensional bisection stops.
    pub root_tol: f64,
    /// Starting value of the recentred multipliers.
    pub mu0: f64,
    /// If set, convergence also requires the stationarity residual on
    /// entries above [`KKT_ENTRY_FLOOR`] to be at most this. Entries that
    /// decay towards zero do so slowly, so the change test alone can stop
    /// well short of a stationary point.
    pub kkt_tol: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-8,
            max_outer_iters: 5000,
            inner_tol: 1e-10,
            max_inner_iters: 500,
            root_tol: 1e-12,
            mu0: 0.5,
            kkt_tol: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.outer_tol, self.inner_tol, self.root_tol]
            .iter()
            .all(|t| *t > 0.0 && t.is_finite());
        if !positive
            || self.max_outer_iters == 0
            || self.max_inner_iters == 0
            || !self.mu0.is_finite()
            || self.kkt_tol.is_some_and(|t| !(t > 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "invalid fit configuration {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sparse design of a sample: for every point, the tensor cells whose basis
/// product is active there and that product's value.
#[derive(Debug, Clone)]
pub struct Design {
    dims: Vec<usize>,
    width: usize,
    cells: Vec<u32>,
    weights: Vec<f64>,
}

impl Design {
    pub fn new(sample: &PseudoSample, bases: &[BasisSystem]) -> Result<Self> {
        if sample.dim() != bases.len() {
            return Err(Error::DimensionMismatch {
                expected: bases.len(),
                got: sample.dim(),
            });
        }
        let dims: Vec<usize> = bases.iter().map(BasisSystem::count).collect();
        let strides = strides_of(&dims);
        let widths: Vec<usize> = bases.iter().map(|b| b.degree() + 1).collect();
        let width: usize = widths.iter().product();
        let mut cells = Vec::with_capacity(sample.len() * width);
        let mut weights = Vec::with_capacity(sample.len() * width);
        let mut windows: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut firsts = vec![0usize; bases.len()];
        let mut idx = vec![0usize; bases.len()];
        for (t, point) in sample.points().enumerate() {
            for (axis, &u) in point.iter().enumerate() {
                if !(0.0..=1.0).contains(&u) {
                    return Err(Error::OutOfUnitInterval { axis, value: u });
                }
                if !u.is_finite() {
                    return Err(Error::NonFinite { row: t, col: axis });
                }
                firsts[axis] = bases[axis].phi_active(u, &mut windows[axis]);
            }
            idx.iter_mut().for_each(|i| *i = 0);
            for _ in 0..width {
                let mut cell = 0;
                let mut w = 1.0;
                for j in 0..idx.len() {
                    cell += (firsts[j] + idx[j]) * strides[j];
                    w *= windows[j][idx[j]];
                }
                cells.push(cell as u32);
                weights.push(w);
                for j in (0..idx.len()).rev() {
                    idx[j] += 1;
                    if idx[j] < widths[j] {
                        break;
                    }
                    idx[j] = 0;
                }
            }
        }
        Ok(Self {
            dims,
            width,
            cells,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn point(&self, t: usize) -> (&[u32], &[f64]) {
        let range = t * self.width..(t + 1) * self.width;
        (&self.cells[range.clone()], &self.weights[range])
    }

    /// Copula density at point `t` under `entries`.
    pub fn density_at(&self, entries: &[f64], t: usize) -> f64 {
        let (cells, weights) = self.point(t);
        cells
            .iter()
            .zip(weights)
            .map(|(&c, &w)| entries[c as usize] * w)
            .sum()
    }

    /// Mean of the active basis products per cell, `(1/N) sum_t prod_j phi_j`.
    fn mean_products(&self) -> Vec<f64> {
        let total: usize = self.dims.iter().product();
        let mut acc = vec![0.0; total];
        for (&c, &w) in self.cells.iter().zip(&self.weights) {
            acc[c as usize] += w;
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

const BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// Mean responsibilities, one per tensor cell.
    pub tau: Vec<f64>,
    /// Mean log copula density at the current parameters.
    pub mean_loglik: f64,
}

fn e_step_block(
    design: &Design,
    entries: &[f64],
    start: usize,
    end: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut tau = vec![0.0; entries.len()];
    let mut loglik = 0.0;
    for t in start..end {
        let (cells, weights) = design.point(t);
        let den: f64 = cells
            .iter()
            .zip(weights)
            .map(|(&c, &w)| entries[c as usize] * w)
            .sum();
        if !(den > 0.0) {
            return Err(Error::ZeroDensity { index: t });
        }
        loglik += den.ln();
        for (&c, &w) in cells.iter().zip(weights) {
            let c = c as usize;
            tau[c] += entries[c] * w / den;
        }
    }
    Ok((tau, loglik))
}

/// E-step on a precomputed design. Blocks are reduced in a fixed order so the
/// result does not depend on the number of threads.
pub fn e_step_design(design: &Design, entries: &[f64]) -> Result<Responsibilities> {
    let n = design.len();
    if n == 0 {
        return Err(Error::TooFewObservations { needed: 1, got: 0 });
    }
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let run = |&s: &usize| e_step_block(design, entries, s, (s + BLOCK).min(n));
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(Vec<f64>, f64)>> = {
        use rayon::prelude::*;
        starts.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(Vec<f64>, f64)>> = starts.iter().map(run).collect();

    let mut tau = vec![0.0; entries.len()];
    let mut loglik = 0.0;
    for part in parts {
        let (t, l) = part?;
        tau.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
        loglik += l;
    }
    let scale = 1.0 / n as f64;
    tau.iter_mut().for_each(|v| *v *= scale);
    Ok(Responsibilities {
        tau,
        mean_loglik: loglik * scale,
    })
}

/// Mean responsibilities for `params` on `sample`.
pub fn e_step(
    params: &ParamTensor,
    sample: &PseudoSample,
    bases: &[BasisSystem],
) -> Result<Responsibilities> {
    let design = Design::new(sample, bases)?;
    check_dims(params, &design)?;
    e_step_design(&design, params.entries())
}

fn check_dims(params: &ParamTensor, design: &Design) -> Result<()> {
    if params.dims() != design.dims() {
        return Err(Error::DimensionMismatch {
            expected: design.dims().iter().product(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Mean pseudo-log-likelihood `(1/N) sum_t log c(u_t; R)`.
pub fn mean_loglik(
    params: &ParamTensor,
    sample: &PseudoSample,
    bases: &[BasisSystem],
) -> Result<f64> {
    let design = Design::new(sample, bases)?;
    check_dims(params, &design)?;
    mean_loglik_design(&design, params.entries())
}

pub(crate) fn mean_loglik_design(design: &Design, entries: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..design.len() {
        let den = design.density_at(entries, t);
        if !(den > 0.0) {
            return Err(Error::ZeroDensity { index: t });
        }
        total += den.ln();
    }
    Ok(total / design.len() as f64)
}

/// Total penalty `sum_c p(r_c)`.
pub fn total_penalty(entries: &[f64], p: ScadParams) -> f64 {
    entries.iter().map(|&r| scad(r.max(0.0), p)).sum()
}

/// Penalized objective with the (vanishing) Lagrange terms omitted.
pub fn penalized_loglik(
    params: &ParamTensor,
    sample: &PseudoSample,
    bases: &[BasisSystem],
    p: ScadParams,
) -> Result<f64> {
    Ok(mean_loglik(params, sample, bases)? - total_penalty(params.entries(), p))
}

/// Starting tensor `r_c = (prod_j q_{j,c_j}) * (1/N) sum_t prod_j phi_{j,c_j}(u_tj)`.
pub fn init_param(bases: &[BasisSystem], sample: &PseudoSample) -> Result<ParamTensor> {
    if sample.is_empty() {
        return Err(Error::TooFewObservations { needed: 1, got: 0 });
    }
    let design = Design::new(sample, bases)?;
    Ok(init_from_design(&design, bases))
}

fn init_from_design(design: &Design, bases: &[BasisSystem]) -> ParamTensor {
    let outer = ParamTensor::outer_product(bases.iter().map(|b| b.weights().to_vec()).collect())
        .expect("outer product shape");
    let means = design.mean_products();
    let entries = outer
        .entries()
        .iter()
        .zip(&means)
        .map(|(q, m)| q * m)
        .collect();
    outer.with_entries(entries).expect("same shape")
}

/// Multipliers from the inner solver, one vector per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub values: Vec<Vec<f64>>,
    pub sweeps: usize,
    /// Cells pinned to the independence value because a whole slice of
    /// `tau` through them is zero.
    pub pinned: Vec<bool>,
}

struct CellIndex {
    dims: Vec<usize>,
    /// `coords[c * D + j]` is the index of cell `c` on axis `j`.
    coords: Vec<u32>,
}

impl CellIndex {
    fn new(dims: &[usize]) -> Self {
        let strides = strides_of(dims);
        let total: usize = dims.iter().product();
        let mut coords = Vec::with_capacity(total * dims.len());
        for c in 0..total {
            for (j, &m) in dims.iter().enumerate() {
                coords.push(((c / strides[j]) % m) as u32);
            }
        }
        Self {
            dims: dims.to_vec(),
            coords,
        }
    }

    fn coord(&self, c: usize, j: usize) -> usize {
        self.coords[c * self.dims.len() + j] as usize
    }

    fn cells(&self) -> usize {
        self.coords.len() / self.dims.len()
    }
}

/// Independence value `prod_j q_{j, c_j}` of a cell.
fn outer_value(index: &CellIndex, targets: &[Vec<f64>], c: usize) -> f64 {
    (0..targets.len())
        .map(|j| targets[j][index.coord(c, j)])
        .product()
}

/// Root of `sum_i tau_i / (a_i + x) = target` on `x > -min a_i`.
///
/// The left side is strictly decreasing from `+inf` to `0`, so the root is
/// unique; it is bracketed by `max_i(tau_i/target - a_i)` (where the largest
/// single term already equals the target) and `-min a_i + sum tau / target`.
fn solve_one(terms: &[(f64, f64)], target: f64, root_tol: f64) -> f64 {
    let sum_tau: f64 = terms.iter().map(|t| t.0).sum();
    let min_a = terms.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    let mut lo = terms
        .iter()
        .map(|&(tau, a)| tau / target - a)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut hi = -min_a + sum_tau / target;
    let f = |x: f64| terms.iter().map(|&(tau, a)| tau / (a + x)).sum::<f64>() - target;
    if f(hi) > 0.0 {
        // Rounding at the analytic bound; widen geometrically.
        let mut step = (hi - lo).abs().max(1e-12);
        while f(hi) > 0.0 {
            hi += step;
            step *= 2.0;
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= root_tol * (1.0 + mid.abs()) || mid <= lo || mid >= hi {
            return mid;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Alternating multiplier solver for the M-step.
///
/// Sweeps the axes from last to first, solving each multiplier from its own
/// marginal equation with the others held fixed, then recentres every axis
/// but the last so that `sum_k q_k mult_k` stays at `mu0`. For two axes this
/// is: solve `lambda`, solve `mu`, recentre `mu`.
pub fn solve_multipliers(
    tau: &[f64],
    dims: &[usize],
    targets: &[Vec<f64>],
    pdot: &[f64],
    cfg: &FitConfig,
    warm: Option<&[Vec<f64>]>,
) -> Result<Multipliers> {
    let index = CellIndex::new(dims);
    solve_with_index(tau, &index, targets, pdot, cfg, warm)
}

fn solve_with_index(
    tau: &[f64],
    index: &CellIndex,
    targets: &[Vec<f64>],
    pdot: &[f64],
    cfg: &FitConfig,
    warm: Option<&[Vec<f64>]>,
) -> Result<Multipliers> {
    let dims = &index.dims;
    let naxes = dims.len();
    let cells = index.cells();

    // Slices whose responsibilities all vanish pin their cells.
    let mut slice_mass: Vec<Vec<f64>> = dims.iter().map(|&m| vec![0.0; m]).collect();
    for c in 0..cells {
        for j in 0..naxes {
            slice_mass[j][index.coord(c, j)] += tau[c];
        }
    }
    let degenerate: Vec<Vec<bool>> = slice_mass
        .iter()
        .map(|s| s.iter().map(|&v| v <= 0.0).collect())
        .collect();
    let pinned: Vec<bool> = (0..cells)
        .map(|c| (0..naxes).any(|j| degenerate[j][index.coord(c, j)]))
        .collect();
    let mut reduced: Vec<Vec<f64>> = targets.to_vec();
    for c in (0..cells).filter(|&c| pinned[c]) {
        let v = outer_value(index, targets, c);
        for j in 0..naxes {
            let k = index.coord(c, j);
            if !degenerate[j][k] {
                reduced[j][k] -= v;
            }
        }
    }
    for j in 0..naxes {
        for k in 0..dims[j] {
            if !degenerate[j][k] && !(reduced[j][k] > 0.0) {
                return Err(Error::InfeasibleTargets);
            }
        }
    }

    let cold: Vec<Vec<f64>> = dims.iter().map(|&m| vec![cfg.mu0; m]).collect();
    let problem = DualProblem {
        tau,
        index,
        pinned: &pinned,
        degenerate: &degenerate,
        reduced: &reduced,
        targets,
        pdot,
        mu0: cfg.mu0,
    };
    match warm {
        Some(w) if w.len() == naxes && w.iter().zip(dims).all(|(v, &m)| v.len() == m) => {
            // A warm start can sit next to a pole of a cell whose
            // responsibility has collapsed; the cold start does not.
            problem
                .sweeps(w.to_vec(), cfg)
                .or_else(|_| problem.sweeps(cold, cfg))
        }
        _ => problem.sweeps(cold, cfg),
    }
}

impl DualProblem<'_> {
    /// Alternating sweeps from `start`, with periodic Newton polishing.
    fn sweeps(&self, mut mults: Vec<Vec<f64>>, cfg: &FitConfig) -> Result<Multipliers> {
        let index = self.index;
        let dims = &index.dims;
        let naxes = dims.len();
        let cells = index.cells();
        let (tau, pinned, degenerate, reduced, targets, pdot) = (
            self.tau,
            self.pinned,
            self.degenerate,
            self.reduced,
            self.targets,
            self.pdot,
        );
        let mut buckets: Vec<Vec<(f64, f64)>> = Vec::new();
        let mut last_change = f64::INFINITY;
        let mut last_residual = f64::INFINITY;
        // Newton's method straight from the start usually solves the system
        // outright; the sweeps are the fallback.
        let mut solved_at_start = false;
        if self.value(&mults).is_some() {
            let (solved, exact) = self.newton(&mults, cfg.inner_tol);
            if exact {
                mults = solved;
                solved_at_start = true;
            }
        }
        for sweep in 1..=cfg.max_inner_iters {
            let mut change: f64 = 0.0;
            for j in (0..naxes).rev().filter(|_| !solved_at_start) {
                buckets.clear();
                buckets.resize(dims[j], Vec::new());
                for c in 0..cells {
                    if tau[c] <= 0.0 || pinned[c] {
                        continue;
                    }
                    let mut a = pdot[c];
                    for (i, m) in mults.iter().enumerate() {
                        if i != j {
                            a += m[index.coord(c, i)];
                        }
                    }
                    buckets[index.coord(c, j)].push((tau[c], a));
                }
                for k in 0..dims[j] {
                    if degenerate[j][k] {
                        continue;
                    }
                    let root = solve_one(&buckets[k], reduced[j][k], cfg.root_tol);
                    change = change.max((root - mults[j][k]).abs());
                    mults[j][k] = root;
                }
            }
            if change >= cfg.inner_tol
                && sweep >= NEWTON_AFTER
                && (sweep - NEWTON_AFTER).is_multiple_of(NEWTON_EVERY)
            {
                // Every denominator is positive right after a full sweep, which is
                // what the Newton iteration needs as a starting point.
                let (solved, exact) = self.newton(&mults, cfg.inner_tol);
                mults = solved;
                if exact {
                    change = 0.0;
                }
            }
            // Recentre; the last axis absorbs the shifts so that every
            // denominator, and hence the update, is unchanged.
            let mut total_shift = 0.0;
            for j in 0..naxes.saturating_sub(1) {
                let weighted: f64 = mults[j].iter().zip(&targets[j]).map(|(m, q)| m * q).sum();
                let reference: f64 = targets[j].iter().map(|q| q * cfg.mu0).sum();
                let shift = weighted - reference;
                mults[j].iter_mut().for_each(|m| *m -= shift);
                total_shift += shift;
            }
            if naxes > 1 {
                mults[naxes - 1].iter_mut().for_each(|m| *m += total_shift);
            }
            last_change = change;
            last_residual =
                implied_residual(tau, index, pinned, reduced, degenerate, pdot, &mults);
            if change < cfg.inner_tol || last_residual < INNER_RESIDUAL_TOL {
                return Ok(Multipliers {
                    values: mults,
                    sweeps: sweep,
                    pinned: pinned.to_vec(),
                });
            }
        }
        if last_residual <= INNER_ACCEPT_TOL {
            return Ok(Multipliers {
                values: mults,
                sweeps: cfg.max_inner_iters,
                pinned: pinned.to_vec(),
            });
        }
        Err(Error::MultiplierNonConvergence {
            iterations: cfg.max_inner_iters,
            last_change,
            residual: last_residual,
        })
    }
}

/// Marginal error of the implied update at which the sweeps stop even if a
/// weakly determined multiplier is still moving. Multipliers of nearly
/// disconnected blocks of `tau` can stay ill-determined far below this.
const INNER_RESIDUAL_TOL: f64 = 1e-10;

/// Marginal error still accepted once the sweep budget is spent. Along the
/// directions fixed only by cells with responsibility near `1e-15` the dual
/// objective is flat to rounding, so the last digits cannot be recovered.
const INNER_ACCEPT_TOL: f64 = 1e-9;

/// Largest marginal-sum error of `tau / (sum_j mult_j + pdot)` over the free
/// cells, against the reduced targets. Infinite if a denominator is not
/// positive.
fn implied_residual(
    tau: &[f64],
    index: &CellIndex,
    pinned: &[bool],
    reduced: &[Vec<f64>],
    degenerate: &[Vec<bool>],
    pdot: &[f64],
    mults: &[Vec<f64>],
) -> f64 {
    let mut sums: Vec<Vec<f64>> = mults.iter().map(|m| vec![0.0; m.len()]).collect();
    for c in 0..index.cells() {
        if tau[c] <= 0.0 || pinned[c] {
            continue;
        }
        let a = pdot[c]
            + (0..mults.len())
                .map(|j| mults[j][index.coord(c, j)])
                .sum::<f64>();
        if !(a > 0.0) {
            return f64::INFINITY;
        }
        for (j, s) in sums.iter_mut().enumerate() {
            s[index.coord(c, j)] += tau[c] / a;
        }
    }
    let mut worst: f64 = 0.0;
    for j in 0..sums.len() {
        for k in 0..sums[j].len() {
            if !degenerate[j][k] {
                worst = worst.max((sums[j][k] - reduced[j][k]).abs());
            }
        }
    }
    worst
}

/// Alternating sweeps run before switching to Newton's method.
const NEWTON_AFTER: usize = 3;
/// Sweeps between Newton attempts if one fails.
const NEWTON_EVERY: usize = 10;

/// The multiplier equations are the stationarity conditions of the convex
/// function
/// `G(m) = sum_{j,k} q'_{j,k} m_{j,k} - sum_c tau_c log(sum_j m_{j,c_j} + pdot_c)`,
/// which is flat along shifts that move one axis up and another down. Adding
/// `(1/2) sum_{j<D-1} (q_j . m_j - mu0)^2` removes those directions without
/// moving the solution, so a damped Newton iteration converges to the
/// recentred multipliers.
struct DualProblem<'a> {
    tau: &'a [f64],
    index: &'a CellIndex,
    pinned: &'a [bool],
    degenerate: &'a [Vec<bool>],
    reduced: &'a [Vec<f64>],
    targets: &'a [Vec<f64>],
    pdot: &'a [f64],
    mu0: f64,
}

impl DualProblem<'_> {
    fn active(&self, c: usize) -> bool {
        self.tau[c] > 0.0 && !self.pinned[c]
    }

    fn denominator(&self, mults: &[Vec<f64>], c: usize) -> f64 {
        self.pdot[c]
            + mults
                .iter()
                .enumerate()
                .map(|(j, m)| m[self.index.coord(c, j)])
                .sum::<f64>()
    }

    /// Objective value, or `None` outside the domain.
    fn value(&self, mults: &[Vec<f64>]) -> Option<f64> {
        let naxes = mults.len();
        let mut v = 0.0;
        for (j, m) in mults.iter().enumerate() {
            for (k, &x) in m.iter().enumerate() {
                if !self.degenerate[j][k] {
                    v += self.reduced[j][k] * x;
                }
            }
            if j + 1 < naxes {
                let g = m
                    .iter()
                    .zip(&self.targets[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    - self.mu0;
                v += 0.5 * g * g;
            }
        }
        for c in (0..self.index.cells()).filter(|&c| self.active(c)) {
            let a = self.denominator(mults, c);
            if !(a > 0.0) {
                return None;
            }
            v -= self.tau[c] * a.ln();
        }
        Some(v)
    }

    /// Gradient, and optionally the Hessian, over the free variables.
    fn derivatives(
        &self,
        mults: &[Vec<f64>],
        slot: &[Vec<Option<usize>>],
        nvars: usize,
        hessian: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        let dims = &self.index.dims;
        let naxes = dims.len();
        let mut grad = vec![0.0; nvars];
        let mut hess = if hessian {
            vec![0.0; nvars * nvars]
        } else {
            Vec::new()
        };
        for j in 0..naxes {
            for k in 0..dims[j] {
                if let Some(v) = slot[j][k] {
                    grad[v] = self.reduced[j][k];
                }
            }
        }
        let mut vars = Vec::with_capacity(naxes);
        for c in (0..self.index.cells()).filter(|&c| self.active(c)) {
            let a = self.denominator(mults, c);
            let r = self.tau[c] / a;
            let h = r / a;
            vars.clear();
            vars.extend((0..naxes).filter_map(|j| slot[j][self.index.coord(c, j)]));
            for &u in &vars {
                grad[u] -= r;
                if hessian {
                    for &w in &vars {
                        hess[u * nvars + w] += h;
                    }
                }
            }
        }
        for j in 0..naxes.saturating_sub(1) {
            let g = mults[j]
                .iter()
                .zip(&self.targets[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                - self.mu0;
            for k in 0..dims[j] {
                let Some(u) = slot[j][k] else { continue };
                grad[u] += g * self.targets[j][k];
                if hessian {
                    for l in 0..dims[j] {
                        if let Some(w) = slot[j][l] {
                            hess[u * nvars + w] += self.targets[j][k] * self.targets[j][l];
                        }
                    }
                }
            }
        }
        (grad, hess)
    }

    /// Returns the last iterate and whether it solved the equations to
    /// rounding accuracy. Iterates never raise the objective, so the last
    /// one is usable even when the iteration stalls.
    fn newton(&self, start: &[Vec<f64>], tol: f64) -> (Vec<Vec<f64>>, bool) {
        let dims = &self.index.dims;
        let naxes = dims.len();
        // Free variables: multipliers of non-degenerate slices.
        let mut slot = Vec::with_capacity(naxes);
        let mut nvars = 0;
        for j in 0..naxes {
            let s: Vec<Option<usize>> = (0..dims[j])
                .map(|k| {
                    (!self.degenerate[j][k]).then(|| {
                        nvars += 1;
                        nvars - 1
                    })
                })
                .collect();
            slot.push(s);
        }
        let sup = |g: &[f64]| g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut mults = start.to_vec();
        let Some(mut value) = self.value(&mults) else {
            return (mults, false);
        };
        for _ in 0..MAX_NEWTON {
            let (grad, hess) = self.derivatives(&mults, &slot, nvars, true);
            let gnorm = sup(&grad);
            let Some(step) = pseudo_solve(hess, &grad, nvars) else {
                return (mults, false);
            };
            // Multipliers of slices with almost no responsibility are weakly
            // determined, so the marginal error decides convergence.
            if gnorm < NEWTON_GRAD_TOL || sup(&step) < tol * 1e-2 && gnorm < 1e3 * NEWTON_GRAD_TOL {
                return (mults, true);
            }
            let slope: f64 = -grad.iter().zip(&step).map(|(g, s)| g * s).sum::<f64>();
            let flat = 1e-14 * (1.0 + value.abs());
            let mut t: f64 = 1.0;
            loop {
                let mut trial = mults.clone();
                for j in 0..naxes {
                    for k in 0..dims[j] {
                        if let Some(u) = slot[j][k] {
                            trial[j][k] -= t * step[u];
                        }
                    }
                }
                if trial == mults {
                    return (mults, false);
                }
                // Near the solution the objective change drowns in rounding;
                // a step is then judged by the gradient instead.
                let accept = match self.value(&trial) {
                    Some(v) if v <= value + 1e-4 * t * slope => Some(v),
                    Some(v)
                        if (v - value).abs() <= flat
                            && sup(&self.derivatives(&trial, &slot, nvars, false).0) < gnorm =>
                    {
                        Some(v.min(value))
                    }
                    _ => None,
                };
                if let Some(v) = accept {
                    mults = trial;
                    value = v;
                    break;
                }
                t *= 0.5;
            }
        }
        (mults, false)
    }
}

/// Largest marginal-sum error accepted from the Newton iteration.
const NEWTON_GRAD_TOL: f64 = 1e-13;
const MAX_NEWTON: usize = 100;

/// Minimum-norm solution of `A x = b` for symmetric positive semidefinite
/// `A`, dropping singular values below `1e-18` of the largest.
///
/// Cells with tiny responsibility give directions of vanishing curvature
/// that a plain Cholesky factorisation cannot resolve.
fn pseudo_solve(a: Vec<f64>, b: &[f64], n: usize) -> Option<Vec<f64>> {
    let svd = nalgebra::DMatrix::from_vec(n, n, a).svd(true, true);
    let top = svd.singular_values.max();
    if !(top > 0.0 && top.is_finite()) {
        return None;
    }
    let x = svd
        .solve(&nalgebra::DVector::from_column_slice(b), 1e-18 * top)
        .ok()?;
    x.iter()
        .all(|v| v.is_finite())
        .then(|| x.iter().copied().collect())
}

/// Multiplicative update `r_c = tau_c / (sum_j mult_j + pdot_c)`.
pub fn m_step(
    tau: &[f64],
    dims: &[usize],
    targets: &[Vec<f64>],
    mults: &Multipliers,
    pdot: &[f64],
) -> Result<Vec<f64>> {
    let index = CellIndex::new(dims);
    m_step_with_index(tau, &index, targets, mults, pdot)
}

fn m_step_with_index(
    tau: &[f64],
    index: &CellIndex,
    targets: &[Vec<f64>],
    mults: &Multipliers,
    pdot: &[f64],
) -> Result<Vec<f64>> {
    (0..index.cells())
        .map(|c| {
            if mults.pinned[c] {
                return Ok(outer_value(index, targets, c));
            }
            if tau[c] <= 0.0 {
                return Ok(0.0);
            }
            let den: f64 = pdot[c]
                + mults
                    .values
                    .iter()
                    .enumerate()
                    .map(|(j, m)| m[index.coord(c, j)])
                    .sum::<f64>();
            if !(den > 0.0) {
                return Err(Error::NegativeDenominator {
                    cell: c,
                    value: den,
                });
            }
            Ok(tau[c] / den)
        })
        .collect()
}

/// Outcome of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ParamTensor,
    /// Multipliers of every axis from the last M-step; `multipliers[0]` is
    /// `mu` and `multipliers[1]` is `lambda`.
    pub multipliers: Vec<Vec<f64>>,
    /// Penalized objective at each M-step output.
    pub lp_trajectory: Vec<f64>,
    /// Mean pseudo-log-likelihood at each M-step output.
    pub lpstar_trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Stationarity residual on entries above [`KKT_ENTRY_FLOOR`].
    pub kkt_residual: f64,
    /// Largest marginal-sum residual seen after any M-step.
    pub max_step_residual: f64,
    /// Largest `|sum tau - 1|` seen in any E-step.
    pub max_tau_deviation: f64,
    pub scad: ScadParams,
    pub config: FitConfig,
}

/// Entries at or below this are excluded from the stationarity check.
pub const KKT_ENTRY_FLOOR: f64 = 1e-6;

impl FitReport {
    pub fn mu(&self) -> &[f64] {
        &self.multipliers[0]
    }

    pub fn lambda(&self) -> &[f64] {
        &self.multipliers[1]
    }

    pub fn model(&self, bases: &[BasisSystem]) -> Result<CopulaModel> {
        CopulaModel::new(bases.to_vec(), self.params.clone())
    }

    pub fn to_document(&self, seed: Option<u64>) -> FitReportDocument {
        FitReportDocument {
            params: ParamsDocument {
                dims: self.params.dims().to_vec(),
                entries: self.params.entries().to_vec(),
                targets: self.params.targets().to_vec(),
            },
            mu: self.multipliers[0].clone(),
            lambda: self.multipliers.get(1).cloned().unwrap_or_default(),
            multipliers: self.multipliers.clone(),
            lp_trajectory: self.lp_trajectory.clone(),
            lpstar_trajectory: self.lpstar_trajectory.clone(),
            iterations: self.iterations,
            converged: self.converged,
            kkt_residual: self.kkt_residual,
            max_step_residual: self.max_step_residual,
            scad: self.scad,
            config: self.config,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub dims: Vec<usize>,
    pub entries: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
}

/// JSON form of a [`FitReport`] with the configuration and seed echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportDocument {
    pub params: ParamsDocument,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub multipliers: Vec<Vec<f64>>,
    pub lp_trajectory: Vec<f64>,
    pub lpstar_trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub max_step_residual: f64,
    pub scad: ScadParams,
    pub config: FitConfig,
    pub seed: Option<u64>,
}

/// Two-dimensional fit.
pub fn fit(
    sample: &PseudoSample,
    bases: &[BasisSystem],
    p: ScadParams,
    cfg: &FitConfig,
) -> Result<FitReport> {
    if bases.len() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: bases.len(),
        });
    }
    fit_nd(sample, bases, p, cfg)
}

/// Fit for any number of axes `D >= 2`.
pub fn fit_nd(
    sample: &PseudoSample,
    bases: &[BasisSystem],
    p: ScadParams,
    cfg: &FitConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    ScadParams::new(p.alpha, p.beta)?;
    if bases.len() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: bases.len(),
        });
    }
    if sample.is_empty() {
        return Err(Error::TooFewObservations { needed: 1, got: 0 });
    }
    let design = Design::new(sample, bases)?;
    fit_design(&design, bases, p, cfg)
}

/// Fit on a precomputed design.
/// Responsibility below which a cell takes no part in the M-step.
///
/// The multipliers that route mass through cells with responsibility near
/// `1e-50` are far outside floating-point range, while dropping such cells
/// moves the marginal sums by less than the floor.
pub const TAU_FLOOR: f64 = 1e-12;

pub fn fit_design(
    design: &Design,
    bases: &[BasisSystem],
    p: ScadParams,
    cfg: &FitConfig,
) -> Result<FitReport> {
    let targets: Vec<Vec<f64>> = bases.iter().map(|b| b.weights().to_vec()).collect();
    let dims: Vec<usize> = bases.iter().map(BasisSystem::count).collect();
    let index = CellIndex::new(&dims);
    let init = init_from_design(design, bases);
    let mut entries = init.entries().to_vec();

    let mut resp = e_step_design(design, &entries)?;
    let mut max_tau_deviation = (resp.tau.iter().sum::<f64>() - 1.0).abs();
    let mut lp_trajectory = Vec::new();
    let mut lpstar_trajectory = Vec::new();
    let mut max_step_residual: f64 = 0.0;
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut multipliers = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut pdot = vec![0.0; entries.len()];
    let mut kkt_residual = f64::INFINITY;

    while iterations < cfg.max_outer_iters {
        for (d, &r) in pdot.iter_mut().zip(&entries) {
            *d = scad_deriv(r.max(0.0), p);
        }
        // Responsibilities below the floor are treated as exact zeros.
        let tau: Vec<f64> = resp
            .tau
            .iter()
            .map(|&t| if t < TAU_FLOOR { 0.0 } else { t })
            .collect();
        let mults = solve_with_index(&tau, &index, &targets, &pdot, cfg, warm.as_deref())?;
        let next = m_step_with_index(&tau, &index, &targets, &mults, &pdot)?;
        let delta = next
            .iter()
            .zip(&entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        entries = next;
        iterations += 1;
        max_step_residual = max_step_residual.max(marginal_residual(&entries, &index, &targets));

        resp = e_step_design(design, &entries)?;
        max_tau_deviation = max_tau_deviation.max((resp.tau.iter().sum::<f64>() - 1.0).abs());
        lpstar_trajectory.push(resp.mean_loglik);
        lp_trajectory.push(resp.mean_loglik - total_penalty(&entries, p));
        multipliers = mults.values.clone();
        warm = Some(mults.values);

        if delta < cfg.outer_tol {
            kkt_residual = stationarity_residual(&entries, &resp.tau, &index, &multipliers, p);
            if cfg.kkt_tol.is_none_or(|t| kkt_residual <= t) {
                converged = true;
                break;
            }
        }
    }

    if !converged {
        kkt_residual = stationarity_residual(&entries, &resp.tau, &index, &multipliers, p);
    }
    let params = init.with_entries(entries)?;
    Ok(FitReport {
        params,
        multipliers,
        lp_trajectory,
        lpstar_trajectory,
        iterations,
        converged,
        kkt_residual,
        max_step_residual,
        max_tau_deviation,
        scad: p,
        config: *cfg,
    })
}

fn marginal_residual(entries: &[f64], index: &CellIndex, targets: &[Vec<f64>]) -> f64 {
    let mut sums: Vec<Vec<f64>> = index.dims.iter().map(|&m| vec![0.0; m]).collect();
    for (c, &r) in entries.iter().enumerate() {
        for (j, s) in sums.iter_mut().enumerate() {
            s[index.coord(c, j)] += r;
        }
    }
    sums.iter()
        .zip(targets)
        .flat_map(|(s, t)| s.iter().zip(t).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

/// `max |tau_c / r_c - sum_j mult_j - pdot(r_c)|` over entries above the floor.
///
/// `tau_c / r_c` is the score `(1/N) sum_t prod_j phi_j / c(u_t)`.
fn stationarity_residual(
    entries: &[f64],
    tau: &[f64],
    index: &CellIndex,
    mults: &[Vec<f64>],
    p: ScadParams,
) -> f64 {
    if mults.is_empty() {
        return f64::INFINITY;
    }
    (0..entries.len())
        .filter(|&c| entries[c] > KKT_ENTRY_FLOOR)
        .map(|c| {
            let score = tau[c] / entries[c];
            let m: f64 = mults
                .iter()
                .enumerate()
                .map(|(j, v)| v[index.coord(c, j)])
                .sum();
            (score - m - scad_deriv(entries[c], p)).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(alpha: f64, beta: f64) -> ScadParams {
        ScadParams::new(alpha, beta).unwrap()
    }

    #[test]
    fn scad_branches() {
        assert!((scad(0.05, p(0.1, 3.0)) - 0.005).abs() < 1e-15);
        assert!((scad(0.5, p(0.1, 3.0)) - 0.02).abs() < 1e-15);
        assert_eq!(scad(0.7, p(0.0, 3.0)), 0.0);
        assert_eq!(scad_deriv(0.05, p(0.1, 3.0)), 0.1);
        assert!((scad_deriv(0.2, p(0.1, 3.0)) - 0.05).abs() < 1e-15);
        assert_eq!(scad_deriv(0.5, p(0.1, 3.0)), 0.0);
    }

    #[test]
    fn scad_is_continuous_at_the_knots() {
        let q = p(0.1, 3.7);
        for r in [0.1, 0.37] {
            assert!((scad(r - 1e-12, q) - scad(r + 1e-12, q)).abs() < 1e-12);
            assert!((scad_deriv(r - 1e-12, q) - scad_deriv(r + 1e-12, q)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_tuning() {
        assert!(ScadParams::new(-0.1, 3.0).is_err());
        assert!(ScadParams::new(0.1, 1.5).is_err());
        assert!(ScadParams::new(f64::NAN, 3.0).is_err());
    }

    #[test]
    fn single_cell_multipliers() {
        let cfg = FitConfig::default();
        let m = solve_multipliers(&[1.0], &[1, 1], &[vec![1.0], vec![1.0]], &[0.0], &cfg, None)
            .unwrap();
        assert!((m.values[0][0] - 0.5).abs() < 1e-12);
        assert!((m.values[1][0] - 0.5).abs() < 1e-12);
        let r = m_step(&[1.0], &[1, 1], &[vec![1.0], vec![1.0]], &m, &[0.0]).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independence_responsibilities_give_unit_denominators() {
        let q = vec![0.25; 4];
        let qs = vec![0.125, 0.25, 0.25, 0.25, 0.125];
        let tau: Vec<f64> = q
            .iter()
            .flat_map(|a| qs.iter().map(move |b| a * b))
            .collect();
        let cfg = FitConfig::default();
        let m = solve_multipliers(
            &tau,
            &[4, 5],
            &[q.clone(), qs.clone()],
            &vec![0.0; 20],
            &cfg,
            None,
        )
        .unwrap();
        for mu in &m.values[0] {
            assert!((mu - 0.5).abs() < 1e-10);
        }
        for la in &m.values[1] {
            assert!((la - 0.5).abs() < 1e-10);
        }
        let weighted: f64 = m.values[0].iter().zip(&q).map(|(a, b)| a * b).sum();
        assert!((weighted - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_responsibility_gives_zero_entry() {
        let tau = vec![0.5, 0.0, 0.0, 0.5];
        let targets = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let cfg = FitConfig::default();
        let m = solve_multipliers(&tau, &[2, 2], &targets, &[0.0; 4], &cfg, None).unwrap();
        let r = m_step(&tau, &[2, 2], &targets, &m, &[0.0; 4]).unwrap();
        assert_eq!(r[1], 0.0);
        assert_eq!(r[2], 0.0);
        assert!((r[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_zero_row_is_pinned_to_independence() {
        // Row 0 carries no responsibility at all.
        let tau = vec![0.0, 0.0, 0.3, 0.2, 0.1, 0.4];
        let targets = vec![vec![0.2, 0.4, 0.4], vec![0.5, 0.5]];
        let cfg = FitConfig::default();
        let m = solve_multipliers(&tau, &[3, 2], &targets, &[0.0; 6], &cfg, None).unwrap();
        assert!(m.pinned[0] && m.pinned[1] && !m.pinned[2]);
        let r = m_step(&tau, &[3, 2], &targets, &m, &[0.0; 6]).unwrap();
        assert!((r[0] - 0.1).abs() < 1e-15 && (r[1] - 0.1).abs() < 1e-15);
        let rows = [r[0] + r[1], r[2] + r[3], r[4] + r[5]];
        let cols = [r[0] + r[2] + r[4], r[1] + r[3] + r[5]];
        for (s, t) in rows.iter().zip(&targets[0]) {
            assert!((s - t).abs() < 1e-9);
        }
        for (s, t) in cols.iter().zip(&targets[1]) {
            assert!((s - t).abs() < 1e-9);
        }
    }

    #[test]
    fn solve_one_matches_closed_form() {
        // tau / (a + x) = q  =>  x = tau / q - a.
        let x = solve_one(&[(0.3, 0.2)], 0.5, 1e-14);
        assert!((x - 0.4).abs() < 1e-12);
    }
}
