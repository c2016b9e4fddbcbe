//! Tensor-product B-spline copulas in two or more dimensions.
//!
//! The parameter tensor `R` is stored dense in row-major order (last axis
//! contiguous). Its entries are nonnegative, and summing out every axis but
//! `j` leaves the basis weights `q` of axis `j`; these marginal constraints
//! are what make every univariate margin of the copula uniform.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};

/// Violation threshold used by [`validate`].
pub const CONSTRAINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    dims: Vec<usize>,
    entries: Vec<f64>,
    targets: Vec<Vec<f64>>,
}

impl ParamTensor {
    pub fn new(dims: Vec<usize>, entries: Vec<f64>, targets: Vec<Vec<f64>>) -> Result<Self> {
        let size: usize = dims.iter().product();
        if dims.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: dims.len(),
            });
        }
        if entries.len() != size {
            return Err(Error::DimensionMismatch {
                expected: size,
                got: entries.len(),
            });
        }
        if targets.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                got: targets.len(),
            });
        }
        for (t, &m) in targets.iter().zip(&dims) {
            if t.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: t.len(),
                });
            }
        }
        Ok(Self {
            dims,
            entries,
            targets,
        })
    }

    /// The tensor `r = q_1 ⊗ q_2 ⊗ ... ⊗ q_D` of the independence copula.
    pub fn outer_product(targets: Vec<Vec<f64>>) -> Result<Self> {
        let dims: Vec<usize> = targets.iter().map(Vec::len).collect();
        let mut entries = vec![1.0];
        for t in &targets {
            entries = entries
                .iter()
                .flat_map(|&e| t.iter().map(move |&q| e * q))
                .collect();
        }
        Self::new(dims, entries, targets)
    }

    /// Builds a 2-D tensor from rows, taking targets from the two bases.
    pub fn from_rows(
        rows: &[Vec<f64>],
        row_basis: &BasisSystem,
        col_basis: &BasisSystem,
    ) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidConfig("ragged parameter matrix".into()));
        }
        Self::new(
            vec![m, n],
            rows.concat(),
            vec![row_basis.weights().to_vec(), col_basis.weights().to_vec()],
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.dims)
    }

    /// Entry at a 2-D position.
    pub fn get2(&self, k: usize, l: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.entries[k * self.dims[1] + l]
    }

    /// Sums over all axes except `axis`.
    pub fn marginal_sums(&self, axis: usize) -> Vec<f64> {
        let strides = self.strides();
        let m = self.dims[axis];
        let mut sums = vec![0.0; m];
        for (c, &r) in self.entries.iter().enumerate() {
            sums[(c / strides[axis]) % m] += r;
        }
        sums
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn with_entries(&self, entries: Vec<f64>) -> Result<Self> {
        Self::new(self.dims.clone(), entries, self.targets.clone())
    }
}

pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for j in (0..dims.len().saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * dims[j + 1];
    }
    strides
}

/// Raw constraint residuals of a parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Max absolute marginal-sum residual, per axis.
    pub axis_residuals: Vec<f64>,
    pub min_entry: f64,
    /// `total - 1`.
    pub total_deviation: f64,
    pub violated: bool,
}

impl ConstraintReport {
    pub fn max_residual(&self) -> f64 {
        self.axis_residuals.iter().cloned().fold(0.0, f64::max)
    }
}

/// Checks nonnegativity and the marginal-sum constraints against `bases`.
pub fn validate(params: &ParamTensor, bases: &[BasisSystem]) -> Result<ConstraintReport> {
    if bases.len() != params.ndim() {
        return Err(Error::DimensionMismatch {
            expected: params.ndim(),
            got: bases.len(),
        });
    }
    for (b, &m) in bases.iter().zip(params.dims()) {
        if b.count() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: b.count(),
            });
        }
    }
    let axis_residuals: Vec<f64> = bases
        .iter()
        .enumerate()
        .map(|(j, b)| {
            params
                .marginal_sums(j)
                .iter()
                .zip(b.weights())
                .map(|(s, q)| (s - q).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let min_entry = params
        .entries()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let total_deviation = params.total() - 1.0;
    let violated = min_entry < 0.0
        || total_deviation.abs() > CONSTRAINT_TOL
        || axis_residuals.iter().any(|&r| r > CONSTRAINT_TOL);
    Ok(ConstraintReport {
        axis_residuals,
        min_entry,
        total_deviation,
        violated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopulaModel {
    bases: Vec<BasisSystem>,
    params: ParamTensor,
}

impl CopulaModel {
    pub fn new(bases: Vec<BasisSystem>, params: ParamTensor) -> Result<Self> {
        if bases.len() != params.ndim() {
            return Err(Error::DimensionMismatch {
                expected: params.ndim(),
                got: bases.len(),
            });
        }
        for (j, b) in bases.iter().enumerate() {
            if b.count() != params.dims()[j] {
                return Err(Error::DimensionMismatch {
                    expected: params.dims()[j],
                    got: b.count(),
                });
            }
            let mismatch = b
                .weights()
                .iter()
                .zip(&params.targets()[j])
                .any(|(q, t)| (q - t).abs() > 1e-12);
            if mismatch {
                return Err(Error::InvalidConfig(format!(
                    "targets of axis {j} differ from its basis weights"
                )));
            }
        }
        Ok(Self { bases, params })
    }

    /// Builds a 2-D model from a row-major matrix.
    pub fn from_rows(
        rows: &[Vec<f64>],
        row_basis: BasisSystem,
        col_basis: BasisSystem,
    ) -> Result<Self> {
        let params = ParamTensor::from_rows(rows, &row_basis, &col_basis)?;
        Self::new(vec![row_basis, col_basis], params)
    }

    pub fn bases(&self) -> &[BasisSystem] {
        &self.bases
    }

    pub fn params(&self) -> &ParamTensor {
        &self.params
    }

    pub fn ndim(&self) -> usize {
        self.bases.len()
    }

    pub fn validate(&self) -> ConstraintReport {
        validate(&self.params, &self.bases).expect("model dimensions are checked at construction")
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.ndim() {
            return Err(Error::DimensionMismatch {
                expected: self.ndim(),
                got: point.len(),
            });
        }
        for (axis, &value) in point.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfUnitInterval { axis, value });
            }
        }
        Ok(())
    }

    /// Copula density `c(u) = sum r_k prod_j phi_{k_j}(u_j)`.
    ///
    /// Only the `d_j + 1` active basis functions per axis are visited.
    pub fn density(&self, point: &[f64]) -> Result<f64> {
        self.check_point(point)?;
        Ok(self.density_unchecked(point))
    }

    pub(crate) fn density_unchecked(&self, point: &[f64]) -> f64 {
        let windows: Vec<(usize, Vec<f64>)> = self
            .bases
            .iter()
            .zip(point)
            .map(|(b, &u)| {
                let mut vals = vec![0.0; b.degree() + 1];
                let first = b.phi_active(u, &mut vals);
                (first, vals)
            })
            .collect();
        contract_windows(&self.params, &windows)
    }

    /// Copula distribution function `C(x) = sum r_k prod_j Phi_{k_j}(x_j)`.
    pub fn cdf(&self, point: &[f64]) -> Result<f64> {
        self.check_point(point)?;
        let factors: Vec<Vec<f64>> = self
            .bases
            .iter()
            .zip(point)
            .map(|(b, &x)| b.cdf_all(x))
            .collect();
        Ok(contract_vectors(
            self.params.entries(),
            self.params.dims(),
            &factors,
        ))
    }

    /// Density on the tensor grid `axes[0] x axes[1] x ...`, row-major.
    pub fn density_grid(&self, axes: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.grid_with(axes, |b, x| b.phi_all(x))
    }

    /// Distribution function on a tensor grid, row-major.
    pub fn cdf_grid(&self, axes: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.grid_with(axes, |b, x| b.cdf_all(x))
    }

    fn grid_with<F>(&self, axes: &[Vec<f64>], factor: F) -> Result<Vec<f64>>
    where
        F: Fn(&BasisSystem, f64) -> Vec<f64>,
    {
        if axes.len() != self.ndim() {
            return Err(Error::DimensionMismatch {
                expected: self.ndim(),
                got: axes.len(),
            });
        }
        for (axis, pts) in axes.iter().enumerate() {
            if let Some(&value) = pts.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::OutOfUnitInterval { axis, value });
            }
        }
        let mut tensor = self.params.entries().to_vec();
        let mut shape = self.params.dims().to_vec();
        for (j, (b, pts)) in self.bases.iter().zip(axes).enumerate() {
            let matrix: Vec<f64> = pts.iter().flat_map(|&x| factor(b, x)).collect();
            tensor = mode_product(&tensor, &shape, j, &matrix, pts.len());
            shape[j] = pts.len();
        }
        Ok(tensor)
    }

    /// Serializable description of this model.
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            degrees: self.bases.iter().map(BasisSystem::degree).collect(),
            counts: self.bases.iter().map(BasisSystem::count).collect(),
            interior_knot_counts: self
                .bases
                .iter()
                .map(BasisSystem::interior_knot_count)
                .collect(),
            entries: self.params.entries().to_vec(),
            targets: self.params.targets().to_vec(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let n = doc.degrees.len();
        if doc.counts.len() != n || doc.interior_knot_counts.len() != n {
            return Err(Error::Parse(
                "degrees, counts and interior_knot_counts differ in length".into(),
            ));
        }
        let bases = doc
            .degrees
            .iter()
            .zip(&doc.counts)
            .map(|(&d, &m)| BasisSystem::uniform(d, m))
            .collect::<Result<Vec<_>>>()?;
        for (b, &knots) in bases.iter().zip(&doc.interior_knot_counts) {
            if b.interior_knot_count() != knots {
                return Err(Error::Parse(format!(
                    "degree {} with {} functions has {} interior knots, document says {}",
                    b.degree(),
                    b.count(),
                    b.interior_knot_count(),
                    knots
                )));
            }
        }
        let params =
            ParamTensor::new(doc.counts.clone(), doc.entries.clone(), doc.targets.clone())?;
        Self::new(bases, params)
    }
}

/// JSON form of a [`CopulaModel`]; entries are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub degrees: Vec<usize>,
    pub counts: Vec<usize>,
    pub interior_knot_counts: Vec<usize>,
    pub entries: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
}

/// Maximal positive dependence model `R = diag(q)` for a shared basis.
pub fn diagonal_model(sys: &BasisSystem) -> CopulaModel {
    let m = sys.count();
    let mut entries = vec![0.0; m * m];
    for (k, &q) in sys.weights().iter().enumerate() {
        entries[k * m + k] = q;
    }
    let params = ParamTensor::new(
        vec![m, m],
        entries,
        vec![sys.weights().to_vec(), sys.weights().to_vec()],
    )
    .expect("square tensor with matching targets");
    CopulaModel::new(vec![sys.clone(), sys.clone()], params).expect("consistent by construction")
}

/// Independence copula `r = q ⊗ q*` on two bases.
pub fn independence_model(x: &BasisSystem, y: &BasisSystem) -> CopulaModel {
    independence_model_nd(&[x.clone(), y.clone()])
}

/// Independence copula on any number of axes.
pub fn independence_model_nd(bases: &[BasisSystem]) -> CopulaModel {
    let params = ParamTensor::outer_product(bases.iter().map(|b| b.weights().to_vec()).collect())
        .expect("outer product has consistent shape");
    CopulaModel::new(bases.to_vec(), params).expect("consistent by construction")
}

/// Sum of `r` against per-axis windows `(first index, values)`.
pub(crate) fn contract_windows(params: &ParamTensor, windows: &[(usize, Vec<f64>)]) -> f64 {
    let dims = params.dims();
    let entries = params.entries();
    if dims.len() == 2 {
        let n = dims[1];
        let (f0, v0) = &windows[0];
        let (f1, v1) = &windows[1];
        let mut total = 0.0;
        for (a, &x) in v0.iter().enumerate() {
            let row = &entries[(f0 + a) * n + f1..(f0 + a) * n + f1 + v1.len()];
            let inner: f64 = row.iter().zip(v1).map(|(r, y)| r * y).sum();
            total += x * inner;
        }
        return total;
    }
    let strides = strides_of(dims);
    let widths: Vec<usize> = windows.iter().map(|(_, v)| v.len()).collect();
    let count: usize = widths.iter().product();
    let mut idx = vec![0usize; dims.len()];
    let mut total = 0.0;
    for _ in 0..count {
        let mut offset = 0;
        let mut weight = 1.0;
        for (j, &i) in idx.iter().enumerate() {
            offset += (windows[j].0 + i) * strides[j];
            weight *= windows[j].1[i];
        }
        total += entries[offset] * weight;
        for j in (0..idx.len()).rev() {
            idx[j] += 1;
            if idx[j] < widths[j] {
                break;
            }
            idx[j] = 0;
        }
    }
    total
}

/// Full contraction of a row-major tensor with one vector per axis.
pub(crate) fn contract_vectors(entries: &[f64], dims: &[usize], vectors: &[Vec<f64>]) -> f64 {
    let mut current = entries.to_vec();
    for (j, v) in vectors.iter().enumerate().rev() {
        let m = dims[j];
        current = current
            .chunks_exact(m)
            .map(|chunk| chunk.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
    }
    current[0]
}

/// Mode-`axis` product: replaces axis of length `shape[axis]` with `rows`,
/// using `matrix` of shape `rows x shape[axis]` (row-major).
fn mode_product(
    tensor: &[f64],
    shape: &[usize],
    axis: usize,
    matrix: &[f64],
    rows: usize,
) -> Vec<f64> {
    let m = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * rows * inner];
    for o in 0..outer {
        for g in 0..rows {
            let coeffs = &matrix[g * m..(g + 1) * m];
            let dst = &mut out[(o * rows + g) * inner..(o * rows + g + 1) * inner];
            for (k, &a) in coeffs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let src = &tensor[(o * m + k) * inner..(o * m + k + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(m: usize) -> BasisSystem {
        BasisSystem::uniform(3, m).unwrap()
    }

    #[test]
    fn independence_entries_and_density() {
        let model = independence_model(&cubic(4), &cubic(5));
        assert_eq!(model.params().get2(0, 0), 0.03125);
        for i in 0..5 {
            for j in 0..5 {
                let p = [i as f64 / 4.0, j as f64 / 4.0];
                assert!((model.density(&p).unwrap() - 1.0).abs() < 1e-13);
                assert!((model.cdf(&p).unwrap() - p[0] * p[1]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn diagonal_model_values() {
        let sys = cubic(5);
        let model = diagonal_model(&sys);
        assert_eq!(model.params().get2(0, 0), 0.125);
        assert_eq!(model.params().get2(2, 2), 0.25);
        assert_eq!(model.params().get2(0, 1), 0.0);
        assert!(!model.validate().violated);
        assert!((model.density(&[0.0, 0.0]).unwrap() - 8.0).abs() < 1e-13);
        assert_eq!(model.density(&[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn scaled_tensor_is_flagged() {
        let model = independence_model(&cubic(4), &cubic(5));
        let scaled: Vec<f64> = model.params().entries().iter().map(|r| r * 1.01).collect();
        let params = model.params().with_entries(scaled).unwrap();
        let report = validate(&params, model.bases()).unwrap();
        assert!((report.total_deviation - 0.01).abs() < 1e-12);
        assert!(report.violated);
    }

    #[test]
    fn rejects_points_outside_the_cube() {
        let model = independence_model(&cubic(4), &cubic(4));
        assert!(matches!(
            model.density(&[0.5, 1.5]),
            Err(Error::OutOfUnitInterval { axis: 1, .. })
        ));
        assert!(matches!(
            model.density(&[0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn grid_matches_pointwise() {
        let sys = cubic(6);
        let model = diagonal_model(&sys);
        let axis: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let grid = model.density_grid(&[axis.clone(), axis.clone()]).unwrap();
        let cgrid = model.cdf_grid(&[axis.clone(), axis.clone()]).unwrap();
        for (i, &u) in axis.iter().enumerate() {
            for (j, &v) in axis.iter().enumerate() {
                let want = model.density(&[u, v]).unwrap();
                assert!((grid[i * 11 + j] - want).abs() < 1e-12);
                let want = model.cdf(&[u, v]).unwrap();
                assert!((cgrid[i * 11 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_dimensional_windows_match_full_contraction() {
        let bases = vec![
            cubic(5),
            BasisSystem::uniform(2, 4).unwrap(),
            BasisSystem::uniform(1, 3).unwrap(),
        ];
        let model = independence_model_nd(&bases);
        let p = [0.3, 0.7, 0.45];
        let full = contract_vectors(
            model.params().entries(),
            model.params().dims(),
            &bases
                .iter()
                .zip(p)
                .map(|(b, x)| b.phi_all(x))
                .collect::<Vec<_>>(),
        );
        assert!((model.density(&p).unwrap() - full).abs() < 1e-13);
        assert!((full - 1.0).abs() < 1e-13);
    }

    #[test]
    fn document_round_trip() {
        let model = diagonal_model(&cubic(5));
        let doc = model.to_document();
        assert_eq!(doc.interior_knot_counts, vec![1, 1]);
        let back = CopulaModel::from_document(&doc).unwrap();
        assert_eq!(back, model);
    }
}
