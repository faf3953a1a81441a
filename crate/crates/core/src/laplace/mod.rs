//! From a Hessian at the mode to a Gaussian posterior: inversion,
//! Schur-complement marginalisation, nearest-PD repair, correlations,
//! sampling and credible bands.

mod symmetric;

pub use symmetric::{PdStatus, SymmetricMatrix};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, submatrix};
use crate::models::OdeModel;
use crate::sensitivity::solve_reference;

fn factor(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        // rerun the scalar factorisation to locate the failing pivot
        None => Err(cholesky(m).err().unwrap_or(Error::NotPositiveDefinite { pivot: 0 })),
    }
}

/// `H⁻¹` through a Cholesky factorisation; the result is marked verified-PD.
pub fn invert_full(h: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let inv = factor(&h.to_dense())?.inverse();
    Ok(SymmetricMatrix::from_upper(&inv)?.with_status(PdStatus::VerifiedPd))
}

/// `H⁻¹` by LU for matrices that failed Cholesky; status stays unverified.
pub fn invert_lu(h: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let inv = h
        .to_dense()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{0}x{0} matrix has no inverse", h.dim())))?;
    let mut sym = SymmetricMatrix::from_upper(&inv)?;
    // average the two triangles, LU does not preserve symmetry
    for i in 0..h.dim() {
        for j in (i + 1)..h.dim() {
            sym.set(i, j, 0.5 * (inv[(i, j)] + inv[(j, i)]));
        }
    }
    Ok(sym)
}

fn complement(dim: usize, keep: &[usize]) -> Result<Vec<usize>> {
    let mut mask = vec![false; dim];
    for &k in keep {
        if k >= dim {
            return Err(Error::Dimension(format!("keep index {k} out of range for dimension {dim}")));
        }
        if mask[k] {
            return Err(Error::Input(format!("keep index {k} repeated")));
        }
        mask[k] = true;
    }
    if keep.is_empty() {
        return Err(Error::Input("keep set is empty".into()));
    }
    Ok((0..dim).filter(|&i| !mask[i]).collect())
}

/// Precision of the kept coordinates after marginalising the rest:
/// `A − B D⁻¹ C`, with `A` the kept block and `D` its complement.
pub fn schur_complement(h: &SymmetricMatrix, keep: &[usize]) -> Result<SymmetricMatrix> {
    let rest = complement(h.dim(), keep)?;
    let full = h.to_dense();
    let a = submatrix(&full, keep, keep);
    if rest.is_empty() {
        return SymmetricMatrix::from_upper(&a);
    }
    let b = submatrix(&full, keep, &rest);
    let d = submatrix(&full, &rest, &rest);
    let dinv_c = match Cholesky::new(d.clone()) {
        Some(c) => c.solve(&b.transpose()),
        None => d
            .lu()
            .solve(&b.transpose())
            .ok_or_else(|| Error::Singular(format!("complement block ({} coordinates) is singular", rest.len())))?,
    };
    if dinv_c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("complement block is numerically singular".into()));
    }
    SymmetricMatrix::from_upper(&(a - b * dinv_c))
}

/// Covariance of the kept coordinates, `(A − B D⁻¹ C)⁻¹`.
pub fn schur_block_covariance(h: &SymmetricMatrix, keep: &[usize]) -> Result<SymmetricMatrix> {
    invert_full(&schur_complement(h, keep)?)
}

/// Default eigenvalue floor: `1e-10 · max diagonal`.
pub fn default_floor(m: &SymmetricMatrix) -> f64 {
    let d = m.diagonal().into_iter().fold(0.0, f64::max);
    if d > 0.0 {
        1e-10 * d
    } else {
        1e-10
    }
}

fn eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, Dyn>> {
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen(format!("no convergence on a {0}x{0} matrix", m.nrows())))
}

/// Clips the spectrum of `m` at `delta` (default [`default_floor`]).
///
/// Inputs whose eigenvalues already all reach the floor come back unchanged.
pub fn nearest_pd(m: &SymmetricMatrix, delta: Option<f64>) -> Result<SymmetricMatrix> {
    if !m.is_finite() {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    let delta = delta.unwrap_or_else(|| default_floor(m));
    if !(delta >= 0.0) {
        return Err(Error::Input(format!("eigenvalue floor must be non-negative, got {delta}")));
    }
    let dense = m.to_dense();
    let eig = eigen(&dense)?;
    if eig.eigenvalues.iter().all(|&l| l >= delta) {
        return Ok(m.clone().with_status(PdStatus::Repaired));
    }
    // margin so that any backward-stable eigensolver still sees ≥ delta
    let spread = eig.eigenvalues.iter().fold(delta, |a, l| a.max(l.abs()));
    let mut floor = delta + 4.0 * m.dim() as f64 * f64::EPSILON * spread;
    let mut out = dense;
    for _ in 0..8 {
        let clipped = eig.eigenvalues.map(|l| l.max(floor));
        out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        out = 0.5 * (&out + out.transpose());
        let min = eigen(&out)?.eigenvalues.min();
        if min >= delta {
            break;
        }
        // rounding in the reconstruction can dip just under the floor
        floor += (delta - min).max(f64::EPSILON * floor.abs().max(f64::MIN_POSITIVE));
    }
    Ok(SymmetricMatrix::from_upper(&out)?.with_status(PdStatus::Repaired))
}

/// `R_ij = Σ_ij / √(Σ_ii Σ_jj)` with an exact unit diagonal.
pub fn correlation_from(cov: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let var = cov.diagonal();
    if let Some(k) = var.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("variance {k} is {}, correlation undefined", var[k])));
    }
    let mut r = SymmetricMatrix::zeros(cov.dim());
    for i in 0..cov.dim() {
        r.set(i, i, 1.0);
        for j in (i + 1)..cov.dim() {
            r.set(i, j, cov.get(i, j) / (var[i] * var[j]).sqrt());
        }
    }
    Ok(r)
}

/// Which pipeline produced a covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LaplaceRelaxed,
    LaplaceOriginal,
    McmcOracle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::LaplaceRelaxed => "laplace-relaxed",
            Method::LaplaceOriginal => "laplace-original",
            Method::McmcOracle => "mcmc-oracle",
        }
    }
}

/// Covariance, correlation and variances over labelled coordinates.
///
/// `flags` lists validity failures (non-positive variances, correlations
/// outside `[−1, 1]`); a report with any flag is invalid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub method: Method,
    pub labels: Vec<String>,
    pub covariance: SymmetricMatrix,
    pub correlation: SymmetricMatrix,
    pub variances: Vec<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CovarianceReport {
    pub fn new(method: Method, labels: Vec<String>, covariance: SymmetricMatrix) -> Result<Self> {
        if labels.len() != covariance.dim() {
            return Err(Error::Dimension(format!(
                "{} labels for a {}-dimensional covariance",
                labels.len(),
                covariance.dim()
            )));
        }
        let variances = covariance.diagonal();
        let mut flags = Vec::new();
        for (k, &v) in variances.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                flags.push(format!("non-positive variance for {}: {v:e}", labels[k]));
            }
        }
        let dim = covariance.dim();
        let mut correlation = SymmetricMatrix::zeros(dim);
        for i in 0..dim {
            correlation.set(i, i, 1.0);
            for j in (i + 1)..dim {
                let denom = (variances[i] * variances[j]).sqrt();
                let r = if denom > 0.0 && denom.is_finite() { covariance.get(i, j) / denom } else { 0.0 };
                correlation.set(i, j, r);
            }
        }
        let outside = (0..dim)
            .flat_map(|i| ((i + 1)..dim).map(move |j| (i, j)))
            .filter(|&(i, j)| !(correlation.get(i, j).abs() <= 1.0))
            .count();
        if outside > 0 {
            flags.push(format!("{outside} correlation coefficients outside [-1, 1]"));
        }
        Ok(Self {
            method,
            labels,
            covariance,
            correlation,
            variances,
            flags,
            meta: serde_json::Value::Object(Default::default()),
        })
    }

    pub fn is_valid(&self) -> bool {
        self.flags.is_empty()
    }

    /// Restrict to the named coordinates, in the order given.
    pub fn select(&self, labels: &[String]) -> Result<Self> {
        let idx = labels
            .iter()
            .map(|l| {
                self.labels
                    .iter()
                    .position(|k| k == l)
                    .ok_or_else(|| Error::Input(format!("label {l} not in report")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(self.method, labels.to_vec(), self.covariance.select(&idx))?;
        out.meta = self.meta.clone();
        Ok(out)
    }
}

/// `count` draws of `mean + L z`, one per row, deterministic in `seed`.
///
/// An identically zero covariance yields `count` copies of the mean.
pub fn sample_gaussian(mean: &DVector<f64>, cov: &SymmetricMatrix, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    let dim = mean.len();
    if cov.dim() != dim {
        return Err(Error::Dimension(format!("mean has length {dim}, covariance is {}", cov.dim())));
    }
    let mut out = DMatrix::zeros(count, dim);
    for r in 0..count {
        out.row_mut(r).copy_from(&mean.transpose());
    }
    if cov.max_abs() == 0.0 {
        return Ok(out);
    }
    let l = factor(&cov.to_dense())?.unpack();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DVector::zeros(dim);
    for r in 0..count {
        for k in 0..dim {
            z[k] = StandardNormal.sample(&mut rng);
        }
        let x = &l * &z;
        for k in 0..dim {
            out[(r, k)] += x[k];
        }
    }
    Ok(out)
}

/// 1-based ascending ranks `(⌈0.025·n⌉, ⌊0.975·n⌋)` bounding a 95% band.
pub fn band_ranks(n: usize) -> (usize, usize) {
    let lo = ((0.025 * n as f64).ceil() as usize).max(1);
    let hi = ((0.975 * n as f64).floor() as usize).max(lo);
    (lo, hi)
}

/// Lower and upper band values from a set of curve values at one time.
pub fn order_statistic_band(values: &mut [f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("no values to form a band".into()));
    }
    values.sort_by(f64::total_cmp);
    let (lo, hi) = band_ranks(values.len());
    Ok((values[lo - 1], values[hi - 1]))
}

/// Pointwise 95% band over solution curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CredibleBand {
    pub times: Vec<f64>,
    /// `times × p`
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    /// Solution at the mean parameters.
    pub center: DMatrix<f64>,
    pub count: usize,
    pub dropped: usize,
}

impl CredibleBand {
    pub fn width(&self, i: usize, j: usize) -> f64 {
        self.upper[(i, j)] - self.lower[(i, j)]
    }
}

/// Samples `(θ, x₀)` from `N(mean, cov)`, solves each draw on `grid` and
/// takes ascending order statistics per time and state.
///
/// Draws that leave the model's domain or fail to integrate are dropped;
/// more than 5% dropped is an error.
pub fn credible_band(
    model: &dyn OdeModel,
    mean: &DVector<f64>,
    cov: &SymmetricMatrix,
    grid: &[f64],
    count: usize,
    seed: u64,
) -> Result<CredibleBand> {
    let (p, q) = (model.state_dim(), model.param_dim());
    if mean.len() != p + q {
        return Err(Error::Dimension(format!("band mean must cover (theta, x0) = {}, got {}", p + q, mean.len())));
    }
    if count == 0 {
        return Err(Error::Input("band needs at least one sample".into()));
    }
    let center = solve_reference(model, &mean.as_slice()[q..], &mean.as_slice()[..q], grid)?;
    let draws = sample_gaussian(mean, cov, count, seed)?;
    let curves: Vec<Option<DMatrix<f64>>> = (0..count)
        .into_par_iter()
        .map(|r| {
            let v: Vec<f64> = draws.row(r).iter().copied().collect();
            solve_reference(model, &v[q..], &v[..q], grid).ok()
        })
        .collect();
    let ok: Vec<&DMatrix<f64>> = curves.iter().flatten().collect();
    let dropped = count - ok.len();
    if dropped as f64 > 0.05 * count as f64 || ok.is_empty() {
        return Err(Error::Band { dropped, count });
    }
    let mut lower = DMatrix::zeros(grid.len(), p);
    let mut upper = DMatrix::zeros(grid.len(), p);
    let mut buf = vec![0.0; ok.len()];
    for i in 0..grid.len() {
        for j in 0..p {
            for (b, c) in buf.iter_mut().zip(&ok) {
                *b = c[(i, j)];
            }
            let (lo, hi) = order_statistic_band(&mut buf)?;
            lower[(i, j)] = lo;
            upper[(i, j)] = hi;
        }
    }
    Ok(CredibleBand { times: grid.to_vec(), lower, upper, center, count, dropped })
}
