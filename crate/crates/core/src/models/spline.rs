use nalgebra::DVector;

use crate::error::{Error, Result};

const DEGREE: usize = 3;

/// Cubic B-spline basis on a nondecreasing knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    knots: Vec<f64>,
    n_basis: usize,
}

impl SplineBasis {
    /// Clamped cubic basis with `n_basis` functions on `[t0, t1]`: four
    /// repeated knots at each end and `n_basis − 4` uniformly spaced
    /// interior knots.
    pub fn clamped_uniform(n_basis: usize, t0: f64, t1: f64) -> Result<Self> {
        if n_basis < DEGREE + 1 {
            return Err(Error::Input(format!("a cubic basis needs at least 4 functions, got {n_basis}")));
        }
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::Input(format!("invalid spline window [{t0}, {t1}]")));
        }
        let n_spans = n_basis - DEGREE;
        let mut knots = vec![t0; DEGREE];
        for i in 0..=n_spans {
            knots.push(if i == n_spans { t1 } else { t0 + (t1 - t0) * i as f64 / n_spans as f64 });
        }
        knots.extend(std::iter::repeat_n(t1, DEGREE));
        Self::from_knots(knots)
    }

    /// Cubic basis from an explicit knot vector (length `n_basis + 4`).
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 * (DEGREE + 1) {
            return Err(Error::Input(format!("need at least 8 knots, got {}", knots.len())));
        }
        if knots.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::Input("knots must be nondecreasing".into()));
        }
        let n_basis = knots.len() - DEGREE - 1;
        if !(knots[n_basis] > knots[DEGREE]) {
            return Err(Error::Input("knot vector has an empty domain".into()));
        }
        Ok(Self { knots, n_basis })
    }

    pub fn degree(&self) -> usize {
        DEGREE
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Domain `[knots[3], knots[n_basis]]`.
    pub fn window(&self) -> (f64, f64) {
        (self.knots[DEGREE], self.knots[self.n_basis])
    }

    /// Evaluates the basis at `t` after clamping `t` into the domain.
    ///
    /// Writes all `n_basis` values into `out`; at most four are non-zero.
    pub fn eval_clamped(&self, t: f64, out: &mut [f64]) {
        let (lo, hi) = self.window();
        let t = t.clamp(lo, hi);
        out.iter_mut().for_each(|v| *v = 0.0);
        let span = self.find_span(t);
        let local = self.local_values(span, t);
        out[span - DEGREE..=span].copy_from_slice(&local);
    }

    fn find_span(&self, t: f64) -> usize {
        let last = self.n_basis - 1;
        if t >= self.knots[self.n_basis] {
            // right end belongs to the last non-empty span
            let mut s = last;
            while self.knots[s] >= self.knots[s + 1] && s > DEGREE {
                s -= 1;
            }
            return s;
        }
        // largest s in [DEGREE, last] with knots[s] <= t
        let mut lo = DEGREE;
        let mut hi = last;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Cox–de Boor triangle for the four functions supported on `span`.
    fn local_values(&self, span: usize, t: f64) -> [f64; DEGREE + 1] {
        let u = &self.knots;
        let mut n = [0.0; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }
}

/// Values of all basis functions at `t`; errors when `t` is outside the knots.
pub fn eval_spline_basis(basis: &SplineBasis, t: f64) -> Result<DVector<f64>> {
    let (lo, hi) = basis.window();
    if !(t >= lo && t <= hi) {
        return Err(Error::Input(format!("t = {t} outside the spline window [{lo}, {hi}]")));
    }
    let mut out = DVector::zeros(basis.n_basis());
    basis.eval_clamped(t, out.as_mut_slice());
    Ok(out)
}
