use nalgebra::DMatrix;

use super::{add_sym, OdeModel, SplineBasis};
use crate::error::{Error, Result};

/// SIR model with time-varying rates on log-spline scales:
///
/// ```text
/// dI/dt = β(t) I (N − I − R) / N − γ(t) I
/// dR/dt = γ(t) I
/// β(t) = exp(Σ c_β,i B_β,i(t)),  γ(t) = exp(Σ c_γ,i B_γ,i(t))
/// ```
///
/// States are `(I, R)`; parameters are `(c_β, c_γ)`. The population `N`
/// is a fixed constant.
#[derive(Debug, Clone)]
pub struct TimeVaryingSir {
    beta: SplineBasis,
    gamma: SplineBasis,
    population: f64,
}

/// Builds the time-varying SIR model; both bases must share one window.
pub fn make_sir_model(beta: SplineBasis, gamma: SplineBasis, population: f64) -> Result<TimeVaryingSir> {
    if beta.window() != gamma.window() {
        return Err(Error::Input(format!(
            "spline windows differ: beta {:?} vs gamma {:?}",
            beta.window(),
            gamma.window()
        )));
    }
    if !(population > 0.0) || !population.is_finite() {
        return Err(Error::Input(format!("population must be positive, got {population}")));
    }
    Ok(TimeVaryingSir { beta, gamma, population })
}

/// Basis values and the derived rate at one time point.
struct Rate {
    values: Vec<f64>,
    first: usize,
    rate: f64,
}

impl TimeVaryingSir {
    pub fn population(&self) -> f64 {
        self.population
    }

    pub fn window(&self) -> (f64, f64) {
        self.beta.window()
    }

    pub fn beta_basis(&self) -> &SplineBasis {
        &self.beta
    }

    pub fn gamma_basis(&self) -> &SplineBasis {
        &self.gamma
    }

    fn rate(basis: &SplineBasis, coeffs: &[f64], t: f64) -> Rate {
        let mut all = vec![0.0; basis.n_basis()];
        basis.eval_clamped(t, &mut all);
        let first = all.iter().position(|&v| v != 0.0).unwrap_or(0);
        let last = all.iter().rposition(|&v| v != 0.0).unwrap_or(0);
        let values = all[first..=last].to_vec();
        let log_rate: f64 = values.iter().zip(&coeffs[first..=last]).map(|(b, c)| b * c).sum();
        Rate { values, first, rate: log_rate.exp() }
    }

    fn rates(&self, t: f64, theta: &[f64]) -> (Rate, Rate) {
        let nb = self.beta.n_basis();
        (Self::rate(&self.beta, &theta[..nb], t), Self::rate(&self.gamma, &theta[nb..], t))
    }

    /// `β(t)` and `γ(t)` for coefficient vector `theta`.
    pub fn rate_curves(&self, t: f64, theta: &[f64]) -> (f64, f64) {
        let (b, g) = self.rates(t, theta);
        (b.rate, g.rate)
    }
}

impl OdeModel for TimeVaryingSir {
    fn name(&self) -> &str {
        "sir-tv"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        self.beta.n_basis() + self.gamma.n_basis()
    }

    fn rhs(&self, x: &[f64], t: f64, theta: &[f64], out: &mut [f64]) {
        let (i, r) = (x[0], x[1]);
        let (b, g) = self.rates(t, theta);
        let s = self.population - i - r;
        out[0] = b.rate * i * s / self.population - g.rate * i;
        out[1] = g.rate * i;
    }

    fn jacobians(&self, x: &[f64], t: f64, theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (i, r) = (x[0], x[1]);
        let n = self.population;
        let nb = self.beta.n_basis();
        let (b, g) = self.rates(t, theta);
        let s = n - i - r;
        let jx = DMatrix::from_row_slice(
            2,
            2,
            &[b.rate * (s - i) / n - g.rate, -b.rate * i / n, g.rate, 0.0],
        );
        let mut jt = DMatrix::zeros(2, self.param_dim());
        for (k, bk) in b.values.iter().enumerate() {
            jt[(0, b.first + k)] = bk * b.rate * i * s / n;
        }
        for (k, gk) in g.values.iter().enumerate() {
            jt[(0, nb + g.first + k)] = -gk * g.rate * i;
            jt[(1, nb + g.first + k)] = gk * g.rate * i;
        }
        (jx, jt)
    }

    fn hessians(&self, x: &[f64], t: f64, theta: &[f64]) -> Vec<DMatrix<f64>> {
        let (i, r) = (x[0], x[1]);
        let n = self.population;
        let nb = self.beta.n_basis();
        let d = 2 + self.param_dim();
        let (b, g) = self.rates(t, theta);
        let s = n - i - r;
        let cb = |k: usize| 2 + b.first + k;
        let cg = |k: usize| 2 + nb + g.first + k;

        let mut h1 = DMatrix::zeros(d, d);
        add_sym(&mut h1, 0, 0, -2.0 * b.rate / n);
        add_sym(&mut h1, 0, 1, -b.rate / n);
        for (k, bk) in b.values.iter().enumerate() {
            add_sym(&mut h1, 0, cb(k), bk * b.rate * (s - i) / n);
            add_sym(&mut h1, 1, cb(k), -bk * b.rate * i / n);
            for (l, bl) in b.values.iter().enumerate().skip(k) {
                add_sym(&mut h1, cb(k), cb(l), bk * bl * b.rate * i * s / n);
            }
        }
        let mut h2 = DMatrix::zeros(d, d);
        for (k, gk) in g.values.iter().enumerate() {
            add_sym(&mut h1, 0, cg(k), -gk * g.rate);
            add_sym(&mut h2, 0, cg(k), gk * g.rate);
            for (l, gl) in g.values.iter().enumerate().skip(k) {
                add_sym(&mut h1, cg(k), cg(l), -gk * gl * g.rate * i);
                add_sym(&mut h2, cg(k), cg(l), gk * gl * g.rate * i);
            }
        }
        vec![h1, h2]
    }

    fn state_labels(&self) -> Vec<String> {
        vec!["I".into(), "R".into()]
    }

    fn param_labels(&self) -> Vec<String> {
        let nb = self.beta.n_basis();
        let ng = self.gamma.n_basis();
        (1..=nb)
            .map(|k| format!("c_beta{k}"))
            .chain((1..=ng).map(|k| format!("c_gamma{k}")))
            .collect()
    }
}
