use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{CovarianceReport, SymmetricMatrix};

/// `‖A − B‖_F`.
pub fn frobenius_distance(a: &SymmetricMatrix, b: &SymmetricMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!("cannot compare {}- and {}-dimensional matrices", a.dim(), b.dim())));
    }
    Ok((a.to_dense() - b.to_dense()).norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub first: usize,
    pub second: usize,
    pub covariance: f64,
    pub correlation: f64,
}

/// Variances of one coordinate across reports, and each divided by the
/// largest valid one. Invalid reports contribute `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub label: String,
    pub variances: Vec<Option<f64>>,
    pub relative: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub methods: Vec<String>,
    pub valid: Vec<bool>,
    pub flags: Vec<Vec<String>>,
    /// Every pair of valid reports.
    pub pairs: Vec<PairDistance>,
    pub variances: Vec<VarianceRow>,
}

/// Pairwise distances and relative variances over reports sharing labels.
/// Reports carrying validity flags are listed but left out of the numbers.
pub fn compare_reports(reports: &[CovarianceReport]) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::Input("no reports to compare".into()))?;
    for (k, r) in reports.iter().enumerate() {
        if r.labels != first.labels {
            return Err(Error::Input(format!("report {k} labels differ from report 0")));
        }
    }
    let valid: Vec<bool> = reports.iter().map(CovarianceReport::is_valid).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::Input("every report is flagged invalid".into()));
    }
    let mut pairs = Vec::new();
    for a in 0..reports.len() {
        for b in (a + 1)..reports.len() {
            if valid[a] && valid[b] {
                pairs.push(PairDistance {
                    first: a,
                    second: b,
                    covariance: frobenius_distance(&reports[a].covariance, &reports[b].covariance)?,
                    correlation: frobenius_distance(&reports[a].correlation, &reports[b].correlation)?,
                });
            }
        }
    }
    let variances = first
        .labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let vars: Vec<Option<f64>> =
                reports.iter().zip(&valid).map(|(r, &ok)| ok.then(|| r.variances[k])).collect();
            let top = vars.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let relative = vars.iter().map(|v| v.map(|x| x / top)).collect();
            VarianceRow { label: label.clone(), variances: vars, relative }
        })
        .collect();
    Ok(Comparison {
        labels: first.labels.clone(),
        methods: reports.iter().map(|r| r.method.as_str().to_string()).collect(),
        valid,
        flags: reports.iter().map(|r| r.flags.clone()).collect(),
        pairs,
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::Method;

    fn report(diag: &[f64]) -> CovarianceReport {
        let labels = (0..diag.len()).map(|k| format!("c{k}")).collect();
        CovarianceReport::new(Method::LaplaceRelaxed, labels, SymmetricMatrix::from_diagonal(diag)).unwrap()
    }

    #[test]
    fn frobenius_cases() {
        let i2 = SymmetricMatrix::identity(2);
        assert_eq!(frobenius_distance(&i2, &i2).unwrap(), 0.0);
        assert!((frobenius_distance(&i2, &SymmetricMatrix::zeros(2)).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let swap = SymmetricMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(frobenius_distance(&i2, &swap).unwrap(), 2.0);
        assert!(frobenius_distance(&i2, &SymmetricMatrix::identity(3)).is_err());
    }

    #[test]
    fn self_comparison_and_ratios() {
        let a = report(&[1.0, 1.0]);
        let c = compare_reports(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(c.pairs[0].covariance, 0.0);
        assert!(c.variances.iter().all(|r| r.relative == vec![Some(1.0), Some(1.0)]));
        let c = compare_reports(&[a, report(&[4.0, 4.0])]).unwrap();
        assert_eq!(c.variances[0].relative, vec![Some(0.25), Some(1.0)]);
    }

    #[test]
    fn invalid_reports_are_excluded() {
        let bad = CovarianceReport::new(
            Method::LaplaceOriginal,
            vec!["c0".into(), "c1".into()],
            SymmetricMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let c = compare_reports(&[report(&[1.0, 2.0]), bad.clone(), report(&[2.0, 2.0])]).unwrap();
        assert_eq!(c.valid, vec![true, false, true]);
        assert_eq!(c.pairs.len(), 1);
        assert_eq!(c.variances[1].relative[1], None);
        assert!(compare_reports(&[bad]).is_err());
        let mut other = report(&[1.0, 1.0]);
        other.labels[0] = "zz".into();
        assert!(compare_reports(&[report(&[1.0, 1.0]), other]).is_err());
    }
}
