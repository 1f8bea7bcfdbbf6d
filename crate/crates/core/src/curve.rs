//! Polynomial curves `t ↦ A(t)` of symmetric matrices with an optional unit
//! null direction `n(t)`, shared by the bracket and transition-map code.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::MatPoly;

#[derive(Debug, Clone, PartialEq)]
pub struct CurveJet {
    /// Taylor coefficients at `t = 0`; the polynomial itself defines `A` on
    /// `[0, delta]`.
    pub a: MatPoly,
    /// Column series of the null direction.
    pub n: Option<MatPoly>,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveJetRecord {
    pub delta: f64,
    /// `a[k][i][j]`.
    pub a: Vec<Vec<Vec<f64>>>,
    pub n: Option<Vec<Vec<f64>>>,
    /// Number of trustworthy coefficients, absent when exact.
    pub known: Option<usize>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl CurveJet {
    pub fn new(a: MatPoly, n: Option<MatPoly>, delta: f64) -> Result<Self> {
        let (r, c) = a.shape();
        if r != c || r == 0 {
            return Err(Error::Dimension("A must be square".into()));
        }
        for (k, m) in a.coeffs.iter().enumerate() {
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(Error::Invalid(format!("coefficient {k} of A is not symmetric")));
            }
        }
        if let Some(n) = &n {
            if n.shape() != (r, 1) {
                return Err(Error::Dimension("n must be a column of matching size".into()));
            }
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::Invalid("delta must be finite and non-negative".into()));
        }
        Ok(CurveJet { a, n, delta })
    }

    pub fn constant(a0: DMatrix<f64>, n: Option<DVector<f64>>, delta: f64) -> Result<Self> {
        let n = n.map(|v| MatPoly::constant(DMatrix::from_column_slice(v.len(), 1, v.as_slice())));
        Self::new(MatPoly::constant(a0), n, delta)
    }

    pub fn d(&self) -> usize {
        self.a.shape().0
    }

    pub fn a_at(&self, t: f64) -> DMatrix<f64> {
        self.a.eval(t)
    }

    pub fn n_at(&self, t: f64) -> Option<DVector<f64>> {
        self.n.as_ref().map(|n| n.column_at(t, 0))
    }

    /// `∫₀ᵗ A`.
    pub fn antiderivative(&self) -> MatPoly {
        self.a.integral()
    }

    /// Largest `|A(t) n(t)|` over a uniform grid on `[0, δ]`.
    pub fn null_defect(&self, samples: usize) -> Option<f64> {
        let n = self.n.as_ref()?;
        let worst = (0..=samples)
            .map(|k| {
                let t = self.delta * k as f64 / samples.max(1) as f64;
                let nv = n.column_at(t, 0);
                (self.a_at(t) * nv.normalize()).norm()
            })
            .fold(0.0, f64::max);
        Some(worst)
    }

    /// Membership checks for curves with prescribed null direction:
    /// `A(0) = diag(I, 0)`, `n(0) = e_last` and `A n = 0` on a grid.
    pub fn check_admissible(&self, tol: f64) -> Result<()> {
        let d = self.d();
        let mut e = DMatrix::identity(d, d);
        e[(d - 1, d - 1)] = 0.0;
        if (self.a_at(0.0) - e).amax() > tol {
            return Err(Error::Invalid("A(0) is not diag(I, 0)".into()));
        }
        let n0 = self
            .n_at(0.0)
            .ok_or_else(|| Error::Invalid("no null direction supplied".into()))?;
        let mut el = DVector::zeros(d);
        el[d - 1] = 1.0;
        if (n0 - el).amax() > tol {
            return Err(Error::Invalid("n(0) is not the last basis vector".into()));
        }
        let defect = self.null_defect(64).unwrap_or(0.0);
        if defect > tol {
            return Err(Error::Invalid(format!("A(t) n(t) ≠ 0 (defect {defect:e})")));
        }
        Ok(())
    }

    pub fn to_record(&self) -> CurveJetRecord {
        CurveJetRecord {
            delta: self.delta,
            a: self.a.coeffs.iter().map(rows).collect(),
            n: self
                .n
                .as_ref()
                .map(|n| n.coeffs.iter().map(|c| c.column(0).iter().copied().collect()).collect()),
            known: self.a.known,
        }
    }

    pub fn from_record(r: &CurveJetRecord) -> Result<Self> {
        let mats: Vec<DMatrix<f64>> = r
            .a
            .iter()
            .map(|m| {
                let d = m.len();
                if m.iter().any(|row| row.len() != d) {
                    return Err(Error::Dimension("ragged coefficient".into()));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| m[i][j]))
            })
            .collect::<Result<_>>()?;
        let mut a = MatPoly::exact(mats)?;
        if let Some(k) = r.known {
            a.known = Some(k);
        }
        let n = match &r.n {
            Some(cs) => Some(MatPoly::exact(
                cs.iter().map(|c| DMatrix::from_column_slice(c.len(), 1, c)).collect(),
            )?),
            None => None,
        };
        Self::new(a, n, r.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let a = MatPoly::exact(vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.3, -1.0, -1.0, 0.0]),
        ])
        .unwrap();
        let c = CurveJet::new(a, None, 0.5).unwrap();
        let back = CurveJet::from_record(&c.to_record()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn asymmetric_coefficient_is_rejected() {
        let a = MatPoly::exact(vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.0])]).unwrap();
        assert!(CurveJet::new(a, None, 1.0).is_err());
    }
}
