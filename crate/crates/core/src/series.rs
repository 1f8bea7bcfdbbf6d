//! Truncated matrix-valued power series in one variable `t`.
//!
//! A [`MatPoly`] stores Taylor coefficients `c_k` of `Σ c_k t^k` together with
//! the order up to which they are trustworthy. Products and derivatives
//! propagate that order, so asking for a coefficient that was never known is
//! an error rather than a silent zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MatPoly {
    pub coeffs: Vec<DMatrix<f64>>,
    /// Number of trustworthy leading coefficients; `None` means exact.
    pub known: Option<usize>,
    rows: usize,
    cols: usize,
}

impl MatPoly {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatPoly {
            coeffs: vec![],
            known: None,
            rows,
            cols,
        }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        MatPoly {
            coeffs: vec![m],
            known: None,
            rows,
            cols,
        }
    }

    /// Taylor data known to order `coeffs.len() - 1`.
    pub fn truncated(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = coeffs
            .first()
            .ok_or_else(|| Error::Invalid("empty coefficient list".into()))?;
        let (rows, cols) = first.shape();
        if coeffs.iter().any(|c| c.shape() != (rows, cols)) {
            return Err(Error::Dimension("inconsistent coefficient shapes".into()));
        }
        let known = Some(coeffs.len());
        Ok(MatPoly {
            coeffs,
            known,
            rows,
            cols,
        })
    }

    /// An exact polynomial.
    pub fn exact(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut p = Self::truncated(coeffs)?;
        p.known = None;
        Ok(p)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Largest `k` for which `coeff(k)` is meaningful (`usize::MAX` if
    /// exact); `None` when nothing is known.
    pub fn order(&self) -> Option<usize> {
        match self.known {
            None => Some(usize::MAX),
            Some(0) => None,
            Some(k) => Some(k - 1),
        }
    }

    pub fn coeff(&self, k: usize) -> Result<DMatrix<f64>> {
        if let Some(len) = self.known {
            if k >= len {
                return Err(Error::JetOrder {
                    need: k,
                    have: len.saturating_sub(1),
                });
            }
        }
        Ok(self
            .coeffs
            .get(k)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(self.rows, self.cols)))
    }

    /// k-th derivative at `t = 0`.
    pub fn deriv_at0(&self, k: usize) -> Result<DMatrix<f64>> {
        Ok(self.coeff(k)? * factorial(k))
    }

    fn min_known(a: Option<usize>, b: Option<usize>) -> Option<usize> {
        match (a, b) {
            (None, x) | (x, None) => x,
            (Some(x), Some(y)) => Some(x.min(y)),
        }
    }

    fn cap(&self) -> usize {
        match self.known {
            Some(len) => self.coeffs.len().min(len),
            None => self.coeffs.len(),
        }
    }

    fn lin(&self, o: &MatPoly, s: f64) -> MatPoly {
        assert_eq!(self.shape(), o.shape(), "shape mismatch in series sum");
        let known = Self::min_known(self.known, o.known);
        let mut len = self.coeffs.len().max(o.coeffs.len());
        if let Some(k) = known {
            len = len.min(k);
        }
        let coeffs = (0..len)
            .map(|k| {
                let z = DMatrix::zeros(self.rows, self.cols);
                let a = self.coeffs.get(k).unwrap_or(&z);
                let b = o.coeffs.get(k).unwrap_or(&z);
                a + b * s
            })
            .collect();
        MatPoly {
            coeffs,
            known,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn add(&self, o: &MatPoly) -> MatPoly {
        self.lin(o, 1.0)
    }

    pub fn sub(&self, o: &MatPoly) -> MatPoly {
        self.lin(o, -1.0)
    }

    pub fn scale(&self, s: f64) -> MatPoly {
        let mut r = self.clone();
        r.coeffs.iter_mut().for_each(|c| *c *= s);
        r
    }

    pub fn transpose(&self) -> MatPoly {
        MatPoly {
            coeffs: self.coeffs.iter().map(|c| c.transpose()).collect(),
            known: self.known,
            rows: self.cols,
            cols: self.rows,
        }
    }

    /// Cauchy product, truncated to the order both factors know.
    pub fn mul(&self, o: &MatPoly) -> MatPoly {
        assert_eq!(self.cols, o.rows, "shape mismatch in series product");
        let known = Self::min_known(self.known, o.known);
        let (la, lb) = (self.cap(), o.cap());
        let mut len = if la == 0 || lb == 0 { 0 } else { la + lb - 1 };
        if let Some(k) = known {
            len = len.min(k);
        }
        let coeffs = (0..len)
            .map(|k| {
                let mut c = DMatrix::zeros(self.rows, o.cols);
                for i in 0..=k {
                    if i < la && k - i < lb {
                        c += &self.coeffs[i] * &o.coeffs[k - i];
                    }
                }
                c
            })
            .collect();
        MatPoly {
            coeffs,
            known,
            rows: self.rows,
            cols: o.cols,
        }
    }

    pub fn commutator(&self, o: &MatPoly) -> MatPoly {
        self.mul(o).sub(&o.mul(self))
    }

    /// Multiplication by a scalar series given by its coefficients, known to
    /// the length of the slice.
    pub fn mul_scalar_series(&self, s: &[f64]) -> MatPoly {
        let sp = MatPoly::truncated(s.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect())
            .expect("non-empty series");
        let mut r = MatPoly {
            coeffs: vec![],
            known: Self::min_known(self.known, sp.known),
            rows: self.rows,
            cols: self.cols,
        };
        let la = self.cap();
        let len = if la == 0 { 0 } else { (la + s.len() - 1).min(r.known.unwrap_or(usize::MAX)) };
        r.coeffs = (0..len)
            .map(|k| {
                let mut c = DMatrix::zeros(self.rows, self.cols);
                for i in 0..=k.min(self.coeffs.len().saturating_sub(1)) {
                    if k - i < s.len() {
                        c += &self.coeffs[i] * s[k - i];
                    }
                }
                c
            })
            .collect();
        r
    }

    pub fn deriv(&self) -> MatPoly {
        MatPoly {
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| c * k as f64)
                .collect(),
            known: self.known.map(|k| k.saturating_sub(1)),
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Antiderivative vanishing at `t = 0`.
    pub fn integral(&self) -> MatPoly {
        let mut coeffs = vec![DMatrix::zeros(self.rows, self.cols)];
        coeffs.extend(
            self.coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c / (k as f64 + 1.0)),
        );
        MatPoly {
            coeffs,
            known: self.known.map(|k| k + 1),
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Sum of the stored terms at `t`.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(self.rows, self.cols);
        for c in self.coeffs[..self.cap()].iter().rev() {
            r *= t;
            r += c;
        }
        r
    }

    /// Re-expansion of the stored polynomial about `t0`.
    pub fn shift(&self, t0: f64) -> MatPoly {
        let len = self.cap();
        let mut coeffs = vec![DMatrix::zeros(self.rows, self.cols); len];
        for (k, c) in self.coeffs[..len].iter().enumerate() {
            // t^k = Σ_j C(k,j) t0^{k-j} s^j
            for (j, out) in coeffs.iter_mut().enumerate().take(k + 1) {
                *out += c * (binom(k, j) * t0.powi((k - j) as i32));
            }
        }
        MatPoly {
            coeffs,
            known: self.known,
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Evaluates a polynomial in the matrix entries column-wise into a vector
    /// series; used for vector-valued jets stored as single columns.
    pub fn column_at(&self, t: f64, j: usize) -> DVector<f64> {
        self.eval(t).column(j).clone_owned()
    }
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

pub fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Truncated scalar series helpers, all of length `n`.
pub mod scalar {
    pub fn mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                (0..=k)
                    .filter(|&i| i < a.len() && k - i < b.len())
                    .map(|i| a[i] * b[k - i])
                    .sum()
            })
            .collect()
    }

    /// `a^alpha` for `a_0 > 0` by the J.C.P. Miller recurrence.
    pub fn pow(a: &[f64], alpha: f64, n: usize) -> Vec<f64> {
        let a0 = a[0];
        let mut b = vec![0.0; n];
        if n == 0 {
            return b;
        }
        b[0] = a0.powf(alpha);
        for k in 1..n {
            let mut s = 0.0;
            for j in 1..=k {
                let aj = a.get(j).copied().unwrap_or(0.0);
                s += (alpha * j as f64 - (k - j) as f64) * aj * b[k - j];
            }
            b[k] = s / (k as f64 * a0);
        }
        b
    }
}

/// Chebyshev interpolation on `[-h, h]` converted to Taylor coefficients at 0.
pub struct ChebFit;

impl ChebFit {
    /// Chebyshev–Lobatto nodes `h cos(πk/N)`, `k = 0..=N`.
    pub fn nodes(h: f64, degree: usize) -> Vec<f64> {
        (0..=degree)
            .map(|k| h * (std::f64::consts::PI * k as f64 / degree as f64).cos())
            .collect()
    }

    /// Taylor coefficients at 0 of the interpolant through `values` at
    /// [`ChebFit::nodes`].
    pub fn taylor(h: f64, values: &[f64]) -> Vec<f64> {
        let n = values.len() - 1;
        let nf = n as f64;
        // Chebyshev coefficients
        let mut c = vec![0.0; n + 1];
        for (j, cj) in c.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, v) in values.iter().enumerate() {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                s += w * v * (std::f64::consts::PI * (j * k) as f64 / nf).cos();
            }
            *cj = s * 2.0 / nf;
        }
        c[0] *= 0.5;
        c[n] *= 0.5;
        // monomials in s = t/h
        let mut out = vec![0.0; n + 1];
        let mut tm1 = vec![0.0; n + 1];
        let mut t0 = vec![0.0; n + 1];
        tm1[0] = 1.0; // T0
        t0[1] = 1.0; // T1
        for (j, cj) in c.iter().enumerate() {
            let tj: &Vec<f64> = if j == 0 { &tm1 } else { &t0 };
            if j <= 1 {
                for k in 0..=n {
                    out[k] += cj * tj[k];
                }
                continue;
            }
            let mut next = vec![0.0; n + 1];
            for k in 0..=n {
                if k > 0 {
                    next[k] += 2.0 * t0[k - 1];
                }
                next[k] -= tm1[k];
            }
            for k in 0..=n {
                out[k] += cj * next[k];
            }
            tm1 = std::mem::replace(&mut t0, next);
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o /= h.powi(k as i32);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn products_and_derivatives() {
        // (1 + t)(1 - t) = 1 - t^2
        let a = MatPoly::exact(vec![m(1.0), m(1.0)]).unwrap();
        let b = MatPoly::exact(vec![m(1.0), m(-1.0)]).unwrap();
        let p = a.mul(&b);
        assert_eq!(p.coeff(2).unwrap()[(0, 0)], -1.0);
        assert_eq!(p.deriv().deriv().coeff(0).unwrap()[(0, 0)], -2.0);
    }

    #[test]
    fn truncation_is_tracked() {
        let a = MatPoly::truncated(vec![m(1.0), m(2.0), m(3.0)]).unwrap();
        let d = a.deriv().deriv();
        assert!(d.coeff(0).is_ok());
        assert!(d.coeff(1).is_err());
        let c = MatPoly::constant(m(4.0));
        assert_eq!(c.mul(&a).order(), Some(2));
        assert_eq!(d.deriv().order(), None);
    }

    #[test]
    fn chebyshev_taylor_of_exp() {
        let h = 0.5;
        let nodes = ChebFit::nodes(h, 16);
        let vals: Vec<f64> = nodes.iter().map(|t| t.exp()).collect();
        let tay = ChebFit::taylor(h, &vals);
        for (k, c) in tay.iter().enumerate().take(6) {
            assert!((c - 1.0 / factorial(k)).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn shift_re_expands() {
        let a = MatPoly::exact(vec![m(1.0), m(2.0), m(3.0)]).unwrap();
        let s = a.shift(0.5);
        assert!((s.eval(0.25)[(0, 0)] - a.eval(0.75)[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn inverse_square_root_series() {
        // (1 + t)^(-1/2)
        let b = scalar::pow(&[1.0, 1.0], -0.5, 4);
        let expect = [1.0, -0.5, 0.375, -0.3125];
        for (x, y) in b.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
