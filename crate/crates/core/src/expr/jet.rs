//! Forward-mode Taylor jets in several variables, truncated at order three.
//!
//! A jet stores the value, gradient, Hessian and third-derivative tensor of a
//! scalar function at a point. Tensors are dense and row-major; entries above
//! the requested order are left empty.

use crate::error::{Error, Result};

/// Highest derivative order carried by [`Jet`].
pub const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub order: usize,
    pub nvars: usize,
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub t: Vec<f64>,
}

impl Jet {
    pub fn constant(nvars: usize, order: usize, c: f64) -> Self {
        let order = order.min(MAX_ORDER);
        Jet {
            order,
            nvars,
            v: c,
            g: if order >= 1 { vec![0.0; nvars] } else { vec![] },
            h: if order >= 2 { vec![0.0; nvars * nvars] } else { vec![] },
            t: if order >= 3 {
                vec![0.0; nvars * nvars * nvars]
            } else {
                vec![]
            },
        }
    }

    /// The coordinate function `x_i` at a point with value `x`.
    pub fn variable(nvars: usize, order: usize, i: usize, x: f64) -> Self {
        let mut j = Jet::constant(nvars, order, x);
        if j.order >= 1 {
            j.g[i] = 1.0;
        }
        j
    }

    #[inline]
    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.nvars + j]
    }

    #[inline]
    pub fn third(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.nvars;
        self.t[(i * n + j) * n + k]
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite()
            && self.g.iter().all(|x| x.is_finite())
            && self.h.iter().all(|x| x.is_finite())
            && self.t.iter().all(|x| x.is_finite())
    }

    fn zip(&self, o: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
        debug_assert_eq!(self.nvars, o.nvars);
        let order = self.order.min(o.order);
        let mut r = Jet::constant(self.nvars, order, f(self.v, o.v));
        for (k, x) in r.g.iter_mut().enumerate() {
            *x = f(self.g[k], o.g[k]);
        }
        for (k, x) in r.h.iter_mut().enumerate() {
            *x = f(self.h[k], o.h[k]);
        }
        for (k, x) in r.t.iter_mut().enumerate() {
            *x = f(self.t[k], o.t[k]);
        }
        r
    }

    pub fn add(&self, o: &Jet) -> Jet {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        self.zip(o, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Jet {
        let mut r = self.clone();
        r.v *= c;
        r.g.iter_mut().for_each(|x| *x *= c);
        r.h.iter_mut().for_each(|x| *x *= c);
        r.t.iter_mut().for_each(|x| *x *= c);
        r
    }

    pub fn neg(&self) -> Jet {
        self.scale(-1.0)
    }

    pub fn add_const(&self, c: f64) -> Jet {
        let mut r = self.clone();
        r.v += c;
        r
    }

    /// Leibniz rule.
    pub fn mul(&self, o: &Jet) -> Jet {
        let n = self.nvars;
        let order = self.order.min(o.order);
        let (a, b) = (self, o);
        let mut r = Jet::constant(n, order, a.v * b.v);
        if order >= 1 {
            for i in 0..n {
                r.g[i] = a.v * b.g[i] + a.g[i] * b.v;
            }
        }
        if order >= 2 {
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    r.h[k] = a.v * b.h[k] + a.h[k] * b.v + a.g[i] * b.g[j] + a.g[j] * b.g[i];
                }
            }
        }
        if order >= 3 {
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let k = (i * n + j) * n + l;
                        r.t[k] = a.v * b.t[k]
                            + a.t[k] * b.v
                            + a.g[i] * b.hess(j, l)
                            + a.g[j] * b.hess(i, l)
                            + a.g[l] * b.hess(i, j)
                            + a.hess(i, j) * b.g[l]
                            + a.hess(i, l) * b.g[j]
                            + a.hess(j, l) * b.g[i];
                    }
                }
            }
        }
        r
    }

    /// Applies a scalar function given its value and first three derivatives
    /// at `self.v`.
    pub fn chain(&self, d: [f64; 4]) -> Jet {
        let n = self.nvars;
        let mut r = Jet::constant(n, self.order, d[0]);
        if self.order >= 1 {
            for i in 0..n {
                r.g[i] = d[1] * self.g[i];
            }
        }
        if self.order >= 2 {
            for i in 0..n {
                for j in 0..n {
                    r.h[i * n + j] = d[2] * self.g[i] * self.g[j] + d[1] * self.hess(i, j);
                }
            }
        }
        if self.order >= 3 {
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let g = &self.g;
                        r.t[(i * n + j) * n + l] = d[3] * g[i] * g[j] * g[l]
                            + d[2]
                                * (self.hess(i, j) * g[l]
                                    + self.hess(i, l) * g[j]
                                    + self.hess(j, l) * g[i])
                            + d[1] * self.third(i, j, l);
                    }
                }
            }
        }
        r
    }

    pub fn recip(&self) -> Result<Jet> {
        let x = self.v;
        if x == 0.0 {
            return Err(Error::Domain("division by zero".into()));
        }
        let r = 1.0 / x;
        Ok(self.chain([r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r]))
    }

    pub fn div(&self, o: &Jet) -> Result<Jet> {
        Ok(self.mul(&o.recip()?))
    }

    pub fn powi(&self, e: i32) -> Result<Jet> {
        let x = self.v;
        if x == 0.0 && e < 0 {
            return Err(Error::Domain(format!("zero raised to negative power {e}")));
        }
        let mut d = [0.0; 4];
        let mut c = 1.0;
        for (k, dk) in d.iter_mut().enumerate() {
            let p = e - k as i32;
            // falling factorial vanishes once k exceeds a non-negative exponent
            *dk = if c == 0.0 { 0.0 } else { c * x.powi(p) };
            c *= p as f64;
        }
        Ok(self.chain(d))
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.v.sin_cos();
        self.chain([s, c, -s, -c])
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.v.sin_cos();
        self.chain([c, -s, -c, s])
    }

    pub fn exp(&self) -> Result<Jet> {
        let e = self.v.exp();
        if !e.is_finite() {
            return Err(Error::Domain(format!("exp overflow at {}", self.v)));
        }
        Ok(self.chain([e, e, e, e]))
    }

    pub fn sqrt(&self) -> Result<Jet> {
        let x = self.v;
        if x < 0.0 {
            return Err(Error::Domain(format!("sqrt of negative value {x}")));
        }
        if x == 0.0 && self.order >= 1 {
            return Err(Error::Domain("sqrt is not differentiable at 0".into()));
        }
        let s = x.sqrt();
        if self.order == 0 {
            return Ok(Jet::constant(self.nvars, 0, s));
        }
        Ok(self.chain([
            s,
            0.5 / s,
            -0.25 / (s * x),
            0.375 / (s * x * x),
        ]))
    }
}

/// Jet of `outer ∘ (inner_1, …, inner_m)` from the jets of its parts.
///
/// `outer` is a jet in `m` variables evaluated at the values of the inner
/// jets; the inner jets share a common set of `n` variables.
pub fn compose_jets(outer: &Jet, inner: &[Jet]) -> Result<Jet> {
    let m = outer.nvars;
    if inner.len() != m {
        return Err(Error::Dimension(format!(
            "outer jet has {m} variables, {} inner jets given",
            inner.len()
        )));
    }
    let n = inner.first().map(|j| j.nvars).unwrap_or(0);
    let order = inner
        .iter()
        .map(|j| j.order)
        .fold(outer.order, usize::min);
    let mut r = Jet::constant(n, order, outer.v);
    if order >= 1 {
        for a in 0..n {
            r.g[a] = (0..m).map(|k| outer.g[k] * inner[k].g[a]).sum();
        }
    }
    if order >= 2 {
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for k in 0..m {
                    s += outer.g[k] * inner[k].hess(a, b);
                    for l in 0..m {
                        s += outer.hess(k, l) * inner[k].g[a] * inner[l].g[b];
                    }
                }
                r.h[a * n + b] = s;
            }
        }
    }
    if order >= 3 {
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let mut s = 0.0;
                    for k in 0..m {
                        let gk = &inner[k];
                        s += outer.g[k] * gk.third(a, b, c);
                        for l in 0..m {
                            let gl = &inner[l];
                            s += outer.hess(k, l)
                                * (gk.hess(a, b) * gl.g[c]
                                    + gk.hess(a, c) * gl.g[b]
                                    + gk.hess(b, c) * gl.g[a]);
                            for q in 0..m {
                                s += outer.third(k, l, q) * gk.g[a] * gl.g[b] * inner[q].g[c];
                            }
                        }
                    }
                    r.t[(a * n + b) * n + c] = s;
                }
            }
        }
    }
    Ok(r)
}
