//! Jet plumbing for the normal form: flattening for the integrator, partial
//! derivatives, small linear solves over jets and tube models that carry
//! transverse jets along a time interval.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Jet;
use crate::series::{binom, ChebFit};

/// Number of stored entries of a dense jet.
pub fn flat_len(n: usize, order: usize) -> usize {
    let mut len = 1;
    let mut p = 1;
    for _ in 0..order.min(3) {
        p *= n;
        len += p;
    }
    len
}

pub fn flatten_into(j: &Jet, out: &mut [f64]) {
    out[0] = j.v;
    let mut k = 1;
    for part in [&j.g, &j.h, &j.t] {
        out[k..k + part.len()].copy_from_slice(part);
        k += part.len();
    }
}

pub fn unflatten(n: usize, order: usize, s: &[f64]) -> Jet {
    let mut j = Jet::constant(n, order, s[0]);
    let mut k = 1;
    for part in [&mut j.g, &mut j.h, &mut j.t] {
        let l = part.len();
        part.copy_from_slice(&s[k..k + l]);
        k += l;
    }
    j
}

/// `∂_a` of a jet, one order lower.
pub fn partial(j: &Jet, a: usize) -> Jet {
    let n = j.nvars;
    if j.order == 0 {
        return Jet::constant(n, 0, 0.0);
    }
    let order = j.order - 1;
    let mut r = Jet::constant(n, order, j.g[a]);
    if order >= 1 {
        for b in 0..n {
            r.g[b] = j.hess(a, b);
        }
    }
    if order >= 2 {
        for b in 0..n {
            for c in 0..n {
                r.h[b * n + c] = j.third(a, b, c);
            }
        }
    }
    r
}

pub fn truncate(j: &Jet, order: usize) -> Jet {
    let o = order.min(j.order);
    Jet {
        order: o,
        nvars: j.nvars,
        v: j.v,
        g: if o >= 1 { j.g.clone() } else { vec![] },
        h: if o >= 2 { j.h.clone() } else { vec![] },
        t: if o >= 3 { j.t.clone() } else { vec![] },
    }
}

/// Components of `z ↦ base + basis·z`.
pub fn linear_jets(base: &[f64], basis: &DMatrix<f64>, order: usize) -> Vec<Jet> {
    let n = basis.ncols();
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let mut j = Jet::constant(n, order, b);
            if j.order >= 1 {
                for k in 0..n {
                    j.g[k] = basis[(i, k)];
                }
            }
            j
        })
        .collect()
}

/// Largest stored entry in absolute value.
pub fn jet_sup(j: &Jet) -> f64 {
    j.g.iter()
        .chain(&j.h)
        .chain(&j.t)
        .fold(j.v.abs(), |m, x| m.max(x.abs()))
}

/// `Σ aᵢ bᵢ`.
pub fn dot(a: &[Jet], b: &[Jet]) -> Jet {
    let mut s = Jet::constant(a[0].nvars, a[0].order.min(b[0].order), 0.0);
    for (x, y) in a.iter().zip(b) {
        s = s.add(&x.mul(y));
    }
    s
}

/// Solves `M X = R` over jets, `R` given as a list of right-hand columns.
/// Pivoting uses the values, so the solve is valid wherever `M(0)` is
/// invertible.
pub fn jet_solve(m: &[Vec<Jet>], rhs: &[Vec<Jet>]) -> Result<Vec<Vec<Jet>>> {
    let n = m.len();
    let mut a: Vec<Vec<Jet>> = m.to_vec();
    // b[i][c] is row i of column c
    let mut b: Vec<Vec<Jet>> = (0..n).map(|i| rhs.iter().map(|col| col[i].clone()).collect()).collect();
    let scale = a.iter().flatten().fold(0.0f64, |s, j| s.max(j.v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].v.abs().total_cmp(&a[j][col].v.abs()))
            .expect("non-empty");
        if a[piv][col].v.abs() <= 1e-14 * scale.max(1e-300) {
            return Err(Error::Numerical("singular jet matrix".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let r = a[col][col].recip()?;
        for j in 0..n {
            a[col][j] = a[col][j].mul(&r);
        }
        for x in b[col].iter_mut() {
            *x = x.mul(&r);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[i][col].clone();
            for j in 0..n {
                a[i][j] = a[i][j].sub(&f.mul(&a[col][j]));
            }
            for c in 0..rhs.len() {
                b[i][c] = b[i][c].sub(&f.mul(&b[col][c]));
            }
        }
    }
    Ok((0..rhs.len()).map(|c| (0..n).map(|i| b[i][c].clone()).collect()).collect())
}

/// Serializable form of a [`Jet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JetRecord {
    pub order: usize,
    pub nvars: usize,
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub t: Vec<f64>,
}

impl From<&Jet> for JetRecord {
    fn from(j: &Jet) -> Self {
        JetRecord {
            order: j.order,
            nvars: j.nvars,
            v: j.v,
            g: j.g.clone(),
            h: j.h.clone(),
            t: j.t.clone(),
        }
    }
}

impl JetRecord {
    pub fn to_jet(&self) -> Result<Jet> {
        let mut j = Jet::constant(self.nvars, self.order, self.v);
        if j.g.len() != self.g.len() || j.h.len() != self.h.len() || j.t.len() != self.t.len() {
            return Err(Error::Dimension("jet record has inconsistent sizes".into()));
        }
        j.g.clone_from(&self.g);
        j.h.clone_from(&self.h);
        j.t.clone_from(&self.t);
        Ok(j)
    }
}

/// Chebyshev–Lobatto times on `[0, δ]`, ascending.
pub fn lobatto_times(delta: f64, degree: usize) -> Vec<f64> {
    let h = 0.5 * delta;
    let mut t: Vec<f64> = ChebFit::nodes(h, degree).into_iter().map(|x| h + x).collect();
    t.reverse();
    t[0] = 0.0;
    t[degree] = delta;
    t
}

/// Taylor coefficients about `δ/2` of the interpolant through values at
/// [`lobatto_times`].
pub fn fit_centred(delta: f64, ascending: &[f64]) -> Vec<f64> {
    let mut v = ascending.to_vec();
    v.reverse();
    ChebFit::taylor(0.5 * delta, &v)
}

/// Re-expands `Σ c_k (t − c)^k` about zero.
pub fn recentre(c: &[f64], centre: f64) -> Vec<f64> {
    let mut out = vec![0.0; c.len()];
    for (k, ck) in c.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate().take(k + 1) {
            *o += ck * binom(k, j) * (-centre).powi((k - j) as i32);
        }
    }
    out
}

/// Value and first two derivatives of `Σ c_k x^k`.
pub fn horner2(c: &[f64], x: f64) -> [f64; 3] {
    let (mut p, mut dp, mut ddp) = (0.0, 0.0, 0.0);
    for ck in c.iter().rev() {
        ddp = ddp * x + 2.0 * dp;
        dp = dp * x + p;
        p = p * x + ck;
    }
    [p, dp, ddp]
}

/// Jets in `z` of several components, with coefficients interpolated in
/// time: a model of a map `(s, z) ↦ ℝᵐ` on `[0, δ] × {small z}`.
#[derive(Debug, Clone)]
pub struct TubeModel {
    pub nvars: usize,
    pub order: usize,
    pub delta: f64,
    /// `polys[i][e]`: coefficients in `s − δ/2` of flat entry `e` of component `i`.
    polys: Vec<Vec<Vec<f64>>>,
}

impl TubeModel {
    /// `samples[k][i]` is the jet of component `i` at `lobatto_times(δ, N)[k]`.
    pub fn fit(delta: f64, samples: &[Vec<Jet>]) -> Result<Self> {
        let first = samples
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::Invalid("empty tube samples".into()))?;
        let (nvars, order) = (first.nvars, first.order);
        let len = flat_len(nvars, order);
        let m = samples[0].len();
        let mut polys = vec![vec![vec![]; len]; m];
        let mut buf = vec![0.0; len];
        let mut cols = vec![vec![0.0; samples.len()]; len];
        for (i, p) in polys.iter_mut().enumerate() {
            for (k, s) in samples.iter().enumerate() {
                flatten_into(&s[i], &mut buf);
                for e in 0..len {
                    cols[e][k] = buf[e];
                }
            }
            for e in 0..len {
                p[e] = fit_centred(delta, &cols[e]);
            }
        }
        Ok(TubeModel {
            nvars,
            order,
            delta,
            polys,
        })
    }

    pub fn components(&self) -> usize {
        self.polys.len()
    }

    /// Jets in `z` at `z = 0` of component `i` and of its first two
    /// `s`-derivatives.
    pub fn z_jets(&self, i: usize, s: f64) -> [Jet; 3] {
        let x = s - 0.5 * self.delta;
        let len = flat_len(self.nvars, self.order);
        let mut f = [vec![0.0; len], vec![0.0; len], vec![0.0; len]];
        for e in 0..len {
            let h = horner2(&self.polys[i][e], x);
            for r in 0..3 {
                f[r][e] = h[r];
            }
        }
        f.map(|v| unflatten(self.nvars, self.order, &v))
    }

    /// Order-two jet in the variables `(s, z₁..z_d)` at the point `(s, z)`.
    pub fn jet_sz(&self, i: usize, s: f64, z: &[f64]) -> Jet {
        let [j0, j1, j2] = self.z_jets(i, s);
        let d = self.nvars;
        let (v0, g0, h0) = taylor_at(&j0, z);
        let (v1, g1, _) = taylor_at(&j1, z);
        let (v2, _, _) = taylor_at(&j2, z);
        let n = d + 1;
        let mut r = Jet::constant(n, 2, v0);
        r.g[0] = v1;
        r.h[0] = v2;
        for a in 0..d {
            r.g[1 + a] = g0[a];
            r.h[1 + a] = g1[a];
            r.h[(1 + a) * n] = g1[a];
            for b in 0..d {
                r.h[(1 + a) * n + 1 + b] = h0[(a, b)];
            }
        }
        r
    }
}

/// Value, gradient and Hessian at `z` of the Taylor polynomial of a jet.
pub fn taylor_at(j: &Jet, z: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
    let n = j.nvars;
    let mut v = j.v;
    let mut g = vec![0.0; n];
    let mut h = DMatrix::zeros(n, n);
    if j.order >= 1 {
        for a in 0..n {
            v += j.g[a] * z[a];
            g[a] = j.g[a];
        }
    }
    if j.order >= 2 {
        for a in 0..n {
            for b in 0..n {
                let hab = j.hess(a, b);
                v += 0.5 * hab * z[a] * z[b];
                g[a] += hab * z[b];
                h[(a, b)] = hab;
            }
        }
    }
    if j.order >= 3 {
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let t = j.third(a, b, c);
                    v += t * z[a] * z[b] * z[c] / 6.0;
                    g[a] += 0.5 * t * z[b] * z[c];
                    h[(a, b)] += t * z[c];
                }
            }
        }
    }
    (v, g, h)
}
