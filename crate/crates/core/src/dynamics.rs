//! Hamiltonians `H = K + U` with kinetic part degenerate along the
//! annihilator of a co-rank-one distribution, their flows, Maupertuis
//! reduction and orbit annotations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Expr, Jet};
use crate::geometry::FrameSpec;
use crate::ode::{integrate, DenseSolution, OdeOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KineticClass {
    Quad,
    /// Reversible class; kinetic terms here are quadratic forms, so the
    /// symmetry `K(q, -p) = K(q, p)` holds by construction.
    Rf,
}

/// The matrix `B(q)` of `K(q, p) = ½ pᵀB(q)p`.
#[derive(Debug, Clone, PartialEq)]
pub enum Kinetic {
    /// `B = F g⁻¹ Fᵀ` with `F = [f^1 … f^d]` and `g` the metric on the
    /// distribution in frame coordinates.
    SubRiemannian {
        fields: Vec<Vec<Expr>>,
        metric: Vec<Vec<Expr>>,
    },
    /// Symmetric `B` given entrywise; only the upper triangle is read.
    Explicit { b: Vec<Vec<Expr>> },
    /// `B_base / (energy − potential)`.
    Scaled {
        base: Box<Kinetic>,
        potential: Expr,
        energy: f64,
    },
}

fn jet_matrix_inverse(m: &[Vec<Jet>]) -> Result<Vec<Vec<Jet>>> {
    let d = m.len();
    let nv = m[0][0].nvars;
    let order = m[0][0].order;
    let mut a: Vec<Vec<Jet>> = m.to_vec();
    let mut inv: Vec<Vec<Jet>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| Jet::constant(nv, order, if i == j { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| a[i][col].v.abs().total_cmp(&a[j][col].v.abs()))
            .unwrap();
        if a[piv][col].v.abs() < 1e-300 {
            return Err(Error::Domain("singular metric".into()));
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let r = a[col][col].recip()?;
        for j in 0..d {
            a[col][j] = a[col][j].mul(&r);
            inv[col][j] = inv[col][j].mul(&r);
        }
        for i in 0..d {
            if i != col {
                let f = a[i][col].clone();
                for j in 0..d {
                    a[i][j] = a[i][j].sub(&f.mul(&a[col][j]));
                    inv[i][j] = inv[i][j].sub(&f.mul(&inv[col][j]));
                }
            }
        }
    }
    Ok(inv)
}

fn minor(m: &[Vec<Expr>], r: usize, c: usize) -> Vec<Vec<Expr>> {
    m.iter()
        .enumerate()
        .filter(|(i, _)| *i != r)
        .map(|(_, row)| {
            row.iter()
                .enumerate()
                .filter(|(j, _)| *j != c)
                .map(|(_, e)| e.clone())
                .collect()
        })
        .collect()
}

fn expr_det(m: &[Vec<Expr>]) -> Expr {
    match m.len() {
        0 => Expr::Num(1.0),
        1 => m[0][0].clone(),
        n => {
            let mut s: Option<Expr> = None;
            for c in 0..n {
                if m[0][c].is_zero() {
                    continue;
                }
                let t = m[0][c].clone() * expr_det(&minor(m, 0, c));
                s = Some(match s {
                    None if c % 2 == 0 => t,
                    None => -t,
                    Some(acc) if c % 2 == 0 => acc + t,
                    Some(acc) => acc - t,
                });
            }
            s.unwrap_or(Expr::Num(0.0))
        }
    }
}

impl Kinetic {
    /// Jets of `B_{ab}(q)`.
    pub fn b_jets(&self, q: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        let n = q.len();
        match self {
            Kinetic::Explicit { b } => {
                let mut out = vec![vec![Jet::constant(n, order, 0.0); n]; n];
                for i in 0..n {
                    for j in i..n {
                        let e = b[i][j].eval_jet(q, order)?;
                        out[j][i] = e.clone();
                        out[i][j] = e;
                    }
                }
                Ok(out)
            }
            Kinetic::SubRiemannian { fields, metric } => {
                let d = fields.len();
                let f: Vec<Vec<Jet>> = fields
                    .iter()
                    .map(|fi| fi.iter().map(|e| e.eval_jet(q, order)).collect())
                    .collect::<Result<_>>()?;
                let g: Vec<Vec<Jet>> = metric
                    .iter()
                    .map(|r| r.iter().map(|e| e.eval_jet(q, order)).collect())
                    .collect::<Result<_>>()?;
                let constant_identity = metric.iter().enumerate().all(|(i, r)| {
                    r.iter()
                        .enumerate()
                        .all(|(j, e)| *e == Expr::Num(if i == j { 1.0 } else { 0.0 }))
                });
                let ginv = if constant_identity { g } else { jet_matrix_inverse(&g)? };
                // h[i][b] = Σ_j ginv_ij f_j^b
                let mut h = vec![vec![Jet::constant(n, order, 0.0); n]; d];
                for i in 0..d {
                    for b in 0..n {
                        for j in 0..d {
                            if constant_identity && i != j {
                                continue;
                            }
                            h[i][b] = h[i][b].add(&ginv[i][j].mul(&f[j][b]));
                        }
                    }
                }
                let mut out = vec![vec![Jet::constant(n, order, 0.0); n]; n];
                for a in 0..n {
                    for b in a..n {
                        let mut s = Jet::constant(n, order, 0.0);
                        for i in 0..d {
                            s = s.add(&f[i][a].mul(&h[i][b]));
                        }
                        out[b][a] = s.clone();
                        out[a][b] = s;
                    }
                }
                Ok(out)
            }
            Kinetic::Scaled {
                base,
                potential,
                energy,
            } => {
                let u = potential.eval_jet(q, order)?;
                let gap = u.neg().add_const(*energy);
                if gap.v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "energy {energy} does not exceed the potential {} at {q:?}",
                        u.v
                    )));
                }
                let r = gap.recip()?;
                Ok(base
                    .b_jets(q, order)?
                    .into_iter()
                    .map(|row| row.into_iter().map(|x| x.mul(&r)).collect())
                    .collect())
            }
        }
    }

    /// Entries of `B` as expressions in `q₁..q_n`, for symbolic
    /// differentiation. Non-identity metrics are inverted by cofactors.
    pub fn b_exprs(&self, n: usize) -> Result<Vec<Vec<Expr>>> {
        match self {
            Kinetic::Explicit { b } => Ok((0..n)
                .map(|i| (0..n).map(|j| b[i.min(j)][i.max(j)].clone()).collect())
                .collect()),
            Kinetic::SubRiemannian { fields, metric } => {
                let d = fields.len();
                let identity = metric.iter().enumerate().all(|(i, r)| {
                    r.iter()
                        .enumerate()
                        .all(|(j, e)| *e == Expr::Num(if i == j { 1.0 } else { 0.0 }))
                });
                let ginv: Vec<Vec<Expr>> = if identity {
                    metric.clone()
                } else {
                    let det = expr_det(metric);
                    (0..d)
                        .map(|i| {
                            (0..d)
                                .map(|j| {
                                    // adjugate entry (i, j) is the (j, i) cofactor
                                    let c = expr_det(&minor(metric, j, i));
                                    let c = if (i + j) % 2 == 0 { c } else { -c };
                                    c / det.clone()
                                })
                                .collect()
                        })
                        .collect()
                };
                let mut out = vec![vec![Expr::Num(0.0); n]; n];
                for a in 0..n {
                    for b in a..n {
                        let mut s = Expr::Num(0.0);
                        for i in 0..d {
                            for j in 0..d {
                                if ginv[i][j].is_zero() || fields[i][a].is_zero() || fields[j][b].is_zero() {
                                    continue;
                                }
                                let term = fields[i][a].clone() * ginv[i][j].clone() * fields[j][b].clone();
                                s = if s.is_zero() { term } else { s + term };
                            }
                        }
                        out[b][a] = s.clone();
                        out[a][b] = s;
                    }
                }
                Ok(out)
            }
            Kinetic::Scaled {
                base,
                potential,
                energy,
            } => {
                let gap = Expr::Num(*energy) - potential.clone();
                Ok(base
                    .b_exprs(n)?
                    .into_iter()
                    .map(|row| {
                        row.into_iter()
                            .map(|e| if e.is_zero() { e } else { e / gap.clone() })
                            .collect()
                    })
                    .collect())
            }
        }
    }

    pub fn b_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let j = self.b_jets(q, 0)?;
        let n = q.len();
        Ok(DMatrix::from_fn(n, n, |a, b| j[a][b].v))
    }
}

/// Value and derivatives of `H` at a phase point. Derivative index
/// conventions: `hqp[(i, j)] = ∂²H/∂q_i∂p_j`.
#[derive(Debug, Clone)]
pub struct HamJet {
    pub h: f64,
    pub hq: DVector<f64>,
    pub hp: DVector<f64>,
    pub hqq: DMatrix<f64>,
    pub hqp: DMatrix<f64>,
    pub hpp: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSpec {
    pub class: KineticClass,
    pub kinetic: Kinetic,
    pub potential: Expr,
    pub energy: f64,
    pub dim: usize,
    /// Annihilator of the distribution, when known.
    pub eta: Option<Vec<Expr>>,
    /// Compact box used for sampled checks.
    pub sample_box: Option<Vec<(f64, f64)>>,
}

impl HamiltonianSpec {
    pub fn new(class: KineticClass, kinetic: Kinetic, potential: Expr, energy: f64, dim: usize) -> Self {
        HamiltonianSpec {
            class,
            kinetic,
            potential,
            energy,
            dim,
            eta: None,
            sample_box: None,
        }
    }

    pub fn with_eta(mut self, eta: Vec<Expr>) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn with_box(mut self, b: Vec<(f64, f64)>) -> Self {
        self.sample_box = Some(b);
        self
    }

    pub fn with_potential(mut self, u: Expr, energy: f64) -> Self {
        self.potential = u;
        self.energy = energy;
        self
    }

    pub fn b_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.kinetic.b_matrix(q)
    }

    pub fn kinetic_value(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let b = self.b_matrix(q)?;
        let p = DVector::from_column_slice(p);
        Ok(0.5 * p.dot(&(b * &p)))
    }

    pub fn hamiltonian(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        Ok(self.kinetic_value(q, p)? + self.potential.eval(q)?)
    }

    /// Annihilator covector at `q`: the supplied `η`, or else the unit null
    /// vector of `B(q)` signed so its largest entry is positive.
    pub fn eta_at(&self, q: &[f64]) -> Result<DVector<f64>> {
        if let Some(eta) = &self.eta {
            let v: Vec<f64> = eta.iter().map(|e| e.eval(q)).collect::<Result<_>>()?;
            return Ok(DVector::from_vec(v));
        }
        let (_, vecs) = crate::linalg::sym_eigen_desc(&self.b_matrix(q)?);
        Ok(vecs.column(self.dim - 1).clone_owned())
    }

    /// Derivatives of `H` up to `order` (at most two).
    pub fn jet(&self, q: &[f64], p: &[f64], order: usize) -> Result<HamJet> {
        let n = self.dim;
        let jo = order.min(2);
        let b = self.kinetic.b_jets(q, jo)?;
        let u = self.potential.eval_jet(q, jo)?;
        let pv = DVector::from_column_slice(p);
        let bm = DMatrix::from_fn(n, n, |a, c| b[a][c].v);
        let bp = &bm * &pv;
        let mut out = HamJet {
            h: 0.5 * pv.dot(&bp) + u.v,
            hq: DVector::zeros(n),
            hp: bp,
            hqq: DMatrix::zeros(n, n),
            hqp: DMatrix::zeros(n, n),
            hpp: bm,
        };
        if order >= 1 {
            for c in 0..n {
                let mut s = 0.0;
                for a in 0..n {
                    for e in 0..n {
                        s += b[a][e].g[c] * p[a] * p[e];
                    }
                }
                out.hq[c] = 0.5 * s + u.g[c];
            }
        }
        if order >= 2 {
            for c in 0..n {
                for e in 0..n {
                    let mut s = 0.0;
                    for a in 0..n {
                        for f in 0..n {
                            s += b[a][f].hess(c, e) * p[a] * p[f];
                        }
                    }
                    out.hqq[(c, e)] = 0.5 * s + u.hess(c, e);
                }
                for a in 0..n {
                    out.hqp[(c, a)] = (0..n).map(|f| b[a][f].g[c] * p[f]).sum();
                }
            }
        }
        Ok(out)
    }

    /// `H` as an expression in `(q₁..q_n, p₁..p_n)`.
    pub fn hamiltonian_expr(&self) -> Result<Expr> {
        let n = self.dim;
        let b = self.kinetic.b_exprs(n)?;
        let mut k: Option<Expr> = None;
        for a in 0..n {
            for c in a..n {
                if b[a][c].is_zero() {
                    continue;
                }
                let w = if a == c { 0.5 } else { 1.0 };
                let t = Expr::Num(w) * b[a][c].clone() * Expr::var(n + a) * Expr::var(n + c);
                k = Some(match k {
                    None => t,
                    Some(acc) => acc + t,
                });
            }
        }
        let k = k.unwrap_or(Expr::Num(0.0));
        Ok(if self.potential.is_zero() { k } else { k + self.potential.clone() })
    }

    /// Hamiltonian vector field as expressions in the phase coordinates.
    pub fn vector_field_exprs(&self) -> Result<Vec<Expr>> {
        let n = self.dim;
        let h = self.hamiltonian_expr()?;
        let mut out: Vec<Expr> = (0..n).map(|a| h.diff(n + a)).collect();
        out.extend((0..n).map(|a| -h.diff(a)));
        Ok(out)
    }

    /// Hamiltonian vector field `(∂_pH, −∂_qH)`.
    pub fn vector_field(&self, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let n = self.dim;
        let j = self.jet(&x[..n], &x[n..], 1)?;
        dx[..n].copy_from_slice(j.hp.as_slice());
        for i in 0..n {
            dx[n + i] = -j.hq[i];
        }
        Ok(())
    }

    /// Largest `|K(q, p + sη) − K(q, p)|` over deterministic samples.
    pub fn fiber_degeneracy_defect(&self, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = self.sample_box.clone().unwrap_or_else(|| vec![(-1.0, 1.0); self.dim]);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let q: Vec<f64> = bx.iter().map(|(a, b)| rng.gen_range(*a..=*b)).collect();
            let p: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: f64 = rng.gen_range(-2.0..2.0);
            let eta = self.eta_at(&q)?;
            let p2: Vec<f64> = p.iter().zip(eta.iter()).map(|(a, e)| a + s * e).collect();
            let k1 = self.kinetic_value(&q, &p)?;
            let k2 = self.kinetic_value(&q, &p2)?;
            worst = worst.max((k1 - k2).abs() / (1.0 + k1.abs()));
        }
        Ok(worst)
    }
}

impl HamiltonianSpec {
    /// Sampled structural checks: `B(q)` symmetric with exactly `rank`
    /// positive eigenvalues, and invariance along the annihilator.
    pub fn validate_sampled(&self, rank: usize, samples: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = self.sample_box.clone().unwrap_or_else(|| vec![(-1.0, 1.0); self.dim]);
        for _ in 0..samples {
            let q: Vec<f64> = bx.iter().map(|(a, b)| rng.gen_range(*a..=*b)).collect();
            let (vals, _) = crate::linalg::sym_eigen_desc(&self.b_matrix(&q)?);
            let scale = vals[0].abs().max(1e-300);
            let pos = vals.iter().filter(|&&v| v > 1e-10 * scale).count();
            if pos != rank || vals.iter().any(|&v| v < -1e-10 * scale) {
                return Err(Error::Invalid(format!(
                    "kinetic matrix at {q:?} has spectrum {vals:?}, expected {rank} positive eigenvalues"
                )));
            }
        }
        if self.eta.is_some() {
            let defect = self.fiber_degeneracy_defect(samples, seed ^ 0x9e37)?;
            if defect > 1e-10 {
                return Err(Error::Invalid(format!("kinetic energy varies along the annihilator ({defect:e})")));
            }
        }
        Ok(())
    }

    /// Largest `|∂_pK·p − βK|` relative to `1 + |K|` over samples.
    pub fn euler_identity_defect(&self, beta: f64, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = self.sample_box.clone().unwrap_or_else(|| vec![(-1.0, 1.0); self.dim]);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let q: Vec<f64> = bx.iter().map(|(a, b)| rng.gen_range(*a..=*b)).collect();
            let p: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let j = self.jet(&q, &p, 0)?;
            let k = j.h - self.potential.eval(&q)?;
            let pair = j.hp.dot(&DVector::from_column_slice(&p));
            worst = worst.max((pair - beta * k).abs() / (1.0 + k.abs()));
        }
        Ok(worst)
    }
}

/// Kinetic Hamiltonian `½ pᵀ F g⁻¹ Fᵀ p` of the Lagrangian `½ cᵀ g c` on
/// the distribution.
pub fn legendre_dual_quadratic(metric: Vec<Vec<Expr>>, frame: &FrameSpec) -> Result<HamiltonianSpec> {
    let d = frame.rank();
    if metric.len() != d || metric.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension(format!("metric must be {d}×{d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let n = frame.dim();
    let bx = frame.chart.bounds.clone().unwrap_or_else(|| vec![(-1.0, 1.0); n]);
    for _ in 0..32 {
        let q: Vec<f64> = bx.iter().map(|(a, b)| rng.gen_range(*a..=*b)).collect();
        let g = DMatrix::from_fn(d, d, |i, j| metric[i][j].eval(&q).unwrap_or(f64::NAN));
        let sym = (&g - g.transpose()).amax();
        if !g.iter().all(|x| x.is_finite()) || sym > 1e-12 * (1.0 + g.amax()) || g.cholesky().is_none() {
            return Err(Error::Invalid(format!(
                "metric is not symmetric positive definite at {q:?}"
            )));
        }
    }
    let mut h = HamiltonianSpec::new(
        KineticClass::Quad,
        Kinetic::SubRiemannian {
            fields: frame.fields.clone(),
            metric,
        },
        Expr::Num(0.0),
        0.5,
        n,
    )
    .with_eta(frame.eta.clone());
    if let Some(b) = &frame.chart.bounds {
        h = h.with_box(b.clone());
    }
    Ok(h)
}

#[derive(Debug, Clone, Serialize)]
pub struct SupercriticalReport {
    pub supercritical: bool,
    /// `k − max U` over the samples.
    pub margin: f64,
    /// Smallest `∂_pH·p` over sampled points of the energy shell.
    pub min_shell_pairing: f64,
}

/// Sampled supercriticality test on the declared box.
pub fn is_supercritical(h: &HamiltonianSpec) -> Result<SupercriticalReport> {
    let bx = h
        .sample_box
        .clone()
        .ok_or_else(|| Error::Invalid("no sampling box declared".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let mut umax = f64::NEG_INFINITY;
    let mut pairing = f64::INFINITY;
    let samples = 4000;
    for k in 0..samples {
        let q: Vec<f64> = bx.iter().map(|(a, b)| rng.gen_range(*a..=*b)).collect();
        let u = h.potential.eval(&q)?;
        umax = umax.max(u);
        // spot-check the shell on a subset
        if k % 20 == 0 && h.energy - u > 0.0 {
            let p: Vec<f64> = (0..h.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kin = h.kinetic_value(&q, &p)?;
            if kin > 1e-12 {
                let s = ((h.energy - u) / kin).sqrt();
                let ps: Vec<f64> = p.iter().map(|x| x * s).collect();
                let j = h.jet(&q, &ps, 0)?;
                pairing = pairing.min(j.hp.dot(&DVector::from_vec(ps)));
            }
        }
    }
    let margin = h.energy - umax;
    Ok(SupercriticalReport {
        supercritical: margin > 0.0 && pairing > 0.0,
        margin,
        min_shell_pairing: pairing,
    })
}

/// Maupertuis reduction: `K/(k − U)` at energy 1 with no potential.
pub fn maupertuis(h: &HamiltonianSpec) -> Result<HamiltonianSpec> {
    let rep = is_supercritical(h)?;
    if !rep.supercritical {
        return Err(Error::Invalid(format!(
            "not supercritical (margin {})",
            rep.margin
        )));
    }
    let mut out = h.clone();
    out.kinetic = Kinetic::Scaled {
        base: Box::new(h.kinetic.clone()),
        potential: h.potential.clone(),
        energy: h.energy,
    };
    out.potential = Expr::Num(0.0);
    out.energy = 1.0;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct NeatAnnotation {
    pub times: Vec<f64>,
    pub neat: Vec<bool>,
    /// Refined self-intersection times.
    pub crossings: Vec<f64>,
    pub tol: f64,
    pub sep: f64,
}

/// Orbit of the Hamiltonian flow with dense output.
#[derive(Debug, Clone)]
pub struct OrbitSegment {
    pub dim: usize,
    /// Integrator step nodes.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub energy_drift: f64,
    /// Set when the orbit returns to its start; the smallest return time.
    pub period: Option<f64>,
    pub regular: Option<Vec<bool>>,
    pub neat: Option<NeatAnnotation>,
    pub sol: DenseSolution,
}

impl OrbitSegment {
    pub fn state(&self, t: f64) -> Vec<f64> {
        self.sol.eval(t)
    }

    pub fn q(&self, t: f64) -> Vec<f64> {
        let mut x = self.sol.eval(t);
        x.truncate(self.dim);
        x
    }

    pub fn t0(&self) -> f64 {
        self.sol.t0()
    }

    pub fn t1(&self) -> f64 {
        self.sol.t1()
    }

    /// CSV rows `t,q1..qn,p1..pn,H` at the step nodes.
    pub fn to_csv(&self) -> String {
        let n = self.dim;
        let mut s = String::from("t");
        for i in 1..=n {
            s += &format!(",q{i}");
        }
        for i in 1..=n {
            s += &format!(",p{i}");
        }
        s += ",H\n";
        for ((t, x), e) in self.times.iter().zip(&self.states).zip(&self.energies) {
            s += &format!("{t:.15e}");
            for v in x {
                s += &format!(",{v:.15e}");
            }
            s += &format!(",{e:.15e}\n");
        }
        s
    }
}

pub(crate) fn flow_options(t: f64) -> OdeOptions {
    OdeOptions::tol(1e-13, 1e-13).with_h_max(t.abs().max(1e-300) / 100.0)
}

/// Integrates the Hamiltonian flow from `x0 = (q, p)` for time `t`
/// (negative `t` integrates backwards).
pub fn flow(h: &HamiltonianSpec, x0: &[f64], t: f64) -> Result<OrbitSegment> {
    let n = h.dim;
    if x0.len() != 2 * n {
        return Err(Error::Dimension(format!("phase point must have {} entries", 2 * n)));
    }
    let sol = integrate(
        |_t, x, dx| h.vector_field(x, dx),
        0.0,
        x0,
        t,
        &flow_options(t),
    )?;
    orbit_from_solution(h, sol)
}

fn orbit_from_solution(h: &HamiltonianSpec, sol: DenseSolution) -> Result<OrbitSegment> {
    let n = h.dim;
    let times = sol.nodes();
    let states: Vec<Vec<f64>> = times.iter().map(|&t| sol.eval(t)).collect();
    let energies: Vec<f64> = states
        .iter()
        .map(|x| h.hamiltonian(&x[..n], &x[n..]))
        .collect::<Result<_>>()?;
    let e0 = energies[0];
    let energy_drift = energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
    let mut orbit = OrbitSegment {
        dim: n,
        times,
        states,
        energies,
        energy_drift,
        period: None,
        regular: None,
        neat: None,
        sol,
    };
    orbit.period = detect_period(&orbit);
    Ok(orbit)
}

/// Flow together with its Jacobian `Dφ^t(x0)`.
pub fn flow_with_jacobian(h: &HamiltonianSpec, x0: &[f64], t: f64) -> Result<(OrbitSegment, DMatrix<f64>)> {
    let n = h.dim;
    let m = 2 * n;
    let mut y0 = x0.to_vec();
    y0.extend(DMatrix::<f64>::identity(m, m).iter());
    let sol = integrate(
        |_t, y, dy| {
            let (q, p) = (&y[..n], &y[n..m]);
            let j = h.jet(q, p, 2)?;
            dy[..n].copy_from_slice(j.hp.as_slice());
            for i in 0..n {
                dy[n + i] = -j.hq[i];
            }
            // J·Hess(H)
            let mut a = DMatrix::zeros(m, m);
            a.view_mut((0, 0), (n, n)).copy_from(&j.hqp.transpose());
            a.view_mut((0, n), (n, n)).copy_from(&j.hpp);
            a.view_mut((n, 0), (n, n)).copy_from(&(-&j.hqq));
            a.view_mut((n, n), (n, n)).copy_from(&(-&j.hqp));
            let phi = DMatrix::from_column_slice(m, m, &y[m..]);
            let d: DMatrix<f64> = a * phi;
            dy[m..].copy_from_slice(d.as_slice());
            Ok(())
        },
        0.0,
        &y0,
        t,
        &flow_options(t),
    )?;
    let jac = DMatrix::from_column_slice(m, m, &sol.y_end()[m..]);
    // re-integrate the plain orbit so the segment carries only phase states
    let orbit = flow(h, x0, t)?;
    Ok((orbit, jac))
}

fn detect_period(orbit: &OrbitSegment) -> Option<f64> {
    let x0 = &orbit.states[0];
    let x1 = orbit.states.last().unwrap();
    let scale = 1.0 + x0.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let gap = x0.iter().zip(x1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if gap > 1e-8 * scale {
        return None;
    }
    // smallest return time: first local minimum of the phase distance to x0
    let (t0, t1) = (orbit.t0(), orbit.t1());
    let m = 4000;
    let dist = |t: f64| {
        let x = orbit.state(t);
        x.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let ts: Vec<f64> = (0..=m).map(|k| t0 + (t1 - t0) * k as f64 / m as f64).collect();
    let ds: Vec<f64> = ts.iter().map(|&t| dist(t)).collect();
    for k in 1..m {
        if ds[k] <= ds[k - 1] && ds[k] <= ds[k + 1] && ds[k] < 1e-3 * scale {
            let (tm, dm) = golden_min(&dist, ts[k - 1], ts[k + 1]);
            if dm < 1e-7 * scale {
                return Some(tm - t0);
            }
        }
    }
    Some(t1 - t0)
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..100 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Flags regular times of the projected orbit for the given frame.
pub fn annotate_regular_times(orbit: &mut OrbitSegment, frame: &FrameSpec, h: &HamiltonianSpec) -> Result<()> {
    let n = orbit.dim;
    let mut flags = Vec::with_capacity(orbit.times.len());
    for x in &orbit.states {
        let j = h.jet(&x[..n], &x[n..], 0)?;
        let form = crate::geometry::regularity_form(frame, &x[..n], &j.hp)?;
        let scale = frame.frame_matrix(&x[..n])?.amax();
        let r = form.iter().map(|v| v * v).sum::<f64>().sqrt();
        flags.push(r >= 1e-8 * scale);
    }
    orbit.regular = Some(flags);
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn point_segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let ap: Vec<f64> = a.iter().zip(p).map(|(x, y)| y - x).collect();
    let l2: f64 = ab.iter().map(|x| x * x).sum();
    let s = if l2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let proj: Vec<f64> = a.iter().zip(&ab).map(|(x, y)| x + s * y).collect();
    dist(p, &proj)
}

/// Symmetric Hausdorff distance between two polylines.
pub fn hausdorff_polyline(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let one_sided = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter()
            .map(|p| {
                if y.len() == 1 {
                    return dist(p, &y[0]);
                }
                y.windows(2)
                    .map(|w| point_segment_distance(p, &w[0], &w[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    one_sided(a, b).max(one_sided(b, a))
}

/// Marks sample times whose projected point is revisited at a time at least
/// `sep` away (modulo the period for closed orbits), and locates crossings.
///
/// `tol = 1e-6 · diameter`, `sep = 10 ·` largest integrator step. Candidate
/// segment pairs come from a uniform spatial hash.
pub fn annotate_neat_times(orbit: &OrbitSegment) -> OrbitSegment {
    use std::collections::HashMap;
    let n = orbit.dim;
    let (t0, t1) = (orbit.t0(), orbit.t1());
    let span = t1 - t0;
    let m = 2000usize;
    let times: Vec<f64> = (0..=m).map(|k| t0 + span * k as f64 / m as f64).collect();
    let pts: Vec<Vec<f64>> = times.iter().map(|&t| orbit.q(t)).collect();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for p in &pts {
        for i in 0..n {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let diam = dist(&lo, &hi);
    let tol = 1e-6 * diam;
    let sep = 10.0 * orbit.sol.max_step();
    let period = orbit.period.map(|_| span);
    let tdist = |s: f64, t: f64| {
        let d = (s - t).abs();
        match period {
            Some(p) => d.min(p - d),
            None => d,
        }
    };
    let seglen = pts.windows(2).map(|w| dist(&w[0], &w[1])).fold(0.0, f64::max);
    let cell = seglen.max(tol).max(1e-300);
    let key = |p: &[f64]| -> Vec<i64> { p.iter().map(|x| (x / cell).floor() as i64).collect() };
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for j in 0..m {
        let (ka, kb) = (key(&pts[j]), key(&pts[j + 1]));
        let mut cells = vec![ka.clone()];
        if kb != ka {
            cells.push(kb);
        }
        for c in cells {
            grid.entry(c).or_default().push(j);
        }
    }
    let neighbours = |k: &[i64]| -> Vec<Vec<i64>> {
        let mut out = vec![k.to_vec()];
        for i in 0..k.len() {
            let mut next = Vec::new();
            for c in &out {
                for off in [-1, 1] {
                    let mut c2 = c.clone();
                    c2[i] += off;
                    next.push(c2);
                }
            }
            out.extend(next);
        }
        out
    };
    let qd = |s: f64, p: &[f64]| dist(&orbit.q(s), p);
    let mut neat = vec![true; m + 1];
    let mut crossings: Vec<f64> = Vec::new();
    let mut seen_pairs = std::collections::HashSet::new();
    for i in 0..=m {
        let mut cand: Vec<usize> = Vec::new();
        for c in neighbours(&key(&pts[i])) {
            if let Some(v) = grid.get(&c) {
                cand.extend(v);
            }
        }
        cand.sort_unstable();
        cand.dedup();
        for &j in &cand {
            let (sa, sb) = (times[j], times[j + 1]);
            if tdist(sa, times[i]) <= sep || tdist(sb, times[i]) <= sep {
                continue;
            }
            if point_segment_distance(&pts[i], &pts[j], &pts[j + 1]) > 2.0 * cell {
                continue;
            }
            let p = pts[i].clone();
            let (_, dm) = golden_min(&|s| qd(s, &p), sa, sb);
            if dm < tol {
                neat[i] = false;
            }
            // segment pair refinement for crossings
            let ii = i.min(m - 1);
            let pair = (ii.min(j), ii.max(j));
            if seen_pairs.insert(pair) {
                if let Some((s, u)) = refine_crossing(orbit, times[ii], times[ii + 1], sa, sb, tol) {
                    if tdist(s, u) > sep {
                        for t in [s, u] {
                            if !crossings.iter().any(|c| tdist(*c, t) < 1e-6 * span) {
                                crossings.push(t);
                            }
                        }
                    }
                }
            }
        }
    }
    crossings.sort_by(f64::total_cmp);
    let mut out = orbit.clone();
    out.neat = Some(NeatAnnotation {
        times,
        neat,
        crossings,
        tol,
        sep,
    });
    out
}

/// Gauss–Newton for `Q(s) = Q(u)` with `s ∈ [a0, a1]`, `u ∈ [b0, b1]`.
fn refine_crossing(orbit: &OrbitSegment, a0: f64, a1: f64, b0: f64, b1: f64, tol: f64) -> Option<(f64, f64)> {
    let mut s = 0.5 * (a0 + a1);
    let mut u = 0.5 * (b0 + b1);
    let h = 1e-6 * (a1 - a0).abs().max(1e-12);
    let deriv = |t: f64| -> DVector<f64> {
        let p = DVector::from_vec(orbit.q(t + h));
        let m = DVector::from_vec(orbit.q(t - h));
        (p - m) / (2.0 * h)
    };
    for _ in 0..40 {
        let r = DVector::from_vec(orbit.q(s)) - DVector::from_vec(orbit.q(u));
        if r.norm() < 1e-3 * tol {
            break;
        }
        let ds = deriv(s);
        let du = deriv(u);
        let jm = DMatrix::from_columns(&[ds, -du]);
        let step = jm.svd(true, true).solve(&r, 1e-10).ok()?;
        s = (s - step[0]).clamp(a0 - (a1 - a0), a1 + (a1 - a0));
        u = (u - step[1]).clamp(b0 - (b1 - b0), b1 + (b1 - b0));
    }
    let r = dist(&orbit.q(s), &orbit.q(u));
    (r < tol).then_some((s, u))
}
