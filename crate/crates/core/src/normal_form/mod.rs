//! Normal form of `H = ½pᵀB(q)p + U(q)` along an orbit segment.
//!
//! The chart is built by characteristics. A hyperplane through the orbit
//! start, transverse to the orbit, carries the initial data `g = 0` of the
//! Hamilton–Jacobi equation `H(q, dg) = k`. Flowing those covectors with the
//! Hamiltonian field gives the flow-box chart `χ(s, z)` together with the
//! action `S = g∘χ`. Transverse information is carried as order-three jets
//! in `z` along `z = 0`, sampled at Chebyshev–Lobatto times in `[0, δ]`.
//!
//! In the final chart `H(q, p) = H̲(χ(q), Dχ(q)^{-T}p + dg(χ(q)))`, so
//! `H(q, 0) = k`, `∂_pH(q, 0) = e₁` and `A(t) = ∂²_{p̂p̂}H(te₁, 0)`.

mod jets;
mod symplecto;

pub use jets::{lobatto_times, taylor_at, JetRecord, TubeModel};
pub use symplecto::{FiberedSymplecto, MapJets, ScalarJet, SymplectoStep};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve::{CurveJet, CurveJetRecord};
use crate::dynamics::{HamiltonianSpec, OrbitSegment};
use crate::error::{Error, Result};
use crate::expr::{Expr, Jet};
use crate::linalg::{complement_basis, singular_values, sym_eigen_desc};
use crate::ode::{integrate, OdeOptions};
use crate::series::MatPoly;
use jets::{dot, fit_centred, flat_len, flatten_into, jet_solve, jet_sup, linear_jets, partial, recentre, truncate, unflatten};

/// Relative speed below which the orbit start counts as a rest point.
pub const MIN_SPEED: f64 = 1e-8;
/// Transverse jet order carried along the orbit.
pub const JET_ORDER: usize = 3;
/// Relative eigenvalue cutoff for the co-rank of the transverse Hessian.
pub const CORANK_TOL: f64 = 1e-9;
/// Characteristics whose jets exceed this size are reported as escaping.
const ESCAPE: f64 = 1e8;

fn vsub(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Step one: tube coordinates `(s, y) ↦ Q(s) + W y` around the projected
/// orbit, with `W` an orthonormal basis of `ker p₀`.
#[derive(Debug, Clone)]
pub struct Straightening {
    pub dim: usize,
    pub base: Vec<f64>,
    pub momentum: Vec<f64>,
    pub section: DMatrix<f64>,
    h: HamiltonianSpec,
    orbit: OrbitSegment,
}

pub fn straighten_orbit(h: &HamiltonianSpec, orbit: &OrbitSegment) -> Result<Straightening> {
    let n = h.dim;
    if orbit.dim != n {
        return Err(Error::Dimension("orbit and Hamiltonian dimensions differ".into()));
    }
    let x = orbit.state(orbit.t0());
    let mut dx = vec![0.0; 2 * n];
    h.vector_field(&x, &mut dx)?;
    let p = DVector::from_column_slice(&x[n..]);
    let v = DVector::from_column_slice(&dx[..n]);
    if v.norm() < MIN_SPEED * (1.0 + p.norm()) {
        return Err(Error::Invalid(format!(
            "projected velocity vanishes at the orbit start (|q̇| = {:e})",
            v.norm()
        )));
    }
    // q̇ = Bp with B ⪰ 0, so p·q̇ > 0 once q̇ ≠ 0
    if p.dot(&v) <= 1e-12 * p.norm() * v.norm() {
        return Err(Error::Invalid("momentum does not pair positively with the velocity".into()));
    }
    Ok(Straightening {
        dim: n,
        base: x[..n].to_vec(),
        momentum: x[n..].to_vec(),
        section: complement_basis(&p)?,
        h: h.clone(),
        orbit: orbit.clone(),
    })
}

impl Straightening {
    pub fn d(&self) -> usize {
        self.dim - 1
    }

    pub fn energy(&self) -> Result<f64> {
        self.h.hamiltonian(&self.base, &self.momentum)
    }

    pub fn hamiltonian_spec(&self) -> &HamiltonianSpec {
        &self.h
    }

    /// Orbit state at time `s` after its start.
    pub fn orbit_state(&self, s: f64) -> Result<Vec<f64>> {
        let t = self.orbit.t0() + s;
        let (lo, hi) = (self.orbit.t0(), self.orbit.t1());
        let slack = 1e-12 * (1.0 + hi.abs());
        if t < lo - slack || t > hi + slack {
            return Err(Error::Invalid(format!("time {s} lies outside the orbit segment")));
        }
        Ok(self.orbit.state(t.clamp(lo, hi)))
    }

    pub fn duration(&self) -> f64 {
        self.orbit.t1() - self.orbit.t0()
    }

    pub fn velocity(&self, s: f64) -> Result<DVector<f64>> {
        let x = self.orbit_state(s)?;
        let mut dx = vec![0.0; 2 * self.dim];
        self.h.vector_field(&x, &mut dx)?;
        Ok(DVector::from_column_slice(&dx[..self.dim]))
    }

    /// `Q̈(s)` from the second derivatives of `H`.
    pub fn acceleration(&self, s: f64) -> Result<DVector<f64>> {
        let n = self.dim;
        let x = self.orbit_state(s)?;
        let j = self.h.jet(&x[..n], &x[n..], 2)?;
        let qdot = &j.hp;
        let pdot = -&j.hq;
        Ok(j.hqp.transpose() * qdot + &j.hpp * pdot)
    }

    pub fn tube_point(&self, s: f64, y: &[f64]) -> Result<Vec<f64>> {
        let x = self.orbit_state(s)?;
        let w = &self.section * DVector::from_column_slice(y);
        Ok((0..self.dim).map(|i| x[i] + w[i]).collect())
    }

    fn tube_jacobian(&self, s: f64) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        m.set_column(0, &self.velocity(s)?);
        m.view_mut((0, 1), (self.dim, self.d())).copy_from(&self.section);
        Ok(m)
    }

    /// Tube coordinates of `x` by Newton's method.
    pub fn to_tube(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.dim;
        if x.len() != n {
            return Err(Error::Dimension(format!("point must have {n} entries")));
        }
        let t0 = self.orbit.t0();
        let mut s = self
            .orbit
            .times
            .iter()
            .zip(&self.orbit.states)
            .min_by(|a, b| vsub(&a.1[..n], x).total_cmp(&vsub(&b.1[..n], x)))
            .map(|(t, _)| t - t0)
            .unwrap_or(0.0);
        let q = self.orbit_state(s)?;
        let r = DVector::from_fn(n, |i, _| x[i] - q[i]);
        let mut y: Vec<f64> = (self.section.transpose() * r).iter().copied().collect();
        for _ in 0..50 {
            let p = self.tube_point(s, &y)?;
            let r = DVector::from_fn(n, |i, _| p[i] - x[i]);
            let step = self
                .tube_jacobian(s)?
                .lu()
                .solve(&r)
                .ok_or_else(|| Error::Numerical("singular tube Jacobian".into()))?;
            s = (s - step[0]).clamp(0.0, self.duration());
            for (k, yk) in y.iter_mut().enumerate() {
                *yk -= step[1 + k];
            }
            if step.amax() < 1e-15 * (1.0 + s.abs() + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                return Ok((s, y));
            }
        }
        let resid = vsub(&self.tube_point(s, &y)?, x);
        if resid < 1e-12 {
            Ok((s, y))
        } else {
            Err(Error::Numerical(format!("tube coordinates did not converge (residual {resid:e})")))
        }
    }

    /// Order-two jets of `φ₁ = (tube map)⁻¹` at `x`.
    pub fn inverse_jets(&self, x: &[f64]) -> Result<Vec<Jet>> {
        let n = self.dim;
        let (s, y) = self.to_tube(x)?;
        let minv = self
            .tube_jacobian(s)?
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular tube Jacobian".into()))?;
        let acc = &minv * self.acceleration(s)?;
        Ok((0..n)
            .map(|a| {
                let mut j = Jet::constant(n, 2, if a == 0 { s } else { y[a - 1] });
                for b in 0..n {
                    j.g[b] = minv[(a, b)];
                    for c in 0..n {
                        // D²φ[u, v] = −M⁻¹ Q̈ (M⁻¹u)₀ (M⁻¹v)₀
                        j.h[b * n + c] = -acc[a] * minv[(0, b)] * minv[(0, c)];
                    }
                }
                j
            })
            .collect())
    }

    /// Homogeneous lift of `φ₁`.
    pub fn symplecto(&self) -> FiberedSymplecto {
        let me = self.clone();
        FiberedSymplecto::homogeneous_fn(self.dim, move |x| me.inverse_jets(x))
    }
}

struct Propagated {
    states: Vec<Vec<Jet>>,
    rates: Vec<Vec<Jet>>,
    accel: Vec<Vec<f64>>,
}

fn field_on_jets(field: &[Expr], js: &[Jet]) -> Result<Vec<Jet>> {
    field.iter().map(|f| f.eval_on_jets(js)).collect()
}

/// Integrates `y' = field(y)` for jet-valued `y` through `times`.
fn propagate(field: &[Expr], init: Vec<Jet>, times: &[f64]) -> Result<Propagated> {
    let m = init.len();
    let (nv, order) = (init[0].nvars, init[0].order);
    let fl = flat_len(nv, order);
    let unpack = |y: &[f64]| -> Vec<Jet> { (0..m).map(|i| unflatten(nv, order, &y[i * fl..(i + 1) * fl])).collect() };
    let rhs = |y: &[f64], dy: &mut [f64]| -> Result<()> {
        let js = unpack(y);
        for (i, f) in field.iter().enumerate() {
            flatten_into(&f.eval_on_jets(&js)?, &mut dy[i * fl..(i + 1) * fl]);
        }
        Ok(())
    };
    let span = times.last().copied().unwrap_or(0.0) - times[0];
    let opts = OdeOptions::tol(1e-13, 1e-13).with_h_max((span / 8.0).max(1e-300));
    let mut y = vec![0.0; m * fl];
    for (i, j) in init.iter().enumerate() {
        flatten_into(j, &mut y[i * fl..(i + 1) * fl]);
    }
    let mut states = vec![init];
    for w in times.windows(2) {
        let sol = integrate(|_t, y, dy| rhs(y, dy), w[0], &y, w[1], &opts)?;
        y = sol.y_end().to_vec();
        if y.iter().any(|v| v.abs() > ESCAPE) {
            return Err(Error::Integration(format!("characteristic jets escape before s = {}", w[1])));
        }
        states.push(unpack(&y));
    }
    let mut rates = Vec::with_capacity(states.len());
    let mut accel = Vec::with_capacity(states.len());
    for js in &states {
        let r = field_on_jets(field, js)?;
        // d/ds of the field along the base curve
        let line: Vec<Jet> = js
            .iter()
            .zip(&r)
            .map(|(x, dx)| {
                let mut j = Jet::constant(1, 1, x.v);
                j.g[0] = dx.v;
                j
            })
            .collect();
        accel.push(field.iter().map(|f| f.eval_on_jets(&line).map(|j| j.g[0])).collect::<Result<_>>()?);
        rates.push(r);
    }
    Ok(Propagated { states, rates, accel })
}

/// Step two: the Hamilton–Jacobi solution by characteristics from the
/// section `base + section·z`, carried as jets in `z`.
///
/// Components are `X` (position), `Π = dg(X)` and the action `S = g(X)`.
#[derive(Debug, Clone)]
pub struct CharacteristicFamily {
    pub dim: usize,
    pub d: usize,
    pub energy: f64,
    pub delta: f64,
    pub base: Vec<f64>,
    /// Unit conormal of the section; initial covectors are multiples of it.
    pub conormal: Vec<f64>,
    pub section: DMatrix<f64>,
    pub times: Vec<f64>,
    /// `states[k]`: jets of `(X, Π, S)` at `times[k]`.
    pub states: Vec<Vec<Jet>>,
    /// `s`-derivatives of the states.
    pub rates: Vec<Vec<Jet>>,
    /// Second `s`-derivatives at `z = 0`.
    pub accel: Vec<Vec<f64>>,
}

/// Phase field with the action rate `p·∂_pH` appended.
fn characteristic_field(h: &HamiltonianSpec) -> Result<Vec<Expr>> {
    let n = h.dim;
    let mut f = h.vector_field_exprs()?;
    let mut rate: Option<Expr> = None;
    for a in 0..n {
        if f[a].is_zero() {
            continue;
        }
        let t = Expr::var(n + a) * f[a].clone();
        rate = Some(match rate {
            None => t,
            Some(r) => r + t,
        });
    }
    f.push(rate.unwrap_or(Expr::Num(0.0)));
    Ok(f)
}

pub fn solve_hj_jets(
    h: &HamiltonianSpec,
    straight: &Straightening,
    section: &DMatrix<f64>,
    energy: f64,
    delta: f64,
    degree: usize,
) -> Result<CharacteristicFamily> {
    let n = h.dim;
    let d = n - 1;
    if section.shape() != (n, d) {
        return Err(Error::Dimension(format!("section basis must be {n}×{d}")));
    }
    if !(delta > 0.0 && delta.is_finite()) || degree < 2 {
        return Err(Error::Invalid("need δ > 0 and at least three nodes".into()));
    }
    let p0 = DVector::from_column_slice(&straight.momentum);
    let nu = p0.normalize();
    if (section.transpose() * &nu).amax() > 1e-10 * section.amax() {
        return Err(Error::Invalid("section is not annihilated by the orbit momentum".into()));
    }
    let x = linear_jets(&straight.base, section, JET_ORDER);
    let u = h.potential.eval_on_jets(&x)?;
    let b = h.kinetic.b_exprs(n)?;
    let mut c = Jet::constant(d, JET_ORDER, 0.0);
    for a in 0..n {
        for e in 0..n {
            if nu[a] != 0.0 && nu[e] != 0.0 && !b[a][e].is_zero() {
                c = c.add(&b[a][e].eval_on_jets(&x)?.scale(nu[a] * nu[e]));
            }
        }
    }
    let gap = u.neg().add_const(energy).scale(2.0);
    if gap.v <= 0.0 {
        return Err(Error::Numerical(format!(
            "no momentum on the energy level at the section: k − U = {:e}",
            0.5 * gap.v
        )));
    }
    if c.v <= 1e-14 {
        return Err(Error::Numerical("section conormal is null for the kinetic form".into()));
    }
    // every supported kinetic term is quadratic in p, so the root is explicit
    let tau = gap.div(&c)?.sqrt()?;
    let mut init = x;
    init.extend((0..n).map(|a| tau.scale(nu[a])));
    init.push(Jet::constant(d, JET_ORDER, 0.0));
    let times = lobatto_times(delta, degree);
    let prop = propagate(&characteristic_field(h)?, init, &times)?;
    Ok(CharacteristicFamily {
        dim: n,
        d,
        energy,
        delta,
        base: straight.base.clone(),
        conormal: nu.iter().copied().collect(),
        section: section.clone(),
        times,
        states: prop.states,
        rates: prop.rates,
        accel: prop.accel,
    })
}

impl CharacteristicFamily {
    pub fn point(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let v: Vec<f64> = self.states[k].iter().map(|j| j.v).collect();
        (v[..n].to_vec(), v[n..2 * n].to_vec())
    }

    /// `Dχ = [∂_sX, ∂_zX]` at `(times[k], 0)`.
    pub fn dchi(&self, k: usize) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |a, u| {
            if u == 0 {
                self.rates[k][a].v
            } else {
                self.states[k][a].g[u - 1]
            }
        })
    }

    /// `Dχ` as order-two jets in `z`.
    pub fn dchi_jets(&self, k: usize) -> Vec<Vec<Jet>> {
        (0..self.dim)
            .map(|a| {
                let mut row = vec![truncate(&self.rates[k][a], 2)];
                row.extend((0..self.d).map(|j| partial(&self.states[k][a], j)));
                row
            })
            .collect()
    }

    /// Hessian in `(s, z)` of component `i` at `(times[k], 0)`.
    pub fn hessian_sz(&self, k: usize, i: usize) -> DMatrix<f64> {
        let m = self.d + 1;
        DMatrix::from_fn(m, m, |u, w| match (u, w) {
            (0, 0) => self.accel[k][i],
            (0, w) => self.rates[k][i].g[w - 1],
            (u, 0) => self.rates[k][i].g[u - 1],
            (u, w) => self.states[k][i].hess(u - 1, w - 1),
        })
    }

    /// Hessian of `g` in the original coordinates at `X(times[k], 0)`, from
    /// `D²S = Dχᵀ D²g Dχ + Σ_a ∂_a g D²χ_a`.
    pub fn g_hessian(&self, k: usize) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let (_, p) = self.point(k);
        let mut m = self.hessian_sz(k, 2 * n);
        for (a, pa) in p.iter().enumerate() {
            m -= self.hessian_sz(k, a) * *pa;
        }
        let inv = self
            .dchi(k)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular flow-box chart".into()))?;
        Ok(inv.transpose() * m * inv)
    }
}

/// Step three as a standalone map: `(s, z) ↦ Flow^s(base + section·z)` for
/// an autonomous field, with jets in `z` on Lobatto times.
#[derive(Debug, Clone)]
pub struct FlowBox {
    pub base: Vec<f64>,
    pub section: DMatrix<f64>,
    pub delta: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<Jet>>,
    pub rates: Vec<Vec<Jet>>,
}

pub fn flow_box(field: &[Expr], base: &[f64], section: &DMatrix<f64>, delta: f64, degree: usize) -> Result<FlowBox> {
    let n = base.len();
    if field.len() != n || section.shape() != (n, n - 1) {
        return Err(Error::Dimension(format!("flow box needs {n} field components and an {n}×{} section", n - 1)));
    }
    let x0: Vec<f64> = field.iter().map(|f| f.eval(base)).collect::<Result<_>>()?;
    let xn = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xn < 1e-10 {
        return Err(Error::Invalid("vector field vanishes at the base point".into()));
    }
    let mut m = DMatrix::zeros(n, n);
    m.set_column(0, &DVector::from_column_slice(&x0));
    m.view_mut((0, 1), (n, n - 1)).copy_from(section);
    let sv = singular_values(&m);
    if sv[n - 1] < 1e-10 * sv[0] {
        return Err(Error::Invalid("section is tangent to the field".into()));
    }
    let times = lobatto_times(delta, degree);
    let prop = propagate(field, linear_jets(base, section, JET_ORDER), &times)?;
    Ok(FlowBox {
        base: base.to_vec(),
        section: section.clone(),
        delta,
        times,
        states: prop.states,
        rates: prop.rates,
    })
}

impl FlowBox {
    /// Jacobian `[X, ∂_z Flow]` at `(times[k], 0)`; its inverse is `Dφ₂`.
    pub fn jacobian(&self, k: usize) -> DMatrix<f64> {
        let n = self.base.len();
        DMatrix::from_fn(n, n, |a, u| {
            if u == 0 {
                self.rates[k][a].v
            } else {
                self.states[k][a].g[u - 1]
            }
        })
    }

    /// Cubic Taylor model of the map at `(times[k], z)`.
    pub fn map_at(&self, k: usize, z: &[f64]) -> Vec<f64> {
        self.states[k].iter().map(|j| taylor_at(j, z).0).collect()
    }

    pub fn model(&self) -> Result<TubeModel> {
        TubeModel::fit(self.delta, &self.states)
    }
}

/// Step four: `M̄ = diag(Λ^{-1/2}, 1) G` with `Ā(0) = Gᵀ diag(Λ, 0) G`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNormalization {
    /// Descending; the last one is the null eigenvalue.
    pub eigenvalues: Vec<f64>,
    /// Rows are eigenvectors.
    pub rotation: DMatrix<f64>,
    /// Acts on momenta: `Ā ↦ M̄ Ā M̄ᵀ`.
    pub m_bar: DMatrix<f64>,
}

impl LinearNormalization {
    /// `M̄⁻¹`, the matching change of transverse coordinates.
    pub fn coordinate_map(&self) -> DMatrix<f64> {
        let d = self.eigenvalues.len();
        let s = DMatrix::from_fn(d, d, |i, j| {
            if i != j {
                0.0
            } else if i + 1 == d {
                1.0
            } else {
                self.eigenvalues[i].sqrt()
            }
        });
        self.rotation.transpose() * s
    }
}

pub fn linear_normalize(a0: &DMatrix<f64>) -> Result<LinearNormalization> {
    let d = a0.nrows();
    if a0.ncols() != d || d == 0 {
        return Err(Error::Dimension("transverse Hessian must be square".into()));
    }
    if (a0 - a0.transpose()).amax() > 1e-10 * (1.0 + a0.amax()) {
        return Err(Error::Invalid("transverse Hessian is not symmetric".into()));
    }
    let (vals, mut vecs) = sym_eigen_desc(a0);
    let top = vals[0].abs().max(1e-300);
    let rank = vals.iter().filter(|v| v.abs() > CORANK_TOL * top).count();
    if vals.iter().any(|&v| v < -CORANK_TOL * top) {
        return Err(Error::Invalid("transverse Hessian is not positive semidefinite".into()));
    }
    if rank + 1 != d {
        return Err(Error::Invalid(format!(
            "transverse Hessian has rank {rank}, expected {} (co-rank one)",
            d - 1
        )));
    }
    // null eigenvector: last clearly nonzero component positive
    let mut null = vecs.column(d - 1).clone_owned();
    if let Some(&c) = null.iter().rev().find(|c| c.abs() > 1e-12) {
        if c < 0.0 {
            null.neg_mut();
        }
    }
    vecs.set_column(d - 1, &null);
    let g = vecs.transpose();
    let scale = DMatrix::from_fn(d, d, |i, j| {
        if i != j {
            0.0
        } else if i + 1 == d {
            1.0
        } else {
            1.0 / vals[i].sqrt()
        }
    });
    Ok(LinearNormalization {
        eigenvalues: vals,
        m_bar: scale * &g,
        rotation: g,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalFormOptions {
    /// Chebyshev degree in time.
    pub degree: usize,
    pub min_delta: f64,
    /// Bound for the residuals of the transformed Hamiltonian.
    pub tol: f64,
    /// Bound for the orbit residual.
    pub orbit_tol: f64,
    /// Bound for `A(t) n(t)`.
    pub null_tol: f64,
}

impl Default for NormalFormOptions {
    fn default() -> Self {
        NormalFormOptions {
            degree: 16,
            min_delta: 1e-3,
            tol: 1e-7,
            orbit_tol: 1e-8,
            null_tol: 1e-9,
        }
    }
}

/// Certification residuals of a normal form, all maxima over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalFormResiduals {
    /// `|Φ⁻¹(te₁, 0) − θ(t)|` at nodes and midpoints.
    pub orbit: f64,
    /// `H(q, 0) − k` to transverse order three.
    pub energy: f64,
    /// `∂_pH(q, 0) − e₁` to order two, with `∂_sχ` from the time interpolant.
    pub drift: f64,
    /// `|A(0) − diag(I, 0)|`.
    pub block: f64,
    /// `B dg − e₁` in the final chart to order two, `dg` from the action.
    pub euler: f64,
    /// `H(q, dg) − k` before the vertical shift, to order two.
    pub hamilton_jacobi: f64,
    /// `|A(t) n(t)|` on 65 points.
    pub null: f64,
    /// Distance between `n` and the pushed-forward annihilator `ñ`.
    pub annihilator: f64,
    /// `| |n(t)| − 1 |` on 65 points.
    pub unit: f64,
    /// Smallest `λ_{d−1}(A) / λ_max(A)` over the nodes.
    pub rank_margin: f64,
    /// Largest `|λ_d(A)| / λ_max(A)` over the nodes.
    pub corank_defect: f64,
}

impl NormalFormResiduals {
    pub fn failures(&self, o: &NormalFormOptions) -> Vec<String> {
        let mut f = vec![];
        let mut chk = |name: &str, v: f64, tol: f64| {
            if !(v < tol) {
                f.push(format!("{name} = {v:e} (tolerance {tol:e})"));
            }
        };
        chk("orbit", self.orbit, o.orbit_tol);
        chk("energy", self.energy, o.tol);
        chk("drift", self.drift, o.tol);
        chk("block", self.block, o.tol);
        chk("euler", self.euler, o.tol);
        chk("hamilton_jacobi", self.hamilton_jacobi, o.tol);
        chk("null", self.null, o.null_tol);
        chk("annihilator", self.annihilator, o.tol);
        chk("unit", self.unit, o.tol);
        chk("corank_defect", self.corank_defect, CORANK_TOL);
        if !(self.rank_margin > CORANK_TOL) {
            f.push(format!("rank margin {:e}", self.rank_margin));
        }
        f
    }
}

/// Normal form along `[0, δ]`.
#[derive(Debug, Clone)]
pub struct NormalFormData {
    pub delta: f64,
    pub energy: f64,
    pub dim: usize,
    pub d: usize,
    /// How often `δ` was halved before certification.
    pub halvings: usize,
    pub times: Vec<f64>,
    /// `A(t)` and the unit null direction `n(t)`.
    pub curve: CurveJet,
    /// `ñ(t)` at the nodes.
    pub n_tilde: Vec<DVector<f64>>,
    pub normalization: LinearNormalization,
    pub straightening: Straightening,
    pub family: CharacteristicFamily,
    /// `H(q, 0)` as order-three jets in `z` at each node.
    pub h0: Vec<Jet>,
    /// `∂_pH(q, 0)`, order two.
    pub h1: Vec<Vec<Jet>>,
    /// `∂²_{pp}H(q)`, order two.
    pub h2: Vec<Vec<Vec<Jet>>>,
    /// Interpolated chart `χ(s, z)`.
    pub chart: TubeModel,
    /// Interpolated action `S(s, z) = g(χ(s, z))`.
    pub action: TubeModel,
    pub residuals: NormalFormResiduals,
}

/// JSON form of [`NormalFormData`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalFormRecord {
    pub delta: f64,
    pub energy: f64,
    pub dim: usize,
    pub d: usize,
    pub halvings: usize,
    pub times: Vec<f64>,
    pub curve: CurveJetRecord,
    pub n_tilde: Vec<Vec<f64>>,
    pub m_bar: Vec<Vec<f64>>,
    pub section: Vec<Vec<f64>>,
    pub base: Vec<f64>,
    pub momentum: Vec<f64>,
    pub h0: Vec<JetRecord>,
    pub h1: Vec<Vec<JetRecord>>,
    pub h2: Vec<Vec<Vec<JetRecord>>>,
    pub chart: Vec<Vec<JetRecord>>,
    pub action: Vec<JetRecord>,
    pub residuals: NormalFormResiduals,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl NormalFormData {
    pub fn a_at(&self, t: f64) -> DMatrix<f64> {
        self.curve.a_at(t)
    }

    pub fn n_at(&self, t: f64) -> DVector<f64> {
        self.curve.n_at(t).expect("normal forms carry n")
    }

    /// `A` at `times[k]`, read off the transformed Hamiltonian.
    pub fn a_node(&self, k: usize) -> DMatrix<f64> {
        let d = self.d;
        let a = DMatrix::from_fn(d, d, |i, j| self.h2[k][1 + i][1 + j].v);
        0.5 * (&a + a.transpose())
    }

    /// Gradient of the action `S` in normal coordinates.
    pub fn action_gradient(&self, q: &[f64]) -> Vec<f64> {
        self.action.jet_sz(0, q[0], &q[1..]).g
    }

    /// `ṅ(0)`.
    pub fn n_dot0(&self) -> DVector<f64> {
        let n = self.curve.n.as_ref().expect("normal forms carry n");
        n.coeff(1).map(|c| c.column(0).clone_owned()).unwrap_or_else(|_| DVector::zeros(self.d))
    }

    /// `Φ⁻¹ = Ψ_χ ∘ Ψ^{g∘χ}`, from normal to original coordinates. Valid for
    /// `s ∈ [0, δ]` and small `z`.
    pub fn inverse_symplecto(&self) -> FiberedSymplecto {
        let (chart, action, n) = (self.chart.clone(), self.action.clone(), self.dim);
        let vertical = FiberedSymplecto::vertical_fn(n, move |q| Ok(action.jet_sz(0, q[0], &q[1..])));
        let homogeneous = FiberedSymplecto::homogeneous_fn(n, move |q| Ok((0..n).map(|i| chart.jet_sz(i, q[0], &q[1..])).collect()));
        vertical.then(&homogeneous).expect("same dimension")
    }

    /// The transformed Hamiltonian `H̲ ∘ Φ⁻¹`.
    pub fn hamiltonian(&self, h: &HamiltonianSpec, q: &[f64], p: &[f64]) -> Result<f64> {
        let (x, px) = self.inverse_symplecto().apply(q, p)?;
        h.hamiltonian(&x, &px)
    }

    pub fn to_record(&self) -> NormalFormRecord {
        let recs = |v: &[Jet]| v.iter().map(JetRecord::from).collect::<Vec<_>>();
        NormalFormRecord {
            delta: self.delta,
            energy: self.energy,
            dim: self.dim,
            d: self.d,
            halvings: self.halvings,
            times: self.times.clone(),
            curve: self.curve.to_record(),
            n_tilde: self.n_tilde.iter().map(|v| v.iter().copied().collect()).collect(),
            m_bar: rows(&self.normalization.m_bar),
            section: rows(&self.family.section),
            base: self.family.base.clone(),
            momentum: self.straightening.momentum.clone(),
            h0: recs(&self.h0),
            h1: self.h1.iter().map(|r| recs(r)).collect(),
            h2: self.h2.iter().map(|m| m.iter().map(|r| recs(r)).collect()).collect(),
            chart: self.family.states.iter().map(|s| recs(&s[..self.dim])).collect(),
            action: self.family.states.iter().map(|s| JetRecord::from(&s[2 * self.dim])).collect(),
            residuals: self.residuals.clone(),
        }
    }
}

/// Largest residual of a jet vector against `target`.
fn sup_against(js: &[Jet], target: &[f64]) -> f64 {
    js.iter()
        .zip(target)
        .map(|(j, &t)| jet_sup(&j.add_const(-t)))
        .fold(0.0, f64::max)
}

fn transpose_jets(m: &[Vec<Jet>]) -> Vec<Vec<Jet>> {
    let n = m.len();
    (0..n).map(|i| (0..n).map(|j| m[j][i].clone()).collect()).collect()
}

fn mat_vec(m: &[Vec<Jet>], v: &[Jet]) -> Vec<Jet> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Exact polynomial through matrix samples at [`lobatto_times`]`(delta, _)`,
/// expanded about `t = 0`.
pub fn fit_matrix_nodes(delta: f64, values: &[DMatrix<f64>]) -> Result<MatPoly> {
    let (r, c) = values[0].shape();
    let deg = values.len();
    let mut coeffs = vec![DMatrix::zeros(r, c); deg];
    let mut col = vec![0.0; deg];
    for i in 0..r {
        for j in 0..c {
            for (k, v) in values.iter().enumerate() {
                col[k] = v[(i, j)];
            }
            let tc = recentre(&fit_centred(delta, &col), 0.5 * delta);
            for (k, x) in tc.into_iter().enumerate() {
                coeffs[k][(i, j)] = x;
            }
        }
    }
    MatPoly::exact(coeffs)
}

fn e1(n: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[0] = 1.0;
    e
}

/// One attempt at a fixed `δ`.
fn attempt(
    h: &HamiltonianSpec,
    st: &Straightening,
    norm: &LinearNormalization,
    energy: f64,
    delta: f64,
    opts: &NormalFormOptions,
) -> Result<NormalFormData> {
    let n = h.dim;
    let d = n - 1;
    if st.duration() < delta * (1.0 - 1e-12) {
        return Err(Error::Invalid(format!(
            "orbit segment of length {} is shorter than δ = {delta}",
            st.duration()
        )));
    }
    let section = &st.section * norm.coordinate_map();
    let fam = solve_hj_jets(h, st, &section, energy, delta, opts.degree)?;
    let states_x: Vec<Vec<Jet>> = fam.states.iter().map(|s| s[..n].to_vec()).collect();
    let chart = TubeModel::fit(delta, &states_x)?;
    let action = TubeModel::fit(delta, &fam.states.iter().map(|s| vec![s[2 * n].clone()]).collect::<Vec<_>>())?;
    let b_exprs = h.kinetic.b_exprs(n)?;
    let h_expr = h.hamiltonian_expr()?;
    let e = e1(n);

    let mut res = NormalFormResiduals {
        orbit: 0.0,
        energy: 0.0,
        drift: 0.0,
        block: 0.0,
        euler: 0.0,
        hamilton_jacobi: 0.0,
        null: 0.0,
        annihilator: 0.0,
        unit: 0.0,
        rank_margin: f64::INFINITY,
        corank_defect: 0.0,
    };
    let (mut h0s, mut h1s, mut h2s) = (vec![], vec![], vec![]);
    let mut a_nodes = Vec::with_capacity(fam.times.len());
    let mut nu_nodes = Vec::with_capacity(fam.times.len());
    for (k, &t) in fam.times.iter().enumerate() {
        let dchi_val = fam.dchi(k);
        let sv = singular_values(&dchi_val);
        if sv[n - 1] < 1e-10 * sv[0] {
            return Err(Error::Numerical(format!("characteristics focus before s = {t}")));
        }
        let dchi = fam.dchi_jets(k);
        let xs: Vec<Jet> = fam.states[k][..n].iter().map(|j| truncate(j, 2)).collect();
        let ps: Vec<Jet> = fam.states[k][n..2 * n].iter().map(|j| truncate(j, 2)).collect();
        let bx: Vec<Vec<Jet>> = b_exprs
            .iter()
            .map(|row| row.iter().map(|e| e.eval_on_jets(&xs)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        let bp = mat_vec(&bx, &ps);
        // ∂_pH(q, 0) and ∂²_pp H(q) in the final chart
        let h1 = jet_solve(&dchi, std::slice::from_ref(&bp))?.remove(0);
        let y = jet_solve(&dchi, &transpose_jets(&bx))?; // columns of Dχ⁻¹ B
        let y_rows: Vec<Vec<Jet>> = (0..n).map(|a| (0..n).map(|c| y[c][a].clone()).collect()).collect();
        let h2_cols = jet_solve(&dchi, &y_rows)?;
        let h2: Vec<Vec<Jet>> = transpose_jets(&h2_cols);
        let h0 = h_expr.eval_on_jets(&fam.states[k][..2 * n])?;
        res.energy = res.energy.max(jet_sup(&h0.add_const(-energy)));

        // dg from the action, pulled back through the chart
        let s_jet = &fam.states[k][2 * n];
        let mut ds = vec![truncate(&fam.rates[k][2 * n], 2)];
        ds.extend((0..d).map(|j| partial(s_jet, j)));
        let p_from_s = jet_solve(&transpose_jets(&dchi), &[ds])?.remove(0);
        let u = h.potential.eval_on_jets(&xs)?;
        let hj = dot(&p_from_s, &mat_vec(&bx, &p_from_s)).scale(0.5).add(&u);
        res.hamilton_jacobi = res.hamilton_jacobi.max(jet_sup(&hj.add_const(-energy)));
        let euler = jet_solve(&dchi, &[mat_vec(&bx, &p_from_s)])?.remove(0);
        res.euler = res.euler.max(sup_against(&euler, &e));

        // (c) with the time derivative of the chart taken from the interpolant
        let mut dchi_interp = dchi.clone();
        for (a, row) in dchi_interp.iter_mut().enumerate() {
            row[0] = truncate(&chart.z_jets(a, t)[1], 2);
        }
        let drift = jet_solve(&dchi_interp, &[bp])?.remove(0);
        res.drift = res.drift.max(sup_against(&drift, &e));

        let full = DMatrix::from_fn(n, n, |a, c| h2[a][c].v);
        let a_t = full.view((1, 1), (d, d)).clone_owned();
        let a_t = 0.5 * (&a_t + a_t.transpose());
        let (x, _) = fam.point(k);
        let nu = dchi_val.transpose() * h.eta_at(&x)?;
        nu_nodes.push(DVector::from_fn(d, |i, _| nu[1 + i]));
        a_nodes.push(a_t);
        h0s.push(h0);
        h1s.push(h1);
        h2s.push(h2);
    }

    // null directions, continuous in t with n(0) ≈ e_d
    let mut n_nodes: Vec<DVector<f64>> = Vec::with_capacity(a_nodes.len());
    for a_t in &a_nodes {
        let (vals, vecs) = sym_eigen_desc(a_t);
        let top = vals[0].abs().max(1e-300);
        res.rank_margin = res.rank_margin.min(if d >= 2 { vals[d - 2] / top } else { f64::INFINITY });
        res.corank_defect = res.corank_defect.max(vals[d - 1].abs() / top);
        let mut v = vecs.column(d - 1).clone_owned();
        let flip = match n_nodes.last() {
            Some(prev) => v.dot(prev) < 0.0,
            None => v[d - 1] < 0.0,
        };
        if flip {
            v.neg_mut();
        }
        n_nodes.push(v);
    }
    let mut n_tilde = Vec::with_capacity(n_nodes.len());
    for (nu, nv) in nu_nodes.iter().zip(&n_nodes) {
        let mut w = nu.normalize();
        if w.dot(nv) < 0.0 {
            w.neg_mut();
        }
        res.annihilator = res.annihilator.max((&w - nv).amax());
        n_tilde.push(w);
    }
    let a_poly = fit_matrix_nodes(delta, &a_nodes)?;
    let n_cols: Vec<DMatrix<f64>> = n_nodes.iter().map(|v| DMatrix::from_column_slice(d, 1, v.as_slice())).collect();
    let n_poly = fit_matrix_nodes(delta, &n_cols)?;
    let mut a_poly = a_poly;
    for c in a_poly.coeffs.iter_mut() {
        *c = 0.5 * (&*c + c.transpose());
    }
    let curve = CurveJet::new(a_poly, Some(n_poly), delta)?;
    let mut target = DMatrix::identity(d, d);
    target[(d - 1, d - 1)] = 0.0;
    res.block = (curve.a_at(0.0) - target).amax();
    for i in 0..=64 {
        let t = delta * i as f64 / 64.0;
        let nv = curve.n_at(t).expect("set above");
        res.null = res.null.max((curve.a_at(t) * &nv).amax());
        res.unit = res.unit.max((nv.norm() - 1.0).abs());
    }

    let mut data = NormalFormData {
        delta,
        energy,
        dim: n,
        d,
        halvings: 0,
        times: fam.times.clone(),
        curve,
        n_tilde,
        normalization: norm.clone(),
        straightening: st.clone(),
        family: fam,
        h0: h0s,
        h1: h1s,
        h2: h2s,
        chart,
        action,
        residuals: res,
    };
    // (a) through the assembled transformation, at nodes and midpoints
    let phi_inv = data.inverse_symplecto();
    let zero = vec![0.0; n];
    let mut orbit_res: f64 = 0.0;
    let times = data.times.clone();
    for (k, &t) in times.iter().enumerate() {
        let mut ts = vec![t];
        if k + 1 < times.len() {
            ts.push(0.5 * (t + times[k + 1]));
        }
        for s in ts {
            let mut q = zero.clone();
            q[0] = s;
            let (x, p) = phi_inv.apply(&q, &zero)?;
            let want = st.orbit_state(s)?;
            orbit_res = orbit_res.max(vsub(&x, &want[..n])).max(vsub(&p, &want[n..]));
        }
    }
    data.residuals.orbit = orbit_res;
    Ok(data)
}

/// Normal form along `orbit` on `[0, δ]`, halving `δ` until every residual
/// is certified or `δ` drops below `opts.min_delta`.
pub fn normal_form(h: &HamiltonianSpec, orbit: &OrbitSegment, delta: f64, opts: &NormalFormOptions) -> Result<NormalFormData> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Invalid("δ must be positive".into()));
    }
    let st = straighten_orbit(h, orbit)?;
    let energy = st.energy()?;
    let n = h.dim;
    let x0 = &st.base;
    let b0 = h.b_matrix(x0)?;
    let mut m0 = DMatrix::zeros(n, n);
    m0.set_column(0, &(&b0 * DVector::from_column_slice(&st.momentum)));
    m0.view_mut((0, 1), (n, n - 1)).copy_from(&st.section);
    let m0_inv = m0
        .try_inverse()
        .ok_or_else(|| Error::Numerical("section is tangent to the orbit".into()))?;
    let full = &m0_inv * b0 * m0_inv.transpose();
    let a_bar0 = full.view((1, 1), (n - 1, n - 1)).clone_owned();
    let norm = linear_normalize(&(0.5 * (&a_bar0 + a_bar0.transpose())))?;
    let mut delta = delta;
    let mut halvings = 0;
    loop {
        let outcome = attempt(h, &st, &norm, energy, delta, opts).and_then(|data| {
            let fails = data.residuals.failures(opts);
            if fails.is_empty() {
                Ok(data)
            } else {
                Err(Error::Certification(format!("δ = {delta}: {}", fails.join("; "))))
            }
        });
        match outcome {
            Ok(mut data) => {
                data.halvings = halvings;
                return Ok(data);
            }
            Err(e) if matches!(e, Error::Dimension(_)) => return Err(e),
            Err(e) => {
                if 0.5 * delta < opts.min_delta {
                    return Err(e);
                }
                delta *= 0.5;
                halvings += 1;
            }
        }
    }
}
