//! Covector lifts of horizontal curves.
//!
//! For `Q̇ = Σ cᵢ fᵢ(Q)` and a control Lagrangian `φ(q, c)`, a normal lift
//! solves `Ṗ = −P·Σ cᵢ ∂_q fᵢ(Q) + ∂_q φ(Q, c)` while the pairing
//! `P·Σ cᵢ fᵢ − φ` stays equal to `H(Q, P)`. An abnormal covector solves the
//! same linear equation without the `φ` term and annihilates every `fᵢ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Expr, Jet};
use crate::geometry::{FrameSpec, HorizontalCurve};
use crate::ode::{integrate, DenseSolution, OdeOptions};

/// `φ(q, c) = ½ cᵀ g(q) c − U(q)`.
#[derive(Debug, Clone)]
pub struct ControlLagrangian {
    pub metric: Vec<Vec<Expr>>,
    pub potential: Expr,
}

impl ControlLagrangian {
    pub fn new(metric: Vec<Vec<Expr>>, potential: Expr) -> Result<Self> {
        let d = metric.len();
        if d == 0 || metric.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("metric must be square".into()));
        }
        Ok(ControlLagrangian { metric, potential })
    }

    /// Unit metric, no potential.
    pub fn flat(d: usize) -> Self {
        let metric = (0..d)
            .map(|i| (0..d).map(|j| Expr::Num(if i == j { 1.0 } else { 0.0 })).collect())
            .collect();
        ControlLagrangian {
            metric,
            potential: Expr::Num(0.0),
        }
    }

    pub fn rank(&self) -> usize {
        self.metric.len()
    }

    fn metric_at(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.rank();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                g[(i, j)] = self.metric[i][j].eval(q)?;
            }
        }
        Ok(g)
    }

    pub fn phi(&self, q: &[f64], c: &[f64]) -> Result<f64> {
        let cv = DVector::from_column_slice(c);
        Ok(0.5 * cv.dot(&(self.metric_at(q)? * &cv)) - self.potential.eval(q)?)
    }

    /// `∂_q φ(q, c)`.
    pub fn phi_q(&self, q: &[f64], c: &[f64]) -> Result<DVector<f64>> {
        let n = q.len();
        let mut out = -DVector::from_vec(self.potential.eval_jet(q, 1)?.g);
        for (i, row) in self.metric.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if c[i] == 0.0 || c[j] == 0.0 || e.is_zero() {
                    continue;
                }
                let jet: Jet = e.eval_jet(q, 1)?;
                for a in 0..n {
                    out[a] += 0.5 * c[i] * c[j] * jet.g[a];
                }
            }
        }
        Ok(out)
    }

    /// The maximizing control `g⁻¹ Fᵀ p` and the value `H(q, p)` of the
    /// fiberwise supremum.
    pub fn maximizer(&self, frame: &FrameSpec, q: &[f64], p: &[f64]) -> Result<(DVector<f64>, f64)> {
        let u = frame.frame_matrix(q)?.transpose() * DVector::from_column_slice(p);
        let c = self
            .metric_at(q)?
            .cholesky()
            .ok_or_else(|| Error::Invalid(format!("metric is not positive definite at {q:?}")))?
            .solve(&u);
        let h = 0.5 * u.dot(&c) + self.potential.eval(q)?;
        Ok((c, h))
    }

    /// `P·Σ cᵢ fᵢ(q) − φ(q, c)`.
    pub fn pairing(&self, frame: &FrameSpec, q: &[f64], p: &[f64], c: &[f64]) -> Result<f64> {
        let v = frame.velocity(q, c)?;
        Ok(DVector::from_column_slice(p).dot(&v) - self.phi(q, c)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LiftOptions {
    /// Relative tolerance of the energy identity.
    pub identity_tol: f64,
    /// Output grid points.
    pub samples: usize,
    /// Velocity samples for the maximality check at `t = 0`.
    pub velocity_samples: usize,
    pub seed: u64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        LiftOptions {
            identity_tol: 1e-7,
            samples: 200,
            velocity_samples: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalLift {
    pub times: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    /// `P·Σ cᵢ fᵢ − φ` along the lift.
    pub pairing: Vec<f64>,
    /// `H(Q, P)` along the lift.
    pub hamiltonian: Vec<f64>,
    /// Largest `|pairing − H|`.
    pub identity_residual: f64,
    /// Largest `|H(t) − H(0)|`.
    pub drift: f64,
}

impl NormalLift {
    pub fn to_csv(&self) -> String {
        let n = self.q.first().map_or(0, |q| q.len());
        let mut s = String::from("t");
        for a in 0..n {
            s.push_str(&format!(",q{}", a + 1));
        }
        for a in 0..n {
            s.push_str(&format!(",p{}", a + 1));
        }
        s.push_str(",H\n");
        for k in 0..self.times.len() {
            s.push_str(&format!("{:.12e}", self.times[k]));
            for v in self.q[k].iter().chain(&self.p[k]) {
                s.push_str(&format!(",{v:.12e}"));
            }
            s.push_str(&format!(",{:.12e}\n", self.hamiltonian[k]));
        }
        s
    }
}

fn grid(t_end: f64, samples: usize) -> Vec<f64> {
    let m = samples.max(1);
    (0..=m).map(|k| t_end * k as f64 / m as f64).collect()
}

fn cuts(curve: &HorizontalCurve) -> Vec<f64> {
    let mut c = vec![0.0];
    c.extend(curve.control.breakpoints(curve.t_end));
    c.push(curve.t_end);
    c
}

/// `−y·Σ cᵢ ∂_q fᵢ(q)`.
fn transport(frame: &FrameSpec, q: &[f64], c: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
    let jets = frame.frame_jets(q, 1)?;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, field) in jets.iter().enumerate() {
        if c[i] == 0.0 {
            continue;
        }
        for (b, comp) in field.iter().enumerate() {
            if y[b] == 0.0 {
                continue;
            }
            for (a, o) in out.iter_mut().enumerate() {
                *o -= c[i] * y[b] * comp.g[a];
            }
        }
    }
    Ok(())
}

/// Integrates `rhs` along the curve through the control breakpoints.
fn solve_along(
    curve: &HorizontalCurve,
    y0: &[f64],
    rhs: &dyn Fn(f64, &[f64], &mut [f64]) -> Result<()>,
) -> Result<Vec<DenseSolution>> {
    let opts = OdeOptions::tol(1e-12, 1e-12);
    let mut y = y0.to_vec();
    let mut pieces = vec![];
    for w in cuts(curve).windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let sol = integrate(|t, y, dy| rhs(t, y, dy), w[0], &y, w[1], &opts)?;
        y = sol.y_end().to_vec();
        pieces.push(sol);
    }
    Ok(pieces)
}

fn eval_pieces(pieces: &[DenseSolution], y0: &[f64], t: f64) -> Vec<f64> {
    match pieces.iter().find(|p| t <= p.t1()).or(pieces.last()) {
        Some(p) => p.eval(t),
        None => y0.to_vec(),
    }
}

pub fn lift_normal(
    frame: &FrameSpec,
    lag: &ControlLagrangian,
    curve: &HorizontalCurve,
    p0: &[f64],
    opts: &LiftOptions,
) -> Result<NormalLift> {
    let n = frame.dim();
    if p0.len() != n || lag.rank() != frame.rank() {
        return Err(Error::Dimension("covector or metric does not match the frame".into()));
    }
    let tol = |h: f64| opts.identity_tol * (1.0 + h.abs());
    let q0 = curve.point(0.0);
    let c0 = curve.control.eval(0.0);
    let (_, h0) = lag.maximizer(frame, &q0, p0)?;
    let e0 = lag.pairing(frame, &q0, p0, &c0)?;
    if (e0 - h0).abs() > tol(h0) {
        return Err(Error::Invalid(format!(
            "initial covector violates the energy identity: pairing {e0} vs H {h0}"
        )));
    }
    // the closed-form supremum against sampled velocities
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = 1.0 + c0.iter().map(|c| c.abs()).fold(0.0, f64::max);
    for _ in 0..opts.velocity_samples {
        let v: Vec<f64> = c0.iter().map(|c| c + scale * rng.gen_range(-1.0..1.0)).collect();
        let val = lag.pairing(frame, &q0, p0, &v)?;
        if val > h0 + tol(h0) {
            return Err(Error::Invalid(format!(
                "velocity sample {v:?} beats the closed-form supremum ({val} > {h0})"
            )));
        }
    }
    let rhs = |t: f64, p: &[f64], dp: &mut [f64]| -> Result<()> {
        let q = curve.point(t);
        let c = curve.control.eval(t);
        transport(frame, &q, &c, p, dp)?;
        let phq = lag.phi_q(&q, &c)?;
        for (a, d) in dp.iter_mut().enumerate() {
            *d += phq[a];
        }
        Ok(())
    };
    let pieces = solve_along(curve, p0, &rhs)?;
    let mut lift = NormalLift {
        times: grid(curve.t_end, opts.samples),
        q: vec![],
        p: vec![],
        pairing: vec![],
        hamiltonian: vec![],
        identity_residual: 0.0,
        drift: 0.0,
    };
    for &t in &lift.times {
        let q = curve.point(t);
        let p = eval_pieces(&pieces, p0, t);
        let c = curve.control.eval(t);
        let (_, h) = lag.maximizer(frame, &q, &p)?;
        let e = lag.pairing(frame, &q, &p, &c)?;
        let r = (e - h).abs();
        if r > tol(h) {
            return Err(Error::Invalid(format!(
                "energy identity fails at t = {t}: pairing {e} vs H {h}"
            )));
        }
        lift.identity_residual = lift.identity_residual.max(r);
        lift.drift = lift.drift.max((h - h0).abs());
        lift.q.push(q);
        lift.p.push(p);
        lift.pairing.push(e);
        lift.hamiltonian.push(h);
    }
    Ok(lift)
}

/// Constraint tolerance for `η·fᵢ`, relative to `|η| |fᵢ|`.
pub const ABNORMAL_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct AbnormalCovector {
    pub times: Vec<f64>,
    /// Unit covectors.
    pub eta: Vec<Vec<f64>>,
    /// `log |η(t)|` of the unnormalized solution started from a unit covector.
    pub log_scale: Vec<f64>,
    /// `maxᵢ |η·fᵢ| / (|η| |fᵢ|)` at each time.
    pub constraint: Vec<f64>,
}

impl AbnormalCovector {
    pub fn to_csv(&self) -> String {
        let n = self.eta.first().map_or(0, |e| e.len());
        let mut s = String::from("t");
        for a in 0..n {
            s.push_str(&format!(",eta{}", a + 1));
        }
        s.push_str(",log_scale,constraint\n");
        for k in 0..self.times.len() {
            s.push_str(&format!("{:.12e}", self.times[k]));
            for v in &self.eta[k] {
                s.push_str(&format!(",{v:.12e}"));
            }
            s.push_str(&format!(",{:.12e},{:.12e}\n", self.log_scale[k], self.constraint[k]));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AbnormalSearch {
    pub covector: Option<AbnormalCovector>,
    pub max_constraint: f64,
    /// First grid time where the constraint is violated.
    pub first_violation: Option<f64>,
    /// Zero-length curve: the annihilator at the start is returned as is.
    pub degenerate: bool,
}

fn constraint(frame: &FrameSpec, q: &[f64], eta: &DVector<f64>) -> Result<f64> {
    let f = frame.frame_matrix(q)?;
    let mut worst: f64 = 0.0;
    for i in 0..f.ncols() {
        let col = f.column(i);
        worst = worst.max(eta.dot(&col).abs() / (eta.norm() * col.norm()).max(1e-300));
    }
    Ok(worst)
}

/// Transports the annihilator of `𝒟` at `Q(0)` along the curve, renormalizing
/// at each grid point.
pub fn abnormal_search(frame: &FrameSpec, curve: &HorizontalCurve, samples: usize) -> Result<AbnormalSearch> {
    let q0 = curve.point(0.0);
    let eta0 = frame.eta_at(&q0)?;
    if eta0.norm() == 0.0 {
        return Err(Error::Invalid("annihilator vanishes at the start".into()));
    }
    let mut eta = eta0.normalize();
    let c0 = constraint(frame, &q0, &eta)?;
    if curve.t_end == 0.0 {
        return Ok(AbnormalSearch {
            covector: Some(AbnormalCovector {
                times: vec![0.0],
                eta: vec![eta.iter().copied().collect()],
                log_scale: vec![0.0],
                constraint: vec![c0],
            }),
            max_constraint: c0,
            first_violation: None,
            degenerate: true,
        });
    }
    let times = grid(curve.t_end, samples);
    let mut breaks = cuts(curve);
    breaks.extend(times.iter().copied());
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * (1.0 + curve.t_end));
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        transport(frame, &curve.point(t), &curve.control.eval(t), y, dy)
    };
    let opts = OdeOptions::tol(1e-12, 1e-12);
    let mut out = AbnormalCovector {
        times: vec![0.0],
        eta: vec![eta.iter().copied().collect()],
        log_scale: vec![0.0],
        constraint: vec![c0],
    };
    let mut log_scale = 0.0;
    let mut first_violation = (c0 > ABNORMAL_TOL).then_some(0.0);
    for w in breaks.windows(2) {
        let sol = integrate(|t, y, dy| rhs(t, y, dy), w[0], eta.as_slice(), w[1], &opts)?;
        let y = DVector::from_column_slice(sol.y_end());
        let norm = y.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numerical(format!("covector transport degenerated at t = {}", w[1])));
        }
        log_scale += norm.ln();
        eta = y / norm;
        if times.iter().any(|&t| (t - w[1]).abs() < 1e-14 * (1.0 + curve.t_end)) {
            let c = constraint(frame, &curve.point(w[1]), &eta)?;
            if c > ABNORMAL_TOL && first_violation.is_none() {
                first_violation = Some(w[1]);
            }
            out.times.push(w[1]);
            out.eta.push(eta.iter().copied().collect());
            out.log_scale.push(log_scale);
            out.constraint.push(c);
        }
    }
    let max_constraint = out.constraint.iter().copied().fold(0.0, f64::max);
    Ok(AbnormalSearch {
        covector: first_violation.is_none().then_some(out),
        max_constraint,
        first_violation,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LiftVerdict {
    Unique,
    NonUnique,
    /// The second covector does not give a normal lift.
    SecondRejected(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct UniqueLiftReport {
    pub verdict: LiftVerdict,
    /// `max_t |P_a − P_b|` when both lifts exist.
    pub max_difference: Option<f64>,
    /// An abnormal covector exists, so uniqueness is not guaranteed.
    pub singular: bool,
}

pub fn unique_lift_check(
    frame: &FrameSpec,
    lag: &ControlLagrangian,
    curve: &HorizontalCurve,
    p0a: &[f64],
    p0b: &[f64],
    opts: &LiftOptions,
) -> Result<UniqueLiftReport> {
    let singular = abnormal_search(frame, curve, opts.samples)?.covector.is_some();
    let a = lift_normal(frame, lag, curve, p0a, opts)?;
    let b = match lift_normal(frame, lag, curve, p0b, opts) {
        Ok(b) => b,
        Err(Error::Invalid(msg)) => {
            return Ok(UniqueLiftReport {
                verdict: LiftVerdict::SecondRejected(msg),
                max_difference: None,
                singular,
            })
        }
        Err(e) => return Err(e),
    };
    let mut diff: f64 = 0.0;
    let mut size: f64 = 0.0;
    for (pa, pb) in a.p.iter().zip(&b.p) {
        size = size.max(pa.iter().fold(0.0, |m, v| m.max(v.abs())));
        diff = diff.max(pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let verdict = if diff < opts.identity_tol * (1.0 + size) {
        LiftVerdict::Unique
    } else {
        LiftVerdict::NonUnique
    };
    Ok(UniqueLiftReport {
        verdict,
        max_difference: Some(diff),
        singular,
    })
}
