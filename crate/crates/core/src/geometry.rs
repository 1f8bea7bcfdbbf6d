//! Co-rank-one distributions on a chart, horizontal curves and their
//! regularity.
//!
//! A distribution is given by a frame `f^1 … f^d` together with a one-form
//! `η` annihilating it. A time `t` of a horizontal curve is regular when the
//! form `dη(Q̇(t), ·)` does not vanish on the distribution. The end-point map
//! of the control system `Q̇ = Σ c_i f^i(Q)` gives an independent test: a
//! curve without regular times is exactly one whose end-point differential is
//! not onto.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{parse_in_dim, Expr, Jet};
use crate::linalg::{gauss_legendre, rank_rel, singular_values};
use crate::ode::{integrate, DenseSolution, OdeOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub dim: usize,
    pub names: Vec<String>,
    /// Optional box `[lo, hi]` per coordinate; leaving it is a domain error.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Chart {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Invalid(format!("chart dimension {dim} < 2")));
        }
        Ok(Chart {
            dim,
            names: (1..=dim).map(|i| format!("q{i}")).collect(),
            bounds: None,
        })
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.len() != self.dim || bounds.iter().any(|(a, b)| !(a < b)) {
            return Err(Error::Invalid("malformed chart bounds".into()));
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        match &self.bounds {
            None => q.iter().all(|x| x.is_finite()),
            Some(b) => q.iter().zip(b).all(|(x, (lo, hi))| lo <= x && x <= hi),
        }
    }
}

/// Frame of a co-rank-one distribution and its annihilator.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    pub chart: Chart,
    /// `fields[i][a]` is the `a`-th component of `f^{i+1}`.
    pub fields: Vec<Vec<Expr>>,
    pub eta: Vec<Expr>,
}

impl FrameSpec {
    pub fn new(chart: Chart, fields: Vec<Vec<Expr>>, eta: Vec<Expr>) -> Result<Self> {
        let n = chart.dim;
        if fields.len() + 1 != n {
            return Err(Error::Dimension(format!(
                "a co-rank-one frame on a {n}-dimensional chart needs {} fields, got {}",
                n - 1,
                fields.len()
            )));
        }
        if fields.iter().any(|f| f.len() != n) || eta.len() != n {
            return Err(Error::Dimension("frame components must match the chart".into()));
        }
        let used = fields
            .iter()
            .flatten()
            .chain(&eta)
            .map(Expr::min_dim)
            .max()
            .unwrap_or(0);
        if used > n {
            return Err(Error::Dimension(format!("q{used} used on a {n}-dimensional chart")));
        }
        Ok(FrameSpec { chart, fields, eta })
    }

    /// Builds a frame from component strings.
    pub fn parse(chart: Chart, fields: &[&[&str]], eta: &[&str]) -> Result<Self> {
        let n = chart.dim;
        let fields = fields
            .iter()
            .map(|f| f.iter().map(|s| parse_in_dim(s, n)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let eta = eta.iter().map(|s| parse_in_dim(s, n)).collect::<Result<Vec<_>>>()?;
        Self::new(chart, fields, eta)
    }

    /// Heisenberg frame `∂x − (y/2)∂z, ∂y + (x/2)∂z` with `η = dz + (y dx − x dy)/2`.
    pub fn heisenberg() -> Self {
        Self::parse(
            Chart::new(3).unwrap(),
            &[&["1", "0", "-q2/2"], &["0", "1", "q1/2"]],
            &["q2/2", "-q1/2", "1"],
        )
        .unwrap()
    }

    /// Martinet frame `∂x + (y²/2)∂z, ∂y` with `η = dz − (y²/2)dx`.
    pub fn martinet() -> Self {
        Self::parse(
            Chart::new(3).unwrap(),
            &[&["1", "0", "q2^2/2"], &["0", "1", "0"]],
            &["-q2^2/2", "0", "1"],
        )
        .unwrap()
    }

    /// Chart dimension `d + 1`.
    pub fn dim(&self) -> usize {
        self.chart.dim
    }

    /// Rank `d` of the distribution.
    pub fn rank(&self) -> usize {
        self.fields.len()
    }

    /// `n × d` matrix with columns `f^i(q)`.
    pub fn frame_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let (n, d) = (self.dim(), self.rank());
        let mut m = DMatrix::zeros(n, d);
        for (i, f) in self.fields.iter().enumerate() {
            for (a, e) in f.iter().enumerate() {
                m[(a, i)] = e.eval(q)?;
            }
        }
        Ok(m)
    }

    /// Jets `[i][a]` of the frame components.
    pub fn frame_jets(&self, q: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        self.fields
            .iter()
            .map(|f| f.iter().map(|e| e.eval_jet(q, order)).collect())
            .collect()
    }

    pub fn eta_at(&self, q: &[f64]) -> Result<DVector<f64>> {
        let v: Result<Vec<f64>> = self.eta.iter().map(|e| e.eval(q)).collect();
        Ok(DVector::from_vec(v?))
    }

    /// Matrix `dη_{ab} = ∂_a η_b − ∂_b η_a`.
    pub fn d_eta(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let jets: Vec<Jet> = self
            .eta
            .iter()
            .map(|e| e.eval_jet(q, 1))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(n, n, |a, b| jets[b].g[a] - jets[a].g[b]))
    }

    /// Horizontal velocity `Σ c_i f^i(q)`.
    pub fn velocity(&self, q: &[f64], c: &[f64]) -> Result<DVector<f64>> {
        Ok(self.frame_matrix(q)? * DVector::from_column_slice(c))
    }

    /// Checks `η(f^i) = 0`, frame rank `d` and `η ≠ 0` at `q`.
    pub fn validate_at(&self, q: &[f64]) -> Result<()> {
        let f = self.frame_matrix(q)?;
        let eta = self.eta_at(q)?;
        let ne = eta.norm();
        if ne == 0.0 {
            return Err(Error::Invalid(format!("η vanishes at {q:?}")));
        }
        for i in 0..self.rank() {
            let col = f.column(i);
            let r = eta.dot(&col);
            if r.abs() > 1e-10 * (1.0 + ne * col.norm()) {
                return Err(Error::Invalid(format!(
                    "η(f^{}) = {r:e} ≠ 0 at {q:?}",
                    i + 1
                )));
            }
        }
        let sv = singular_values(&f);
        if rank_rel(&sv, 1e-10) < self.rank() {
            return Err(Error::Invalid(format!("frame loses rank at {q:?}")));
        }
        Ok(())
    }

    /// Validates at `samples` deterministic points of the chart box (or of
    /// `[-1, 1]^n` when the chart is unbounded).
    pub fn validate_sampled(&self, samples: usize, seed: u64) -> Result<()> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim();
        let bounds = self.chart.bounds.clone().unwrap_or_else(|| vec![(-1.0, 1.0); n]);
        for _ in 0..samples {
            let q: Vec<f64> = bounds.iter().map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect();
            self.validate_at(&q)?;
        }
        Ok(())
    }
}

/// Control `c: [0, T] → ℝ^d`.
#[derive(Clone)]
pub enum Control {
    Constant(Vec<f64>),
    /// `pieces[k][i]` holds the coefficients of component `i` in powers of
    /// `t − knots[k]`, valid on `[knots[k], knots[k+1])`.
    Piecewise {
        knots: Vec<f64>,
        pieces: Vec<Vec<Vec<f64>>>,
    },
    Func(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Control::Constant(c) => write!(f, "Constant({c:?})"),
            Control::Piecewise { knots, pieces } => {
                write!(f, "Piecewise {{ knots: {knots:?}, pieces: {pieces:?} }}")
            }
            Control::Func(_) => write!(f, "Func(..)"),
        }
    }
}

impl Control {
    pub fn func(f: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Control::Func(Arc::new(f))
    }

    /// Polynomial control `Σ_k coeffs[i][k] t^k` on a single piece.
    pub fn polynomial(coeffs: Vec<Vec<f64>>) -> Self {
        Control::Piecewise {
            knots: vec![0.0],
            pieces: vec![coeffs],
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        match self {
            Control::Constant(c) => c.clone(),
            Control::Piecewise { knots, pieces } => {
                let k = knots.partition_point(|&s| s <= t).saturating_sub(1);
                let s = t - knots[k];
                pieces[k]
                    .iter()
                    .map(|p| p.iter().rev().fold(0.0, |acc, c| acc * s + c))
                    .collect()
            }
            Control::Func(f) => f(t),
        }
    }

    /// Breakpoints inside `(0, T)` where the control may be non-smooth.
    pub fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        match self {
            Control::Piecewise { knots, .. } => knots
                .iter()
                .copied()
                .filter(|&k| k > 0.0 && k < t_end)
                .collect(),
            _ => vec![],
        }
    }
}

/// Solution of `Q̇ = Σ c_i(t) f^i(Q)` with dense output.
#[derive(Debug, Clone)]
pub struct HorizontalCurve {
    pub frame: FrameSpec,
    pub control: Control,
    pub q0: Vec<f64>,
    pub t_end: f64,
    pieces: Vec<DenseSolution>,
}

impl HorizontalCurve {
    pub fn point(&self, t: f64) -> Vec<f64> {
        let k = self
            .pieces
            .partition_point(|p| p.t1() < t)
            .min(self.pieces.len() - 1);
        self.pieces[k].eval(t)
    }

    pub fn velocity(&self, t: f64) -> Result<DVector<f64>> {
        self.frame.velocity(&self.point(t), &self.control.eval(t))
    }

    pub fn end(&self) -> Vec<f64> {
        self.point(self.t_end)
    }

    /// Largest integrator step over all pieces.
    pub fn max_step(&self) -> f64 {
        self.pieces.iter().map(|p| p.max_step()).fold(0.0, f64::max)
    }
}

fn control_rhs<'a>(
    frame: &'a FrameSpec,
    control: &'a Control,
) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<()> + 'a {
    move |t, q, dq| {
        if !frame.chart.contains(q) {
            return Err(Error::Domain(format!("curve left the chart at t = {t}")));
        }
        let v = frame.velocity(q, &control.eval(t))?;
        dq.copy_from_slice(v.as_slice());
        Ok(())
    }
}

/// Integrates the control system from `q0` over `[0, t_end]`, restarting at
/// the breakpoints of a piecewise control.
pub fn integrate_horizontal(
    frame: &FrameSpec,
    q0: &[f64],
    control: &Control,
    t_end: f64,
) -> Result<HorizontalCurve> {
    if q0.len() != frame.dim() {
        return Err(Error::Dimension("start point does not match the chart".into()));
    }
    if !(t_end >= 0.0) {
        return Err(Error::Invalid("duration must be non-negative".into()));
    }
    if !frame.chart.contains(q0) {
        return Err(Error::Domain("start point outside the chart".into()));
    }
    let opts = OdeOptions::tol(1e-12, 1e-12);
    let mut cuts = vec![0.0];
    cuts.extend(control.breakpoints(t_end));
    cuts.push(t_end);
    let mut pieces = Vec::new();
    let mut q = q0.to_vec();
    for w in cuts.windows(2) {
        let sol = integrate(control_rhs(frame, control), w[0], &q, w[1], &opts)?;
        q = sol.y_end().to_vec();
        pieces.push(sol);
    }
    Ok(HorizontalCurve {
        frame: frame.clone(),
        control: control.clone(),
        q0: q0.to_vec(),
        t_end,
        pieces,
    })
}

/// Coefficients `dη(v, f^j)`, `j = 1..d`, of the form `dη(v, ·)` restricted
/// to the distribution.
pub fn regularity_form(frame: &FrameSpec, q: &[f64], v: &DVector<f64>) -> Result<Vec<f64>> {
    let eta = frame.eta_at(q)?;
    let tol = 1e-8 * eta.norm() * v.norm().max(1e-300);
    if eta.dot(v).abs() > tol.max(1e-14) {
        return Err(Error::Invalid(format!(
            "vector is not horizontal: η(v) = {:e}",
            eta.dot(v)
        )));
    }
    let w = frame.d_eta(q)?;
    let f = frame.frame_matrix(q)?;
    let wv = w.transpose() * v;
    Ok((0..frame.rank()).map(|j| wv.dot(&f.column(j))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    RegularEverywhere,
    SingularCurve,
    Mixed,
}

#[derive(Debug, Clone, Serialize)]
pub struct EndpointRank {
    pub rank: usize,
    pub dim: usize,
    pub singular_values: Vec<f64>,
    /// Dyadic refinement level at which the rank settled.
    pub level: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub times: Vec<f64>,
    pub r: Vec<f64>,
    pub threshold: f64,
    /// Sample and refined times with `r(t)` below the threshold.
    pub nonregular_times: Vec<f64>,
    pub verdict: Verdict,
    pub endpoint: EndpointRank,
}

const SAMPLES: usize = 401;

fn r_at(curve: &HorizontalCurve, t: f64) -> Result<f64> {
    let q = curve.point(t);
    let v = curve.velocity(t)?;
    let form = regularity_form(&curve.frame, &q, &v)?;
    Ok(form.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Golden-section minimization of `r` on `[a, b]`.
fn refine_min(curve: &HorizontalCurve, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = r_at(curve, x1)?;
    let mut f2 = r_at(curve, x2)?;
    for _ in 0..120 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = r_at(curve, x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = r_at(curve, x2)?;
        }
    }
    Ok(if f1 <= f2 { (x1, f1) } else { (x2, f2) })
}

/// Samples `r(t)` and locates non-regular times.
pub fn regularity_profile(curve: &HorizontalCurve) -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    let n = if curve.t_end > 0.0 { SAMPLES } else { 1 };
    let times: Vec<f64> = (0..n)
        .map(|k| if n == 1 { 0.0 } else { curve.t_end * k as f64 / (n - 1) as f64 })
        .collect();
    let mut r = Vec::with_capacity(n);
    let mut scale: f64 = 0.0;
    for &t in &times {
        r.push(r_at(curve, t)?);
        let f = curve.frame.frame_matrix(&curve.point(t))?;
        scale = scale.max(f.amax());
    }
    let thr = 1e-8 * scale;
    let mut bad: Vec<f64> = times
        .iter()
        .zip(&r)
        .filter(|(_, &x)| x < thr)
        .map(|(&t, _)| t)
        .collect();
    for i in 1..n.saturating_sub(1) {
        if r[i] >= thr && r[i] <= r[i - 1] && r[i] <= r[i + 1] {
            let (tm, rm) = refine_min(curve, times[i - 1], times[i + 1])?;
            if rm < thr {
                bad.push(tm);
            }
        }
    }
    bad.sort_by(f64::total_cmp);
    Ok((times, r, thr, bad))
}

/// Rank of the end-point differential `u ↦ δQ(T)` of the control system.
///
/// Perturbations are indicator functions of dyadic subintervals (normalized
/// in L²) in each control direction; the level is raised until the rank is
/// full or has stayed unchanged for three consecutive levels.
pub fn endpoint_differential_rank(frame: &FrameSpec, curve: &HorizontalCurve) -> Result<EndpointRank> {
    let n = frame.dim();
    let d = frame.rank();
    if curve.t_end == 0.0 {
        let sv = singular_values(&frame.frame_matrix(&curve.q0)?);
        return Ok(EndpointRank {
            rank: rank_rel(&sv, 1e-8),
            dim: n,
            singular_values: sv,
            level: 0,
        });
    }
    // Φ' = (Σ c_i Df^i(Q)) Φ, integrated alongside Q
    let mut y0 = curve.q0.clone();
    y0.extend(DMatrix::<f64>::identity(n, n).iter());
    let control = &curve.control;
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let q = &y[..n];
        let c = control.eval(t);
        let jets = frame.frame_jets(q, 1)?;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (i, ci) in c.iter().enumerate() {
            for (comp, jet) in jets[i].iter().enumerate() {
                for b in 0..n {
                    a[(comp, b)] += ci * jet.g[b];
                }
            }
        }
        let v = frame.velocity(q, &c)?;
        dy[..n].copy_from_slice(v.as_slice());
        let phi = DMatrix::from_column_slice(n, n, &y[n..]);
        let dphi: DMatrix<f64> = a * phi;
        dy[n..].copy_from_slice(dphi.as_slice());
        Ok(())
    };
    let opts = OdeOptions::tol(1e-12, 1e-12);
    let mut cuts = vec![0.0];
    cuts.extend(control.breakpoints(curve.t_end));
    cuts.push(curve.t_end);
    let mut sols = Vec::new();
    let mut y = y0;
    for w in cuts.windows(2) {
        let s = integrate(rhs, w[0], &y, w[1], &opts)?;
        y = s.y_end().to_vec();
        sols.push(s);
    }
    let eval = |t: f64| -> Vec<f64> {
        let k = sols.partition_point(|s| s.t1() < t).min(sols.len() - 1);
        sols[k].eval(t)
    };
    let phi_end = DMatrix::from_column_slice(n, n, &y[n..]);
    let (gx, gw) = gauss_legendre(8);

    let mut history: Vec<usize> = Vec::new();
    for level in 0..=10usize {
        let m = 1usize << level;
        let h = curve.t_end / m as f64;
        let panels = (16 / m).max(1);
        let mut cols = DMatrix::zeros(n, d * m);
        for j in 0..m {
            let mut acc = DMatrix::zeros(n, d);
            for p in 0..panels {
                let a = j as f64 * h + p as f64 * h / panels as f64;
                let hp = h / panels as f64;
                for (x, w) in gx.iter().zip(&gw) {
                    let t = a + 0.5 * hp * (x + 1.0);
                    let yt = eval(t);
                    let phi = DMatrix::from_column_slice(n, n, &yt[n..]);
                    let inv = phi
                        .try_inverse()
                        .ok_or_else(|| Error::Numerical("singular state transition matrix".into()))?;
                    let f = frame.frame_matrix(&yt[..n])?;
                    acc += inv * f * (0.5 * hp * w);
                }
            }
            let block = &phi_end * acc / h.sqrt();
            cols.view_mut((0, j * d), (n, d)).copy_from(&block);
        }
        let sv = singular_values(&cols);
        let rank = rank_rel(&sv, 1e-8);
        history.push(rank);
        let k = history.len();
        let settled = rank == n || (k >= 3 && history[k - 1] == history[k - 2] && history[k - 2] == history[k - 3]);
        if settled {
            return Ok(EndpointRank {
                rank,
                dim: n,
                singular_values: sv,
                level,
            });
        }
    }
    Err(Error::Numerical("end-point rank did not stabilize".into()))
}

/// Classifies a curve by its regular times and cross-checks the verdict
/// against the end-point differential.
pub fn classify_curve(frame: &FrameSpec, curve: &HorizontalCurve) -> Result<RegularityReport> {
    let (times, r, threshold, nonregular_times) = regularity_profile(curve)?;
    let n_bad = r.iter().filter(|&&x| x < threshold).count();
    let verdict = if n_bad == r.len() {
        Verdict::SingularCurve
    } else if nonregular_times.is_empty() {
        Verdict::RegularEverywhere
    } else {
        Verdict::Mixed
    };
    let endpoint = endpoint_differential_rank(frame, curve)?;
    let singular_by_rank = endpoint.rank < endpoint.dim;
    if singular_by_rank != (verdict == Verdict::SingularCurve) {
        return Err(Error::Disagreement(format!(
            "regularity form says {verdict:?} but end-point rank is {} of {}",
            endpoint.rank, endpoint.dim
        )));
    }
    Ok(RegularityReport {
        times,
        r,
        threshold,
        nonregular_times,
        verdict,
        endpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heisenberg_flow_of_first_field() {
        let f = FrameSpec::heisenberg();
        let c = integrate_horizontal(&f, &[0.0; 3], &Control::Constant(vec![1.0, 0.0]), 1.0).unwrap();
        let q = c.end();
        assert!((q[0] - 1.0).abs() < 1e-12 && q[1].abs() < 1e-12 && q[2].abs() < 1e-12);
    }

    #[test]
    fn zero_control_stays_put() {
        let f = FrameSpec::martinet();
        let c = integrate_horizontal(&f, &[0.3, -0.2, 1.0], &Control::Constant(vec![0.0, 0.0]), 2.0).unwrap();
        assert_eq!(c.end(), vec![0.3, -0.2, 1.0]);
    }

    #[test]
    fn martinet_flow_of_second_field() {
        let f = FrameSpec::martinet();
        let c = integrate_horizontal(&f, &[0.0; 3], &Control::Constant(vec![0.0, 1.0]), 1.0).unwrap();
        let q = c.end();
        assert!(q[0].abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12 && q[2].abs() < 1e-12);
    }

    #[test]
    fn heisenberg_form_value() {
        let f = FrameSpec::heisenberg();
        let q = [0.4, -1.1, 0.7];
        let v = f.frame_matrix(&q).unwrap().column(0).clone_owned();
        let form = regularity_form(&f, &q, &v).unwrap();
        assert!(form[0].abs() < 1e-14);
        assert!((form[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn martinet_form_vanishes_on_axis() {
        let f = FrameSpec::martinet();
        let q = [0.4, 0.0, 0.7];
        let v = f.frame_matrix(&q).unwrap().column(0).clone_owned();
        assert_eq!(regularity_form(&f, &q, &v).unwrap(), vec![0.0, 0.0]);
        let zero = DVector::zeros(3);
        assert_eq!(regularity_form(&f, &q, &zero).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_horizontal_vector_rejected() {
        let f = FrameSpec::heisenberg();
        let v = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert!(regularity_form(&f, &[0.0; 3], &v).is_err());
    }

    #[test]
    fn validation_catches_bad_annihilator() {
        let chart = Chart::new(3).unwrap();
        let bad = FrameSpec::parse(chart, &[&["1", "0", "-q2/2"], &["0", "1", "q1/2"]], &["0", "0", "1"]).unwrap();
        assert!(bad.validate_at(&[0.5, 0.5, 0.0]).is_err());
        FrameSpec::heisenberg().validate_sampled(20, 1).unwrap();
    }

    #[test]
    fn piecewise_control_evaluation() {
        let c = Control::Piecewise {
            knots: vec![0.0, 1.0],
            pieces: vec![vec![vec![1.0], vec![0.0, 1.0]], vec![vec![0.0], vec![2.0]]],
        };
        assert_eq!(c.eval(0.5), vec![1.0, 0.5]);
        assert_eq!(c.eval(1.5), vec![0.0, 2.0]);
    }
}
