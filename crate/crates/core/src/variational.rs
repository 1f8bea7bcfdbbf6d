//! Linearized transition maps and the end-point differential of the control
//! system `Ẋ = ([0 A; 0 0] + [0 0; W(t) 0]) X`, `X(0) = I`, where
//! `W = Σ w_ij E_ij` ranges over symmetric matrices.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::curve::CurveJet;
use crate::dynamics::{flow_with_jacobian, HamiltonianSpec};
use crate::error::{Error, Result};
use crate::formulas::e_basis;
use crate::linalg::{gauss_legendre, j_matrix, rank_rel, singular_values, sp_coords, sp_dim, sym_eigen_desc, symplectic_defect};
use crate::mane::upper_pairs;
use crate::normal_form::{fit_matrix_nodes, FiberedSymplecto, NormalFormData};
use crate::ode::{integrate, OdeOptions};
use crate::series::MatPoly;

/// Full rank is declared above this `σ_target / σ_max`.
pub const SUBMERSION_PASS: f64 = 1e-8;
/// Rank deficiency is declared below this ratio; in between is indeterminate.
pub const SUBMERSION_FAIL: f64 = 1e-10;
/// Norm at which a trajectory is treated as having left the control domain.
pub const ESCAPE_NORM: f64 = 1e12;

/// Symmetric-matrix valued control `t ↦ W(t)`.
#[derive(Clone)]
pub struct MatrixControl {
    d: usize,
    f: Option<Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>>,
    /// Times where `W` may be discontinuous; integration restarts there.
    pub breakpoints: Vec<f64>,
}

impl std::fmt::Debug for MatrixControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MatrixControl")
            .field("d", &self.d)
            .field("zero", &self.f.is_none())
            .field("breakpoints", &self.breakpoints)
            .finish()
    }
}

impl MatrixControl {
    pub fn zero(d: usize) -> Self {
        MatrixControl {
            d,
            f: None,
            breakpoints: vec![],
        }
    }

    /// `f` must return a symmetric `d×d` matrix.
    pub fn from_fn(d: usize, f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        MatrixControl {
            d,
            f: Some(Arc::new(f)),
            breakpoints: vec![],
        }
    }

    /// `φ(t) E_ij`.
    pub fn scalar(d: usize, i: usize, j: usize, phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let e = e_basis(d, i, j);
        Self::from_fn(d, move |t| &e * phi(t))
    }

    /// Constant weights `Σ w_ij E_ij`.
    pub fn constant(d: usize, weights: &[((usize, usize), f64)]) -> Self {
        let mut m = DMatrix::zeros(d, d);
        for &((i, j), w) in weights {
            m += e_basis(d, i, j) * w;
        }
        Self::from_fn(d, move |_| m.clone())
    }

    pub fn with_breakpoints(mut self, mut b: Vec<f64>) -> Self {
        b.sort_by(f64::total_cmp);
        self.breakpoints = b;
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        match &self.f {
            None => self.clone(),
            Some(f) => {
                let f = f.clone();
                MatrixControl {
                    d: self.d,
                    f: Some(Arc::new(move |t| f(t) * s)),
                    breakpoints: self.breakpoints.clone(),
                }
            }
        }
    }

    /// `G W Gᵀ`.
    pub fn conjugated(&self, g: &DMatrix<f64>) -> Self {
        match &self.f {
            None => self.clone(),
            Some(f) => {
                let f = f.clone();
                let g = g.clone();
                MatrixControl {
                    d: self.d,
                    f: Some(Arc::new(move |t| &g * f(t) * g.transpose())),
                    breakpoints: self.breakpoints.clone(),
                }
            }
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_zero(&self) -> bool {
        self.f.is_none()
    }

    pub fn lower_block(&self, t: f64) -> DMatrix<f64> {
        match &self.f {
            None => DMatrix::zeros(self.d, self.d),
            Some(f) => f(t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransitionOperator {
    pub d: usize,
    /// Integrator nodes on `[0, δ]`.
    pub times: Vec<f64>,
    pub path: Vec<DMatrix<f64>>,
    pub end: DMatrix<f64>,
    /// Largest `‖LᵀJL − J‖ / max(1, ‖L‖²)` along the path.
    pub defect: f64,
    pub det_end: f64,
}

fn transition_options(delta: f64) -> OdeOptions {
    OdeOptions::tol(1e-13, 1e-13).with_h_max(delta.abs().max(1e-300) / 16.0)
}

/// `[I B; 0 I]`.
fn free_solution(int_a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = int_a.nrows();
    let mut x = DMatrix::identity(2 * d, 2 * d);
    x.view_mut((0, d), (d, d)).copy_from(int_a);
    x
}

/// Integrates the matrix ODE on `[0, δ]` restarting at control breakpoints.
///
/// The drift part is solved exactly by `X₀ = [I ∫A; 0 I]`; the integrator
/// only sees `Z = X₀⁻¹X`, whose generator `X₀⁻¹[0 0; W 0]X₀` is as small as
/// the control. Finite differences in the control then stay accurate.
pub fn transition_map(a: &CurveJet, w: &MatrixControl) -> Result<TransitionOperator> {
    let d = a.d();
    if w.d() != d {
        return Err(Error::Dimension("control and curve sizes differ".into()));
    }
    let n = 2 * d;
    let delta = a.delta;
    let int_a = a.antiderivative();
    let opts = transition_options(delta);
    let mut cuts = vec![0.0];
    cuts.extend(w.breakpoints.iter().copied().filter(|&b| b > 0.0 && b < delta));
    cuts.push(delta);
    let mut y: Vec<f64> = DMatrix::<f64>::identity(n, n).as_slice().to_vec();
    let mut times = vec![0.0];
    let mut path = vec![DMatrix::identity(n, n)];
    for win in cuts.windows(2) {
        let (t0, t1) = (win[0], win[1]);
        if t1 <= t0 {
            continue;
        }
        if w.is_zero() {
            for k in 1..=16 {
                let t = t0 + (t1 - t0) * k as f64 / 16.0;
                times.push(t);
                path.push(free_solution(&int_a.eval(t)));
            }
            continue;
        }
        // integrate U = Z − I; its size follows the control, so the
        // absolute tolerance is scaled by the generator size
        let scale = (0..=32)
            .map(|k| {
                let t = t0 + (t1 - t0) * k as f64 / 32.0;
                pulled_back(&w.lower_block(t), &int_a.eval(t)).amax()
            })
            .fold(0.0, f64::max)
            * (t1 - t0);
        let mut local = opts;
        local.atol = opts.atol * scale.clamp(1e-200, 1.0);
        let rhs = |t: f64, u: &[f64], du: &mut [f64]| -> Result<()> {
            let mut zm = DMatrix::from_column_slice(n, n, u);
            if zm.amax() > ESCAPE_NORM {
                return Err(Error::Integration(format!("escape: transition map unbounded near t = {t}")));
            }
            for i in 0..n {
                zm[(i, i)] += 1.0;
            }
            let m = pulled_back(&w.lower_block(t), &int_a.eval(t));
            du.copy_from_slice((m * zm).as_slice());
            Ok(())
        };
        let u0: Vec<f64> = y.iter().enumerate().map(|(k, v)| if k % (n + 1) == 0 { v - 1.0 } else { *v }).collect();
        let sol = integrate(rhs, t0, &u0, t1, &local)?;
        let with_identity = |u: &[f64]| {
            let mut z = DMatrix::from_column_slice(n, n, u);
            for i in 0..n {
                z[(i, i)] += 1.0;
            }
            z
        };
        for t in sol.nodes().into_iter().skip(1) {
            times.push(t);
            path.push(free_solution(&int_a.eval(t)) * with_identity(&sol.eval(t)));
        }
        let z = with_identity(sol.y_end());
        y = z.as_slice().to_vec();
    }
    let end = free_solution(&int_a.eval(delta)) * DMatrix::from_column_slice(n, n, &y);
    if end.amax() > ESCAPE_NORM {
        return Err(Error::Integration("escape: transition map unbounded".into()));
    }
    let defect = path
        .iter()
        .map(|l| symplectic_defect(l) / l.norm_squared().max(1.0))
        .fold(0.0, f64::max);
    if defect > 1e-7 {
        return Err(Error::Certification(format!("symplectic defect {defect:e} along the transition map")));
    }
    Ok(TransitionOperator {
        d,
        times,
        det_end: end.determinant(),
        path,
        end,
        defect,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmersionVerdict {
    Pass,
    Fail,
    Indeterminate,
}

fn verdict_of(rank: usize, target: usize, ratio: f64) -> SubmersionVerdict {
    if rank >= target && ratio > SUBMERSION_PASS {
        SubmersionVerdict::Pass
    } else if ratio < SUBMERSION_FAIL {
        SubmersionVerdict::Fail
    } else {
        SubmersionVerdict::Indeterminate
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubmersionCertificate {
    pub d: usize,
    pub target: usize,
    pub columns: usize,
    /// Rank with relative cutoff [`SUBMERSION_FAIL`].
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub sigma_ratio: f64,
    pub verdict: SubmersionVerdict,
    /// Dyadic level of the control basis, when one was used.
    pub level: Option<usize>,
    /// Whether two successive levels agreed within 1%.
    pub stable: bool,
    pub fd_max_rel_error: Option<f64>,
    /// sp(2d) coordinates of `X(δ)⁻¹ dℰ(0)` applied to each direction.
    #[serde(skip)]
    pub jacobian: DMatrix<f64>,
}

impl SubmersionCertificate {
    fn from_columns(d: usize, cols: &[DMatrix<f64>], level: Option<usize>) -> Self {
        let target = sp_dim(d);
        let coords: Vec<_> = cols.iter().map(sp_coords).collect();
        let jac = if coords.is_empty() {
            DMatrix::zeros(target, 0)
        } else {
            DMatrix::from_columns(&coords)
        };
        let sv = if cols.is_empty() { vec![] } else { singular_values(&jac) };
        let rank = rank_rel(&sv, SUBMERSION_FAIL);
        let ratio = match (sv.first(), sv.get(target - 1)) {
            (Some(&s0), Some(&st)) if s0 > 0.0 => st / s0,
            _ => 0.0,
        };
        SubmersionCertificate {
            d,
            target,
            columns: cols.len(),
            rank,
            sigma_ratio: ratio,
            verdict: verdict_of(rank, target, ratio),
            singular_values: sv,
            level,
            stable: false,
            fd_max_rel_error: None,
            jacobian: jac,
        }
    }

    pub fn sigma_target(&self) -> f64 {
        self.singular_values.get(self.target - 1).copied().unwrap_or(0.0)
    }
}

/// `X₀(t)⁻¹ [0 0; S 0] X₀(t)` for the drift-only solution `X₀ = [I 𝔄; 0 I]`.
fn pulled_back(s: &DMatrix<f64>, int_a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = s.nrows();
    let sa = s * int_a;
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&(-(int_a * s)));
    m.view_mut((0, d), (d, d)).copy_from(&(-(int_a * &sa)));
    m.view_mut((d, 0), (d, d)).copy_from(s);
    m.view_mut((d, d), (d, d)).copy_from(&sa);
    m
}

/// L²-normalized Legendre polynomial of degree `k ≤ 3` on `[lo, hi]`.
pub fn legendre_piece(k: usize, lo: f64, hi: f64, t: f64) -> f64 {
    if t < lo || t > hi {
        return 0.0;
    }
    let h = hi - lo;
    let x = (2.0 * t - lo - hi) / h;
    let p = match k {
        0 => 1.0,
        1 => x,
        2 => 0.5 * (3.0 * x * x - 1.0),
        3 => 0.5 * (5.0 * x * x * x - 3.0 * x),
        _ => panic!("legendre_piece supports degrees 0..=3"),
    };
    ((2 * k + 1) as f64 / h).sqrt() * p
}

/// One basis control of the dyadic piecewise-cubic family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BasisControl {
    pub pair: (usize, usize),
    pub piece: usize,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
}

impl BasisControl {
    pub fn control(&self, d: usize) -> MatrixControl {
        let (lo, hi, k) = (self.lo, self.hi, self.degree);
        MatrixControl::scalar(d, self.pair.0, self.pair.1, move |t| legendre_piece(k, lo, hi, t))
            .with_breakpoints(vec![lo, hi])
    }
}

const QUAD_POINTS: usize = 12;

/// Columns `∫ φ_k X₀⁻¹[0 0; E_ij 0]X₀ dt` for all basis controls at `level`
/// (`2^level` pieces, degrees 0..=3), with their descriptors.
pub fn endpoint_columns(a: &CurveJet, level: usize) -> (Vec<DMatrix<f64>>, Vec<BasisControl>) {
    let d = a.d();
    let delta = a.delta;
    let pieces = 1usize << level;
    let int_a: MatPoly = a.antiderivative();
    let pairs = upper_pairs(d);
    let es: Vec<DMatrix<f64>> = pairs.iter().map(|&(i, j)| e_basis(d, i, j)).collect();
    let (xs, ws) = gauss_legendre(QUAD_POINTS);
    let per_piece: Vec<Vec<(DMatrix<f64>, BasisControl)>> = (0..pieces)
        .into_par_iter()
        .map(|p| {
            let lo = delta * p as f64 / pieces as f64;
            let hi = delta * (p + 1) as f64 / pieces as f64;
            let half = 0.5 * (hi - lo);
            let mut acc = vec![DMatrix::zeros(2 * d, 2 * d); pairs.len() * 4];
            for (x, w) in xs.iter().zip(&ws) {
                let t = lo + half * (x + 1.0);
                let ia = int_a.eval(t);
                for (q, e) in es.iter().enumerate() {
                    let m = pulled_back(e, &ia);
                    for k in 0..4 {
                        acc[q * 4 + k] += &m * (w * half * legendre_piece(k, lo, hi, t));
                    }
                }
            }
            acc.into_iter()
                .enumerate()
                .map(|(idx, m)| {
                    let b = BasisControl {
                        pair: pairs[idx / 4],
                        piece: p,
                        degree: idx % 4,
                        lo,
                        hi,
                    };
                    (m, b)
                })
                .collect()
        })
        .collect();
    per_piece.into_iter().flatten().unzip()
}

#[derive(Debug, Clone, Copy)]
pub struct EndpointConfig {
    pub min_level: usize,
    pub max_level: usize,
    pub fd_check: bool,
    pub fd_step: f64,
    pub fd_tol: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            min_level: 0,
            max_level: 6,
            fd_check: false,
            fd_step: 1e-5,
            fd_tol: 1e-6,
        }
    }
}

/// Largest relative mismatch between the quadrature columns `X₀(δ)·col` and
/// central differences of [`transition_map`]. Columns much smaller than the
/// largest one are compared against a floor of 1e-3 of that size.
pub fn fd_cross_check(a: &CurveJet, cols: &[DMatrix<f64>], basis: &[BasisControl], step: f64) -> Result<f64> {
    let d = a.d();
    let x_end = transition_map(a, &MatrixControl::zero(d))?.end;
    let scale = cols.iter().map(|c| (&x_end * c).norm()).fold(0.0, f64::max);
    let errs: Vec<Result<f64>> = cols
        .par_iter()
        .zip(basis.par_iter())
        .map(|(c, b)| {
            let ctl = b.control(d);
            let plus = transition_map(a, &ctl.scaled(step))?.end;
            let minus = transition_map(a, &ctl.scaled(-step))?.end;
            let fd = (plus - minus) / (2.0 * step);
            let pred = &x_end * c;
            Ok((fd - &pred).norm() / pred.norm().max(1e-3 * scale))
        })
        .collect();
    errs.into_iter().try_fold(0.0, |m, e| Ok(f64::max(m, e?)))
}

/// Assembles `dℰ(0)` on dyadic piecewise-cubic controls, refining until the
/// rank and `σ_target` agree on two successive levels within 1%.
pub fn endpoint_differential(a: &CurveJet, cfg: &EndpointConfig) -> Result<SubmersionCertificate> {
    let d = a.d();
    if !(a.delta > 0.0) {
        return Err(Error::Invalid("the curve needs a positive time span".into()));
    }
    let mut prev: Option<SubmersionCertificate> = None;
    let mut last: Option<(SubmersionCertificate, Vec<DMatrix<f64>>, Vec<BasisControl>)> = None;
    for level in cfg.min_level..=cfg.max_level.max(cfg.min_level) {
        let (cols, basis) = endpoint_columns(a, level);
        let mut cert = SubmersionCertificate::from_columns(d, &cols, Some(level));
        if let Some(p) = &prev {
            let (s0, s1) = (p.sigma_target(), cert.sigma_target());
            cert.stable = p.rank == cert.rank && (s1 - s0).abs() <= 0.01 * s1.max(s0);
        }
        let done = cert.stable;
        prev = Some(cert.clone());
        last = Some((cert, cols, basis));
        if done {
            break;
        }
    }
    let (mut cert, cols, basis) = last.expect("at least one level");
    if cfg.fd_check {
        let err = fd_cross_check(a, &cols, &basis, cfg.fd_step)?;
        cert.fd_max_rel_error = Some(err);
        if err > cfg.fd_tol {
            return Err(Error::Disagreement(format!(
                "end-point differential differs from finite differences by {err:e}"
            )));
        }
    }
    Ok(cert)
}

fn quad_directional(a: &CurveJet, w: &MatrixControl, pieces: usize) -> DMatrix<f64> {
    let d = a.d();
    let int_a = a.antiderivative();
    let (xs, ws) = gauss_legendre(QUAD_POINTS);
    let mut cuts: Vec<f64> = (0..=pieces).map(|p| a.delta * p as f64 / pieces as f64).collect();
    cuts.extend(w.breakpoints.iter().copied().filter(|&b| b > 0.0 && b < a.delta));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut acc = DMatrix::zeros(2 * d, 2 * d);
    for win in cuts.windows(2) {
        let half = 0.5 * (win[1] - win[0]);
        for (x, wt) in xs.iter().zip(&ws) {
            let t = win[0] + half * (x + 1.0);
            acc += pulled_back(&w.lower_block(t), &int_a.eval(t)) * (wt * half);
        }
    }
    acc
}

/// Rank of the directions `X₀(δ)⁻¹ ∂_w X_w(δ)·w^(k)` for a given finite
/// family of controls.
pub fn finite_family_submersion(a: &CurveJet, family: &[MatrixControl]) -> Result<SubmersionCertificate> {
    let d = a.d();
    if family.iter().any(|w| w.d() != d) {
        return Err(Error::Dimension("control and curve sizes differ".into()));
    }
    let cols: Vec<DMatrix<f64>> = family.par_iter().map(|w| quad_directional(a, w, 64)).collect();
    Ok(SubmersionCertificate::from_columns(d, &cols, None))
}

/// Gaussian bumps `exp(−(t − c)²/(2s²)) E_ij` for every pair and centre.
pub fn gaussian_bump_family(d: usize, centres: &[f64], width: f64) -> Vec<MatrixControl> {
    let mut out = Vec::new();
    for (i, j) in upper_pairs(d) {
        for &c in centres {
            out.push(MatrixControl::scalar(d, i, j, move |t| (-(t - c).powi(2) / (2.0 * width * width)).exp()));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct NondegeneracyReport {
    /// `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    /// `min_{n ≤ N_max} min_λ |λⁿ − 1|`.
    pub min_distance: f64,
    /// The power attaining `min_distance`.
    pub worst_power: usize,
    pub degenerate: bool,
    pub elliptic: usize,
    pub hyperbolic: usize,
    pub loxodromic: usize,
}

/// Checks whether a linearized return map has a root of unity of order at
/// most `n_max` among its eigenvalues.
pub fn nondegeneracy(dp: &DMatrix<f64>, n_max: usize, tol: f64) -> Result<NondegeneracyReport> {
    if dp.nrows() != dp.ncols() || !dp.nrows().is_multiple_of(2) {
        return Err(Error::Dimension("expected a 2d×2d matrix".into()));
    }
    let defect = symplectic_defect(dp);
    if defect > 1e-6 {
        return Err(Error::Invalid(format!("matrix is not symplectic (defect {defect:e})")));
    }
    let eig: Vec<Complex<f64>> = dp.complex_eigenvalues().iter().copied().collect();
    let mut best = (f64::INFINITY, 1);
    for n in 1..=n_max.max(1) {
        for l in &eig {
            let dist = (l.powu(n as u32) - Complex::new(1.0, 0.0)).norm();
            if dist < best.0 {
                best = (dist, n);
            }
        }
    }
    let (mut elliptic, mut hyperbolic, mut loxodromic) = (0, 0, 0);
    for l in &eig {
        if (l.norm() - 1.0).abs() < 1e-6 {
            elliptic += 1;
        } else if l.im.abs() < 1e-12 * (1.0 + l.norm()) {
            hyperbolic += 1;
        } else {
            loxodromic += 1;
        }
    }
    Ok(NondegeneracyReport {
        eigenvalues: eig.iter().map(|l| (l.re, l.im)).collect(),
        min_distance: best.0,
        worst_power: best.1,
        degenerate: best.0 < tol,
        elliptic,
        hyperbolic,
        loxodromic,
    })
}

/// `K₁(q, p) = ½ B₁(q)(p + dS)·(p + dS)` in normal coordinates, with
/// `B₁ = B̃ [0 0; 0 C₁] B̃` and `B̃(q) = ∂²_{pp}H(q, 0)`. `C₁` depends on the
/// orbit time only.
#[derive(Debug, Clone)]
pub struct KineticPerturbation {
    pub dim: usize,
    pub delta: f64,
    pub times: Vec<f64>,
    pub c1_nodes: Vec<DMatrix<f64>>,
    pub c1: MatPoly,
    /// Largest entry of `Ã − A` over the nodes.
    pub size: f64,
    h: HamiltonianSpec,
    chart: FiberedSymplecto,
    nf: Arc<NormalFormData>,
}

/// Tolerance on `(Ã − A) n` at the nodes.
pub const REALIZATION_NULL_TOL: f64 = 1e-8;

pub fn realize_perturbation(nf: &NormalFormData, target: &CurveJet) -> Result<KineticPerturbation> {
    let d = nf.d;
    if target.d() != d {
        return Err(Error::Dimension(format!("target must be {d}×{d}")));
    }
    if (target.delta - nf.delta).abs() > 1e-12 * nf.delta {
        return Err(Error::Invalid("target and normal form live on different intervals".into()));
    }
    let mut c1_nodes = Vec::with_capacity(nf.times.len());
    let mut size: f64 = 0.0;
    for (k, &t) in nf.times.iter().enumerate() {
        let a = nf.a_node(k);
        let r = target.a_at(t) - &a;
        size = size.max(r.amax());
        let (vals, g) = sym_eigen_desc(&a);
        let rg = g.transpose() * &r * &g;
        // R must vanish on the null direction of A
        let leak = rg.column(d - 1).amax();
        if leak > REALIZATION_NULL_TOL * (1.0 + r.amax()) {
            return Err(Error::Invalid(format!(
                "target does not share the null direction at t = {t} (|(Ã − A)n| = {leak:e})"
            )));
        }
        let mut inner = DMatrix::zeros(d, d);
        for i in 0..d - 1 {
            if vals[i] <= 1e-12 * vals[0].abs().max(1e-300) {
                return Err(Error::Numerical(format!("transverse Hessian is degenerate at t = {t}")));
            }
            for j in 0..d - 1 {
                inner[(i, j)] = rg[(i, j)] / (vals[i] * vals[j]);
            }
        }
        let c1 = &g * inner * g.transpose();
        c1_nodes.push(0.5 * (&c1 + c1.transpose()));
    }
    let c1 = fit_matrix_nodes(nf.delta, &c1_nodes)?;
    let h = nf.straightening.hamiltonian_spec().clone();
    Ok(KineticPerturbation {
        dim: nf.dim,
        delta: nf.delta,
        times: nf.times.clone(),
        c1_nodes,
        c1,
        size,
        h,
        chart: nf.inverse_symplecto(),
        nf: Arc::new(nf.clone()),
    })
}

impl KineticPerturbation {
    pub fn c1_at(&self, s: f64) -> DMatrix<f64> {
        self.c1.eval(s)
    }

    /// `B̃(q) = Dχ⁻¹ B(χ) Dχ^{-T}`.
    pub fn b_normal(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let (x, _, l) = self.chart.differential(q, &vec![0.0; n])?;
        let inv = l
            .view((0, 0), (n, n))
            .clone_owned()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular normal-form chart".into()))?;
        Ok(&inv * self.h.b_matrix(&x)? * inv.transpose())
    }

    pub fn b1(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let b = self.b_normal(q)?;
        let mut mid = DMatrix::zeros(n, n);
        mid.view_mut((1, 1), (n - 1, n - 1)).copy_from(&self.c1_at(q[0]));
        Ok(&b * mid * &b)
    }

    /// The added term of the perturbed Hamiltonian at a normal-coordinate point.
    pub fn value(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let ds = self.nf.action_gradient(q);
        let w = nalgebra::DVector::from_fn(self.dim, |a, _| p[a] + ds[a]);
        Ok(0.5 * w.dot(&(self.b1(q)? * &w)))
    }

    /// `H + K₁` in normal coordinates.
    pub fn perturbed_hamiltonian(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        Ok(self.nf.hamiltonian(&self.h, q, p)? + self.value(q, p)?)
    }

    /// `∂²_{p̂p̂}(H + K₁)(te₁, 0)` by central differences; exact up to
    /// rounding since both terms are quadratic in `p`.
    pub fn perturbed_hessian(&self, t: f64, step: f64) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let d = n - 1;
        let mut q = vec![0.0; n];
        q[0] = t;
        let f = |i: usize, si: f64, j: usize, sj: f64| -> Result<f64> {
            let mut p = vec![0.0; n];
            p[1 + i] += si * step;
            p[1 + j] += sj * step;
            self.perturbed_hamiltonian(&q, &p)
        };
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = (f(i, 1.0, j, 1.0)? - f(i, 1.0, j, -1.0)? - f(i, -1.0, j, 1.0)? + f(i, -1.0, j, -1.0)?)
                    / (4.0 * step * step);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// Largest first derivative of the added term at `(te₁, 0)` by central
    /// differences in all phase variables.
    pub fn one_jet_along_orbit(&self, t: f64, step: f64) -> Result<f64> {
        let n = self.dim;
        let mut worst = self.value(&{
            let mut q = vec![0.0; n];
            q[0] = t;
            q
        }, &vec![0.0; n])?
        .abs();
        for i in 0..2 * n {
            let eval = |sign: f64| -> Result<f64> {
                let mut x = vec![0.0; 2 * n];
                x[0] = t;
                x[i] += sign * step;
                self.value(&x[..n], &x[n..])
            };
            worst = worst.max(((eval(1.0)? - eval(-1.0)?) / (2.0 * step)).abs());
        }
        Ok(worst)
    }
}

/// `Ã = A + Π_n S(t) Π_n` with `S` a random symmetric polynomial of degree one,
/// scaled so that `max |Ã − A| = size` on the nodes.
pub fn random_admissible_perturbation(nf: &NormalFormData, size: f64, rng: &mut impl Rng) -> Result<CurveJet> {
    let d = nf.d;
    let sym = |rng: &mut dyn rand::RngCore| {
        let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        0.5 * (&m + m.transpose())
    };
    let (s0, s1) = (sym(rng), sym(rng));
    let raw: Vec<DMatrix<f64>> = nf
        .times
        .iter()
        .map(|&t| {
            let n = nf.n_at(t).normalize();
            let proj = DMatrix::identity(d, d) - &n * n.transpose();
            &proj * (&s0 + &s1 * (t / nf.delta)) * &proj
        })
        .collect();
    let top = raw.iter().map(|r| r.amax()).fold(0.0, f64::max);
    if top == 0.0 {
        return Err(Error::Numerical("degenerate random perturbation".into()));
    }
    let nodes: Vec<DMatrix<f64>> = raw
        .iter()
        .enumerate()
        .map(|(k, r)| nf.a_node(k) + r * (size / top))
        .collect();
    let mut a = fit_matrix_nodes(nf.delta, &nodes)?;
    for c in a.coeffs.iter_mut() {
        *c = 0.5 * (&*c + c.transpose());
    }
    CurveJet::new(a, nf.curve.n.clone(), nf.delta)
}

/// Linearized return map of a periodic orbit, reduced to the energy level
/// modulo the flow direction and written in a symplectic basis.
#[derive(Debug, Clone, Serialize)]
pub struct PoincareMap {
    pub period: f64,
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub rows: Vec<Vec<f64>>,
    pub symplectic_defect: f64,
    /// `|φ_T(x₀) − x₀|`.
    pub closure: f64,
}

/// `ω(u, v) = uᵀ J v`.
fn omega(j: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    u.dot(&(j * v))
}

/// Symplectic Gram–Schmidt on a basis of a symplectic subspace; returns
/// `[e₁..e_d, f₁..f_d]` with `ω(eᵢ, f_j) = δᵢⱼ`.
fn symplectic_basis(j: &DMatrix<f64>, mut rest: Vec<DVector<f64>>) -> Result<DMatrix<f64>> {
    let d = rest.len() / 2;
    let mut es = vec![];
    let mut fs = vec![];
    while !rest.is_empty() {
        let e = rest.remove(0);
        let (k, w) = rest
            .iter()
            .enumerate()
            .map(|(k, v)| (k, omega(j, &e, v)))
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .ok_or_else(|| Error::Numerical("odd-dimensional reduced space".into()))?;
        if w.abs() < 1e-10 {
            return Err(Error::Numerical("reduced space is not symplectic".into()));
        }
        let f = rest.remove(k) / w;
        for v in rest.iter_mut() {
            let (a, b) = (omega(j, v, &f), omega(j, v, &e));
            *v -= &e * a - &f * b;
        }
        es.push(e);
        fs.push(f);
    }
    let n = es[0].len();
    let mut m = DMatrix::zeros(n, 2 * d);
    for i in 0..d {
        m.set_column(i, &es[i]);
        m.set_column(d + i, &fs[i]);
    }
    Ok(m)
}

pub fn linearized_poincare(h: &HamiltonianSpec, x0: &[f64], period: f64) -> Result<PoincareMap> {
    let n = h.dim;
    if x0.len() != 2 * n {
        return Err(Error::Dimension(format!("phase point must have {} entries", 2 * n)));
    }
    if !(period > 0.0) {
        return Err(Error::Invalid("period must be positive".into()));
    }
    let (orbit, m) = flow_with_jacobian(h, x0, period)?;
    let end = orbit.state(orbit.t1());
    let closure = end.iter().zip(x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = 1.0 + x0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if closure > 1e-6 * scale {
        return Err(Error::Invalid(format!("orbit does not close after {period} (gap {closure:e})")));
    }
    let mut xv = vec![0.0; 2 * n];
    h.vector_field(x0, &mut xv)?;
    let x = DVector::from_vec(xv);
    if x.norm() < 1e-10 * scale {
        return Err(Error::Invalid("start point is an equilibrium".into()));
    }
    let j = j_matrix(n);
    let grad = -(&j * &x);
    let y = &grad / grad.norm_squared();
    // orthonormal basis of {s : ω(X, s) = ω(Y, s) = 0}
    let cons = DMatrix::from_columns(&[j.transpose() * &x, j.transpose() * &y]);
    let mut basis: Vec<DVector<f64>> = vec![];
    let q = cons.clone().qr().q();
    let mut span: Vec<DVector<f64>> = (0..2).map(|i| q.column(i).clone_owned()).collect();
    for k in 0..2 * n {
        let mut v = DVector::zeros(2 * n);
        v[k] = 1.0;
        for u in &span {
            v -= u * u.dot(&v);
        }
        for u in &span {
            v -= u * u.dot(&v);
        }
        if v.norm() > 1e-8 {
            let v = v.normalize();
            span.push(v.clone());
            basis.push(v);
        }
        if basis.len() == 2 * n - 2 {
            break;
        }
    }
    let sb = symplectic_basis(&j, basis)?;
    let d = n - 1;
    let mut p = DMatrix::zeros(2 * d, 2 * d);
    for c in 0..2 * d {
        let v = &m * sb.column(c);
        let s = &v - &x * omega(&j, &v, &y) - &y * omega(&j, &x, &v);
        for i in 0..d {
            p[(i, c)] = omega(&j, &s, &sb.column(d + i).clone_owned());
            p[(d + i, c)] = omega(&j, &sb.column(i).clone_owned(), &s);
        }
    }
    Ok(PoincareMap {
        period,
        rows: (0..2 * d).map(|i| p.row(i).iter().copied().collect()).collect(),
        symplectic_defect: symplectic_defect(&p),
        matrix: p,
        closure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_pieces_are_orthonormal() {
        let (xs, ws) = gauss_legendre(8);
        let (lo, hi) = (0.2, 0.7);
        for j in 0..4 {
            for k in 0..4 {
                let s: f64 = xs
                    .iter()
                    .zip(&ws)
                    .map(|(x, w)| {
                        let t = lo + 0.5 * (hi - lo) * (x + 1.0);
                        0.5 * (hi - lo) * w * legendre_piece(j, lo, hi, t) * legendre_piece(k, lo, hi, t)
                    })
                    .sum();
                assert!((s - if j == k { 1.0 } else { 0.0 }).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn pulled_back_generator_is_symplectic() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -2.0]);
        let ia = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.0]);
        assert!(crate::linalg::sp_defect(&pulled_back(&s, &ia)) < 1e-14);
    }

    #[test]
    fn verdict_bands() {
        assert_eq!(verdict_of(10, 10, 1e-6), SubmersionVerdict::Pass);
        assert_eq!(verdict_of(10, 10, 1e-9), SubmersionVerdict::Indeterminate);
        assert_eq!(verdict_of(6, 10, 1e-17), SubmersionVerdict::Fail);
    }
}
