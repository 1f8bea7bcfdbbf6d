#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subrq::curve::CurveJet;
use subrq::dynamics::*;
use subrq::expr::{parse, Expr};
use subrq::formulas::{formula_battery, loglog_slope, m_limit_errors, m_matrix, w_of};
use subrq::geometry::*;
use subrq::lifts::abnormal_search;
use subrq::linalg::symplectic_defect;
use subrq::mane::{bracket_family, random_null_direction, sample_curve, span_test, SamplerConfig};
use subrq::normal_form::{normal_form, NormalFormData, NormalFormOptions};
use subrq::variational::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Result<Verdict, subrq::Error>;

fn identity_metric(d: usize) -> Vec<Vec<Expr>> {
    (0..d)
        .map(|i| (0..d).map(|j| Expr::Num(if i == j { 1.0 } else { 0.0 })).collect())
        .collect()
}

fn flat(frame: &FrameSpec) -> HamiltonianSpec {
    legendre_dual_quadratic(identity_metric(frame.rank()), frame).unwrap()
}

fn formula_closed_forms() -> Result<Verdict, subrq::Error> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut failing = vec![];
    for d in 2..=6 {
        for c in formula_battery(d, 20, 1)? {
            count += 1;
            worst = worst.max(c.max_error);
            if !(c.max_error <= 1e-12) {
                failing.push(format!("{} (d = {d}): {:.1e}", c.name, c.max_error));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("{count} checks for d = 2..6, worst error {worst:.1e}, {secs:.2} s");
    if !failing.is_empty() {
        detail += &format!("; failing: {}", failing.join(", "));
    }
    Ok(verdict(failing.is_empty() && secs < 10.0, detail))
}

fn planar_determinant() -> Result<Verdict, subrq::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v1: f64 = rng.gen_range(0.05..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let v = DVector::from_vec(vec![v1]);
        let mu = DVector::from_vec(vec![rng.gen_range(-2.0..2.0)]);
        let w = w_of(&v, &mu, &DVector::from_vec(vec![rng.gen_range(-1.0..1.0)]));
        let det = m_matrix(&v, &mu, &w)?.det();
        let both = ((det - (2.0 * w[1] - 3.0 * v1 * v1)).abs()).max((det + v1 * v1).abs());
        worst = worst.max(both / (v1 * v1));
    }
    Ok(verdict(worst < 1e-12, format!("100 samples, worst relative error {worst:.1e}")))
}

/// Sufficiency of the depth-5 bracket test for the end-point rank. Span
/// failures with full end-point rank are listed, not counted as failures:
/// the bracket test is one-sided and loses rank near ṅ(0) = 0.
fn span_versus_endpoint() -> Result<Verdict, subrq::Error> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut total, mut agree, mut span_passes, mut implied) = (0, 0, 0, 0);
    let mut inconclusive = vec![];
    for (d, count) in [(2usize, 50usize), (3, 20)] {
        let target = 2 * d * d + d;
        let mut k = 0;
        while k < count {
            let n = random_null_direction(d, 5, false, &mut rng)?;
            let ndot = n.coeff(1)?.norm();
            if ndot < 1e-3 {
                continue;
            }
            let c = sample_curve(&n, &SamplerConfig { delta: 0.5, ..Default::default() }, &mut rng)?;
            let span = span_test(&bracket_family(&c, 5, 0.0)?)?;
            let end = endpoint_differential(&c, &EndpointConfig::default())?;
            let full = end.rank == target && end.verdict == SubmersionVerdict::Pass;
            total += 1;
            if span.pass == full {
                agree += 1;
            } else if full {
                inconclusive.push(format!("d = {d}, |ṅ(0)| = {ndot:.1e}, span σ ratio {:.1e}", span.sigma_ratio));
            }
            if span.pass {
                span_passes += 1;
                if full {
                    implied += 1;
                }
            }
            k += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("span pass ⇒ full rank in {implied}/{span_passes}; verdicts agree on {agree}/{total}; {secs:.1} s");
    if !inconclusive.is_empty() {
        detail += &format!("; span fails but rank is full for: {}", inconclusive.join("; "));
    }
    Ok(verdict(implied == span_passes && secs < 120.0, detail))
}

fn degenerate_constant_curve() -> Result<Verdict, subrq::Error> {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
    let c = CurveJet::constant(a, Some(DVector::from_vec(vec![0.0, 1.0])), 1.0)?;
    let span = span_test(&bracket_family(&c, 5, 0.0)?)?;
    let end = endpoint_differential(&c, &EndpointConfig::default())?;
    Ok(verdict(
        span.rank == 6 && end.rank < 10,
        format!("span rank {}, end-point rank {} of 10", span.rank, end.rank),
    ))
}

fn random_symmetric(d: usize, rng: &mut ChaCha8Rng, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-scale..scale));
    0.5 * (&m + m.transpose())
}

fn symplecticity() -> Result<Verdict, subrq::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let d = 2 + k % 3;
        let n = random_null_direction(d, 5, false, &mut rng)?;
        let c = sample_curve(&n, &SamplerConfig { delta: 0.5, ..Default::default() }, &mut rng)?;
        let s0 = random_symmetric(d, &mut rng, 1.0);
        let s1 = random_symmetric(d, &mut rng, 1.0);
        let w = MatrixControl::from_fn(d, move |t| &s0 + &s1 * t);
        let l = transition_map(&c, &w)?;
        for x in &l.path {
            worst = worst.max(symplectic_defect(x));
        }
    }
    let cfg = EndpointConfig {
        max_level: 2,
        fd_check: true,
        ..Default::default()
    };
    let mut fd: f64 = 0.0;
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = random_null_direction(2, 5, false, &mut r)?;
        let c = sample_curve(&n, &SamplerConfig { delta: 0.5, ..Default::default() }, &mut r)?;
        fd = fd.max(endpoint_differential(&c, &cfg)?.fd_max_rel_error.unwrap_or(f64::INFINITY));
    }
    Ok(verdict(
        worst < 1e-7 && fd < 1e-6,
        format!("max ‖LᵀJL − J‖ = {worst:.1e} on 100 paths; finite-difference columns {fd:.1e}"),
    ))
}

fn heisenberg_potential_normal_form() -> Result<(HamiltonianSpec, NormalFormData), subrq::Error> {
    let h = flat(&FrameSpec::heisenberg()).with_potential(parse("0.3*cos(q1) + 0.2*q2^2")?, 1.0);
    let orbit = flow(&h, &[0.0, 0.0, 0.0, 1.0, 0.2, 0.3], 1.0)?;
    let nf = normal_form(&h, &orbit, 0.5, &NormalFormOptions::default())?;
    Ok((h, nf))
}

fn normal_form_certification() -> Result<Verdict, subrq::Error> {
    let (_, nf) = heisenberg_potential_normal_form()?;
    let r = &nf.residuals;
    let transformed = [r.orbit, r.energy, r.drift, r.block, r.hamilton_jacobi].into_iter().fold(0.0, f64::max);
    Ok(verdict(
        transformed < 1e-7 && r.euler < 1e-7 && r.null < 1e-9,
        format!(
            "transformed-Hamiltonian residuals {transformed:.1e}, B dg − e₁ {:.1e}, A n {:.1e}",
            r.euler, r.null
        ),
    ))
}

/// Horizontal curve traced by the projection of a Hamiltonian orbit.
fn projected(frame: &FrameSpec, orbit: &OrbitSegment) -> Result<HorizontalCurve, subrq::Error> {
    let fr = frame.clone();
    let orb = orbit.clone();
    let n = frame.dim();
    let control = Control::func(move |t| {
        let x = orb.state(t);
        let f = fr.frame_matrix(&x[..n]).unwrap();
        (f.transpose() * DVector::from_column_slice(&x[n..])).iter().copied().collect()
    });
    integrate_horizontal(frame, &orbit.states[0][..n], &control, orbit.t1())
}

fn regularity_equivalences() -> Result<Verdict, subrq::Error> {
    let mut disagreements = vec![];
    let mut cases = 0;
    let mut heisenberg_regular = true;
    let mut martinet_line_singular = false;
    // curves from controls: form test, end-point rank and abnormal covector
    let controls = [
        Control::Constant(vec![1.0, 0.0]),
        Control::Constant(vec![0.3, -0.7]),
        Control::polynomial(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
        Control::polynomial(vec![vec![1.0, 0.2], vec![0.0, 0.5]]),
    ];
    for (name, frame) in [("heisenberg", FrameSpec::heisenberg()), ("martinet", FrameSpec::martinet())] {
        for (k, c) in controls.iter().enumerate() {
            for q0 in [[0.0, 0.0, 0.0], [0.1, 0.4, -0.2]] {
                let curve = integrate_horizontal(&frame, &q0, c, 1.0)?;
                let rep = classify_curve(&frame, &curve)?;
                let singular = rep.verdict == subrq::geometry::Verdict::SingularCurve;
                let deficient = rep.endpoint.rank < frame.dim();
                let abnormal = abnormal_search(&frame, &curve, 200)?.covector.is_some();
                cases += 1;
                if singular != deficient || singular != abnormal {
                    disagreements.push(format!("{name} control {k} from {q0:?}"));
                }
                if name == "heisenberg" && rep.verdict != subrq::geometry::Verdict::RegularEverywhere {
                    heisenberg_regular = false;
                }
                if name == "martinet" && k == 0 && q0 == [0.0; 3] {
                    martinet_line_singular = singular;
                }
            }
        }
    }
    // projected orbits: the same three tests plus the null-direction derivative
    let heis = FrameSpec::heisenberg();
    let mart = FrameSpec::martinet();
    let orbits: Vec<(&str, &FrameSpec, HamiltonianSpec, [f64; 6])> = vec![
        ("heisenberg", &heis, flat(&heis), [0.0, 0.0, 0.0, 1.0, 0.2, 0.3]),
        ("heisenberg", &heis, flat(&heis), [0.1, -0.2, 0.0, 0.4, 0.7, 1.1]),
        ("heisenberg", &heis, flat(&heis).with_potential(parse("0.3*cos(q1) + 0.2*q2^2")?, 1.0), [0.0, 0.0, 0.0, 1.0, 0.2, 0.3]),
        ("martinet", &mart, flat(&mart), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        ("martinet", &mart, flat(&mart), [0.0, 0.5, 0.0, 1.0, 0.2, 0.0]),
        ("martinet", &mart, flat(&mart), [0.0, 0.3, 0.0, 0.8, 0.5, 0.6]),
    ];
    for (name, frame, h, x0) in orbits {
        let orbit = flow(&h, &x0, 1.0)?;
        let curve = projected(frame, &orbit)?;
        let rep = classify_curve(frame, &curve)?;
        let singular = rep.verdict == subrq::geometry::Verdict::SingularCurve;
        let deficient = rep.endpoint.rank < frame.dim();
        let abnormal = abnormal_search(frame, &curve, 200)?.covector.is_some();
        let nf = normal_form(&h, &orbit, 0.5, &NormalFormOptions::default())?;
        let turning = nf.n_dot0().norm() > 1e-6;
        let form0 = regularity_form(frame, &x0[..3], &curve.velocity(0.0)?)?;
        let regular_start = form0.iter().map(|f| f * f).sum::<f64>().sqrt() > 1e-6;
        cases += 1;
        if singular != deficient || singular != abnormal || turning != regular_start || (singular && turning) {
            disagreements.push(format!("{name} orbit from {x0:?}"));
        }
        if name == "heisenberg" && rep.verdict != subrq::geometry::Verdict::RegularEverywhere {
            heisenberg_regular = false;
        }
    }
    let mut detail = format!(
        "{} of {cases} curves agree; Martinet line singular: {martinet_line_singular}; Heisenberg all regular: {heisenberg_regular}",
        cases - disagreements.len()
    );
    if !disagreements.is_empty() {
        detail += &format!("; disagreements: {}", disagreements.join(", "));
    }
    Ok(verdict(disagreements.is_empty() && heisenberg_regular && martinet_line_singular, detail))
}

fn projected_polyline(o: &OrbitSegment, n: usize) -> Vec<Vec<f64>> {
    (0..=n).map(|k| o.q(o.t0() + (o.t1() - o.t0()) * k as f64 / n as f64)).collect()
}

fn maupertuis_case(h: HamiltonianSpec, q0: [f64; 3], p_dir: [f64; 3], t: f64) -> Result<f64, subrq::Error> {
    let k = h.energy;
    let m = maupertuis(&h)?;
    let kin = h.kinetic_value(&q0, &p_dir)?;
    let s = ((k - h.potential.eval(&q0)?) / kin).sqrt();
    let mut x0 = q0.to_vec();
    x0.extend(p_dir.iter().map(|v| v * s));
    let a = flow(&h, &x0, t)?;
    // Jacobi time: ds = (k − U) dt
    let n = 4000;
    let mut s_end = 0.0;
    for j in 0..n {
        let tj = t * (j as f64 + 0.5) / n as f64;
        s_end += (k - h.potential.eval(&a.q(tj))?) * t / n as f64;
    }
    let b = flow(&m, &x0, s_end)?;
    Ok(hausdorff_polyline(&projected_polyline(&a, 4000), &projected_polyline(&b, 4000)))
}

fn maupertuis_point_sets() -> Result<Verdict, subrq::Error> {
    let bx = vec![(-1.5, 1.5); 3];
    let heis = flat(&FrameSpec::heisenberg()).with_box(bx.clone());
    let mart = flat(&FrameSpec::martinet()).with_box(bx);
    let cases = [
        maupertuis_case(heis.clone().with_potential(parse("0.3*cos(q1)")?, 1.0), [0.1, -0.2, 0.0], [0.4, 0.7, 0.5], 1.0)?,
        maupertuis_case(heis.with_potential(parse("0.1*(q1^2 + q2^2)")?, 0.8), [0.2, 0.1, 0.3], [-0.5, 0.6, 0.2], 1.5)?,
        maupertuis_case(mart.with_potential(parse("0.2*sin(q2) + 0.05*q3^2")?, 1.0), [0.0, 0.3, 0.0], [0.8, 0.4, 0.3], 1.0)?,
    ];
    let worst = cases.iter().copied().fold(0.0, f64::max);
    Ok(verdict(
        worst < 1e-6,
        format!("Hausdorff distances {:.1e}, {:.1e}, {:.1e}", cases[0], cases[1], cases[2]),
    ))
}

fn realization_round_trip() -> Result<Verdict, subrq::Error> {
    let (_, nf) = heisenberg_potential_normal_form()?;
    let mut ts = nf.times.clone();
    ts.extend(nf.times.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let (mut rec, mut jet): (f64, f64) = (0.0, 0.0);
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_admissible_perturbation(&nf, 1e-2, &mut rng)?;
        let k1 = realize_perturbation(&nf, &target)?;
        for &t in &ts {
            rec = rec.max((k1.perturbed_hessian(t, 1e-2)? - target.a_at(t)).amax());
            jet = jet.max(k1.one_jet_along_orbit(t, 1e-5)?);
        }
    }
    Ok(verdict(
        rec < 1e-7 && jet < 1e-9,
        format!("3 perturbations of size 1e-2: recovery {rec:.1e}, 1-jet {jet:.1e}"),
    ))
}

fn scaling_limit() -> Result<Verdict, subrq::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ts = [1e2, 1e3, 1e4, 1e5];
    let mut slopes = vec![];
    for _ in 0..10 {
        let d = rng.gen_range(3..6);
        let mu = DVector::from_fn(d - 1, |i, _| (i as f64 + 1.0) * rng.gen_range(0.5..1.0));
        let v = DVector::from_fn(d - 1, |_, _| rng.gen_range(0.3..1.0));
        let gw = DVector::from_fn(d - 1, |_, _| rng.gen_range(-1.0..1.0));
        slopes.push(loglog_slope(&ts, &m_limit_errors(&v, &mu, &gw, &ts)?));
    }
    let lo = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(verdict(
        slopes.iter().all(|s| (s + 1.0).abs() < 0.1),
        format!("10 instances, slopes in [{lo:.3}, {hi:.3}]"),
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("closed-form formula battery", formula_closed_forms),
        ("planar determinant identity", planar_determinant),
        ("bracket span vs end-point rank", span_versus_endpoint),
        ("degenerate constant curve", degenerate_constant_curve),
        ("symplecticity and finite differences", symplecticity),
        ("normal-form certification", normal_form_certification),
        ("regularity equivalences", regularity_equivalences),
        ("Maupertuis reparametrization", maupertuis_point_sets),
        ("realization round trip", realization_round_trip),
        ("scaling-limit rate", scaling_limit),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let v = check().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        if !v.pass {
            failed += 1;
        }
        println!(
            "[{}] {:>2}. {name}: {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("\n{} of {} criteria pass", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
