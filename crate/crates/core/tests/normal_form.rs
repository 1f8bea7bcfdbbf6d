use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use subrq::dynamics::*;
use subrq::expr::{parse, Expr};
use subrq::geometry::{regularity_form, FrameSpec};
use subrq::normal_form::*;

fn identity_metric(d: usize) -> Vec<Vec<Expr>> {
    (0..d)
        .map(|i| (0..d).map(|j| Expr::Num(if i == j { 1.0 } else { 0.0 })).collect())
        .collect()
}

fn heisenberg() -> HamiltonianSpec {
    legendre_dual_quadratic(identity_metric(2), &FrameSpec::heisenberg()).unwrap()
}

fn heisenberg_with_potential() -> HamiltonianSpec {
    heisenberg().with_potential(parse("0.3*cos(q1) + 0.2*q2^2").unwrap(), 1.0)
}

fn martinet() -> HamiltonianSpec {
    legendre_dual_quadratic(identity_metric(2), &FrameSpec::martinet()).unwrap()
}

fn planar(u: &str) -> HamiltonianSpec {
    HamiltonianSpec::new(
        KineticClass::Quad,
        Kinetic::Explicit { b: identity_metric(2) },
        parse(u).unwrap(),
        1.0,
        2,
    )
}

fn exprs(src: &[&str]) -> Vec<Expr> {
    src.iter().map(|s| parse(s).unwrap()).collect()
}

fn close(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn lifts_compose_functorially() {
    let phi = exprs(&["q1 + 0.2*q2^2", "q2 + 0.1*sin(q1)"]);
    let chi = exprs(&["q1*exp(0.1*q2)", "q2 - 0.3*q1^2"]);
    let chi_phi: Vec<Expr> = chi.iter().map(|c| c.substitute(&phi).unwrap()).collect();
    let lhs = FiberedSymplecto::homogeneous(phi.clone())
        .then(&FiberedSymplecto::homogeneous(chi.clone()))
        .unwrap();
    let rhs = FiberedSymplecto::homogeneous(chi_phi);
    let g1 = parse("q1^2*q2 + cos(q2)").unwrap();
    let g2 = parse("0.5*q1*q2^3").unwrap();
    let sum = FiberedSymplecto::vertical(2, g1.clone() + g2.clone());
    let parts = FiberedSymplecto::vertical(2, g2).then(&FiberedSymplecto::vertical(2, g1)).unwrap();
    for (q, p) in [([0.1, -0.3], [1.0, 0.4]), ([-0.5, 0.7], [-0.2, 2.0]), ([0.9, 0.0], [0.0, -1.0])] {
        let (a, b) = (lhs.apply(&q, &p).unwrap(), rhs.apply(&q, &p).unwrap());
        assert!(close(&a.0, &b.0) < 1e-9 && close(&a.1, &b.1) < 1e-9);
        let (a, b) = (sum.apply(&q, &p).unwrap(), parts.apply(&q, &p).unwrap());
        assert!(close(&a.0, &b.0) < 1e-9 && close(&a.1, &b.1) < 1e-9);
    }
}

#[test]
fn vertical_commutes_past_homogeneous() {
    // Ψ^g ∘ Ψ_φ = Ψ_φ ∘ Ψ^{g∘φ}
    let phi = exprs(&["q1 + 0.3*q2", "q2 + 0.2*q1^2", "q3 + q1*q2"]);
    let g = parse("sin(q1) + q2*q3^2").unwrap();
    let g_phi = g.substitute(&phi).unwrap();
    let lhs = FiberedSymplecto::homogeneous(phi.clone())
        .then(&FiberedSymplecto::vertical(3, g))
        .unwrap();
    let rhs = FiberedSymplecto::vertical(3, g_phi)
        .then(&FiberedSymplecto::homogeneous(phi))
        .unwrap();
    let (q, p) = ([0.2, -0.1, 0.4], [1.0, -0.5, 0.25]);
    let (a, b) = (lhs.apply(&q, &p).unwrap(), rhs.apply(&q, &p).unwrap());
    assert!(close(&a.0, &b.0) < 1e-12 && close(&a.1, &b.1) < 1e-12);
    assert!(lhs.symplectic_defect(&q, &p).unwrap() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn lifts_are_symplectic(q in prop::array::uniform3(-1.0f64..1.0), p in prop::array::uniform3(-2.0f64..2.0)) {
        let f = FiberedSymplecto::homogeneous(exprs(&["q1 + 0.2*q3^2", "q2*exp(0.1*q1)", "q3 + 0.3*sin(q2)"]))
            .then(&FiberedSymplecto::vertical(3, parse("q1*q2*q3 + cos(q1)").unwrap()))
            .unwrap();
        prop_assert!(f.symplectic_defect(&q, &p).unwrap() < 1e-8);
    }
}

fn circle_orbit() -> (HamiltonianSpec, OrbitSegment) {
    let h = planar("0.5*q1^2 + 0.5*q2^2");
    let orbit = flow(&h, &[1.0, 0.0, 0.0, 1.0], 2.0).unwrap();
    (h, orbit)
}

#[test]
fn circle_straightens_to_the_first_axis() {
    let (h, orbit) = circle_orbit();
    let st = straighten_orbit(&h, &orbit).unwrap();
    let phi = st.symplecto();
    for i in 0..=20 {
        let t = 0.1 * i as f64;
        let q = [t.cos(), t.sin()];
        let (s, y) = st.to_tube(&q).unwrap();
        assert!((s - t).abs() < 1e-8 && y[0].abs() < 1e-8, "t = {t}: ({s}, {y:?})");
        let (img, _) = phi.apply(&q, &[0.0, 1.0]).unwrap();
        assert!(close(&img, &[t, 0.0]) < 1e-8);
    }
    // off the orbit the chart still inverts the tube map
    let x = st.tube_point(0.7, &[0.05]).unwrap();
    let (s, y) = st.to_tube(&x).unwrap();
    assert!((s - 0.7).abs() < 1e-12 && (y[0] - 0.05).abs() < 1e-12);
    assert!(phi.symplectic_defect(&x, &[0.3, -0.2]).unwrap() < 1e-8);
}

#[test]
fn straightening_rejects_a_rest_start() {
    let h = planar("0.5*q1^2 + 0.5*q2^2");
    let orbit = flow(&h, &[1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
    assert!(straighten_orbit(&h, &orbit).is_err());
}

#[test]
fn free_straight_orbit_has_flat_action() {
    let h = planar("0");
    let orbit = flow(&h, &[0.0, 0.0, 1.0, 0.0], 1.0).unwrap();
    let st = straighten_orbit(&h, &orbit).unwrap();
    let fam = solve_hj_jets(&h, &st, &st.section, 0.5, 1.0, 12).unwrap();
    for k in 0..fam.times.len() {
        let gh = fam.g_hessian(k).unwrap();
        assert!(gh.amax() < 1e-12);
        let (x, p) = fam.point(k);
        assert!(close(&x, &[fam.times[k], 0.0]) < 1e-12 && close(&p, &[1.0, 0.0]) < 1e-12);
    }
}

#[test]
fn transverse_hessian_of_action_solves_the_riccati_equation() {
    // ½|p|² + ½ω²y²: along y = 0, g_yy(x) = −ω tan(ωx/c) with c = √(2k)
    let omega = 1.3;
    let h = planar(&format!("0.5*{}*q2^2", omega * omega));
    let k: f64 = 0.5;
    let c = (2.0 * k).sqrt();
    let orbit = flow(&h, &[0.0, 0.0, c, 0.0], 1.0).unwrap();
    let st = straighten_orbit(&h, &orbit).unwrap();
    let fam = solve_hj_jets(&h, &st, &st.section, k, 1.0, 16).unwrap();
    for (i, &t) in fam.times.iter().enumerate() {
        let gh = fam.g_hessian(i).unwrap();
        let want = -omega * (omega * t / c).tan();
        assert!((gh[(1, 1)] - want).abs() < 1e-9, "t = {t}: {} vs {want}", gh[(1, 1)]);
        assert!(gh[(0, 0)].abs() < 1e-9 && gh[(0, 1)].abs() < 1e-9);
    }
}

#[test]
fn section_below_the_energy_level_is_reported() {
    let h = planar("0.5*q2^2");
    let orbit = flow(&h, &[0.0, 0.0, 1.0, 0.0], 1.0).unwrap();
    let st = straighten_orbit(&h, &orbit).unwrap();
    let err = solve_hj_jets(&h, &st, &st.section, -0.1, 0.5, 8).unwrap_err();
    assert!(err.to_string().contains("no momentum"), "{err}");
}

#[test]
fn flow_box_of_a_linear_field_matches_the_exponential() {
    let eps = 0.3;
    let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.5, 0.2, 0.3, 0.0, -0.4]);
    let field: Vec<Expr> = (0..3)
        .map(|i| {
            let mut e = Expr::Num(if i == 0 { 1.0 } else { 0.0 });
            for j in 0..3 {
                if m[(i, j)] != 0.0 {
                    e = e + Expr::Num(eps * m[(i, j)]) * Expr::var(j);
                }
            }
            e
        })
        .collect();
    let w = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let fb = flow_box(&field, &[0.0; 3], &w, 1.0, 12).unwrap();
    for (k, &s) in fb.times.iter().enumerate() {
        let e = (&m * (eps * s)).exp();
        let dz = e.clone() * &w;
        let jac = fb.jacobian(k);
        assert!((jac.view((0, 1), (3, 2)) - &dz).amax() < 1e-9);
        // the base curve: x(s) = ∫ e^{εMr} e₁ dr, so ẋ(s) = e^{εMs} e₁
        let col = jac.column(0).clone_owned();
        assert!((col - e.column(0)).amax() < 1e-9);
        // the map is affine in z
        let z = [0.2, -0.1];
        let got = fb.map_at(k, &z);
        let base = fb.map_at(k, &[0.0, 0.0]);
        let lin = &dz * DVector::from_column_slice(&z);
        assert!((0..3).all(|a| (got[a] - base[a] - lin[a]).abs() < 1e-9));
    }
}

#[test]
fn flow_box_rejects_a_rest_point() {
    let field = exprs(&["q1", "q2"]);
    let w = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    assert!(flow_box(&field, &[0.0, 0.0], &w, 1.0, 8).is_err());
}

#[test]
fn linear_normalization_examples() {
    let ln = linear_normalize(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0]))).unwrap();
    assert!((ln.m_bar.clone() - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]))).amax() < 1e-14);
    let id = linear_normalize(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).unwrap();
    assert!((id.m_bar - DMatrix::identity(2, 2)).amax() < 1e-14);
    // eigenvalues out of order: the null eigenvector becomes the last row
    let ln = linear_normalize(&DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 9.0]))).unwrap();
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 9.0]));
    let out = &ln.m_bar * a * ln.m_bar.transpose();
    assert!((out - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).amax() < 1e-14);
    assert!(linear_normalize(&DMatrix::identity(2, 2)).is_err());
    assert!(linear_normalize(&DMatrix::zeros(3, 3)).is_err());
    assert!(linear_normalize(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 0.0]))).is_err());
}

fn heisenberg_normal_form() -> (HamiltonianSpec, NormalFormData) {
    let h = heisenberg_with_potential();
    let orbit = flow(&h, &[0.0, 0.0, 0.0, 1.0, 0.2, 0.3], 1.0).unwrap();
    let nf = normal_form(&h, &orbit, 0.5, &NormalFormOptions::default()).unwrap();
    (h, nf)
}

#[test]
fn heisenberg_with_potential_is_certified() {
    let (h, nf) = heisenberg_normal_form();
    let r = &nf.residuals;
    assert!(r.orbit < 1e-8, "{r:?}");
    for v in [r.energy, r.drift, r.block, r.euler, r.hamilton_jacobi, r.annihilator, r.unit] {
        assert!(v < 1e-7, "{r:?}");
    }
    assert!(r.null < 1e-9, "{r:?}");
    let n0 = nf.n_at(0.0);
    assert!((n0 - DVector::from_vec(vec![0.0, 1.0])).amax() < 1e-7);

    // sampled off the orbit through the assembled map
    let k = nf.energy;
    for (s, z) in [(0.1, [1e-3, -2e-3]), (0.3, [-1e-3, 1e-3]), (0.45, [2e-3, 0.0])] {
        let q = [s, z[0], z[1]];
        assert!((nf.hamiltonian(&h, &q, &[0.0; 3]).unwrap() - k).abs() < 1e-9);
        let eps = 1e-5;
        for a in 0..3 {
            let mut pp = [0.0; 3];
            pp[a] = eps;
            let mut pm = [0.0; 3];
            pm[a] = -eps;
            let dh = (nf.hamiltonian(&h, &q, &pp).unwrap() - nf.hamiltonian(&h, &q, &pm).unwrap()) / (2.0 * eps);
            let want = if a == 0 { 1.0 } else { 0.0 };
            assert!((dh - want).abs() < 1e-6, "∂_p{a}H = {dh}");
        }
    }
}

#[test]
fn transformed_hamiltonian_is_blind_to_the_annihilator() {
    let (h, nf) = heisenberg_normal_form();
    let phi_inv = nf.inverse_symplecto();
    for (q, p) in [([0.2, 1e-2, -1e-2], [0.1, 0.3, -0.2]), ([0.4, 0.0, 2e-2], [-0.2, 0.1, 0.5])] {
        // pushed-forward annihilator: Dχᵀ η(χ(q)), read off the phase differential
        let (x, _, l) = phi_inv.differential(&q, &p).unwrap();
        let dchi = l.view((0, 0), (3, 3)).clone_owned();
        let nu = dchi.transpose() * h.eta_at(&x).unwrap();
        let base = nf.hamiltonian(&h, &q, &p).unwrap();
        for lam in [0.5, -1.0, 2.0] {
            let shifted: Vec<f64> = (0..3).map(|a| p[a] + lam * nu[a]).collect();
            assert!((nf.hamiltonian(&h, &q, &shifted).unwrap() - base).abs() < 1e-9);
        }
    }
}

#[test]
fn record_round_trips_through_json() {
    let (_, nf) = heisenberg_normal_form();
    let rec = nf.to_record();
    let s = serde_json::to_string(&rec).unwrap();
    let back: NormalFormRecord = serde_json::from_str(&s).unwrap();
    assert_eq!(back.residuals, rec.residuals);
    assert_eq!(back.times, rec.times);
    let curve = subrq::curve::CurveJet::from_record(&back.curve).unwrap();
    assert!((curve.a_at(0.2) - nf.a_at(0.2)).amax() < 1e-14);
}

#[test]
fn regular_start_matches_turning_null_direction() {
    // Heisenberg: every nonconstant horizontal curve is regular
    let (h, nf) = heisenberg_normal_form();
    let x0 = nf.straightening.base.clone();
    let v0 = nf.straightening.velocity(0.0).unwrap();
    let form = regularity_form(&FrameSpec::heisenberg(), &x0, &v0).unwrap();
    let form_norm = form.iter().map(|f| f * f).sum::<f64>().sqrt();
    assert!(form_norm > 1e-6);
    assert!(nf.n_dot0().norm() > 1e-6);
    drop(h);

    // Martinet along y = 0 is the abnormal line: the null direction does not turn
    let h = martinet();
    let orbit = flow(&h, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 1.0).unwrap();
    let nf = normal_form(&h, &orbit, 0.5, &NormalFormOptions::default()).unwrap();
    let v0 = nf.straightening.velocity(0.0).unwrap();
    let form = regularity_form(&FrameSpec::martinet(), &[0.0; 3], &v0).unwrap();
    assert!(form.iter().all(|f| f.abs() < 1e-12));
    assert!(nf.n_dot0().norm() < 1e-7, "ṅ(0) = {}", nf.n_dot0());
}

#[test]
fn short_orbit_is_rejected() {
    let h = heisenberg_with_potential();
    let orbit = flow(&h, &[0.0, 0.0, 0.0, 1.0, 0.2, 0.3], 1e-4).unwrap();
    assert!(normal_form(&h, &orbit, 0.5, &NormalFormOptions::default()).is_err());
}
