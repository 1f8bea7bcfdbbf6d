use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use subrq::dynamics::*;
use subrq::expr::{parse, Expr};
use subrq::geometry::FrameSpec;
use subrq::linalg::symplectic_defect;

fn identity_metric(d: usize) -> Vec<Vec<Expr>> {
    (0..d)
        .map(|i| (0..d).map(|j| Expr::Num(if i == j { 1.0 } else { 0.0 })).collect())
        .collect()
}

fn heisenberg() -> HamiltonianSpec {
    legendre_dual_quadratic(identity_metric(2), &FrameSpec::heisenberg())
        .unwrap()
        .with_box(vec![(-1.0, 1.0); 3])
}

fn heisenberg_with_potential() -> HamiltonianSpec {
    heisenberg().with_potential(parse("0.3*cos(q1) + 0.2*q2^2").unwrap(), 1.0)
}

fn planar(u: &str) -> HamiltonianSpec {
    HamiltonianSpec::new(
        KineticClass::Quad,
        Kinetic::Explicit { b: identity_metric(2) },
        parse(u).unwrap(),
        1.0,
        2,
    )
    .with_box(vec![(-2.0, 2.0); 2])
}

#[test]
fn heisenberg_kinetic_matches_closed_form_and_sup() {
    let h = heisenberg();
    let f = FrameSpec::heisenberg();
    let mut seed = 0.37f64;
    let mut next = || {
        seed = (seed * 997.0 + 0.123).fract();
        2.0 * seed - 1.0
    };
    for _ in 0..20 {
        let q = [next(), next(), next()];
        let p = [next(), next(), next()];
        let closed = 0.5 * ((p[0] - q[1] * p[2] / 2.0).powi(2) + (p[1] + q[0] * p[2] / 2.0).powi(2));
        let k = h.kinetic_value(&q, &p).unwrap();
        assert!((k - closed).abs() < 1e-14);
        // sup over controls of p·Fc − ½|c|² is attained at c = Fᵀp
        let fm = f.frame_matrix(&q).unwrap();
        let pv = DVector::from_column_slice(&p);
        let c = fm.transpose() * &pv;
        let val = |c: &DVector<f64>| pv.dot(&(&fm * c)) - 0.5 * c.norm_squared();
        assert!((val(&c) - k).abs() < 1e-14);
        for dc in [[1e-3, 0.0], [0.0, -1e-3], [5e-4, 5e-4]] {
            assert!(val(&(&c + DVector::from_column_slice(&dc))) < k);
        }
    }
}

#[test]
fn heisenberg_structure_checks() {
    let h = heisenberg_with_potential();
    h.validate_sampled(2, 50, 1).unwrap();
    assert!(h.euler_identity_defect(2.0, 50, 2).unwrap() < 1e-12);
}

#[test]
fn vanishing_vertical_momentum_gives_straight_lines() {
    let h = heisenberg();
    let o = flow(&h, &[0.1, 0.2, 0.3, 0.6, -0.8, 0.0], 1.5).unwrap();
    for k in 0..=30 {
        let t = 1.5 * k as f64 / 30.0;
        let q = o.q(t);
        assert!((q[0] - 0.1 - 0.6 * t).abs() < 1e-12);
        assert!((q[1] - 0.2 + 0.8 * t).abs() < 1e-12);
    }
}

#[test]
fn energy_drift_is_small_over_unit_time() {
    let h = heisenberg_with_potential();
    let o = flow(&h, &[0.1, -0.2, 0.0, 0.5, 0.3, 1.2], 1.0).unwrap();
    let e0 = o.energies[0];
    assert!(o.energy_drift < 1e-9 * (1.0 + e0.abs()), "drift {}", o.energy_drift);
}

#[test]
fn reversibility_conjugacy() {
    let h = heisenberg_with_potential();
    for k in 0..10 {
        let a = 0.1 * k as f64;
        let x0 = [0.2 * a.sin(), 0.3 - 0.05 * k as f64, a, 0.4, -0.3 + a, 0.7 * a.cos()];
        let x1 = flow(&h, &x0, 0.8).unwrap().state(0.8);
        let flipped: Vec<f64> = x1.iter().enumerate().map(|(i, v)| if i < 3 { *v } else { -v }).collect();
        let back = flow(&h, &flipped, 0.8).unwrap().state(0.8);
        for i in 0..6 {
            let expect = if i < 3 { x0[i] } else { -x0[i] };
            assert!((back[i] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn flow_jacobian_is_symplectic_and_matches_differences() {
    let h = heisenberg_with_potential();
    let x0 = [0.1, 0.2, -0.1, 0.3, 0.5, 0.8];
    let (_, jac) = flow_with_jacobian(&h, &x0, 1.0).unwrap();
    assert!(symplectic_defect(&jac) < 1e-7);
    let eps = 1e-6;
    let mut fd = DMatrix::zeros(6, 6);
    for c in 0..6 {
        let mut xp = x0;
        let mut xm = x0;
        xp[c] += eps;
        xm[c] -= eps;
        let a = flow(&h, &xp, 1.0).unwrap().state(1.0);
        let b = flow(&h, &xm, 1.0).unwrap().state(1.0);
        for r in 0..6 {
            fd[(r, c)] = (a[r] - b[r]) / (2.0 * eps);
        }
    }
    assert!((fd - &jac).norm() < 1e-6 * jac.norm());
}

fn projected_polyline(o: &OrbitSegment, n: usize) -> Vec<Vec<f64>> {
    (0..=n)
        .map(|k| o.q(o.t0() + (o.t1() - o.t0()) * k as f64 / n as f64))
        .collect()
}

#[test]
fn maupertuis_orbits_coincide_as_point_sets() {
    let h = heisenberg().with_potential(parse("0.3*cos(q1)").unwrap(), 1.0);
    let m = maupertuis(&h).unwrap();
    // place the start on the level k
    let q0 = [0.1, -0.2, 0.0];
    let p_dir = [0.4, 0.7, 0.5];
    let kin = h.kinetic_value(&q0, &p_dir).unwrap();
    let s = ((1.0 - h.potential.eval(&q0).unwrap()) / kin).sqrt();
    let x0: Vec<f64> = q0.iter().chain(p_dir.iter().map(|v| v * s).collect::<Vec<_>>().iter()).copied().collect();
    assert!((h.hamiltonian(&q0, &x0[3..]).unwrap() - 1.0).abs() < 1e-14);
    assert!((m.hamiltonian(&q0, &x0[3..]).unwrap() - 1.0).abs() < 1e-14);
    let a = flow(&h, &x0, 1.0).unwrap();
    // matching end time: ds = (k − U) dt
    let n = 2000;
    let mut s_end = 0.0;
    for k in 0..n {
        let t = (k as f64 + 0.5) / n as f64;
        s_end += (1.0 - h.potential.eval(&a.q(t)).unwrap()) / n as f64;
    }
    let b = flow(&m, &x0, s_end).unwrap();
    let d = hausdorff_polyline(&projected_polyline(&a, 4000), &projected_polyline(&b, 4000));
    assert!(d < 1e-6, "Hausdorff distance {d}");
}

#[test]
fn straight_line_is_neat() {
    let o = flow(&planar("0"), &[0.0, 0.0, 1.0, 0.5], 2.0).unwrap();
    let a = annotate_neat_times(&o).neat.unwrap();
    assert!(a.neat.iter().all(|&b| b));
    assert!(a.crossings.is_empty());
}

#[test]
fn figure_eight_crossings_are_not_neat() {
    // x = sin t, y = ½ sin 2t
    let tau = 2.0 * std::f64::consts::PI;
    let o = flow(&planar("0.5*q1^2 + 2*q2^2"), &[0.0, 0.0, 1.0, 1.0], tau).unwrap();
    let q = o.q(1.0);
    assert!((q[0] - 1f64.sin()).abs() < 1e-11 && (q[1] - 0.5 * 2f64.sin()).abs() < 1e-11);
    let a = annotate_neat_times(&o).neat.unwrap();
    let mid = a.times.len() / 2;
    assert!(!a.neat[0] && !a.neat[mid], "samples at 0 and π");
    let quarter = a.times.len() / 4;
    assert!(a.neat[quarter]);
    let near = |t: f64| a.crossings.iter().any(|c| (c - t).abs() < 1e-6);
    assert!(near(std::f64::consts::PI));
    assert!(near(0.0) || near(tau));
    for c in &a.crossings {
        let d = [0.0, std::f64::consts::PI, tau].iter().map(|t| (c - t).abs()).fold(f64::INFINITY, f64::min);
        assert!(d < 1e-6, "spurious crossing at {c}");
    }
}

#[test]
fn circle_once_is_neat_twice_is_not() {
    let h = planar("0.5*q1^2 + 0.5*q2^2");
    let tau = 2.0 * std::f64::consts::PI;
    let once = flow(&h, &[1.0, 0.0, 0.0, 1.0], tau).unwrap();
    assert!((once.period.unwrap() - tau).abs() < 1e-6);
    let a = annotate_neat_times(&once).neat.unwrap();
    assert!(a.neat.iter().all(|&b| b));
    let twice = flow(&h, &[1.0, 0.0, 0.0, 1.0], 2.0 * tau).unwrap();
    assert!((twice.period.unwrap() - tau).abs() < 1e-6);
    let b = annotate_neat_times(&twice).neat.unwrap();
    assert!(b.neat.iter().all(|&x| !x));
}

#[test]
fn csv_dump_has_header_and_rows() {
    let o = flow(&planar("0"), &[0.0, 0.0, 1.0, 0.0], 1.0).unwrap();
    let csv = o.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,q1,q2,p1,p2,H");
    assert_eq!(lines.count(), o.times.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_homogeneity(q in prop::array::uniform3(-1.0f64..1.0), p in prop::array::uniform3(-2.0f64..2.0), lam in 0.01f64..10.0) {
        let h = heisenberg();
        let k1 = h.kinetic_value(&q, &p).unwrap();
        let lp: Vec<f64> = p.iter().map(|v| v * lam).collect();
        let k2 = h.kinetic_value(&q, &lp).unwrap();
        prop_assert!((k2 - lam * lam * k1).abs() <= 1e-10 * (1.0 + k2.abs()));
    }

    #[test]
    fn annihilator_translation_leaves_kinetic_energy(q in prop::array::uniform3(-1.0f64..1.0), p in prop::array::uniform3(-2.0f64..2.0), s in -3.0f64..3.0) {
        let h = heisenberg();
        let eta = h.eta_at(&q).unwrap();
        let p2: Vec<f64> = p.iter().zip(eta.iter()).map(|(a, e)| a + s * e).collect();
        let d = h.kinetic_value(&q, &p).unwrap() - h.kinetic_value(&q, &p2).unwrap();
        prop_assert!(d.abs() < 1e-10);
    }

    #[test]
    fn euler_identity(q in prop::array::uniform3(-1.0f64..1.0), p in prop::array::uniform3(-2.0f64..2.0)) {
        let h = heisenberg_with_potential();
        let j = h.jet(&q, &p, 0).unwrap();
        let k = h.kinetic_value(&q, &p).unwrap();
        prop_assert!((j.hp.dot(&DVector::from_column_slice(&p)) - 2.0 * k).abs() < 1e-12 * (1.0 + k));
    }
}
