use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subrq::curve::CurveJet;
use subrq::formulas::{alpha_of, b5_corner, e_basis, random_base, random_orthogonal, ParamFamily};
use subrq::linalg::sp_defect;
use subrq::mane::*;
use subrq::series::{factorial, MatPoly};

fn random_curve(d: usize, seed: u64) -> CurveJet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_null_direction(d, 5, false, &mut rng).unwrap();
    sample_curve(&n, &SamplerConfig::default(), &mut rng).unwrap()
}

fn diag_curve(d: usize) -> CurveJet {
    let mut a = DMatrix::identity(d, d);
    a[(d - 1, d - 1)] = 0.0;
    CurveJet::constant(a, None, 1.0).unwrap()
}

/// `λ(t) u uᵀ` with `u = (cos t, −sin t)` and `λ = 1 + μ t + 0.3 t²`, to order 6.
fn rotating_rank_one(mu: f64) -> CurveJet {
    let order = 6;
    let mut coeffs = vec![DMatrix::zeros(2, 2); order + 1];
    // cos² = (1 + cos 2t)/2, sin² = (1 − cos 2t)/2, −cos sin = −sin 2t / 2
    for (k, c) in coeffs.iter_mut().enumerate() {
        let f = 2f64.powi(k as i32) / factorial(k);
        let (cos2, sin2) = match k % 4 {
            0 => (f, 0.0),
            1 => (0.0, f),
            2 => (-f, 0.0),
            _ => (0.0, -f),
        };
        let c0 = if k == 0 { 0.5 } else { 0.0 };
        c[(0, 0)] = c0 + 0.5 * cos2;
        c[(1, 1)] = c0 - 0.5 * cos2;
        c[(0, 1)] = -0.5 * sin2;
        c[(1, 0)] = -0.5 * sin2;
    }
    let uu = MatPoly::truncated(coeffs).unwrap();
    let lam = [1.0, mu, 0.3, 0.0, 0.0, 0.0, 0.0];
    CurveJet::new(uu.mul_scalar_series(&lam), None, 0.5).unwrap()
}

#[test]
fn second_and_third_levels_match_closed_forms() {
    let c = random_curve(3, 1);
    let a = c.a_at(0.0);
    let fam = bracket_family(&c, 3, 0.0).unwrap();
    for &(i, j) in &fam.pairs {
        let e = e_basis(3, i, j);
        let b2 = fam.get(2, i, j).unwrap();
        assert!((b2.view((0, 0), (3, 3)) - &a * &e).amax() < 1e-13);
        assert!((b2.view((3, 3), (3, 3)) + &e * &a).amax() < 1e-13);
        assert!(b2.view((0, 3), (3, 3)).amax() < 1e-13 && b2.view((3, 0), (3, 3)).amax() < 1e-13);
        let b3 = fam.get(3, i, j).unwrap();
        assert!((b3.view((0, 3), (3, 3)) + 2.0 * &a * &e * &a).amax() < 1e-12);
    }
}

#[test]
fn members_lie_in_the_symplectic_algebra() {
    for seed in 0..10 {
        let c = random_curve(2 + (seed as usize % 3), seed);
        let fam = bracket_family(&c, 5, 0.0).unwrap();
        for b in fam.iter() {
            assert!(sp_defect(b) < 1e-10 * (1.0 + b.norm()));
        }
    }
}

#[test]
fn rank_is_monotone_in_depth() {
    for seed in 0..10 {
        let c = random_curve(3, 100 + seed);
        let cert = span_test(&bracket_family(&c, 6, 0.0).unwrap()).unwrap();
        assert!(cert.rank_by_depth.windows(2).all(|w| w[0] <= w[1]), "{:?}", cert.rank_by_depth);
        assert_eq!(cert.rank_by_depth[0], 6);
    }
}

#[test]
fn rotating_null_direction_is_bracket_generating() {
    for mu in [0.37, 1.3, -0.8] {
        let cert = span_test(&bracket_family(&rotating_rank_one(mu), 5, 0.0).unwrap()).unwrap();
        assert_eq!(cert.rank, 10, "mu = {mu}: {:?}", cert.singular_values);
        assert!(cert.pass);
    }
}

#[test]
fn constant_degenerate_curve_has_rank_six() {
    let cert = span_test(&bracket_family(&diag_curve(2), 5, 0.0).unwrap()).unwrap();
    assert_eq!(cert.rank, 6);
    assert!(!cert.pass);
    // [0 E₁₁; 0 0] is in the span, [0 E₂₂; 0 0] is not
    let mut up = DMatrix::zeros(4, 4);
    up.view_mut((0, 2), (2, 2)).copy_from(&e_basis(2, 0, 0));
    assert!(cert.witness(&up).unwrap().1 < 1e-12);
    let mut off = DMatrix::zeros(4, 4);
    off.view_mut((0, 2), (2, 2)).copy_from(&e_basis(2, 1, 1));
    assert!(cert.witness(&off).unwrap().1 > 0.5);
}

#[test]
fn first_level_alone_spans_the_lower_block() {
    for d in 1..5 {
        let cert = span_test(&bracket_family(&random_curve(d.max(2), d as u64), 1, 0.0).unwrap()).unwrap();
        let d = d.max(2);
        assert_eq!(cert.rank, d * (d + 1) / 2);
    }
}

fn plane_rotation(d: usize, angle: f64) -> DMatrix<f64> {
    let mut g = DMatrix::identity(d, d);
    g[(0, 0)] = angle.cos();
    g[(0, 1)] = -angle.sin();
    g[(1, 0)] = angle.sin();
    g[(1, 1)] = angle.cos();
    g
}

#[test]
fn conjugation_preserves_the_verdict() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for k in 0..20 {
        // mix generic and flat null directions so both verdicts occur
        let n = random_null_direction(3, 5, k % 4 == 3, &mut rng).unwrap();
        let c = sample_curve(&n, &SamplerConfig::default(), &mut rng).unwrap();
        let g = plane_rotation(3, rng.gen_range(0.0..std::f64::consts::TAU));
        let gc = conjugate_family(&c, &g).unwrap();
        assert!((gc.a_at(0.0) - c.a_at(0.0)).amax() < 1e-14);
        assert!((gc.n_at(0.0).unwrap() - c.n_at(0.0).unwrap()).amax() < 1e-14);
        let a = span_test(&bracket_family(&c, 5, 0.0).unwrap()).unwrap();
        let b = span_test(&bracket_family(&gc, 5, 0.0).unwrap()).unwrap();
        assert_eq!(a.pass, b.pass);
        assert_eq!(a.rank, b.rank);
    }
}

#[test]
fn conjugation_edge_cases() {
    let c = random_curve(3, 5);
    let same = conjugate_family(&c, &DMatrix::identity(3, 3)).unwrap();
    assert_eq!(same.a, c.a);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let moved = random_orthogonal(3, &mut rng);
    assert!(conjugate_family(&c, &moved).is_err());
    assert!(conjugate_family(&c, &(2.0 * DMatrix::identity(3, 3))).is_err());
}

#[test]
fn b5_corner_agrees_with_the_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for d in 2..5 {
        for _ in 0..5 {
            let (p, lambda0) = random_base(d, 5, false, &mut rng).unwrap();
            let g_bar = random_orthogonal(d - 1, &mut rng);
            let mu = DVector::from_fn(d - 1, |_, _| rng.gen_range(-2.0..2.0));
            let alpha = alpha_of(&g_bar, &mu, &p, &lambda0).unwrap();
            let fam = ParamFamily { g_bar, mu, alpha, p, lambda0 };
            let c = CurveJet::new(fam.a_series().unwrap(), None, 0.1).unwrap();
            let v = fam.v().unwrap();
            let brackets = bracket_family(&c, 5, 0.0).unwrap();
            for i in 0..d - 1 {
                let b5 = brackets.get(5, i, i).unwrap();
                let corner = b5[(d - 1, 2 * d - 1)];
                assert!((corner - b5_corner(&v, i)).abs() < 1e-10 * (1.0 + corner.abs()), "{corner} vs {}", b5_corner(&v, i));
            }
        }
    }
}

#[test]
fn generic_scan_passes_and_flat_direction_degrades() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = SamplerConfig::default();
    let n = random_null_direction(2, cfg.order, false, &mut rng).unwrap();
    let generic = genericity_scan(&n, 1000, &cfg, 4);
    assert_eq!(generic.samples, 1000);
    assert!(generic.pass_rate >= 0.99, "pass rate {}", generic.pass_rate);
    let flat = random_null_direction(2, cfg.order, true, &mut rng).unwrap();
    let degraded = genericity_scan(&flat, 200, &cfg, 4);
    assert!(degraded.pass_rate < generic.pass_rate, "{} vs {}", degraded.pass_rate, generic.pass_rate);
    assert!(!degraded.witnesses.is_empty());
    assert_eq!(degraded.histogram.iter().map(|b| b.count).sum::<usize>(), 200);
}

#[test]
fn scan_is_independent_of_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = SamplerConfig::default();
    let n = random_null_direction(3, cfg.order, false, &mut rng).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| genericity_scan(&n, 40, &cfg, 12))
    };
    let a = serde_json::to_string(&run(1)).unwrap();
    let b = serde_json::to_string(&run(4)).unwrap();
    assert_eq!(a, b);
}
