#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use proptest::prelude::*;
use subrq::expr::{compose_jets, parse, Expr};

/// Source text of a random expression in `q1..q3` that is smooth on the box
/// `[-1, 1]³` (no division, `sqrt` only of positive arguments).
fn smooth_src() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (1usize..=3).prop_map(|i| format!("q{i}")),
        (-30i32..30).prop_map(|k| format!("{}", k as f64 / 10.0)),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) + ({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) - ({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})*({b})")),
            (inner.clone(), 0i32..4).prop_map(|(a, k)| format!("({a})^{k}")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            inner.clone().prop_map(|a| format!("exp(0.1*({a}))")),
            inner.clone().prop_map(|a| format!("sqrt(2 + sin({a}))")),
            inner.clone().prop_map(|a| format!("-({a})")),
        ]
    })
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0f64..1.0)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Monomials of degree ≤ 4 in three variables.
fn monomials() -> Vec<[i32; 3]> {
    let mut out = vec![];
    for a in 0..=4 {
        for b in 0..=4 - a {
            for c in 0..=4 - a - b {
                out.push([a, b, c]);
            }
        }
    }
    out
}

fn mono_src(e: &[i32; 3]) -> String {
    (0..3)
        .filter(|&i| e[i] > 0)
        .map(|i| format!("q{}^{}", i + 1, e[i]))
        .collect::<Vec<_>>()
        .join("*")
}

/// `∂^k x^e / ∂x^k`.
fn dpow(x: f64, e: i32, k: i32) -> f64 {
    if k > e {
        return 0.0;
    }
    let mut c = 1.0;
    for j in 0..k {
        c *= (e - j) as f64;
    }
    c * x.powi(e - k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn printing_then_parsing_is_structural_identity(src in smooth_src()) {
        let e = parse(&src).unwrap();
        let again = parse(&e.to_string()).unwrap();
        prop_assert_eq!(again, e);
    }

    #[test]
    fn gradient_matches_central_differences(src in smooth_src(), q in point()) {
        let e = parse(&src).unwrap();
        let j = e.eval_jet(&q, 1).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let (mut a, mut b) = (q, q);
            a[i] += h;
            b[i] -= h;
            let fd = (e.eval(&a).unwrap() - e.eval(&b).unwrap()) / (2.0 * h);
            let scale = 1.0 + j.g.iter().fold(0.0f64, |m, v| m.max(v.abs())) + j.v.abs();
            prop_assert!((fd - j.g[i]).abs() / scale < 1e-7, "{} at {:?}: {} vs {}", src, q, fd, j.g[i]);
        }
    }

    #[test]
    fn higher_tensors_are_symmetric(src in smooth_src(), q in point()) {
        let j = parse(&src).unwrap().eval_jet(&q, 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                prop_assert!(rel(j.hess(a, b), j.hess(b, a)) < 1e-13);
                for c in 0..3 {
                    let t = j.third(a, b, c);
                    prop_assert!(rel(t, j.third(b, a, c)) < 1e-12 && rel(t, j.third(c, b, a)) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn polynomial_jets_match_hand_expansion(
        coeffs in prop::collection::vec(-2.0f64..2.0, 35),
        q in point(),
    ) {
        let monos = monomials();
        let src = monos
            .iter()
            .zip(&coeffs)
            .map(|(m, c)| if m.iter().all(|&e| e == 0) { format!("({c})") } else { format!("({c})*{}", mono_src(m)) })
            .collect::<Vec<_>>()
            .join(" + ");
        let j = parse(&src).unwrap().eval_jet(&q, 2).unwrap();
        let mut v = 0.0;
        let mut g = [0.0; 3];
        let mut hs = [[0.0; 3]; 3];
        for (m, c) in monos.iter().zip(&coeffs) {
            v += c * (0..3).map(|i| q[i].powi(m[i])).product::<f64>();
            for a in 0..3 {
                g[a] += c * (0..3).map(|i| dpow(q[i], m[i], (i == a) as i32)).product::<f64>();
                for b in 0..3 {
                    hs[a][b] += c * (0..3)
                        .map(|i| dpow(q[i], m[i], (i == a) as i32 + (i == b) as i32))
                        .product::<f64>();
                }
            }
        }
        prop_assert!(rel(j.v, v) < 1e-12);
        for a in 0..3 {
            prop_assert!(rel(j.g[a], g[a]) < 1e-12);
            for b in 0..3 {
                prop_assert!(rel(j.hess(a, b), hs[a][b]) < 1e-12);
            }
        }
    }

    #[test]
    fn substitution_agrees_with_jet_composition(
        outer in smooth_src(),
        inner in prop::collection::vec(smooth_src(), 3),
        q in point(),
    ) {
        let f = parse(&outer).unwrap();
        let gs: Vec<Expr> = inner.iter().map(|s| parse(s).unwrap()).collect();
        let direct = f.substitute(&gs).unwrap().eval_jet(&q, 3).unwrap();
        let parts: Vec<_> = gs.iter().map(|g| g.eval_jet(&q, 3).unwrap()).collect();
        let at: Vec<f64> = parts.iter().map(|p| p.v).collect();
        let composed = compose_jets(&f.eval_jet(&at, 3).unwrap(), &parts).unwrap();
        let scale = 1.0 + direct.t.iter().chain(&direct.h).chain(&direct.g).fold(direct.v.abs(), |m, v| m.max(v.abs()));
        prop_assert!((direct.v - composed.v).abs() / scale < 1e-10);
        for (a, b) in direct.g.iter().zip(&composed.g).chain(direct.h.iter().zip(&composed.h)).chain(direct.t.iter().zip(&composed.t)) {
            prop_assert!((a - b).abs() / scale < 1e-10);
        }
    }

    #[test]
    fn symbolic_derivative_agrees_with_jets(src in smooth_src(), q in point()) {
        let e = parse(&src).unwrap();
        let j = e.eval_jet(&q, 1).unwrap();
        for i in 0..3 {
            let d = e.diff(i).eval(&q).unwrap();
            prop_assert!(rel(d, j.g[i]) < 1e-11);
        }
    }
}

#[test]
fn documented_examples() {
    let j = parse("q1*q2").unwrap().eval_jet(&[3.0, 5.0], 2).unwrap();
    assert_eq!((j.v, j.g.clone(), j.h.clone()), (15.0, vec![5.0, 3.0], vec![0.0, 1.0, 1.0, 0.0]));
    let j = parse("sin(q1)").unwrap().eval_jet(&[0.0], 2).unwrap();
    assert_eq!((j.v, j.g[0], j.h[0]), (0.0, 1.0, 0.0));
    let err = parse("q1/").unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
}
