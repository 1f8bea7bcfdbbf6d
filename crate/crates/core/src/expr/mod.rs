//! Symbolic scalar expressions in chart coordinates `q1 … qn`.
//!
//! The grammar is deliberately small: decimal literals, the coordinates,
//! `+ - * /`, integer powers written `^k`, and the functions `sin`, `cos`,
//! `exp`, `sqrt`. Precedence from loosest to tightest is `+ -`, `* /`, unary
//! minus, `^`. Expressions evaluate to Taylor jets of order at most three.

mod jet;
mod parse;

pub use jet::{compose_jets, Jet, MAX_ORDER};
pub use parse::{parse, parse_in_dim};

use crate::error::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

/// Expression tree. `Var(i)` is the zero-based coordinate `q{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn num(c: f64) -> Expr {
        Expr::Num(c)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    /// One past the largest coordinate index that occurs.
    pub fn min_dim(&self) -> usize {
        match self {
            Expr::Num(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.min_dim(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.min_dim().max(b.min_dim())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(c) if *c == 0.0)
    }

    /// Plain evaluation; domain violations are errors, never NaN.
    pub fn eval(&self, q: &[f64]) -> Result<f64> {
        let v = match self {
            Expr::Num(c) => *c,
            Expr::Var(i) => *q.get(*i).ok_or_else(|| {
                Error::Dimension(format!("q{} used with a {}-dimensional point", i + 1, q.len()))
            })?,
            Expr::Neg(a) => -a.eval(q)?,
            Expr::Add(a, b) => a.eval(q)? + b.eval(q)?,
            Expr::Sub(a, b) => a.eval(q)? - b.eval(q)?,
            Expr::Mul(a, b) => a.eval(q)? * b.eval(q)?,
            Expr::Div(a, b) => {
                let den = b.eval(q)?;
                if den == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                a.eval(q)? / den
            }
            Expr::Pow(a, e) => {
                let x = a.eval(q)?;
                if x == 0.0 && *e < 0 {
                    return Err(Error::Domain(format!("zero raised to negative power {e}")));
                }
                x.powi(*e)
            }
            Expr::Call(f, a) => {
                let x = a.eval(q)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(Error::Domain(format!("sqrt of negative value {x}")));
                        }
                        x.sqrt()
                    }
                }
            }
        };
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite value in `{self}`")));
        }
        Ok(v)
    }

    /// Value and derivatives up to `order` (at most three) at `q`.
    pub fn eval_jet(&self, q: &[f64], order: usize) -> Result<Jet> {
        if order > MAX_ORDER {
            return Err(Error::JetOrder {
                need: order,
                have: MAX_ORDER,
            });
        }
        let n = q.len();
        let leaf = |i: usize| -> Result<Jet> {
            if i >= n {
                return Err(Error::Dimension(format!(
                    "q{} used with a {n}-dimensional point",
                    i + 1
                )));
            }
            Ok(Jet::variable(n, order, i, q[i]))
        };
        let j = self.jet_rec(&leaf, n, order)?;
        if !j.is_finite() {
            return Err(Error::Domain(format!("non-finite derivative of `{self}`")));
        }
        Ok(j)
    }

    /// Evaluates with `q_i` replaced by the jet `args[i]`; all jets must share
    /// their variables and order. This is composition by the chain rule
    /// without forming the outer jet.
    pub fn eval_on_jets(&self, args: &[Jet]) -> Result<Jet> {
        let (n, order) = args.first().map(|j| (j.nvars, j.order)).unwrap_or((0, 0));
        let leaf = |i: usize| -> Result<Jet> {
            args.get(i)
                .cloned()
                .ok_or_else(|| Error::Dimension(format!("no jet for q{}", i + 1)))
        };
        let j = self.jet_rec(&leaf, n, order)?;
        if !j.is_finite() {
            return Err(Error::Domain(format!("non-finite derivative of `{self}`")));
        }
        Ok(j)
    }

    fn jet_rec(&self, leaf: &dyn Fn(usize) -> Result<Jet>, n: usize, order: usize) -> Result<Jet> {
        let rec = |e: &Expr| e.jet_rec(leaf, n, order);
        Ok(match self {
            Expr::Num(c) => Jet::constant(n, order, *c),
            Expr::Var(i) => leaf(*i)?,
            Expr::Neg(a) => rec(a)?.neg(),
            Expr::Add(a, b) => rec(a)?.add(&rec(b)?),
            Expr::Sub(a, b) => rec(a)?.sub(&rec(b)?),
            Expr::Mul(a, b) => {
                // constant factors are common in frames; skip the full product
                if let Expr::Num(c) = **a {
                    rec(b)?.scale(c)
                } else if let Expr::Num(c) = **b {
                    rec(a)?.scale(c)
                } else {
                    rec(a)?.mul(&rec(b)?)
                }
            }
            Expr::Div(a, b) => {
                if let Expr::Num(c) = **b {
                    if c == 0.0 {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    rec(a)?.scale(1.0 / c)
                } else {
                    rec(a)?.div(&rec(b)?)?
                }
            }
            Expr::Pow(a, e) => rec(a)?.powi(*e)?,
            Expr::Call(f, a) => {
                let x = rec(a)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp()?,
                    Func::Sqrt => x.sqrt()?,
                }
            }
        })
    }

    /// Replaces every `q_i` by `args[i]`.
    pub fn substitute(&self, args: &[Expr]) -> Result<Expr> {
        Ok(match self {
            Expr::Num(c) => Expr::Num(*c),
            Expr::Var(i) => args
                .get(*i)
                .cloned()
                .ok_or_else(|| Error::Dimension(format!("no substitute for q{}", i + 1)))?,
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(args)?)),
            Expr::Add(a, b) => Expr::Add(Box::new(a.substitute(args)?), Box::new(b.substitute(args)?)),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.substitute(args)?), Box::new(b.substitute(args)?)),
            Expr::Mul(a, b) => Expr::Mul(Box::new(a.substitute(args)?), Box::new(b.substitute(args)?)),
            Expr::Div(a, b) => Expr::Div(Box::new(a.substitute(args)?), Box::new(b.substitute(args)?)),
            Expr::Pow(a, e) => Expr::Pow(Box::new(a.substitute(args)?), *e),
            Expr::Call(f, a) => Expr::Call(*f, Box::new(a.substitute(args)?)),
        })
    }

    /// Symbolic partial derivative in `q_i`, with constant folding so that
    /// repeated differentiation stays small.
    pub fn diff(&self, i: usize) -> Expr {
        match self {
            Expr::Num(_) => Expr::Num(0.0),
            Expr::Var(j) => Expr::Num(if *j == i { 1.0 } else { 0.0 }),
            Expr::Neg(a) => s_neg(a.diff(i)),
            Expr::Add(a, b) => s_add(a.diff(i), b.diff(i)),
            Expr::Sub(a, b) => s_sub(a.diff(i), b.diff(i)),
            Expr::Mul(a, b) => s_add(
                s_mul(a.diff(i), (**b).clone()),
                s_mul((**a).clone(), b.diff(i)),
            ),
            Expr::Div(a, b) => {
                // (a'b − ab') / b²
                let num = s_sub(
                    s_mul(a.diff(i), (**b).clone()),
                    s_mul((**a).clone(), b.diff(i)),
                );
                if num.is_zero() {
                    Expr::Num(0.0)
                } else {
                    Expr::Div(Box::new(num), Box::new(s_pow((**b).clone(), 2)))
                }
            }
            Expr::Pow(a, e) => {
                if *e == 0 {
                    return Expr::Num(0.0);
                }
                s_mul(s_mul(Expr::Num(*e as f64), s_pow((**a).clone(), e - 1)), a.diff(i))
            }
            Expr::Call(f, a) => {
                let inner = a.diff(i);
                if inner.is_zero() {
                    return Expr::Num(0.0);
                }
                let outer = match f {
                    Func::Sin => Expr::Call(Func::Cos, a.clone()),
                    Func::Cos => s_neg(Expr::Call(Func::Sin, a.clone())),
                    Func::Exp => self.clone(),
                    Func::Sqrt => Expr::Div(
                        Box::new(Expr::Num(0.5)),
                        Box::new(self.clone()),
                    ),
                };
                s_mul(outer, inner)
            }
        }
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

fn s_neg(a: Expr) -> Expr {
    match a {
        Expr::Num(c) => Expr::Num(-c),
        Expr::Neg(x) => *x,
        a => Expr::Neg(Box::new(a)),
    }
}

fn s_add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        (a, b) if a.is_zero() => b,
        (a, b) if b.is_zero() => a,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn s_sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        (a, b) if b.is_zero() => a,
        (a, b) if a.is_zero() => s_neg(b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn s_mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        (a, b) if a.is_zero() || b.is_zero() => Expr::Num(0.0),
        (Expr::Num(1.0), b) => b,
        (a, Expr::Num(1.0)) => a,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn s_pow(a: Expr, e: i32) -> Expr {
    match (a, e) {
        (_, 0) => Expr::Num(1.0),
        (a, 1) => a,
        (Expr::Num(c), e) => Expr::Num(c.powi(e)),
        (a, e) => Expr::Pow(Box::new(a), e),
    }
}

// Convenience arithmetic for building expressions in code.
macro_rules! binop {
    ($tr:ident, $m:ident, $v:ident) => {
        impl std::ops::$tr for Expr {
            type Output = Expr;
            fn $m(self, o: Expr) -> Expr {
                Expr::$v(Box::new(self), Box::new(o))
            }
        }
    };
}
binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Prints with the minimal parentheses needed to re-parse to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var(i) => write!(f, "q{}", i + 1),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_operand(f, a, a.prec() < 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let p = self.prec();
                let op = match self {
                    Expr::Add(..) => " + ",
                    Expr::Sub(..) => " - ",
                    Expr::Mul(..) => "*",
                    _ => "/",
                };
                write_operand(f, a, a.prec() < p)?;
                write!(f, "{op}")?;
                write_operand(f, b, b.prec() <= p)
            }
            Expr::Pow(a, e) => {
                write_operand(f, a, a.prec() < 4)?;
                if *e < 0 {
                    write!(f, "^({e})")
                } else {
                    write!(f, "^{e}")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heisenberg_component() {
        let e = parse("-q2/2").unwrap();
        assert_eq!(e.eval(&[0.3, 0.8, 0.0]).unwrap(), -0.4);
    }

    #[test]
    fn precedence() {
        assert_eq!(parse("-q1^2").unwrap().eval(&[3.0]).unwrap(), -9.0);
        assert_eq!(parse("2*q1^2 + 1").unwrap().eval(&[3.0]).unwrap(), 19.0);
        assert_eq!(parse("1 - 2 - 3").unwrap().eval(&[]).unwrap(), -4.0);
        assert_eq!(parse("8/4/2").unwrap().eval(&[]).unwrap(), 1.0);
        assert_eq!(parse("q1^(-2)").unwrap().eval(&[2.0]).unwrap(), 0.25);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(parse("1/q1").unwrap().eval(&[0.0]), Err(Error::Domain(_))));
        assert!(matches!(
            parse("sqrt(q1)").unwrap().eval_jet(&[-1.0], 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn printing_round_trips() {
        for s in ["-q2/2", "q1 - (q2 - q3)", "(-q1)^2", "--q1", "2*-q1", "sin(q1*q2)^3", "1e-7*q1", "q1^(-1)"] {
            let e = parse(s).unwrap();
            assert_eq!(parse(&e.to_string()).unwrap(), e, "{s} -> {e}");
        }
    }

    #[test]
    fn substitution_evaluates_as_composition() {
        let f = parse("q1*q2 + sin(q1)").unwrap();
        let g = vec![parse("q1^2").unwrap(), parse("q1 + q2").unwrap()];
        let h = f.substitute(&g).unwrap();
        let q = [0.7, -0.2];
        let inner: Vec<f64> = g.iter().map(|e| e.eval(&q).unwrap()).collect();
        assert!((h.eval(&q).unwrap() - f.eval(&inner).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn symbolic_derivative_matches_jet() {
        let e = parse("sin(q1*q2)^3/(1 + q2^2) - sqrt(2 + q1)*exp(-q2) + cos(q1)").unwrap();
        let q = [0.4, -0.7];
        let j = e.eval_jet(&q, 2).unwrap();
        for i in 0..2 {
            let di = e.diff(i);
            assert!((di.eval(&q).unwrap() - j.g[i]).abs() < 1e-13);
            for k in 0..2 {
                assert!((di.diff(k).eval(&q).unwrap() - j.hess(i, k)).abs() < 1e-12);
            }
        }
        assert_eq!(parse("3*q1").unwrap().diff(1), Expr::Num(0.0));
    }

    #[test]
    fn jets_as_arguments_compose() {
        let outer = parse("q1*sin(q2) + q2^3/(2 + q1^2)").unwrap();
        let inner = [parse("q1 + 0.5*q2^2").unwrap(), parse("cos(q1*q2)").unwrap()];
        let z = [0.3, -0.2];
        let ij: Vec<Jet> = inner.iter().map(|e| e.eval_jet(&z, 3).unwrap()).collect();
        let pt: Vec<f64> = ij.iter().map(|j| j.v).collect();
        let direct = outer.eval_on_jets(&ij).unwrap();
        let composed = compose_jets(&outer.eval_jet(&pt, 3).unwrap(), &ij).unwrap();
        for (a, b) in direct.t.iter().zip(&composed.t) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((direct.v - composed.v).abs() < 1e-15);
    }
}
