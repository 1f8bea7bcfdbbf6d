//! Fibered symplectomorphisms of `T*ℝⁿ`: the homogeneous lift
//! `Ψ_φ(q, p) = (φ(q), Dφ(q)^{-T} p)` of a diffeomorphism and the vertical
//! shift `Ψ^g(q, p) = (q, p + dg(q))`, plus finite compositions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{Expr, Jet};
use crate::linalg::j_matrix;

/// Order-two jets of the components of a map at a point.
pub type MapJets = Arc<dyn Fn(&[f64]) -> Result<Vec<Jet>> + Send + Sync>;
/// Order-two jet of a scalar function at a point.
pub type ScalarJet = Arc<dyn Fn(&[f64]) -> Result<Jet> + Send + Sync>;

#[derive(Clone)]
pub enum SymplectoStep {
    Homogeneous(MapJets),
    Vertical(ScalarJet),
}

/// Steps are applied first to last.
#[derive(Clone)]
pub struct FiberedSymplecto {
    pub dim: usize,
    steps: Vec<SymplectoStep>,
}

impl fmt::Debug for FiberedSymplecto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kinds: Vec<&str> = self
            .steps
            .iter()
            .map(|s| match s {
                SymplectoStep::Homogeneous(_) => "homogeneous",
                SymplectoStep::Vertical(_) => "vertical",
            })
            .collect();
        f.debug_struct("FiberedSymplecto")
            .field("dim", &self.dim)
            .field("steps", &kinds)
            .finish()
    }
}

fn check_jets(js: &[Jet], n: usize) -> Result<()> {
    if js.len() != n || js.iter().any(|j| j.order < 2 || j.nvars != n) {
        return Err(Error::Dimension(format!("map jets must be {n} order-two jets in {n} variables")));
    }
    Ok(())
}

impl FiberedSymplecto {
    pub fn identity(dim: usize) -> Self {
        FiberedSymplecto { dim, steps: vec![] }
    }

    pub fn homogeneous_fn(dim: usize, f: impl Fn(&[f64]) -> Result<Vec<Jet>> + Send + Sync + 'static) -> Self {
        FiberedSymplecto {
            dim,
            steps: vec![SymplectoStep::Homogeneous(Arc::new(f))],
        }
    }

    pub fn vertical_fn(dim: usize, g: impl Fn(&[f64]) -> Result<Jet> + Send + Sync + 'static) -> Self {
        FiberedSymplecto {
            dim,
            steps: vec![SymplectoStep::Vertical(Arc::new(g))],
        }
    }

    /// Lift of the diffeomorphism with components `map`.
    pub fn homogeneous(map: Vec<Expr>) -> Self {
        let n = map.len();
        Self::homogeneous_fn(n, move |q| map.iter().map(|e| e.eval_jet(q, 2)).collect())
    }

    /// Lift of `q ↦ m q + shift`.
    pub fn affine(m: DMatrix<f64>, shift: DVector<f64>) -> Self {
        let n = m.nrows();
        Self::homogeneous_fn(n, move |q| {
            let qv = DVector::from_column_slice(q);
            let y = &m * qv + &shift;
            Ok((0..n)
                .map(|i| {
                    let mut j = Jet::constant(n, 2, y[i]);
                    for k in 0..n {
                        j.g[k] = m[(i, k)];
                    }
                    j
                })
                .collect())
        })
    }

    pub fn vertical(dim: usize, g: Expr) -> Self {
        Self::vertical_fn(dim, move |q| g.eval_jet(q, 2))
    }

    /// `other ∘ self`.
    pub fn then(mut self, other: &FiberedSymplecto) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::Dimension("composing maps of different dimensions".into()));
        }
        self.steps.extend(other.steps.iter().cloned());
        Ok(self)
    }

    pub fn steps(&self) -> &[SymplectoStep] {
        &self.steps
    }

    pub fn apply(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (q, p, _) = self.run(q, p, false)?;
        Ok((q, p))
    }

    /// Image together with the Jacobian of the phase map, `2n × 2n`.
    pub fn differential(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
        let (q, p, l) = self.run(q, p, true)?;
        Ok((q, p, l.expect("requested")))
    }

    /// `‖LᵀJL − J‖ / max(1, ‖L‖²)` at a phase point.
    pub fn symplectic_defect(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let (_, _, l) = self.differential(q, p)?;
        let j = j_matrix(self.dim);
        Ok((l.transpose() * &j * &l - j).norm() / l.norm_squared().max(1.0))
    }

    fn run(&self, q: &[f64], p: &[f64], with_jac: bool) -> Result<(Vec<f64>, Vec<f64>, Option<DMatrix<f64>>)> {
        let n = self.dim;
        if q.len() != n || p.len() != n {
            return Err(Error::Dimension(format!("phase point must have {n} + {n} entries")));
        }
        let mut q = q.to_vec();
        let mut p = DVector::from_column_slice(p);
        let mut total = if with_jac { Some(DMatrix::identity(2 * n, 2 * n)) } else { None };
        for step in &self.steps {
            let mut l = DMatrix::identity(2 * n, 2 * n);
            match step {
                SymplectoStep::Homogeneous(f) => {
                    let js = f(&q)?;
                    check_jets(&js, n)?;
                    let dphi = DMatrix::from_fn(n, n, |a, b| js[a].g[b]);
                    let lu = dphi.transpose().lu();
                    let pn = lu
                        .solve(&p)
                        .ok_or_else(|| Error::Numerical("map is not a local diffeomorphism".into()))?;
                    if with_jac {
                        let inv_t = lu.try_inverse().expect("solvable above");
                        l.view_mut((0, 0), (n, n)).copy_from(&dphi);
                        l.view_mut((n, n), (n, n)).copy_from(&inv_t);
                        // ∂P/∂q_c = −Dφ^{-T} (∂_c Dφ)ᵀ P
                        for c in 0..n {
                            let w = DVector::from_fn(n, |b, _| (0..n).map(|a| js[a].hess(b, c) * pn[a]).sum());
                            let col = -(&inv_t * w);
                            l.view_mut((n, c), (n, 1)).copy_from(&col);
                        }
                    }
                    q = js.iter().map(|j| j.v).collect();
                    p = pn;
                }
                SymplectoStep::Vertical(g) => {
                    let j = g(&q)?;
                    if j.order < 2 || j.nvars != n {
                        return Err(Error::Dimension(format!("generating function needs an order-two jet in {n} variables")));
                    }
                    for a in 0..n {
                        p[a] += j.g[a];
                    }
                    if with_jac {
                        l.view_mut((n, 0), (n, n)).copy_from(&DMatrix::from_fn(n, n, |a, b| j.hess(a, b)));
                    }
                }
            }
            if let Some(t) = total.as_mut() {
                *t = &l * &*t;
            }
        }
        Ok((q, p.iter().copied().collect(), total))
    }
}
