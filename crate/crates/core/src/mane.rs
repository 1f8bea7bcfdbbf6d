//! Bracket-generating test for controllability of the linearized control
//! system `Ẋ = [0 A; 0 0] X + Σ w_ij [0 0; E_ij 0] X`.
//!
//! `B¹_ij = [0 0; E_ij 0]` and `B^{ℓ+1} = [Y, B^ℓ] + Ḃ^ℓ` with `Y = [0 A; 0 0]`,
//! computed on matrix polynomials so no numerical differentiation occurs.
//! If the `B^ℓ_ij(t₀)` span sp(2d) the end-point map is a submersion.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::curve::{CurveJet, CurveJetRecord};
use crate::error::{Error, Result};
use crate::formulas::{e_basis, normalize_series, orthogonal_frame_series};
use crate::linalg::{rank_rel, singular_values, sp_coords, sp_defect, sp_dim};
use crate::series::MatPoly;

/// Relative singular-value cutoff for the span rank.
pub const SPAN_RANK_TOL: f64 = 1e-9;

/// Members `B^ℓ_ij(t₀)` for `ℓ = 1..=depth`, pairs `i ≤ j`.
#[derive(Debug, Clone)]
pub struct BracketFamily {
    pub d: usize,
    pub depth: usize,
    pub t0: f64,
    pub pairs: Vec<(usize, usize)>,
    /// `members[ℓ - 1][k]` belongs to `pairs[k]`.
    pub members: Vec<Vec<DMatrix<f64>>>,
}

impl BracketFamily {
    pub fn level(&self, l: usize) -> &[DMatrix<f64>] {
        &self.members[l - 1]
    }

    pub fn get(&self, l: usize, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        let k = self.pairs.iter().position(|&p| p == (i.min(j), i.max(j)))?;
        self.members.get(l - 1).map(|m| &m[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.members.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn upper_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
}

/// `[0 a; 0 0]` coefficient-wise.
pub fn drift(a: &MatPoly) -> MatPoly {
    let d = a.shape().0;
    let coeffs: Vec<DMatrix<f64>> = a
        .coeffs
        .iter()
        .map(|c| {
            let mut m = DMatrix::zeros(2 * d, 2 * d);
            m.view_mut((0, d), (d, d)).copy_from(c);
            m
        })
        .collect();
    if coeffs.is_empty() {
        return MatPoly::zeros(2 * d, 2 * d);
    }
    let known = a.known;
    let mut y = MatPoly::exact(coeffs).expect("non-empty");
    y.known = known;
    y
}

/// `[0 0; E 0]`.
pub fn lower_generator(d: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(2 * d, 2 * d);
    b.view_mut((d, 0), (d, d)).copy_from(&e_basis(d, i, j));
    b
}

pub fn bracket_family(a: &CurveJet, depth: usize, t0: f64) -> Result<BracketFamily> {
    if depth == 0 {
        return Err(Error::Invalid("bracket depth must be at least 1".into()));
    }
    let d = a.d();
    let centred = if t0 == 0.0 {
        a.a.clone()
    } else if a.a.known.is_none() {
        a.a.shift(t0)
    } else {
        return Err(Error::Invalid("re-centring a truncated jet is not supported".into()));
    };
    // B^ℓ needs derivatives of A up to order ℓ − 2
    let need = depth.saturating_sub(1).max(1);
    if let Some(len) = centred.known {
        if depth >= 2 && len < need {
            return Err(Error::JetOrder {
                need: need - 1,
                have: len.saturating_sub(1),
            });
        }
    }
    let coeffs: Vec<DMatrix<f64>> = (0..need).map(|k| centred.coeff(k)).collect::<Result<_>>()?;
    let y = drift(&MatPoly::truncated(coeffs)?);
    let pairs = upper_pairs(d);
    let mut members = Vec::with_capacity(depth);
    let mut current: Vec<MatPoly> = pairs
        .iter()
        .map(|&(i, j)| MatPoly::constant(lower_generator(d, i, j)))
        .collect();
    for l in 1..=depth {
        members.push(current.iter().map(|b| b.coeff(0)).collect::<Result<Vec<_>>>()?);
        if l < depth {
            current = current.iter().map(|b| y.commutator(b).add(&b.deriv())).collect();
        }
    }
    Ok(BracketFamily {
        d,
        depth,
        t0,
        pairs,
        members,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpanCertificate {
    pub d: usize,
    pub depth: usize,
    pub t0: f64,
    pub target: usize,
    pub rank: usize,
    /// Rank of `B¹..B^ℓ` for each `ℓ`.
    pub rank_by_depth: Vec<usize>,
    pub singular_values: Vec<f64>,
    /// `σ_target / σ_max`, zero when there are fewer singular values.
    pub sigma_ratio: f64,
    pub pass: bool,
    /// Columns are the sp(2d) coordinates of the members.
    #[serde(skip)]
    pub coords: DMatrix<f64>,
}

impl SpanCertificate {
    /// Least-squares coefficients expressing `m` in the family, with the
    /// residual norm. A small residual witnesses containment.
    pub fn witness(&self, m: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
        if m.nrows() != 2 * self.d || sp_defect(m) > 1e-9 * (1.0 + m.norm()) {
            return Err(Error::Invalid("target is not in sp(2d)".into()));
        }
        let b = sp_coords(m);
        let svd = self.coords.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let x = svd
            .solve(&b, SPAN_RANK_TOL * smax)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let r = (&self.coords * &x - b).norm();
        Ok((x, r))
    }
}

fn ratio_at(sv: &[f64], target: usize) -> f64 {
    match (sv.first(), sv.get(target.saturating_sub(1))) {
        (Some(&s0), Some(&st)) if s0 > 0.0 => st / s0,
        _ => 0.0,
    }
}

pub fn span_test(fam: &BracketFamily) -> Result<SpanCertificate> {
    if fam.is_empty() {
        return Err(Error::Invalid("empty bracket family".into()));
    }
    let d = fam.d;
    let target = sp_dim(d);
    for (l, level) in fam.members.iter().enumerate() {
        for (k, b) in level.iter().enumerate() {
            if sp_defect(b) > 1e-9 * (1.0 + b.norm()) {
                let (i, j) = fam.pairs[k];
                return Err(Error::Invalid(format!("B^{}_({i},{j}) is not in sp(2d)", l + 1)));
            }
        }
    }
    let cols: Vec<DVector<f64>> = fam.iter().map(sp_coords).collect();
    let coords = DMatrix::from_columns(&cols);
    let sv = singular_values(&coords);
    let rank = rank_rel(&sv, SPAN_RANK_TOL);
    let per = fam.pairs.len();
    let rank_by_depth = (1..=fam.depth)
        .map(|l| {
            let m = coords.columns(0, l * per).clone_owned();
            rank_rel(&singular_values(&m), SPAN_RANK_TOL)
        })
        .collect();
    Ok(SpanCertificate {
        d,
        depth: fam.depth,
        t0: fam.t0,
        target,
        rank,
        rank_by_depth,
        sigma_ratio: ratio_at(&sv, target),
        singular_values: sv,
        pass: rank == target,
        coords,
    })
}

/// Span test at each time of a grid; needs an exact polynomial curve.
pub fn span_sweep(a: &CurveJet, depth: usize, times: &[f64]) -> Result<Vec<SpanCertificate>> {
    times.iter().map(|&t| span_test(&bracket_family(a, depth, t)?)).collect()
}

/// `G A Gᵀ` with `n ↦ G n`, for orthogonal `G` fixing the last basis vector.
pub fn conjugate_family(a: &CurveJet, g: &DMatrix<f64>) -> Result<CurveJet> {
    let d = a.d();
    if g.shape() != (d, d) {
        return Err(Error::Dimension("G must be d×d".into()));
    }
    if (g.transpose() * g - DMatrix::identity(d, d)).amax() > 1e-10 {
        return Err(Error::Invalid("G is not orthogonal".into()));
    }
    let last = g.column(d - 1);
    if (0..d).any(|i| (last[i] - if i == d - 1 { 1.0 } else { 0.0 }).abs() > 1e-10) {
        return Err(Error::Invalid("G does not fix the null basis vector".into()));
    }
    let gp = MatPoly::constant(g.clone());
    let gt = MatPoly::constant(g.transpose());
    let na = gp.mul(&a.a).mul(&gt);
    let nn = a.n.as_ref().map(|n| gp.mul(n));
    CurveJet::new(symmetrize(na), nn, a.delta)
}

fn symmetrize(mut p: MatPoly) -> MatPoly {
    for c in p.coeffs.iter_mut() {
        *c = 0.5 * (&*c + c.transpose());
    }
    p
}

/// Knobs for random curves with a prescribed null direction.
#[derive(Debug, Clone, Serialize)]
pub struct SamplerConfig {
    /// Taylor order of the sampled jets.
    pub order: usize,
    pub delta: f64,
    pub depth: usize,
    /// Size of the random coefficients of the nonsingular block.
    pub scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            order: 5,
            delta: 0.1,
            depth: 5,
            scale: 1.0,
        }
    }
}

/// Random unit null direction with `n(0) = e_last`; `ṅ(0) = 0` when `flat`.
pub fn random_null_direction(d: usize, order: usize, flat: bool, rng: &mut impl Rng) -> Result<MatPoly> {
    let l = d - 1;
    let mut raw = vec![DMatrix::zeros(d, 1); order + 1];
    raw[0][(l, 0)] = 1.0;
    for (k, c) in raw.iter_mut().enumerate().skip(1) {
        if flat && k == 1 {
            continue;
        }
        for i in 0..d {
            c[(i, 0)] = rng.gen_range(-1.0..1.0);
        }
        if k == 1 {
            c[(l, 0)] = 0.0;
        }
    }
    normalize_series(&MatPoly::truncated(raw)?, order)
}

/// `A(t) = P(t) diag(I + Σ_{k≥1} S_k t^k, 0) P(t)ᵀ` with `P` orthogonal,
/// `P(0) = I` and last column `n(t)`. The result is stored as an exact
/// polynomial of degree `cfg.order`; its null defect on `[0, δ]` is of
/// order `δ^{order+1}`.
pub fn sample_curve(n: &MatPoly, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<CurveJet> {
    let d = n.shape().0;
    let l = d - 1;
    let len = cfg.order + 1;
    let seeds: Vec<DMatrix<f64>> = (1..len)
        .map(|_| DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.5..0.5)))
        .collect();
    let p = orthogonal_frame_series(n, &seeds, cfg.order)?;
    let block: Vec<DMatrix<f64>> = (0..len)
        .map(|k| {
            let mut m = DMatrix::zeros(d, d);
            if k == 0 {
                for i in 0..l {
                    m[(i, i)] = 1.0;
                }
            } else {
                let s = DMatrix::from_fn(l, l, |_, _| rng.gen_range(-cfg.scale..cfg.scale));
                m.view_mut((0, 0), (l, l)).copy_from(&(0.5 * (&s + s.transpose())));
            }
            m
        })
        .collect();
    let a = p.mul(&MatPoly::truncated(block)?).mul(&p.transpose());
    let exact = |s: &MatPoly| -> Result<MatPoly> { MatPoly::exact((0..len).map(|k| s.coeff(k)).collect::<Result<_>>()?) };
    let nn = exact(n)?;
    CurveJet::new(symmetrize(exact(&a)?), Some(nn), cfg.delta)
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanWitness {
    pub index: usize,
    pub rank: usize,
    pub sigma_ratio: f64,
    pub curve: CurveJetRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanStats {
    pub samples: usize,
    pub passes: usize,
    pub pass_rate: f64,
    /// `(q, value)` pairs for `q ∈ {0, 0.1, 0.5, 0.9, 1}` of `σ_target / σ_max`.
    pub sigma_min_quantiles: Vec<(f64, f64)>,
    /// Counts over `log10(σ_target / σ_max)`, one bin per decade.
    pub histogram: Vec<HistogramBin>,
    /// Failing samples, at most [`MAX_WITNESSES`].
    pub witnesses: Vec<ScanWitness>,
}

pub const MAX_WITNESSES: usize = 16;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Samples `samples` curves with null direction `n`, runs the span test on
/// each and aggregates. Sample `k` draws from its own ChaCha stream, so the
/// result does not depend on scheduling.
pub fn genericity_scan(n: &MatPoly, samples: usize, cfg: &SamplerConfig, seed: u64) -> ScanStats {
    let results: Vec<(usize, std::result::Result<(SpanCertificate, CurveJet), Error>)> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let r = sample_curve(n, cfg, &mut rng)
                .and_then(|a| Ok((span_test(&bracket_family(&a, cfg.depth, 0.0)?)?, a)));
            (k, r)
        })
        .collect();
    let mut ratios = Vec::with_capacity(samples);
    let mut passes = 0;
    let mut witnesses = Vec::new();
    for (k, r) in results {
        match r {
            Ok((cert, a)) => {
                ratios.push(cert.sigma_ratio);
                if cert.pass {
                    passes += 1;
                } else if witnesses.len() < MAX_WITNESSES {
                    witnesses.push(ScanWitness {
                        index: k,
                        rank: cert.rank,
                        sigma_ratio: cert.sigma_ratio,
                        curve: a.to_record(),
                    });
                }
            }
            Err(_) => ratios.push(0.0),
        }
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let sigma_min_quantiles = if sorted.is_empty() {
        vec![]
    } else {
        [0.0, 0.1, 0.5, 0.9, 1.0].iter().map(|&q| (q, quantile(&sorted, q))).collect()
    };
    let mut histogram: Vec<HistogramBin> = (-17..=0)
        .map(|e| HistogramBin {
            lo: 10f64.powi(e - 1),
            hi: 10f64.powi(e),
            count: 0,
        })
        .collect();
    if !ratios.is_empty() {
        for r in &ratios {
            let idx = histogram.iter().position(|b| *r > b.lo && *r <= b.hi).unwrap_or(0);
            histogram[idx].count += 1;
        }
    } else {
        histogram.clear();
    }
    ScanStats {
        samples,
        passes,
        pass_rate: if samples == 0 { 0.0 } else { passes as f64 / samples as f64 },
        sigma_min_quantiles,
        histogram,
        witnesses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_curve(d: usize) -> CurveJet {
        let mut a = DMatrix::identity(d, d);
        a[(d - 1, d - 1)] = 0.0;
        CurveJet::constant(a, None, 1.0).unwrap()
    }

    #[test]
    fn first_level_is_the_lower_basis() {
        let fam = bracket_family(&constant_curve(3), 1, 0.0).unwrap();
        assert_eq!(fam.len(), 6);
        assert_eq!(fam.get(1, 2, 0).unwrap(), &lower_generator(3, 0, 2));
        let cert = span_test(&fam).unwrap();
        assert_eq!(cert.rank, 6);
        assert!(!cert.pass);
    }

    #[test]
    fn constant_curve_stops_after_three_levels() {
        let fam = bracket_family(&constant_curve(2), 5, 0.0).unwrap();
        for b in fam.level(4).iter().chain(fam.level(5)) {
            assert_eq!(b.amax(), 0.0);
        }
        assert_eq!(span_test(&fam).unwrap().rank, 6);
    }

    #[test]
    fn truncated_jets_report_missing_order() {
        let a = MatPoly::truncated(vec![DMatrix::identity(2, 2), DMatrix::zeros(2, 2)]).unwrap();
        let c = CurveJet::new(a, None, 1.0).unwrap();
        assert!(bracket_family(&c, 3, 0.0).is_ok());
        assert!(matches!(bracket_family(&c, 4, 0.0), Err(Error::JetOrder { .. })));
    }

    #[test]
    fn zero_samples_give_empty_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = random_null_direction(2, 5, false, &mut rng).unwrap();
        let s = genericity_scan(&n, 0, &SamplerConfig::default(), 1);
        assert_eq!(s.samples, 0);
        assert!(s.sigma_min_quantiles.is_empty() && s.histogram.is_empty() && s.witnesses.is_empty());
    }
}
