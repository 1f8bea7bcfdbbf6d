//! Small dense linear-algebra helpers shared by the analysis modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Standard symplectic matrix `[[0, I], [-I, 0]]` of size `2d`.
pub fn j_matrix(d: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        j[(i, d + i)] = 1.0;
        j[(d + i, i)] = -1.0;
    }
    j
}

/// Frobenius norm of `LᵀJL − J`.
pub fn symplectic_defect(l: &DMatrix<f64>) -> f64 {
    let d = l.nrows() / 2;
    let j = j_matrix(d);
    (l.transpose() * &j * l - j).norm()
}

/// Frobenius norm of `JB + BᵀJ`; zero exactly on sp(2d).
pub fn sp_defect(b: &DMatrix<f64>) -> f64 {
    let j = j_matrix(b.nrows() / 2);
    (&j * b + b.transpose() * j).norm()
}

/// Dimension of sp(2d).
pub fn sp_dim(d: usize) -> usize {
    2 * d * d + d
}

/// Coordinates of `[[M, S], [T, -Mᵀ]] ∈ sp(2d)`.
///
/// Off-diagonal entries of the symmetric blocks carry a factor `√2`, which
/// makes the map an isometry for the Frobenius norm.
pub fn sp_coords(b: &DMatrix<f64>) -> DVector<f64> {
    let d = b.nrows() / 2;
    let r2 = std::f64::consts::SQRT_2;
    let mut v = Vec::with_capacity(sp_dim(d));
    for i in 0..d {
        for j in 0..d {
            // M appears twice in B (as M and -Mᵀ)
            v.push(r2 * b[(i, j)]);
        }
    }
    for (r0, c0) in [(0, d), (d, 0)] {
        for i in 0..d {
            for j in i..d {
                let s = 0.5 * (b[(r0 + i, c0 + j)] + b[(r0 + j, c0 + i)]);
                v.push(if i == j { s } else { r2 * s });
            }
        }
    }
    DVector::from_vec(v)
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return vec![];
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn rank_rel(sv: &[f64], rel_tol: f64) -> usize {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Orthonormal basis (as columns) of the orthogonal complement of `v`.
pub fn complement_basis(v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = v.len();
    let nv = v.norm();
    if nv == 0.0 {
        return Err(Error::Numerical("complement of the zero vector".into()));
    }
    let mut basis: Vec<DVector<f64>> = vec![v / nv];
    for k in 0..n {
        if basis.len() == n {
            break;
        }
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&e);
                e -= b * c;
            }
        }
        let ne = e.norm();
        if ne > 1e-8 {
            basis.push(e / ne);
        }
    }
    Ok(DMatrix::from_columns(&basis[1..]))
}

/// Symmetric eigen-decomposition with eigenvalues sorted decreasingly.
///
/// Each eigenvector is signed so that its largest-magnitude entry is positive.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = 0.5 * (a + a.transpose());
    let e = nalgebra::SymmetricEigen::new(sym);
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| e.eigenvalues[j].total_cmp(&e.eigenvalues[i]));
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        let mut col = e.eigenvectors.column(i).clone_owned();
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vecs.set_column(c, &col);
    }
    (vals, vecs)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if m == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = m as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[m - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[m - 1 - i] = wi;
    }
    (x, w)
}

/// Orthogonal reflection exchanging `e_last` and the unit vector `n`.
///
/// Its last column is `n`; it is the identity when `n = e_last`.
pub fn reflector_to(n: &DVector<f64>) -> DMatrix<f64> {
    let d = n.len();
    let mut u = -n.clone();
    u[d - 1] += 1.0;
    let uu = u.dot(&u);
    let mut h = DMatrix::identity(d, d);
    if uu > 1e-300 {
        h -= (2.0 / uu) * &u * u.transpose();
    }
    h
}
