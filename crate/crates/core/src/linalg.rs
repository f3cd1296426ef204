//! Dense linear algebra helpers on top of `nalgebra`: singular values,
//! pseudo-inverse with a relative rank cut-off, and ordinary least squares.

use nalgebra::{DMatrix, SVD};

use crate::diff::Tensor;

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_na(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD `a = u·diag(s)·v_t` with `r = min(rows, cols)` components.
///
/// nalgebra's bidiagonal SVD occasionally returns factors that do not
/// recompose to the input for rank-deficient wide matrices, so the tall
/// orientation is tried first, every result is checked, and a symmetric
/// eigen-decomposition of the Gram matrix is the last resort.
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn thin_svd(a: &Tensor) -> ThinSvd {
    let m = to_na(a);
    let tol = 1e-10 * m.amax().max(1.0) * (m.nrows().max(m.ncols()) as f64);
    let recomposes = |svd: &ThinSvd, target: &DMatrix<f64>| {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(svd.s.clone()));
        let err = (&svd.u * s * &svd.v_t - target).amax();
        err.is_finite() && err <= tol
    };
    let direct = |m: &DMatrix<f64>| -> Option<ThinSvd> {
        let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, 10_000)?;
        Some(ThinSvd { u: svd.u?, s: svd.singular_values.iter().copied().collect(), v_t: svd.v_t? })
    };
    let transposed = |m: &DMatrix<f64>| -> Option<ThinSvd> {
        let t = direct(&m.transpose())?;
        Some(ThinSvd { u: t.v_t.transpose(), s: t.s, v_t: t.u.transpose() })
    };
    let attempts: [&dyn Fn(&DMatrix<f64>) -> Option<ThinSvd>; 2] =
        if m.nrows() >= m.ncols() { [&direct, &transposed] } else { [&transposed, &direct] };
    for attempt in attempts {
        if let Some(svd) = attempt(&m) {
            if recomposes(&svd, &m) {
                return svd;
            }
        }
    }
    gram_svd(&m)
}

/// SVD through the eigen-decomposition of the smaller Gram matrix.
fn gram_svd(m: &DMatrix<f64>) -> ThinSvd {
    if m.nrows() > m.ncols() {
        let t = gram_svd(&m.transpose());
        return ThinSvd { u: t.v_t.transpose(), s: t.s, v_t: t.u.transpose() };
    }
    // wide: m·mᵀ = u·Λ·uᵀ, v_t = diag(1/s)·uᵀ·m
    let eig = (m * m.transpose()).symmetric_eigen();
    let s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let u = eig.eigenvectors;
    let mut v_t = u.transpose() * m;
    for (k, &sk) in s.iter().enumerate() {
        let scale = if sk > 0.0 { 1.0 / sk } else { 0.0 };
        v_t.row_mut(k).scale_mut(scale);
    }
    ThinSvd { u, s, v_t }
}

/// Singular values in descending order.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut s = thin_svd(a).s;
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Ratio of the largest to the smallest singular value (`∞` when singular).
pub fn condition_number(a: &Tensor) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

#[derive(Clone, Debug)]
pub struct PseudoInverse {
    pub matrix: Tensor,
    pub rank: usize,
}

/// Moore–Penrose pseudo-inverse through the SVD. Singular values below
/// `rank_tol · σ_max` are treated as zero.
pub fn pinv(a: &Tensor, rank_tol: f64) -> PseudoInverse {
    let (m, n) = (a.rows(), a.cols());
    if a.is_empty() || a.max_abs() == 0.0 {
        return PseudoInverse { matrix: Tensor::zeros(n, m), rank: 0 };
    }
    let ThinSvd { u, s, v_t } = thin_svd(a);
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let cutoff = rank_tol * s_max;
    let mut out = DMatrix::<f64>::zeros(n, m);
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        if sk <= cutoff || sk == 0.0 {
            continue;
        }
        rank += 1;
        // out += v_k · u_kᵀ / s_k
        let vk = v_t.row(k);
        let uk = u.column(k);
        for i in 0..n {
            let vi = vk[i] / sk;
            for j in 0..m {
                out[(i, j)] += vi * uk[j];
            }
        }
    }
    PseudoInverse { matrix: from_na(&out), rank }
}

#[derive(Clone, Debug)]
pub struct LeastSquares {
    /// `p × k` slope coefficients.
    pub coef: Tensor,
    /// `1 × k` intercept.
    pub intercept: Vec<f64>,
    /// Set when the design was rank-deficient and a ridge term was added.
    pub regularized: bool,
}

impl LeastSquares {
    pub fn predict(&self, x: &Tensor) -> Tensor {
        let mut y = x.matmul(&self.coef).expect("design width matches coefficients");
        for r in 0..y.rows() {
            for (c, b) in self.intercept.iter().enumerate() {
                let v = y.get(r, c) + b;
                y.set(r, c, v);
            }
        }
        y
    }
}

/// Ordinary least squares with intercept, `y ≈ x·coef + intercept`, solved
/// on centered data through the normal equations. A rank-deficient design
/// gets a `1e-8` ridge (relative to the mean diagonal) and is flagged.
pub fn least_squares(x: &Tensor, y: &Tensor) -> LeastSquares {
    let (n, p, k) = (x.rows(), x.cols(), y.cols());
    assert_eq!(n, y.rows(), "design and target need equal rows");
    let mean = |t: &Tensor| -> Vec<f64> {
        (0..t.cols()).map(|c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / n.max(1) as f64).collect()
    };
    let (mx, my) = (mean(x), mean(y));
    let xc = DMatrix::from_fn(n, p, |r, c| x.get(r, c) - mx[c]);
    let yc = DMatrix::from_fn(n, k, |r, c| y.get(r, c) - my[c]);
    let xtx = xc.transpose() * &xc;
    let xty = xc.transpose() * &yc;

    let diag_mean = (0..p).map(|i| xtx[(i, i)]).sum::<f64>() / p.max(1) as f64;
    let well_posed = p > 0
        && xtx.clone().symmetric_eigen().eigenvalues.iter().fold(f64::INFINITY, |m, &s| m.min(s))
            > 1e-12 * diag_mean.max(f64::MIN_POSITIVE);
    let (system, regularized) = if well_posed {
        (xtx, false)
    } else {
        let ridge = 1e-8 * diag_mean.max(1e-300);
        (xtx + DMatrix::identity(p, p) * ridge, true)
    };
    let beta = match system.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => SVD::new(system, true, true).solve(&xty, 1e-14).unwrap_or_else(|_| DMatrix::zeros(p, k)),
    };
    let intercept = (0..k).map(|c| my[c] - (0..p).map(|i| mx[i] * beta[(i, c)]).sum::<f64>()).collect();
    LeastSquares { coef: from_na(&beta), intercept, regularized }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_identity() {
        let p = pinv(&Tensor::identity(3), 1e-6);
        assert_eq!(p.rank, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.matrix.get(i, j) - f64::from(u8::from(i == j))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pinv_of_rank_one_diagonal() {
        let a = Tensor::new(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let p = pinv(&a, 1e-6);
        assert_eq!(p.rank, 1);
        assert!((p.matrix.get(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(p.matrix.get(1, 1), 0.0);
    }

    #[test]
    fn pinv_of_zero_matrix() {
        let p = pinv(&Tensor::zeros(2, 5), 1e-6);
        assert_eq!(p.rank, 0);
        assert_eq!(p.matrix.shape(), [5, 2]);
        assert_eq!(p.matrix.max_abs(), 0.0);
    }

    #[test]
    fn least_squares_recovers_affine_map() {
        let x = Tensor::from_fn(50, 2, |i, j| ((i * (j + 3)) % 7) as f64 - 3.0 + 0.1 * i as f64);
        let y = Tensor::from_fn(50, 1, |i, _| 2.0 * x.get(i, 0) - 0.5 * x.get(i, 1) + 4.0);
        let fit = least_squares(&x, &y);
        assert!(!fit.regularized);
        assert!((fit.coef.get(0, 0) - 2.0).abs() < 1e-10);
        assert!((fit.coef.get(1, 0) + 0.5).abs() < 1e-10);
        assert!((fit.intercept[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_columns_are_flagged() {
        let x = Tensor::from_fn(20, 2, |i, _| i as f64);
        let y = Tensor::from_fn(20, 1, |i, _| 3.0 * i as f64);
        let fit = least_squares(&x, &y);
        assert!(fit.regularized);
        let pred = fit.predict(&x);
        assert!((pred.get(10, 0) - 30.0).abs() < 1e-6);
    }

    /// A wide matrix with a repeated row, where a plain SVD of the wide
    /// orientation does not recompose.
    #[test]
    fn pinv_of_rank_deficient_wide_matrix() {
        let mut a = Tensor::from_fn(3, 10, |i, j| ((i * 10 + j) as f64 * 0.7).sin());
        for c in 0..10 {
            let v = a.get(0, c);
            a.set(2, c, v);
        }
        let p = pinv(&a, 1e-6);
        assert_eq!(p.rank, 2);
        let ap = a.matmul(&p.matrix).unwrap();
        let back = ap.matmul(&a).unwrap();
        assert!(back.data().iter().zip(a.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        // projector onto span{(1,0,1)/√2, (0,1,0)}
        assert!((ap.get(0, 0) - 0.5).abs() < 1e-12 && (ap.get(0, 2) - 0.5).abs() < 1e-12);
    }
}
