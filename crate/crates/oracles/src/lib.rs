//! Small, independent reference computations used to cross-check the main
//! numerical code in tests: Lyapunov-equation Gramians, matrix exponentials,
//! an eigendecomposition-based SVD, and an analytic series solution of the
//! linear diffusion slab with Robin boundary conditions.

use nalgebra::{DMatrix, DVector};

/// Kronecker product a (x) b.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let v = a[(i, j)];
            if v != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(v * b));
            }
        }
    }
    out
}

/// Observability Gramian of (A, C): the solution W of
/// A^T W + W A + C^T C = 0, obtained by a dense Kronecker linear solve.
/// Panics if A is such that the Lyapunov operator is singular.
pub fn lyapunov_observability_gramian(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!(c.ncols(), n, "C must have n columns");
    let eye = DMatrix::identity(n, n);
    let at = a.transpose();
    let op = kron(&eye, &at) + kron(&at, &eye);
    let rhs = -(c.transpose() * c);
    let rhs_vec = DVector::from_column_slice(rhs.as_slice());
    let sol = op
        .lu()
        .solve(&rhs_vec)
        .expect("Lyapunov operator is singular");
    DMatrix::from_column_slice(n, n, sol.as_slice())
}

/// Matrix exponential e^{A t}.
pub fn expm(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    (a * t).exp()
}

/// Singular value decomposition computed through the eigendecomposition of
/// A^T A (a deliberately different route from an SVD routine). Returns
/// (U, sigma, V) with singular values in descending order; only singular
/// triplets with sigma > tol * sigma_max are returned.
pub fn svd_via_gram(a: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let gram = a.transpose() * a;
    let eig = gram.symmetric_eigen();
    let m = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let sigma_max = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let mut sigmas = Vec::new();
    let mut us = Vec::new();
    let mut vs = Vec::new();
    for &idx in &order {
        let sigma = eig.eigenvalues[idx].max(0.0).sqrt();
        if sigma <= tol * sigma_max {
            break;
        }
        let v = eig.eigenvectors.column(idx).clone_owned();
        let u = (a * &v) / sigma;
        sigmas.push(sigma);
        us.push(u);
        vs.push(v);
    }
    (
        DMatrix::from_columns(&us),
        DVector::from_vec(sigmas),
        DMatrix::from_columns(&vs),
    )
}

/// Eigenvalue parameters mu_m of the symmetric Robin slab on (0, L):
/// solutions of mu tan(mu L / 2) = k / delta (even modes only, which are the
/// only ones excited by a uniform initial condition).
fn robin_eigenvalues(delta: f64, k: f64, length: f64, count: usize) -> Vec<f64> {
    let half = 0.5 * length;
    let biot = k / delta;
    let mut mus = Vec::with_capacity(count);
    for m in 0..count {
        // Root of f(mu) = mu tan(mu half) - biot in branch m of tan.
        let lo = ((m as f64) * std::f64::consts::PI + 1e-9) / half;
        let hi = (((m as f64) + 0.5) * std::f64::consts::PI - 1e-9) / half;
        let f = |mu: f64| mu * (mu * half).tan() - biot;
        let (mut a, mut b) = (lo, hi);
        debug_assert!(f(a) < 0.0 && f(b) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if f(mid) > 0.0 {
                b = mid;
            } else {
                a = mid;
            }
        }
        mus.push(0.5 * (a + b));
    }
    mus
}

/// Series solution u(z, t) of u_t = delta u_zz on (0, L) with linear
/// out-fluxes delta u_z(0) = k u(0), -delta u_z(L) = k u(L) and uniform
/// initial condition u(z, 0) = 1.
pub fn robin_slab_profile(
    delta: f64,
    k: f64,
    length: f64,
    t: f64,
    positions: &[f64],
    terms: usize,
) -> Vec<f64> {
    let half = 0.5 * length;
    let mus = robin_eigenvalues(delta, k, length, terms);
    positions
        .iter()
        .map(|&z| {
            let zc = z - half;
            let mut acc = 0.0;
            for &mu in &mus {
                let s = (mu * half).sin();
                let c = (mu * half).cos();
                let coeff = 2.0 * s / (mu * half + s * c);
                acc += coeff * (mu * zc).cos() * (-delta * mu * mu * t).exp();
            }
            acc
        })
        .collect()
}
