//! Dense decompositions: thin SVD, thin QR, symmetric eigendecomposition,
//! and PSD square roots.
//!
//! All routines are single-threaded with fixed iteration orders, so results
//! are bit-reproducible for identical inputs. Singular vectors and
//! eigenvectors follow one deterministic sign convention: the
//! largest-magnitude entry of each (left) vector is made positive, ties
//! broken toward the lowest row index.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sweep cap for the Jacobi iterations.
const MAX_SWEEPS: usize = 100;
/// Relative off-diagonal threshold at which a pair counts as converged.
const CONV_TOL: f64 = 1e-12;

/// Thin SVD `M = U * diag(S) * V^T` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// n x k, orthonormal columns.
    pub u: Matrix,
    /// Singular values, non-increasing, all >= 0.
    pub s: Vec<f64>,
    /// m x k, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// `U_r * diag(S_r) * V_r^T` for `r <= k`.
    pub fn truncated_product(&self, r: usize) -> Matrix {
        assert!(r >= 1 && r <= self.s.len());
        let mut us = self.u.select_cols(&(0..r).collect::<Vec<_>>());
        for j in 0..r {
            for i in 0..us.rows() {
                us[(i, j)] *= self.s[j];
            }
        }
        us.matmul_nt(&self.v.select_cols(&(0..r).collect::<Vec<_>>()))
    }
}

/// Thin QR `M = Q * R` with orthonormal `Q` (n x r) and upper-triangular `R` (r x r).
#[derive(Debug, Clone)]
pub struct QrResult {
    pub q: Matrix,
    pub r: Matrix,
}

/// Symmetric eigendecomposition, eigenvalues non-increasing.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// One-sided Jacobi SVD. Deterministic sign convention as documented above.
///
/// Fails with `NonConvergence` if the sweep cap is exceeded.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let (mut u, mut s, mut v) = if m.rows() >= m.cols() {
        svd_tall(m)?
    } else {
        let (u_t, s_t, v_t) = svd_tall(&m.transpose())?;
        (v_t, s_t, u_t)
    };
    sort_by_singular_values(&mut u, &mut s, &mut v);
    sign_fix_pair(&mut u, &mut v);
    Ok(SvdResult { u, s, v })
}

/// One-sided Jacobi on a tall matrix (rows >= cols): orthogonalize columns
/// by right rotations, accumulate them into V, then read off U and S.
fn svd_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let n = m.rows();
    let k = m.cols();
    let mut a = m.clone();
    let mut v = Matrix::identity(k);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k.saturating_sub(1) {
            for q in (p + 1)..k {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..n {
                    let ap = a[(i, p)];
                    let aq = a[(i, q)];
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma == 0.0 || gamma.abs() <= CONV_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for i in 0..n {
                    let ap = a[(i, p)];
                    let aq = a[(i, q)];
                    a[(i, p)] = c * ap - sn * aq;
                    a[(i, q)] = sn * ap + c * aq;
                }
                for i in 0..k {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - sn * vq;
                    v[(i, q)] = sn * vp + c * vq;
                }
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged && k > 1 {
        return Err(Error::NonConvergence {
            what: "one-sided Jacobi SVD",
            iters: MAX_SWEEPS,
        });
    }

    let mut s = vec![0.0; k];
    let mut u = Matrix::zeros(n, k);
    let mut needs_basis = Vec::new();
    for j in 0..k {
        let mut norm_sq = 0.0;
        for i in 0..n {
            norm_sq += a[(i, j)] * a[(i, j)];
        }
        let norm = norm_sq.sqrt();
        s[j] = norm;
        if norm > 0.0 {
            for i in 0..n {
                u[(i, j)] = a[(i, j)] / norm;
            }
        } else {
            needs_basis.push(j);
        }
    }
    for j in needs_basis {
        complete_orthonormal_column(&mut u, j)?;
    }
    Ok((u, s, v))
}

/// Fill column `j` of `u` with a unit vector orthogonal to every other
/// column, chosen deterministically from the standard basis.
fn complete_orthonormal_column(u: &mut Matrix, j: usize) -> Result<()> {
    let n = u.rows();
    let k = u.cols();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cand in 0..n {
        let mut w = vec![0.0; n];
        w[cand] = 1.0;
        // Two Gram-Schmidt passes against the already-set columns.
        for _ in 0..2 {
            for l in 0..k {
                if l == j {
                    continue;
                }
                let dot: f64 = (0..n).map(|i| u[(i, l)] * w[i]).sum();
                for i in 0..n {
                    w[i] -= dot * u[(i, l)];
                }
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.as_ref().map_or(true, |(b, _)| norm > *b) {
            best = Some((norm, w));
        }
    }
    let (norm, w) = best.ok_or_else(|| Error::invalid_arg("cannot complete orthonormal basis"))?;
    if norm < 1e-6 {
        return Err(Error::invalid_arg(
            "cannot complete orthonormal basis: residuals degenerate",
        ));
    }
    for i in 0..n {
        u[(i, j)] = w[i] / norm;
    }
    Ok(())
}

fn sort_by_singular_values(u: &mut Matrix, s: &mut [f64], v: &mut Matrix) {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let sorted_s: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    s.copy_from_slice(&sorted_s);
    *u = u.select_cols(&order);
    *v = v.select_cols(&order);
}

/// Make the largest-magnitude entry of each column of `u` positive,
/// negating the matching column of `v` to preserve the product.
fn sign_fix_pair(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        if column_needs_flip(u, j) {
            negate_col(u, j);
            negate_col(v, j);
        }
    }
}

fn column_needs_flip(m: &Matrix, j: usize) -> bool {
    let mut best_i = 0;
    let mut best_abs = -1.0;
    for i in 0..m.rows() {
        let a = m[(i, j)].abs();
        if a > best_abs {
            best_abs = a;
            best_i = i;
        }
    }
    m[(best_i, j)] < 0.0
}

fn negate_col(m: &mut Matrix, j: usize) {
    for i in 0..m.rows() {
        m[(i, j)] = -m[(i, j)];
    }
}

/// Householder thin QR for `rows >= cols`.
///
/// The reflector choice keeps the diagonal of `R` non-negative, so `Q` is
/// the canonical orthonormal factor; no post-hoc sign pass is applied.
/// Fails with `RankDeficient` if any `|R[k,k]| < 1e-12`.
pub fn qr_thin(m: &Matrix) -> Result<QrResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("qr_thin input"));
    }
    let n = m.rows();
    let r = m.cols();
    if n < r {
        return Err(Error::invalid_arg(format!(
            "qr_thin requires rows >= cols, got {n}x{r}"
        )));
    }
    let mut a = m.clone();
    // Householder vectors stored per step; w has length n - k.
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(r);

    for k in 0..r {
        let mut norm_sq = 0.0;
        for i in k..n {
            norm_sq += a[(i, k)] * a[(i, k)];
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            return Err(Error::RankDeficient { index: k, value: 0.0 });
        }
        let head = a[(k, k)];
        // w = x - ||x|| e1, with the cancellation-free head when head > 0.
        let mut w = vec![0.0; n - k];
        let tail_sq = norm_sq - head * head;
        w[0] = if head <= 0.0 {
            head - norm
        } else {
            -tail_sq / (head + norm)
        };
        for i in (k + 1)..n {
            w[i - k] = a[(i, k)];
        }
        let w_norm_sq = w[0] * w[0] + tail_sq;
        if w_norm_sq == 0.0 {
            // Column already aligned with +e1; reflector is the identity.
            reflectors.push((w, 0.0));
            continue;
        }
        let tau = 2.0 / w_norm_sq;
        // Apply H = I - tau w w^T to the trailing block.
        for j in k..r {
            let mut dot = 0.0;
            for i in k..n {
                dot += w[i - k] * a[(i, j)];
            }
            let scale = tau * dot;
            for i in k..n {
                a[(i, j)] -= scale * w[i - k];
            }
        }
        a[(k, k)] = norm;
        for i in (k + 1)..n {
            a[(i, k)] = 0.0;
        }
        reflectors.push((w, tau));
    }

    let mut r_mat = Matrix::zeros(r, r);
    for i in 0..r {
        for j in i..r {
            r_mat[(i, j)] = a[(i, j)];
        }
    }
    for k in 0..r {
        let d = r_mat[(k, k)].abs();
        if d < 1e-12 {
            return Err(Error::RankDeficient { index: k, value: d });
        }
    }

    // Q = H_0 ... H_{r-1} [I_r; 0]
    let mut q = Matrix::zeros(n, r);
    for j in 0..r {
        q[(j, j)] = 1.0;
    }
    for k in (0..r).rev() {
        let (w, tau) = &reflectors[k];
        if *tau == 0.0 {
            continue;
        }
        for j in 0..r {
            let mut dot = 0.0;
            for i in k..n {
                dot += w[i - k] * q[(i, j)];
            }
            let scale = tau * dot;
            for i in k..n {
                q[(i, j)] -= scale * w[i - k];
            }
        }
    }
    Ok(QrResult { q, r: r_mat })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(M + M^T) / 2` before iterating. Eigenvalues
/// come back sorted non-increasing with the same sign convention as [`svd`].
pub fn eig_sym(m: &Matrix) -> Result<SymEigResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("eig_sym input"));
    }
    if m.rows() != m.cols() {
        return Err(Error::ShapeMismatch {
            op: "eig_sym",
            expected: "square matrix".into(),
            got: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    let n = m.rows();
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = Matrix::identity(n);
    let scale = a.frob_norm();
    let tol = CONV_TOL * scale.max(f64::MIN_POSITIVE);

    let mut converged = n == 1 || scale == 0.0;
    if !converged {
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n - 1 {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() <= tol {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // Two-sided rotation on rows/columns p and q.
                    for i in 0..n {
                        let aip = a[(i, p)];
                        let aiq = a[(i, q)];
                        a[(i, p)] = c * aip - s * aiq;
                        a[(i, q)] = s * aip + c * aiq;
                    }
                    for j in 0..n {
                        let apj = a[(p, j)];
                        let aqj = a[(q, j)];
                        a[(p, j)] = c * apj - s * aqj;
                        a[(q, j)] = s * apj + c * aqj;
                    }
                    for i in 0..n {
                        let vip = v[(i, p)];
                        let viq = v[(i, q)];
                        v[(i, p)] = c * vip - s * viq;
                        v[(i, q)] = s * vip + c * viq;
                    }
                    rotated = true;
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "Jacobi eigendecomposition",
            iters: MAX_SWEEPS,
        });
    }

    let mut values: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[y].partial_cmp(&values[x]).unwrap());
    values = order.iter().map(|&i| values[i]).collect();
    let mut vectors = v.select_cols(&order);
    for j in 0..n {
        if column_needs_flip(&vectors, j) {
            negate_col(&mut vectors, j);
        }
    }
    Ok(SymEigResult { values, vectors })
}

/// `(P, P^{-1})` with `P = Q diag(sqrt(lambda + ridge)) Q^T` from the
/// eigendecomposition of a symmetric PSD matrix.
pub fn psd_sqrt_and_invsqrt(m: &Matrix, ridge: f64) -> Result<(Matrix, Matrix)> {
    let eig = eig_sym(m)?;
    let n = m.rows();
    let mut sqrt_d = Vec::with_capacity(n);
    let mut inv_sqrt_d = Vec::with_capacity(n);
    for (i, &lam) in eig.values.iter().enumerate() {
        let d = lam + ridge;
        if d <= 0.0 {
            return Err(Error::invalid_arg(format!(
                "matrix is not positive definite after ridge: eigenvalue[{i}] + ridge = {d:.3e}"
            )));
        }
        sqrt_d.push(d.sqrt());
        inv_sqrt_d.push(1.0 / d.sqrt());
    }
    let rebuild = |d: &[f64]| {
        let mut scaled = eig.vectors.clone();
        for j in 0..n {
            for i in 0..n {
                scaled[(i, j)] *= d[j];
            }
        }
        scaled.matmul_nt(&eig.vectors)
    };
    Ok((rebuild(&sqrt_d), rebuild(&inv_sqrt_d)))
}
