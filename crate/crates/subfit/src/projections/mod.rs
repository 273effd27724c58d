//! Frozen projection pairs `(A, B)` built from a pretrained weight matrix.
//!
//! Four constructions are supported, plus half/half hybrids of them:
//!
//! * `svd`  — truncated SVD of `W0`: `A = U_r S_r`, `B = V_r^T`. Optimal in
//!   Frobenius norm (Eckart-Young).
//! * `wsvd` — SVD of the whitened matrix `W0^T Sigma_xx^{1/2}`; optimal for
//!   the expected activation error under input second moment `Sigma_xx`.
//! * `dct`  — 2D DCT-II of `W0`, keeping the top-r row/column frequencies by
//!   marginal energy, optionally after an L1-norm row/column permutation.
//! * `rand` — Haar-distributed orthonormal frames from QR of Gaussian draws.
//!
//! Builders return `(A, B)` only; the trainable core is initialized by the
//! network layer that consumes the pair.

mod persist;

pub use persist::{load_projection, save_projection};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    psd_sqrt_and_invsqrt, qr_thin, standard_normal, svd, Matrix, SeededRng,
};

/// Elementary projection construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemKind {
    Svd,
    Wsvd,
    Dct,
    Rand,
}

/// Projection construction, including half/half hybrids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Svd,
    Wsvd,
    Dct,
    Rand,
    Hybrid(ElemKind, ElemKind),
}

impl std::fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectionKind::Svd => write!(f, "svd"),
            ProjectionKind::Wsvd => write!(f, "wsvd"),
            ProjectionKind::Dct => write!(f, "dct"),
            ProjectionKind::Rand => write!(f, "rand"),
            ProjectionKind::Hybrid(a, b) => write!(f, "hybrid({a:?}+{b:?})"),
        }
    }
}

/// Index sets and permutations recorded by the DCT builder.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DctMeta {
    /// Selected row frequencies, ascending.
    pub row_indices: Vec<usize>,
    /// Selected column frequencies, ascending.
    pub col_indices: Vec<usize>,
    /// `row_perm[i]` = source row of `W0` moved to position `i` (descending L1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_perm: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub col_perm: Option<Vec<usize>>,
}

/// Provenance payload persisted alongside the pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dct: Option<DctMeta>,
    /// Sub-metas of the two halves of a hybrid pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halves: Option<Box<(ProjectionMeta, ProjectionMeta)>>,
}

/// Frozen projection pair: `A` is n x r, `B` is r x m.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    pub a: Matrix,
    pub b: Matrix,
    pub kind: ProjectionKind,
    pub rank: usize,
    pub meta: ProjectionMeta,
}

impl ProjectionPair {
    /// `A * B`, the rank-r update at core `R = I`.
    pub fn product(&self) -> Matrix {
        self.a.matmul(&self.b)
    }

    fn validate(&self, op: &'static str, n: usize, m: usize) -> Result<()> {
        if self.a.rows() != n
            || self.b.cols() != m
            || self.a.cols() != self.rank
            || self.b.rows() != self.rank
        {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("A {n}x{r}, B {r}x{m}", r = self.rank),
                got: format!(
                    "A {}x{}, B {}x{}",
                    self.a.rows(),
                    self.a.cols(),
                    self.b.rows(),
                    self.b.cols()
                ),
            });
        }
        Ok(())
    }
}

/// Declarative request for a projection, as read from run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub kind: ProjectionKind,
    pub rank: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// DCT: sort rows/columns by descending L1 norm before transforming.
    #[serde(default)]
    pub permute: bool,
    /// WSVD: ridge added to `Sigma_xx` eigenvalues; default 1e-6 * trace/dim.
    #[serde(default)]
    pub ridge: Option<f64>,
    /// WSVD: which dataset the whitening moment is estimated from.
    #[serde(default)]
    pub whitening: Option<String>,
}

impl ProjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("projection rank must be >= 1"));
        }
        Ok(())
    }
}

fn check_rank(w0: &Matrix, r: usize) -> Result<()> {
    let max = w0.rows().min(w0.cols());
    if r == 0 || r > max {
        return Err(Error::invalid_arg(format!(
            "rank {r} out of range [1, {max}] for a {}x{} matrix",
            w0.rows(),
            w0.cols()
        )));
    }
    Ok(())
}

/// Default WSVD ridge: `1e-6 * trace(Sigma_xx) / dim`.
pub fn default_ridge(sigma_xx: &Matrix) -> f64 {
    1e-6 * sigma_xx.trace() / sigma_xx.rows() as f64
}

/// Truncated SVD projection: `A = U_r diag(S_r)`, `B = V_r^T`.
pub fn build_svd(w0: &Matrix, r: usize) -> Result<ProjectionPair> {
    check_rank(w0, r)?;
    let dec = svd(w0)?;
    let cols: Vec<usize> = (0..r).collect();
    let mut a = dec.u.select_cols(&cols);
    for j in 0..r {
        for i in 0..a.rows() {
            a[(i, j)] *= dec.s[j];
        }
    }
    let b = dec.v.select_cols(&cols).transpose();
    Ok(ProjectionPair {
        a,
        b,
        kind: ProjectionKind::Svd,
        rank: r,
        meta: ProjectionMeta::default(),
    })
}

/// Whitened SVD projection.
///
/// With `P = Sigma_xx^{1/2}`, the builder takes the thin SVD of
/// `W0^T P ~ U~ S~ V~^T` and returns `B = U~_r^T`,
/// `A = P^{-1} V~_r diag(S~_r)`, the rank-r pair minimizing the expected
/// activation error `tr((W0 - AB)^T Sigma_xx (W0 - AB))`.
pub fn build_wsvd(w0: &Matrix, sigma_xx: &Matrix, r: usize, ridge: f64) -> Result<ProjectionPair> {
    check_rank(w0, r)?;
    if sigma_xx.rows() != w0.rows() || sigma_xx.cols() != w0.rows() {
        return Err(Error::ShapeMismatch {
            op: "build_wsvd",
            expected: format!("{n}x{n} second moment", n = w0.rows()),
            got: format!("{}x{}", sigma_xx.rows(), sigma_xx.cols()),
        });
    }
    let (p, p_inv) = psd_sqrt_and_invsqrt(sigma_xx, ridge)?;
    let whitened = w0.matmul_tn(&p); // W0^T P, m x n
    let dec = svd(&whitened)?;
    let cols: Vec<usize> = (0..r).collect();
    let b = dec.u.select_cols(&cols).transpose(); // r x m
    let mut v_scaled = dec.v.select_cols(&cols); // n x r
    for j in 0..r {
        for i in 0..v_scaled.rows() {
            v_scaled[(i, j)] *= dec.s[j];
        }
    }
    let a = p_inv.matmul(&v_scaled);
    Ok(ProjectionPair {
        a,
        b,
        kind: ProjectionKind::Wsvd,
        rank: r,
        meta: ProjectionMeta {
            ridge: Some(ridge),
            ..Default::default()
        },
    })
}

/// Orthogonal DCT-II transform matrix: `D[k][i] = alpha_k cos(pi k (2i+1) / 2d)`.
pub fn dct_matrix(d: usize) -> Matrix {
    let inv_d = 1.0 / d as f64;
    Matrix::from_fn(d, d, |k, i| {
        let alpha = if k == 0 {
            inv_d.sqrt()
        } else {
            (2.0 * inv_d).sqrt()
        };
        alpha * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * d as f64)).cos()
    })
}

/// Indices of the top-r values, ties broken toward the lower index;
/// returned ascending.
fn top_indices(values: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order[..r].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Descending-L1 ordering of the rows of `m` (stable in the original index).
fn l1_order_rows(m: &Matrix) -> Vec<usize> {
    let norms: Vec<f64> = (0..m.rows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    order
}

/// 2D-DCT projection with energy-based frequency selection.
pub fn build_dct(w0: &Matrix, r: usize, permute: bool) -> Result<ProjectionPair> {
    check_rank(w0, r)?;
    let n = w0.rows();
    let m = w0.cols();

    let (work, row_perm, col_perm) = if permute {
        let rp = l1_order_rows(w0);
        let cp = l1_order_rows(&w0.transpose());
        let permuted = Matrix::from_fn(n, m, |i, j| w0[(rp[i], cp[j])]);
        (permuted, Some(rp), Some(cp))
    } else {
        (w0.clone(), None, None)
    };

    let d_n = dct_matrix(n);
    let d_m = dct_matrix(m);
    let coeffs = d_n.matmul(&work).matmul_nt(&d_m); // C = D_n W~ D_m^T

    let row_energy: Vec<f64> = (0..n)
        .map(|i| coeffs.row(i).iter().map(|c| c * c).sum())
        .collect();
    let col_energy: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| coeffs[(i, j)] * coeffs[(i, j)]).sum())
        .collect();
    let rows_sel = top_indices(&row_energy, r);
    let cols_sel = top_indices(&col_energy, r);

    let core = Matrix::from_fn(r, r, |ii, jj| coeffs[(rows_sel[ii], cols_sel[jj])]);
    // A~ = (D_n^T)_{:,I} core ; B~ = (D_m)_{J,:}
    let a_tilde = d_n.select_rows(&rows_sel).transpose().matmul(&core);
    let b_tilde = d_m.select_rows(&cols_sel);

    let (a, b) = match (&row_perm, &col_perm) {
        (Some(rp), Some(cp)) => {
            // A = P_r^T A~ : row rp[i] of A holds row i of A~.
            let mut a = Matrix::zeros(n, r);
            for i in 0..n {
                a.row_mut(rp[i]).copy_from_slice(a_tilde.row(i));
            }
            // B = B~ P_c : column cp[j] of B holds column j of B~.
            let mut b = Matrix::zeros(r, m);
            for i in 0..r {
                for j in 0..m {
                    b[(i, cp[j])] = b_tilde[(i, j)];
                }
            }
            (a, b)
        }
        _ => (a_tilde, b_tilde),
    };

    Ok(ProjectionPair {
        a,
        b,
        kind: ProjectionKind::Dct,
        rank: r,
        meta: ProjectionMeta {
            dct: Some(DctMeta {
                row_indices: rows_sel,
                col_indices: cols_sel,
                row_perm,
                col_perm,
            }),
            ..Default::default()
        },
    })
}

/// Haar-distributed orthonormal frame: QR of a Gaussian draw with column
/// signs fixed so that `diag(R) >= 0`.
pub fn haar_frame(rng: &mut SeededRng, dim: usize, r: usize) -> Result<Matrix> {
    let g = standard_normal(rng, dim, r);
    let qr = qr_thin(&g)?;
    let mut q = qr.q;
    for j in 0..r {
        if qr.r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

const RAND_RETRY_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Random orthonormal projection: `C = L^T W0 R_tmp`, `A = L C`, `B = R_tmp^T`.
pub fn build_random(w0: &Matrix, r: usize, seed: u64) -> Result<ProjectionPair> {
    check_rank(w0, r)?;
    let attempt = |s: u64| -> Result<ProjectionPair> {
        let mut rng = SeededRng::new(s);
        let left = haar_frame(&mut rng, w0.rows(), r)?;
        let right = haar_frame(&mut rng, w0.cols(), r)?;
        let core = left.matmul_tn(w0).matmul(&right); // L^T W0 R_tmp
        Ok(ProjectionPair {
            a: left.matmul(&core),
            b: right.transpose(),
            kind: ProjectionKind::Rand,
            rank: r,
            meta: ProjectionMeta {
                seed: Some(seed),
                ..Default::default()
            },
        })
    };
    // A Gaussian draw is rank-deficient only with probability zero, but the
    // contract allows one deterministic retry before giving up.
    attempt(seed).or_else(|_| attempt(seed ^ RAND_RETRY_SALT))
}

/// Options threaded through [`build`] for the data- and seed-dependent kinds.
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions<'a> {
    pub sigma_xx: Option<&'a Matrix>,
    pub ridge: Option<f64>,
    pub seed: u64,
    pub permute: bool,
}

impl Default for BuildOptions<'_> {
    fn default() -> Self {
        Self {
            sigma_xx: None,
            ridge: None,
            seed: 0,
            permute: false,
        }
    }
}

fn build_elem(
    w0: &Matrix,
    kind: ElemKind,
    r: usize,
    opts: &BuildOptions<'_>,
    half: u64,
) -> Result<ProjectionPair> {
    match kind {
        ElemKind::Svd => build_svd(w0, r),
        ElemKind::Wsvd => {
            let sigma = opts.sigma_xx.ok_or_else(|| {
                Error::invalid_arg("wsvd projection requires an input second moment")
            })?;
            let ridge = opts.ridge.unwrap_or_else(|| default_ridge(sigma));
            build_wsvd(w0, sigma, r, ridge)
        }
        ElemKind::Dct => build_dct(w0, r, opts.permute),
        ElemKind::Rand => build_random(w0, r, opts.seed.wrapping_add(half)),
    }
}

/// Half/half hybrid: each kind contributes a rank-r/2 pair; columns of `A`
/// and rows of `B` are concatenated without re-orthogonalization.
pub fn build_hybrid(
    w0: &Matrix,
    r: usize,
    kind1: ElemKind,
    kind2: ElemKind,
    opts: &BuildOptions<'_>,
) -> Result<ProjectionPair> {
    if r % 2 != 0 {
        return Err(Error::invalid_arg(format!(
            "hybrid projection requires an even rank, got {r}"
        )));
    }
    check_rank(w0, r)?;
    let half = r / 2;
    let first = build_elem(w0, kind1, half, opts, 0)?;
    let second = build_elem(w0, kind2, half, opts, 1)?;

    let n = w0.rows();
    let m = w0.cols();
    let mut a = Matrix::zeros(n, r);
    for i in 0..n {
        for j in 0..half {
            a[(i, j)] = first.a[(i, j)];
            a[(i, half + j)] = second.a[(i, j)];
        }
    }
    let mut b = Matrix::zeros(r, m);
    for j in 0..half {
        b.row_mut(j).copy_from_slice(first.b.row(j));
        b.row_mut(half + j).copy_from_slice(second.b.row(j));
    }
    Ok(ProjectionPair {
        a,
        b,
        kind: ProjectionKind::Hybrid(kind1, kind2),
        rank: r,
        meta: ProjectionMeta {
            seed: Some(opts.seed),
            halves: Some(Box::new((first.meta, second.meta))),
            ..Default::default()
        },
    })
}

/// Dispatching entry point used by the CLI.
pub fn build(
    w0: &Matrix,
    kind: ProjectionKind,
    r: usize,
    opts: &BuildOptions<'_>,
) -> Result<ProjectionPair> {
    match kind {
        ProjectionKind::Svd => build_svd(w0, r),
        ProjectionKind::Wsvd => build_elem(w0, ElemKind::Wsvd, r, opts, 0),
        ProjectionKind::Dct => build_dct(w0, r, opts.permute),
        ProjectionKind::Rand => build_random(w0, r, opts.seed),
        ProjectionKind::Hybrid(k1, k2) => build_hybrid(w0, r, k1, k2, opts),
    }
}

/// Frobenius reconstruction error `||W0 - A B||_F`.
pub fn recon_error(w0: &Matrix, pair: &ProjectionPair) -> Result<f64> {
    pair.validate("recon_error", w0.rows(), w0.cols())?;
    Ok(w0.sub(&pair.product()).frob_norm())
}

/// Expected activation error `tr((W0 - AB)^T Sigma_xx (W0 - AB))`.
pub fn activation_error(w0: &Matrix, pair: &ProjectionPair, sigma_xx: &Matrix) -> Result<f64> {
    pair.validate("activation_error", w0.rows(), w0.cols())?;
    if sigma_xx.rows() != w0.rows() || sigma_xx.cols() != w0.rows() {
        return Err(Error::ShapeMismatch {
            op: "activation_error",
            expected: format!("{n}x{n} second moment", n = w0.rows()),
            got: format!("{}x{}", sigma_xx.rows(), sigma_xx.cols()),
        });
    }
    let delta = w0.sub(&pair.product());
    let weighted = sigma_xx.matmul(&delta);
    let mut acc = 0.0;
    for (d, w) in delta.as_slice().iter().zip(weighted.as_slice()) {
        acc += d * w;
    }
    Ok(acc)
}
