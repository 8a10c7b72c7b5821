//! Kernel expectations under a factorized Gaussian (psi statistics) and
//! their gradients.
//!
//! psi0    = sum_n E[k(x_n, x_n)]
//! Psi1    = E[k(x_n, z_m)]                       (N x M)
//! Psi2    = sum_n E[k(x_n, z_m) k(x_n, z_m')]    (M x M)
//!
//! Everything is assembled from per-row contributions so callers can form
//! the statistics of any observed-row subset without recomputation. Psi2
//! rows are stored as packed upper triangles.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{NlmcError, Result};
use crate::util::{pack_adjoint, packed_len, unpack_symmetric};

use super::quadrature::{for_each_node, GH_NODE_BUDGET, GH_ORDER};
use super::{kernel_value, KernelFamily, KernelParams, KernelSpec};

/// A set of rows of the variational posterior: one diagonal Gaussian per row.
/// Variances are in natural space and must be strictly positive.
#[derive(Debug, Clone)]
pub struct GaussianRows {
    pub means: DMatrix<f64>,
    pub vars: DMatrix<f64>,
}

impl GaussianRows {
    pub fn new(means: DMatrix<f64>, vars: DMatrix<f64>) -> Result<Self> {
        if means.shape() != vars.shape() {
            return Err(NlmcError::dim(
                "GaussianRows",
                format!("{}x{}", means.nrows(), means.ncols()),
                format!("{}x{}", vars.nrows(), vars.ncols()),
            ));
        }
        if vars.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(NlmcError::param(
                "GaussianRows vars",
                "all variances must be finite and strictly positive",
            ));
        }
        Ok(GaussianRows { means, vars })
    }

    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.means.ncols()
    }
}

/// Psi statistics over a row set.
#[derive(Debug, Clone)]
pub struct PsiStats {
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

/// Per-row psi contributions, row-major, Psi2 packed upper-triangular.
#[derive(Debug, Clone)]
pub struct PsiRowCache {
    pub n: usize,
    pub m: usize,
    pub psi0_rows: Vec<f64>,
    pub psi1_rows: Vec<f64>,
    pub psi2_rows: Vec<f64>,
}

impl PsiRowCache {
    pub fn psi1_row(&self, n: usize) -> &[f64] {
        &self.psi1_rows[n * self.m..(n + 1) * self.m]
    }

    pub fn psi2_row(&self, n: usize) -> &[f64] {
        let p = packed_len(self.m);
        &self.psi2_rows[n * p..(n + 1) * p]
    }

    /// Sum the packed Psi2 contributions of `rows`, weighted by one.
    pub fn sum_psi2(&self, rows: impl Iterator<Item = usize>) -> Vec<f64> {
        let p = packed_len(self.m);
        let mut acc = vec![0.0; p];
        for r in rows {
            let row = self.psi2_row(r);
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc
    }
}

fn validate(spec: &KernelSpec, params: &KernelParams, q: &GaussianRows, z: &DMatrix<f64>) -> Result<()> {
    if q.latent_dim() != spec.latent_dim || z.ncols() != spec.latent_dim
        || params.latent_dim() != spec.latent_dim
    {
        return Err(NlmcError::dim(
            "psi statistics",
            format!("latent dim {}", spec.latent_dim),
            format!(
                "q: {}, z: {}, params: {}",
                q.latent_dim(),
                z.ncols(),
                params.latent_dim()
            ),
        ));
    }
    if spec.family == KernelFamily::Matern32 {
        let nodes = (GH_ORDER as f64).powi(spec.latent_dim as i32);
        if nodes > GH_NODE_BUDGET as f64 {
            return Err(NlmcError::UnsupportedQuadrature {
                family: spec.family.name().to_string(),
                latent_dim: spec.latent_dim,
                order: GH_ORDER,
            });
        }
    }
    Ok(())
}

fn row_major(mat: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = mat.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(mat[(i, j)]);
        }
    }
    out
}

/// Compute per-row psi contributions for every row of `q` against inducing
/// inputs `z`.
pub fn build_psi_row_cache(
    spec: &KernelSpec,
    params: &KernelParams,
    q: &GaussianRows,
    z: &DMatrix<f64>,
) -> Result<PsiRowCache> {
    validate(spec, params, q, z)?;
    let n = q.len();
    let m = z.nrows();
    let kd = spec.latent_dim;
    let p = packed_len(m);
    let sf2 = params.signal_variance();
    let alpha = params.ard_weights();
    let zr = row_major(z);
    let mr = row_major(&q.means);
    let vr = row_major(&q.vars);

    let mut psi0_rows = vec![0.0; n];
    let mut psi1_rows = vec![0.0; n * m];
    let mut psi2_rows = vec![0.0; n * p];

    let family = spec.family;
    psi0_rows
        .par_iter_mut()
        .zip(psi1_rows.par_chunks_mut(m))
        .zip(psi2_rows.par_chunks_mut(p))
        .enumerate()
        .for_each(|(row, ((psi0, psi1), psi2))| {
            let mu = &mr[row * kd..(row + 1) * kd];
            let s = &vr[row * kd..(row + 1) * kd];
            match family {
                KernelFamily::RbfArd => {
                    rbf_row(sf2, &alpha, mu, s, &zr, m, kd, psi0, psi1, psi2)
                }
                KernelFamily::LinearArd => {
                    linear_row(sf2, &alpha, mu, s, &zr, m, kd, psi0, psi1, psi2)
                }
                KernelFamily::Matern32 => {
                    quadrature_row(family, sf2, &alpha, mu, s, &zr, m, kd, psi0, psi1, psi2)
                }
            }
        });

    Ok(PsiRowCache {
        n,
        m,
        psi0_rows,
        psi1_rows,
        psi2_rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn rbf_row(
    sf2: f64,
    alpha: &[f64],
    mu: &[f64],
    s: &[f64],
    zr: &[f64],
    m: usize,
    kd: usize,
    psi0: &mut f64,
    psi1: &mut [f64],
    psi2: &mut [f64],
) {
    *psi0 = sf2;

    // Psi1: sf2 * prod_k (alpha S + 1)^{-1/2} exp(-1/2 alpha (mu - z)^2 / (alpha S + 1))
    let mut c = vec![0.0; kd];
    let mut lognorm1 = 0.0;
    for k in 0..kd {
        c[k] = alpha[k] * s[k] + 1.0;
        lognorm1 -= 0.5 * c[k].ln();
    }
    for j in 0..m {
        let zrow = &zr[j * kd..(j + 1) * kd];
        let mut expo = lognorm1;
        for k in 0..kd {
            let d = mu[k] - zrow[k];
            expo -= 0.5 * alpha[k] * d * d / c[k];
        }
        psi1[j] = sf2 * expo.exp();
    }

    // Psi2 row: sf4 * prod_k (2 alpha S + 1)^{-1/2}
    //           * exp(-1/4 alpha e^2 - alpha t^2 / (2 alpha S + 1))
    // with e = z_m - z_m' and t = mu - (z_m + z_m')/2.
    let sf4 = sf2 * sf2;
    let mut g = vec![0.0; kd];
    let mut lognorm2 = 0.0;
    for k in 0..kd {
        g[k] = 2.0 * alpha[k] * s[k] + 1.0;
        lognorm2 -= 0.5 * g[k].ln();
    }
    let mut idx = 0;
    for j in 0..m {
        let zj = &zr[j * kd..(j + 1) * kd];
        for j2 in j..m {
            let zj2 = &zr[j2 * kd..(j2 + 1) * kd];
            let mut expo = lognorm2;
            for k in 0..kd {
                let e = zj[k] - zj2[k];
                let t = mu[k] - 0.5 * (zj[k] + zj2[k]);
                expo -= 0.25 * alpha[k] * e * e + alpha[k] * t * t / g[k];
            }
            psi2[idx] = sf4 * expo.exp();
            idx += 1;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_row(
    sf2: f64,
    alpha: &[f64],
    mu: &[f64],
    s: &[f64],
    zr: &[f64],
    m: usize,
    kd: usize,
    psi0: &mut f64,
    psi1: &mut [f64],
    psi2: &mut [f64],
) {
    let mut trace = 0.0;
    for k in 0..kd {
        trace += alpha[k] * (mu[k] * mu[k] + s[k]);
    }
    *psi0 = sf2 * trace;

    // a_m = sum_k alpha_k mu_k z_mk
    let mut a = vec![0.0; m];
    for j in 0..m {
        let zrow = &zr[j * kd..(j + 1) * kd];
        let mut dot = 0.0;
        for k in 0..kd {
            dot += alpha[k] * mu[k] * zrow[k];
        }
        a[j] = dot;
        psi1[j] = sf2 * dot;
    }

    let sf4 = sf2 * sf2;
    let mut idx = 0;
    for j in 0..m {
        let zj = &zr[j * kd..(j + 1) * kd];
        for j2 in j..m {
            let zj2 = &zr[j2 * kd..(j2 + 1) * kd];
            let mut quad = 0.0;
            for k in 0..kd {
                quad += alpha[k] * alpha[k] * zj[k] * zj2[k] * s[k];
            }
            psi2[idx] = sf4 * (a[j] * a[j2] + quad);
            idx += 1;
        }
    }
}

/// Gauss-Hermite fallback for kernels without closed-form expectations.
/// psi0 uses stationarity (k(x, x) = sf2) exactly.
#[allow(clippy::too_many_arguments)]
fn quadrature_row(
    family: KernelFamily,
    sf2: f64,
    alpha: &[f64],
    mu: &[f64],
    s: &[f64],
    zr: &[f64],
    m: usize,
    kd: usize,
    psi0: &mut f64,
    psi1: &mut [f64],
    psi2: &mut [f64],
) {
    *psi0 = sf2;
    let scale: Vec<f64> = s.iter().map(|v| (2.0 * v).sqrt()).collect();
    let mut x = vec![0.0; kd];
    let mut kv = vec![0.0; m];
    for_each_node(kd, |point, w| {
        for k in 0..kd {
            x[k] = mu[k] + scale[k] * point[k];
        }
        for (j, kvj) in kv.iter_mut().enumerate() {
            *kvj = kernel_value(family, sf2, alpha, &x, &zr[j * kd..(j + 1) * kd]);
        }
        for j in 0..m {
            psi1[j] += w * kv[j];
        }
        let mut idx = 0;
        for j in 0..m {
            let wk = w * kv[j];
            for j2 in j..m {
                psi2[idx] += wk * kv[j2];
                idx += 1;
            }
        }
    });
}

/// Psi statistics over the given rows (the observed set of one column).
pub fn psi_statistics(
    spec: &KernelSpec,
    params: &KernelParams,
    q: &GaussianRows,
    z: &DMatrix<f64>,
) -> Result<PsiStats> {
    let cache = build_psi_row_cache(spec, params, q, z)?;
    Ok(stats_from_cache(&cache, 0..cache.n))
}

/// Assemble PsiStats for a subset of cached rows. `rows` indexes the cache.
pub fn stats_from_cache(cache: &PsiRowCache, rows: impl Iterator<Item = usize> + Clone) -> PsiStats {
    let m = cache.m;
    let count = rows.clone().count();
    let mut psi1 = DMatrix::zeros(count, m);
    let mut psi0 = 0.0;
    for (out_i, r) in rows.clone().enumerate() {
        psi0 += cache.psi0_rows[r];
        let row = cache.psi1_row(r);
        for j in 0..m {
            psi1[(out_i, j)] = row[j];
        }
    }
    let packed = cache.sum_psi2(rows);
    PsiStats {
        psi0,
        psi1,
        psi2: unpack_symmetric(m, &packed),
    }
}

/// Adjoints for a vector-Jacobian product through the psi statistics.
#[derive(Debug, Clone)]
pub struct PsiAdjoints<'a> {
    pub d_psi0: f64,
    pub d_psi1: &'a DMatrix<f64>,
    pub d_psi2: &'a DMatrix<f64>,
}

/// Gradients of sum(adjoint .* psi) with respect to log-space kernel
/// parameters, inducing inputs, and the variational moments (natural space).
#[derive(Debug, Clone)]
pub struct PsiGradients {
    pub d_log_signal_variance: f64,
    pub d_log_ard: Vec<f64>,
    pub d_z: DMatrix<f64>,
    pub d_means: DMatrix<f64>,
    pub d_vars: DMatrix<f64>,
}

/// Accumulator target for one row's VJP. The mu/s slices are the row's own;
/// z and parameter slots accumulate across rows.
pub(crate) struct RowVjpOut<'a> {
    pub d_mu: &'a mut [f64],
    pub d_s: &'a mut [f64],
    pub d_z: &'a mut [f64],
    pub d_log_ard: &'a mut [f64],
    pub d_log_sf2: &'a mut f64,
}

/// Per-row backward pass.
///
/// `w0` is the adjoint on psi0_n, `w1` on the Psi1 row, and `w2` are packed
/// upper-triangular weights with off-diagonal entries pre-doubled (see
/// [`pack_adjoint`]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn psi_row_vjp(
    family: KernelFamily,
    sf2: f64,
    alpha: &[f64],
    mu: &[f64],
    s: &[f64],
    zr: &[f64],
    m: usize,
    kd: usize,
    w0: f64,
    w1: &[f64],
    w2: &[f64],
    out: &mut RowVjpOut,
) {
    match family {
        KernelFamily::RbfArd => rbf_row_vjp(sf2, alpha, mu, s, zr, m, kd, w0, w1, w2, out),
        KernelFamily::LinearArd => linear_row_vjp(sf2, alpha, mu, s, zr, m, kd, w0, w1, w2, out),
        KernelFamily::Matern32 => {
            quadrature_row_vjp(family, sf2, alpha, mu, s, zr, m, kd, w0, w1, w2, out)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn rbf_row_vjp(
    sf2: f64,
    alpha: &[f64],
    mu: &[f64],
    s: &[f64],
    zr: &[f64],
    m: usize,
    kd: usize,
    w0: f64,
    w1: &[f64],
    w2: &[f64],
    out: &mut RowVjpOut,
) {
    // psi0_n = sf2
    *out.d_log_sf2 += w0 * sf2;

    let mut c = vec![0.0; kd];
    let mut lognorm1 = 0.0;
    for k in 0..kd {
        c[k] = alpha[k] * s[k] + 1.0;
        lognorm1 -= 0.5 * c[k].ln();
    }
    for j in 0..m {
        if w1[j] == 0.0 {
            continue;
        }
        let zrow = &zr[j * kd..(j + 1) * kd];
        let mut expo = lognorm1;
        for k in 0..kd {
            let d = mu[k] - zrow[k];
            expo -= 0.5 * alpha[k] * d * d / c[k];
        }
        let v = w1[j] * sf2 * expo.exp();
        *out.d_log_sf2 += v;
        for k in 0..kd {
            let d = mu[k] - zrow[k];
            let ratio = alpha[k] * d / c[k];
            out.d_mu[k] += v * (-ratio);
            out.d_z[j * kd + k] += v * ratio;
            out.d_s[k] += v * (alpha[k] / (2.0 * c[k])) * (alpha[k] * d * d / c[k] - 1.0);
            out.d_log_ard[k] +=
                v * alpha[k] * (-0.5) * (s[k] / c[k] + d * d / (c[k] * c[k]));
        }
    }

    let sf4 = sf2 * sf2;
    let mut g = vec![0.0; kd];
    let mut lognorm2 = 0.0;
    for k in 0..kd {
        g[k] = 2.0 * alpha[k] * s[k] + 1.0;
        lognorm2 -= 0.5 * g[k].ln();
    }
    let mut idx = 0;
    for j in 0..m {
        let zj = &zr[j * kd..(j + 1) * kd];
        for j2 in j..m {
            let w = w2[idx];
            idx += 1;
            if w == 0.0 {
                continue;
            }
            let zj2 = &zr[j2 * kd..(j2 + 1) * kd];
            let mut expo = lognorm2;
            for k in 0..kd {
                let e = zj[k] - zj2[k];
                let t = mu[k] - 0.5 * (zj[k] + zj2[k]);
                expo -= 0.25 * alpha[k] * e * e + alpha[k] * t * t / g[k];
            }
            let u = w * sf4 * expo.exp();
            *out.d_log_sf2 += 2.0 * u;
            for k in 0..kd {
                let e = zj[k] - zj2[k];
                let t = mu[k] - 0.5 * (zj[k] + zj2[k]);
                let a = alpha[k];
                out.d_mu[k] += u * (-2.0 * a * t / g[k]);
                out.d_s[k] += u * (a / g[k]) * (2.0 * a * t * t / g[k] - 1.0);
                out.d_z[j * kd + k] += u * (-0.5 * a * e + a * t / g[k]);
                out.d_z[j2 * kd + k] += u * (0.5 * a * e + a * t / g[k]);
                out.d_log_ard[k] +=
                    u * a * (-s[k] / g[k] - 0.25 * e * e - t * t / (g[k] * g[k]));
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_row_vjp(
    sf2: f64,
    alpha: &[f64],
    mu: &[f64],
    s: &[f64],
    zr: &[f64],
    m: usize,
    kd: usize,
    w0: f64,
    w1: &[f64],
    w2: &[f64],
    out: &mut RowVjpOut,
) {
    if w0 != 0.0 {
        let mut trace = 0.0;
        for k in 0..kd {
            trace += alpha[k] * (mu[k] * mu[k] + s[k]);
            out.d_mu[k] += w0 * sf2 * alpha[k] * 2.0 * mu[k];
            out.d_s[k] += w0 * sf2 * alpha[k];
            out.d_log_ard[k] += w0 * sf2 * alpha[k] * (mu[k] * mu[k] + s[k]);
        }
        *out.d_log_sf2 += w0 * sf2 * trace;
    }

    let mut a = vec![0.0; m];
    for j in 0..m {
        let zrow = &zr[j * kd..(j + 1) * kd];
        let mut dot = 0.0;
        for k in 0..kd {
            dot += alpha[k] * mu[k] * zrow[k];
        }
        a[j] = dot;
    }

    for j in 0..m {
        let w = w1[j];
        if w == 0.0 {
            continue;
        }
        let zrow = &zr[j * kd..(j + 1) * kd];
        *out.d_log_sf2 += w * sf2 * a[j];
        for k in 0..kd {
            out.d_mu[k] += w * sf2 * alpha[k] * zrow[k];
            out.d_z[j * kd + k] += w * sf2 * alpha[k] * mu[k];
            out.d_log_ard[k] += w * sf2 * alpha[k] * mu[k] * zrow[k];
        }
    }

    let sf4 = sf2 * sf2;
    let mut idx = 0;
    for j in 0..m {
        let zj = &zr[j * kd..(j + 1) * kd];
        for j2 in j..m {
            let w = w2[idx];
            idx += 1;
            if w == 0.0 {
                continue;
            }
            let zj2 = &zr[j2 * kd..(j2 + 1) * kd];
            let mut quad = 0.0;
            for k in 0..kd {
                quad += alpha[k] * alpha[k] * zj[k] * zj2[k] * s[k];
            }
            let value = sf4 * (a[j] * a[j2] + quad);
            *out.d_log_sf2 += w * 2.0 * value;
            for k in 0..kd {
                let ak = alpha[k];
                out.d_mu[k] += w * sf4 * (ak * zj[k] * a[j2] + ak * zj2[k] * a[j]);
                out.d_s[k] += w * sf4 * ak * ak * zj[k] * zj2[k];
                out.d_z[j * kd + k] += w * sf4 * (ak * mu[k] * a[j2] + ak * ak * zj2[k] * s[k]);
                out.d_z[j2 * kd + k] += w * sf4 * (ak * mu[k] * a[j] + ak * ak * zj[k] * s[k]);
                out.d_log_ard[k] += w
                    * sf4
                    * ak
                    * (mu[k] * zj[k] * a[j2] + mu[k] * zj2[k] * a[j]
                        + 2.0 * ak * zj[k] * zj2[k] * s[k]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn quadrature_row_vjp(
    family: KernelFamily,
    sf2: f64,
    alpha: &[f64],
    mu: &[f64],
    s: &[f64],
    zr: &[f64],
    m: usize,
    kd: usize,
    w0: f64,
    w1: &[f64],
    w2: &[f64],
    out: &mut RowVjpOut,
) {
    debug_assert!(matches!(family, KernelFamily::Matern32));
    // psi0_n = sf2 exactly for stationary kernels.
    *out.d_log_sf2 += w0 * sf2;

    let sqrt3 = 3.0f64.sqrt();
    let scale: Vec<f64> = s.iter().map(|v| (2.0 * v).sqrt()).collect();
    let mut x = vec![0.0; kd];
    let mut kv = vec![0.0; m];
    let mut ev = vec![0.0; m];
    let mut adj = vec![0.0; m];
    for_each_node(kd, |point, w| {
        for k in 0..kd {
            x[k] = mu[k] + scale[k] * point[k];
        }
        for j in 0..m {
            let zrow = &zr[j * kd..(j + 1) * kd];
            let mut sq = 0.0;
            for k in 0..kd {
                let d = x[k] - zrow[k];
                sq += alpha[k] * d * d;
            }
            let r = sq.max(0.0).sqrt();
            let e = (-sqrt3 * r).exp();
            ev[j] = e;
            kv[j] = sf2 * (1.0 + sqrt3 * r) * e;
        }
        // adjoint on kv_j from psi1 and packed psi2 weights
        for j in 0..m {
            adj[j] = w * w1[j];
        }
        let mut idx = 0;
        for j in 0..m {
            for j2 in j..m {
                let weight = w2[idx];
                idx += 1;
                if weight == 0.0 {
                    continue;
                }
                if j == j2 {
                    adj[j] += w * weight * 2.0 * kv[j];
                } else {
                    adj[j] += w * weight * kv[j2];
                    adj[j2] += w * weight * kv[j];
                }
            }
        }
        for j in 0..m {
            let a_j = adj[j];
            if a_j == 0.0 {
                continue;
            }
            let zrow = &zr[j * kd..(j + 1) * kd];
            *out.d_log_sf2 += a_j * kv[j];
            // dk/d(r^2) = -(3/2) sf2 exp(-sqrt3 r)
            let dk_dr2 = -1.5 * sf2 * ev[j];
            for k in 0..kd {
                let d = x[k] - zrow[k];
                let dk_dd = dk_dr2 * 2.0 * alpha[k] * d;
                out.d_mu[k] += a_j * dk_dd;
                out.d_s[k] += a_j * dk_dd * point[k] / (2.0 * s[k]).sqrt().max(f64::MIN_POSITIVE);
                out.d_z[j * kd + k] -= a_j * dk_dd;
                out.d_log_ard[k] += a_j * dk_dr2 * alpha[k] * d * d;
            }
        }
    });
}

/// Vector-Jacobian product through the psi statistics: gradients of
/// sum(adjoints .* psi) for the whole row set.
pub fn psi_gradients(
    spec: &KernelSpec,
    params: &KernelParams,
    q: &GaussianRows,
    z: &DMatrix<f64>,
    adjoints: &PsiAdjoints,
) -> Result<PsiGradients> {
    validate(spec, params, q, z)?;
    let n = q.len();
    let m = z.nrows();
    let kd = spec.latent_dim;
    if adjoints.d_psi1.nrows() != n || adjoints.d_psi1.ncols() != m {
        return Err(NlmcError::dim(
            "psi_gradients d_psi1",
            format!("{n}x{m}"),
            format!("{}x{}", adjoints.d_psi1.nrows(), adjoints.d_psi1.ncols()),
        ));
    }
    if adjoints.d_psi2.nrows() != m || adjoints.d_psi2.ncols() != m {
        return Err(NlmcError::dim(
            "psi_gradients d_psi2",
            format!("{m}x{m}"),
            format!("{}x{}", adjoints.d_psi2.nrows(), adjoints.d_psi2.ncols()),
        ));
    }

    let sf2 = params.signal_variance();
    let alpha = params.ard_weights();
    let zr = row_major(z);
    let mr = row_major(&q.means);
    let vr = row_major(&q.vars);
    let w2 = pack_adjoint(adjoints.d_psi2);

    let mut d_log_sf2 = 0.0;
    let mut d_log_ard = vec![0.0; kd];
    let mut d_zr = vec![0.0; m * kd];
    let mut d_means = DMatrix::zeros(n, kd);
    let mut d_vars = DMatrix::zeros(n, kd);

    let mut w1 = vec![0.0; m];
    for row in 0..n {
        for j in 0..m {
            w1[j] = adjoints.d_psi1[(row, j)];
        }
        let mut d_mu = vec![0.0; kd];
        let mut d_s = vec![0.0; kd];
        let mut out = RowVjpOut {
            d_mu: &mut d_mu,
            d_s: &mut d_s,
            d_z: &mut d_zr,
            d_log_ard: &mut d_log_ard,
            d_log_sf2: &mut d_log_sf2,
        };
        psi_row_vjp(
            spec.family,
            sf2,
            &alpha,
            &mr[row * kd..(row + 1) * kd],
            &vr[row * kd..(row + 1) * kd],
            &zr,
            m,
            kd,
            adjoints.d_psi0,
            &w1,
            &w2,
            &mut out,
        );
        for k in 0..kd {
            d_means[(row, k)] = d_mu[k];
            d_vars[(row, k)] = d_s[k];
        }
    }

    let mut d_z = DMatrix::zeros(m, kd);
    for j in 0..m {
        for k in 0..kd {
            d_z[(j, k)] = d_zr[j * kd + k];
        }
    }

    Ok(PsiGradients {
        d_log_signal_variance: d_log_sf2,
        d_log_ard,
        d_z,
        d_means,
        d_vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_psi0_is_count_times_signal_variance() {
        let spec = KernelSpec::new(KernelFamily::RbfArd, 2).unwrap();
        let params = KernelParams::new(1.7, &[0.4, 2.2]).unwrap();
        let q = GaussianRows::new(
            DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.5, 1.0, 2.0, -1.0]),
            DMatrix::from_row_slice(3, 2, &[0.5, 0.1, 0.3, 0.9, 1.2, 0.4]),
        )
        .unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]);
        let stats = psi_statistics(&spec, &params, &q, &z).unwrap();
        assert!((stats.psi0 - 3.0 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn rbf_psi1_one_dimensional_closed_form() {
        // mu=0, S=1, z=0, alpha=1, sf2=1: Psi1 = (alpha S + 1)^{-1/2} = 1/sqrt(2)
        let spec = KernelSpec::new(KernelFamily::RbfArd, 1).unwrap();
        let params = KernelParams::new(1.0, &[1.0]).unwrap();
        let q = GaussianRows::new(
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
        )
        .unwrap();
        let z = DMatrix::from_row_slice(1, 1, &[0.0]);
        let stats = psi_statistics(&spec, &params, &q, &z).unwrap();
        assert!((stats.psi1[(0, 0)] - 0.7071067811865476).abs() < 1e-12);
    }

    #[test]
    fn vanishing_variance_collapses_to_kernel_values() {
        for family in [
            KernelFamily::LinearArd,
            KernelFamily::RbfArd,
            KernelFamily::Matern32,
        ] {
            let spec = KernelSpec::new(family, 2).unwrap();
            let params = KernelParams::new(1.4, &[0.9, 1.6]).unwrap();
            let means = DMatrix::from_row_slice(2, 2, &[0.3, -0.8, 1.2, 0.5]);
            let q = GaussianRows::new(means.clone(), DMatrix::from_element(2, 2, 1e-300)).unwrap();
            let z = DMatrix::from_row_slice(3, 2, &[0.0, 0.4, -1.0, 0.9, 0.7, -0.3]);
            let stats = psi_statistics(&spec, &params, &q, &z).unwrap();
            let exact = super::super::kernel_matrix(&spec, &params, &means, &z).unwrap();
            for i in 0..2 {
                for j in 0..3 {
                    assert!(
                        (stats.psi1[(i, j)] - exact[(i, j)]).abs() < 1e-10,
                        "{family:?} psi1 ({i},{j})"
                    );
                }
            }
            // Psi2 collapses to K^T K summed over rows.
            for a in 0..3 {
                for b in 0..3 {
                    let expect: f64 = (0..2).map(|n| exact[(n, a)] * exact[(n, b)]).sum();
                    assert!(
                        (stats.psi2[(a, b)] - expect).abs() < 1e-9,
                        "{family:?} psi2 ({a},{b})"
                    );
                }
            }
        }
    }

    #[test]
    fn psi2_is_symmetric_and_near_psd() {
        let spec = KernelSpec::new(KernelFamily::RbfArd, 3).unwrap();
        let params = KernelParams::new(0.8, &[1.0, 0.5, 2.0]).unwrap();
        let q = GaussianRows::new(
            DMatrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin()),
            DMatrix::from_fn(5, 3, |i, j| 0.2 + ((i + j) as f64 * 0.11).cos().abs()),
        )
        .unwrap();
        let z = DMatrix::from_fn(4, 3, |i, j| ((i * 7 + j * 3) as f64 * 0.23).cos());
        let stats = psi_statistics(&spec, &params, &q, &z).unwrap();
        assert_eq!(stats.psi2, stats.psi2.transpose());
        let eig = nalgebra::SymmetricEigen::new(stats.psi2.clone());
        let min = eig.eigenvalues.min();
        let trace = stats.psi2.trace();
        assert!(min >= -1e-8 * trace, "min eigenvalue {min}, trace {trace}");
    }

    #[test]
    fn matern_quadrature_budget_enforced() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 5).unwrap();
        let params = KernelParams::new(1.0, &[1.0; 5]).unwrap();
        let q = GaussianRows::new(DMatrix::zeros(1, 5), DMatrix::from_element(1, 5, 1.0)).unwrap();
        let z = DMatrix::zeros(2, 5);
        let err = psi_statistics(&spec, &params, &q, &z).unwrap_err();
        assert!(matches!(
            err,
            crate::error::NlmcError::UnsupportedQuadrature { .. }
        ));
    }
}
