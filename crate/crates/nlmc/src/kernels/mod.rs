//! Kernel functions, their expectations under Gaussian inputs (psi
//! statistics), and gradients of both.
//!
//! All positive kernel parameters are stored and optimized in log-space.
//! Closed forms cover the linear-ARD and RBF-ARD families; Matern-3/2
//! expectations fall back to tensor-product Gauss-Hermite quadrature.

pub mod oracle;
pub mod psi;
pub mod quadrature;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NlmcError, Result};

pub use oracle::{monte_carlo_psi_oracle, PsiStatsMc};
pub use psi::{
    build_psi_row_cache, psi_gradients, psi_statistics, GaussianRows, PsiAdjoints, PsiGradients,
    PsiRowCache, PsiStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    LinearArd,
    RbfArd,
    Matern32,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::LinearArd => "linear_ard",
            KernelFamily::RbfArd => "rbf_ard",
            KernelFamily::Matern32 => "matern32",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear_ard" | "linear" => Ok(KernelFamily::LinearArd),
            "rbf_ard" | "rbf" => Ok(KernelFamily::RbfArd),
            "matern32" => Ok(KernelFamily::Matern32),
            other => Err(NlmcError::param(
                "kernel",
                format!("unknown kernel family `{other}`"),
            )),
        }
    }

    /// Stationary kernels have k(x, x) = signal variance for every x.
    pub fn is_stationary(&self) -> bool {
        matches!(self, KernelFamily::RbfArd | KernelFamily::Matern32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub latent_dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(NlmcError::param("latent_dim", "must be at least 1"));
        }
        Ok(KernelSpec { family, latent_dim })
    }
}

/// Kernel hyperparameters in log-space: signal variance and one ARD weight
/// per latent dimension (inverse squared lengthscales for the stationary
/// families, per-dimension weights for the linear one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    log_signal_variance: f64,
    log_ard_weights: Vec<f64>,
}

impl KernelParams {
    pub fn new(signal_variance: f64, ard_weights: &[f64]) -> Result<Self> {
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(NlmcError::param(
                "signal_variance",
                format!("must be finite and positive, got {signal_variance}"),
            ));
        }
        for (i, &a) in ard_weights.iter().enumerate() {
            if !(a > 0.0) || !a.is_finite() {
                return Err(NlmcError::param(
                    format!("ard_weights[{i}]"),
                    format!("must be finite and positive, got {a}"),
                ));
            }
        }
        if ard_weights.is_empty() {
            return Err(NlmcError::param("ard_weights", "must be non-empty"));
        }
        Ok(KernelParams {
            log_signal_variance: signal_variance.ln(),
            log_ard_weights: ard_weights.iter().map(|a| a.ln()).collect(),
        })
    }

    pub fn from_log(log_signal_variance: f64, log_ard_weights: Vec<f64>) -> Self {
        KernelParams {
            log_signal_variance,
            log_ard_weights,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.log_ard_weights.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn ard_weights(&self) -> Vec<f64> {
        self.log_ard_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn log_signal_variance(&self) -> f64 {
        self.log_signal_variance
    }

    pub fn log_ard_weights(&self) -> &[f64] {
        &self.log_ard_weights
    }

    pub fn set_log_signal_variance(&mut self, v: f64) {
        self.log_signal_variance = v;
    }

    pub fn set_log_ard_weight(&mut self, k: usize, v: f64) {
        self.log_ard_weights[k] = v;
    }
}

fn check_dims(spec: &KernelSpec, params: &KernelParams, cols: usize, context: &str) -> Result<()> {
    if params.latent_dim() != spec.latent_dim {
        return Err(NlmcError::dim(
            context,
            format!("{} ARD weights", spec.latent_dim),
            format!("{}", params.latent_dim()),
        ));
    }
    if cols != spec.latent_dim {
        return Err(NlmcError::dim(
            context,
            format!("{} latent columns", spec.latent_dim),
            format!("{cols}"),
        ));
    }
    Ok(())
}

/// Evaluate one kernel entry for points given as slices of length K.
#[inline]
pub(crate) fn kernel_value(
    family: KernelFamily,
    sf2: f64,
    alpha: &[f64],
    a: &[f64],
    b: &[f64],
) -> f64 {
    match family {
        KernelFamily::LinearArd => {
            let mut dot = 0.0;
            for k in 0..alpha.len() {
                dot += alpha[k] * a[k] * b[k];
            }
            sf2 * dot
        }
        KernelFamily::RbfArd => {
            let mut sq = 0.0;
            for k in 0..alpha.len() {
                let d = a[k] - b[k];
                sq += alpha[k] * d * d;
            }
            sf2 * (-0.5 * sq).exp()
        }
        KernelFamily::Matern32 => {
            let mut sq = 0.0;
            for k in 0..alpha.len() {
                let d = a[k] - b[k];
                sq += alpha[k] * d * d;
            }
            let r = sq.max(0.0).sqrt();
            let s3r = 3.0f64.sqrt() * r;
            sf2 * (1.0 + s3r) * (-s3r).exp()
        }
    }
}

/// Cross-covariance matrix between two sets of latent points (rows).
pub fn kernel_matrix(
    spec: &KernelSpec,
    params: &KernelParams,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(spec, params, a.ncols(), "kernel_matrix lhs")?;
    check_dims(spec, params, b.ncols(), "kernel_matrix rhs")?;
    let sf2 = params.signal_variance();
    let alpha = params.ard_weights();
    let k = spec.latent_dim;
    let (na, nb) = (a.nrows(), b.nrows());
    let mut arow = vec![0.0; k];
    let mut brow = vec![0.0; k];
    let mut out = DMatrix::zeros(na, nb);
    for i in 0..na {
        for d in 0..k {
            arow[d] = a[(i, d)];
        }
        for j in 0..nb {
            for d in 0..k {
                brow[d] = b[(j, d)];
            }
            out[(i, j)] = kernel_value(spec.family, sf2, &alpha, &arow, &brow);
        }
    }
    Ok(out)
}

/// Gradients of a self-covariance matrix k(Z, Z) contracted against an
/// adjoint: returns d/d(log params) and d/dZ of sum(adjoint .* K).
#[derive(Debug, Clone)]
pub struct SelfKernelGrads {
    pub d_log_signal_variance: f64,
    pub d_log_ard: Vec<f64>,
    pub d_z: DMatrix<f64>,
}

pub fn kernel_matrix_self_vjp(
    spec: &KernelSpec,
    params: &KernelParams,
    z: &DMatrix<f64>,
    adjoint: &DMatrix<f64>,
) -> Result<SelfKernelGrads> {
    check_dims(spec, params, z.ncols(), "kernel_matrix_self_vjp")?;
    let m = z.nrows();
    if adjoint.nrows() != m || adjoint.ncols() != m {
        return Err(NlmcError::dim(
            "kernel_matrix_self_vjp adjoint",
            format!("{m}x{m}"),
            format!("{}x{}", adjoint.nrows(), adjoint.ncols()),
        ));
    }
    let sf2 = params.signal_variance();
    let alpha = params.ard_weights();
    let kd = spec.latent_dim;
    let sqrt3 = 3.0f64.sqrt();

    let mut d_log_sf2 = 0.0;
    let mut d_log_ard = vec![0.0; kd];
    let mut d_z = DMatrix::zeros(m, kd);

    let mut zi = vec![0.0; kd];
    let mut zj = vec![0.0; kd];
    for i in 0..m {
        for d in 0..kd {
            zi[d] = z[(i, d)];
        }
        for j in 0..m {
            let g = adjoint[(i, j)];
            if g == 0.0 {
                continue;
            }
            for d in 0..kd {
                zj[d] = z[(j, d)];
            }
            match spec.family {
                KernelFamily::LinearArd => {
                    let mut dot = 0.0;
                    for k in 0..kd {
                        dot += alpha[k] * zi[k] * zj[k];
                    }
                    d_log_sf2 += g * sf2 * dot;
                    for k in 0..kd {
                        d_log_ard[k] += g * sf2 * alpha[k] * zi[k] * zj[k];
                        d_z[(i, k)] += g * sf2 * alpha[k] * zj[k];
                        d_z[(j, k)] += g * sf2 * alpha[k] * zi[k];
                    }
                }
                KernelFamily::RbfArd => {
                    let mut sq = 0.0;
                    for k in 0..kd {
                        let d = zi[k] - zj[k];
                        sq += alpha[k] * d * d;
                    }
                    let kv = sf2 * (-0.5 * sq).exp();
                    d_log_sf2 += g * kv;
                    for k in 0..kd {
                        let diff = zi[k] - zj[k];
                        d_log_ard[k] += g * kv * (-0.5) * alpha[k] * diff * diff;
                        let slope = g * kv * (-alpha[k] * diff);
                        d_z[(i, k)] += slope;
                        d_z[(j, k)] -= slope;
                    }
                }
                KernelFamily::Matern32 => {
                    let mut sq = 0.0;
                    for k in 0..kd {
                        let d = zi[k] - zj[k];
                        sq += alpha[k] * d * d;
                    }
                    let r = sq.max(0.0).sqrt();
                    let e = (-sqrt3 * r).exp();
                    let kv = sf2 * (1.0 + sqrt3 * r) * e;
                    d_log_sf2 += g * kv;
                    // dk/d(r^2) = -(3/2) sf2 exp(-sqrt3 r), finite at r = 0.
                    let dk_dr2 = -1.5 * sf2 * e;
                    for k in 0..kd {
                        let diff = zi[k] - zj[k];
                        d_log_ard[k] += g * dk_dr2 * alpha[k] * diff * diff;
                        let slope = g * dk_dr2 * 2.0 * alpha[k] * diff;
                        d_z[(i, k)] += slope;
                        d_z[(j, k)] -= slope;
                    }
                }
            }
        }
    }
    Ok(SelfKernelGrads {
        d_log_signal_variance: d_log_sf2,
        d_log_ard,
        d_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: KernelFamily, k: usize) -> KernelSpec {
        KernelSpec::new(family, k).unwrap()
    }

    #[test]
    fn rbf_diagonal_is_signal_variance() {
        let s = spec(KernelFamily::RbfArd, 3);
        let p = KernelParams::new(2.0, &[0.7, 1.3, 0.2]).unwrap();
        let x = DMatrix::from_row_slice(1, 3, &[0.4, -1.2, 2.5]);
        let k = kernel_matrix(&s, &p, &x, &x).unwrap();
        assert!((k[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn linear_kernel_at_origin_is_zero() {
        let s = spec(KernelFamily::LinearArd, 2);
        let p = KernelParams::new(1.5, &[1.0, 1.0]).unwrap();
        let x = DMatrix::zeros(1, 2);
        let k = kernel_matrix(&s, &p, &x, &x).unwrap();
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn rbf_unit_distance_value() {
        // exp(-0.5 * sum alpha_k (x_k - x'_k)^2) with unit parameters.
        let s = spec(KernelFamily::RbfArd, 2);
        let p = KernelParams::new(1.0, &[1.0, 1.0]).unwrap();
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k = kernel_matrix(&s, &p, &a, &b).unwrap();
        assert!((k[(0, 0)] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((k[(0, 0)] - 0.6065306597126334).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let s = spec(KernelFamily::RbfArd, 2);
        let p = KernelParams::new(1.0, &[1.0, 1.0]).unwrap();
        let a = DMatrix::zeros(1, 3);
        let b = DMatrix::zeros(1, 2);
        assert!(kernel_matrix(&s, &p, &a, &b).is_err());
    }

    #[test]
    fn nonpositive_params_rejected() {
        assert!(KernelParams::new(0.0, &[1.0]).is_err());
        assert!(KernelParams::new(1.0, &[-1.0]).is_err());
        assert!(KernelParams::new(f64::NAN, &[1.0]).is_err());
    }

    #[test]
    fn self_vjp_matches_finite_differences() {
        for family in [
            KernelFamily::LinearArd,
            KernelFamily::RbfArd,
            KernelFamily::Matern32,
        ] {
            let s = spec(family, 2);
            let p = KernelParams::new(1.3, &[0.8, 1.7]).unwrap();
            let z = DMatrix::from_row_slice(3, 2, &[0.3, -0.6, 1.1, 0.4, -0.9, 0.2]);
            // A fixed non-symmetric adjoint exercises both slots.
            let adj = DMatrix::from_row_slice(
                3,
                3,
                &[0.5, -1.0, 0.25, 2.0, 0.1, -0.4, 0.0, 1.2, -0.7],
            );
            let grads = kernel_matrix_self_vjp(&s, &p, &z, &adj).unwrap();

            let objective = |p: &KernelParams, z: &DMatrix<f64>| -> f64 {
                let k = kernel_matrix(&s, p, z, z).unwrap();
                (0..3)
                    .flat_map(|i| (0..3).map(move |j| (i, j)))
                    .map(|(i, j)| adj[(i, j)] * k[(i, j)])
                    .sum()
            };
            let h = 1e-6;

            let mut p_plus = p.clone();
            p_plus.set_log_signal_variance(p.log_signal_variance() + h);
            let mut p_minus = p.clone();
            p_minus.set_log_signal_variance(p.log_signal_variance() - h);
            let fd = (objective(&p_plus, &z) - objective(&p_minus, &z)) / (2.0 * h);
            assert!(
                (fd - grads.d_log_signal_variance).abs() < 1e-6 * (1.0 + fd.abs()),
                "{family:?} log sf2: fd {fd} vs {0}",
                grads.d_log_signal_variance
            );

            for k in 0..2 {
                let mut p_plus = p.clone();
                p_plus.set_log_ard_weight(k, p.log_ard_weights()[k] + h);
                let mut p_minus = p.clone();
                p_minus.set_log_ard_weight(k, p.log_ard_weights()[k] - h);
                let fd = (objective(&p_plus, &z) - objective(&p_minus, &z)) / (2.0 * h);
                assert!(
                    (fd - grads.d_log_ard[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{family:?} log ard {k}"
                );
            }

            for i in 0..3 {
                for k in 0..2 {
                    let mut z_plus = z.clone();
                    z_plus[(i, k)] += h;
                    let mut z_minus = z.clone();
                    z_minus[(i, k)] -= h;
                    let fd = (objective(&p, &z_plus) - objective(&p, &z_minus)) / (2.0 * h);
                    assert!(
                        (fd - grads.d_z[(i, k)]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "{family:?} z ({i},{k}): fd {fd} vs {}",
                        grads.d_z[(i, k)]
                    );
                }
            }
        }
    }
}
