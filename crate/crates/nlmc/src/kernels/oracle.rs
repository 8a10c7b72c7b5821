//! Monte-Carlo estimator of the psi statistics, used as an independent
//! test oracle for the closed-form and quadrature paths.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::util::{packed_len, unpack_symmetric};

use super::psi::{GaussianRows, PsiStats};
use super::{kernel_value, KernelParams, KernelSpec};

/// Monte-Carlo psi estimate with a standard error per entry.
#[derive(Debug, Clone)]
pub struct PsiStatsMc {
    pub stats: PsiStats,
    pub se_psi0: f64,
    pub se_psi1: DMatrix<f64>,
    pub se_psi2: DMatrix<f64>,
}

/// Unbiased Monte-Carlo estimate of the psi statistics over `n_samples`
/// draws per row. Deterministic given the seed.
pub fn monte_carlo_psi_oracle(
    spec: &KernelSpec,
    params: &KernelParams,
    q: &GaussianRows,
    z: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<PsiStatsMc> {
    assert!(n_samples >= 1, "n_samples must be at least 1");
    let n = q.len();
    let m = z.nrows();
    let kd = spec.latent_dim;
    let p = packed_len(m);
    let sf2 = params.signal_variance();
    let alpha = params.ard_weights();

    let mut zr = vec![0.0; m * kd];
    for j in 0..m {
        for k in 0..kd {
            zr[j * kd + k] = z[(j, k)];
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let mut psi0 = 0.0;
    let mut var0 = 0.0;
    let mut psi1 = DMatrix::zeros(n, m);
    let mut se1 = DMatrix::zeros(n, m);
    let mut sum2 = vec![0.0; p];
    let mut var2 = vec![0.0; p];

    let mut x = vec![0.0; kd];
    let mut kv = vec![0.0; m];
    let s_f = n_samples as f64;

    for row in 0..n {
        let mut sum0_r = 0.0;
        let mut sq0_r = 0.0;
        let mut sum1_r = vec![0.0; m];
        let mut sq1_r = vec![0.0; m];
        let mut sum2_r = vec![0.0; p];
        let mut sq2_r = vec![0.0; p];
        for _ in 0..n_samples {
            for k in 0..kd {
                let e: f64 = normal.sample(&mut rng);
                x[k] = q.means[(row, k)] + q.vars[(row, k)].sqrt() * e;
            }
            let kxx = kernel_value(spec.family, sf2, &alpha, &x, &x);
            sum0_r += kxx;
            sq0_r += kxx * kxx;
            for (j, kvj) in kv.iter_mut().enumerate() {
                *kvj = kernel_value(spec.family, sf2, &alpha, &x, &zr[j * kd..(j + 1) * kd]);
            }
            for j in 0..m {
                sum1_r[j] += kv[j];
                sq1_r[j] += kv[j] * kv[j];
            }
            let mut idx = 0;
            for j in 0..m {
                for j2 in j..m {
                    let prod = kv[j] * kv[j2];
                    sum2_r[idx] += prod;
                    sq2_r[idx] += prod * prod;
                    idx += 1;
                }
            }
        }
        let sample_var = |sum: f64, sq: f64| -> f64 {
            if n_samples < 2 {
                return 0.0;
            }
            let mean = sum / s_f;
            ((sq / s_f - mean * mean) * s_f / (s_f - 1.0)).max(0.0)
        };
        psi0 += sum0_r / s_f;
        var0 += sample_var(sum0_r, sq0_r) / s_f;
        for j in 0..m {
            psi1[(row, j)] = sum1_r[j] / s_f;
            se1[(row, j)] = (sample_var(sum1_r[j], sq1_r[j]) / s_f).sqrt();
        }
        for idx in 0..p {
            sum2[idx] += sum2_r[idx] / s_f;
            var2[idx] += sample_var(sum2_r[idx], sq2_r[idx]) / s_f;
        }
    }

    let psi2 = unpack_symmetric(m, &sum2);
    let se2_packed: Vec<f64> = var2.iter().map(|v| v.sqrt()).collect();
    let se_psi2 = unpack_symmetric(m, &se2_packed);

    Ok(PsiStatsMc {
        stats: PsiStats {
            psi0,
            psi1,
            psi2,
        },
        se_psi0: var0.sqrt(),
        se_psi1: se1,
        se_psi2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{psi_statistics, KernelFamily};

    #[test]
    fn degenerate_single_sample_matches_closed_form() {
        let spec = KernelSpec::new(KernelFamily::RbfArd, 2).unwrap();
        let params = KernelParams::new(1.3, &[0.6, 1.1]).unwrap();
        let q = GaussianRows::new(
            DMatrix::from_row_slice(2, 2, &[0.5, -0.4, 1.0, 0.3]),
            DMatrix::from_element(2, 2, 1e-300),
        )
        .unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, -0.8, 0.2]);
        let mc = monte_carlo_psi_oracle(&spec, &params, &q, &z, 1, 7).unwrap();
        let exact = psi_statistics(&spec, &params, &q, &z).unwrap();
        assert!((mc.stats.psi0 - exact.psi0).abs() < 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                assert!((mc.stats.psi1[(i, j)] - exact.psi1[(i, j)]).abs() < 1e-12);
                assert!((mc.stats.psi2[(i, j)] - exact.psi2[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rbf_one_dimensional_value_within_three_sigma() {
        // Closed form 1/sqrt(2) with mu=0, S=1, z=0 and unit parameters.
        let spec = KernelSpec::new(KernelFamily::RbfArd, 1).unwrap();
        let params = KernelParams::new(1.0, &[1.0]).unwrap();
        let q = GaussianRows::new(
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
        )
        .unwrap();
        let z = DMatrix::from_row_slice(1, 1, &[0.0]);
        let mc = monte_carlo_psi_oracle(&spec, &params, &q, &z, 1_000_000, 42).unwrap();
        let expect = 0.7071067811865476;
        let dev = (mc.stats.psi1[(0, 0)] - expect).abs();
        assert!(dev < 3.0 * mc.se_psi1[(0, 0)], "dev {dev}, se {}", mc.se_psi1[(0, 0)]);
        assert!(dev < 1e-3);
    }

    #[test]
    fn linear_psi1_matches_closed_form_within_three_se() {
        let spec = KernelSpec::new(KernelFamily::LinearArd, 2).unwrap();
        let params = KernelParams::new(0.9, &[1.4, 0.5]).unwrap();
        let q = GaussianRows::new(
            DMatrix::from_row_slice(1, 2, &[0.7, -0.2]),
            DMatrix::from_row_slice(1, 2, &[0.4, 0.8]),
        )
        .unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.6, 0.8]);
        let mc = monte_carlo_psi_oracle(&spec, &params, &q, &z, 200_000, 11).unwrap();
        let exact = psi_statistics(&spec, &params, &q, &z).unwrap();
        for j in 0..2 {
            let dev = (mc.stats.psi1[(0, j)] - exact.psi1[(0, j)]).abs();
            let se = mc.se_psi1[(0, j)].max(1e-12);
            assert!(dev < 3.0 * se, "psi1[{j}] dev {dev} vs se {se}");
        }
    }
}
