//! Synthetic multi-view data: non-linear signals drawn from a Matern-3/2 GP
//! over standard-normal latents, corrupted with Gaussian noise.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NlmcError, Result};
use crate::kernels::{kernel_matrix, KernelFamily, KernelParams, KernelSpec};
use crate::util::cholesky_with_jitter;

use super::{MultiViewDataset, SparseMatrixView, Triple};

/// Rows per GP draw before falling back to block-independent chunks.
const CHOLESKY_BUDGET: usize = 2000;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_rows: usize,
    pub dims: [usize; 3],
    pub latent_dim: usize,
    pub noise_variance: f64,
    pub target_missing_frac: f64,
    pub test_row_frac: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_rows: 2000,
            dims: [150, 100, 150],
            latent_dim: 5,
            noise_variance: 0.25,
            target_missing_frac: 0.8,
            test_row_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub latent: DMatrix<f64>,
    /// Noise-free target signal over all rows.
    pub noiseless_target: DMatrix<f64>,
    /// Noisy target values over all rows; held-out entries are evaluated
    /// against these.
    pub noisy_target: DMatrix<f64>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: MultiViewDataset,
    pub test: MultiViewDataset,
    pub truth: SyntheticTruth,
}

/// Deterministic generator: latents from a standard normal, per view D GP
/// function draws with a Matern-3/2 kernel, Gaussian noise, uniform masking
/// of the target view, and a held-out test-row split. Side views are fully
/// observed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if !(cfg.noise_variance > 0.0) {
        return Err(NlmcError::param(
            "noise_variance",
            format!("must be positive, got {}", cfg.noise_variance),
        ));
    }
    for frac in [cfg.target_missing_frac, cfg.test_row_frac] {
        if !(0.0..1.0).contains(&frac) {
            return Err(NlmcError::param(
                "fractions",
                format!("must lie in [0, 1), got {frac}"),
            ));
        }
    }
    if cfg.dims.iter().any(|&d| d == 0) || cfg.n_rows == 0 {
        return Err(NlmcError::param("dims", "rows and dims must be positive"));
    }

    let n = cfg.n_rows;
    let k = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;

    let mut latent = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            latent[(i, j)] = normal.sample(&mut rng);
        }
    }

    let spec = KernelSpec::new(KernelFamily::Matern32, k)?;
    let params = KernelParams::new(1.0, &vec![1.0; k])?;

    // Per view: GP draws in row chunks, then additive noise.
    let noise_sd = cfg.noise_variance.sqrt();
    let mut signals: Vec<DMatrix<f64>> = Vec::with_capacity(3);
    let mut noisy: Vec<DMatrix<f64>> = Vec::with_capacity(3);
    for &d_v in &cfg.dims {
        let mut f = DMatrix::zeros(n, d_v);
        let mut start = 0;
        while start < n {
            let len = (n - start).min(CHOLESKY_BUDGET);
            let chunk = latent.rows(start, len).into_owned();
            let mut kcc = kernel_matrix(&spec, &params, &chunk, &chunk)?;
            for i in 0..len {
                kcc[(i, i)] += 1e-8;
            }
            let chol = cholesky_with_jitter(&kcc, "synthetic GP draw")?;
            let l = chol.l();
            for d in 0..d_v {
                let eps = DMatrix::from_fn(len, 1, |_, _| normal.sample(&mut rng));
                let fd = &l * eps;
                for i in 0..len {
                    f[(start + i, d)] = fd[(i, 0)];
                }
            }
            start += len;
        }
        let mut y = f.clone();
        for i in 0..n {
            for d in 0..d_v {
                let e: f64 = normal.sample(&mut rng);
                y[(i, d)] += noise_sd * e;
            }
        }
        signals.push(f);
        noisy.push(y);
    }

    // Test-row split.
    let n_test = ((n as f64) * cfg.test_row_frac).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut test_rows: Vec<usize> = order[..n_test].to_vec();
    let mut train_rows: Vec<usize> = order[n_test..].to_vec();
    test_rows.sort_unstable();
    train_rows.sort_unstable();

    // Masking of the target view over training rows.
    let d1 = cfg.dims[0];
    let keep_prob = 1.0 - cfg.target_missing_frac;
    let mut train_target = Vec::new();
    for (pos, &row) in train_rows.iter().enumerate() {
        for col in 0..d1 {
            let u: f64 = rand::Rng::random(&mut rng);
            if u < keep_prob {
                train_target.push(Triple {
                    row: pos,
                    col,
                    value: noisy[0][(row, col)],
                });
            }
        }
    }

    let dense_view = |name: &str, rows: &[usize], mat: &DMatrix<f64>, d: usize| -> Result<SparseMatrixView> {
        let mut triples = Vec::with_capacity(rows.len() * d);
        for (pos, &row) in rows.iter().enumerate() {
            for col in 0..d {
                triples.push(Triple {
                    row: pos,
                    col,
                    value: mat[(row, col)],
                });
            }
        }
        SparseMatrixView::new(name, rows.len(), d, triples)
    };

    let train_views = vec![
        SparseMatrixView::new("view1", train_rows.len(), d1, train_target)?,
        dense_view("view2", &train_rows, &noisy[1], cfg.dims[1])?,
        dense_view("view3", &train_rows, &noisy[2], cfg.dims[2])?,
    ];
    let train = MultiViewDataset::with_row_ids(train_views, 0, vec![1, 2], train_rows.clone())?;

    let test_views = vec![
        dense_view("view1", &test_rows, &noisy[0], d1)?,
        dense_view("view2", &test_rows, &noisy[1], cfg.dims[1])?,
        dense_view("view3", &test_rows, &noisy[2], cfg.dims[2])?,
    ];
    let test = MultiViewDataset::with_row_ids(test_views, 0, vec![1, 2], test_rows.clone())?;

    Ok(SyntheticData {
        train,
        test,
        truth: SyntheticTruth {
            latent,
            noiseless_target: signals.swap_remove(0),
            noisy_target: noisy.swap_remove(0),
            train_rows,
            test_rows,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            seed: 7,
            n_rows: 60,
            dims: [10, 6, 8],
            latent_dim: 3,
            noise_variance: 0.1,
            target_missing_frac: 0.5,
            test_row_frac: 0.2,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.truth.latent, b.truth.latent);
        assert_eq!(a.train.target().n_observed(), b.train.target().n_observed());
        let ta: Vec<_> = a.train.target().triples().collect();
        let tb: Vec<_> = b.train.target().triples().collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn no_masking_means_fully_observed_target() {
        let mut cfg = small_cfg();
        cfg.target_missing_frac = 0.0;
        let d = generate_synthetic(&cfg).unwrap();
        assert_eq!(
            d.train.target().n_observed(),
            d.train.n_rows() * cfg.dims[0]
        );
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(d.truth.test_rows.len(), 12);
        assert_eq!(d.truth.train_rows.len(), 48);
        for r in &d.truth.test_rows {
            assert!(!d.truth.train_rows.contains(r));
        }
        assert_eq!(d.test.n_rows(), 12);
        // Side views fully observed in both splits.
        assert_eq!(d.train.view(1).n_observed(), 48 * 6);
        assert_eq!(d.test.view(2).n_observed(), 12 * 8);
    }

    #[test]
    fn nonpositive_noise_rejected() {
        let mut cfg = small_cfg();
        cfg.noise_variance = 0.0;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn masking_count_matches_binomial_expectation() {
        let cfg = SyntheticConfig {
            seed: 7,
            n_rows: 2000,
            dims: [150, 16, 16],
            latent_dim: 5,
            noise_variance: 0.25,
            target_missing_frac: 0.8,
            test_row_frac: 0.2,
        };
        let d = generate_synthetic(&cfg).unwrap();
        // 0.20 * (0.80 * 2000) * 150 = 48,000 expected observed entries.
        let observed = d.train.target().n_observed() as f64;
        let mean = 48000.0;
        let sd = (48000.0_f64 * 0.8).sqrt();
        assert!(
            (observed - mean).abs() < 5.0 * sd,
            "observed {observed}, expected {mean} +- {sd}"
        );
    }
}
