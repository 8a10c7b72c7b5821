//! Probabilistic-PCA initialization of the latent means on mean-imputed
//! multi-view data.

use nalgebra::DMatrix;

use crate::data::MultiViewDataset;
use crate::error::{NlmcError, Result};

/// Mean-imputed, centered concatenation of all views over a row block.
/// Missing entries are imputed with the per-column observed mean (within the
/// block); all-missing columns are dropped. Because imputed entries equal
/// the column mean, they are exactly zero after centering.
pub(crate) fn imputed_centered(ds: &MultiViewDataset, rows: &[usize]) -> DMatrix<f64> {
    let n = rows.len();
    let mut row_index = std::collections::HashMap::new();
    for (i, &r) in rows.iter().enumerate() {
        row_index.insert(r, i);
    }
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for view in ds.views() {
        for col in 0..view.n_cols() {
            let mut values = vec![f64::NAN; n];
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(row, v) in view.observed(col) {
                if let Some(&i) = row_index.get(&row) {
                    values[i] = v;
                    sum += v;
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let mean = sum / count as f64;
            for v in values.iter_mut() {
                if v.is_nan() {
                    *v = 0.0;
                } else {
                    *v -= mean;
                }
            }
            columns.push(values);
        }
    }
    let d = columns.len();
    DMatrix::from_fn(n, d, |i, j| columns[j][i])
}

/// PPCA posterior means for a row block: E[x | y] of the maximum-likelihood
/// PPCA fit on the imputed block, one row per block row.
pub fn init_latent_ppca(ds: &MultiViewDataset, k: usize, rows: &[usize]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "init_latent_ppca rows".into(),
        });
    }
    let n = rows.len();
    let y = imputed_centered(ds, rows);
    if y.ncols() == 0 {
        return Ok(DMatrix::zeros(n, k));
    }

    let svd = y.svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let sv = &svd.singular_values;
    let rank = sv.len();

    // lambda_i = s_i^2 / n; the PPCA noise is the mean of the discarded
    // spectrum.
    let lambdas: Vec<f64> = sv.iter().map(|s| s * s / n as f64).collect();
    let sigma2 = if rank > k {
        lambdas[k..].iter().sum::<f64>() / (rank - k) as f64
    } else {
        0.0
    };

    // E[x_k] = u_k s_k sqrt(lambda_k - sigma2) / lambda_k
    let mut x = DMatrix::zeros(n, k);
    for j in 0..k.min(rank) {
        let lambda = lambdas[j];
        if lambda <= sigma2 || lambda <= 0.0 {
            continue;
        }
        let scale = sv[j] * (lambda - sigma2).sqrt() / lambda;
        for i in 0..n {
            x[(i, j)] = u[(i, j)] * scale;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SparseMatrixView, Triple};

    fn dataset_from_dense(mat: &DMatrix<f64>, side: &DMatrix<f64>) -> MultiViewDataset {
        let to_view = |m: &DMatrix<f64>, name: &str| {
            let mut triples = Vec::new();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    triples.push(Triple {
                        row: i,
                        col: j,
                        value: m[(i, j)],
                    });
                }
            }
            SparseMatrixView::new(name, m.nrows(), m.ncols(), triples).unwrap()
        };
        MultiViewDataset::new(vec![to_view(mat, "t"), to_view(side, "s")], 0, vec![1]).unwrap()
    }

    #[test]
    fn single_row_block_is_zero() {
        let mat = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let side = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let ds = dataset_from_dense(&mat, &side);
        let x = init_latent_ppca(&ds, 2, &[1]).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_column_imputes_its_only_value() {
        // a column with one observed value v imputes missing entries with v,
        // so the centered column is identically zero.
        let t = SparseMatrixView::new("t", 3, 2, vec![Triple { row: 1, col: 0, value: 7.0 }]).unwrap();
        let s = SparseMatrixView::new(
            "s",
            3,
            1,
            vec![
                Triple { row: 0, col: 0, value: 1.0 },
                Triple { row: 1, col: 0, value: 2.0 },
                Triple { row: 2, col: 0, value: 3.0 },
            ],
        )
        .unwrap();
        let ds = MultiViewDataset::new(vec![t, s], 0, vec![1]).unwrap();
        let y = imputed_centered(&ds, &[0, 1, 2]);
        // dropped all-missing column, kept singleton target column + side
        assert_eq!(y.ncols(), 2);
        for i in 0..3 {
            assert_eq!(y[(i, 0)], 0.0);
        }
    }

    #[test]
    fn all_missing_columns_dropped() {
        let t = SparseMatrixView::new("t", 2, 3, vec![Triple { row: 0, col: 1, value: 1.0 }]).unwrap();
        let s = SparseMatrixView::new("s", 2, 1, vec![]).unwrap();
        let ds = MultiViewDataset::new(vec![t, s], 0, vec![1]).unwrap();
        let y = imputed_centered(&ds, &[0, 1]);
        assert_eq!(y.ncols(), 1);
    }

    #[test]
    fn rank_k_data_recovers_principal_subspace() {
        // noise-free rank-2 data: recovered latents must span the same
        // subspace as the generating factors.
        let n = 40;
        let w = DMatrix::from_row_slice(
            2,
            6,
            &[1.0, -0.5, 0.3, 0.8, -0.2, 0.1, 0.4, 0.9, -0.7, 0.2, 0.5, -0.3],
        );
        let mut z = DMatrix::zeros(n, 2);
        for i in 0..n {
            z[(i, 0)] = ((i as f64) * 0.7).sin() * 2.0;
            z[(i, 1)] = ((i as f64) * 0.3).cos() * 1.5;
        }
        let y = &z * &w;
        let side = DMatrix::zeros(n, 1);
        let ds = dataset_from_dense(&y, &side);
        let all: Vec<usize> = (0..n).collect();
        let x = init_latent_ppca(&ds, 2, &all).unwrap();

        // principal angles between span(x) and span(centered z)
        let center = |m: &DMatrix<f64>| {
            let mut c = m.clone();
            for j in 0..m.ncols() {
                let mean = m.column(j).sum() / n as f64;
                for i in 0..n {
                    c[(i, j)] -= mean;
                }
            }
            c
        };
        let ortho = |m: &DMatrix<f64>| center(m).qr().q();
        let qa = ortho(&x);
        let qb = ortho(&z);
        let overlap = qa.transpose() * qb;
        let svd = overlap.svd(false, false);
        for s in svd.singular_values.iter() {
            let angle = s.min(1.0).acos();
            assert!(angle < 1e-3, "principal angle {angle}");
        }
    }
}
