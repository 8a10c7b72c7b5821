//! Small shared helpers: hashing, packed symmetric storage, Cholesky with
//! jitter escalation.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{NlmcError, Result};

/// FNV-1a 64-bit hash, used for config fingerprints and derived seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a per-job seed from the global seed and a job identifier.
pub fn derive_seed(global_seed: u64, job_id: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + job_id.len());
    bytes.extend_from_slice(&global_seed.to_le_bytes());
    bytes.extend_from_slice(job_id.as_bytes());
    fnv1a64(&bytes)
}

/// Number of entries in the packed upper triangle of an `m`x`m` symmetric matrix.
pub fn packed_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Index into packed upper-triangular storage for (i, j) with i <= j.
/// Layout is row-major over the upper triangle.
#[inline]
pub fn packed_index(m: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < m);
    i * (2 * m - i + 1) / 2 + (j - i)
}

/// Unpack packed upper-triangular storage into a full symmetric matrix.
pub fn unpack_symmetric(m: usize, packed: &[f64]) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(m, m);
    let mut p = 0;
    for i in 0..m {
        for j in i..m {
            full[(i, j)] = packed[p];
            full[(j, i)] = packed[p];
            p += 1;
        }
    }
    full
}

/// Pack a symmetric adjoint into upper-triangular weights. Off-diagonal
/// entries are doubled so that a packed forward value contributes to both
/// (i, j) and (j, i) positions of the full matrix.
pub fn pack_adjoint(full: &DMatrix<f64>) -> Vec<f64> {
    let m = full.nrows();
    let mut packed = Vec::with_capacity(packed_len(m));
    for i in 0..m {
        for j in i..m {
            if i == j {
                packed.push(full[(i, i)]);
            } else {
                packed.push(full[(i, j)] + full[(j, i)]);
            }
        }
    }
    packed
}

/// Cholesky factorization with escalating jitter.
///
/// The bare matrix is tried first so that well-conditioned problems are
/// unaffected. On failure, `jitter * mean(diag)` is added with jitter
/// escalating tenfold from 1e-6 up to 1e-2 before giving up.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(chol);
    }
    let m = mat.nrows();
    let mean_diag = mat.diagonal().iter().sum::<f64>() / m.max(1) as f64;
    let scale = if mean_diag.abs() > 0.0 { mean_diag.abs() } else { 1.0 };
    let mut jitter = 1e-6;
    while jitter <= 1e-2 + 1e-12 {
        let mut jittered = mat.clone();
        for i in 0..m {
            jittered[(i, i)] += jitter * scale;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(NlmcError::numerical(format!(
        "Cholesky failed after jitter escalation in {context}"
    )))
}

/// Sum of the logs of the Cholesky factor diagonal; half the log-determinant.
pub fn half_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Element-wise median. For an even count, the mean of the two middle values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median of non-finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
