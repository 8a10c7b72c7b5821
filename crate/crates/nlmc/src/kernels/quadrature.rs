//! Gauss-Hermite quadrature nodes via Golub-Welsch.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

/// Quadrature order per latent dimension for kernels without closed-form
/// Gaussian expectations.
pub const GH_ORDER: usize = 20;

/// Maximum number of tensor-product nodes before the expectation is refused.
pub const GH_NODE_BUDGET: usize = 200_000;

/// Physicists' Gauss-Hermite rule: nodes x_i and weights w_i for the weight
/// function exp(-x^2), so that sum(w_i) = sqrt(pi).
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let beta = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = beta;
        jacobi[(k, k - 1)] = beta;
    }
    let eig = SymmetricEigen::new(jacobi);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let first = eig.eigenvectors[(0, i)];
            (node, sqrt_pi * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Cached rule of order [`GH_ORDER`] with weights normalized to sum to one,
/// ready for expectations over a standard normal via x = mu + sqrt(2 s) * node.
pub fn standard_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (nodes, weights) = gauss_hermite(GH_ORDER);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let normalized = weights.iter().map(|w| w / sqrt_pi).collect();
        (nodes, normalized)
    })
}

/// Odometer over the tensor-product grid: calls `f` with the node vector and
/// combined weight for each of order^dims points.
pub fn for_each_node<F: FnMut(&[f64], f64)>(dims: usize, mut f: F) {
    let (nodes, weights) = standard_rule();
    let order = nodes.len();
    let mut idx = vec![0usize; dims];
    let mut point = vec![0.0f64; dims];
    loop {
        let mut w = 1.0;
        for d in 0..dims {
            point[d] = nodes[idx[d]];
            w *= weights[idx[d]];
        }
        f(&point, w);
        // advance odometer
        let mut d = 0;
        loop {
            if d == dims {
                return;
            }
            idx[d] += 1;
            if idx[d] < order {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        let (_, w) = gauss_hermite(GH_ORDER);
        let total: f64 = w.iter().sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn integrates_moments_of_standard_normal() {
        // E[x^2] = 1 and E[x^4] = 3 for x ~ N(0, 1).
        let (nodes, weights) = standard_rule();
        let m2: f64 = nodes
            .iter()
            .zip(weights)
            .map(|(x, w)| w * 2.0 * x * x)
            .sum();
        let m4: f64 = nodes
            .iter()
            .zip(weights)
            .map(|(x, w)| w * 4.0 * x.powi(4))
            .sum();
        assert!((m2 - 1.0).abs() < 1e-10, "m2 = {m2}");
        assert!((m4 - 3.0).abs() < 1e-9, "m4 = {m4}");
    }

    #[test]
    fn tensor_grid_weight_total() {
        let mut total = 0.0;
        for_each_node(2, |_, w| total += w);
        assert!((total - 1.0).abs() < 1e-12);
    }
}
