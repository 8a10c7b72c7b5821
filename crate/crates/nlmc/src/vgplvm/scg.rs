//! Scaled conjugate gradients (Moller 1993) over a flat parameter vector.
//!
//! The objective closure returns the value and fills the gradient. A failed
//! or non-finite evaluation at a candidate point rejects the step; at the
//! incumbent it aborts with a diagnostic.

use crate::error::{NlmcError, Result};

#[derive(Debug, Clone)]
pub struct ScgOptions {
    pub max_iters: usize,
    /// Relative improvement threshold for convergence...
    pub rel_tol: f64,
    /// ...measured over this many iterations.
    pub window: usize,
}

impl Default for ScgOptions {
    fn default() -> Self {
        ScgOptions {
            max_iters: 500,
            rel_tol: 1e-9,
            window: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScgOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    /// Objective value after each iteration (incumbent, never increasing).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `eval` starting from `x0`.
pub fn minimize<F>(x0: Vec<f64>, mut eval: F, opts: &ScgOptions) -> Result<ScgOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad_new = vec![0.0; n];
    let mut f_now = eval(&x, &mut grad_new)?;
    let mut evaluations = 1;
    if !f_now.is_finite() {
        return Err(NlmcError::OptimizerAbort {
            block: "initial objective".into(),
        });
    }

    let sigma0 = 1e-7;
    let mut beta = 1.0f64;
    let beta_min = 1e-15;
    let beta_max = 1e15;
    let mut d: Vec<f64> = grad_new.iter().map(|g| -g).collect();
    let mut grad_old = grad_new.clone();
    let mut success = true;
    let mut nsuccess = 0usize;
    let mut trace = Vec::with_capacity(opts.max_iters + 1);
    trace.push(f_now);
    let mut converged = false;
    let mut iterations = 0;

    let mut mu = 0.0;
    let mut kappa = 0.0;
    let mut theta = 0.0;
    let mut gplus = vec![0.0; n];
    let mut xprobe = vec![0.0; n];
    let mut grad_cand = vec![0.0; n];

    for _ in 0..opts.max_iters {
        iterations += 1;
        if success {
            mu = dot(&d, &grad_new);
            if mu >= 0.0 {
                for i in 0..n {
                    d[i] = -grad_new[i];
                }
                mu = dot(&d, &grad_new);
            }
            kappa = dot(&d, &d);
            if kappa < 1e-30 {
                converged = true;
                trace.push(f_now);
                break;
            }
            let sigma = sigma0 / kappa.sqrt();
            for i in 0..n {
                xprobe[i] = x[i] + sigma * d[i];
            }
            match eval(&xprobe, &mut gplus) {
                Ok(fp) if fp.is_finite() && gplus.iter().all(|g| g.is_finite()) => {
                    evaluations += 1;
                    theta = (dot(&d, &gplus) - mu) / sigma;
                }
                _ => {
                    // probe failed: treat as strong curvature so the step shrinks
                    evaluations += 1;
                    theta = 4.0 * beta * kappa;
                }
            }
        }

        let mut delta = theta + beta * kappa;
        if delta <= 0.0 {
            delta = beta * kappa;
            beta -= theta / kappa;
        }
        let alpha = -mu / delta;

        for i in 0..n {
            xprobe[i] = x[i] + alpha * d[i];
        }
        let cand = eval(&xprobe, &mut grad_cand);
        evaluations += 1;
        let (accept, f_new) = match cand {
            Ok(f) if f.is_finite() && grad_cand.iter().all(|g| g.is_finite()) => {
                let improvement = 2.0 * (f - f_now) / (alpha * mu);
                (improvement >= 0.0, f)
            }
            _ => (false, f64::INFINITY),
        };
        let comparison = if accept {
            2.0 * (f_new - f_now) / (alpha * mu)
        } else {
            -1.0
        };

        if accept {
            std::mem::swap(&mut x, &mut xprobe);
            std::mem::swap(&mut grad_old, &mut grad_new);
            std::mem::swap(&mut grad_new, &mut grad_cand);
            f_now = f_new;
            success = true;
            nsuccess += 1;
        } else {
            success = false;
        }
        trace.push(f_now);

        if comparison < 0.25 {
            beta = (4.0 * beta).min(beta_max);
        }
        if comparison > 0.75 {
            beta = (0.5 * beta).max(beta_min);
        }

        if success {
            if dot(&grad_new, &grad_new) < 1e-30 {
                converged = true;
                break;
            }
            if nsuccess == n {
                for i in 0..n {
                    d[i] = -grad_new[i];
                }
                nsuccess = 0;
            } else {
                let gamma = (dot(&grad_old, &grad_new) - dot(&grad_new, &grad_new)) / mu;
                for i in 0..n {
                    d[i] = gamma * d[i] - grad_new[i];
                }
            }
        }

        // relative improvement below rel_tol over the trailing window
        if trace.len() > opts.window {
            let before = trace[trace.len() - 1 - opts.window];
            let improvement = before - f_now;
            if improvement < opts.rel_tol * (1.0 + f_now.abs()) {
                converged = true;
                break;
            }
        }
    }

    Ok(ScgOutcome {
        x,
        f: f_now,
        trace,
        iterations,
        converged,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges() {
        // f(w) = ||w - a||^2 reaches a within 1e-8 in at most 50 iterations.
        let a = [1.5, -2.0, 0.25, 4.0];
        let eval = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..x.len() {
                let d = x[i] - a[i];
                f += d * d;
                g[i] = 2.0 * d;
            }
            Ok(f)
        };
        let out = minimize(vec![0.0; 4], eval, &ScgOptions {
            max_iters: 50,
            rel_tol: 1e-16,
            window: 10,
        })
        .unwrap();
        for i in 0..4 {
            assert!((out.x[i] - a[i]).abs() < 1e-8, "dim {i}: {}", out.x[i]);
        }
    }

    #[test]
    fn trace_is_non_increasing() {
        // Rosenbrock is awkward enough to force rejected steps.
        let eval = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (1.0, 100.0);
            let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            g[0] = -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 2.0 * b * (x[1] - x[0] * x[0]);
            Ok(f)
        };
        let out = minimize(vec![-1.2, 1.0], eval, &ScgOptions {
            max_iters: 200,
            rel_tol: 1e-14,
            window: 10,
        })
        .unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "incumbent increased: {} -> {}", w[0], w[1]);
        }
        assert!(out.f < 1e-3);
    }

    #[test]
    fn candidate_failures_are_rejected_not_fatal() {
        // objective undefined for x < -0.5; optimizer must still move toward 0
        let eval = |x: &[f64], g: &mut [f64]| {
            if x[0] < -0.5 {
                return Err(crate::error::NlmcError::numerical("out of domain"));
            }
            g[0] = 2.0 * x[0];
            Ok(x[0] * x[0])
        };
        let out = minimize(vec![2.0], eval, &ScgOptions::default()).unwrap();
        assert!(out.f < 1e-10);
    }
}
