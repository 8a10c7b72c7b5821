//! SCG optimization of an MRD model over a dataset.

use crate::data::MultiViewDataset;
use crate::error::{NlmcError, Result};
use crate::vgplvm::scg::{minimize, ScgOptions};
use crate::vgplvm::{full_bound_gradients, pack, pack_gradients, unpack, MrdModel, PackLayout};

/// Optimization trace in bound space (non-decreasing up to rejected steps,
/// which never lower the incumbent).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bound: f64,
    pub bound_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

/// Maximize the collapsed bound over the model parameters in place.
///
/// `include_hyperparams` selects whether inducing inputs and kernel/noise
/// parameters are optimized alongside the variational moments.
pub fn scg_optimize_model(
    model: &mut MrdModel,
    ds: &MultiViewDataset,
    opts: &ScgOptions,
    include_hyperparams: bool,
) -> Result<TrainOutcome> {
    model.validate(ds)?;
    if opts.max_iters == 0 {
        let bound = crate::vgplvm::full_bound(model, ds)?;
        return Ok(TrainOutcome {
            bound,
            bound_trace: vec![bound],
            iterations: 0,
            converged: false,
            evaluations: 1,
        });
    }
    let layout = PackLayout::of(model, include_hyperparams);
    let x0 = pack(model, &layout);
    let mut scratch = model.clone();

    let eval = |x: &[f64], grad: &mut [f64]| -> Result<f64> {
        unpack(&mut scratch, &layout, x);
        let (f, grads) = full_bound_gradients(&scratch, ds)?;
        let g = pack_gradients(&grads, &layout);
        for (gi, v) in grad.iter_mut().zip(&g) {
            *gi = -v;
        }
        if !f.is_finite() {
            return Err(NlmcError::OptimizerAbort {
                block: "objective value".into(),
            });
        }
        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NlmcError::OptimizerAbort {
                block: layout.block_name(bad),
            });
        }
        Ok(-f)
    };

    let outcome = minimize(x0, eval, opts)?;
    unpack(model, &layout, &outcome.x);
    Ok(TrainOutcome {
        bound: -outcome.f,
        bound_trace: outcome.trace.iter().map(|f| -f).collect(),
        iterations: outcome.iterations,
        converged: outcome.converged,
        evaluations: outcome.evaluations,
    })
}
