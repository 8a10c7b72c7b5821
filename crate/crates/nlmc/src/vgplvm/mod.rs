//! Variational Bayesian GP-LVM / MRD on sparsely observed multi-view data:
//! collapsed evidence lower bound, analytic gradients, and SCG optimization.

pub mod bound;
pub mod ppca;
pub mod scg;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{NlmcError, Result};
use crate::kernels::{GaussianRows, KernelParams, KernelSpec};

pub use bound::{column_bound, full_bound, full_bound_gradients, BoundGradients, ViewGrads};
pub use ppca::init_latent_ppca;
pub use scg::{minimize, ScgOptions, ScgOutcome};

/// Floor for log-variances to avoid underflow during optimization.
pub const LOG_VAR_FLOOR: f64 = -20.0;

/// Factorized Gaussian posterior over the latent rows, variances stored in
/// log-space.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLatent {
    means: DMatrix<f64>,
    log_vars: DMatrix<f64>,
}

impl VariationalLatent {
    pub fn new(means: DMatrix<f64>, vars: &DMatrix<f64>) -> Result<Self> {
        if means.shape() != vars.shape() {
            return Err(NlmcError::dim(
                "VariationalLatent",
                format!("{:?}", means.shape()),
                format!("{:?}", vars.shape()),
            ));
        }
        if vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(NlmcError::param(
                "VariationalLatent vars",
                "variances must be finite and positive",
            ));
        }
        let log_vars = vars.map(|v| v.ln());
        Ok(VariationalLatent { means, log_vars })
    }

    pub fn from_log(means: DMatrix<f64>, log_vars: DMatrix<f64>) -> Self {
        assert_eq!(means.shape(), log_vars.shape());
        VariationalLatent { means, log_vars }
    }

    pub fn n(&self) -> usize {
        self.means.nrows()
    }

    pub fn k(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn log_vars(&self) -> &DMatrix<f64> {
        &self.log_vars
    }

    pub fn vars(&self) -> DMatrix<f64> {
        self.log_vars.map(|l| l.exp())
    }

    /// Natural-space Gaussian rows for the full latent matrix.
    pub fn all_rows(&self) -> GaussianRows {
        GaussianRows {
            means: self.means.clone(),
            vars: self.vars(),
        }
    }

    /// Natural-space Gaussian rows for a subset.
    pub fn subset(&self, rows: &[usize]) -> GaussianRows {
        let k = self.k();
        let mut means = DMatrix::zeros(rows.len(), k);
        let mut vars = DMatrix::zeros(rows.len(), k);
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..k {
                means[(i, j)] = self.means[(r, j)];
                vars[(i, j)] = self.log_vars[(r, j)].exp();
            }
        }
        GaussianRows { means, vars }
    }
}

/// Per-view kernel, noise, and inducing inputs.
#[derive(Debug, Clone)]
pub struct ViewModel {
    pub spec: KernelSpec,
    pub params: KernelParams,
    pub log_noise_variance: f64,
    pub inducing: DMatrix<f64>,
}

impl ViewModel {
    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.nrows()
    }
}

/// Prior over latent rows: a standard normal everywhere, or a snapshot prior
/// over a leading row range (the incremental-learning coupling) with the
/// standard prior on the rest.
#[derive(Debug, Clone)]
pub enum LatentPrior {
    Standard,
    SnapshotFirst {
        /// Prior moments for rows 0..means.nrows().
        means: DMatrix<f64>,
        vars: DMatrix<f64>,
    },
}

impl LatentPrior {
    pub fn snapshot_rows(&self) -> usize {
        match self {
            LatentPrior::Standard => 0,
            LatentPrior::SnapshotFirst { means, .. } => means.nrows(),
        }
    }
}

/// Multi-view model: one shared latent matrix, one ViewModel per view.
#[derive(Debug, Clone)]
pub struct MrdModel {
    pub latent: VariationalLatent,
    pub views: Vec<ViewModel>,
    pub prior: LatentPrior,
}

impl MrdModel {
    pub fn validate(&self, ds: &MultiViewDataset) -> Result<()> {
        if ds.n_views() != self.views.len() {
            return Err(NlmcError::dim(
                "MrdModel views",
                format!("{}", ds.n_views()),
                format!("{}", self.views.len()),
            ));
        }
        if ds.n_rows() != self.latent.n() {
            return Err(NlmcError::dim(
                "MrdModel rows",
                format!("{}", ds.n_rows()),
                format!("{}", self.latent.n()),
            ));
        }
        let k = self.latent.k();
        for v in &self.views {
            if v.spec.latent_dim != k || v.inducing.ncols() != k {
                return Err(NlmcError::dim(
                    "MrdModel latent dim",
                    format!("{k}"),
                    format!("view with {} / z {}", v.spec.latent_dim, v.inducing.ncols()),
                ));
            }
            if v.n_inducing() > self.latent.n() {
                return Err(NlmcError::param(
                    "inducing",
                    format!(
                        "M = {} exceeds N = {}",
                        v.n_inducing(),
                        self.latent.n()
                    ),
                ));
            }
        }
        if self.prior.snapshot_rows() > self.latent.n() {
            return Err(NlmcError::param(
                "prior",
                "snapshot prior covers more rows than the model holds",
            ));
        }
        Ok(())
    }

    /// KL(q(X) || prior): standard-normal rows plus snapshot rows.
    pub fn kl_term(&self) -> f64 {
        let n = self.latent.n();
        let k = self.latent.k();
        let snap = self.prior.snapshot_rows();
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..k {
                let mu = self.latent.means[(i, j)];
                let log_s = self.latent.log_vars[(i, j)];
                let s = log_s.exp();
                if i < snap {
                    let (pm, pv) = match &self.prior {
                        LatentPrior::SnapshotFirst { means, vars } => (means[(i, j)], vars[(i, j)]),
                        LatentPrior::Standard => unreachable!(),
                    };
                    let d = mu - pm;
                    kl += 0.5 * ((s + d * d) / pv - 1.0 + pv.ln() - log_s);
                } else {
                    kl += 0.5 * (mu * mu + s - log_s - 1.0);
                }
            }
        }
        kl
    }

    /// Gradients of the KL term with respect to means and log-variances.
    pub fn kl_gradients(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.latent.n();
        let k = self.latent.k();
        let snap = self.prior.snapshot_rows();
        let mut d_means = DMatrix::zeros(n, k);
        let mut d_log_vars = DMatrix::zeros(n, k);
        for i in 0..n {
            for j in 0..k {
                let mu = self.latent.means[(i, j)];
                let s = self.latent.log_vars[(i, j)].exp();
                if i < snap {
                    let (pm, pv) = match &self.prior {
                        LatentPrior::SnapshotFirst { means, vars } => (means[(i, j)], vars[(i, j)]),
                        LatentPrior::Standard => unreachable!(),
                    };
                    d_means[(i, j)] = (mu - pm) / pv;
                    d_log_vars[(i, j)] = 0.5 * (s / pv - 1.0);
                } else {
                    d_means[(i, j)] = mu;
                    d_log_vars[(i, j)] = 0.5 * (s - 1.0);
                }
            }
        }
        (d_means, d_log_vars)
    }
}

/// Layout of the flat unconstrained parameter vector used by the optimizer:
/// latent means, latent log-variances, then per view the inducing inputs and
/// log-space hyperparameters unless frozen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackLayout {
    pub n: usize,
    pub k: usize,
    pub view_inducing: Vec<usize>,
    pub include_hyperparams: bool,
}

impl PackLayout {
    pub fn of(model: &MrdModel, include_hyperparams: bool) -> Self {
        PackLayout {
            n: model.latent.n(),
            k: model.latent.k(),
            view_inducing: model.views.iter().map(|v| v.n_inducing()).collect(),
            include_hyperparams,
        }
    }

    pub fn len(&self) -> usize {
        let mut len = 2 * self.n * self.k;
        if self.include_hyperparams {
            for &m in &self.view_inducing {
                len += m * self.k + 1 + self.k + 1;
            }
        }
        len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable name of the parameter block containing `idx`.
    pub fn block_name(&self, idx: usize) -> String {
        let nk = self.n * self.k;
        if idx < nk {
            return format!("latent means (row {})", idx / self.k);
        }
        let idx = idx - nk;
        if idx < nk {
            return format!("latent log-variances (row {})", idx / self.k);
        }
        let mut idx = idx - nk;
        for (v, &m) in self.view_inducing.iter().enumerate() {
            let zlen = m * self.k;
            if idx < zlen {
                return format!("view {v} inducing inputs");
            }
            idx -= zlen;
            if idx == 0 {
                return format!("view {v} log signal variance");
            }
            idx -= 1;
            if idx < self.k {
                return format!("view {v} log ARD weights");
            }
            idx -= self.k;
            if idx == 0 {
                return format!("view {v} log noise variance");
            }
            idx -= 1;
        }
        "unknown".into()
    }
}

pub fn pack(model: &MrdModel, layout: &PackLayout) -> Vec<f64> {
    let mut x = Vec::with_capacity(layout.len());
    let (n, k) = (layout.n, layout.k);
    for i in 0..n {
        for j in 0..k {
            x.push(model.latent.means[(i, j)]);
        }
    }
    for i in 0..n {
        for j in 0..k {
            x.push(model.latent.log_vars[(i, j)].max(LOG_VAR_FLOOR));
        }
    }
    if layout.include_hyperparams {
        for view in &model.views {
            for i in 0..view.n_inducing() {
                for j in 0..k {
                    x.push(view.inducing[(i, j)]);
                }
            }
            x.push(view.params.log_signal_variance());
            x.extend_from_slice(view.params.log_ard_weights());
            x.push(view.log_noise_variance);
        }
    }
    debug_assert_eq!(x.len(), layout.len());
    x
}

pub fn unpack(model: &mut MrdModel, layout: &PackLayout, x: &[f64]) {
    debug_assert_eq!(x.len(), layout.len());
    let (n, k) = (layout.n, layout.k);
    let mut pos = 0;
    for i in 0..n {
        for j in 0..k {
            model.latent.means[(i, j)] = x[pos];
            pos += 1;
        }
    }
    for i in 0..n {
        for j in 0..k {
            model.latent.log_vars[(i, j)] = x[pos].max(LOG_VAR_FLOOR);
            pos += 1;
        }
    }
    if layout.include_hyperparams {
        for view in &mut model.views {
            let m = view.n_inducing();
            for i in 0..m {
                for j in 0..k {
                    view.inducing[(i, j)] = x[pos];
                    pos += 1;
                }
            }
            view.params.set_log_signal_variance(x[pos]);
            pos += 1;
            for j in 0..k {
                view.params.set_log_ard_weight(j, x[pos]);
                pos += 1;
            }
            view.log_noise_variance = x[pos];
            pos += 1;
        }
    }
}

/// Pack bound gradients in the same layout (gradients of the bound, not of
/// the negated objective).
pub fn pack_gradients(grads: &BoundGradients, layout: &PackLayout) -> Vec<f64> {
    let mut g = Vec::with_capacity(layout.len());
    let (n, k) = (layout.n, layout.k);
    for i in 0..n {
        for j in 0..k {
            g.push(grads.d_means[(i, j)]);
        }
    }
    for i in 0..n {
        for j in 0..k {
            g.push(grads.d_log_vars[(i, j)]);
        }
    }
    if layout.include_hyperparams {
        for view in &grads.views {
            let m = view.d_inducing.nrows();
            for i in 0..m {
                for j in 0..k {
                    g.push(view.d_inducing[(i, j)]);
                }
            }
            g.push(view.d_log_signal_variance);
            g.extend_from_slice(&view.d_log_ard);
            g.push(view.d_log_noise);
        }
    }
    debug_assert_eq!(g.len(), layout.len());
    g
}

/// Standard-normal KL for a single Gaussian row against N(0, I), used by
/// test-time inference.
pub fn standard_kl_row(mean: &[f64], log_var: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .map(|(&mu, &ls)| {
            let s = ls.exp();
            0.5 * (mu * mu + s - ls - 1.0)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> MrdModel {
        let means = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]);
        let vars = DMatrix::from_element(2, 2, 1.0);
        let latent = VariationalLatent::new(means, &vars).unwrap();
        let spec = KernelSpec::new(crate::kernels::KernelFamily::RbfArd, 2).unwrap();
        let params = KernelParams::new(1.0, &[1.0, 1.0]).unwrap();
        MrdModel {
            latent,
            views: vec![ViewModel {
                spec,
                params,
                log_noise_variance: (0.1f64).ln(),
                inducing: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.5]),
            }],
            prior: LatentPrior::Standard,
        }
    }

    #[test]
    fn kl_zero_at_prior() {
        let mut model = toy_model();
        model.latent.means.fill(0.0);
        model.latent.log_vars.fill(0.0);
        assert!(model.kl_term().abs() < 1e-15);
        // any deviation makes it strictly positive
        model.latent.means[(0, 0)] = 0.3;
        assert!(model.kl_term() > 0.0);
    }

    #[test]
    fn kl_mean_gradient_is_mean_for_standard_prior() {
        let model = toy_model();
        let (d_means, _) = model.kl_gradients();
        assert_eq!(d_means, model.latent.means);
    }

    #[test]
    fn snapshot_kl_single_entry_perturbation() {
        // KL(q || snapshot) with q equal to the snapshot except one mean
        // entry moved by delta equals delta^2 / (2 * snapshot variance).
        let mut model = toy_model();
        let snap_means = model.latent.means.clone();
        let snap_vars = model.latent.vars();
        model.prior = LatentPrior::SnapshotFirst {
            means: snap_means,
            vars: snap_vars.clone(),
        };
        assert!(model.kl_term().abs() < 1e-15);
        let delta = 0.37;
        model.latent.means[(1, 0)] += delta;
        let expect = delta * delta / (2.0 * snap_vars[(1, 0)]);
        assert!((model.kl_term() - expect).abs() < 1e-12);
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let model = toy_model();
        let layout = PackLayout::of(&model, true);
        let x = pack(&model, &layout);
        let mut copy = model.clone();
        // perturb, then restore from x
        copy.latent.means[(0, 0)] = 99.0;
        copy.views[0].log_noise_variance = 3.0;
        unpack(&mut copy, &layout, &x);
        assert_eq!(copy.latent.means, model.latent.means);
        assert_eq!(copy.views[0].log_noise_variance, model.views[0].log_noise_variance);
        assert_eq!(copy.views[0].inducing, model.views[0].inducing);
    }

    #[test]
    fn block_names_cover_layout() {
        let model = toy_model();
        let layout = PackLayout::of(&model, true);
        for idx in 0..layout.len() {
            assert_ne!(layout.block_name(idx), "unknown", "index {idx}");
        }
    }
}
