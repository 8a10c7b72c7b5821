//! Out-of-matrix prediction: test-row latent inference per expert,
//! uncertain-input GP prediction, and product-of-experts aggregation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::coupling::{Expert, ExpertKind};
use crate::data::MultiViewDataset;
use crate::error::{NlmcError, Result};
use crate::kernels::psi::{psi_row_vjp, RowVjpOut};
use crate::kernels::{build_psi_row_cache, GaussianRows};
use crate::util::{cholesky_with_jitter, half_log_det, pack_adjoint, unpack_symmetric};
use crate::vgplvm::scg::{minimize, ScgOptions};
use crate::vgplvm::ViewModel;

mod csv;

pub use csv::{parse_predictions_csv, read_predictions_csv, render_predictions_csv, write_predictions_csv};

const LN_2PI: f64 = 1.8378770664093453;

/// Variational posterior over one test row's latent position.
#[derive(Debug, Clone)]
pub struct TestLatent {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// true when inference fell back to the nearest-neighbor initialization
    pub fallback: bool,
}

/// One predictive Gaussian for a (row, column) cell of a view.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub row_id: usize,
    pub col_id: usize,
    pub view: usize,
    pub mean: f64,
    pub variance: f64,
    pub clamped: bool,
}

/// Observed values of one test row, per view, sorted by column.
#[derive(Debug, Clone)]
pub struct RowObservations {
    pub per_view: Vec<Vec<(usize, f64)>>,
}

impl RowObservations {
    pub fn of_row(ds: &MultiViewDataset, row: usize) -> Self {
        RowObservations {
            per_view: ds.views().iter().map(|v| v.row_observations(row)).collect(),
        }
    }

    fn side_count(&self, side_views: &[usize]) -> usize {
        side_views.iter().map(|&v| self.per_view[v].len()).sum()
    }
}

/// Aggregation mode for out-of-matrix prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Ordinary product of experts.
    SodPoe,
    /// Product of experts dividing out the stage-1 expert reused across the
    /// augmented submodels.
    CorrectedPoe,
    /// Ordinary product over intermediate aggregates.
    IntermediateAggPoe,
}

impl PredictMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sod_poe" => Ok(PredictMode::SodPoe),
            "corrected_poe" => Ok(PredictMode::CorrectedPoe),
            "intermediate_agg_poe" => Ok(PredictMode::IntermediateAggPoe),
            other => Err(NlmcError::param(
                "mode",
                format!("unknown prediction mode `{other}`"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PredictMode::SodPoe => "sod_poe",
            PredictMode::CorrectedPoe => "corrected_poe",
            PredictMode::IntermediateAggPoe => "intermediate_agg_poe",
        }
    }
}

/// Ordinary PoE: precisions add, means are precision-weighted.
pub fn poe_aggregate(preds: &[(f64, f64)]) -> (f64, f64) {
    assert!(!preds.is_empty());
    let mut precision = 0.0;
    let mut numerator = 0.0;
    for &(mean, var) in preds {
        precision += 1.0 / var;
        numerator += mean / var;
    }
    (numerator / precision, 1.0 / precision)
}

/// Corrected PoE: the stage-1 expert enters once and its factor is divided
/// out of every augmented expert. Non-positive precisions clamp to 1e-8 and
/// flag the output.
pub fn corrected_poe_aggregate(first: (f64, f64), rest: &[(f64, f64)]) -> ((f64, f64), bool) {
    let p1 = 1.0 / first.1;
    let mut precision = p1;
    let mut numerator = first.0 * p1;
    for &(mean, var) in rest {
        precision += 1.0 / var - p1;
        numerator += mean / var - first.0 * p1;
    }
    let clamped = !(precision > 0.0);
    if clamped {
        log::warn!("corrected PoE produced non-positive precision {precision}; clamping");
        precision = 1e-8;
    }
    ((numerator / precision, 1.0 / precision), clamped)
}

struct SideCol {
    u: DVector<f64>,
    yty: f64,
}

struct SideGroup {
    nd: usize,
    a_base: DMatrix<f64>,
    psi0: f64,
    tr_kinv: f64,
    cols: Vec<SideCol>,
}

struct SideCtx {
    view_idx: usize,
    sigma2: f64,
    half_logdet_k: f64,
    kinv: DMatrix<f64>,
    kinv_packed: Vec<f64>,
    groups: Vec<SideGroup>,
    /// column -> (group index, column index within group)
    col_lookup: Vec<Option<(usize, usize)>>,
}

/// Per-expert engine for test-row latent inference. Training quantities are
/// frozen; only the test row's variational moments are optimized.
pub struct TestInference<'a> {
    expert: &'a Expert,
    k: usize,
    side: Vec<SideCtx>,
}

fn build_side_ctx(view: &ViewModel, data: &crate::data::SparseMatrixView, q_all: &GaussianRows, view_idx: usize) -> Result<SideCtx> {
    use crate::vgplvm::bound::{build_view_ctx, group_columns};
    let ctx = build_view_ctx(view, q_all)?;
    let m = view.n_inducing();
    let sigma2 = ctx.sigma2;
    let raw_groups = group_columns(data);
    let mut groups = Vec::new();
    let mut col_lookup: Vec<Option<(usize, usize)>> = vec![None; data.n_cols()];
    for g in &raw_groups {
        let psi2 = ctx.cache.sum_psi2(g.rows.iter().copied());
        let psi0: f64 = g.rows.iter().map(|&r| ctx.cache.psi0_rows[r]).sum();
        let tr_kinv: f64 = ctx
            .kinv_packed
            .iter()
            .zip(&psi2)
            .map(|(w, p)| w * p)
            .sum();
        let mut a_base = unpack_symmetric(m, &psi2);
        for i in 0..m {
            for j in 0..m {
                a_base[(i, j)] += sigma2 * ctx.kmm[(i, j)];
            }
        }
        let mut cols = Vec::with_capacity(g.cols.len());
        for &col in &g.cols {
            let mut u = DVector::zeros(m);
            let mut yty = 0.0;
            for &(row, y) in data.observed(col) {
                yty += y * y;
                let p1 = ctx.cache.psi1_row(row);
                for j in 0..m {
                    u[j] += y * p1[j];
                }
            }
            col_lookup[col] = Some((groups.len(), cols.len()));
            cols.push(SideCol { u, yty });
        }
        groups.push(SideGroup {
            nd: g.rows.len(),
            a_base,
            psi0,
            tr_kinv,
            cols,
        });
    }
    // columns with no training observations form one empty group so test
    // rows can still condition on them
    let empty_cols: Vec<usize> = (0..data.n_cols())
        .filter(|&c| col_lookup[c].is_none())
        .collect();
    if !empty_cols.is_empty() {
        let gid = groups.len();
        let mut cols = Vec::with_capacity(empty_cols.len());
        for (ci, &col) in empty_cols.iter().enumerate() {
            col_lookup[col] = Some((gid, ci));
            cols.push(SideCol {
                u: DVector::zeros(m),
                yty: 0.0,
            });
        }
        groups.push(SideGroup {
            nd: 0,
            a_base: &ctx.kmm * sigma2,
            psi0: 0.0,
            tr_kinv: 0.0,
            cols,
        });
    }
    Ok(SideCtx {
        view_idx,
        sigma2,
        half_logdet_k: ctx.half_logdet_k,
        kinv: ctx.kinv,
        kinv_packed: ctx.kinv_packed,
        groups,
        col_lookup,
    })
}

#[allow(clippy::too_many_arguments)]
fn column_core(
    nd: f64,
    m: f64,
    sigma2: f64,
    half_logdet_a: f64,
    half_logdet_k: f64,
    yty: f64,
    utb: f64,
    psi0: f64,
    tr_kinv_psi2: f64,
) -> f64 {
    -0.5 * nd * LN_2PI - 0.5 * (nd - m) * sigma2.ln() - half_logdet_a + half_logdet_k
        - (yty - utb) / (2.0 * sigma2)
        - psi0 / (2.0 * sigma2)
        + tr_kinv_psi2 / (2.0 * sigma2)
}

impl<'a> TestInference<'a> {
    pub fn new(expert: &'a Expert) -> Result<Self> {
        let q_all = expert.model.latent.all_rows();
        let mut side = Vec::new();
        for &v in expert.data.side_views() {
            side.push(build_side_ctx(
                &expert.model.views[v],
                expert.data.view(v),
                &q_all,
                v,
            )?);
        }
        Ok(TestInference {
            expert,
            k: expert.model.latent.k(),
            side,
        })
    }

    /// Nearest training row by Euclidean distance over commonly observed
    /// columns across all views; ties break on the lower row index.
    fn nearest_training_row(&self, obs: &RowObservations) -> Option<usize> {
        let n = self.expert.data.n_rows();
        let mut dist2 = vec![0.0f64; n];
        let mut common = vec![0usize; n];
        for (v, view) in self.expert.data.views().iter().enumerate() {
            for &(col, y_star) in &obs.per_view[v] {
                if col >= view.n_cols() {
                    continue;
                }
                for &(row, y) in view.observed(col) {
                    let d = y_star - y;
                    dist2[row] += d * d;
                    common[row] += 1;
                }
            }
        }
        let mut best: Option<(f64, usize)> = None;
        for row in 0..n {
            if common[row] == 0 {
                continue;
            }
            match best {
                Some((bd, _)) if bd <= dist2[row] => {}
                _ => best = Some((dist2[row], row)),
            }
        }
        best.map(|(_, row)| row)
    }

    fn initial_latent(&self, obs: &RowObservations) -> TestLatent {
        let mut mean = vec![0.0; self.k];
        if let Some(row) = self.nearest_training_row(obs) {
            for j in 0..self.k {
                mean[j] = self.expert.model.latent.means()[(row, j)];
            }
        }
        TestLatent {
            mean,
            var: vec![1.0; self.k],
            fallback: false,
        }
    }

    /// Bound over the augmented side-view columns minus KL(q*), with its
    /// gradient in (mu*, log S*). Returns the negated objective for the
    /// minimizer.
    fn objective_with(&self, row_obs: &RowObservations, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let k = self.k;
        let mu: Vec<f64> = x[..k].to_vec();
        let log_s: Vec<f64> = x[k..].to_vec();
        let s: Vec<f64> = log_s.iter().map(|l| l.exp()).collect();
        let q_star = GaussianRows::new(
            DMatrix::from_row_slice(1, k, &mu),
            DMatrix::from_row_slice(1, k, &s),
        )?;

        let mut f = 0.0;
        let mut d_mu = vec![0.0; k];
        let mut d_s = vec![0.0; k];

        for side in &self.side {
            let view = &self.expert.model.views[side.view_idx];
            let m = view.n_inducing();
            let obs = &row_obs.per_view[side.view_idx];
            if obs.is_empty() {
                continue;
            }
            let cache = build_psi_row_cache(&view.spec, &view.params, &q_star, &view.inducing)?;
            let psi0_star = cache.psi0_rows[0];
            let psi1_star = cache.psi1_row(0).to_vec();
            let psi2_star_packed = cache.psi2_row(0).to_vec();
            let psi2_star = unpack_symmetric(m, &psi2_star_packed);
            let tr_star: f64 = side
                .kinv_packed
                .iter()
                .zip(&psi2_star_packed)
                .map(|(w, p)| w * p)
                .sum();
            let sigma2 = side.sigma2;

            // split the row's observed columns by group
            let mut per_group: Vec<Vec<(usize, f64)>> = vec![Vec::new(); side.groups.len()];
            let mut n_obs = 0usize;
            for &(col, y) in obs {
                if col >= side.col_lookup.len() {
                    continue;
                }
                if let Some((gid, ci)) = side.col_lookup[col] {
                    per_group[gid].push((ci, y));
                    n_obs += 1;
                }
            }
            if n_obs == 0 {
                continue;
            }

            let w0 = -(n_obs as f64) / (2.0 * sigma2);
            let mut w1 = vec![0.0; m];
            let mut d_psi2 = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    d_psi2[(i, j)] = (n_obs as f64) / (2.0 * sigma2) * side.kinv[(i, j)];
                }
            }

            for (gid, cols) in per_group.iter().enumerate() {
                if cols.is_empty() {
                    continue;
                }
                let group = &side.groups[gid];
                let mut a_aug = group.a_base.clone();
                for i in 0..m {
                    for j in 0..m {
                        a_aug[(i, j)] += psi2_star[(i, j)];
                    }
                }
                let chol = cholesky_with_jitter(&a_aug, "test-latent A")?;
                let hld_a = half_log_det(&chol);
                let ainv = chol.inverse();
                let d_cols = cols.len() as f64;
                for i in 0..m {
                    for j in 0..m {
                        d_psi2[(i, j)] -= 0.5 * d_cols * ainv[(i, j)];
                    }
                }
                for &(ci, y_star) in cols {
                    let colref = &group.cols[ci];
                    let mut u = colref.u.clone();
                    for j in 0..m {
                        u[j] += y_star * psi1_star[j];
                    }
                    let b = chol.solve(&u);
                    let utb = u.dot(&b);
                    f += column_core(
                        (group.nd + 1) as f64,
                        m as f64,
                        sigma2,
                        hld_a,
                        side.half_logdet_k,
                        colref.yty + y_star * y_star,
                        utb,
                        group.psi0 + psi0_star,
                        group.tr_kinv + tr_star,
                    );
                    for j in 0..m {
                        w1[j] += (y_star / sigma2) * b[j];
                        for j2 in 0..m {
                            d_psi2[(j, j2)] -= b[j] * b[j2] / (2.0 * sigma2);
                        }
                    }
                }
            }

            // backward through the single-row psi statistics
            let w2 = pack_adjoint(&d_psi2);
            let sf2 = view.params.signal_variance();
            let alpha = view.params.ard_weights();
            let zr: Vec<f64> = {
                let mut zr = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        zr[i * k + j] = view.inducing[(i, j)];
                    }
                }
                zr
            };
            let mut dz_scratch = vec![0.0; m * k];
            let mut dla_scratch = vec![0.0; k];
            let mut dls_scratch = 0.0;
            let mut d_mu_row = vec![0.0; k];
            let mut d_s_row = vec![0.0; k];
            let mut out = RowVjpOut {
                d_mu: &mut d_mu_row,
                d_s: &mut d_s_row,
                d_z: &mut dz_scratch,
                d_log_ard: &mut dla_scratch,
                d_log_sf2: &mut dls_scratch,
            };
            psi_row_vjp(
                view.spec.family,
                sf2,
                &alpha,
                &mu,
                &s,
                &zr,
                m,
                k,
                w0,
                &w1,
                &w2,
                &mut out,
            );
            for j in 0..k {
                d_mu[j] += d_mu_row[j];
                d_s[j] += d_s_row[j];
            }
        }

        // KL(q* || N(0, I))
        for j in 0..k {
            f -= 0.5 * (mu[j] * mu[j] + s[j] - log_s[j] - 1.0);
            d_mu[j] -= mu[j];
        }
        for j in 0..k {
            grad[j] = -d_mu[j];
            grad[k + j] = -(s[j] * d_s[j] - 0.5 * (s[j] - 1.0));
        }
        Ok(-f)
    }

    /// Infer q(x*) for one test row given its side-view observations.
    pub fn infer(&self, obs: &RowObservations, max_iters: usize) -> Result<TestLatent> {
        if obs.side_count(self.expert.data.side_views()) == 0 {
            return Err(NlmcError::EmptyInput {
                context: "test row side-view observations".into(),
            });
        }
        let init = self.initial_latent(obs);
        if max_iters == 0 {
            return Ok(init);
        }
        let k = self.k;
        let mut x0 = Vec::with_capacity(2 * k);
        x0.extend_from_slice(&init.mean);
        x0.extend(init.var.iter().map(|v| v.ln()));

        let outcome = minimize(
            x0,
            |x, g| self.objective_with(obs, x, g),
            &ScgOptions {
                max_iters,
                rel_tol: 1e-9,
                window: 10,
            },
        );
        match outcome {
            Ok(out) if out.f.is_finite() => Ok(TestLatent {
                mean: out.x[..k].to_vec(),
                var: out.x[k..].iter().map(|l| l.exp()).collect(),
                fallback: false,
            }),
            _ => {
                log::warn!("test-latent inference failed; falling back to nearest-neighbor init");
                Ok(TestLatent {
                    fallback: true,
                    ..init
                })
            }
        }
    }
}

/// Per-expert engine for predicting target-view columns under an uncertain
/// test input.
pub struct PredictionEngine<'a> {
    expert: &'a Expert,
    target_view: usize,
    sigma2: f64,
    kinv_packed: Vec<f64>,
    /// per target column: b and the shared group A^{-1}
    cols: Vec<(DVector<f64>, Arc<DMatrix<f64>>)>,
}

impl<'a> PredictionEngine<'a> {
    pub fn new(expert: &'a Expert) -> Result<Self> {
        use crate::vgplvm::bound::{build_view_ctx, group_columns};
        let target_view = expert.data.target_view();
        let view = &expert.model.views[target_view];
        let data = expert.data.view(target_view);
        let q_all = expert.model.latent.all_rows();
        let ctx = build_view_ctx(view, &q_all)?;
        let m = view.n_inducing();
        let sigma2 = ctx.sigma2;

        let mut cols: Vec<Option<(DVector<f64>, Arc<DMatrix<f64>>)>> = vec![None; data.n_cols()];
        for g in group_columns(data) {
            let psi2 = ctx.cache.sum_psi2(g.rows.iter().copied());
            let mut a = unpack_symmetric(m, &psi2);
            for i in 0..m {
                for j in 0..m {
                    a[(i, j)] += sigma2 * ctx.kmm[(i, j)];
                }
            }
            let chol = cholesky_with_jitter(&a, "prediction A")?;
            let ainv = Arc::new(chol.inverse());
            for &col in &g.cols {
                let mut u = DVector::zeros(m);
                for &(row, y) in data.observed(col) {
                    let p1 = ctx.cache.psi1_row(row);
                    for j in 0..m {
                        u[j] += y * p1[j];
                    }
                }
                let b = chol.solve(&u);
                cols[col] = Some((b, Arc::clone(&ainv)));
            }
        }
        // unobserved columns predict from the prior
        if cols.iter().any(|c| c.is_none()) {
            let a = &ctx.kmm * sigma2;
            let chol = cholesky_with_jitter(&a, "prediction empty A")?;
            let ainv = Arc::new(chol.inverse());
            for c in cols.iter_mut() {
                if c.is_none() {
                    *c = Some((DVector::zeros(m), Arc::clone(&ainv)));
                }
            }
        }
        Ok(PredictionEngine {
            expert,
            target_view,
            sigma2,
            kinv_packed: ctx.kinv_packed,
            cols: cols.into_iter().map(|c| c.unwrap()).collect(),
        })
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    /// Predictive mean and variance for every target column at q(x*).
    pub fn predict_all(&self, q_star: &TestLatent) -> Result<Vec<(f64, f64)>> {
        let view = &self.expert.model.views[self.target_view];
        let m = view.n_inducing();
        let k = self.expert.model.latent.k();
        let q = GaussianRows::new(
            DMatrix::from_row_slice(1, k, &q_star.mean),
            DMatrix::from_row_slice(1, k, &q_star.var),
        )?;
        let cache = build_psi_row_cache(&view.spec, &view.params, &q, &view.inducing)?;
        let psi0_star = cache.psi0_rows[0];
        let psi1_star = cache.psi1_row(0);
        let psi2_packed = cache.psi2_row(0);
        let psi2_star = unpack_symmetric(m, psi2_packed);
        let tr_kinv_star: f64 = self
            .kinv_packed
            .iter()
            .zip(psi2_packed)
            .map(|(w, p)| w * p)
            .sum();

        let mut out = Vec::with_capacity(self.cols.len());
        for (b, ainv) in &self.cols {
            let mut mean = 0.0;
            for j in 0..m {
                mean += psi1_star[j] * b[j];
            }
            let tr_ainv_star = ainv.zip_fold(&psi2_star, 0.0, |acc, a, p| acc + a * p);
            let p2b = &psi2_star * b;
            let btp2b = b.dot(&p2b);
            let var = self.sigma2 + psi0_star - tr_kinv_star + self.sigma2 * tr_ainv_star + btp2b
                - mean * mean;
            out.push((mean, var.max(1e-300)));
        }
        Ok(out)
    }

    /// Predictive moments for a single target column.
    pub fn predict(&self, q_star: &TestLatent, col: usize) -> Result<(f64, f64)> {
        if col >= self.cols.len() {
            return Err(NlmcError::param(
                "col",
                format!("column {col} out of range"),
            ));
        }
        Ok(self.predict_all(q_star)?[col])
    }
}

/// Infer the test latent of one row under one expert (training quantities
/// frozen).
pub fn infer_test_latent(expert: &Expert, obs: &RowObservations, max_iters: usize) -> Result<TestLatent> {
    TestInference::new(expert)?.infer(obs, max_iters)
}

/// Uncertain-input prediction of one target column under one expert.
pub fn predict_uncertain_input(expert: &Expert, q_star: &TestLatent, col: usize) -> Result<(f64, f64)> {
    PredictionEngine::new(expert)?.predict(q_star, col)
}

/// Per-expert predictive moments for every (test row, target column).
pub struct PerExpertPredictions {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_experts: usize,
    /// means[(row * n_cols + col) * n_experts + e]
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub fallbacks: usize,
}

/// Run latent inference and per-column prediction for every expert over
/// every test row. Deterministic: rows are processed in parallel and
/// collected in order.
pub fn infer_and_predict(
    experts: &[&Expert],
    test: &MultiViewDataset,
    test_latent_iters: usize,
) -> Result<PerExpertPredictions> {
    if experts.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "experts".into(),
        });
    }
    let n_cols = experts[0].data.target().n_cols();
    for e in experts {
        if e.data.target().n_cols() != n_cols {
            return Err(NlmcError::InconsistentExperts {
                reason: "target view widths differ".into(),
            });
        }
    }
    let engines: Result<Vec<(TestInference, PredictionEngine)>> = experts
        .iter()
        .map(|e| Ok((TestInference::new(e)?, PredictionEngine::new(e)?)))
        .collect();
    let engines = engines?;

    let n_rows = test.n_rows();
    let n_experts = experts.len();
    let per_row: Result<Vec<(Vec<f64>, Vec<f64>, usize)>> = (0..n_rows)
        .into_par_iter()
        .map(|row| {
            let obs = RowObservations::of_row(test, row);
            let mut means = vec![0.0; n_cols * n_experts];
            let mut vars = vec![0.0; n_cols * n_experts];
            let mut fallbacks = 0;
            for (e, (inference, engine)) in engines.iter().enumerate() {
                let latent = inference.infer(&obs, test_latent_iters)?;
                if latent.fallback {
                    fallbacks += 1;
                }
                let preds = engine.predict_all(&latent)?;
                for (col, &(mean, var)) in preds.iter().enumerate() {
                    means[col * n_experts + e] = mean;
                    vars[col * n_experts + e] = var;
                }
            }
            Ok((means, vars, fallbacks))
        })
        .collect();
    let per_row = per_row?;

    let mut means = Vec::with_capacity(n_rows * n_cols * n_experts);
    let mut vars = Vec::with_capacity(n_rows * n_cols * n_experts);
    let mut fallbacks = 0;
    for (m, v, fb) in per_row {
        means.extend_from_slice(&m);
        vars.extend_from_slice(&v);
        fallbacks += fb;
    }
    Ok(PerExpertPredictions {
        n_rows,
        n_cols,
        n_experts,
        means,
        vars,
        fallbacks,
    })
}

/// Aggregate per-expert predictions under the given mode, mapping results
/// back to original row and column ids.
pub fn aggregate_predictions(
    per: &PerExpertPredictions,
    mode: PredictMode,
    test: &MultiViewDataset,
) -> Vec<GaussianPrediction> {
    let target_view = test.target_view();
    let col_ids = test.target().col_ids();
    let row_ids = test.row_ids();
    let ne = per.n_experts;
    let mut out = Vec::with_capacity(per.n_rows * per.n_cols);
    let mut buffer = Vec::with_capacity(ne);
    for row in 0..per.n_rows {
        for col in 0..per.n_cols {
            let base = (row * per.n_cols + col) * ne;
            buffer.clear();
            for e in 0..ne {
                buffer.push((per.means[base + e], per.vars[base + e]));
            }
            let ((mean, variance), clamped) = match mode {
                PredictMode::SodPoe | PredictMode::IntermediateAggPoe => {
                    (poe_aggregate(&buffer), false)
                }
                PredictMode::CorrectedPoe => corrected_poe_aggregate(buffer[0], &buffer[1..]),
            };
            out.push(GaussianPrediction {
                row_id: row_ids[row],
                col_id: col_ids[col],
                view: target_view,
                mean,
                variance,
                clamped,
            });
        }
    }
    out
}

fn validate_experts(experts: &[&Expert], mode: PredictMode) -> Result<()> {
    if experts.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "experts".into(),
        });
    }
    match mode {
        PredictMode::CorrectedPoe => {
            if experts[0].kind != ExpertKind::Stage1 {
                return Err(NlmcError::InconsistentExperts {
                    reason: "corrected PoE requires the stage-1 expert first".into(),
                });
            }
            if experts[1..].iter().any(|e| e.kind != ExpertKind::Augmented) {
                return Err(NlmcError::InconsistentExperts {
                    reason: "corrected PoE requires augmented experts after the stage-1 expert"
                        .into(),
                });
            }
        }
        PredictMode::IntermediateAggPoe => {
            if experts.iter().any(|e| e.kind != ExpertKind::Aggregated) {
                return Err(NlmcError::InconsistentExperts {
                    reason: "intermediate-aggregation PoE requires aggregated experts".into(),
                });
            }
        }
        PredictMode::SodPoe => {}
    }
    Ok(())
}

/// Out-of-matrix prediction over the whole test set.
pub fn predict_out_of_matrix(
    experts: &[&Expert],
    test: &MultiViewDataset,
    mode: PredictMode,
    test_latent_iters: usize,
) -> Result<Vec<GaussianPrediction>> {
    validate_experts(experts, mode)?;
    let per = infer_and_predict(experts, test, test_latent_iters)?;
    Ok(aggregate_predictions(&per, mode, test))
}
