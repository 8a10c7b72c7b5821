//! Two-stage coupling: stage-1 training on the densest block, incremental
//! stage-2 training of the remaining blocks against a stage-1 snapshot, and
//! intermediate aggregation of submodels.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MultiViewDataset, Partition};
use crate::error::{NlmcError, Result};
use crate::kernels::{KernelFamily, KernelParams, KernelSpec};
use crate::util::{derive_seed, fnv1a64, median};
use crate::vgplvm::{
    init_latent_ppca, scg::ScgOptions, LatentPrior, MrdModel, VariationalLatent, ViewModel,
};

pub mod train;

pub use train::{scg_optimize_model, TrainOutcome};

/// Training configuration shared by every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub n_inducing: usize,
    pub kernel: KernelFamily,
    pub iterations: usize,
    pub seed: u64,
    pub noise_init: f64,
    pub freeze_stage2_hyperparams: bool,
    pub test_latent_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 5,
            n_inducing: 100,
            kernel: KernelFamily::RbfArd,
            iterations: 500,
            seed: 0,
            noise_init: 0.1,
            freeze_stage2_hyperparams: false,
            test_latent_iterations: 100,
        }
    }
}

impl TrainConfig {
    pub fn scg_options(&self) -> ScgOptions {
        ScgOptions {
            max_iters: self.iterations,
            rel_tol: 1e-9,
            window: 10,
        }
    }
}

/// What a trained submodel is, for aggregation and prediction routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// The stage-1 model over block 1.
    Stage1,
    /// A stage-2 model over block 1 union block i.
    Augmented,
    /// An uncoupled model (subset-of-data baseline or full posterior).
    Independent,
    /// An intermediate aggregate of submodels.
    Aggregated,
}

/// A trained submodel together with the data subset it was fitted on.
#[derive(Debug, Clone)]
pub struct Expert {
    pub kind: ExpertKind,
    pub block_index: usize,
    pub model: MrdModel,
    /// Row positions into the (density-ordered) training dataset.
    pub train_rows: Vec<usize>,
    /// The training subset itself, rows relabeled 0..train_rows.len().
    pub data: MultiViewDataset,
}

/// Serialized stage-1 state: the only message passed between stages.
#[derive(Debug, Clone)]
pub struct SubmodelSnapshot {
    pub latent_means: DMatrix<f64>,
    pub latent_log_vars: DMatrix<f64>,
    pub views: Vec<SnapshotView>,
    /// Row positions of block 1 in the training dataset.
    pub block_rows: Vec<usize>,
    pub seed: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SnapshotView {
    pub spec: KernelSpec,
    pub log_signal_variance: f64,
    pub log_ard: Vec<f64>,
    pub log_noise_variance: f64,
    pub inducing: DMatrix<f64>,
}

impl SubmodelSnapshot {
    pub fn from_model(
        model: &MrdModel,
        block_rows: Vec<usize>,
        seed: u64,
        iterations: usize,
    ) -> Self {
        SubmodelSnapshot {
            latent_means: model.latent.means().clone(),
            latent_log_vars: model.latent.log_vars().clone(),
            views: model
                .views
                .iter()
                .map(|v| SnapshotView {
                    spec: v.spec,
                    log_signal_variance: v.params.log_signal_variance(),
                    log_ard: v.params.log_ard_weights().to_vec(),
                    log_noise_variance: v.log_noise_variance,
                    inducing: v.inducing.clone(),
                })
                .collect(),
            block_rows,
            seed,
            iterations,
        }
    }

    pub fn latent_vars(&self) -> DMatrix<f64> {
        self.latent_log_vars.map(|l| l.exp())
    }

    pub fn view_models(&self) -> Vec<ViewModel> {
        self.views
            .iter()
            .map(|v| ViewModel {
                spec: v.spec,
                params: KernelParams::from_log(v.log_signal_variance, v.log_ard.clone()),
                log_noise_variance: v.log_noise_variance,
                inducing: v.inducing.clone(),
            })
            .collect()
    }

    /// Content hash over every float bit and index, for immutability checks.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        let push_mat = |bytes: &mut Vec<u8>, m: &DMatrix<f64>| {
            bytes.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            bytes.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    bytes.extend_from_slice(&m[(i, j)].to_bits().to_le_bytes());
                }
            }
        };
        push_mat(&mut bytes, &self.latent_means);
        push_mat(&mut bytes, &self.latent_log_vars);
        for v in &self.views {
            bytes.extend_from_slice(&v.log_signal_variance.to_bits().to_le_bytes());
            for &a in &v.log_ard {
                bytes.extend_from_slice(&a.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&v.log_noise_variance.to_bits().to_le_bytes());
            push_mat(&mut bytes, &v.inducing);
        }
        for &r in &self.block_rows {
            bytes.extend_from_slice(&(r as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&(self.iterations as u64).to_le_bytes());
        fnv1a64(&bytes)
    }
}

/// k-means++-style seeded subsample of the initial latent means, used to
/// initialize inducing inputs.
pub(crate) fn kmeanspp_subsample(means: &DMatrix<f64>, m: usize, seed: u64) -> DMatrix<f64> {
    let n = means.nrows();
    let k = means.ncols();
    assert!(m >= 1 && m <= n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(m);
    chosen.push(rng.random_range(0..n));
    let mut dist2 = vec![0.0f64; n];
    let sqdist = |means: &DMatrix<f64>, a: usize, b: usize| {
        let mut d2 = 0.0;
        for j in 0..k {
            let d = means[(a, j)] - means[(b, j)];
            d2 += d * d;
        }
        d2
    };
    for i in 0..n {
        dist2[i] = sqdist(means, i, chosen[0]);
    }
    while chosen.len() < m {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a chosen one; fall back to
            // the first unchosen index
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                target -= d2;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
        for i in 0..n {
            dist2[i] = dist2[i].min(sqdist(means, i, next));
        }
    }
    let mut z = DMatrix::zeros(m, k);
    for (row, &idx) in chosen.iter().enumerate() {
        for j in 0..k {
            z[(row, j)] = means[(idx, j)];
        }
    }
    z
}

fn fresh_view_models(
    cfg: &TrainConfig,
    n_views: usize,
    init_means: &DMatrix<f64>,
    seed_label: &str,
) -> Result<Vec<ViewModel>> {
    let k = cfg.latent_dim;
    let spec = KernelSpec::new(cfg.kernel, k)?;
    if cfg.n_inducing > init_means.nrows() {
        return Err(NlmcError::param(
            "n_inducing",
            format!(
                "M = {} exceeds block size {}",
                cfg.n_inducing,
                init_means.nrows()
            ),
        ));
    }
    if !(cfg.noise_init > 0.0) {
        return Err(NlmcError::param("noise_init", "must be positive"));
    }
    (0..n_views)
        .map(|v| {
            let z = kmeanspp_subsample(
                init_means,
                cfg.n_inducing,
                derive_seed(cfg.seed, &format!("{seed_label}/z/view{v}")),
            );
            Ok(ViewModel {
                spec,
                params: KernelParams::new(1.0, &vec![1.0; k])?,
                log_noise_variance: cfg.noise_init.ln(),
                inducing: z,
            })
        })
        .collect()
}

/// Stage 1: standard MRD training on block 1 with the standard-normal prior.
pub fn train_stage1(
    ds: &MultiViewDataset,
    partition: &Partition,
    cfg: &TrainConfig,
) -> Result<(Expert, SubmodelSnapshot, TrainOutcome)> {
    let block_rows = partition
        .blocks
        .first()
        .filter(|b| !b.is_empty())
        .ok_or_else(|| NlmcError::EmptyInput {
            context: "stage-1 block".into(),
        })?
        .clone();
    let (expert, outcome) = train_independent_block(ds, &block_rows, cfg, 0, "stage1")?;
    let snapshot = SubmodelSnapshot::from_model(
        &expert.model,
        block_rows,
        cfg.seed,
        outcome.iterations,
    );
    let expert = Expert {
        kind: ExpertKind::Stage1,
        ..expert
    };
    Ok((expert, snapshot, outcome))
}

/// Uncoupled training of one row block with the standard prior: used for
/// stage 1, the subset-of-data baseline, and the full-posterior reference.
pub fn train_independent_block(
    ds: &MultiViewDataset,
    block_rows: &[usize],
    cfg: &TrainConfig,
    block_index: usize,
    seed_label: &str,
) -> Result<(Expert, TrainOutcome)> {
    if block_rows.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "independent block rows".into(),
        });
    }
    let sub = ds.restrict_rows(block_rows)?;
    let local_rows: Vec<usize> = (0..sub.n_rows()).collect();
    let init_means = init_latent_ppca(&sub, cfg.latent_dim, &local_rows)?;
    let init_vars = DMatrix::from_element(sub.n_rows(), cfg.latent_dim, 0.5);
    let latent = VariationalLatent::new(init_means.clone(), &init_vars)?;
    let views = fresh_view_models(cfg, sub.n_views(), &init_means, seed_label)?;
    let mut model = MrdModel {
        latent,
        views,
        prior: LatentPrior::Standard,
    };
    let outcome = scg_optimize_model(&mut model, &sub, &cfg.scg_options(), true)?;
    Ok((
        Expert {
            kind: ExpertKind::Independent,
            block_index,
            model,
            train_rows: block_rows.to_vec(),
            data: sub,
        },
        outcome,
    ))
}

/// Nearest-neighbor initialization of new-row latents: for each new row,
/// the block-1 row minimizing the Euclidean distance over commonly observed
/// columns across all views donates its snapshot mean. Rows without any
/// common observed column fall back to the zero mean.
pub fn init_latent_nn(
    ds: &MultiViewDataset,
    new_rows: &[usize],
    snapshot: &SubmodelSnapshot,
) -> (DMatrix<f64>, usize) {
    let k = snapshot.latent_means.ncols();
    let candidates = &snapshot.block_rows;
    // per view, per row of interest: sorted (col, value) observations
    let mut obs: std::collections::HashMap<usize, Vec<Vec<(usize, f64)>>> =
        std::collections::HashMap::new();
    for &row in new_rows.iter().chain(candidates.iter()) {
        obs.entry(row).or_insert_with(|| {
            ds.views().iter().map(|v| v.row_observations(row)).collect()
        });
    }

    let mut means = DMatrix::zeros(new_rows.len(), k);
    let mut fallbacks = 0usize;
    for (out_i, &row) in new_rows.iter().enumerate() {
        let row_obs = &obs[&row];
        let mut best: Option<(f64, usize)> = None;
        for (cand_i, &cand) in candidates.iter().enumerate() {
            let cand_obs = &obs[&cand];
            let mut dist2 = 0.0;
            let mut common = 0usize;
            for (vo, co) in row_obs.iter().zip(cand_obs) {
                // merge-join over sorted column lists
                let (mut a, mut b) = (0, 0);
                while a < vo.len() && b < co.len() {
                    match vo[a].0.cmp(&co[b].0) {
                        std::cmp::Ordering::Less => a += 1,
                        std::cmp::Ordering::Greater => b += 1,
                        std::cmp::Ordering::Equal => {
                            let d = vo[a].1 - co[b].1;
                            dist2 += d * d;
                            common += 1;
                            a += 1;
                            b += 1;
                        }
                    }
                }
            }
            if common == 0 {
                continue;
            }
            match best {
                Some((bd, _)) if bd <= dist2 => {}
                _ => best = Some((dist2, cand_i)),
            }
        }
        match best {
            Some((_, cand_i)) => {
                for j in 0..k {
                    means[(out_i, j)] = snapshot.latent_means[(cand_i, j)];
                }
            }
            None => {
                fallbacks += 1;
                log::warn!("row {row}: no commonly observed column with block 1, zero-mean fallback");
            }
        }
    }
    (means, fallbacks)
}

/// Stage 2: incremental training of block 1 union block i against the
/// snapshot. Block-1 rows keep a KL penalty toward the snapshot posterior;
/// block-i rows use the standard prior. Inducing inputs and hyperparameters
/// start from the snapshot and keep being optimized unless frozen.
pub fn train_stage2_block(
    ds: &MultiViewDataset,
    block_rows: &[usize],
    block_index: usize,
    snapshot: &SubmodelSnapshot,
    cfg: &TrainConfig,
) -> Result<(Expert, TrainOutcome)> {
    for r in block_rows {
        if snapshot.block_rows.contains(r) {
            return Err(NlmcError::param(
                "block_rows",
                format!("row {r} overlaps block 1"),
            ));
        }
    }
    let n1 = snapshot.block_rows.len();
    let ni = block_rows.len();
    let k = snapshot.latent_means.ncols();

    let mut aug_rows = snapshot.block_rows.clone();
    aug_rows.extend_from_slice(block_rows);
    let sub = ds.restrict_rows(&aug_rows)?;

    let (nn_means, _fallbacks) = init_latent_nn(ds, block_rows, snapshot);
    let mut means = DMatrix::zeros(n1 + ni, k);
    let mut log_vars = DMatrix::zeros(n1 + ni, k);
    for i in 0..n1 {
        for j in 0..k {
            means[(i, j)] = snapshot.latent_means[(i, j)];
            log_vars[(i, j)] = snapshot.latent_log_vars[(i, j)];
        }
    }
    for i in 0..ni {
        for j in 0..k {
            means[(n1 + i, j)] = nn_means[(i, j)];
            log_vars[(n1 + i, j)] = 0.0; // S = 1
        }
    }

    let mut model = MrdModel {
        latent: VariationalLatent::from_log(means, log_vars),
        views: snapshot.view_models(),
        prior: LatentPrior::SnapshotFirst {
            means: snapshot.latent_means.clone(),
            vars: snapshot.latent_vars(),
        },
    };
    let outcome = scg_optimize_model(
        &mut model,
        &sub,
        &cfg.scg_options(),
        !cfg.freeze_stage2_hyperparams,
    )?;
    Ok((
        Expert {
            kind: ExpertKind::Augmented,
            block_index,
            model,
            train_rows: aug_rows,
            data: sub,
        },
        outcome,
    ))
}

/// Aggregate one group of submodels into a single expert: block-1 rows are
/// combined by the precision rules (dividing out re-used stage-1 factors),
/// other rows are stacked, hyperparameters take the element-wise log-space
/// median, and inducing inputs the element-wise mean.
pub fn aggregate_group(
    ds: &MultiViewDataset,
    members: &[&Expert],
    snapshot: &SubmodelSnapshot,
    contains_stage1: bool,
    group_index: usize,
) -> Result<Expert> {
    if members.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "aggregate_group members".into(),
        });
    }
    let n1 = snapshot.block_rows.len();
    let k = snapshot.latent_means.ncols();
    for e in members {
        if e.train_rows.len() < n1 || e.train_rows[..n1] != snapshot.block_rows[..] {
            return Err(NlmcError::InconsistentExperts {
                reason: format!(
                    "expert over block {} does not start with the block-1 rows",
                    e.block_index
                ),
            });
        }
        if e.model.latent.k() != k {
            return Err(NlmcError::InconsistentExperts {
                reason: "latent dimension mismatch".into(),
            });
        }
    }

    let snap_vars = snapshot.latent_vars();
    let mut clamped = 0usize;
    let mut agg_means = DMatrix::zeros(n1, k);
    let mut agg_log_vars = DMatrix::zeros(n1, k);
    for i in 0..n1 {
        for j in 0..k {
            let s1 = snap_vars[(i, j)];
            let m1 = snapshot.latent_means[(i, j)];
            let p1 = 1.0 / s1;
            let mut precision = if contains_stage1 { p1 } else { 0.0 };
            let mut numerator = if contains_stage1 { p1 * m1 } else { 0.0 };
            for e in members {
                if e.kind == ExpertKind::Stage1 {
                    continue; // its factor is the base term
                }
                let si = e.model.latent.log_vars()[(i, j)].exp();
                let mi = e.model.latent.means()[(i, j)];
                precision += 1.0 / si - p1;
                numerator += mi / si - p1 * m1;
            }
            if !(precision > 0.0) {
                clamped += 1;
                precision = 1e-8;
            }
            agg_means[(i, j)] = numerator / precision;
            agg_log_vars[(i, j)] = (1.0 / precision).ln();
        }
    }
    if clamped > 0 {
        log::warn!("aggregate_group {group_index}: clamped {clamped} non-positive precisions");
    }

    // stack the non-block-1 rows of every member in member order
    let mut rows = snapshot.block_rows.clone();
    let mut tail_means = Vec::new();
    let mut tail_log_vars = Vec::new();
    for e in members {
        for (local, &global) in e.train_rows.iter().enumerate() {
            if local < n1 {
                continue;
            }
            rows.push(global);
            for j in 0..k {
                tail_means.push(e.model.latent.means()[(local, j)]);
                tail_log_vars.push(e.model.latent.log_vars()[(local, j)]);
            }
        }
    }
    let total = rows.len();
    let mut means = DMatrix::zeros(total, k);
    let mut log_vars = DMatrix::zeros(total, k);
    for i in 0..n1 {
        for j in 0..k {
            means[(i, j)] = agg_means[(i, j)];
            log_vars[(i, j)] = agg_log_vars[(i, j)];
        }
    }
    for i in 0..total - n1 {
        for j in 0..k {
            means[(n1 + i, j)] = tail_means[i * k + j];
            log_vars[(n1 + i, j)] = tail_log_vars[i * k + j];
        }
    }

    // mode surrogate: element-wise median of log-space parameters; inducing
    // inputs averaged element-wise
    let n_views = members[0].model.views.len();
    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let spec = members[0].model.views[v].spec;
        let m = members[0].model.views[v].inducing.nrows();
        let log_sf2 = median(
            &members
                .iter()
                .map(|e| e.model.views[v].params.log_signal_variance())
                .collect::<Vec<_>>(),
        );
        let log_ard: Vec<f64> = (0..k)
            .map(|j| {
                median(
                    &members
                        .iter()
                        .map(|e| e.model.views[v].params.log_ard_weights()[j])
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let log_noise = median(
            &members
                .iter()
                .map(|e| e.model.views[v].log_noise_variance)
                .collect::<Vec<_>>(),
        );
        let mut z = DMatrix::zeros(m, k);
        for e in members {
            if e.model.views[v].inducing.nrows() != m {
                return Err(NlmcError::InconsistentExperts {
                    reason: "inducing-point counts differ".into(),
                });
            }
            z += &e.model.views[v].inducing;
        }
        z /= members.len() as f64;
        views.push(ViewModel {
            spec,
            params: KernelParams::from_log(log_sf2, log_ard),
            log_noise_variance: log_noise,
            inducing: z,
        });
    }

    let data = ds.restrict_rows(&rows)?;
    Ok(Expert {
        kind: ExpertKind::Aggregated,
        block_index: group_index,
        model: MrdModel {
            latent: VariationalLatent::from_log(means, log_vars),
            views,
            prior: LatentPrior::Standard,
        },
        train_rows: rows,
        data,
    })
}

/// Group the expert list into `n_aggs`-sized aggregates in block order;
/// block 1's model joins the first group only.
pub fn aggregate_submodels(
    ds: &MultiViewDataset,
    experts: &[Expert],
    snapshot: &SubmodelSnapshot,
    n_aggs: usize,
) -> Result<Vec<Expert>> {
    if n_aggs == 0 {
        return Err(NlmcError::param("n_aggs", "must be at least 1"));
    }
    if experts.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "aggregate_submodels experts".into(),
        });
    }
    if experts[0].kind != ExpertKind::Stage1 {
        return Err(NlmcError::InconsistentExperts {
            reason: "the first expert must be the stage-1 model".into(),
        });
    }
    let mut out = Vec::new();
    for (g, chunk) in experts.chunks(n_aggs).enumerate() {
        let members: Vec<&Expert> = chunk.iter().collect();
        out.push(aggregate_group(ds, &members, snapshot, g == 0, g)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SparseMatrixView, Triple};

    fn tiny_dataset(n: usize) -> MultiViewDataset {
        let mut t_triples = Vec::new();
        let mut s_triples = Vec::new();
        for row in 0..n {
            t_triples.push(Triple { row, col: row % 3, value: (row as f64) * 0.5 });
            for col in 0..2 {
                s_triples.push(Triple {
                    row,
                    col,
                    value: ((row * 2 + col) as f64 * 0.37).sin(),
                });
            }
        }
        MultiViewDataset::new(
            vec![
                SparseMatrixView::new("t", n, 3, t_triples).unwrap(),
                SparseMatrixView::new("s", n, 2, s_triples).unwrap(),
            ],
            0,
            vec![1],
        )
        .unwrap()
    }

    fn tiny_snapshot(n1: usize, k: usize) -> SubmodelSnapshot {
        SubmodelSnapshot {
            latent_means: DMatrix::from_fn(n1, k, |i, j| (i as f64) + (j as f64) * 0.1),
            latent_log_vars: DMatrix::zeros(n1, k),
            views: vec![],
            block_rows: (0..n1).collect(),
            seed: 0,
            iterations: 0,
        }
    }

    #[test]
    fn default_config_matches_reference_settings() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.n_inducing, 100);
        assert_eq!(cfg.iterations, 500);
    }

    #[test]
    fn kmeanspp_picks_distinct_rows() {
        let means = DMatrix::from_fn(10, 2, |i, j| (i * 2 + j) as f64);
        let z = kmeanspp_subsample(&means, 4, 7);
        assert_eq!(z.nrows(), 4);
        for a in 0..4 {
            for b in (a + 1)..4 {
                let same = (0..2).all(|j| z[(a, j)] == z[(b, j)]);
                assert!(!same, "rows {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn nn_init_copies_identical_row() {
        let ds = tiny_dataset(6);
        let snapshot = tiny_snapshot(3, 2);
        // row 3 has identical observations to row 0 in the target view?
        // build a custom dataset where row 4 duplicates row 1 exactly.
        let mut t_triples: Vec<Triple> = ds.view(0).triples().collect();
        let mut s_triples: Vec<Triple> = ds.view(1).triples().collect();
        t_triples.retain(|t| t.row != 4);
        s_triples.retain(|t| t.row != 4);
        for t in ds.view(0).row_observations(1) {
            t_triples.push(Triple { row: 4, col: t.0, value: t.1 });
        }
        for t in ds.view(1).row_observations(1) {
            s_triples.push(Triple { row: 4, col: t.0, value: t.1 });
        }
        let ds = MultiViewDataset::new(
            vec![
                SparseMatrixView::new("t", 6, 3, t_triples).unwrap(),
                SparseMatrixView::new("s", 6, 2, s_triples).unwrap(),
            ],
            0,
            vec![1],
        )
        .unwrap();
        let (means, fallbacks) = init_latent_nn(&ds, &[4], &snapshot);
        assert_eq!(fallbacks, 0);
        for j in 0..2 {
            assert_eq!(means[(0, j)], snapshot.latent_means[(1, j)]);
        }
    }

    #[test]
    fn nn_init_ignores_columns_unobserved_in_new_row() {
        // changing a column the new row does not observe never changes the
        // neighbor choice
        let n = 5;
        let mk = |extra: f64| {
            let mut t_triples = vec![
                Triple { row: 0, col: 0, value: 1.0 },
                Triple { row: 1, col: 0, value: 5.0 },
                // column 1 observed only in candidates, not in row 4
                Triple { row: 0, col: 1, value: extra },
                Triple { row: 4, col: 0, value: 1.1 },
            ];
            let mut s_triples = Vec::new();
            for row in 0..n {
                t_triples.push(Triple { row, col: 2, value: 0.0 });
                s_triples.push(Triple { row, col: 0, value: 0.0 });
            }
            MultiViewDataset::new(
                vec![
                    SparseMatrixView::new("t", n, 3, t_triples).unwrap(),
                    SparseMatrixView::new("s", n, 1, s_triples).unwrap(),
                ],
                0,
                vec![1],
            )
            .unwrap()
        };
        let snapshot = tiny_snapshot(2, 2);
        let (a, _) = init_latent_nn(&mk(0.0), &[4], &snapshot);
        let (b, _) = init_latent_nn(&mk(1e6), &[4], &snapshot);
        assert_eq!(a, b);
    }

    #[test]
    fn nn_init_zero_fallback_without_overlap() {
        // new row observes only column 1; candidates observe only column 0
        let t = SparseMatrixView::new(
            "t",
            3,
            2,
            vec![
                Triple { row: 0, col: 0, value: 1.0 },
                Triple { row: 2, col: 1, value: 3.0 },
            ],
        )
        .unwrap();
        let s = SparseMatrixView::new("s", 3, 1, vec![]).unwrap();
        let ds = MultiViewDataset::new(vec![t, s], 0, vec![1]).unwrap();
        let snapshot = tiny_snapshot(1, 2);
        let (means, fallbacks) = init_latent_nn(&ds, &[2], &snapshot);
        assert_eq!(fallbacks, 1);
        assert!(means.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregation_identity_on_stage1_alone() {
        let ds = tiny_dataset(3);
        let snapshot = tiny_snapshot(3, 2);
        let model = MrdModel {
            latent: VariationalLatent::from_log(
                snapshot.latent_means.clone(),
                snapshot.latent_log_vars.clone(),
            ),
            views: vec![ViewModel {
                spec: KernelSpec::new(KernelFamily::RbfArd, 2).unwrap(),
                params: KernelParams::new(1.0, &[1.0, 1.0]).unwrap(),
                log_noise_variance: 0.0,
                inducing: DMatrix::zeros(2, 2),
            }],
            prior: LatentPrior::Standard,
        };
        let stage1 = Expert {
            kind: ExpertKind::Stage1,
            block_index: 0,
            model,
            train_rows: vec![0, 1, 2],
            data: ds.restrict_rows(&[0, 1, 2]).unwrap(),
        };
        let out = aggregate_submodels(&ds, &[stage1.clone()], &snapshot, 10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].model.latent.means(), stage1.model.latent.means());
        assert_eq!(out[0].model.latent.log_vars(), stage1.model.latent.log_vars());
        assert_eq!(out[0].model.views[0].inducing, stage1.model.views[0].inducing);
    }

    #[test]
    fn aggregation_direct_formula_check() {
        // one block-1 row/dim with S1=1, mu1=0; one augmented expert with
        // S2=1/2, mu2=1: precision 2, mean 1.
        let ds = tiny_dataset(2);
        let snapshot = SubmodelSnapshot {
            latent_means: DMatrix::from_element(1, 1, 0.0),
            latent_log_vars: DMatrix::from_element(1, 1, 0.0),
            views: vec![],
            block_rows: vec![0],
            seed: 0,
            iterations: 0,
        };
        let mk_expert = |kind, rows: Vec<usize>, means: Vec<f64>, vars: Vec<f64>| {
            let n = rows.len();
            Expert {
                kind,
                block_index: 0,
                model: MrdModel {
                    latent: VariationalLatent::new(
                        DMatrix::from_vec(n, 1, means),
                        &DMatrix::from_vec(n, 1, vars),
                    )
                    .unwrap(),
                    views: vec![ViewModel {
                        spec: KernelSpec::new(KernelFamily::RbfArd, 1).unwrap(),
                        params: KernelParams::new(1.0, &[1.0]).unwrap(),
                        log_noise_variance: 0.0,
                        inducing: DMatrix::zeros(1, 1),
                    }],
                    prior: LatentPrior::Standard,
                },
                train_rows: rows,
                data: ds.restrict_rows(&[0]).unwrap(),
            }
        };
        let stage1 = mk_expert(ExpertKind::Stage1, vec![0], vec![0.0], vec![1.0]);
        let aug = mk_expert(ExpertKind::Augmented, vec![0, 1], vec![1.0, 9.0], vec![0.5, 1.0]);
        let out = aggregate_submodels(&ds, &[stage1, aug], &snapshot, 10).unwrap();
        assert_eq!(out.len(), 1);
        let agg = &out[0];
        let s_star = agg.model.latent.log_vars()[(0, 0)].exp();
        let m_star = agg.model.latent.means()[(0, 0)];
        assert!((1.0 / s_star - 2.0).abs() < 1e-12, "precision {}", 1.0 / s_star);
        assert!((m_star - 1.0).abs() < 1e-12, "mean {m_star}");
        // stacked tail row preserved
        assert_eq!(agg.train_rows, vec![0, 1]);
        assert_eq!(agg.model.latent.means()[(1, 0)], 9.0);
    }

    #[test]
    fn aggregation_telescopes_for_identical_members() {
        let ds = tiny_dataset(2);
        let snapshot = SubmodelSnapshot {
            latent_means: DMatrix::from_element(1, 1, 0.7),
            latent_log_vars: DMatrix::from_element(1, 1, (0.3f64).ln()),
            views: vec![],
            block_rows: vec![0],
            seed: 0,
            iterations: 0,
        };
        let mk = |kind, rows: Vec<usize>| {
            let n = rows.len();
            let mut means = DMatrix::zeros(n, 1);
            let mut vars = DMatrix::zeros(n, 1);
            for i in 0..n {
                means[(i, 0)] = if i == 0 { 0.7 } else { 2.0 };
                vars[(i, 0)] = if i == 0 { 0.3 } else { 1.0 };
            }
            Expert {
                kind,
                block_index: 0,
                model: MrdModel {
                    latent: VariationalLatent::new(means, &vars).unwrap(),
                    views: vec![ViewModel {
                        spec: KernelSpec::new(KernelFamily::RbfArd, 1).unwrap(),
                        params: KernelParams::new(1.0, &[1.0]).unwrap(),
                        log_noise_variance: 0.0,
                        inducing: DMatrix::zeros(1, 1),
                    }],
                    prior: LatentPrior::Standard,
                },
                train_rows: rows,
                data: ds.restrict_rows(&[0]).unwrap(),
            }
        };
        let experts = vec![
            mk(ExpertKind::Stage1, vec![0]),
            mk(ExpertKind::Augmented, vec![0, 1]),
            mk(ExpertKind::Augmented, vec![0, 1]),
        ];
        let out = aggregate_submodels(&ds, &experts, &snapshot, 10).unwrap();
        let agg = &out[0];
        // identical members telescope to the stage-1 distribution exactly
        assert!((agg.model.latent.means()[(0, 0)] - 0.7).abs() < 1e-12);
        assert!((agg.model.latent.log_vars()[(0, 0)].exp() - 0.3).abs() < 1e-12);
    }
}
