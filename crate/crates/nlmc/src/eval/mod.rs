//! Metrics, experiment orchestration, and report emission.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{
    aggregate_submodels, train_independent_block, train_stage1, train_stage2_block, Expert,
    ExpertKind, TrainConfig,
};
use crate::data::{
    apply_reorder, generate_synthetic, partition_rows, reorder_by_density, MultiViewDataset,
    SyntheticConfig,
};
use crate::error::{NlmcError, Result};
use crate::predict::{
    aggregate_predictions, infer_and_predict, GaussianPrediction, PredictMode,
};
use crate::util::fnv1a64;

/// Root mean squared error over aligned (prediction, truth) pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "rmse pairs".into(),
        });
    }
    let mse: f64 = pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

/// Ranks with average-rank tie handling (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties, computed globally over
/// all pairs. Returns None when either side is constant.
pub fn spearman(pairs: &[(f64, f64)]) -> Result<Option<f64>> {
    if pairs.len() < 2 {
        return Err(NlmcError::EmptyInput {
            context: "spearman needs at least two pairs".into(),
        });
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let n = pairs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..pairs.len() {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (var_x * var_y).sqrt()))
}

/// AUC-ROC via the rank statistic with average-rank tie handling. None when
/// a class is empty.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Some(auc)
}

/// F1 at a fixed threshold: predicted positive iff score >= cutoff. None
/// when precision and recall are both undefined (no predicted or actual
/// positives).
pub fn f1_at_cutoff(scores: &[f64], labels: &[bool], cutoff: f64) -> Option<f64> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= cutoff;
        match (pred, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / denom as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnClassMetrics {
    pub col_id: usize,
    pub n_observed: usize,
    pub n_active: usize,
    pub n_inactive: usize,
    pub valid: bool,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub rmse: f64,
    pub successful: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub cutoff: f64,
    pub per_column: Vec<ColumnClassMetrics>,
    pub n_valid: usize,
    pub n_successful: usize,
    /// successful / valid; None when no column is valid
    pub ratio: Option<f64>,
    /// summaries over successful queries only
    pub rmse_successful: Option<f64>,
    pub f1_successful: Option<f64>,
    pub auc_successful: Option<f64>,
}

/// Validity rule for a query column.
pub const MIN_OBSERVED: usize = 100;
pub const MIN_ACTIVE: usize = 25;
pub const MIN_INACTIVE: usize = 25;
/// Success rule: AUC strictly above this threshold.
pub const SUCCESS_AUC: f64 = 0.7;

/// Per-column classification metrics at an activity cutoff: active iff the
/// held-out truth is at or above the cutoff, scores are predicted means.
pub fn classification_metrics(
    pairs_by_col: &BTreeMap<usize, Vec<(f64, f64)>>,
    cutoff: f64,
) -> ClassificationReport {
    let mut per_column = Vec::with_capacity(pairs_by_col.len());
    for (&col_id, pairs) in pairs_by_col {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1 >= cutoff).collect();
        let n_observed = pairs.len();
        let n_active = labels.iter().filter(|&&l| l).count();
        let n_inactive = n_observed - n_active;
        let valid = n_observed >= MIN_OBSERVED && n_active >= MIN_ACTIVE && n_inactive >= MIN_INACTIVE;
        let auc = auc_roc(&scores, &labels);
        let f1 = f1_at_cutoff(&scores, &labels, cutoff);
        let col_rmse = rmse(pairs).unwrap_or(f64::NAN);
        let successful = valid && auc.map(|a| a > SUCCESS_AUC).unwrap_or(false);
        per_column.push(ColumnClassMetrics {
            col_id,
            n_observed,
            n_active,
            n_inactive,
            valid,
            auc,
            f1,
            rmse: col_rmse,
            successful,
        });
    }
    let n_valid = per_column.iter().filter(|c| c.valid).count();
    let n_successful = per_column.iter().filter(|c| c.successful).count();
    let ratio = if n_valid > 0 {
        Some(n_successful as f64 / n_valid as f64)
    } else {
        None
    };
    let successful: Vec<&ColumnClassMetrics> =
        per_column.iter().filter(|c| c.successful).collect();
    let mean_over = |f: &dyn Fn(&ColumnClassMetrics) -> Option<f64>| -> Option<f64> {
        let values: Vec<f64> = successful.iter().filter_map(|c| f(c)).collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    ClassificationReport {
        cutoff,
        n_valid,
        n_successful,
        ratio,
        rmse_successful: mean_over(&|c| if c.rmse.is_finite() { Some(c.rmse) } else { None }),
        f1_successful: mean_over(&|c| c.f1),
        auc_successful: mean_over(&|c| c.auc),
        per_column,
    }
}

/// Pair predictions with held-out truth; only cells present in the test set
/// are evaluated. Keys are original (row_id, col_id).
pub fn pair_with_truth(
    preds: &[GaussianPrediction],
    truth: &MultiViewDataset,
) -> (Vec<(f64, f64)>, BTreeMap<usize, Vec<(f64, f64)>>) {
    let target = truth.target();
    let mut truth_map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for t in target.triples() {
        truth_map.insert((truth.row_ids()[t.row], target.col_ids()[t.col]), t.value);
    }
    let mut pairs = Vec::new();
    let mut by_col: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for p in preds {
        if let Some(&t) = truth_map.get(&(p.row_id, p.col_id)) {
            pairs.push((p.mean, t));
            by_col.entry(p.col_id).or_default().push((p.mean, t));
        }
    }
    (pairs, by_col)
}

/// Wall-clock breakdown following the summed-stage-maxima convention.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WallClock {
    pub stage1: f64,
    pub stage2_max: f64,
    pub aggregate_max: f64,
    pub predict: f64,
    pub total: f64,
}

impl WallClock {
    fn finish(mut self) -> Self {
        self.total = self.stage1 + self.stage2_max + self.aggregate_max + self.predict;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rmse: f64,
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    pub wallclock: WallClock,
    pub clamped_count: usize,
    pub n_pairs: usize,
    pub config_fingerprint: String,
}

/// Which methods to run in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Independent blocks, ordinary PoE.
    Sod,
    /// Two-stage coupled experts, ordinary PoE.
    Poe,
    /// Two-stage coupled experts, corrected PoE.
    CorrectedPoe,
    /// Two-stage coupled experts aggregated, then ordinary PoE.
    IntermediateAggregation,
    /// One model over all training rows.
    FullPosterior,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Sod => "sod",
            MethodKind::Poe => "poe",
            MethodKind::CorrectedPoe => "corrected_poe",
            MethodKind::IntermediateAggregation => "intermediate_aggregation",
            MethodKind::FullPosterior => "full_posterior",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub blocks: usize,
    pub n_aggs: usize,
    /// per-fold seeds; each fold regenerates data and models
    pub fold_seeds: Vec<u64>,
    pub methods: Vec<MethodKind>,
    /// activity cutoff for classification metrics; None skips them, and the
    /// sentinel value `median` uses the empirical median of the held-out
    /// truth
    pub cutoff: Option<CutoffSpec>,
}

#[derive(Debug, Clone, Copy)]
pub enum CutoffSpec {
    Fixed(f64),
    EmpiricalMedian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_seed: u64,
    pub methods: Vec<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub folds: Vec<FoldReport>,
    /// per method: mean and standard error of the RMSE over folds
    pub rmse_summary: BTreeMap<String, (f64, f64)>,
    pub spearman_summary: BTreeMap<String, (f64, f64)>,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn now() -> std::time::Instant {
    std::time::Instant::now()
}

/// Train every requested method on one fold and evaluate on the shared
/// held-out rows.
fn run_fold(cfg: &ExperimentConfig, fold_seed: u64, fingerprint: &str) -> Result<FoldReport> {
    let mut synth_cfg = cfg.synthetic.clone();
    synth_cfg.seed = fold_seed;
    let data = generate_synthetic(&synth_cfg)?;
    let perms = reorder_by_density(&data.train);
    let train = apply_reorder(&data.train, &perms)?;
    let test = &data.test;
    let partition = partition_rows(&train, cfg.blocks)?;

    let mut tcfg = cfg.train.clone();
    tcfg.seed = fold_seed;

    let needs_coupled = cfg.methods.iter().any(|m| {
        matches!(
            m,
            MethodKind::Poe | MethodKind::CorrectedPoe | MethodKind::IntermediateAggregation
        )
    });
    let needs_sod = cfg.methods.contains(&MethodKind::Sod);
    let needs_full = cfg.methods.contains(&MethodKind::FullPosterior);

    // --- two-stage training ---
    let mut coupled: Vec<Expert> = Vec::new();
    let mut stage1_secs = 0.0;
    let mut stage2_max = 0.0f64;
    let mut snapshot = None;
    if needs_coupled || needs_sod {
        let t0 = now();
        let (stage1_expert, snap, _) = train_stage1(&train, &partition, &tcfg)?;
        stage1_secs = t0.elapsed().as_secs_f64();
        if needs_coupled {
            let results: Result<Vec<(Expert, f64)>> = partition.blocks[1..]
                .par_iter()
                .enumerate()
                .map(|(i, rows)| {
                    let t = now();
                    let (expert, _) = train_stage2_block(&train, rows, i + 1, &snap, &tcfg)?;
                    Ok((expert, t.elapsed().as_secs_f64()))
                })
                .collect();
            coupled.push(stage1_expert.clone());
            for (expert, secs) in results? {
                stage2_max = stage2_max.max(secs);
                coupled.push(expert);
            }
        }
        snapshot = Some((snap, stage1_expert));
    }

    // --- SoD baseline: independent blocks, block 1 shared with stage 1 ---
    let mut sod: Vec<Expert> = Vec::new();
    let mut sod_max = 0.0f64;
    if needs_sod {
        let (_, stage1_expert) = snapshot.as_ref().expect("stage 1 trained");
        let mut first = stage1_expert.clone();
        first.kind = ExpertKind::Independent;
        sod_max = stage1_secs;
        let results: Result<Vec<(Expert, f64)>> = partition.blocks[1..]
            .par_iter()
            .enumerate()
            .map(|(i, rows)| {
                let t = now();
                let (expert, _) =
                    train_independent_block(&train, rows, &tcfg, i + 1, &format!("sod/block{}", i + 1))?;
                Ok((expert, t.elapsed().as_secs_f64()))
            })
            .collect();
        sod.push(first);
        for (expert, secs) in results? {
            sod_max = sod_max.max(secs);
            sod.push(expert);
        }
    }

    // --- full posterior ---
    let mut full: Option<(Expert, f64)> = None;
    if needs_full {
        let all: Vec<usize> = (0..train.n_rows()).collect();
        let t0 = now();
        let (expert, _) = train_independent_block(&train, &all, &tcfg, 0, "full")?;
        full = Some((expert, t0.elapsed().as_secs_f64()));
    }

    // --- intermediate aggregation ---
    let mut aggregated: Vec<Expert> = Vec::new();
    let mut aggregate_max = 0.0;
    if cfg.methods.contains(&MethodKind::IntermediateAggregation) {
        let (snap, _) = snapshot.as_ref().expect("snapshot available");
        let t0 = now();
        aggregated = aggregate_submodels(&train, &coupled, snap, cfg.n_aggs)?;
        aggregate_max = t0.elapsed().as_secs_f64();
    }

    // --- prediction & evaluation per method ---
    let cutoff_value = cfg.cutoff.map(|c| match c {
        CutoffSpec::Fixed(v) => v,
        CutoffSpec::EmpiricalMedian => {
            let mut values: Vec<f64> = test.target().triples().map(|t| t.value).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if values.is_empty() {
                0.0
            } else {
                values[values.len() / 2]
            }
        }
    });

    let evaluate = |method: MethodKind,
                    preds: &[GaussianPrediction],
                    wallclock: WallClock|
     -> Result<MetricReport> {
        let (pairs, by_col) = pair_with_truth(preds, test);
        let classification = cutoff_value.map(|c| classification_metrics(&by_col, c));
        Ok(MetricReport {
            method: method.name().into(),
            rmse: rmse(&pairs)?,
            spearman: spearman(&pairs)?,
            classification,
            wallclock: wallclock.finish(),
            clamped_count: preds.iter().filter(|p| p.clamped).count(),
            n_pairs: pairs.len(),
            config_fingerprint: fingerprint.into(),
        })
    };

    let mut methods = Vec::new();

    // coupled experts share inference across the two PoE variants
    if needs_coupled {
        let refs: Vec<&Expert> = coupled.iter().collect();
        let t0 = now();
        let per = infer_and_predict(&refs, test, tcfg.test_latent_iterations)?;
        let predict_secs = t0.elapsed().as_secs_f64();
        for method in &cfg.methods {
            let (mode, label) = match method {
                MethodKind::Poe => (PredictMode::SodPoe, MethodKind::Poe),
                MethodKind::CorrectedPoe => (PredictMode::CorrectedPoe, MethodKind::CorrectedPoe),
                _ => continue,
            };
            let preds = aggregate_predictions(&per, mode, test);
            methods.push(evaluate(
                label,
                &preds,
                WallClock {
                    stage1: stage1_secs,
                    stage2_max,
                    aggregate_max: 0.0,
                    predict: predict_secs,
                    total: 0.0,
                },
            )?);
        }
    }

    if cfg.methods.contains(&MethodKind::IntermediateAggregation) {
        let refs: Vec<&Expert> = aggregated.iter().collect();
        let t0 = now();
        let per = infer_and_predict(&refs, test, tcfg.test_latent_iterations)?;
        let predict_secs = t0.elapsed().as_secs_f64();
        let preds = aggregate_predictions(&per, PredictMode::IntermediateAggPoe, test);
        methods.push(evaluate(
            MethodKind::IntermediateAggregation,
            &preds,
            WallClock {
                stage1: stage1_secs,
                stage2_max,
                aggregate_max,
                predict: predict_secs,
                total: 0.0,
            },
        )?);
    }

    if needs_sod {
        let refs: Vec<&Expert> = sod.iter().collect();
        let t0 = now();
        let per = infer_and_predict(&refs, test, tcfg.test_latent_iterations)?;
        let predict_secs = t0.elapsed().as_secs_f64();
        let preds = aggregate_predictions(&per, PredictMode::SodPoe, test);
        methods.push(evaluate(
            MethodKind::Sod,
            &preds,
            WallClock {
                stage1: 0.0,
                stage2_max: sod_max,
                aggregate_max: 0.0,
                predict: predict_secs,
                total: 0.0,
            },
        )?);
    }

    if let Some((expert, train_secs)) = &full {
        let refs = vec![expert];
        let t0 = now();
        let per = infer_and_predict(&refs, test, tcfg.test_latent_iterations)?;
        let predict_secs = t0.elapsed().as_secs_f64();
        let preds = aggregate_predictions(&per, PredictMode::SodPoe, test);
        methods.push(evaluate(
            MethodKind::FullPosterior,
            &preds,
            WallClock {
                stage1: 0.0,
                stage2_max: *train_secs,
                aggregate_max: 0.0,
                predict: predict_secs,
                total: 0.0,
            },
        )?);
    }

    // training rows never appear in the evaluation pairs
    for &test_row in test.row_ids() {
        debug_assert!(
            !train.row_ids().contains(&test_row),
            "test row {test_row} leaked into training"
        );
    }

    Ok(FoldReport {
        fold_seed,
        methods,
    })
}

/// Fingerprint of the experiment setup, embedded in every report.
fn experiment_fingerprint(cfg: &ExperimentConfig) -> String {
    let text = format!(
        "{:?}|{:?}|{}|{}|{:?}|{:?}",
        cfg.synthetic, cfg.train, cfg.blocks, cfg.n_aggs, cfg.fold_seeds, cfg.methods
    );
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

/// Run every method over every fold; identical held-out rows and seeds per
/// fold across methods.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.fold_seeds.is_empty() {
        return Err(NlmcError::EmptyInput {
            context: "fold seeds".into(),
        });
    }
    let fingerprint = experiment_fingerprint(cfg);
    let mut folds = Vec::new();
    for &seed in &cfg.fold_seeds {
        folds.push(run_fold(cfg, seed, &fingerprint)?);
    }

    let mut rmse_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut spearman_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for fold in &folds {
        for m in &fold.methods {
            rmse_values.entry(m.method.clone()).or_default().push(m.rmse);
            if let Some(s) = m.spearman {
                spearman_values.entry(m.method.clone()).or_default().push(s);
            }
        }
    }
    let rmse_summary = rmse_values
        .into_iter()
        .map(|(k, v)| (k, mean_and_se(&v)))
        .collect();
    let spearman_summary = spearman_values
        .into_iter()
        .map(|(k, v)| (k, mean_and_se(&v)))
        .collect();
    Ok(ExperimentReport {
        folds,
        rmse_summary,
        spearman_summary,
    })
}

/// Flat per-column CSV of classification metrics.
pub fn render_per_column_csv(report: &ClassificationReport) -> String {
    let mut out = String::from("col_id,n_observed,n_active,n_inactive,valid,auc,f1,rmse,successful\n");
    for c in &report.per_column {
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.col_id,
            c.n_observed,
            c.n_active,
            c.n_inactive,
            u8::from(c.valid),
            fmt_opt(c.auc),
            fmt_opt(c.f1),
            c.rmse,
            u8::from(c.successful)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), 0.0);
        let v = rmse(&[(0.0, 3.0), (0.0, 4.0)]).unwrap();
        assert!((v - (12.5f64).sqrt()).abs() < 1e-12);
        assert!((v - 3.5355339059327378).abs() < 1e-12);
        // constant offset c gives RMSE |c|
        let off = rmse(&[(1.5, 1.0), (2.5, 2.0), (3.5, 3.0)]).unwrap();
        assert!((off - 0.5).abs() < 1e-12);
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn spearman_hand_values() {
        let s = spearman(&[(1.0, 10.0), (2.0, 20.0), (3.0, 30.0)]).unwrap().unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let s = spearman(&[(1.0, 30.0), (2.0, 20.0), (3.0, 10.0)]).unwrap().unwrap();
        assert!((s + 1.0).abs() < 1e-12);
        let s = spearman(&[(1.0, 1.0), (2.0, 3.0), (3.0, 2.0)]).unwrap().unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        assert_eq!(spearman(&[(1.0, 1.0), (1.0, 2.0)]).unwrap(), None);
    }

    #[test]
    fn auc_perfect_and_reversed() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(auc_roc(&scores, &labels), Some(1.0));
        let reversed = [false, false, true, true];
        assert_eq!(auc_roc(&scores, &reversed), Some(0.0));
        assert_eq!(auc_roc(&scores, &[true; 4]), None);
    }

    #[test]
    fn f1_perfect_separation() {
        let scores = [6.5, 7.0, 4.0, 3.0];
        let labels = [true, true, false, false];
        assert_eq!(f1_at_cutoff(&scores, &labels, 5.0), Some(1.0));
    }

    #[test]
    fn validity_rule_excludes_small_columns() {
        let mut by_col: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        // 99 observations: below the observation floor
        by_col.insert(0, (0..99).map(|i| (i as f64, if i < 50 { 6.0 } else { 4.0 })).collect());
        // 100 observations with 50/50 classes and perfectly separating scores
        by_col.insert(
            1,
            (0..100)
                .map(|i| {
                    let active = i < 50;
                    ((if active { 1.0 } else { 0.0 }) * 10.0 + i as f64 * 1e-3, if active { 6.0 } else { 4.0 })
                })
                .collect(),
        );
        let report = classification_metrics(&by_col, 5.0);
        assert!(!report.per_column[0].valid);
        assert!(report.per_column[1].valid);
        assert!(report.per_column[1].successful);
        assert_eq!(report.n_valid, 1);
        assert_eq!(report.ratio, Some(1.0));
    }

    #[test]
    fn random_scores_give_half_auc() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 20000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let auc = auc_roc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
    }
}
