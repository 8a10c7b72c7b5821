//! Two-stage distributed coordinator: one stage-1 job, an embarrassingly
//! parallel fan-out of stage-2 jobs conditioned on the snapshot, optional
//! intermediate aggregation, prediction, and wall-clock accounting.
//!
//! Communication structure is the contract: stage-2 jobs receive the
//! snapshot once and never talk to each other; results are collected by the
//! coordinator. Workers are an in-process pool behind the same job
//! interface.

pub mod bundle;
pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coupling::{
    aggregate_group, train_stage1, train_stage2_block, Expert,
};
use crate::data::{apply_reorder, partition_rows, read_dataset, reorder_by_density, MultiViewDataset, Partition};
use crate::error::{NlmcError, Result};
use crate::predict::{predict_out_of_matrix, write_predictions_csv};
use crate::util::derive_seed;

pub use bundle::{
    expert_from_bundle, expert_to_bundle, read_expert, read_snapshot, snapshot_from_bundle,
    snapshot_to_bundle, write_expert, write_snapshot, ArrayBundle, NamedArray,
};
pub use config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Stage1,
    Stage2,
    Aggregate,
    Predict,
}

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::Stage1 => "stage1",
            StageKind::Stage2 => "stage2",
            StageKind::Aggregate => "aggregate",
            StageKind::Predict => "predict",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    pub stage: StageKind,
    pub block: Option<usize>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct JobDag {
    pub jobs: Vec<JobSpec>,
}

impl JobDag {
    pub fn stage_jobs(&self, stage: StageKind) -> Vec<usize> {
        self.jobs
            .iter()
            .enumerate()
            .filter(|(_, j)| j.stage == stage)
            .map(|(i, _)| i)
            .collect()
    }

    /// Directed edges (producer job, consumer job) implied by artifacts.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut producer: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, job) in self.jobs.iter().enumerate() {
            for out in &job.outputs {
                producer.insert(out, i);
            }
        }
        let mut edges = Vec::new();
        for (i, job) in self.jobs.iter().enumerate() {
            for input in &job.inputs {
                if let Some(&p) = producer.get(input.as_str()) {
                    edges.push((p, i));
                }
            }
        }
        edges
    }
}

/// Expert indices (block order) belonging to each aggregation group.
pub fn aggregation_groups(n_experts: usize, n_aggs: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    while start < n_experts {
        let end = (start + n_aggs).min(n_experts);
        groups.push((start..end).collect());
        start = end;
    }
    groups
}

/// Plan the job DAG for one pipeline run: one stage-1 job, I-1 stage-2
/// jobs, ceil(I / n_aggs) aggregation jobs when enabled, one prediction
/// job. Stage-2 jobs have no edges among themselves.
pub fn plan_jobs(partition: &Partition, cfg: &PipelineConfig) -> JobDag {
    let i_blocks = partition.n_blocks();
    let mut jobs = Vec::new();
    jobs.push(JobSpec {
        id: "stage1".into(),
        stage: StageKind::Stage1,
        block: Some(0),
        inputs: vec![],
        outputs: vec!["snapshot".into(), "models/block_0".into()],
        seed: derive_seed(cfg.seed, "stage1"),
    });
    for block in 1..i_blocks {
        jobs.push(JobSpec {
            id: format!("stage2/block={block}"),
            stage: StageKind::Stage2,
            block: Some(block),
            inputs: vec!["snapshot".into()],
            outputs: vec![format!("models/block_{block}")],
            seed: derive_seed(cfg.seed, &format!("stage2/block={block}")),
        });
    }
    let mut predict_inputs: Vec<String> = Vec::new();
    if let Some(n_aggs) = cfg.n_aggs {
        for (g, members) in aggregation_groups(i_blocks, n_aggs.max(1)).iter().enumerate() {
            let mut inputs = vec!["snapshot".into()];
            for &e in members {
                inputs.push(format!("models/block_{e}"));
            }
            jobs.push(JobSpec {
                id: format!("aggregate/group={g}"),
                stage: StageKind::Aggregate,
                block: Some(g),
                inputs,
                outputs: vec![format!("aggregates/group_{g}")],
                seed: derive_seed(cfg.seed, &format!("aggregate/group={g}")),
            });
            predict_inputs.push(format!("aggregates/group_{g}"));
        }
    } else {
        for block in 0..i_blocks {
            predict_inputs.push(format!("models/block_{block}"));
        }
    }
    jobs.push(JobSpec {
        id: "predict".into(),
        stage: StageKind::Predict,
        block: None,
        inputs: predict_inputs,
        outputs: vec!["predictions.csv".into()],
        seed: derive_seed(cfg.seed, "predict"),
    });
    JobDag { jobs }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    JobStarted { job: String },
    JobFinished { job: String, seconds: f64 },
    JobSkipped { job: String, reason: String },
    /// The one communication round: a stage-2 worker receiving the stage-1
    /// snapshot.
    SnapshotTransfer { to_job: String },
    ArtifactWritten { job: String, artifact: String },
    /// Coordinator-side collection of a finished artifact.
    ResultCollected { job: String, artifact: String },
    /// Never emitted by this scheme; present so logs can assert its absence.
    InterWorkerMessage { from_job: String, to_job: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub events: Vec<LogEvent>,
}

impl ExecutionLog {
    pub fn snapshot_transfers(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, LogEvent::SnapshotTransfer { .. }))
            .count()
    }

    pub fn inter_worker_messages(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, LogEvent::InterWorkerMessage { .. }))
            .count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut events = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(line)?);
        }
        Ok(ExecutionLog { events })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobTiming {
    pub job: String,
    pub stage: String,
    pub seconds: f64,
    pub skipped: bool,
}

/// Wall-clock accounting per the two-stage convention: the reported total is
/// the sum over stages of the maximum job time within the stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub per_job: Vec<JobTiming>,
    pub stage_max: BTreeMap<String, f64>,
    pub reported_total: f64,
}

impl TimingReport {
    pub fn from_jobs(per_job: Vec<JobTiming>) -> Self {
        let mut stage_max: BTreeMap<String, f64> = BTreeMap::new();
        for j in &per_job {
            let entry = stage_max.entry(j.stage.clone()).or_insert(0.0);
            if j.seconds > *entry {
                *entry = j.seconds;
            }
        }
        let reported_total = stage_max.values().sum();
        TimingReport {
            per_job,
            stage_max,
            reported_total,
        }
    }

    /// Recompute the reported total from the per-job records.
    pub fn recompute_total(&self) -> f64 {
        let mut stage_max: BTreeMap<&str, f64> = BTreeMap::new();
        for j in &self.per_job {
            let entry = stage_max.entry(j.stage.as_str()).or_insert(0.0);
            if j.seconds > *entry {
                *entry = j.seconds;
            }
        }
        stage_max.values().sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobFailureInfo {
    pub job: String,
    pub block: Option<usize>,
    pub message: String,
}

#[derive(Debug)]
pub struct ExecutionResult {
    pub timing: TimingReport,
    pub log: ExecutionLog,
    pub failure: Option<JobFailureInfo>,
}

/// A job executor. Implementations must be thread-safe; jobs communicate
/// only through artifacts.
pub trait JobRunner: Sync {
    fn run(&self, job: &JobSpec) -> Result<Vec<LogEvent>>;

    /// Resume support: a job whose outputs already exist is skipped.
    fn outputs_ready(&self, _job: &JobSpec) -> bool {
        false
    }
}

struct JobOutcome {
    seconds: f64,
    events: Vec<LogEvent>,
    error: Option<String>,
    skipped: bool,
}

/// Execute the DAG stage by stage with a pool of `worker_count` workers per
/// stage. Artifacts are deterministic for any worker count; only timings
/// vary.
pub fn execute(dag: &JobDag, runner: &dyn JobRunner, worker_count: usize) -> ExecutionResult {
    let stages = [
        StageKind::Stage1,
        StageKind::Stage2,
        StageKind::Aggregate,
        StageKind::Predict,
    ];
    let mut per_job = Vec::new();
    let mut log = ExecutionLog::default();
    let mut failure: Option<JobFailureInfo> = None;

    'stages: for stage in stages {
        let job_indices = dag.stage_jobs(stage);
        if job_indices.is_empty() {
            continue;
        }
        let outcomes: Mutex<Vec<Option<JobOutcome>>> =
            Mutex::new((0..job_indices.len()).map(|_| None).collect());
        let cursor = AtomicUsize::new(0);
        let workers = worker_count.max(1).min(job_indices.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let slot = cursor.fetch_add(1, Ordering::SeqCst);
                    if slot >= job_indices.len() {
                        break;
                    }
                    let job = &dag.jobs[job_indices[slot]];
                    let outcome = if runner.outputs_ready(job) {
                        JobOutcome {
                            seconds: 0.0,
                            events: vec![],
                            error: None,
                            skipped: true,
                        }
                    } else {
                        let start = Instant::now();
                        match runner.run(job) {
                            Ok(events) => JobOutcome {
                                seconds: start.elapsed().as_secs_f64(),
                                events,
                                error: None,
                                skipped: false,
                            },
                            Err(err) => JobOutcome {
                                seconds: start.elapsed().as_secs_f64(),
                                events: vec![],
                                error: Some(err.to_string()),
                                skipped: false,
                            },
                        }
                    };
                    outcomes.lock().unwrap()[slot] = Some(outcome);
                });
            }
        });
        let outcomes = outcomes.into_inner().unwrap();
        for (slot, outcome) in outcomes.into_iter().enumerate() {
            let job = &dag.jobs[job_indices[slot]];
            let outcome = outcome.expect("job outcome recorded");
            if outcome.skipped {
                log.events.push(LogEvent::JobSkipped {
                    job: job.id.clone(),
                    reason: "outputs already present".into(),
                });
            } else {
                log.events.push(LogEvent::JobStarted { job: job.id.clone() });
                log.events.extend(outcome.events.iter().cloned());
                log.events.push(LogEvent::JobFinished {
                    job: job.id.clone(),
                    seconds: outcome.seconds,
                });
            }
            per_job.push(JobTiming {
                job: job.id.clone(),
                stage: job.stage.name().into(),
                seconds: outcome.seconds,
                skipped: outcome.skipped,
            });
            if failure.is_none() {
                if let Some(message) = outcome.error {
                    failure = Some(JobFailureInfo {
                        job: job.id.clone(),
                        block: job.block,
                        message,
                    });
                }
            }
        }
        if failure.is_some() {
            break 'stages;
        }
    }

    ExecutionResult {
        timing: TimingReport::from_jobs(per_job),
        log,
        failure,
    }
}

/// The production job runner: trains, aggregates, and predicts against
/// on-disk artifacts under the configured output directory.
pub struct PipelineRunner {
    pub cfg: PipelineConfig,
    pub train: MultiViewDataset,
    pub test: MultiViewDataset,
    pub partition: Partition,
}

impl PipelineRunner {
    fn base(&self, artifact: &str) -> PathBuf {
        self.cfg.output_dir.join(artifact)
    }

    fn load_experts(&self, inputs: &[String], job: &str, events: &mut Vec<LogEvent>) -> Result<Vec<Expert>> {
        let mut experts = Vec::new();
        for input in inputs {
            if input == "snapshot" {
                continue;
            }
            let expert = read_expert(&self.base(input), &self.train)?;
            events.push(LogEvent::ResultCollected {
                job: job.into(),
                artifact: input.clone(),
            });
            experts.push(expert);
        }
        Ok(experts)
    }

    fn run_stage1(&self, job: &JobSpec) -> Result<Vec<LogEvent>> {
        let mut tcfg = self.cfg.train_config()?;
        tcfg.seed = job.seed;
        let (expert, snapshot, _trace) = train_stage1(&self.train, &self.partition, &tcfg)?;
        write_snapshot(&snapshot, &self.base("snapshot"))?;
        write_expert(&expert, &self.base("models/block_0"))?;
        Ok(vec![
            LogEvent::ArtifactWritten {
                job: job.id.clone(),
                artifact: "snapshot".into(),
            },
            LogEvent::ArtifactWritten {
                job: job.id.clone(),
                artifact: "models/block_0".into(),
            },
        ])
    }

    fn run_stage2(&self, job: &JobSpec) -> Result<Vec<LogEvent>> {
        let block = job.block.expect("stage-2 job carries a block");
        let snapshot = read_snapshot(&self.base("snapshot"))?;
        let mut events = vec![LogEvent::SnapshotTransfer {
            to_job: job.id.clone(),
        }];
        let mut tcfg = self.cfg.train_config()?;
        tcfg.seed = job.seed;
        let rows = self.partition.blocks[block].clone();
        let (expert, _trace) = train_stage2_block(&self.train, &rows, block, &snapshot, &tcfg)?;
        let artifact = format!("models/block_{block}");
        write_expert(&expert, &self.base(&artifact))?;
        events.push(LogEvent::ArtifactWritten {
            job: job.id.clone(),
            artifact,
        });
        Ok(events)
    }

    fn run_aggregate(&self, job: &JobSpec) -> Result<Vec<LogEvent>> {
        let group = job.block.expect("aggregate job carries a group index");
        let snapshot = read_snapshot(&self.base("snapshot"))?;
        let mut events = Vec::new();
        let experts = self.load_experts(&job.inputs, &job.id, &mut events)?;
        let members: Vec<&Expert> = experts.iter().collect();
        let aggregated = aggregate_group(&self.train, &members, &snapshot, group == 0, group)?;
        let artifact = format!("aggregates/group_{group}");
        write_expert(&aggregated, &self.base(&artifact))?;
        events.push(LogEvent::ArtifactWritten {
            job: job.id.clone(),
            artifact,
        });
        Ok(events)
    }

    fn run_predict(&self, job: &JobSpec) -> Result<Vec<LogEvent>> {
        let mode = self.cfg.predict_mode()?;
        let mut events = Vec::new();
        let experts = self.load_experts(&job.inputs, &job.id, &mut events)?;
        let refs: Vec<&Expert> = experts.iter().collect();
        let preds = predict_out_of_matrix(
            &refs,
            &self.test,
            mode,
            self.cfg.test_latent_iterations,
        )?;
        write_predictions_csv(&self.base("predictions.csv"), &preds)?;
        events.push(LogEvent::ArtifactWritten {
            job: job.id.clone(),
            artifact: "predictions.csv".into(),
        });
        Ok(events)
    }
}

impl JobRunner for PipelineRunner {
    fn run(&self, job: &JobSpec) -> Result<Vec<LogEvent>> {
        match job.stage {
            StageKind::Stage1 => self.run_stage1(job),
            StageKind::Stage2 => self.run_stage2(job),
            StageKind::Aggregate => self.run_aggregate(job),
            StageKind::Predict => self.run_predict(job),
        }
    }

    fn outputs_ready(&self, job: &JobSpec) -> bool {
        job.outputs.iter().all(|artifact| {
            if artifact.ends_with(".csv") {
                self.base(artifact).is_file()
            } else {
                ArrayBundle::exists(&self.base(artifact))
            }
        })
    }
}

#[derive(Debug)]
pub struct PipelineOutputs {
    pub predictions_path: PathBuf,
    pub timing: TimingReport,
    pub log: ExecutionLog,
    pub dag: JobDag,
}

/// Run the whole pipeline from a config: load data, density-order, plan,
/// execute, and write timing plus the execution log next to the artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutputs> {
    fs::create_dir_all(&cfg.output_dir)?;
    let raw_train = read_dataset(&cfg.train_manifest)?;
    let test = read_dataset(&cfg.test_manifest)?;

    let (train, partition) = match &cfg.partition_file {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let partition: Partition = serde_json::from_str(&text)?;
            (raw_train, partition)
        }
        None => {
            let perms = reorder_by_density(&raw_train);
            let train = apply_reorder(&raw_train, &perms)?;
            let partition = partition_rows(&train, cfg.blocks)?;
            fs::write(
                cfg.output_dir.join("partition.json"),
                serde_json::to_string_pretty(&partition)?,
            )?;
            (train, partition)
        }
    };

    let dag = plan_jobs(&partition, cfg);
    let runner = PipelineRunner {
        cfg: cfg.clone(),
        train,
        test,
        partition,
    };
    let result = execute(&dag, &runner, cfg.effective_workers());
    result.log.write_jsonl(&cfg.output_dir.join("execution_log.jsonl"))?;
    fs::write(
        cfg.output_dir.join("timing.json"),
        serde_json::to_string_pretty(&result.timing)?,
    )?;
    if let Some(failure) = &result.failure {
        fs::write(
            cfg.output_dir.join("failure_manifest.json"),
            serde_json::to_string_pretty(failure)?,
        )?;
        return Err(NlmcError::JobFailure {
            job_id: failure.job.clone(),
            message: failure.message.clone(),
        });
    }
    Ok(PipelineOutputs {
        predictions_path: cfg.output_dir.join("predictions.csv"),
        timing: result.timing,
        log: result.log,
        dag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(blocks: usize, n_aggs: Option<usize>) -> PipelineConfig {
        let mut cfg = PipelineConfig::from_json(
            r#"{"train_manifest": "a.json", "test_manifest": "b.json", "output_dir": "out"}"#,
        )
        .unwrap();
        cfg.blocks = blocks;
        cfg.n_aggs = n_aggs;
        cfg
    }

    fn partition_of(n: usize, blocks: usize) -> Partition {
        let per = n / blocks;
        Partition {
            blocks: (0..blocks)
                .map(|b| (b * per..(b + 1) * per).collect())
                .collect(),
        }
    }

    #[test]
    fn dag_counts_match_the_scheme() {
        let dag = plan_jobs(&partition_of(100, 10), &cfg(10, None));
        assert_eq!(dag.stage_jobs(StageKind::Stage1).len(), 1);
        assert_eq!(dag.stage_jobs(StageKind::Stage2).len(), 9);
        assert_eq!(dag.stage_jobs(StageKind::Aggregate).len(), 0);
        assert_eq!(dag.stage_jobs(StageKind::Predict).len(), 1);

        let dag = plan_jobs(&partition_of(100, 10), &cfg(10, Some(5)));
        assert_eq!(dag.stage_jobs(StageKind::Aggregate).len(), 2);

        let dag = plan_jobs(&partition_of(10, 1), &cfg(1, None));
        assert_eq!(dag.jobs.len(), 2);
    }

    #[test]
    fn large_plan_has_single_broadcast_per_block() {
        let dag = plan_jobs(&partition_of(400, 400), &cfg(400, None));
        assert_eq!(dag.stage_jobs(StageKind::Stage2).len(), 399);
        let snapshot_edges = dag
            .edges()
            .iter()
            .filter(|&&(p, c)| {
                dag.jobs[p].stage == StageKind::Stage1 && dag.jobs[c].stage == StageKind::Stage2
            })
            .count();
        assert_eq!(snapshot_edges, 399);
        // no stage2 -> stage2 edges
        assert!(dag.edges().iter().all(|&(p, c)| {
            !(dag.jobs[p].stage == StageKind::Stage2 && dag.jobs[c].stage == StageKind::Stage2)
        }));
    }

    #[test]
    fn per_job_seeds_differ() {
        let dag = plan_jobs(&partition_of(100, 10), &cfg(10, None));
        let mut seeds: Vec<u64> = dag.jobs.iter().map(|j| j.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), dag.jobs.len());
    }

    #[test]
    fn timing_total_is_sum_of_stage_maxima() {
        let per_job = vec![
            JobTiming { job: "stage1".into(), stage: "stage1".into(), seconds: 2.0, skipped: false },
            JobTiming { job: "stage2/block=1".into(), stage: "stage2".into(), seconds: 3.0, skipped: false },
            JobTiming { job: "stage2/block=2".into(), stage: "stage2".into(), seconds: 5.0, skipped: false },
            JobTiming { job: "predict".into(), stage: "predict".into(), seconds: 1.5, skipped: false },
        ];
        let report = TimingReport::from_jobs(per_job);
        assert!((report.reported_total - (2.0 + 5.0 + 1.5)).abs() < 1e-12);
        assert!((report.recompute_total() - report.reported_total).abs() < 1e-12);
    }

    struct CountingRunner {
        fail_job: Option<String>,
        ran: Mutex<Vec<String>>,
    }

    impl JobRunner for CountingRunner {
        fn run(&self, job: &JobSpec) -> Result<Vec<LogEvent>> {
            self.ran.lock().unwrap().push(job.id.clone());
            if self.fail_job.as_deref() == Some(job.id.as_str()) {
                return Err(NlmcError::numerical("synthetic failure"));
            }
            let mut events = Vec::new();
            if job.stage == StageKind::Stage2 {
                events.push(LogEvent::SnapshotTransfer {
                    to_job: job.id.clone(),
                });
            }
            Ok(events)
        }
    }

    #[test]
    fn failed_job_aborts_later_stages_and_names_the_block() {
        let dag = plan_jobs(&partition_of(100, 10), &cfg(10, None));
        let runner = CountingRunner {
            fail_job: Some("stage2/block=3".into()),
            ran: Mutex::new(vec![]),
        };
        let result = execute(&dag, &runner, 4);
        let failure = result.failure.expect("failure recorded");
        assert_eq!(failure.job, "stage2/block=3");
        assert_eq!(failure.block, Some(3));
        let ran = runner.ran.lock().unwrap();
        assert!(!ran.iter().any(|j| j == "predict"));
    }

    #[test]
    fn snapshot_transfer_count_is_blocks_minus_one() {
        for workers in [1, 4, 8] {
            let dag = plan_jobs(&partition_of(100, 10), &cfg(10, None));
            let runner = CountingRunner {
                fail_job: None,
                ran: Mutex::new(vec![]),
            };
            let result = execute(&dag, &runner, workers);
            assert!(result.failure.is_none());
            assert_eq!(result.log.snapshot_transfers(), 9);
            assert_eq!(result.log.inter_worker_messages(), 0);
        }
    }
}
