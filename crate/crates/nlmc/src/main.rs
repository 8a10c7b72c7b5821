//! Command-line interface for scalable Bayesian non-linear matrix
//! completion.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use nlmc::coupling::{aggregate_submodels, train_stage1, train_stage2_block};
use nlmc::data::{
    apply_reorder, generate_synthetic, partition_rows, read_dataset, reorder_by_density,
    write_dataset, Partition, SyntheticConfig,
};
use nlmc::eval::{classification_metrics, pair_with_truth, render_per_column_csv, rmse, spearman};
use nlmc::predict::{predict_out_of_matrix, read_predictions_csv, write_predictions_csv};
use nlmc::runtime::{
    read_expert, read_snapshot, run_pipeline, write_expert, write_snapshot, PipelineConfig,
};
use nlmc::Result;

#[derive(Parser)]
#[command(name = "nlmc", about = "Scalable Bayesian non-linear matrix completion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset (train/test split on disk).
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        /// comma-separated view widths, e.g. 150,100,150
        #[arg(long, default_value = "150,100,150")]
        dims: String,
        #[arg(long, default_value_t = 5)]
        latent_dim: usize,
        #[arg(long, default_value_t = 0.25)]
        noise_variance: f64,
        #[arg(long, default_value_t = 0.8)]
        missing_frac: f64,
        #[arg(long, default_value_t = 0.2)]
        test_frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Density-order a dataset and write the reordered copy plus the block
    /// partition.
    Partition {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        blocks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-1 model on block 1 and write the snapshot.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one stage-2 block against the snapshot.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        block: usize,
    },
    /// Aggregate trained submodels into intermediate experts.
    Aggregate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        naggs: Option<usize>,
    },
    /// Predict held-out rows with the trained experts.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a prediction CSV against a held-out dataset.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        cutoff: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full two-stage pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<PipelineConfig> {
    PipelineConfig::from_json(&fs::read_to_string(path)?)
}

/// Load the pipeline context the stage subcommands share: datasets and the
/// partition (from the partition file when configured, otherwise by density
/// ordering in memory).
fn load_context(cfg: &PipelineConfig) -> Result<(nlmc::data::MultiViewDataset, Partition)> {
    let raw = read_dataset(&cfg.train_manifest)?;
    match &cfg.partition_file {
        Some(path) => {
            let partition: Partition = serde_json::from_str(&fs::read_to_string(path)?)?;
            Ok((raw, partition))
        }
        None => {
            let perms = reorder_by_density(&raw);
            let train = apply_reorder(&raw, &perms)?;
            let partition = partition_rows(&train, cfg.blocks)?;
            Ok((train, partition))
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            seed,
            rows,
            dims,
            latent_dim,
            noise_variance,
            missing_frac,
            test_frac,
            out,
        } => {
            let parsed: Vec<usize> = dims
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| nlmc::NlmcError::param("dims", format!("invalid `{dims}`")))?;
            if parsed.len() != 3 {
                return Err(nlmc::NlmcError::param("dims", "expected three view widths"));
            }
            let data = generate_synthetic(&SyntheticConfig {
                seed,
                n_rows: rows,
                dims: [parsed[0], parsed[1], parsed[2]],
                latent_dim,
                noise_variance,
                target_missing_frac: missing_frac,
                test_row_frac: test_frac,
            })?;
            let train_path = write_dataset(&data.train, &out.join("train"))?;
            let test_path = write_dataset(&data.test, &out.join("test"))?;
            println!("wrote {} and {}", train_path.display(), test_path.display());
        }
        Command::Partition { dataset, blocks, out } => {
            let raw = read_dataset(&dataset)?;
            let perms = reorder_by_density(&raw);
            let reordered = apply_reorder(&raw, &perms)?;
            let partition = partition_rows(&reordered, blocks)?;
            fs::create_dir_all(&out)?;
            let manifest = write_dataset(&reordered, &out)?;
            let partition_path = out.join("partition.json");
            fs::write(&partition_path, serde_json::to_string_pretty(&partition)?)?;
            println!(
                "wrote {} and {} ({} blocks)",
                manifest.display(),
                partition_path.display(),
                partition.n_blocks()
            );
        }
        Command::TrainStage1 { config } => {
            let cfg = load_config(&config)?;
            let (train, partition) = load_context(&cfg)?;
            let mut tcfg = cfg.train_config()?;
            tcfg.seed = nlmc::util::derive_seed(cfg.seed, "stage1");
            let (expert, snapshot, outcome) = train_stage1(&train, &partition, &tcfg)?;
            fs::create_dir_all(&cfg.output_dir)?;
            write_snapshot(&snapshot, &cfg.output_dir.join("snapshot"))?;
            write_expert(&expert, &cfg.output_dir.join("models/block_0"))?;
            println!(
                "stage 1 done: bound {:.4} after {} iterations",
                outcome.bound, outcome.iterations
            );
        }
        Command::TrainStage2 { config, block } => {
            let cfg = load_config(&config)?;
            let (train, partition) = load_context(&cfg)?;
            if block == 0 || block >= partition.n_blocks() {
                return Err(nlmc::NlmcError::param(
                    "block",
                    format!("stage-2 block must lie in 1..{}", partition.n_blocks()),
                ));
            }
            let snapshot = read_snapshot(&cfg.output_dir.join("snapshot"))?;
            let mut tcfg = cfg.train_config()?;
            tcfg.seed = nlmc::util::derive_seed(cfg.seed, &format!("stage2/block={block}"));
            let (expert, outcome) =
                train_stage2_block(&train, &partition.blocks[block], block, &snapshot, &tcfg)?;
            write_expert(&expert, &cfg.output_dir.join(format!("models/block_{block}")))?;
            println!(
                "stage 2 block {block} done: bound {:.4} after {} iterations",
                outcome.bound, outcome.iterations
            );
        }
        Command::Aggregate { config, naggs } => {
            let cfg = load_config(&config)?;
            let (train, partition) = load_context(&cfg)?;
            let n_aggs = naggs.or(cfg.n_aggs).ok_or_else(|| {
                nlmc::NlmcError::param("naggs", "pass --naggs or set n_aggs in the config")
            })?;
            let snapshot = read_snapshot(&cfg.output_dir.join("snapshot"))?;
            let mut experts = Vec::new();
            for block in 0..partition.n_blocks() {
                experts.push(read_expert(
                    &cfg.output_dir.join(format!("models/block_{block}")),
                    &train,
                )?);
            }
            let groups = aggregate_submodels(&train, &experts, &snapshot, n_aggs)?;
            for group in &groups {
                write_expert(
                    group,
                    &cfg.output_dir.join(format!("aggregates/group_{}", group.block_index)),
                )?;
            }
            println!("aggregated {} experts into {} groups", experts.len(), groups.len());
        }
        Command::Predict { config, mode } => {
            let mut cfg = load_config(&config)?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let (train, partition) = load_context(&cfg)?;
            let test = read_dataset(&cfg.test_manifest)?;
            let mode = cfg.predict_mode()?;
            let mut experts = Vec::new();
            match mode {
                nlmc::predict::PredictMode::IntermediateAggPoe => {
                    let mut g = 0;
                    loop {
                        let base = cfg.output_dir.join(format!("aggregates/group_{g}"));
                        if !nlmc::runtime::ArrayBundle::exists(&base) {
                            break;
                        }
                        experts.push(read_expert(&base, &train)?);
                        g += 1;
                    }
                }
                _ => {
                    for block in 0..partition.n_blocks() {
                        experts.push(read_expert(
                            &cfg.output_dir.join(format!("models/block_{block}")),
                            &train,
                        )?);
                    }
                }
            }
            let refs: Vec<&nlmc::coupling::Expert> = experts.iter().collect();
            let preds = predict_out_of_matrix(&refs, &test, mode, cfg.test_latent_iterations)?;
            let path = cfg.output_dir.join("predictions.csv");
            write_predictions_csv(&path, &preds)?;
            println!("wrote {} ({} predictions)", path.display(), preds.len());
        }
        Command::Evaluate { pred, truth, cutoff, out } => {
            let preds = read_predictions_csv(&pred)?;
            let truth_ds = read_dataset(&truth)?;
            let (pairs, by_col) = pair_with_truth(&preds, &truth_ds);
            let rmse_value = rmse(&pairs)?;
            let spearman_value = spearman(&pairs)?;
            let classification = cutoff.map(|c| classification_metrics(&by_col, c));
            let report = serde_json::json!({
                "rmse": rmse_value,
                "spearman": spearman_value,
                "n_pairs": pairs.len(),
                "clamped": preds.iter().filter(|p| p.clamped).count(),
                "classification": classification,
            });
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => {
                    fs::write(&path, &text)?;
                    if let Some(c) = &classification {
                        let csv_path = path.with_extension("columns.csv");
                        fs::write(&csv_path, render_per_column_csv(c))?;
                    }
                    println!("wrote {}", path.display());
                }
                None => println!("{text}"),
            }
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let outputs = run_pipeline(&cfg)?;
            println!(
                "pipeline done: {} jobs, total wall-clock {:.2}s, predictions at {}",
                outputs.dag.jobs.len(),
                outputs.timing.reported_total,
                outputs.predictions_path.display()
            );
        }
    }
    Ok(())
}
