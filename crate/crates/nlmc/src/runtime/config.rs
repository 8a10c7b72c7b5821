//! Pipeline configuration: JSON schema for the CLI and the coordinator.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::coupling::TrainConfig;
use crate::error::Result;
use crate::kernels::KernelFamily;
use crate::predict::PredictMode;
use crate::util::fnv1a64;

fn default_latent_dim() -> usize {
    5
}
fn default_inducing() -> usize {
    100
}
fn default_kernel() -> String {
    "rbf_ard".into()
}
fn default_iterations() -> usize {
    500
}
fn default_test_latent_iterations() -> usize {
    100
}
fn default_blocks() -> usize {
    10
}
fn default_workers() -> usize {
    4
}
fn default_mode() -> String {
    "corrected_poe".into()
}
fn default_noise_init() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_inducing")]
    pub n_inducing: usize,
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_test_latent_iterations")]
    pub test_latent_iterations: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// submodels per intermediate aggregate; absent disables aggregation
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_aggs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub freeze_stage2_hyperparams: bool,
    #[serde(default = "default_noise_init")]
    pub noise_init: f64,
    /// optional pre-computed partition (written by `nlmc partition`); when
    /// present the training dataset is taken as already density-ordered
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_file: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Stable fingerprint of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).unwrap_or_default();
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }

    /// Worker count, overridable with the NLMC_WORKERS environment variable.
    pub fn effective_workers(&self) -> usize {
        if let Ok(value) = std::env::var("NLMC_WORKERS") {
            if let Ok(parsed) = value.trim().parse::<usize>() {
                if parsed >= 1 {
                    return parsed;
                }
            }
        }
        self.worker_count.max(1)
    }

    pub fn kernel_family(&self) -> Result<KernelFamily> {
        KernelFamily::from_name(&self.kernel)
    }

    pub fn predict_mode(&self) -> Result<PredictMode> {
        PredictMode::from_name(&self.mode)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            latent_dim: self.latent_dim,
            n_inducing: self.n_inducing,
            kernel: self.kernel_family()?,
            iterations: self.iterations,
            seed: self.seed,
            noise_init: self.noise_init,
            freeze_stage2_hyperparams: self.freeze_stage2_hyperparams,
            test_latent_iterations: self.test_latent_iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = PipelineConfig::from_json(
            r#"{"train_manifest": "a.json", "test_manifest": "b.json", "output_dir": "out"}"#,
        )
        .unwrap();
        assert_eq!(cfg.n_inducing, 100);
        assert_eq!(cfg.iterations, 500);
        assert_eq!(cfg.blocks, 10);
        assert_eq!(cfg.mode, "corrected_poe");
        assert!(cfg.n_aggs.is_none());
    }

    #[test]
    fn fingerprint_changes_with_content() {
        let a = PipelineConfig::from_json(
            r#"{"train_manifest": "a.json", "test_manifest": "b.json", "output_dir": "out"}"#,
        )
        .unwrap();
        let mut b = a.clone();
        b.seed = 99;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }

    #[test]
    fn rejects_malformed_json() {
        assert!(PipelineConfig::from_json("{").is_err());
        assert!(PipelineConfig::from_json("{}").is_err());
    }
}
