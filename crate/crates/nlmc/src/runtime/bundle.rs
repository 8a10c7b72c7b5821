//! Artifact container: a JSON manifest (shapes, metadata, version, CRC32
//! per array) plus companion raw little-endian float64 arrays in row-major
//! order. Round trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coupling::{Expert, ExpertKind, SnapshotView, SubmodelSnapshot};
use crate::data::MultiViewDataset;
use crate::error::{NlmcError, Result};
use crate::kernels::{KernelFamily, KernelParams, KernelSpec};
use crate::vgplvm::{LatentPrior, MrdModel, VariationalLatent, ViewModel};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        NamedArray {
            name: name.into(),
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.data[i * self.cols + j])
    }
}

#[derive(Debug, Clone)]
pub struct ArrayBundle {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// element offset into the companion binary file
    offset: usize,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

fn array_bytes(data: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

impl ArrayBundle {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        ArrayBundle {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| NlmcError::param("array", format!("missing array `{name}`")))
    }

    /// Serialize to (manifest JSON, binary payload).
    pub fn to_parts(&self) -> Result<(String, Vec<u8>)> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut bin = Vec::new();
        let mut offset = 0usize;
        for a in &self.arrays {
            if a.rows * a.cols != a.data.len() {
                return Err(NlmcError::dim(
                    format!("array {}", a.name),
                    format!("{}x{}", a.rows, a.cols),
                    format!("{} values", a.data.len()),
                ));
            }
            let bytes = array_bytes(&a.data);
            entries.push(ArrayEntry {
                name: a.name.clone(),
                rows: a.rows,
                cols: a.cols,
                offset,
                crc32: crc32fast::hash(&bytes),
            });
            bin.extend_from_slice(&bytes);
            offset += a.data.len();
        }
        let manifest = BundleManifest {
            version: BUNDLE_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        Ok((serde_json::to_string_pretty(&manifest)?, bin))
    }

    /// Parse from (manifest JSON, binary payload), verifying the version and
    /// every checksum.
    pub fn from_parts(manifest_text: &str, bin: &[u8]) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_str(manifest_text)?;
        if manifest.version != BUNDLE_VERSION {
            return Err(NlmcError::VersionMismatch {
                found: manifest.version,
                expected: BUNDLE_VERSION,
            });
        }
        if bin.len() % 8 != 0 {
            return Err(NlmcError::param(
                "bundle binary",
                "length is not a multiple of 8",
            ));
        }
        let total = bin.len() / 8;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in &manifest.arrays {
            let len = entry
                .rows
                .checked_mul(entry.cols)
                .ok_or_else(|| NlmcError::param("bundle array", "shape overflow"))?;
            let end = entry
                .offset
                .checked_add(len)
                .ok_or_else(|| NlmcError::param("bundle array", "offset overflow"))?;
            if end > total {
                return Err(NlmcError::param(
                    format!("array {}", entry.name),
                    "extends past the end of the binary payload",
                ));
            }
            let bytes = &bin[entry.offset * 8..end * 8];
            if crc32fast::hash(bytes) != entry.crc32 {
                return Err(NlmcError::ChecksumMismatch {
                    array: entry.name.clone(),
                });
            }
            let mut data = Vec::with_capacity(len);
            for chunk in bytes.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            arrays.push(NamedArray {
                name: entry.name.clone(),
                rows: entry.rows,
                cols: entry.cols,
                data,
            });
        }
        Ok(ArrayBundle {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    /// Write `<base>.json` and `<base>.bin`.
    pub fn write(&self, base: &Path) -> Result<()> {
        if let Some(parent) = base.parent() {
            fs::create_dir_all(parent)?;
        }
        let (manifest, bin) = self.to_parts()?;
        fs::write(base.with_extension("json"), manifest)?;
        fs::write(base.with_extension("bin"), bin)?;
        Ok(())
    }

    pub fn read(base: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(base.with_extension("json"))?;
        let bin = fs::read(base.with_extension("bin"))?;
        Self::from_parts(&manifest, &bin)
    }

    pub fn exists(base: &Path) -> bool {
        base.with_extension("json").is_file() && base.with_extension("bin").is_file()
    }
}

pub fn bundle_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

#[derive(Serialize, Deserialize)]
struct ViewMeta {
    family: String,
    latent_dim: usize,
}

fn views_to_arrays(
    views: &[SnapshotView],
    bundle: &mut ArrayBundle,
) -> Result<Vec<ViewMeta>> {
    let mut metas = Vec::with_capacity(views.len());
    for (v, view) in views.iter().enumerate() {
        bundle.push(NamedArray::from_matrix(format!("view{v}/inducing"), &view.inducing));
        let k = view.log_ard.len();
        let mut params = Vec::with_capacity(k + 2);
        params.push(view.log_signal_variance);
        params.extend_from_slice(&view.log_ard);
        params.push(view.log_noise_variance);
        bundle.push(NamedArray {
            name: format!("view{v}/log_params"),
            rows: 1,
            cols: k + 2,
            data: params,
        });
        metas.push(ViewMeta {
            family: view.spec.family.name().to_string(),
            latent_dim: view.spec.latent_dim,
        });
    }
    Ok(metas)
}

fn views_from_arrays(bundle: &ArrayBundle, metas: &[ViewMeta]) -> Result<Vec<SnapshotView>> {
    let mut views = Vec::with_capacity(metas.len());
    for (v, meta) in metas.iter().enumerate() {
        let spec = KernelSpec::new(KernelFamily::from_name(&meta.family)?, meta.latent_dim)?;
        let inducing = bundle.array(&format!("view{v}/inducing"))?.to_matrix();
        let params = bundle.array(&format!("view{v}/log_params"))?;
        if params.data.len() != meta.latent_dim + 2 {
            return Err(NlmcError::dim(
                format!("view{v}/log_params"),
                format!("{}", meta.latent_dim + 2),
                format!("{}", params.data.len()),
            ));
        }
        views.push(SnapshotView {
            spec,
            log_signal_variance: params.data[0],
            log_ard: params.data[1..1 + meta.latent_dim].to_vec(),
            log_noise_variance: params.data[meta.latent_dim + 1],
            inducing,
        });
    }
    Ok(views)
}

/// Serialize a stage-1 snapshot.
pub fn snapshot_to_bundle(s: &SubmodelSnapshot) -> Result<ArrayBundle> {
    let mut bundle = ArrayBundle::new("snapshot", Value::Null);
    bundle.push(NamedArray::from_matrix("latent_means", &s.latent_means));
    bundle.push(NamedArray::from_matrix("latent_log_vars", &s.latent_log_vars));
    let views = views_to_arrays(&s.views, &mut bundle)?;
    bundle.meta = serde_json::json!({
        "block_rows": s.block_rows,
        "seed": s.seed,
        "iterations": s.iterations,
        "views": views,
    });
    Ok(bundle)
}

pub fn snapshot_from_bundle(bundle: &ArrayBundle) -> Result<SubmodelSnapshot> {
    if bundle.kind != "snapshot" {
        return Err(NlmcError::param(
            "bundle kind",
            format!("expected snapshot, got {}", bundle.kind),
        ));
    }
    let metas: Vec<ViewMeta> = serde_json::from_value(bundle.meta["views"].clone())?;
    let block_rows: Vec<usize> = serde_json::from_value(bundle.meta["block_rows"].clone())?;
    let seed: u64 = serde_json::from_value(bundle.meta["seed"].clone())?;
    let iterations: usize = serde_json::from_value(bundle.meta["iterations"].clone())?;
    let latent_means = bundle.array("latent_means")?.to_matrix();
    let latent_log_vars = bundle.array("latent_log_vars")?.to_matrix();
    if latent_means.nrows() != block_rows.len() {
        return Err(NlmcError::dim(
            "snapshot latent rows",
            format!("{}", block_rows.len()),
            format!("{}", latent_means.nrows()),
        ));
    }
    Ok(SubmodelSnapshot {
        latent_means,
        latent_log_vars,
        views: views_from_arrays(bundle, &metas)?,
        block_rows,
        seed,
        iterations,
    })
}

pub fn write_snapshot(s: &SubmodelSnapshot, base: &Path) -> Result<()> {
    snapshot_to_bundle(s)?.write(base)
}

pub fn read_snapshot(base: &Path) -> Result<SubmodelSnapshot> {
    snapshot_from_bundle(&ArrayBundle::read(base)?)
}

fn kind_name(kind: ExpertKind) -> &'static str {
    match kind {
        ExpertKind::Stage1 => "stage1",
        ExpertKind::Augmented => "augmented",
        ExpertKind::Independent => "independent",
        ExpertKind::Aggregated => "aggregated",
    }
}

fn kind_from_name(name: &str) -> Result<ExpertKind> {
    match name {
        "stage1" => Ok(ExpertKind::Stage1),
        "augmented" => Ok(ExpertKind::Augmented),
        "independent" => Ok(ExpertKind::Independent),
        "aggregated" => Ok(ExpertKind::Aggregated),
        other => Err(NlmcError::param("expert kind", format!("unknown `{other}`"))),
    }
}

/// Serialize a trained expert. The training-data subset is not stored; it is
/// reconstructed from the shared training dataset and the stored row set.
pub fn expert_to_bundle(e: &Expert) -> Result<ArrayBundle> {
    let mut bundle = ArrayBundle::new("expert", Value::Null);
    bundle.push(NamedArray::from_matrix("latent_means", e.model.latent.means()));
    bundle.push(NamedArray::from_matrix(
        "latent_log_vars",
        e.model.latent.log_vars(),
    ));
    let snapshot_views: Vec<SnapshotView> = e
        .model
        .views
        .iter()
        .map(|v| SnapshotView {
            spec: v.spec,
            log_signal_variance: v.params.log_signal_variance(),
            log_ard: v.params.log_ard_weights().to_vec(),
            log_noise_variance: v.log_noise_variance,
            inducing: v.inducing.clone(),
        })
        .collect();
    let views = views_to_arrays(&snapshot_views, &mut bundle)?;
    let prior_kind = match &e.model.prior {
        LatentPrior::Standard => "standard",
        LatentPrior::SnapshotFirst { means, vars } => {
            bundle.push(NamedArray::from_matrix("prior_means", means));
            bundle.push(NamedArray::from_matrix("prior_vars", vars));
            "snapshot_first"
        }
    };
    bundle.meta = serde_json::json!({
        "kind": kind_name(e.kind),
        "block_index": e.block_index,
        "train_rows": e.train_rows,
        "prior": prior_kind,
        "views": views,
    });
    Ok(bundle)
}

pub fn expert_from_bundle(bundle: &ArrayBundle, train: &MultiViewDataset) -> Result<Expert> {
    if bundle.kind != "expert" {
        return Err(NlmcError::param(
            "bundle kind",
            format!("expected expert, got {}", bundle.kind),
        ));
    }
    let kind = kind_from_name(
        bundle.meta["kind"]
            .as_str()
            .ok_or_else(|| NlmcError::param("expert kind", "missing"))?,
    )?;
    let block_index: usize = serde_json::from_value(bundle.meta["block_index"].clone())?;
    let train_rows: Vec<usize> = serde_json::from_value(bundle.meta["train_rows"].clone())?;
    let metas: Vec<ViewMeta> = serde_json::from_value(bundle.meta["views"].clone())?;
    let latent_means = bundle.array("latent_means")?.to_matrix();
    let latent_log_vars = bundle.array("latent_log_vars")?.to_matrix();
    let prior = match bundle.meta["prior"].as_str() {
        Some("standard") => LatentPrior::Standard,
        Some("snapshot_first") => LatentPrior::SnapshotFirst {
            means: bundle.array("prior_means")?.to_matrix(),
            vars: bundle.array("prior_vars")?.to_matrix(),
        },
        other => {
            return Err(NlmcError::param(
                "expert prior",
                format!("unknown `{other:?}`"),
            ));
        }
    };
    let views: Vec<ViewModel> = views_from_arrays(bundle, &metas)?
        .into_iter()
        .map(|v| ViewModel {
            spec: v.spec,
            params: KernelParams::from_log(v.log_signal_variance, v.log_ard),
            log_noise_variance: v.log_noise_variance,
            inducing: v.inducing,
        })
        .collect();
    for &r in &train_rows {
        if r >= train.n_rows() {
            return Err(NlmcError::param(
                "train_rows",
                format!("row {r} out of range for the training dataset"),
            ));
        }
    }
    let data = train.restrict_rows(&train_rows)?;
    Ok(Expert {
        kind,
        block_index,
        model: MrdModel {
            latent: VariationalLatent::from_log(latent_means, latent_log_vars),
            views,
            prior,
        },
        train_rows,
        data,
    })
}

pub fn write_expert(e: &Expert, base: &Path) -> Result<()> {
    expert_to_bundle(e)?.write(base)
}

pub fn read_expert(base: &Path, train: &MultiViewDataset) -> Result<Expert> {
    expert_from_bundle(&ArrayBundle::read(base)?, train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_snapshot() -> SubmodelSnapshot {
        SubmodelSnapshot {
            latent_means: DMatrix::from_row_slice(2, 2, &[0.1, -0.2, 0.3, 1.0 / 3.0]),
            latent_log_vars: DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.25, -1.75]),
            views: vec![SnapshotView {
                spec: KernelSpec::new(KernelFamily::RbfArd, 2).unwrap(),
                log_signal_variance: 0.123456789,
                log_ard: vec![-0.4, 0.9],
                log_noise_variance: -2.302585092994046,
                inducing: DMatrix::from_row_slice(2, 2, &[0.0, 1e-300, -1.5, 2.5]),
            }],
            block_rows: vec![0, 3],
            seed: 42,
            iterations: 17,
        }
    }

    #[test]
    fn snapshot_roundtrip_bit_exact() {
        let s = sample_snapshot();
        let bundle = snapshot_to_bundle(&s).unwrap();
        let (manifest, bin) = bundle.to_parts().unwrap();
        let back = snapshot_from_bundle(&ArrayBundle::from_parts(&manifest, &bin).unwrap()).unwrap();
        assert_eq!(s.content_hash(), back.content_hash());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let s = sample_snapshot();
        let (manifest, mut bin) = snapshot_to_bundle(&s).unwrap().to_parts().unwrap();
        bin[5] ^= 0x40;
        let err = ArrayBundle::from_parts(&manifest, &bin).unwrap_err();
        assert!(matches!(err, NlmcError::ChecksumMismatch { .. }));
    }

    #[test]
    fn version_mismatch_detected() {
        let s = sample_snapshot();
        let (manifest, bin) = snapshot_to_bundle(&s).unwrap().to_parts().unwrap();
        let bumped = manifest.replace("\"version\": 1", "\"version\": 99");
        let err = ArrayBundle::from_parts(&bumped, &bin).unwrap_err();
        assert!(matches!(err, NlmcError::VersionMismatch { found: 99, .. }));
    }

    #[test]
    fn truncated_payload_rejected() {
        let s = sample_snapshot();
        let (manifest, bin) = snapshot_to_bundle(&s).unwrap().to_parts().unwrap();
        let err = ArrayBundle::from_parts(&manifest, &bin[..bin.len() - 8]).unwrap_err();
        assert!(matches!(
            err,
            NlmcError::InvalidParameter { .. } | NlmcError::ChecksumMismatch { .. }
        ));
    }
}
