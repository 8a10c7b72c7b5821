//! Dataset file I/O: MatrixMarket-coordinate view files plus a JSON
//! manifest carrying view roles and stored permutations.
//!
//! Values are serialized as the shortest round-trip decimal of the f64, so
//! write/read is lossless for all finite values.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NlmcError, Result};

use super::{MultiViewDataset, SparseMatrixView, Triple};

pub const MANIFEST_VERSION: u32 = 1;
const BANNER: &str = "%%MatrixMarket matrix coordinate real general";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestView {
    pub name: String,
    pub file: String,
    pub n_cols: usize,
    /// Stored column permutation (current index -> original id); identity
    /// when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_ids: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_rows: usize,
    pub target_view: usize,
    pub side_views: Vec<usize>,
    pub views: Vec<ManifestView>,
    /// Stored row permutation (current index -> original id); identity when
    /// omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_ids: Option<Vec<usize>>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(NlmcError::VersionMismatch {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(manifest)
    }
}

/// Parse one MatrixMarket-coordinate view. `source_name` is used in errors.
pub fn parse_view_text(source_name: &str, text: &str) -> Result<SparseMatrixView> {
    let mut lines = text.lines().enumerate();

    let (banner_line, banner) = lines
        .next()
        .ok_or_else(|| NlmcError::parse(source_name, 1, "empty file"))?;
    let _ = banner_line;
    let banner_fields: Vec<&str> = banner.split_whitespace().collect();
    let expected_fields: Vec<&str> = BANNER.split_whitespace().collect();
    if banner_fields != expected_fields {
        return Err(NlmcError::parse(
            source_name,
            1,
            format!("malformed header, expected `{BANNER}`"),
        ));
    }

    // Skip comment and blank lines before the size line.
    let mut size_line = None;
    for (idx, line) in lines.by_ref() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        size_line = Some((idx + 1, trimmed.to_string()));
        break;
    }
    let (size_lineno, size_text) =
        size_line.ok_or_else(|| NlmcError::parse(source_name, 2, "missing size line"))?;
    let dims: Vec<&str> = size_text.split_whitespace().collect();
    if dims.len() != 3 {
        return Err(NlmcError::parse(
            source_name,
            size_lineno,
            "size line must hold `rows cols nnz`",
        ));
    }
    let parse_dim = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| {
            NlmcError::parse(source_name, size_lineno, format!("invalid {what} `{s}`"))
        })
    };
    let n_rows = parse_dim(dims[0], "row count")?;
    let n_cols = parse_dim(dims[1], "column count")?;
    let nnz = parse_dim(dims[2], "entry count")?;

    let mut triples = Vec::with_capacity(nnz);
    let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(nnz);
    let mut last_line = size_lineno;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        last_line = lineno;
        if triples.len() == nnz {
            return Err(NlmcError::parse(
                source_name,
                lineno,
                format!("more than the declared {nnz} entries"),
            ));
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(NlmcError::parse(
                source_name,
                lineno,
                "entry must hold `row col value`",
            ));
        }
        let row1: usize = fields[0].parse().map_err(|_| {
            NlmcError::parse(source_name, lineno, format!("invalid row index `{}`", fields[0]))
        })?;
        let col1: usize = fields[1].parse().map_err(|_| {
            NlmcError::parse(source_name, lineno, format!("invalid column index `{}`", fields[1]))
        })?;
        let value: f64 = fields[2].parse().map_err(|_| {
            NlmcError::parse(source_name, lineno, format!("invalid value `{}`", fields[2]))
        })?;
        if row1 == 0 || row1 > n_rows {
            return Err(NlmcError::parse(
                source_name,
                lineno,
                format!("row index {row1} out of range 1..={n_rows}"),
            ));
        }
        if col1 == 0 || col1 > n_cols {
            return Err(NlmcError::parse(
                source_name,
                lineno,
                format!("column index {col1} out of range 1..={n_cols}"),
            ));
        }
        if !value.is_finite() {
            return Err(NlmcError::parse(
                source_name,
                lineno,
                format!("non-finite value `{}`", fields[2]),
            ));
        }
        if !seen.insert((row1, col1)) {
            return Err(NlmcError::parse(
                source_name,
                lineno,
                format!("duplicate entry at ({row1}, {col1})"),
            ));
        }
        triples.push(Triple {
            row: row1 - 1,
            col: col1 - 1,
            value,
        });
    }
    if triples.len() != nnz {
        return Err(NlmcError::parse(
            source_name,
            last_line,
            format!("declared {nnz} entries but found {}", triples.len()),
        ));
    }
    SparseMatrixView::new(source_name, n_rows, n_cols, triples)
}

fn render_view(view: &SparseMatrixView) -> String {
    let mut out = String::new();
    out.push_str(BANNER);
    out.push('\n');
    out.push_str(&format!(
        "{} {} {}\n",
        view.n_rows(),
        view.n_cols(),
        view.n_observed()
    ));
    for t in view.triples() {
        out.push_str(&format!("{} {} {}\n", t.row + 1, t.col + 1, t.value));
    }
    out
}

/// Write the dataset into `dir`: one MatrixMarket file per view plus
/// `manifest.json`. Returns the manifest path.
pub fn write_dataset(ds: &MultiViewDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut views = Vec::new();
    for (i, view) in ds.views().iter().enumerate() {
        let file = format!("view{i}.mtx");
        fs::write(dir.join(&file), render_view(view))?;
        let identity: Vec<usize> = (0..view.n_cols()).collect();
        views.push(ManifestView {
            name: view.name().to_string(),
            file,
            n_cols: view.n_cols(),
            col_ids: if view.col_ids() == identity.as_slice() {
                None
            } else {
                Some(view.col_ids().to_vec())
            },
        });
    }
    let identity: Vec<usize> = (0..ds.n_rows()).collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        n_rows: ds.n_rows(),
        target_view: ds.target_view(),
        side_views: ds.side_views().to_vec(),
        views,
        row_ids: if ds.row_ids() == identity.as_slice() {
            None
        } else {
            Some(ds.row_ids().to_vec())
        },
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Load a dataset from its manifest path.
pub fn read_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest = DatasetManifest::from_json(&text)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut views = Vec::new();
    for mv in &manifest.views {
        let view_text = fs::read_to_string(dir.join(&mv.file))?;
        let parsed = parse_view_text(&mv.file, &view_text)?;
        if parsed.n_rows() != manifest.n_rows {
            return Err(NlmcError::dim(
                format!("view {}", mv.name),
                format!("{} rows", manifest.n_rows),
                format!("{}", parsed.n_rows()),
            ));
        }
        if parsed.n_cols() != mv.n_cols {
            return Err(NlmcError::dim(
                format!("view {}", mv.name),
                format!("{} cols", mv.n_cols),
                format!("{}", parsed.n_cols()),
            ));
        }
        let col_ids = mv
            .col_ids
            .clone()
            .unwrap_or_else(|| (0..mv.n_cols).collect());
        let triples = parsed.triples().collect();
        views.push(SparseMatrixView::with_col_ids(
            mv.name.clone(),
            parsed.n_rows(),
            parsed.n_cols(),
            triples,
            col_ids,
        )?);
    }
    let row_ids = manifest
        .row_ids
        .clone()
        .unwrap_or_else(|| (0..manifest.n_rows).collect());
    MultiViewDataset::with_row_ids(views, manifest.target_view, manifest.side_views, row_ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_view_roundtrip() {
        let text = format!("{BANNER}\n2 3 1\n1 2 4.25\n");
        let view = parse_view_text("test", &text).unwrap();
        assert_eq!(view.n_rows(), 2);
        assert_eq!(view.n_cols(), 3);
        assert_eq!(view.observed(1), &[(0usize, 4.25)]);
    }

    #[test]
    fn out_of_range_column_names_line() {
        let text = format!("{BANNER}\n2 2 1\n1 3 1.0\n");
        let err = parse_view_text("test", &text).unwrap_err();
        match err {
            NlmcError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_entry_names_line() {
        let text = format!("{BANNER}\n2 2 2\n1 1 1.0\n1 1 2.0\n");
        let err = parse_view_text("test", &text).unwrap_err();
        match err {
            NlmcError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_banner_rejected() {
        let err = parse_view_text("test", "%%MatrixMarket matrix array real general\n1 1 0\n")
            .unwrap_err();
        assert!(matches!(err, NlmcError::Parse { line: 1, .. }));
    }

    #[test]
    fn shortest_roundtrip_is_exact() {
        let values = [
            0.1,
            -0.0,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            1.7976931348623157e308,
            -2.2250738585072014e-308,
            123456789.123456789,
        ];
        for &v in &values {
            let s = format!("{v}");
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "value {v} via `{s}`");
        }
    }
}
