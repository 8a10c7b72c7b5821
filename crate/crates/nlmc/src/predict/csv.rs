//! Prediction CSV: row_id, col_id, view, mean, variance, clamped_flag.

use std::fs;
use std::path::Path;

use crate::error::{NlmcError, Result};

use super::GaussianPrediction;

pub const CSV_HEADER: &str = "row_id,col_id,view,mean,variance,clamped";

pub fn render_predictions_csv(preds: &[GaussianPrediction]) -> String {
    let mut out = String::with_capacity(32 * (preds.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in preds {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.row_id,
            p.col_id,
            p.view,
            p.mean,
            p.variance,
            u8::from(p.clamped)
        ));
    }
    out
}

pub fn write_predictions_csv(path: &Path, preds: &[GaussianPrediction]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, render_predictions_csv(preds))?;
    Ok(())
}

pub fn parse_predictions_csv(text: &str) -> Result<Vec<GaussianPrediction>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(NlmcError::parse(
                "predictions",
                1,
                format!("unexpected header `{header}`"),
            ));
        }
        None => {
            return Err(NlmcError::parse("predictions", 1, "empty file"));
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 6 {
            return Err(NlmcError::parse(
                "predictions",
                lineno,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| {
                NlmcError::parse("predictions", lineno, format!("invalid {what} `{s}`"))
            })
        };
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| {
                NlmcError::parse("predictions", lineno, format!("invalid {what} `{s}`"))
            })?;
            if !v.is_finite() {
                return Err(NlmcError::parse(
                    "predictions",
                    lineno,
                    format!("non-finite {what} `{s}`"),
                ));
            }
            Ok(v)
        };
        let clamped = match fields[5].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(NlmcError::parse(
                    "predictions",
                    lineno,
                    format!("invalid clamped flag `{other}`"),
                ));
            }
        };
        out.push(GaussianPrediction {
            row_id: parse_usize(fields[0], "row id")?,
            col_id: parse_usize(fields[1], "column id")?,
            view: parse_usize(fields[2], "view index")?,
            mean: parse_f64(fields[3], "mean")?,
            variance: parse_f64(fields[4], "variance")?,
            clamped,
        });
    }
    Ok(out)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<GaussianPrediction>> {
    let text = fs::read_to_string(path)?;
    parse_predictions_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let preds = vec![
            GaussianPrediction {
                row_id: 3,
                col_id: 14,
                view: 0,
                mean: 0.1 + 0.2,
                variance: 1.0 / 3.0,
                clamped: false,
            },
            GaussianPrediction {
                row_id: 0,
                col_id: 0,
                view: 0,
                mean: -0.0,
                variance: 1e-8,
                clamped: true,
            },
        ];
        let text = render_predictions_csv(&preds);
        let back = parse_predictions_csv(&text).unwrap();
        assert_eq!(back.len(), preds.len());
        for (a, b) in preds.iter().zip(&back) {
            assert_eq!(a.row_id, b.row_id);
            assert_eq!(a.mean.to_bits(), b.mean.to_bits());
            assert_eq!(a.variance.to_bits(), b.variance.to_bits());
            assert_eq!(a.clamped, b.clamped);
        }
    }

    #[test]
    fn malformed_line_is_named() {
        let text = format!("{CSV_HEADER}\n1,2,0,0.5,abc,0\n");
        let err = parse_predictions_csv(&text).unwrap_err();
        assert!(matches!(err, NlmcError::Parse { line: 2, .. }));
    }
}
