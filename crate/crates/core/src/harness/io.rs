//! Feature files: CSV with a one-line header `dim=<s>,classes=<K>,rows=<n>`
//! followed by `n` rows of `s` reals and a 1-based integer label.
//!
//! Reals are written in the shortest form that parses back to the same
//! `f64`, so a write/read cycle is exact.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::dataset::FeatureBatch;
use crate::error::{file_error, GrodError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile<T> {
    pub dim: usize,
    pub classes: usize,
    /// Labels are 0-based in memory; `classes` marks an OOD row.
    pub batch: FeatureBatch<T>,
}

/// Which labels a file may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRange {
    /// `1..=K`
    IdOnly,
    /// `1..=K+1`
    WithOod,
}

fn format_err(line: usize, msg: impl Into<String>) -> GrodError {
    GrodError::Format { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let mut dim = None;
    let mut classes = None;
    let mut rows = None;
    for part in line.trim().split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format_err(1, format!("header field '{part}' is not key=value")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| format_err(1, format!("header value '{v}' is not a count")))?;
        let slot = match k.trim() {
            "dim" => &mut dim,
            "classes" => &mut classes,
            "rows" => &mut rows,
            other => return Err(format_err(1, format!("unknown header field '{other}'"))),
        };
        if slot.replace(v).is_some() {
            return Err(format_err(1, format!("duplicate header field '{}'", k.trim())));
        }
    }
    match (dim, classes, rows) {
        (Some(d), Some(c), Some(r)) if d > 0 && c > 0 => Ok((d, c, r)),
        (Some(_), Some(_), Some(_)) => Err(format_err(1, "dim and classes must be ≥ 1")),
        _ => Err(format_err(1, "header needs dim=<s>,classes=<K>,rows=<n>")),
    }
}

pub fn parse_feature_file<T: Scalar>(text: &str, range: LabelRange) -> Result<FeatureFile<T>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(1, "empty file"))?;
    let (dim, classes, rows) = parse_header(header)?;
    let max_label = match range {
        LabelRange::IdOnly => classes,
        LabelRange::WithOod => classes + 1,
    };
    let mut features = Array2::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    let mut seen = 0;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        if seen == rows {
            return Err(format_err(lineno, format!("more rows than the declared {rows}")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(format_err(
                lineno,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        for (j, f) in fields[..dim].iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| format_err(lineno, format!("field {} '{}' is not a number", j + 1, f.trim())))?;
            if !v.is_finite() {
                return Err(format_err(lineno, format!("field {} is not finite", j + 1)));
            }
            features[[seen, j]] = T::lit(v);
        }
        let raw = fields[dim].trim();
        let label: usize = raw
            .parse()
            .map_err(|_| format_err(lineno, format!("label '{raw}' is not an integer")))?;
        if label == 0 || label > max_label {
            return Err(format_err(lineno, format!("label {label} outside 1..={max_label}")));
        }
        labels.push(label - 1);
        seen += 1;
    }
    if seen != rows {
        return Err(format_err(text.lines().count() + 1, format!("declared {rows} rows, found {seen}")));
    }
    Ok(FeatureFile { dim, classes, batch: FeatureBatch { features, labels } })
}

pub fn read_feature_file<T: Scalar>(path: &Path, range: LabelRange) -> Result<FeatureFile<T>> {
    let text = std::fs::read_to_string(path).map_err(file_error(path))?;
    parse_feature_file(&text, range)
}

pub fn format_feature_file<T: Scalar>(batch: &FeatureBatch<T>, classes: usize) -> String {
    let mut out = String::with_capacity(batch.len() * (batch.dim() + 1) * 12);
    writeln!(out, "dim={},classes={classes},rows={}", batch.dim(), batch.len()).unwrap();
    for (row, &label) in batch.features.rows().into_iter().zip(&batch.labels) {
        for v in row {
            write!(out, "{},", v.as_f64()).unwrap();
        }
        writeln!(out, "{}", label + 1).unwrap();
    }
    out
}

pub fn write_feature_file<T: Scalar>(path: &Path, batch: &FeatureBatch<T>, classes: usize) -> Result<()> {
    std::fs::write(path, format_feature_file(batch, classes)).map_err(file_error(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_exact() {
        let batch = FeatureBatch {
            features: array![[0.1, -2.5e-17], [1.0 / 3.0, 12345.678]],
            labels: vec![0, 2],
        };
        let text = format_feature_file(&batch, 2);
        assert!(text.starts_with("dim=2,classes=2,rows=2\n"));
        let back: FeatureFile<f64> = parse_feature_file(&text, LabelRange::WithOod).unwrap();
        assert_eq!(back.batch, batch);
        assert_eq!((back.dim, back.classes), (2, 2));
    }

    #[test]
    fn errors_name_the_line() {
        let bad_row = "dim=2,classes=2,rows=2\n0.1,0.2,1\n0.3,abc,2\n";
        let err = parse_feature_file::<f64>(bad_row, LabelRange::IdOnly).unwrap_err();
        assert!(matches!(err, GrodError::Format { line: 3, .. }), "{err}");

        let short = "dim=2,classes=2,rows=2\n0.1,0.2,1\n";
        assert!(matches!(
            parse_feature_file::<f64>(short, LabelRange::IdOnly),
            Err(GrodError::Format { line: 3, .. })
        ));
        let ood_in_train = "dim=1,classes=2,rows=1\n0.5,3\n";
        assert!(matches!(
            parse_feature_file::<f64>(ood_in_train, LabelRange::IdOnly),
            Err(GrodError::Format { line: 2, .. })
        ));
        assert!(parse_feature_file::<f64>(ood_in_train, LabelRange::WithOod).is_ok());
        for header in ["", "dim=2,classes=2", "dim=x,classes=2,rows=0", "dim=2,classes=2,rows=0,extra=1"] {
            let err = parse_feature_file::<f64>(header, LabelRange::IdOnly).unwrap_err();
            assert_eq!(err.line(), Some(1), "{header}");
        }
        let wide = "dim=1,classes=2,rows=1\n0.5,0.1,1\n";
        assert!(matches!(
            parse_feature_file::<f64>(wide, LabelRange::IdOnly),
            Err(GrodError::Format { line: 2, .. })
        ));
        let nan = "dim=1,classes=2,rows=1\nNaN,1\n";
        assert!(parse_feature_file::<f64>(nan, LabelRange::IdOnly).is_err());
    }
}
