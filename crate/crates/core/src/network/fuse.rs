use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Weighted average of per-stream class scores. Weights are normalized by
/// their sum; a zero-weight stream contributes nothing.
pub fn fuse_scores(sets: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let first = sets.first().ok_or_else(|| Error::arg("nothing to fuse"))?;
    if weights.len() != sets.len() {
        return Err(Error::dim("fuse_scores weights", sets.len(), weights.len()));
    }
    if let Some(s) = sets.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::dim("fuse_scores", first.shape(), s.shape()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::arg(format!("fusion weights must be finite and nonnegative, got {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("fusion weights sum to zero"));
    }
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (s, &w) in sets.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let w = w / total;
        for (o, v) in out.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Score CSV: header `sample,p0,..,p{K-1},pred`, one row per sample.
pub fn scores_to_csv(scores: &Matrix) -> String {
    let mut s = String::from("sample");
    for k in 0..scores.cols() {
        let _ = write!(s, ",p{k}");
    }
    s.push_str(",pred\n");
    let preds = crate::network::predictions(scores);
    for r in 0..scores.rows() {
        let _ = write!(s, "{r}");
        for v in scores.row(r) {
            let _ = write!(s, ",{v:?}");
        }
        let _ = writeln!(s, ",{}", preds[r]);
    }
    s
}

/// Reads a score CSV written by [`scores_to_csv`]; the `pred` column is ignored.
pub fn scores_from_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty score file".into(),
    })?;
    let cols: Vec<_> = header.split(',').map(str::trim).collect();
    let k = cols.len().saturating_sub(2);
    let expected: Vec<String> = std::iter::once("sample".to_string())
        .chain((0..k).map(|i| format!("p{i}")))
        .chain(std::iter::once("pred".to_string()))
        .collect();
    if k == 0 || cols != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `sample,p0,..,pred`, got `{header}`"),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        let fields: Vec<_> = line.split(',').map(str::trim).collect();
        if fields.len() != k + 2 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {} fields, got {}", k + 2, fields.len()),
            });
        }
        for f in &fields[1..=k] {
            data.push(f.parse::<f64>().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("`{f}` is not a number"),
            })?);
        }
        rows += 1;
    }
    Matrix::new(rows, k, data)
}
