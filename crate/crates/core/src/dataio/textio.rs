//! Line-delimited text formats: predictions, soft-label matrices, fold
//! assignments, and the label-group map.
//!
//! Prediction lines are `id<TAB>label:score,label:score,...` with scores
//! printed at 9 significant digits in fixed decimal notation, which the
//! reader inverts exactly. A soft-label file is a prediction file that
//! covers the full vocabulary for every record.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lossmetrics::PredictionList;

use super::{Dataset, FoldSplit};

/// Fixed-point decimal with 9 significant digits.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return "0.000000000".to_string();
    }
    // Exact decimal exponent via scientific formatting.
    let sci = format!("{x:e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    let decimals = (8 - exp).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

pub fn write_predictions(path: &Path, predictions: &[PredictionList]) -> Result<()> {
    let mut out = String::new();
    for pl in predictions {
        for pair in pl.items.windows(2) {
            if pair[0].1 < pair[1].1 {
                return Err(Error::input(format!(
                    "predictions for '{}' are not sorted by score descending",
                    pl.video_id
                )));
            }
        }
        if pl.items.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::input(format!(
                "non-finite score for video '{}'",
                pl.video_id
            )));
        }
        out.push_str(&pl.video_id);
        if !pl.items.is_empty() {
            out.push('\t');
            for (i, (label, score)) in pl.items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{label}:{}", format_score(*score));
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionList>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let n = lineno + 1;
        if line.is_empty() {
            return Err(Error::format(format!("line {n}: empty line")));
        }
        let (id, rest) = match line.split_once('\t') {
            Some((id, rest)) => (id, Some(rest)),
            None => (line, None),
        };
        if id.is_empty() {
            return Err(Error::format(format!("line {n}: empty video id")));
        }
        let mut items = Vec::new();
        if let Some(rest) = rest {
            for piece in rest.split(',') {
                let (label, score) = piece
                    .split_once(':')
                    .ok_or_else(|| Error::format(format!("line {n}: malformed entry '{piece}'")))?;
                let label: u32 = label
                    .parse()
                    .map_err(|_| Error::format(format!("line {n}: bad label '{label}'")))?;
                let score: f64 = score
                    .parse()
                    .map_err(|_| Error::format(format!("line {n}: bad score '{score}'")))?;
                if !score.is_finite() {
                    return Err(Error::format(format!("line {n}: non-finite score")));
                }
                items.push((label, score));
            }
            for pair in items.windows(2) {
                if pair[0].1 < pair[1].1 {
                    return Err(Error::format(format!(
                        "line {n}: scores not sorted descending"
                    )));
                }
            }
        }
        out.push(PredictionList {
            video_id: id.to_string(),
            items,
        });
    }
    Ok(out)
}

/// Soft labels on disk are a prediction file covering the whole vocabulary
/// per record, in dataset record order.
pub fn write_soft_labels(path: &Path, dataset: &Dataset, matrix: &[Vec<f64>]) -> Result<()> {
    if matrix.len() != dataset.records.len() {
        return Err(Error::input(format!(
            "soft-label matrix has {} rows, dataset has {} records",
            matrix.len(),
            dataset.records.len()
        )));
    }
    let vocab = dataset.vocabulary_size as usize;
    let mut lists = Vec::with_capacity(matrix.len());
    for (record, row) in dataset.records.iter().zip(matrix) {
        if row.len() != vocab {
            return Err(Error::input(format!(
                "soft-label row for '{}' has {} entries, vocabulary is {vocab}",
                record.id,
                row.len()
            )));
        }
        let items = crate::lossmetrics::top_n_of_row(row, vocab);
        lists.push(PredictionList {
            video_id: record.id.clone(),
            items,
        });
    }
    write_predictions(path, &lists)
}

/// Read a full-coverage soft-label matrix, returned in dataset record order.
pub fn read_soft_labels(path: &Path, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let lists = read_predictions(path)?;
    let vocab = dataset.vocabulary_size as usize;
    let mut by_id: std::collections::BTreeMap<&str, &PredictionList> =
        lists.iter().map(|pl| (pl.video_id.as_str(), pl)).collect();
    let mut out = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let pl = by_id
            .remove(record.id.as_str())
            .ok_or_else(|| Error::format(format!("soft labels missing record '{}'", record.id)))?;
        let mut row = vec![f64::NAN; vocab];
        for &(label, score) in &pl.items {
            if label as usize >= vocab {
                return Err(Error::format(format!(
                    "soft labels for '{}': label {label} outside vocabulary",
                    record.id
                )));
            }
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::format(format!(
                    "soft labels for '{}': value {score} outside [0,1]",
                    record.id
                )));
            }
            row[label as usize] = score;
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::format(format!(
                "soft labels for '{}' do not cover the vocabulary",
                record.id
            )));
        }
        out.push(row);
    }
    if let Some((extra, _)) = by_id.into_iter().next() {
        return Err(Error::format(format!(
            "soft labels contain unknown record '{extra}'"
        )));
    }
    Ok(out)
}

/// Fold file: a `k<TAB>K` header then `id<TAB>fold` lines in dataset order.
pub fn write_folds(path: &Path, dataset: &Dataset, folds: &FoldSplit) -> Result<()> {
    folds.validate(dataset)?;
    let mut out = format!("k\t{}\n", folds.k);
    for r in &dataset.records {
        let f = folds.fold_of(&r.id).expect("validated above");
        let _ = writeln!(out, "{}\t{f}", r.id);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_folds(path: &Path) -> Result<FoldSplit> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format("empty folds file"))?;
    let k: usize = header
        .strip_prefix("k\t")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(format!("line 1: bad header '{header}'")))?;
    if k < 2 {
        return Err(Error::format(format!("line 1: invalid fold count {k}")));
    }
    let mut assignment = std::collections::BTreeMap::new();
    for (lineno, line) in lines {
        let n = lineno + 1;
        let (id, fold) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("line {n}: missing tab")))?;
        let fold: usize = fold
            .parse()
            .map_err(|_| Error::format(format!("line {n}: bad fold index '{fold}'")))?;
        if fold >= k {
            return Err(Error::format(format!("line {n}: fold {fold} out of range")));
        }
        if assignment.insert(id.to_string(), fold).is_some() {
            return Err(Error::format(format!("line {n}: duplicate id '{id}'")));
        }
    }
    Ok(FoldSplit { k, assignment })
}

/// Group map: `label_index<TAB>group_name` lines.
pub fn read_group_map(path: &Path) -> Result<std::collections::BTreeMap<u32, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let n = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let (label, group) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("line {n}: missing tab")))?;
        let label: u32 = label
            .parse()
            .map_err(|_| Error::format(format!("line {n}: bad label index '{label}'")))?;
        out.insert(label, group.to_string());
    }
    Ok(out)
}
