//! CSV sequence files: a header row, a first column named `t`, one column per
//! output dimension, and `NaN` for missing entries.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CgpdsError, Result};
use crate::latent_prior::TemporalGrid;
use crate::predictor::PredictionMoments;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every entry must be finite and at least two rows are required.
    Train,
    /// `NaN` marks a missing entry.
    Reconstruct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub grid: TemporalGrid,
    /// `N×D`, `NaN` where missing.
    pub y: DMatrix<f64>,
    pub columns: Vec<String>,
    /// `N×D`, true where observed; present only when some entry is missing.
    pub observed: Option<Vec<Vec<bool>>>,
}

impl SequenceDataset {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn d(&self) -> usize {
        self.y.ncols()
    }
}

fn parse_cell(s: &str, line: usize, col: usize) -> Result<f64> {
    let t = s.trim();
    if t == "NaN" {
        return Ok(f64::NAN);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CgpdsError::Format(format!("line {line}, column {}: cannot parse {t:?}", col + 1))),
    }
}

pub fn read_dataset<R: Read>(input: R, mode: LoadMode) -> Result<SequenceDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(CgpdsError::Format("empty file: missing header".into())),
    };
    if header.get(0).map(str::trim) != Some("t") {
        return Err(CgpdsError::Format("missing header: the first column must be named \"t\"".into()));
    }
    let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if columns.is_empty() {
        return Err(CgpdsError::Format("no data columns after \"t\"".into()));
    }
    let width = columns.len() + 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if rec.len() != width {
            return Err(CgpdsError::Format(format!(
                "line {line} has {} fields, the header has {width}",
                rec.len()
            )));
        }
        let t = parse_cell(&rec[0], line, 0)?;
        if t.is_nan() {
            return Err(CgpdsError::Format(format!("line {line}: time stamp is NaN")));
        }
        times.push(t);
        for (c, cell) in rec.iter().enumerate().skip(1) {
            values.push(parse_cell(cell, line, c)?);
        }
    }
    let n = times.len();
    let min_rows = if mode == LoadMode::Train { 2 } else { 1 };
    if n < min_rows {
        return Err(CgpdsError::input(format!("need at least {min_rows} data rows, found {n}")));
    }
    let grid = TemporalGrid::new(times)?;
    let y = DMatrix::from_row_slice(n, columns.len(), &values);
    let any_missing = y.iter().any(|v| v.is_nan());
    if any_missing && mode == LoadMode::Train {
        let (i, j) = (0..n)
            .flat_map(|i| (0..y.ncols()).map(move |j| (i, j)))
            .find(|&(i, j)| y[(i, j)].is_nan())
            .expect("a NaN exists");
        return Err(CgpdsError::input(format!(
            "training data contains NaN (row {}, column {:?})",
            i + 1,
            columns[j]
        )));
    }
    let observed = any_missing.then(|| (0..n).map(|i| y.row(i).iter().map(|v| !v.is_nan()).collect()).collect());
    Ok(SequenceDataset { grid, y, columns, observed })
}

pub fn load_dataset(path: &Path, mode: LoadMode) -> Result<SequenceDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file), mode)
}

/// Reads one time stamp per line (an optional `t` header line is skipped).
pub fn read_times<R: Read>(input: R) -> Result<TemporalGrid> {
    let mut text = String::new();
    std::io::BufReader::new(input).read_to_string(&mut text)?;
    let mut times = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() || (i == 0 && s == "t") {
            continue;
        }
        let v: f64 = s
            .parse()
            .map_err(|_| CgpdsError::Format(format!("line {}: cannot parse time {s:?}", i + 1)))?;
        times.push(v);
    }
    TemporalGrid::new(times)
}

fn fmt(v: f64) -> String {
    if v.is_nan() { "NaN".to_string() } else { v.to_string() }
}

pub fn write_dataset<W: Write>(out: W, times: &[f64], columns: &[String], y: &DMatrix<f64>) -> Result<()> {
    if y.nrows() != times.len() || y.ncols() != columns.len() {
        return Err(CgpdsError::shape("data does not match its times or column names"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (i, t) in times.iter().enumerate() {
        let mut row = vec![fmt(*t)];
        row.extend(y.row(i).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `t,mean_1..mean_D,var_1..var_D`, shifting means by `offset` per dimension.
pub fn write_predictions<W: Write>(out: W, pred: &PredictionMoments, offset: Option<&[f64]>) -> Result<()> {
    let d = pred.mean.ncols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("mean_{i}")));
    header.extend((1..=d).map(|i| format!("var_{i}")));
    w.write_record(&header)?;
    for (i, t) in pred.times.iter().enumerate() {
        let mut row = vec![fmt(*t)];
        row.extend((0..d).map(|j| fmt(pred.mean[(i, j)] + offset.map_or(0.0, |o| o[j]))));
        row.extend((0..d).map(|j| fmt(pred.variance[(i, j)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
