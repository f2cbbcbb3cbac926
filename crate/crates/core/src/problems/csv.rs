//! CSV ingestion.
//!
//! Columns are `x0..x{d_in-1}`, `y0..y{d_out-1}`, and optionally an integer
//! `task` column. Rows are grouped by task; task ids must cover `0..K`.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use super::{loss_metrics, TaskSuite};
use crate::diffcore::{Activation, Batch, DenseStack, LossKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::MlpMultiTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub d_in: usize,
    pub d_out: usize,
    pub task_column: bool,
}

/// Backbone widths used for CSV suites after the input layer.
const BACKBONE_WIDTHS: [usize; 2] = [32, 16];

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Loads a CSV file into a multi-task regression suite with an MLP model.
pub fn load_csv_dataset(path: impl AsRef<Path>, schema: CsvSchema) -> Result<TaskSuite> {
    let path = path.as_ref();
    if schema.d_in == 0 || schema.d_out == 0 {
        return Err(Error::Precondition("d_in and d_out must be positive".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();

    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_error(path, 1, format!("missing column `{name}`")))
    };
    let x_cols = (0..schema.d_in).map(|i| column(&format!("x{i}"))).collect::<Result<Vec<_>>>()?;
    let y_cols = (0..schema.d_out).map(|i| column(&format!("y{i}"))).collect::<Result<Vec<_>>>()?;
    let task_col = if schema.task_column { Some(column("task")?) } else { None };

    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (index, record) in reader.records().enumerate() {
        let line = index + 2;
        let record = record.map_err(|e| parse_error(path, line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        let number = |col: usize| -> Result<f64> {
            let cell = record[col].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(path, line, format!("non-numeric value `{cell}` in column `{}`", &headers[col])))
        };
        let task = match task_col {
            Some(col) => {
                let cell = record[col].trim();
                cell.parse::<usize>()
                    .map_err(|_| parse_error(path, line, format!("task id `{cell}` is not a nonnegative integer")))?
            }
            None => 0,
        };
        let entry = groups.entry(task).or_default();
        for &c in &x_cols {
            entry.0.push(number(c)?);
        }
        for &c in &y_cols {
            entry.1.push(number(c)?);
        }
    }

    let k = groups.len();
    if k < 2 {
        return Err(Error::Precondition(format!("K >= 2 required, found {k} task(s) in {}", path.display())));
    }
    if let Some((expected, found)) = groups.keys().enumerate().find(|(i, t)| i != *t) {
        return Err(Error::Precondition(format!(
            "task ids must be 0..{k} without gaps; expected {expected}, found {found}"
        )));
    }
    let batches = groups
        .into_iter()
        .map(|(task, (xs, ys))| {
            let n = xs.len() / schema.d_in;
            Batch::new(Matrix::new(n, schema.d_in, xs)?, Matrix::new(n, schema.d_out, ys)?, task)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut widths = vec![schema.d_in];
    widths.extend(BACKBONE_WIDTHS);
    let feature = BACKBONE_WIDTHS[BACKBONE_WIDTHS.len() - 1];
    let backbone = DenseStack::from_widths("bb", &widths, Activation::Tanh, Activation::Tanh);
    let heads = (0..k)
        .map(|i| {
            DenseStack::from_widths(&format!("head{i}_"), &[feature, schema.d_out], Activation::Identity, Activation::Identity)
        })
        .collect();
    let program = MlpMultiTask::new(backbone, heads, LossKind::Mse)?;
    let (metric_names, directions) = loss_metrics(k);
    TaskSuite {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into()),
        program: Arc::new(program),
        metric_names,
        directions,
        data: Some(batches),
        pareto: None,
    }
    .validate()
}
