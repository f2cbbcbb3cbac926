//! Run artifacts: `steps.csv`, `teleports.csv`, `metrics.csv`,
//! `manifest.toml` and `plotdata/*.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use super::runner::RunRecord;
use crate::conflict::mean_pairwise_cos;
use crate::error::{Error, Result};
use crate::metrics::Direction;

/// Bins of the cosine histogram over `[-1, 1]`.
pub const COSINE_BINS: usize = 20;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn strs(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Writes every artifact of `record` into `dir`, creating it if needed.
pub fn emit_outputs(record: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("plotdata")).map_err(|e| Error::io(dir, e))?;
    let k = record
        .steps
        .first()
        .map(|r| r.losses.len())
        .or_else(|| record.baseline.as_ref().map(Vec::len))
        .unwrap_or(0);
    let loss_cols: Vec<String> = (0..k).map(|i| format!("loss_{i}")).collect();

    let mut header = strs(&["epoch", "step"]);
    header.extend(loss_cols.iter().cloned());
    header.extend(strs(&["dominated", "trigger_count", "teleport_id", "grad_norm", "stat_gap"]));
    write_csv(
        &dir.join("steps.csv"),
        &header,
        record.steps.iter().map(|r| {
            let mut row = vec![r.epoch.to_string(), r.step.to_string()];
            row.extend(r.losses.iter().map(|&l| num(l)));
            row.push(r.dominated.to_string());
            row.push(r.trigger_count.to_string());
            row.push(r.teleport_id.map(|i| i.to_string()).unwrap_or_default());
            row.push(num(r.grad_norm));
            row.push(num(r.stat_gap));
            row
        }),
    )?;

    write_csv(
        &dir.join("teleports.csv"),
        &strs(&[
            "id",
            "epoch",
            "step",
            "accepted",
            "Lt_final",
            "Lg_final",
            "grad_norm_before",
            "grad_norm_after",
            "sigma",
            "inner_steps",
            "Lg_initial",
            "lt_tolerance",
            "mean_cos_before",
            "mean_cos_after",
            "delta_norm",
        ]),
        record.teleports.iter().map(|t| {
            let o = &t.outcome;
            vec![
                t.id.to_string(),
                t.epoch.to_string(),
                t.step.to_string(),
                o.accepted.to_string(),
                num(o.lt_final),
                num(o.lg_final),
                num(o.grad_norm_before),
                num(o.grad_norm_after),
                t.sigma.map(num).unwrap_or_default(),
                o.inner_steps.to_string(),
                num(o.lg_initial),
                num(o.lt_tolerance),
                num(mean_pairwise_cos(&o.pairwise_cos_before)),
                num(mean_pairwise_cos(&o.pairwise_cos_after)),
                num(crate::linalg::norm(&o.delta_theta)),
            ]
        }),
    )?;

    write_csv(
        &dir.join("metrics.csv"),
        &strs(&["method", "metric", "direction", "value"]),
        record
            .metrics
            .iter()
            .map(|m| vec![m.method.clone(), m.metric.clone(), m.direction.as_str().to_string(), num(m.value)]),
    )?;

    write_plotdata(record, &dir.join("plotdata"), &loss_cols)?;
    fs::write(dir.join("manifest.toml"), manifest(record)).map_err(|e| Error::io(dir.join("manifest.toml"), e))
}

fn write_plotdata(record: &RunRecord, dir: &Path, loss_cols: &[String]) -> Result<()> {
    let k = loss_cols.len();
    let mut header = strs(&["epoch"]);
    header.extend(loss_cols.iter().cloned());
    let epochs = record.steps.last().map(|r| r.epoch + 1).unwrap_or(0);
    let mut curves = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let rows: Vec<_> = record.steps.iter().filter(|r| r.epoch == e).collect();
        let mut row = vec![e.to_string()];
        for i in 0..k {
            row.push(num(rows.iter().map(|r| r.losses[i]).sum::<f64>() / rows.len() as f64));
        }
        curves.push(row);
    }
    write_csv(&dir.join("loss_curves.csv"), &header, curves)?;

    let mut before = [0usize; COSINE_BINS];
    let mut after = [0usize; COSINE_BINS];
    let bin = |c: f64| (((c + 1.0) / 2.0 * COSINE_BINS as f64).floor() as usize).min(COSINE_BINS - 1);
    for t in record.teleports.iter().filter(|t| t.outcome.accepted) {
        for (counts, cos) in [(&mut before, &t.outcome.pairwise_cos_before), (&mut after, &t.outcome.pairwise_cos_after)] {
            for i in 0..cos.len() {
                for j in (i + 1)..cos.len() {
                    counts[bin(cos[i][j])] += 1;
                }
            }
        }
    }
    write_csv(
        &dir.join("cosine_hist.csv"),
        &strs(&["bin_lo", "bin_hi", "count_before", "count_after"]),
        (0..COSINE_BINS).map(|b| {
            let lo = -1.0 + 2.0 * b as f64 / COSINE_BINS as f64;
            let hi = -1.0 + 2.0 * (b + 1) as f64 / COSINE_BINS as f64;
            vec![num(lo), num(hi), before[b].to_string(), after[b].to_string()]
        }),
    )?;

    write_csv(
        &dir.join("grad_norm_scatter.csv"),
        &strs(&["id", "accepted", "grad_norm_before", "grad_norm_after"]),
        record.teleports.iter().map(|t| {
            vec![
                t.id.to_string(),
                t.outcome.accepted.to_string(),
                num(t.outcome.grad_norm_before),
                num(t.outcome.grad_norm_after),
            ]
        }),
    )
}

/// Manifest text: run facts, results, baseline values and the config echo.
pub fn manifest(record: &RunRecord) -> String {
    let mut run = toml::Table::new();
    run.insert("method".into(), record.method.clone().into());
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    run.insert("seed".into(), toml::Value::Integer(record.config.seed as i64));
    run.insert("config_hash".into(), record.config.content_hash().into());
    run.insert("wall_time_secs".into(), record.wall_time_secs.into());
    run.insert(
        "status".into(),
        if record.error.is_some() { "error" } else { "ok" }.into(),
    );
    if let Some(e) = &record.error {
        run.insert("error".into(), e.clone().into());
    }

    let mut results = toml::Table::new();
    results.insert("steps".into(), toml::Value::Integer(record.steps.len() as i64));
    results.insert("teleports".into(), toml::Value::Integer(record.teleports.len() as i64));
    let accepted = record.teleports.iter().filter(|t| t.outcome.accepted).count();
    results.insert("teleports_accepted".into(), toml::Value::Integer(accepted as i64));
    results.insert("final_stat_gap".into(), record.final_stat_gap.into());
    if let Some(d) = record.delta_m {
        results.insert("delta_m".into(), d.into());
    }

    let mut doc = toml::Table::new();
    doc.insert("run".into(), run.into());
    doc.insert("results".into(), results.into());
    if let Some(b) = &record.baseline {
        let names = record.metrics.iter().map(|m| m.metric.clone());
        let mut t = toml::Table::new();
        for (name, v) in names.zip(b) {
            t.insert(name, (*v).into());
        }
        doc.insert("baseline".into(), t.into());
    }
    let config: toml::Table = toml::from_str(&record.config.to_toml()).expect("config echo parses");
    doc.insert("config".into(), config.into());
    toml::to_string(&doc).expect("manifest serializes")
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub method: String,
    pub metric: String,
    pub direction: Direction,
    pub value: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let parse = |message: String| Error::Parse {
            path: PathBuf::from(path),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse(e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse(format!("expected 4 fields, found {}", rec.len())));
        }
        let direction = match &rec[2] {
            "higher" => Direction::HigherBetter,
            "lower" => Direction::LowerBetter,
            other => return Err(parse(format!("unknown direction `{other}`"))),
        };
        let value = rec[3]
            .parse::<f64>()
            .map_err(|_| parse(format!("non-numeric value `{}`", &rec[3])))?;
        out.push(MetricEntry {
            method: rec[0].to_string(),
            metric: rec[1].to_string(),
            direction,
            value,
        });
    }
    Ok(out)
}
