//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use super::config::{set_dotted, RunConfig};
use super::output::{emit_outputs, read_metrics, MetricEntry};
use super::runner::{run_experiment_with, RunRecord};
use super::selftest;
use crate::error::{Error, Result};
use crate::metrics::{mean_rank, MetricTable};

#[derive(Debug, Parser)]
#[command(name = "mtl-teleport", version, about = "Conflict-triggered teleportation for multi-task training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train once and write the run artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per combination of parameter values, in parallel.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...` with a dotted key such as `teleport.gamma`; repeatable.
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate { config: PathBuf },
    /// Run the built-in oracle and property checks.
    Selftest,
    /// Summarize relative degradation and mean rank of one or more runs.
    Report { run_dir: PathBuf },
}

const EXIT_CONFIG: i32 = 1;
const EXIT_RUNTIME: i32 = 2;

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out),
        Command::Sweep {
            config,
            params,
            seed,
            out,
        } => cmd_sweep(&config, &params, seed, out),
        Command::Validate { config } => match RunConfig::load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        Command::Selftest => {
            if selftest::run(&mut std::io::stdout()) {
                0
            } else {
                EXIT_RUNTIME
            }
        }
        Command::Report { run_dir } => match report(&run_dir) {
            Ok(text) => {
                print!("{text}");
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            }
        },
    }
}

fn default_out(config_path: &Path, cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| {
        let stem = config_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        PathBuf::from("runs").join(stem)
    })
}

/// Runs and writes outputs; partial outputs are written on failure.
fn execute(cfg: &RunConfig, base: Option<&Path>, out: &Path) -> Result<RunRecord> {
    match run_experiment_with(cfg, base, &mut |_, _, _| {}) {
        Ok(rec) => {
            emit_outputs(&rec, out)?;
            Ok(rec)
        }
        Err(failure) => {
            let _ = emit_outputs(&failure.partial, out);
            Err(failure.error)
        }
    }
}

fn summary(rec: &RunRecord, out: &Path) -> String {
    let accepted = rec.teleports.iter().filter(|t| t.outcome.accepted).count();
    let mut line = format!(
        "{}: {} steps, {} teleports ({} accepted), final stat gap {:.3e}",
        out.display(),
        rec.steps.len(),
        rec.teleports.len(),
        accepted,
        rec.final_stat_gap
    );
    if let Some(d) = rec.delta_m {
        line.push_str(&format!(", delta_m {d:.3}%"));
    }
    line
}

fn cmd_run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> i32 {
    let mut cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.unwrap_or_else(|| default_out(path, &cfg));
    match execute(&cfg, path.parent(), &out) {
        Ok(rec) => {
            println!("{}", summary(&rec, &out));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn parse_param(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--param `{spec}` must look like key=v1,v2")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(Error::Usage(format!("--param `{spec}` needs a key and at least one value")));
    }
    Ok((key.trim().to_string(), values))
}

/// Every combination of the swept values, as `(dir name, config)`.
fn sweep_configs(text: &str, params: &[String], seed: Option<u64>) -> Result<Vec<(String, RunConfig)>> {
    let base: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        field: "document".into(),
        message: e.message().to_string(),
    })?;
    let params = params.iter().map(|p| parse_param(p)).collect::<Result<Vec<_>>>()?;
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &params {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|combo| {
            let mut doc = base.clone();
            for (k, v) in &combo {
                set_dotted(&mut doc, k, v)?;
            }
            let text = toml::to_string(&doc).map_err(|e| Error::config("document", e.to_string()))?;
            let mut cfg = RunConfig::from_toml(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let name: Vec<String> = combo
                .iter()
                .map(|(k, v)| {
                    format!("{k}={v}")
                        .chars()
                        .map(|c| if c.is_ascii_alphanumeric() || "=.-_".contains(c) { c } else { '_' })
                        .collect()
                })
                .collect();
            Ok((name.join("_"), cfg))
        })
        .collect()
}

fn cmd_sweep(path: &Path, params: &[String], seed: Option<u64>, out: Option<PathBuf>) -> i32 {
    let configs = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))
        .and_then(|text| sweep_configs(&text, params, seed));
    let configs = match configs {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let root = out.unwrap_or_else(|| default_out(path, &configs[0].1));
    let results: Vec<(PathBuf, Result<RunRecord>)> = configs
        .par_iter()
        .map(|(name, cfg)| {
            let dir = root.join(name);
            let r = execute(cfg, path.parent(), &dir);
            (dir, r)
        })
        .collect();
    let mut code = 0;
    for (dir, r) in results {
        match r {
            Ok(rec) => println!("{}", summary(&rec, &dir)),
            Err(e) => {
                eprintln!("{}: error: {e}", dir.display());
                code = EXIT_RUNTIME;
            }
        }
    }
    code
}

/// Δm% per run and mean rank across runs over their shared task metrics.
pub fn report(dir: &Path) -> Result<String> {
    let mut runs: Vec<(String, Vec<MetricEntry>)> = Vec::new();
    let single = dir.join("metrics.csv");
    if single.is_file() {
        let entries = read_metrics(&single)?;
        let label = entries.first().map(|e| e.method.clone()).unwrap_or_default();
        runs.push((label, entries));
    } else {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.csv").is_file())
            .collect();
        subdirs.sort();
        for p in subdirs {
            let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            runs.push((name, read_metrics(&p.join("metrics.csv"))?));
        }
    }
    if runs.is_empty() {
        return Err(Error::Precondition(format!("no metrics.csv found under {}", dir.display())));
    }

    let mut text = String::new();
    for (name, entries) in &runs {
        let dm = entries.iter().find(|e| e.metric == "delta_m").map(|e| e.value);
        let gap = entries.iter().find(|e| e.metric == "stat_gap").map(|e| e.value);
        text.push_str(&format!("{name}:"));
        if let Some(d) = dm {
            text.push_str(&format!(" delta_m {d:.4}%"));
        }
        if let Some(g) = gap {
            text.push_str(&format!(" stat_gap {g:.4e}"));
        }
        text.push('\n');
    }
    if runs.len() >= 2 {
        let task_metrics: Vec<&MetricEntry> = runs[0]
            .1
            .iter()
            .filter(|e| e.metric != "delta_m" && e.metric != "stat_gap")
            .collect();
        let values = runs
            .iter()
            .map(|(name, entries)| {
                task_metrics
                    .iter()
                    .map(|m| {
                        entries
                            .iter()
                            .find(|e| e.metric == m.metric)
                            .map(|e| e.value)
                            .ok_or_else(|| Error::Precondition(format!("run `{name}` lacks metric `{}`", m.metric)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let table = MetricTable::new(
            task_metrics.iter().map(|m| m.metric.clone()).collect(),
            task_metrics.iter().map(|m| m.direction).collect(),
            runs.iter().map(|(n, _)| n.clone()).collect(),
            values,
        )?;
        for (name, mr) in table.methods.iter().zip(mean_rank(&table)?) {
            text.push_str(&format!("{name}: mean rank {mr:.3}\n"));
        }
    }
    Ok(text)
}
