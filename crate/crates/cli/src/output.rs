//! Report files. Column layouts are documented in `docs/csv-schema.md`;
//! bump [`SCHEMA_VERSION`] when a column changes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use momentkv::metrics::diagonal;
use momentkv::PolicyReport;
use serde::Serialize;

use crate::config::ConfigEcho;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct StepRow {
    step: usize,
    layer: usize,
    cache_size_pre: usize,
    cache_size_post: usize,
    n_victims: usize,
    victim_positions: String,
    victim_scores: String,
    retained_mass: f64,
}

#[derive(Serialize)]
struct CdfRow {
    group: &'static str,
    k: usize,
    fraction: f64,
    mass: f64,
    diagonal: f64,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct ReportFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    report: &'a PolicyReport,
}

/// Writes `<out>/<run-id>/{report.json, steps.csv, cdf.csv, timing.csv,
/// config.echo}` and returns the directory.
pub fn write_run(out: &Path, report: &PolicyReport, echo: &ConfigEcho) -> Result<PathBuf> {
    let dir = out.join(&report.run_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let json = serde_json::to_string_pretty(&ReportFile {
        schema_version: SCHEMA_VERSION,
        report,
    })?;
    fs::write(dir.join("report.json"), json)?;

    let mut steps = csv::Writer::from_path(dir.join("steps.csv"))?;
    for r in &report.records {
        steps.serialize(StepRow {
            step: r.step,
            layer: r.layer,
            cache_size_pre: r.cache_size_pre,
            cache_size_post: r.cache_size_post,
            n_victims: r.victim_positions.len(),
            victim_positions: join(&r.victim_positions),
            victim_scores: join(&r.victim_scores),
            retained_mass: r.retained_mass,
        })?;
    }
    steps.flush()?;

    let mut cdf = csv::Writer::from_path(dir.join("cdf.csv"))?;
    if let Some(curves) = &report.cdf {
        for curve in curves {
            let diag = diagonal(curve.window());
            for (i, (&mass, &d)) in curve.mass.iter().zip(&diag).enumerate() {
                cdf.serialize(CdfRow {
                    group: curve.group.name(),
                    k: i + 1,
                    fraction: curve.fraction(i + 1),
                    mass,
                    diagonal: d,
                })?;
            }
        }
    } else {
        cdf.write_record(["group", "k", "fraction", "mass", "diagonal"])?;
    }
    cdf.flush()?;

    let mut timing = csv::Writer::from_path(dir.join("timing.csv"))?;
    timing.serialize(&report.timing)?;
    timing.flush()?;

    let echo = toml::to_string(echo).context("serializing config echo")?;
    fs::write(dir.join("config.echo"), echo)?;
    Ok(dir)
}

/// Writes rows to `<out>/<name>` as CSV.
pub fn write_table<T: Serialize>(out: &Path, name: &str, rows: &[T]) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(path)
}
