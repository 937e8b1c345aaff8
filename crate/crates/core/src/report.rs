//! Output files of a Monte Carlo run.
//!
//! `report.json` is a pure function of the configuration. Worker count,
//! wall time and timestamp go to `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lab::DiagnosticsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_toml: String,
    pub config_hash: String,
    pub report_sha256: String,
    pub sample_seeds: Vec<u64>,
    pub workers: usize,
    pub parallel_feature: bool,
    pub unix_time: u64,
    pub elapsed_seconds: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub report: PathBuf,
    pub manifest: PathBuf,
    pub eigenvalues: PathBuf,
    pub kde: Vec<PathBuf>,
}

/// Moves an existing file to `<name>.bak` before it is replaced.
fn backup(path: &Path) -> Result<()> {
    if path.exists() {
        let mut bak = path.as_os_str().to_owned();
        bak.push(".bak");
        fs::rename(path, &bak).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    backup(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical JSON of the report.
pub fn report_json(report: &DiagnosticsReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Config(format!("cannot serialise report: {e}")))
}

/// One row per sample and time with `sample,seed,t,lambda_min,lambda_max,det,eig_1..eig_d`.
pub fn eigenvalue_csv(report: &DiagnosticsReport) -> String {
    let d = report
        .samples
        .first()
        .and_then(|s| s.times.first())
        .map_or(0, |t| t.gamma_eigenvalues.len());
    let mut out = String::from("sample,seed,t,lambda_min,lambda_max,det");
    for i in 1..=d {
        out.push_str(&format!(",eig_{i}"));
    }
    out.push('\n');
    for s in &report.samples {
        for t in &s.times {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e}",
                s.index, s.seed, t.t, t.lambda_min, t.lambda_max, t.det
            ));
            for e in &t.gamma_eigenvalues {
                out.push_str(&format!(",{e:e}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `report.json`, `gamma_eigs.csv`, one `kde_<coord>.csv` per
/// projected coordinate and time, and `manifest.json` into `dir`.
pub fn emit_report(
    report: &DiagnosticsReport,
    config: &ExperimentConfig,
    dir: &Path,
    workers: usize,
    elapsed: Duration,
) -> Result<EmittedFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = report_json(report)?;
    let report_path = dir.join("report.json");
    write_file(&report_path, json.as_bytes())?;

    let eig_path = dir.join("gamma_eigs.csv");
    write_file(&eig_path, eigenvalue_csv(report).as_bytes())?;

    let multi = report.aggregates.len() > 1;
    let mut kde = Vec::new();
    for (slot, agg) in report.aggregates.iter().enumerate() {
        for curve in &agg.kde {
            let name = if multi {
                format!("kde_{}_t{}.csv", curve.coordinate, slot + 1)
            } else {
                format!("kde_{}.csv", curve.coordinate)
            };
            let mut body = String::from("x,density\n");
            for (x, p) in curve.grid.iter().zip(&curve.density) {
                body.push_str(&format!("{x:e},{p:e}\n"));
            }
            let path = dir.join(name);
            write_file(&path, body.as_bytes())?;
            kde.push(path);
        }
    }

    let mut files = vec!["report.json".to_string(), "gamma_eigs.csv".to_string()];
    files.extend(kde.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()));
    let manifest = Manifest {
        config_toml: config.to_toml()?,
        config_hash: config.hash()?,
        report_sha256: sha256_hex(json.as_bytes()),
        sample_seeds: report.samples.iter().map(|s| s.seed).collect(),
        workers,
        parallel_feature: crate::par::parallel_enabled(),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_seconds: elapsed.as_secs_f64(),
        files,
    };
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("cannot serialise manifest: {e}")))?;
    write_file(&manifest_path, body.as_bytes())?;
    Ok(EmittedFiles {
        report: report_path,
        manifest: manifest_path,
        eigenvalues: eig_path,
        kde,
    })
}
