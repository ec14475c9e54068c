//! JSON-lines reports and output files.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::{CliError, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSummary {
    pub horizon: f64,
    pub steps: usize,
}

/// One report line. `lhs`, `rhs` and `stderr` carry the headline comparison
/// when an experiment has one; everything else goes in `details`.
#[derive(Debug, Clone, Serialize)]
pub struct Report<'a> {
    pub command: &'static str,
    pub identity: String,
    pub n: usize,
    pub grid: GridSummary,
    pub paths: usize,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub stderr: Option<f64>,
    pub pass: bool,
    pub details: Value,
    pub config: &'a ExperimentConfig,
}

impl<'a> Report<'a> {
    pub fn new(command: &'static str, identity: impl Into<String>, cfg: &'a ExperimentConfig) -> Self {
        Self {
            command,
            identity: identity.into(),
            n: cfg.dim,
            grid: GridSummary {
                horizon: cfg.horizon,
                steps: cfg.steps,
            },
            paths: cfg.paths,
            lhs: None,
            rhs: None,
            stderr: None,
            pass: true,
            details: Value::Null,
            config: cfg,
        }
    }

    pub fn compare(mut self, lhs: f64, rhs: f64, stderr: Option<f64>) -> Self {
        self.lhs = Some(lhs);
        self.rhs = Some(rhs);
        self.stderr = stderr;
        self
    }

    pub fn pass(mut self, pass: bool) -> Self {
        self.pass = pass;
        self
    }

    pub fn details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }
}

/// Writes into one output directory. Report files are replaced on each run
/// unless `append` is set.
#[derive(Debug, Clone)]
pub struct Sink {
    dir: PathBuf,
    append: bool,
}

impl Sink {
    pub fn new(dir: PathBuf, append: bool) -> Self {
        Self { dir, append }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn prepare(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", self.dir.display())))
    }

    pub fn report(&self, stem: &str, report: &Report) -> Result<PathBuf, CliError> {
        self.prepare()?;
        let line = serde_json::to_string(report).map_err(|e| CliError::Runtime(e.to_string()))?;
        let path = self.dir.join(format!("{stem}.jsonl"));
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(self.append)
            .truncate(!self.append)
            .open(&path)?;
        writeln!(file, "{line}")?;
        println!("{line}");
        Ok(path)
    }

    pub fn file(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        self.prepare()?;
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        Ok(path)
    }
}
