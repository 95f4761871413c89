//! Run directory layout and the CSV files written into it.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossReport;

/// `run_dir/{config.json, metrics.csv, checkpoint.json, embeddings.csv,
/// clusters.json, per_cluster/<k>/checkpoint.json, eval_report.json,
/// per_task_scores.csv}`.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.csv")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters.json")
    }

    pub fn cluster_dir(&self, k: usize) -> PathBuf {
        self.root.join("per_cluster").join(k.to_string())
    }

    /// Relative to the run root, as recorded in `clusters.json`.
    pub fn cluster_checkpoint_rel(k: usize) -> String {
        format!("per_cluster/{k}/checkpoint.json")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }

    pub fn per_task_scores(&self) -> PathBuf {
        self.root.join("per_task_scores.csv")
    }

    pub fn require(&self, path: &Path, what: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else if what == "checkpoint" {
            Err(Error::MissingCheckpoint(format!("{} not found", path.display())))
        } else {
            Err(Error::MissingArtifact(format!("{what}: {} not found", path.display())))
        }
    }
}

pub const METRICS_HEADER: &str = "step,loss,nll,kl";

pub fn write_metrics(path: &Path, rows: &[LossReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.total, r.nll, r.kl)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(format!("{} not found", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::MissingArtifact(format!("{}: bad header", path.display())));
    }
    let bad = || Error::MissingArtifact(format!("{}: malformed row", path.display()));
    lines
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 4 {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossReport {
                step: c[0].parse().map_err(|_| bad())?,
                total: f(c[1])?,
                nll: f(c[2])?,
                kl: f(c[3])?,
            })
        })
        .collect()
}
