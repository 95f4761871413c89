//! Command-line surface.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::artifacts::RunDir;
use crate::clustering::ClusterModel;
use crate::config::{parse_overrides, RunConfig};
use crate::error::{Error, Result};
use crate::model::{ModelKind, NeuralProcess};
use crate::pipeline::{self, task_seed, Predictor};
use crate::plot::{plot_data, render_svg};
use crate::taskgen::{write_jsonl, EpisodeShape};

#[derive(Debug, Parser)]
#[command(name = "maha", version, about = "Neural-process meta-learning runs")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    /// Flat `key = value` config file (or a previous run's config.json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key=value` pairs applied after the config file.
    #[arg(long, global = true, num_args = 1..)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Pre-task training of the clustering encoder and catalog embedding.
    Pretrain,
    /// Chooses the cluster count and writes clusters.json.
    Cluster,
    /// Trains a single model, or one model per cluster for MAHA.
    Train,
    /// Evaluates the trained artifacts on fresh tasks.
    Eval,
    /// Writes SVG figures of evaluation episodes.
    Plot {
        /// Indices into the evaluation task stream.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        episodes: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        grid: usize,
    },
    /// Dumps episodes as JSON lines.
    ExportEpisodes {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        /// Defaults to `<out-dir>/episodes.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Cli {
    /// Defaults, then the config file (or the run's own config.json), then
    /// `--seed`, then overrides.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let existing = self.out_dir.join("config.json");
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if existing.exists() => RunConfig::load(&existing)?,
            None => RunConfig::default(),
        };
        let mut pairs = Vec::new();
        if let Some(s) = self.seed {
            pairs.push(("seed".to_string(), s.to_string()));
        }
        pairs.extend(parse_overrides(&self.overrides)?);
        base.with_overrides(&pairs)
    }
}

pub fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = cli.resolve_config()?;
    let dir = RunDir::create(&cli.out_dir)?;
    Ok(match &cli.verb {
        Verb::Pretrain => {
            let (outcome, catalog) = pipeline::run_pretrain(&cfg, &dir)?;
            json!({"steps": outcome.steps_run, "best_step": outcome.best_step, "catalog_rows": catalog.len()})
        }
        Verb::Cluster => {
            let m = pipeline::run_cluster(&cfg, &dir)?;
            json!({"k": m.k, "purity_by_k": m.purity_by_k})
        }
        Verb::Train => {
            if cfg.model.kind == ModelKind::Maha {
                let (clusters, outcomes) = pipeline::run_train_clustered(&cfg, &dir)?;
                json!({"k": clusters.k, "steps": outcomes.iter().map(|o| o.steps_run).collect::<Vec<_>>()})
            } else {
                let o = pipeline::run_train_single(&cfg, &dir)?;
                json!({"steps": o.steps_run, "best_step": o.best_step})
            }
        }
        Verb::Eval => serde_json::to_value(pipeline::run_eval(&cfg, &dir)?)?,
        Verb::Plot { episodes, grid } => plot(&cfg, &dir, episodes, *grid)?,
        Verb::ExportEpisodes { count, split, output } => {
            let dist = cfg.data.distribution()?;
            let (tag, context) = match split {
                Split::Train => ("train-task", cfg.data.context_max),
                Split::Eval => ("eval-task", cfg.eval.shot),
            };
            let shape = EpisodeShape {
                context,
                target: cfg.data.target,
                way: cfg.data.way(),
                mode: if *split == Split::Eval { cfg.eval.mode } else { cfg.data.mode },
            };
            let eps = (0..*count as u64)
                .map(|i| dist.sample(&shape, task_seed(cfg.seed, tag, i)))
                .collect::<Result<Vec<_>>>()?;
            let path = output.clone().unwrap_or_else(|| dir.root().join("episodes.jsonl"));
            write_jsonl(&path, &eps)?;
            json!({"episodes": eps.len(), "path": path})
        }
    })
}

fn plot(cfg: &RunConfig, dir: &RunDir, episodes: &[usize], grid: usize) -> Result<serde_json::Value> {
    let dist = cfg.data.distribution()?;
    let domain = dist
        .domain()
        .ok_or_else(|| Error::Config("plots are available for regression episodes only".into()))?;
    dir.require(&dir.checkpoint(), "checkpoint")?;
    let main = NeuralProcess::load(&dir.checkpoint())?;
    let routed = if cfg.model.kind == ModelKind::Maha {
        dir.require(&dir.clusters(), "clusters.json")?;
        let clusters = ClusterModel::load(&dir.clusters())?;
        let models = (0..clusters.k)
            .map(|c| {
                let p = dir.root().join(RunDir::cluster_checkpoint_rel(c));
                dir.require(&p, "checkpoint")?;
                NeuralProcess::load(&p)
            })
            .collect::<Result<Vec<_>>>()?;
        Some((clusters, models))
    } else {
        None
    };
    let pred = match &routed {
        Some((clusters, models)) => Predictor::Routed {
            embedder: &main,
            clusters,
            models,
        },
        None => Predictor::Single(&main),
    };
    let shape = EpisodeShape {
        context: cfg.eval.shot,
        target: cfg.data.target,
        way: cfg.data.way(),
        mode: cfg.eval.mode,
    };
    let out = dir.root().join("plots");
    std::fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    for &i in episodes {
        let ep = dist.sample(&shape, task_seed(cfg.seed, "eval-task", i as u64))?;
        let data = plot_data(pred, &ep, domain, grid, cfg.eval.samples, cfg.seed)?;
        let tx = ep.view().target_x.to_vec();
        let ty = ep.target_y().to_vec();
        let svg = render_svg(&data, Some((&tx, &ty)))?;
        let path = out.join(format!("episode_{i}.svg"));
        std::fs::write(&path, svg)?;
        files.push(path);
    }
    Ok(json!({ "plots": files }))
}

/// Machine-readable failure report written to stderr.
pub fn error_json(e: &Error) -> serde_json::Value {
    json!({"error": e.code(), "message": e.to_string()})
}
