//! Single-model training, the pre-task stage, clustering, per-cluster
//! training and evaluation, plus the run-directory drivers around them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::artifacts::{write_metrics, RunDir};
use crate::clustering::{select_k, select_k_silhouette, CatalogRow, ClusterModel, Dendrogram, LatentCatalog};
use crate::config::{RunConfig, Selection, StageTwoSampling};
use crate::error::{Error, Result};
use crate::losses::{loss_anp_terms, loss_pre_terms, LossReport, PreTaskFlags};
use crate::model::{Batch, ModelKind, NeuralProcess, Prediction};
use crate::par::{self, Execution};
use crate::rng::Rng;
use crate::taskgen::{Episode, EpisodeShape, Family, SplitMode, TaskDistribution};
use crate::tensor::{Adam, AdamState, Graph, ParamStore};

/// Episodes per evaluation chunk.
pub const EVAL_CHUNK: usize = 16;

/// Task seed number `index` of the stream `tag`.
pub fn task_seed(seed: u64, tag: &str, index: u64) -> u64 {
    Rng::derived(seed, tag, index).next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Anp,
    Pre(PreTaskFlags),
}

/// Where training episodes come from.
#[derive(Clone, Debug)]
pub enum EpisodeSource {
    Fresh(TaskDistribution),
    /// Replays a fixed list of task seeds.
    Members { dist: TaskDistribution, seeds: Vec<u64> },
}

impl EpisodeSource {
    pub fn distribution(&self) -> &TaskDistribution {
        match self {
            EpisodeSource::Fresh(d) | EpisodeSource::Members { dist: d, .. } => d,
        }
    }
}

/// One optimisation run.
#[derive(Clone, Debug)]
pub struct TrainSpec<'a> {
    pub cfg: &'a RunConfig,
    pub kind: ModelKind,
    pub source: EpisodeSource,
    pub objective: Objective,
    pub steps_max: usize,
    /// Prefix of every random stream of this run.
    pub stream: String,
    pub init_seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation round.
    pub model: NeuralProcess,
    pub metrics: Vec<LossReport>,
    /// `(step, score)`; lower is better.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Set when training hit a non-finite loss or gradient.
    pub diverged: Option<String>,
}

fn shape_of(cfg: &RunConfig, context: usize, mode: SplitMode) -> EpisodeShape {
    EpisodeShape {
        context,
        target: cfg.data.target,
        way: cfg.data.way(),
        mode,
    }
}

fn sample_all(exec: Execution, dist: &TaskDistribution, shape: &EpisodeShape, seeds: &[u64]) -> Result<Vec<Episode>> {
    par::try_map_range(exec, seeds.len(), |i| dist.sample(shape, seeds[i]))
}

fn labeled_batch(episodes: &[Episode]) -> Result<Batch> {
    Batch::labeled(&episodes.iter().map(|e| e.labeled()).collect::<Vec<_>>())
}

fn observed_batch(episodes: &[Episode]) -> Result<Batch> {
    Batch::observed(&episodes.iter().map(|e| e.view()).collect::<Vec<_>>())
}

/// Validation score of `model` (lower is better): predictive MSE or error
/// rate for the (A)NP objective, the pre-task loss for the pre-task.
fn validate(spec: &TrainSpec<'_>, model: &NeuralProcess, valid: &[Vec<Episode>]) -> Result<f64> {
    let cfg = spec.cfg;
    let scores = par::try_map_range(cfg.execution, valid.len(), |c| -> Result<(f64, usize)> {
        let chunk = &valid[c];
        match spec.objective {
            Objective::Anp => {
                let batch = observed_batch(chunk)?;
                let mut rng = Rng::derived(cfg.seed, &format!("{}-valid-mc", spec.stream), c as u64);
                let pred = model.predict(&batch, 0, &mut rng)?;
                let s: f64 = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, e)| score_task(&pred, i, e).map(|t| t.loss()))
                    .sum::<Result<f64>>()?;
                Ok((s, chunk.len()))
            }
            Objective::Pre(flags) => {
                let batch = labeled_batch(chunk)?;
                let mut rng = Rng::derived(cfg.seed, &format!("{}-valid-mc", spec.stream), c as u64);
                let g = Graph::new();
                let p = g.bind_frozen(&model.store);
                let t = loss_pre_terms(model, &p, &batch, &cfg.loss, flags, &mut rng)?;
                Ok((t.total.item() * chunk.len() as f64, chunk.len()))
            }
        }
    })?;
    let (sum, n) = scores.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    Ok(sum / n.max(1) as f64)
}

/// Minimises the objective with Adam, validating every `valid_every` steps
/// and keeping the parameters of the best round.
pub fn train(spec: &TrainSpec<'_>) -> Result<TrainOutcome> {
    let cfg = spec.cfg;
    let t = &cfg.train;
    let dist = spec.source.distribution();
    let mut model = NeuralProcess::new(spec.kind, cfg.arch(), spec.init_seed)?;
    let adam = Adam::with_lr(t.lr);
    let mut state = AdamState::new(&model.store);

    let valid_shape = shape_of(cfg, cfg.eval.shot, cfg.data.mode);
    let valid_seeds: Vec<u64> = (0..t.valid_tasks as u64)
        .map(|i| task_seed(cfg.seed, &format!("{}-valid", spec.stream), i))
        .collect();
    let valid: Vec<Vec<Episode>> = sample_all(cfg.execution, dist, &valid_shape, &valid_seeds)?
        .chunks(t.batch)
        .map(|c| c.to_vec())
        .collect();

    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut check = |model: &NeuralProcess, step: usize, validation: &mut Vec<(usize, f64)>| -> Result<bool> {
        if valid.is_empty() {
            best = Some((f64::NAN, step, model.store.clone()));
            return Ok(true);
        }
        let score = validate(spec, model, &valid)?;
        validation.push((step, score));
        let improved = best.as_ref().is_none_or(|(b, _, _)| score < *b || b.is_nan());
        if improved {
            best = Some((score, step, model.store.clone()));
        }
        log::debug!("{} step {step}: validation {score:.6}", spec.stream);
        Ok(improved)
    };
    check(&model, 0, &mut validation)?;

    let mut metrics = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut diverged = None;
    let mut steps_run = 0;
    let (lo, hi) = (cfg.data.context_min, cfg.data.context_max);
    for step in 0..spec.steps_max {
        let mut rng = Rng::derived(cfg.seed, &format!("{}-step", spec.stream), step as u64);
        let context = lo + rng.below(hi - lo + 1);
        let seeds: Vec<u64> = match &spec.source {
            EpisodeSource::Fresh(_) => (0..t.batch)
                .map(|i| task_seed(cfg.seed, &format!("{}-task", spec.stream), (step * t.batch + i) as u64))
                .collect(),
            EpisodeSource::Members { seeds, .. } => {
                if seeds.is_empty() {
                    return Err(Error::contract("member replay without members"));
                }
                (0..t.batch).map(|_| seeds[rng.below(seeds.len())]).collect()
            }
        };
        let episodes = sample_all(cfg.execution, dist, &shape_of(cfg, context, cfg.data.mode), &seeds)?;
        let batch = labeled_batch(&episodes)?;
        let g = Graph::new();
        let p = g.bind(&model.store);
        let terms = match spec.objective {
            Objective::Anp => loss_anp_terms(&model, &p, &batch, &cfg.loss, &mut rng, None)?,
            Objective::Pre(flags) => loss_pre_terms(&model, &p, &batch, &cfg.loss, flags, &mut rng)?,
        };
        let report = terms.report(step);
        if !report.total.is_finite() {
            diverged = Some(format!("non-finite loss at step {step}"));
            break;
        }
        let grads = g.backward(terms.total)?;
        let grads = p.gradients(&grads);
        drop(p);
        if let Err(e) = adam.step(&mut model.store, &grads, &mut state) {
            match e {
                Error::NonFiniteGradient(_) => {
                    diverged = Some(format!("step {step}: {e}"));
                    break;
                }
                other => return Err(other),
            }
        }
        steps_run = step + 1;
        if step % t.log_every.max(1) == 0 || step + 1 == spec.steps_max {
            metrics.push(report);
        }
        if steps_run % t.valid_every == 0 || steps_run == spec.steps_max {
            if check(&model, steps_run, &mut validation)? {
                since_best = 0;
            } else {
                since_best += 1;
                if t.patience > 0 && since_best >= t.patience {
                    stopped_early = true;
                    log::info!("{}: early stop at step {steps_run}", spec.stream);
                    break;
                }
            }
        }
    }
    let (_, best_step, store) = best.ok_or_else(|| Error::contract("no validation round"))?;
    if let Some(msg) = &diverged {
        log::error!("{}: {msg}; keeping parameters of step {best_step}", spec.stream);
    }
    model.store = store;
    Ok(TrainOutcome {
        model,
        metrics,
        validation,
        best_step,
        steps_run,
        stopped_early,
        diverged,
    })
}

/// Score of one evaluation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: u64,
    pub family: Family,
    pub cluster: usize,
    /// MSE of the predictive mean, or accuracy.
    pub score: f64,
    /// Negative log-likelihood of the Monte-Carlo mixture.
    pub nll_mc: f64,
    /// Negative log-likelihood of a Gaussian with the mixture's mean and variance.
    pub nll_mean_pred: f64,
}

impl TaskScore {
    fn loss(&self) -> f64 {
        if matches!(self.family, Family::Blob(_)) {
            1.0 - self.score
        } else {
            self.score
        }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Scores row `i` of a batch prediction against the hidden targets.
pub fn score_task(pred: &Prediction, i: usize, episode: &Episode) -> Result<TaskScore> {
    let y = episode.target_y().data();
    let m = y.len();
    let (score, nll_mc, nll_mean_pred) = match pred {
        Prediction::Regression {
            mean,
            variance,
            sample_means,
            sample_vars,
        } => {
            let off = i * m;
            let mu = &mean.data()[off..off + m];
            let var = &variance.data()[off..off + m];
            let mse = mu.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m as f64;
            let s = sample_means.len() as f64;
            let mut mc = 0.0;
            let mut mp = 0.0;
            for j in 0..m {
                let logs: Vec<f64> = sample_means
                    .iter()
                    .zip(sample_vars)
                    .map(|(sm, sv)| {
                        let (u, v) = (sm.data()[off + j], sv.data()[off + j]);
                        -0.5 * (LN_2PI + v.ln() + (y[j] - u).powi(2) / v)
                    })
                    .collect();
                let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = top + (logs.iter().map(|l| (l - top).exp()).sum::<f64>() / s).ln();
                mc -= lse;
                mp += 0.5 * (LN_2PI + var[j].ln() + (y[j] - mu[j]).powi(2) / var[j]);
            }
            (mse, mc / m as f64, mp / m as f64)
        }
        Prediction::Classification { probs } => {
            let way = episode.way;
            let per_class = m / way;
            let context = episode.shots_context;
            let off = i * m * way;
            let (mut hit, mut nll, mut n) = (0usize, 0.0, 0usize);
            for (j, &label) in y.iter().enumerate() {
                // Context points are part of the target set; score queries only.
                if j % per_class < context && per_class > context {
                    continue;
                }
                let row = &probs.data()[off + j * way..off + (j + 1) * way];
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (k, &p)| if p > b.1 { (k, p) } else { b })
                    .0;
                hit += usize::from(arg == label as usize);
                nll -= row[label as usize].max(f64::MIN_POSITIVE).ln();
                n += 1;
            }
            let n = n.max(1) as f64;
            (hit as f64 / n, nll / n, nll / n)
        }
    };
    Ok(TaskScore {
        task_id: episode.task_seed,
        family: episode.family(),
        cluster: 0,
        score,
        nll_mc,
        nll_mean_pred,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub n: usize,
}

impl GroupScore {
    /// Mean and `1.96·sd/√n`, summed in input order.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                ci95_halfwidth: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            ci95_halfwidth: ci,
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub metric: Metric,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub n_tasks: usize,
    pub shot: usize,
    /// Latent draws per prediction; 0 means the posterior mean was used.
    pub samples: usize,
    pub per_family: BTreeMap<String, GroupScore>,
    /// Routed tasks per cluster; one entry for single models.
    pub per_cluster: BTreeMap<usize, GroupScore>,
    pub nll_mc: f64,
    pub nll_mean_pred: f64,
}

impl EvalReport {
    pub fn from_scores(model_kind: &str, metric: Metric, shot: usize, samples: usize, scores: &[TaskScore]) -> Self {
        let all: Vec<f64> = scores.iter().map(|s| s.score).collect();
        let overall = GroupScore::of(&all);
        let mut fam: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut clu: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for s in scores {
            fam.entry(s.family.name()).or_default().push(s.score);
            clu.entry(s.cluster).or_default().push(s.score);
        }
        let n = scores.len().max(1) as f64;
        Self {
            model_kind: model_kind.to_string(),
            metric,
            mean: overall.mean,
            ci95_halfwidth: overall.ci95_halfwidth,
            n_tasks: scores.len(),
            shot,
            samples,
            per_family: fam.into_iter().map(|(k, v)| (k, GroupScore::of(&v))).collect(),
            per_cluster: clu.into_iter().map(|(k, v)| (k, GroupScore::of(&v))).collect(),
            nll_mc: scores.iter().map(|s| s.nll_mc).sum::<f64>() / n,
            nll_mean_pred: scores.iter().map(|s| s.nll_mean_pred).sum::<f64>() / n,
        }
    }
}

/// What answers the evaluation tasks.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Single(&'a NeuralProcess),
    Routed {
        embedder: &'a NeuralProcess,
        clusters: &'a ClusterModel,
        models: &'a [NeuralProcess],
    },
}

impl Predictor<'_> {
    fn kind_name(&self) -> &'static str {
        match self {
            Predictor::Single(m) => m.kind.name(),
            Predictor::Routed { .. } => ModelKind::Maha.name(),
        }
    }

    fn regression(&self) -> bool {
        match self {
            Predictor::Single(m) => m.regression(),
            Predictor::Routed { embedder, .. } => embedder.regression(),
        }
    }
}

/// Evaluates on `cfg.eval.tasks` fresh episodes; targets are read only by
/// the scorer, after prediction.
pub fn evaluate(pred: Predictor<'_>, cfg: &RunConfig) -> Result<(EvalReport, Vec<TaskScore>)> {
    let dist = cfg.data.distribution()?;
    let e = &cfg.eval;
    let shape = shape_of(cfg, e.shot, e.mode);
    let n_chunks = e.tasks.div_ceil(EVAL_CHUNK);
    let chunks = par::try_map_range(cfg.execution, n_chunks, |c| -> Result<Vec<TaskScore>> {
        let ids: Vec<u64> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(e.tasks))
            .map(|i| task_seed(cfg.seed, "eval-task", i as u64))
            .collect();
        let episodes = ids
            .iter()
            .map(|&s| dist.sample(&shape, s))
            .collect::<Result<Vec<_>>>()?;
        let (routes, models): (Vec<usize>, Vec<&NeuralProcess>) = match pred {
            Predictor::Single(m) => (vec![0; episodes.len()], vec![m]),
            Predictor::Routed {
                embedder,
                clusters,
                models,
            } => {
                if models.len() != clusters.k {
                    return Err(Error::MissingCheckpoint(format!(
                        "{} per-cluster models for {} clusters",
                        models.len(),
                        clusters.k
                    )));
                }
                let emb = embedder.embed_context(&observed_batch(&episodes)?)?;
                let routes = emb.iter().map(|v| clusters.route(v)).collect::<Result<Vec<_>>>()?;
                (routes, models.iter().collect())
            }
        };
        let mut out: Vec<Option<TaskScore>> = vec![None; episodes.len()];
        for (k, model) in models.iter().enumerate() {
            let members: Vec<usize> = (0..episodes.len()).filter(|&i| routes[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let group: Vec<Episode> = members.iter().map(|&i| episodes[i].clone()).collect();
            let batch = observed_batch(&group)?;
            let mut rng = Rng::derived(cfg.seed, "eval-mc", (c * 1024 + k) as u64);
            let p = model.predict(&batch, e.samples, &mut rng)?;
            for (row, &i) in members.iter().enumerate() {
                let mut s = score_task(&p, row, &episodes[i])?;
                s.cluster = k;
                out[i] = Some(s);
            }
        }
        out.into_iter()
            .map(|s| s.ok_or_else(|| Error::contract("unscored task")))
            .collect()
    })?;
    let scores: Vec<TaskScore> = chunks.into_iter().flatten().collect();
    let metric = if pred.regression() { Metric::Mse } else { Metric::Accuracy };
    let report = EvalReport::from_scores(pred.kind_name(), metric, e.shot, e.samples, &scores);
    Ok((report, scores))
}

pub fn write_task_scores(path: &std::path::Path, scores: &[TaskScore]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "task_id,family,cluster,score,nll_mc,nll_mean_pred")?;
    for s in scores {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.task_id, s.family, s.cluster, s.score, s.nll_mc, s.nll_mean_pred
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Embeds the context of `cfg.cluster.catalog_tasks` meta-train tasks.
pub fn build_catalog(model: &NeuralProcess, cfg: &RunConfig) -> Result<LatentCatalog> {
    let dist = cfg.data.distribution()?;
    let shape = shape_of(cfg, cfg.cluster.catalog_shot, cfg.data.mode);
    let n = cfg.cluster.catalog_tasks;
    let n_chunks = n.div_ceil(EVAL_CHUNK);
    let rows = par::try_map_range(cfg.execution, n_chunks, |c| -> Result<Vec<CatalogRow>> {
        let seeds: Vec<u64> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n))
            .map(|i| task_seed(cfg.seed, "catalog", i as u64))
            .collect();
        let episodes = sample_all(Execution::Sequential, &dist, &shape, &seeds)?;
        let emb = model.embed_context(&observed_batch(&episodes)?)?;
        Ok(episodes
            .iter()
            .zip(emb)
            .map(|(e, mu)| CatalogRow {
                task_id: e.task_seed,
                family: e.family(),
                mu,
            })
            .collect())
    })?;
    LatentCatalog::new(rows.into_iter().flatten().collect())
}

fn write_config(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    std::fs::write(dir.config(), cfg.to_json()?)?;
    Ok(())
}

fn finish(outcome: &TrainOutcome, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
    outcome.model.save(&dir.join("checkpoint.json"))?;
    if let Some(msg) = &outcome.diverged {
        return Err(Error::Numerical(msg.clone()));
    }
    Ok(())
}

/// Trains one (A)NP-family model on the configured distribution.
pub fn run_train_single(cfg: &RunConfig, dir: &RunDir) -> Result<TrainOutcome> {
    if cfg.model.kind == ModelKind::Maha {
        return Err(Error::Config("MAHA is trained through pretrain, cluster and train".into()));
    }
    write_config(cfg, dir)?;
    let spec = TrainSpec {
        cfg,
        kind: cfg.model.kind,
        source: EpisodeSource::Fresh(cfg.data.distribution()?),
        objective: Objective::Anp,
        steps_max: cfg.train.steps_max,
        stream: "train".into(),
        init_seed: cfg.seed,
    };
    let outcome = train(&spec)?;
    finish(&outcome, dir.root())?;
    Ok(outcome)
}

/// Pre-task training followed by embedding of the catalog tasks.
pub fn run_pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<(TrainOutcome, LatentCatalog)> {
    if cfg.model.kind != ModelKind::Maha {
        return Err(Error::Config("pretrain requires model.kind = MAHA".into()));
    }
    write_config(cfg, dir)?;
    let spec = TrainSpec {
        cfg,
        kind: ModelKind::Maha,
        source: EpisodeSource::Fresh(cfg.data.distribution()?),
        objective: Objective::Pre(cfg.pretask),
        steps_max: cfg.train.steps_max,
        stream: "pretrain".into(),
        init_seed: cfg.seed,
    };
    let outcome = train(&spec)?;
    finish(&outcome, dir.root())?;
    let catalog = build_catalog(&outcome.model, cfg)?;
    catalog.write_csv(&dir.embeddings())?;
    Ok((outcome, catalog))
}

/// Chooses `k` and writes `clusters.json`.
pub fn cluster_catalog(cfg: &RunConfig, catalog: &LatentCatalog) -> Result<ClusterModel> {
    let c = &cfg.cluster;
    let hi = c.k_max.min(catalog.len());
    let lo = c.k_min.min(hi);
    let sel = match c.selection {
        Selection::Purity => select_k(catalog, lo..=hi, c.linkage)?,
        Selection::Silhouette => select_k_silhouette(catalog, lo..=hi, c.linkage)?,
    };
    let k = if c.k > 0 { c.k.min(catalog.len()) } else { sel.k };
    let assignments = Dendrogram::build(&catalog.vectors(), c.linkage)?.cut(k)?;
    let families = cfg.data.distribution()?.families();
    ClusterModel::from_assignments(catalog, &assignments, &families, c.linkage, sel.scores)
}

pub fn run_cluster(cfg: &RunConfig, dir: &RunDir) -> Result<ClusterModel> {
    dir.require(&dir.embeddings(), "embeddings.csv (run pretrain first)")?;
    write_config(cfg, dir)?;
    let catalog = LatentCatalog::read_csv(&dir.embeddings())?;
    let model = cluster_catalog(cfg, &catalog)?;
    model.save(&dir.clusters())?;
    Ok(model)
}

/// Training spec of cluster `c` out of `clusters.k`. A single cluster trains
/// exactly like a standalone FELD run.
pub fn cluster_spec<'a>(cfg: &'a RunConfig, clusters: &ClusterModel, c: usize) -> Result<TrainSpec<'a>> {
    let dist = cfg.data.distribution()?;
    let single = clusters.k == 1;
    let source = match cfg.cluster.sampling {
        _ if single => EpisodeSource::Fresh(dist),
        StageTwoSampling::Ratio => EpisodeSource::Fresh(dist.with_family_weights(&clusters.sampling_weights[c])?),
        StageTwoSampling::Members => EpisodeSource::Members {
            dist,
            seeds: clusters.members(c),
        },
    };
    Ok(TrainSpec {
        cfg,
        kind: ModelKind::Feld,
        source,
        objective: Objective::Anp,
        steps_max: cfg.train.cluster_steps_max,
        stream: if single { "train".into() } else { format!("cluster{c}") },
        init_seed: if single { cfg.seed } else { task_seed(cfg.seed, "cluster-init", c as u64) },
    })
}

/// Trains one fresh FELD per cluster.
pub fn run_train_clustered(cfg: &RunConfig, dir: &RunDir) -> Result<(ClusterModel, Vec<TrainOutcome>)> {
    dir.require(&dir.clusters(), "clusters.json (run cluster first)")?;
    write_config(cfg, dir)?;
    let mut clusters = ClusterModel::load(&dir.clusters())?;
    let outcomes = par::try_map_range(cfg.execution, clusters.k, |c| -> Result<TrainOutcome> {
        let spec = cluster_spec(cfg, &clusters, c)?;
        let outcome = train(&spec)?;
        finish(&outcome, &dir.cluster_dir(c))?;
        Ok(outcome)
    })?;
    clusters.checkpoints = (0..clusters.k).map(RunDir::cluster_checkpoint_rel).collect();
    clusters.save(&dir.clusters())?;
    Ok((clusters, outcomes))
}

/// Loads whatever the configured model kind needs and evaluates it.
pub fn run_eval(cfg: &RunConfig, dir: &RunDir) -> Result<EvalReport> {
    dir.require(&dir.checkpoint(), "checkpoint")?;
    let (report, scores) = if cfg.model.kind == ModelKind::Maha {
        dir.require(&dir.clusters(), "clusters.json")?;
        let embedder = NeuralProcess::load(&dir.checkpoint())?;
        let clusters = ClusterModel::load(&dir.clusters())?;
        let models = (0..clusters.k)
            .map(|c| {
                let path = dir.root().join(RunDir::cluster_checkpoint_rel(c));
                dir.require(&path, "checkpoint")?;
                NeuralProcess::load(&path)
            })
            .collect::<Result<Vec<_>>>()?;
        evaluate(
            Predictor::Routed {
                embedder: &embedder,
                clusters: &clusters,
                models: &models,
            },
            cfg,
        )?
    } else {
        let model = NeuralProcess::load(&dir.checkpoint())?;
        evaluate(Predictor::Single(&model), cfg)?
    };
    std::fs::write(dir.eval_report(), serde_json::to_string_pretty(&report)?)?;
    write_task_scores(&dir.per_task_scores(), &scores)?;
    Ok(report)
}
