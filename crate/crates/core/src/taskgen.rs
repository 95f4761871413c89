//! Reproducible task samplers.
//!
//! Every episode is a pure function of its sampler configuration and a
//! 64-bit `task_seed`. The hidden family label and the target outputs are
//! private to [`Episode`]: models receive a [`TaskView`] (or a
//! [`LabeledView`] during training) which never carries the family.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hidden task family, used only for purity scoring and skewed sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "GP")]
    Gp,
    Sine,
    Line,
    Quad,
    Cubic,
    /// Region `k` of the blob pool used for classification.
    Blob(u8),
}

impl Family {
    pub const POLY: [Family; 4] = [Family::Sine, Family::Line, Family::Quad, Family::Cubic];

    /// Dense index used for per-family tables.
    pub fn index(&self) -> usize {
        match self {
            Family::Gp => 0,
            Family::Sine => 0,
            Family::Line => 1,
            Family::Quad => 2,
            Family::Cubic => 3,
            Family::Blob(k) => *k as usize,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Family::Gp => "GP".into(),
            Family::Sine => "Sine".into(),
            Family::Line => "Line".into(),
            Family::Quad => "Quad".into(),
            Family::Cubic => "Cubic".into(),
            Family::Blob(k) => format!("Blob{}", (b'A' + k) as char),
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "GP" => Some(Family::Gp),
            "Sine" => Some(Family::Sine),
            "Line" => Some(Family::Line),
            "Quad" => Some(Family::Quad),
            "Cubic" => Some(Family::Cubic),
            _ => {
                let rest = s.strip_prefix("Blob")?;
                let c = rest.bytes().next()?;
                (rest.len() == 1 && c.is_ascii_uppercase()).then(|| Family::Blob(c - b'A'))
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Coefficients of one heterogeneous regression task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FamilyCoeffs {
    /// `a·sin(b·x) + c`
    Sine { a: f64, b: f64, c: f64 },
    /// `a·x + b`
    Line { a: f64, b: f64 },
    /// `a·x² + b·x + c`
    Quad { a: f64, b: f64, c: f64 },
    /// `a·x³ + b·x² + c·x + d`
    Cubic { a: f64, b: f64, c: f64, d: f64 },
}

impl FamilyCoeffs {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            FamilyCoeffs::Sine { a, b, c } => a * (b * x).sin() + c,
            FamilyCoeffs::Line { a, b } => a * x + b,
            FamilyCoeffs::Quad { a, b, c } => (a * x + b) * x + c,
            FamilyCoeffs::Cubic { a, b, c, d } => ((a * x + b) * x + c) * x + d,
        }
    }

    pub fn family(&self) -> Family {
        match self {
            FamilyCoeffs::Sine { .. } => Family::Sine,
            FamilyCoeffs::Line { .. } => Family::Line,
            FamilyCoeffs::Quad { .. } => Family::Quad,
            FamilyCoeffs::Cubic { .. } => Family::Cubic,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match *self {
            FamilyCoeffs::Sine { a, b, c } => vec![a, b, c],
            FamilyCoeffs::Line { a, b } => vec![a, b],
            FamilyCoeffs::Quad { a, b, c } => vec![a, b, c],
            FamilyCoeffs::Cubic { a, b, c, d } => vec![a, b, c, d],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub sigma: f64,
    pub length: f64,
    pub noise: f64,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            length: 1.0,
            noise: 0.02,
        }
    }
}

impl GpParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.length > 0.0 && self.noise >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid GP parameters {self:?}")))
        }
    }

    /// Squared exponential kernel.
    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        self.sigma * self.sigma * (-0.5 * d * d / (self.length * self.length)).exp()
    }
}

/// Coefficient intervals for the sine/line/quad/cubic family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyIntervals {
    pub sine: [(f64, f64); 3],
    pub line: [(f64, f64); 2],
    pub quad: [(f64, f64); 3],
    pub cubic: [(f64, f64); 4],
}

impl Default for PolyIntervals {
    fn default() -> Self {
        Self {
            sine: [(0.1, 5.0), (0.8, 1.2), (0.0, PI)],
            line: [(-3.0, 3.0), (-3.0, 3.0)],
            quad: [(-0.2, 0.2), (-2.0, 2.0), (-3.0, 3.0)],
            cubic: [(-0.1, 0.1), (-0.2, 0.2), (-2.0, 2.0), (-3.0, 3.0)],
        }
    }
}

impl PolyIntervals {
    pub fn sample(&self, family: Family, rng: &mut Rng) -> Result<FamilyCoeffs> {
        let mut u = |(lo, hi): (f64, f64)| rng.uniform(lo, hi);
        Ok(match family {
            Family::Sine => FamilyCoeffs::Sine {
                a: u(self.sine[0]),
                b: u(self.sine[1]),
                c: u(self.sine[2]),
            },
            Family::Line => FamilyCoeffs::Line {
                a: u(self.line[0]),
                b: u(self.line[1]),
            },
            Family::Quad => FamilyCoeffs::Quad {
                a: u(self.quad[0]),
                b: u(self.quad[1]),
                c: u(self.quad[2]),
            },
            Family::Cubic => FamilyCoeffs::Cubic {
                a: u(self.cubic[0]),
                b: u(self.cubic[1]),
                c: u(self.cubic[2]),
                d: u(self.cubic[3]),
            },
            other => return Err(Error::contract(format!("{other} is not a polynomial family"))),
        })
    }

    pub fn intervals_of(&self, family: Family) -> &[(f64, f64)] {
        match family {
            Family::Sine => &self.sine,
            Family::Line => &self.line,
            Family::Quad => &self.quad,
            _ => &self.cubic,
        }
    }
}

/// Synthetic N-way K-shot pool: `regions` well separated regions of input
/// space, each holding `classes_per_region` Gaussian blob classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobPool {
    pub dim: usize,
    pub regions: usize,
    pub classes_per_region: usize,
    /// Distance of each region center from the origin, in units of the
    /// per-coordinate spread of a point around its region center.
    pub separation: f64,
    pub class_spread: f64,
    pub point_noise: f64,
    pub pool_seed: u64,
}

impl Default for BlobPool {
    fn default() -> Self {
        Self {
            dim: 8,
            regions: 4,
            classes_per_region: 16,
            separation: 10.0,
            class_spread: 1.0,
            point_noise: 0.5,
            pool_seed: 0x5eed,
        }
    }
}

impl BlobPool {
    /// Per-coordinate standard deviation of a point around its region center.
    pub fn region_sigma(&self) -> f64 {
        (self.class_spread.powi(2) + self.point_noise.powi(2)).sqrt()
    }

    pub fn region_center(&self, region: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        let radius = self.separation * self.region_sigma();
        // Alternate signs along the axes so any number of regions stays separated.
        let axis = region % self.dim;
        let sign = if (region / self.dim).is_multiple_of(2) { 1.0 } else { -1.0 };
        c[axis] = sign * radius;
        c
    }

    pub fn class_centroid(&self, region: usize, class: usize) -> Vec<f64> {
        let mut rng = Rng::derived(self.pool_seed, "blob-class", (region * 100_003 + class) as u64);
        self.region_center(region)
            .into_iter()
            .map(|c| c + self.class_spread * rng.normal())
            .collect()
    }
}

/// How the context set is placed inside the target domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Interpolate,
    Extrapolate,
}

/// Fraction of the domain that confines the context in extrapolation.
pub const EXTRAPOLATION_WINDOW: f64 = 0.4;

/// Task distribution of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskDistribution {
    Gp {
        params: GpParams,
        domain: (f64, f64),
    },
    Poly {
        weights: [f64; 4],
        intervals: PolyIntervals,
        domain: (f64, f64),
        noise: f64,
    },
    Classification {
        pool: BlobPool,
        region_weights: Vec<f64>,
    },
}

/// Sizes of one episode. For classification the shot counts are per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub context: usize,
    pub target: usize,
    pub way: usize,
    pub mode: SplitMode,
}

/// One task instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task_seed: u64,
    pub way: usize,
    pub shots_context: usize,
    pub shots_target: usize,
    pub context_x: Tensor,
    pub context_y: Tensor,
    pub target_x: Tensor,
    target_y: Tensor,
    family: Family,
    coeffs: Option<FamilyCoeffs>,
}

/// What a model may see at prediction time.
#[derive(Clone, Copy, Debug)]
pub struct TaskView<'a> {
    pub context_x: &'a Tensor,
    pub context_y: &'a Tensor,
    pub target_x: &'a Tensor,
    pub way: usize,
}

/// What a model may see during training.
#[derive(Clone, Copy, Debug)]
pub struct LabeledView<'a> {
    pub task: TaskView<'a>,
    pub target_y: &'a Tensor,
}

impl Episode {
    pub fn view(&self) -> TaskView<'_> {
        TaskView {
            context_x: &self.context_x,
            context_y: &self.context_y,
            target_x: &self.target_x,
            way: self.way,
        }
    }

    pub fn labeled(&self) -> LabeledView<'_> {
        LabeledView {
            task: self.view(),
            target_y: &self.target_y,
        }
    }

    /// Target outputs, for scoring.
    pub fn target_y(&self) -> &Tensor {
        &self.target_y
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn coeffs(&self) -> Option<&FamilyCoeffs> {
        self.coeffs.as_ref()
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.family, Family::Blob(_))
    }

    pub fn to_record(&self) -> EpisodeRecord {
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            let w = t.shape().get(1).copied().unwrap_or(1).max(1);
            t.data().chunks(w).map(|c| c.to_vec()).collect()
        };
        EpisodeRecord {
            task_seed: self.task_seed,
            family: self.family.name(),
            way: self.way,
            cx: rows(&self.context_x),
            cy: rows(&self.context_y),
            tx: rows(&self.target_x),
            ty: rows(&self.target_y),
        }
    }
}

/// JSON-lines representation of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_seed: u64,
    pub family: String,
    pub way: usize,
    pub cx: Vec<Vec<f64>>,
    pub cy: Vec<Vec<f64>>,
    pub tx: Vec<Vec<f64>>,
    pub ty: Vec<Vec<f64>>,
}

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut out, &e.to_record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn column(values: &[f64]) -> Tensor {
    Tensor::from_parts(vec![values.len(), 1], values.to_vec())
}

fn gather(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

/// Chooses context indices among `xs`.
///
/// Interpolation draws a uniform subset. Extrapolation picks, uniformly at
/// random, one of the windows of width `0.4·(hi - lo)` starting at a point of
/// `xs` that contains at least `n_context` points, and draws the subset inside
/// it. Targets are always the full point set.
pub fn split_context_target(
    xs: &[f64],
    n_context: usize,
    mode: SplitMode,
    domain: (f64, f64),
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if n_context == 0 {
        return Err(Error::contract("context must hold at least one point"));
    }
    if n_context > xs.len() {
        return Err(Error::contract(format!(
            "{n_context} context points requested from {} points",
            xs.len()
        )));
    }
    match mode {
        SplitMode::Interpolate => Ok(rng.choose(xs.len(), n_context)),
        SplitMode::Extrapolate => {
            let width = EXTRAPOLATION_WINDOW * (domain.1 - domain.0);
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
            let windows: Vec<(usize, usize)> = (0..order.len())
                .filter_map(|s| {
                    let end = order[s..]
                        .iter()
                        .take_while(|&&i| xs[i] - xs[order[s]] <= width)
                        .count();
                    (end >= n_context).then_some((s, end))
                })
                .collect();
            if windows.is_empty() {
                return Err(Error::contract(format!(
                    "no window of width {width} holds {n_context} points"
                )));
            }
            let (s, len) = windows[rng.below(windows.len())];
            let members = &order[s..s + len];
            Ok(rng.choose(len, n_context).into_iter().map(|j| members[j]).collect())
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

const MAX_GP_ATTEMPTS: u64 = 8;

impl TaskDistribution {
    pub fn default_gp() -> Self {
        TaskDistribution::Gp {
            params: GpParams::default(),
            domain: (-2.0, 2.0),
        }
    }

    pub fn default_poly() -> Self {
        TaskDistribution::Poly {
            weights: [0.25; 4],
            intervals: PolyIntervals::default(),
            domain: (-5.0, 5.0),
            noise: 0.0,
        }
    }

    pub fn default_classification() -> Self {
        let pool = BlobPool::default();
        let n = pool.regions;
        TaskDistribution::Classification {
            pool,
            region_weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskDistribution::Classification { .. })
    }

    pub fn domain(&self) -> Option<(f64, f64)> {
        match self {
            TaskDistribution::Gp { domain, .. } | TaskDistribution::Poly { domain, .. } => Some(*domain),
            TaskDistribution::Classification { .. } => None,
        }
    }

    /// Families this distribution can emit, in index order.
    pub fn families(&self) -> Vec<Family> {
        match self {
            TaskDistribution::Gp { .. } => vec![Family::Gp],
            TaskDistribution::Poly { .. } => Family::POLY.to_vec(),
            TaskDistribution::Classification { pool, .. } => {
                (0..pool.regions).map(|k| Family::Blob(k as u8)).collect()
            }
        }
    }

    /// Family mixing weights.
    pub fn family_weights(&self) -> Vec<f64> {
        match self {
            TaskDistribution::Gp { .. } => vec![1.0],
            TaskDistribution::Poly { weights, .. } => weights.to_vec(),
            TaskDistribution::Classification { region_weights, .. } => region_weights.clone(),
        }
    }

    /// Same distribution with the family mixing weights replaced.
    pub fn with_family_weights(&self, w: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        match &mut out {
            TaskDistribution::Gp { .. } => {}
            TaskDistribution::Poly { weights, .. } => {
                if w.len() != 4 {
                    return Err(Error::contract("poly family weights need 4 entries"));
                }
                weights.copy_from_slice(w);
            }
            TaskDistribution::Classification { region_weights, .. } => {
                if w.len() != region_weights.len() {
                    return Err(Error::contract("region weight count mismatch"));
                }
                region_weights.copy_from_slice(w);
            }
        }
        Ok(out)
    }

    pub fn sample(&self, shape: &EpisodeShape, task_seed: u64) -> Result<Episode> {
        match self {
            TaskDistribution::Gp { params, domain } => {
                sample_gp_episode(params, *domain, shape, task_seed)
            }
            TaskDistribution::Poly {
                weights,
                intervals,
                domain,
                noise,
            } => sample_poly_episode(weights, intervals, *domain, *noise, shape, task_seed),
            TaskDistribution::Classification {
                pool,
                region_weights,
            } => sample_classification_episode(pool, region_weights, shape, task_seed),
        }
    }
}

/// Draws `n` inputs; in extrapolation the first `k` are confined to a random
/// window so a valid context always exists.
fn draw_inputs(domain: (f64, f64), n: usize, k: usize, mode: SplitMode, rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = domain;
    match mode {
        SplitMode::Interpolate => (0..n).map(|_| rng.uniform(lo, hi)).collect(),
        SplitMode::Extrapolate => {
            let w = EXTRAPOLATION_WINDOW * (hi - lo);
            let a = rng.uniform(lo, hi - w);
            let mut xs: Vec<f64> = (0..k).map(|_| rng.uniform(a, a + w)).collect();
            xs.extend((k..n).map(|_| rng.uniform(lo, hi)));
            xs
        }
    }
}

fn regression_episode(
    xs: Vec<f64>,
    ys: Vec<f64>,
    shape: &EpisodeShape,
    domain: (f64, f64),
    family: Family,
    coeffs: Option<FamilyCoeffs>,
    task_seed: u64,
    rng: &mut Rng,
) -> Result<Episode> {
    let ctx = split_context_target(&xs, shape.context, shape.mode, domain, rng)?;
    Ok(Episode {
        task_seed,
        way: 1,
        shots_context: shape.context,
        shots_target: xs.len(),
        context_x: column(&gather(&xs, &ctx)),
        context_y: column(&gather(&ys, &ctx)),
        target_x: column(&xs),
        target_y: column(&ys),
        family,
        coeffs,
    })
}

fn check_regression_shape(shape: &EpisodeShape) -> Result<()> {
    if shape.target < 2 || shape.context == 0 || shape.context > shape.target {
        return Err(Error::contract(format!(
            "regression episode needs 1 <= context <= target and target >= 2, got {shape:?}"
        )));
    }
    Ok(())
}

/// Noisy draw of a GP function at `xs`. `None` when the Gram matrix stays
/// indefinite after the largest jitter.
pub fn sample_gp_function(params: &GpParams, xs: &[f64], rng: &mut Rng) -> Option<Vec<f64>> {
    let n = xs.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = params.kernel(xs[i], xs[j]);
        }
    }
    let mut jitter = 1e-9 * params.sigma * params.sigma;
    let l = loop {
        if jitter > 1e-3 * params.sigma * params.sigma {
            return None;
        }
        let mut a = gram.clone();
        for i in 0..n {
            a[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&a, n) {
            break l;
        }
        jitter *= 10.0;
    };
    let eps = rng.normals(n);
    Some(
        (0..n)
            .map(|i| {
                let f: f64 = (0..=i).map(|k| l[i * n + k] * eps[k]).sum();
                f + params.noise * rng.normal()
            })
            .collect(),
    )
}

/// GP episode: `y ~ N(0, K + noise²·I)` on uniform inputs.
pub fn sample_gp_episode(params: &GpParams, domain: (f64, f64), shape: &EpisodeShape, task_seed: u64) -> Result<Episode> {
    params.validate()?;
    check_regression_shape(shape)?;
    let n = shape.target;
    for attempt in 0..MAX_GP_ATTEMPTS {
        let mut rng = Rng::derived(task_seed, "gp-episode", attempt);
        let xs = draw_inputs(domain, n, shape.context, shape.mode, &mut rng);
        let Some(ys) = sample_gp_function(params, &xs, &mut rng) else {
            log::warn!("GP Cholesky failed for task {task_seed} (attempt {attempt}); regenerating");
            continue;
        };
        return regression_episode(xs, ys, shape, domain, Family::Gp, None, task_seed, &mut rng);
    }
    Err(Error::Numerical(format!(
        "GP sampling failed {MAX_GP_ATTEMPTS} times for task {task_seed}"
    )))
}

/// Heterogeneous regression episode from the sine/line/quad/cubic family.
pub fn sample_poly_episode(
    weights: &[f64; 4],
    intervals: &PolyIntervals,
    domain: (f64, f64),
    noise: f64,
    shape: &EpisodeShape,
    task_seed: u64,
) -> Result<Episode> {
    check_regression_shape(shape)?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config(format!("family weights {weights:?} must be non-negative and sum to 1")));
    }
    let mut rng = Rng::derived(task_seed, "poly-episode", 0);
    let family = Family::POLY[rng.categorical(weights)];
    let coeffs = intervals.sample(family, &mut rng)?;
    let xs = draw_inputs(domain, shape.target, shape.context, shape.mode, &mut rng);
    let ys = xs
        .iter()
        .map(|&x| coeffs.eval(x) + if noise > 0.0 { noise * rng.normal() } else { 0.0 })
        .collect();
    regression_episode(xs, ys, shape, domain, family, Some(coeffs), task_seed, &mut rng)
}

/// N-way K-shot episode. Context and target are grouped by label (label 0
/// first); the target holds the context points of each class followed by
/// `target - context` fresh query points. Labels are a fresh permutation of
/// the drawn classes.
pub fn sample_classification_episode(
    pool: &BlobPool,
    region_weights: &[f64],
    shape: &EpisodeShape,
    task_seed: u64,
) -> Result<Episode> {
    if shape.way < 2 || shape.context == 0 || shape.target < shape.context {
        return Err(Error::contract(format!("invalid classification shape {shape:?}")));
    }
    if shape.way > pool.classes_per_region {
        return Err(Error::contract("way exceeds classes per region"));
    }
    let mut rng = Rng::derived(task_seed, "cls-episode", 0);
    let region = rng.categorical(region_weights);
    let classes = rng.choose(pool.classes_per_region, shape.way);
    let labels = rng.permutation(shape.way);
    classification_episode_from(pool, region, &classes, &labels, shape, task_seed, task_seed)
}

/// Builds a classification episode from explicit choices: `classes[i]`
/// receives label `labels[i]`. Points depend only on `(point_seed, class)`,
/// so two calls differing only in `labels` see identical inputs.
pub fn classification_episode_from(
    pool: &BlobPool,
    region: usize,
    classes: &[usize],
    labels: &[usize],
    shape: &EpisodeShape,
    point_seed: u64,
    task_seed: u64,
) -> Result<Episode> {
    let way = classes.len();
    if labels.len() != way || region >= pool.regions {
        return Err(Error::contract("classes, labels and region disagree"));
    }
    let mut class_of_label = vec![usize::MAX; way];
    for (&class, &l) in classes.iter().zip(labels) {
        if l >= way || class_of_label[l] != usize::MAX {
            return Err(Error::contract("labels must be a permutation of 0..way"));
        }
        class_of_label[l] = class;
    }
    let (mut cx, mut cy, mut tx, mut ty) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, &class) in class_of_label.iter().enumerate() {
        let centroid = pool.class_centroid(region, class);
        let mut point_rng = Rng::derived(point_seed, "class-points", class as u64);
        for s in 0..shape.target {
            let p: Vec<f64> = centroid
                .iter()
                .map(|c| c + pool.point_noise * point_rng.normal())
                .collect();
            if s < shape.context {
                cx.extend_from_slice(&p);
                cy.push(label as f64);
            }
            tx.extend_from_slice(&p);
            ty.push(label as f64);
        }
    }
    let d = pool.dim;
    Ok(Episode {
        task_seed,
        way,
        shots_context: shape.context,
        shots_target: shape.target,
        context_x: Tensor::from_parts(vec![cy.len(), d], cx),
        context_y: column(&cy),
        target_x: Tensor::from_parts(vec![ty.len(), d], tx),
        target_y: column(&ty),
        family: Family::Blob(region as u8),
        coeffs: None,
    })
}
