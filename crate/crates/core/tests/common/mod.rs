//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use maha::tensor::{Bound, ParamStore};
use maha::{Graph, Result, Rng, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// Worst mismatch between an analytic and a central-difference gradient.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn compare(&mut self, what: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if diff > ABS_TOL {
            self.worst_rel = self.worst_rel.max(rel);
        }
        if diff > ABS_TOL && rel > REL_TOL {
            self.failures.push(format!("{what}: analytic {analytic:e} numeric {numeric:e}"));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
        self.worst_rel = self.worst_rel.max(other.worst_rel);
    }
}

/// Fixed pseudo-random upstream weights so every output element gets a
/// distinct cotangent.
fn weights(n: usize) -> Vec<f64> {
    let mut rng = Rng::new(991, 7);
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn weighted_sum<'g>(out: Var<'g>) -> Var<'g> {
    let w = out.graph().constant(Tensor::new(&out.shape(), weights(out.value().len())).unwrap());
    out.mul(w).unwrap().sum()
}

/// Checks `d Σ w∘f(inputs) / d inputs` for every input element.
pub fn check_op<F>(name: &str, inputs: &[Tensor], f: F) -> GradReport
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vs: Vec<Var<'_>> = xs.iter().map(|x| g.constant(x.clone())).collect();
        weighted_sum(f(&g, &vs).unwrap()).item()
    };
    let g = Graph::new();
    let vs: Vec<Var<'_>> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = weighted_sum(f(&g, &vs).unwrap());
    let grads = g.backward(loss).unwrap();
    let mut report = GradReport::default();
    for (t, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vs[t]);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = x.to_vec();
            d[i] += FD_EPS;
            plus[t] = Tensor::new(x.shape(), d.clone()).unwrap();
            d[i] -= 2.0 * FD_EPS;
            minus[t] = Tensor::new(x.shape(), d).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            report.compare(format!("{name} input {t}[{i}]"), analytic.data()[i], numeric);
        }
    }
    report
}

/// Checks the gradient of a scalar loss with respect to model parameters,
/// sampling up to `per_param` entries of every tensor.
pub fn check_params<F>(name: &str, store: &ParamStore, per_param: usize, loss: F) -> GradReport
where
    F: for<'g> Fn(&Bound<'g>) -> Result<Var<'g>>,
{
    let value = |s: &ParamStore| -> f64 {
        let g = Graph::new();
        let p = g.bind_frozen(s);
        loss(&p).unwrap().item()
    };
    let g = Graph::new();
    let p = g.bind(store);
    let l = loss(&p).unwrap();
    let grads = g.backward(l).unwrap();
    let analytic = p.gradients(&grads);
    let mut pick = Rng::new(4242, 0);
    let mut report = GradReport::default();
    let ids: Vec<_> = store.iter().map(|prm| store.id_of(&prm.name).unwrap()).collect();
    for (j, id) in ids.into_iter().enumerate() {
        let prm = store.get(id);
        let n = prm.tensor.len();
        let entries: Vec<usize> = if n <= per_param { (0..n).collect() } else { pick.choose(n, per_param) };
        for i in entries {
            let mut s = store.clone();
            let mut d = prm.tensor.to_vec();
            d[i] += FD_EPS;
            s.set(id, Tensor::new(prm.tensor.shape(), d.clone()).unwrap()).unwrap();
            let up = value(&s);
            d[i] -= 2.0 * FD_EPS;
            s.set(id, Tensor::new(prm.tensor.shape(), d).unwrap()).unwrap();
            let down = value(&s);
            let a = analytic[j].as_ref().map_or(0.0, |t| t.data()[i]);
            report.compare(format!("{name} {}[{i}]", prm.name), a, (up - down) / (2.0 * FD_EPS));
        }
    }
    report
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values bounded away from zero (for kinked or singular ops).
pub fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let v = rng.uniform(0.2, 2.0);
                if rng.uniform(0.0, 1.0) < 0.5 { -v } else { v }
            })
            .collect(),
    )
    .unwrap()
}

/// Every differentiable tensor operation on shapes drawn from `seed`.
pub fn op_checks(seed: u64) -> Vec<(String, GradReport)> {
    let mut r = Rng::new(seed, 11);
    let b = 1 + r.below(2);
    let n = 2 + r.below(3);
    let d = 2 + r.below(3);
    let m = 1 + r.below(3);
    let mut out = Vec::new();
    let mut push = |name: &str, rep: GradReport| out.push((name.to_string(), rep));
    let x = random_tensor(&[b, n, d], -1.5, 1.5, &mut r);
    let y = random_tensor(&[b, n, d], -1.5, 1.5, &mut r);
    let row = random_tensor(&[d], -1.0, 1.0, &mut r);
    let col = random_tensor(&[b, n, 1], -1.0, 1.0, &mut r);
    let pos = random_tensor(&[b, n, d], 0.3, 2.0, &mut r);
    let kinked = away_from_zero(&[b, n, d], &mut r);
    let w = random_tensor(&[d, m], -1.0, 1.0, &mut r);
    let wb = random_tensor(&[b, d, m], -1.0, 1.0, &mut r);

    push("add", check_op("add", &[x.clone(), y.clone()], |_, v| v[0].add(v[1])));
    push("add_broadcast", check_op("add_broadcast", &[x.clone(), row.clone()], |_, v| v[0].add(v[1])));
    push("sub_broadcast", check_op("sub_broadcast", &[col.clone(), x.clone()], |_, v| v[0].sub(v[1])));
    push("mul", check_op("mul", &[x.clone(), col.clone()], |_, v| v[0].mul(v[1])));
    push("div", check_op("div", &[x.clone(), pos.clone()], |_, v| v[0].div(v[1])));
    push("neg", check_op("neg", &[x.clone()], |_, v| Ok(v[0].neg())));
    push("scale", check_op("scale", &[x.clone()], |_, v| Ok(v[0].scale(-2.5))));
    push("add_scalar", check_op("add_scalar", &[x.clone()], |_, v| Ok(v[0].add_scalar(0.7))));
    push("exp", check_op("exp", &[x.clone()], |_, v| Ok(v[0].exp())));
    push("ln", check_op("ln", &[pos.clone()], |_, v| Ok(v[0].ln())));
    push("sqrt", check_op("sqrt", &[pos.clone()], |_, v| Ok(v[0].sqrt())));
    push("square", check_op("square", &[x.clone()], |_, v| Ok(v[0].square())));
    push("sigmoid", check_op("sigmoid", &[x.clone()], |_, v| Ok(v[0].sigmoid())));
    push("softplus", check_op("softplus", &[x.clone()], |_, v| Ok(v[0].softplus())));
    push("relu", check_op("relu", &[kinked.clone()], |_, v| Ok(v[0].relu())));
    push("tanh", check_op("tanh", &[x.clone()], |_, v| Ok(v[0].tanh())));
    push("matmul_shared", check_op("matmul_shared", &[x.clone(), w.clone()], |_, v| v[0].matmul(v[1])));
    push("matmul_batched", check_op("matmul_batched", &[x.clone(), wb.clone()], |_, v| v[0].matmul(v[1])));
    push(
        "matmul_broadcast",
        check_op("matmul_broadcast", &[x.clone(), y.clone()], |_, v| {
            v[0].matmul(v[1].transpose()?.narrow(0, 0, 1)?)
        }),
    );
    push("reshape", check_op("reshape", &[x.clone()], |_, v| v[0].reshape(&[b * n, d])?.square().reshape(&[b, n * d])));
    push("permute", check_op("permute", &[x.clone()], |_, v| Ok(v[0].permute(&[2, 0, 1])?.exp())));
    push("transpose", check_op("transpose", &[x.clone()], |_, v| Ok(v[0].transpose()?.square())));
    push("concat", check_op("concat", &[x.clone(), col.clone()], |_, v| Ok(Var::concat(&[v[0], v[1]], 2)?.square())));
    push("narrow", check_op("narrow", &[x.clone()], |_, v| Ok(v[0].narrow(2, 1, d - 1)?.exp())));
    push(
        "index_select",
        check_op("index_select", &[x.clone()], |_, v| Ok(v[0].index_select(1, &[n - 1, 0, n - 1])?.square())),
    );
    push(
        "broadcast_to",
        check_op("broadcast_to", &[col.clone()], |_, v| Ok(v[0].broadcast_to(&[b, n, d])?.square())),
    );
    push("sum", check_op("sum", &[x.clone()], |_, v| Ok(v[0].square().sum())));
    push("mean", check_op("mean", &[x.clone()], |_, v| Ok(v[0].square().mean())));
    push("sum_over", check_op("sum_over", &[x.clone()], |_, v| Ok(v[0].sum_over(1, false)?.square())));
    push("mean_over", check_op("mean_over", &[x.clone()], |_, v| Ok(v[0].mean_over(0, true)?.square())));
    push("softmax", check_op("softmax", &[x.clone()], |_, v| v[0].softmax(2)));
    push("softmax_mid_axis", check_op("softmax_mid_axis", &[x.clone()], |_, v| v[0].softmax(1)));
    push("log_softmax", check_op("log_softmax", &[x.clone()], |_, v| v[0].log_softmax(2)));
    push("normalize_last", check_op("normalize_last", &[x.clone()], |_, v| Ok(v[0].normalize_last(1e-5))));
    push(
        "layer_norm",
        check_op("layer_norm", &[x.clone(), row.clone(), row.clone()], |_, v| {
            v[0].layer_norm(Some(v[1]), Some(v[2]), 1e-5)
        }),
    );
    push(
        "kl_divergence",
        check_op("kl_divergence", &[x.clone(), y.clone(), pos.clone(), col.clone()], |_, v| {
            use maha::variational::{kl_divergence, GaussianVar, VarianceTransform::BoundedSigmoid};
            let q = GaussianVar::new(v[0], v[2], BoundedSigmoid)?;
            let p = GaussianVar::new(v[1], v[3].broadcast_to(&[b, n, d])?, BoundedSigmoid)?;
            kl_divergence(&q, &p)
        }),
    );
    push(
        "gaussian_nll",
        check_op("gaussian_nll", &[x.clone(), y.clone(), pos.clone()], |_, v| {
            use maha::variational::{gaussian_nll, GaussianVar, VarianceTransform::BoundedSoftplus};
            gaussian_nll(&GaussianVar::new(v[0], v[1], BoundedSoftplus)?, v[2])
        }),
    );
    let labels: Vec<usize> = (0..b * n).map(|i| i % d).collect();
    push(
        "categorical_nll",
        check_op("categorical_nll", &[x.clone()], move |_, v| maha::variational::categorical_nll(v[0], &labels)),
    );
    push(
        "reparameterize",
        check_op("reparameterize", &[x.clone(), y.clone()], |_, v| {
            use maha::variational::{GaussianVar, VarianceTransform::BoundedSigmoid};
            let mut rng = Rng::new(3, 3);
            Ok(GaussianVar::new(v[0], v[1], BoundedSigmoid)?.reparameterize(&mut rng)?.value)
        }),
    );
    out
}

use maha::encoders::StConfig;
use maha::losses::{loss_anp_terms, loss_pre_terms, LossConfig, PreTaskFlags};
use maha::model::{ArchConfig, Batch, ModelKind, NeuralProcess, TaskKind};
use maha::taskgen::{Episode, EpisodeShape, SplitMode, TaskDistribution};

pub fn tiny_arch(task: TaskKind) -> ArchConfig {
    let classification = task == TaskKind::Classification;
    ArchConfig {
        task,
        x_dim: if classification { 8 } else { 1 },
        y_dim: 1,
        way: if classification { 3 } else { 1 },
        hidden: 8,
        latent: 4,
        depth: 1,
        st: StConfig {
            num_sab_blocks: 1,
            num_heads: 2,
            feature_dim: 8,
            num_inducing: 0,
            pma_seeds: 1,
        },
        ln_affine: true,
        identity_features: false,
    }
}

pub fn episodes(dist: &TaskDistribution, shape: EpisodeShape, n: usize, seed: u64) -> Vec<Episode> {
    (0..n).map(|i| dist.sample(&shape, seed * 1000 + i as u64).unwrap()).collect()
}

pub fn labeled(eps: &[Episode]) -> Batch {
    Batch::labeled(&eps.iter().map(|e| e.labeled()).collect::<Vec<_>>()).unwrap()
}

pub fn regression_shape(context: usize, target: usize) -> EpisodeShape {
    EpisodeShape {
        context,
        target,
        way: 1,
        mode: SplitMode::Interpolate,
    }
}

/// Full-model gradient checks on a 2-task micro-batch.
pub fn model_checks(seed: u64, per_param: usize) -> Vec<(String, GradReport)> {
    let poly = TaskDistribution::default_poly();
    let reg = labeled(&episodes(&poly, regression_shape(3, 6), 2, seed));
    let cls_dist = TaskDistribution::default_classification();
    let cls = labeled(&episodes(
        &cls_dist,
        EpisodeShape {
            context: 2,
            target: 3,
            way: 3,
            mode: SplitMode::Interpolate,
        },
        2,
        seed,
    ));
    let cfg = LossConfig {
        beta1: 0.7,
        beta2: 1.3,
        ..LossConfig::default()
    };
    let mut out = Vec::new();
    let anp_cases = [
        (ModelKind::Cnp, TaskKind::Regression),
        (ModelKind::Np, TaskKind::Regression),
        (ModelKind::Anp, TaskKind::Regression),
        (ModelKind::NpFe, TaskKind::Regression),
        (ModelKind::NpLd, TaskKind::Regression),
        (ModelKind::Feld, TaskKind::Regression),
        (ModelKind::Feld, TaskKind::Classification),
    ];
    for (kind, task) in anp_cases {
        let model = NeuralProcess::new(kind, tiny_arch(task), seed + 1).unwrap();
        let batch = if task == TaskKind::Regression { &reg } else { &cls };
        let name = format!("{kind} {task:?} loss_anp");
        let rep = check_params(&name, &model.store, per_param, |p| {
            let mut rng = Rng::new(seed, 99);
            Ok(loss_anp_terms(&model, p, batch, &cfg, &mut rng, None)?.total)
        });
        out.push((name, rep));
    }
    for task in [TaskKind::Regression, TaskKind::Classification] {
        let model = NeuralProcess::new(ModelKind::Maha, tiny_arch(task), seed + 2).unwrap();
        let batch = if task == TaskKind::Regression { &reg } else { &cls };
        let name = format!("FELD pre-task {task:?} loss_pre");
        let rep = check_params(&name, &model.store, per_param, |p| {
            let mut rng = Rng::new(seed, 98);
            Ok(loss_pre_terms(&model, p, batch, &cfg, PreTaskFlags::default(), &mut rng)?.total)
        });
        out.push((name, rep));
    }
    out
}

use maha::config::RunConfig;

/// Small, fast run configuration; `extra` overrides are applied last.
pub fn tiny_config(extra: &[(&str, &str)]) -> RunConfig {
    let base = [
        ("model.hidden", "8"),
        ("model.latent", "4"),
        ("model.depth", "1"),
        ("model.heads", "2"),
        ("model.sab_blocks", "1"),
        ("data.task", "poly"),
        ("data.target", "12"),
        ("train.batch", "4"),
        ("train.steps_max", "12"),
        ("train.cluster_steps_max", "12"),
        ("train.valid_every", "4"),
        ("train.valid_tasks", "8"),
        ("train.log_every", "1"),
        ("cluster.catalog_tasks", "24"),
        ("eval.tasks", "20"),
        ("eval.samples", "4"),
    ];
    let pairs: Vec<(String, String)> = base
        .iter()
        .chain(extra)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    RunConfig::default().with_overrides(&pairs).unwrap()
}
