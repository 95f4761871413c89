mod common;

use common::tiny_config;
use maha::artifacts::RunDir;
use maha::clustering::{CatalogRow, ClusterModel, LatentCatalog, Linkage};
use maha::model::{ModelKind, NeuralProcess};
use maha::pipeline::{cluster_spec, evaluate, run_eval, run_train_single, train, EpisodeSource, Objective, Predictor, TrainSpec};
use maha::taskgen::{EpisodeShape, Family, SplitMode, TaskDistribution};
use maha::tensor::{Adam, AdamState, ParamStore};
use maha::Tensor;

fn single_spec(cfg: &maha::config::RunConfig) -> TrainSpec<'_> {
    TrainSpec {
        cfg,
        kind: cfg.model.kind,
        source: EpisodeSource::Fresh(cfg.data.distribution().unwrap()),
        objective: Objective::Anp,
        steps_max: cfg.train.steps_max,
        stream: "train".into(),
        init_seed: cfg.seed,
    }
}

#[test]
fn family_weights_drive_sampling_frequencies() {
    let dist = TaskDistribution::default_poly().with_family_weights(&[0.9, 0.1, 0.0, 0.0]).unwrap();
    let shape = EpisodeShape {
        context: 2,
        target: 4,
        way: 1,
        mode: SplitMode::Interpolate,
    };
    let n = 4000;
    let mut counts = [0usize; 4];
    for seed in 0..n {
        counts[dist.sample(&shape, seed).unwrap().family().index()] += 1;
    }
    let p = counts[0] as f64 / n as f64;
    // Binomial(n, 0.9): three standard deviations.
    let sd = (0.9 * 0.1 / n as f64).sqrt();
    assert!((p - 0.9).abs() < 3.0 * sd, "{counts:?}");
    assert_eq!(counts[2] + counts[3], 0);
    assert_eq!(Family::POLY[0].index(), 0);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
    let g = [0.3, -40.0, 1e-3];
    let adam = Adam::with_lr(0.01);
    let mut state = AdamState::new(&store);
    adam.step(&mut store, &[Some(Tensor::vector(g.to_vec()))], &mut state).unwrap();
    // Bias correction makes m̂ = g and v̂ = g², so the step is lr·g/(|g|+eps).
    let expected: Vec<f64> = [1.0, -2.0, 0.5]
        .iter()
        .zip(g)
        .map(|(x, gi)| x - 0.01 * gi / (gi.abs() + 1e-8))
        .collect();
    for (a, b) in store.get(id).tensor.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(state.steps(), 1);
}

#[test]
fn zero_steps_return_the_initial_parameters() {
    let cfg = tiny_config(&[("train.steps_max", "0")]);
    let out = train(&single_spec(&cfg)).unwrap();
    let init = NeuralProcess::new(cfg.model.kind, cfg.arch(), cfg.seed).unwrap();
    assert_eq!(out.model.store, init.store);
    assert_eq!((out.steps_run, out.best_step), (0, 0));
}

#[test]
fn stalled_validation_stops_early_and_keeps_the_best_round() {
    let mut cfg = tiny_config(&[("train.patience", "1"), ("train.steps_max", "40")]);
    // A frozen optimiser can never improve on the initial round.
    cfg.train.lr = 0.0;
    let out = train(&single_spec(&cfg)).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.steps_run, cfg.train.valid_every);
    assert_eq!(out.best_step, 0);
    assert_eq!(out.validation.len(), 2);
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = tiny_config(&[("model.kind", "NP")]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        run_train_single(&cfg, &RunDir::create(d.path()).unwrap()).unwrap();
    }
    for f in ["metrics.csv", "checkpoint.json", "config.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn single_cluster_is_exactly_a_feld_run() {
    let feld_cfg = tiny_config(&[("model.kind", "FELD")]);
    let maha_cfg = tiny_config(&[("model.kind", "MAHA")]);
    let feld = train(&single_spec(&feld_cfg)).unwrap();

    let rows = (0..6)
        .map(|i| CatalogRow {
            task_id: i,
            family: Family::POLY[i as usize % 4],
            mu: vec![i as f64, 0.0],
        })
        .collect();
    let catalog = LatentCatalog::new(rows).unwrap();
    let clusters = ClusterModel::from_assignments(&catalog, &[0; 6], &Family::POLY, Linkage::Average, vec![]).unwrap();
    assert_eq!(clusters.k, 1);
    let routed = train(&cluster_spec(&maha_cfg, &clusters, 0).unwrap()).unwrap();
    assert_eq!(routed.model.store, feld.model.store);
    assert_eq!(routed.metrics, feld.metrics);

    // The embedder only routes; with one cluster every task reaches the same model.
    let embedder = NeuralProcess::new(ModelKind::Maha, maha_cfg.arch(), 99).unwrap();
    let mut centers_only = clusters.clone();
    centers_only.centers = vec![vec![0.0; maha_cfg.model.latent]];
    let (single, s_scores) = evaluate(Predictor::Single(&feld.model), &feld_cfg).unwrap();
    let (multi, m_scores) = evaluate(
        Predictor::Routed {
            embedder: &embedder,
            clusters: &centers_only,
            models: std::slice::from_ref(&routed.model),
        },
        &maha_cfg,
    )
    .unwrap();
    assert_eq!(s_scores, m_scores);
    assert_eq!(single.mean, multi.mean);
    assert_eq!(multi.model_kind, "MAHA");
}

#[test]
fn routed_eval_requires_one_model_per_cluster() {
    let cfg = tiny_config(&[("model.kind", "MAHA")]);
    let rows = (0..4)
        .map(|i| CatalogRow {
            task_id: i,
            family: Family::POLY[i as usize],
            mu: vec![i as f64; 4],
        })
        .collect();
    let catalog = LatentCatalog::new(rows).unwrap();
    let clusters =
        ClusterModel::from_assignments(&catalog, &[0, 0, 1, 1], &Family::POLY, Linkage::Average, vec![]).unwrap();
    let embedder = NeuralProcess::new(ModelKind::Maha, cfg.arch(), 1).unwrap();
    let feld = NeuralProcess::new(ModelKind::Feld, cfg.arch(), 1).unwrap();
    let err = evaluate(
        Predictor::Routed {
            embedder: &embedder,
            clusters: &clusters,
            models: std::slice::from_ref(&feld),
        },
        &cfg,
    )
    .unwrap_err();
    assert_eq!(err.code(), "MISSING_CHECKPOINT");
}

#[test]
fn eval_report_is_recomputable_from_task_scores() {
    let cfg = tiny_config(&[("model.kind", "NP"), ("eval.tasks", "37")]);
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::create(tmp.path()).unwrap();
    run_train_single(&cfg, &dir).unwrap();
    let report = run_eval(&cfg, &dir).unwrap();
    let text = std::fs::read_to_string(dir.per_task_scores()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "task_id,family,cluster,score,nll_mc,nll_mean_pred");
    let scores: Vec<f64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(scores.len(), 37);
    assert_eq!(scores.iter().sum::<f64>() / 37.0, report.mean);
    let n: usize = report.per_family.values().map(|g| g.n).sum();
    assert_eq!(n, 37);
    let on_disk: maha::pipeline::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.eval_report()).unwrap()).unwrap();
    assert_eq!(on_disk, report);
}
