mod common;

use common::tiny_arch;
use maha::decoders::{Decoder, DecoderInput, FeatureExtractor, LinearDecoder};
use maha::encoders::{pool_batch, pool_way, Encoder, NpEncoder, SetInput, StConfig, StEncoder};
use maha::model::{Batch, ModelKind, NeuralProcess, Prediction, TaskKind};
use maha::nn::{LayerNorm, MultiHeadAttention, LAYER_NORM_EPS};
use maha::taskgen::{EpisodeShape, SplitMode, TaskDistribution};
use maha::variational::{GaussianVar, VarianceTransform};
use maha::{Graph, ParamStore, Rng, Tensor};

fn regression_batch(ctx: &[Vec<(f64, f64)>], targets: &[Vec<f64>]) -> Batch {
    let b = ctx.len();
    let n = ctx[0].len();
    let m = targets[0].len();
    let cx = ctx.iter().flat_map(|s| s.iter().map(|p| p.0)).collect();
    let cy = ctx.iter().flat_map(|s| s.iter().map(|p| p.1)).collect();
    let tx = targets.iter().flatten().copied().collect();
    Batch {
        size: b,
        way: 1,
        context_x: Tensor::new(&[b, n, 1], cx).unwrap(),
        context_y: Tensor::new(&[b, n, 1], cy).unwrap(),
        target_x: Tensor::new(&[b, m, 1], tx).unwrap(),
        target_y: None,
    }
}

/// `(r, μ_z)` of the context encoding.
fn encode(model: &NeuralProcess, batch: &Batch) -> (Vec<f64>, Vec<f64>) {
    let g = Graph::new();
    let p = g.bind_frozen(&model.store);
    let set = model.context_set(&g, batch).unwrap();
    let tx = g.constant(batch.target_x.clone());
    let out = model.encoder.encode(&p, &set, tx).unwrap();
    (out.r.to_vec(), out.z.map(|z| z.mean.to_vec()).unwrap_or_default())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permutations3() -> Vec<[usize; 3]> {
    vec![[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]
}

#[test]
fn shot_permutation_invariance_over_all_orders() {
    let points = [(-1.3, 0.4), (0.2, -2.0), (2.5, 1.1)];
    for kind in [ModelKind::Np, ModelKind::Feld, ModelKind::NpFe, ModelKind::Maha] {
        let model = NeuralProcess::new(kind, tiny_arch(TaskKind::Regression), 4).unwrap();
        let reference = encode(&model, &regression_batch(&[points.to_vec()], &[vec![0.5, -0.5]]));
        for perm in permutations3() {
            let set: Vec<_> = perm.iter().map(|&i| points[i]).collect();
            let (r, z) = encode(&model, &regression_batch(&[set], &[vec![0.5, -0.5]]));
            assert!(max_diff(&r, &reference.0) <= 1e-9, "{kind} r {perm:?}");
            assert!(max_diff(&z, &reference.1) <= 1e-9, "{kind} z {perm:?}");
        }
    }
}

#[test]
fn anp_latent_is_invariant_and_r_is_target_equivariant() {
    let model = NeuralProcess::new(ModelKind::Anp, tiny_arch(TaskKind::Regression), 6).unwrap();
    let points = [(-1.3, 0.4), (0.2, -2.0), (2.5, 1.1)];
    let targets = [-2.0, 0.1, 1.7, 3.0];
    let (r0, z0) = encode(&model, &regression_batch(&[points.to_vec()], &[targets.to_vec()]));
    let d = r0.len() / targets.len();
    for perm in permutations3() {
        let set: Vec<_> = perm.iter().map(|&i| points[i]).collect();
        let (r, z) = encode(&model, &regression_batch(&[set], &[targets.to_vec()]));
        assert!(max_diff(&z, &z0) <= 1e-9);
        assert!(max_diff(&r, &r0) <= 1e-9);
    }
    let order = [3, 1, 0, 2];
    let permuted: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
    let (r, _) = encode(&model, &regression_batch(&[points.to_vec()], &[permuted]));
    for (row, &src) in order.iter().enumerate() {
        assert!(max_diff(&r[row * d..(row + 1) * d], &r0[src * d..(src + 1) * d]) <= 1e-9);
    }
}

#[test]
fn anp_single_context_point_ignores_the_query() {
    let model = NeuralProcess::new(ModelKind::Anp, tiny_arch(TaskKind::Regression), 8).unwrap();
    let (r, _) = encode(&model, &regression_batch(&[vec![(0.7, -1.2)]], &[vec![-4.0, 0.0, 9.0]]));
    let d = r.len() / 3;
    assert!(max_diff(&r[..d], &r[d..2 * d]) <= 1e-12);
    assert!(max_diff(&r[..d], &r[2 * d..]) <= 1e-12);
}

#[test]
fn single_point_mean_pool_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(2, 0);
    let enc = NpEncoder::new(&mut store, 2, 6, 1, 5, Some(3), &mut rng).unwrap();
    let g = Graph::new();
    let p = g.bind_frozen(&store);
    let pts = g.constant(Tensor::new(&[1, 1, 2], vec![0.3, -0.8]).unwrap());
    let set = SetInput {
        points: pts,
        xs: pts,
        batch: 1,
        way: 1,
    };
    let pooled = enc.deterministic(&p, &set).unwrap().to_vec();
    let direct = enc.det.forward(&p, pts).unwrap().to_vec();
    assert_eq!(pooled, direct);
}

/// Sets are given as rows of `[x, y]`.
fn st_and_linear_np(sets: &[Vec<[f64; 2]>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(12, 0);
    let cfg = StConfig {
        num_sab_blocks: 2,
        num_heads: 2,
        feature_dim: 8,
        num_inducing: 0,
        pma_seeds: 1,
    };
    let st = StEncoder::new(&mut store, 2, &cfg, 8, None, &mut rng).unwrap();
    // depth 0: a single affine map, so mean pooling depends on the set mean only
    let np = NpEncoder::new(&mut store, 2, 8, 0, 8, None, &mut rng).unwrap();
    sets.iter()
        .map(|s| {
            let g = Graph::new();
            let p = g.bind_frozen(&store);
            let data = s.iter().flatten().copied().collect();
            let pts = g.constant(Tensor::new(&[1, s.len(), 2], data).unwrap());
            let set = SetInput {
                points: pts,
                xs: pts,
                batch: 1,
                way: 1,
            };
            (
                st.deterministic(&p, &set).unwrap().to_vec(),
                np.deterministic(&p, &set).unwrap().to_vec(),
            )
        })
        .collect()
}

#[test]
fn set_transformer_separates_sets_that_mean_pooling_merges() {
    let a = [-1.0, 2.0];
    let b = [1.0, -0.5];
    let mid = [0.0, 0.75];
    let out = st_and_linear_np(&[vec![a, b], vec![mid, mid], vec![a, a, b, b]]);
    let (st_ab, np_ab) = &out[0];
    let (st_mid, np_mid) = &out[1];
    // Same mean: the affine mean-pool encoder cannot tell the sets apart.
    assert!(max_diff(np_ab, np_mid) <= 1e-12);
    assert!(max_diff(st_ab, st_mid) > 1e-3);
    // Replicating every point leaves both encoders unchanged: mean pooling
    // and softmax attention both see the same empirical distribution.
    let (st_aabb, np_aabb) = &out[2];
    assert!(max_diff(np_ab, np_aabb) <= 1e-12);
    assert!(max_diff(st_ab, st_aabb) <= 1e-9);
}

#[test]
fn peaked_attention_selects_the_matching_point() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1, 0);
    let mha = MultiHeadAttention::new(&mut store, "cross", (2, 2, 3), 2, 1, &mut rng).unwrap();
    // Projections scaled so a matching key scores c²/√2 above an orthogonal one.
    let c = 6.0;
    let set = |store: &mut ParamStore, name: &str, t: Tensor| {
        let id = store.id_of(name).unwrap();
        store.set(id, t).unwrap();
    };
    let scaled_eye = Tensor::new(&[2, 2], vec![c, 0.0, 0.0, c]).unwrap();
    set(&mut store, "cross.wq.w", scaled_eye.clone());
    set(&mut store, "cross.wk.w", scaled_eye);
    set(&mut store, "cross.wv.w", Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap());
    set(&mut store, "cross.wo.w", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let keys = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
    let values = vec![2.0, -1.0, 0.5, 0.3, 4.0, -2.0, -3.0, 1.5, 0.0];
    let g = Graph::new();
    let p = g.bind_frozen(&store);
    let k = g.constant(Tensor::new(&[1, 3, 2], keys.clone()).unwrap());
    let v = g.constant(Tensor::new(&[1, 3, 3], values.clone()).unwrap());
    for j in 0..3 {
        let q = g.constant(Tensor::new(&[1, 1, 2], keys[2 * j..2 * j + 2].to_vec()).unwrap());
        let (out, w) = mha.forward_with_weights(&p, q, k, v).unwrap();
        let w = w.to_vec();
        let top = w[j];
        let others: f64 = w.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, x)| x).sum();
        assert!(top > 1.0 - 1e-7 && others < 1e-7, "{w:?}");
        let row = &values[3 * j..3 * j + 3];
        let embed = [row[0] + 0.5 * row[2], row[1] + 0.5 * row[2]];
        assert!(max_diff(&out.to_vec(), &embed) < 1e-6);
    }
}

#[test]
fn equal_scores_average_the_values() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1, 0);
    let mha = MultiHeadAttention::new(&mut store, "a", (2, 2, 2), 2, 1, &mut rng).unwrap();
    let wq = store.id_of("a.wq.w").unwrap();
    store.set(wq, Tensor::zeros(&[2, 2])).unwrap();
    let g = Graph::new();
    let p = g.bind_frozen(&store);
    let q = g.constant(Tensor::new(&[1, 1, 2], vec![0.4, 0.9]).unwrap());
    let k = g.constant(Tensor::new(&[1, 3, 2], vec![1.0, 2.0, -1.0, 0.0, 3.0, 3.0]).unwrap());
    let vals = vec![1.0, 2.0, 4.0, -2.0, 7.0, 3.0];
    let v = g.constant(Tensor::new(&[1, 3, 2], vals.clone()).unwrap());
    let out = mha.forward(&p, q, k, v).unwrap();
    let mean = g.constant(Tensor::new(&[1, 1, 2], vec![4.0, 1.0]).unwrap());
    let expected = mha.o.forward(&p, mha.v.forward(&p, mean).unwrap()).unwrap();
    assert!(max_diff(&out.to_vec(), &expected.to_vec()) < 1e-12);
}

#[test]
fn batch_pooling_constancy_and_sensitivity() {
    let model = NeuralProcess::new(ModelKind::Maha, tiny_arch(TaskKind::Regression), 3).unwrap();
    let task = vec![(0.1, 0.2), (-1.0, 0.5)];
    let same = regression_batch(&[task.clone(), task.clone(), task.clone()], &[vec![0.0], vec![0.0], vec![0.0]]);
    let g = Graph::new();
    let p = g.bind_frozen(&model.store);
    let set = model.context_set(&g, &same).unwrap();
    let tx = g.constant(same.target_x.clone());
    let r = model.encoder.deterministic(&p, &set, tx).unwrap();
    let r_bar = pool_batch(r).unwrap();
    let per_task = r.to_vec();
    let d = per_task.len() / 3;
    assert_eq!(r_bar.shape()[0], 1);
    assert!(max_diff(&r_bar.to_vec(), &per_task[..d]) <= 1e-15);

    let other = regression_batch(&[task.clone(), vec![(2.0, -3.0), (1.0, 1.0)], task], &[vec![0.0], vec![0.0], vec![0.0]]);
    let set2 = model.context_set(&g, &other).unwrap();
    let r2 = pool_batch(model.encoder.deterministic(&p, &set2, tx).unwrap()).unwrap();
    assert!(max_diff(&r2.to_vec(), &r_bar.to_vec()) > 1e-6);

    // Regression has a single way: z̄ is z itself.
    let q = model.encoder.latent(&p, &set).unwrap().unwrap();
    let pooled = pool_way(&q).unwrap();
    assert_eq!(pooled.mean.id(), q.mean.id());
    assert_eq!(pooled.mean.to_vec(), q.mean.to_vec());
}

#[test]
fn way_pooling_by_hand() {
    let g = Graph::new();
    let mean = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap());
    let raw = g.constant(Tensor::zeros(&[1, 2, 2]));
    let q = GaussianVar::new(mean, raw, VarianceTransform::BoundedSigmoid).unwrap();
    let z_bar = pool_way(&q).unwrap();
    assert_eq!(z_bar.mean.to_vec(), vec![2.0, 4.0]);
    let shared = z_bar.mean.broadcast_to(&[1, 2, 2]).unwrap().to_vec();
    assert_eq!(shared, vec![2.0, 4.0, 2.0, 4.0]);
}

#[test]
fn classification_label_shuffle_leaves_z_bar_unchanged() {
    let arch = tiny_arch(TaskKind::Classification);
    let model = NeuralProcess::new(ModelKind::Maha, arch, 5).unwrap();
    let dist = TaskDistribution::default_classification();
    let shape = EpisodeShape {
        context: 2,
        target: 3,
        way: 3,
        mode: SplitMode::Interpolate,
    };
    let ep = dist.sample(&shape, 77).unwrap();
    let base = Batch::observed(&[ep.view()]).unwrap();
    let emb0 = model.embed_context(&base).unwrap();
    let (way, dx) = (3, base.context_x.shape()[2]);
    let shot = base.context_len() / way;
    let block = shot * dx;
    for perm in permutations3() {
        // Class `perm[j]` becomes class `j`: its block moves to position j.
        let src = base.context_x.data();
        let cx: Vec<f64> = perm.iter().flat_map(|&c| src[c * block..(c + 1) * block].to_vec()).collect();
        let mut shuffled = base.clone();
        shuffled.context_x = Tensor::new(base.context_x.shape(), cx).unwrap();
        let emb = model.embed_context(&shuffled).unwrap();
        assert!(max_diff(&emb[0], &emb0[0]) <= 1e-9, "{perm:?}");
    }
}

#[test]
fn zero_final_layer_gives_constant_head() {
    let mut model = NeuralProcess::new(ModelKind::Np, tiny_arch(TaskKind::Regression), 9).unwrap();
    let Decoder::Conventional(dec) = &model.decoder else { panic!() };
    let last = dec.mlp.layers.last().unwrap().clone();
    model.store.set(last.w, Tensor::zeros(&[last.fan_in, 2])).unwrap();
    model.store.set(last.b, Tensor::vector(vec![0.8, -1.5])).unwrap();
    let batch = regression_batch(&[vec![(0.1, 0.2), (1.0, -1.0)]], &[vec![-3.0, 0.0, 2.0]]);
    let Prediction::Regression { sample_means, sample_vars, .. } = model.predict(&batch, 2, &mut Rng::new(0, 0)).unwrap() else {
        panic!()
    };
    assert_eq!(sample_means[0].shape(), &[1, 3, 1]);
    let var = 0.1 + 0.9 * (1.0 + (-1.5f64).exp()).ln();
    for (m, v) in sample_means.iter().zip(&sample_vars) {
        assert!(m.data().iter().all(|&x| x == 0.8));
        assert!(v.data().iter().all(|&x| (x - var).abs() < 1e-15));
    }
}

/// A classification linear decoder with identity features and no latent path.
fn identity_decoder(feature: usize, way: usize, z_dim: Option<usize>, affine: bool) -> (ParamStore, LinearDecoder) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(31, 0);
    let dec = LinearDecoder::new(&mut store, FeatureExtractor::Identity, feature, z_dim, false, way, affine, &mut rng).unwrap();
    (store, dec)
}

fn layer_norm_row(v: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter()
        .enumerate()
        .map(|(i, x)| (x - mean) / (var + LAYER_NORM_EPS).sqrt() * gain[i] + bias[i])
        .collect()
}

#[test]
fn identity_features_reduce_to_a_hand_matmul() {
    let (store, dec) = identity_decoder(2, 2, None, false);
    let g = Graph::new();
    let p = g.bind_frozen(&store);
    // r rows (one per way): [1, 3] and [2, -2]
    let r = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 2.0, -2.0]).unwrap());
    let x = g.constant(Tensor::new(&[1, 1, 2], vec![0.5, 2.0]).unwrap());
    let logits = dec
        .decode(&p, &DecoderInput { target_x: x, r, z: None })
        .unwrap()
        .logits()
        .unwrap()
        .to_vec();
    // LN of a 2-vector [a, b] is ±d/√(d² + eps) with d = (a - b)/2.
    let s1 = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    let s2 = 2.0 / (4.0 + LAYER_NORM_EPS).sqrt();
    // Wᵀ rows: [-s1, s1] and [s2, -s2]; logits = x · W
    let expected = [0.5 * -s1 + 2.0 * s1, 0.5 * s2 + 2.0 * -s2];
    assert!(max_diff(&logits, &expected) < 1e-15);
}

#[test]
fn linear_decoder_matches_reference_formula() {
    let (feature, way, z_dim) = (4, 3, 2);
    let (mut store, dec) = identity_decoder(feature, way, Some(z_dim), true);
    let mut rng = Rng::new(40, 0);
    let gain_id = store.id_of("decoder.ln.gain").unwrap();
    let bias_id = store.id_of("decoder.ln.bias").unwrap();
    let gain: Vec<f64> = (0..feature).map(|_| rng.uniform(0.5, 1.5)).collect();
    let bias: Vec<f64> = (0..feature).map(|_| rng.uniform(-0.5, 0.5)).collect();
    store.set(gain_id, Tensor::vector(gain.clone())).unwrap();
    store.set(bias_id, Tensor::vector(bias.clone())).unwrap();

    let r: Vec<f64> = (0..way * feature).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let z: Vec<f64> = (0..z_dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let x: Vec<f64> = (0..5 * feature).map(|_| rng.uniform(-2.0, 2.0)).collect();

    // Reference: rFF(z) by hand from the stored weights.
    let zff = dec.zff.as_ref().unwrap();
    let mut h = z.clone();
    for (i, layer) in zff.layers.iter().enumerate() {
        let w = store.get(layer.w).tensor.to_vec();
        let b = store.get(layer.b).tensor.to_vec();
        let mut next = b.clone();
        for (o, acc) in next.iter_mut().enumerate() {
            for (k, hk) in h.iter().enumerate() {
                *acc += hk * w[k * layer.fan_out + o];
            }
        }
        if i + 1 < zff.layers.len() {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = next;
    }
    let rows: Vec<Vec<f64>> = (0..way)
        .map(|c| {
            let sum: Vec<f64> = (0..feature).map(|f| r[c * feature + f] + h[f]).collect();
            layer_norm_row(&sum, &gain, &bias)
        })
        .collect();
    let expected: Vec<f64> = x
        .chunks(feature)
        .flat_map(|xi| rows.iter().map(|row| row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>())
        .collect();

    let g = Graph::new();
    let p = g.bind_frozen(&store);
    let input = DecoderInput {
        target_x: g.constant(Tensor::new(&[1, 5, feature], x).unwrap()),
        r: g.constant(Tensor::new(&[1, way, feature], r).unwrap()),
        z: Some(g.constant(Tensor::new(&[1, 1, z_dim], z).unwrap())),
    };
    let got = dec.decode(&p, &input).unwrap().logits().unwrap().to_vec();
    assert!(max_diff(&got, &expected) <= 1e-12);
}

#[test]
fn zero_latent_path_reduces_to_layer_normed_r() {
    let (mut store, dec) = identity_decoder(3, 2, Some(2), false);
    let last = dec.zff.as_ref().unwrap().layers.last().unwrap().clone();
    store.set(last.w, Tensor::zeros(&[last.fan_in, last.fan_out])).unwrap();
    store.set(last.b, Tensor::zeros(&[last.fan_out])).unwrap();
    let g = Graph::new();
    let p = g.bind_frozen(&store);
    let r = g.constant(Tensor::new(&[2, 2, 3], vec![1.0, 0.0, -1.0, 2.0, 5.0, 3.0, 0.3, 0.1, 0.2, -4.0, 1.0, 0.0]).unwrap());
    let z = g.constant(Tensor::new(&[2, 1, 2], vec![3.0, -1.0, -7.0, 2.0]).unwrap());
    let with_z = dec.weights(&p, r, Some(z)).unwrap().w.to_vec();
    let ln = LayerNorm { gain: None, bias: None };
    let expected = ln.forward(&p, r).unwrap().transpose().unwrap().to_vec();
    assert_eq!(with_z, expected);
}

#[test]
fn logits_are_linear_in_identity_features() {
    let (store, dec) = identity_decoder(3, 3, Some(2), true);
    let g = Graph::new();
    let p = g.bind_frozen(&store);
    let mut rng = Rng::new(8, 0);
    let r = g.constant(Tensor::new(&[1, 3, 3], (0..9).map(|_| rng.normal()).collect()).unwrap());
    let z = Some(g.constant(Tensor::new(&[1, 1, 2], vec![0.4, -0.3]).unwrap()));
    let x1: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let x2: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let alpha = 0.3;
    let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    let logits = |x: Vec<f64>| {
        let tx = g.constant(Tensor::new(&[1, 1, 3], x).unwrap());
        dec.decode(&p, &DecoderInput { target_x: tx, r, z }).unwrap().logits().unwrap().to_vec()
    };
    let (l1, l2, lm) = (logits(x1), logits(x2), logits(mix));
    let combo: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    assert!(max_diff(&lm, &combo) <= 1e-9);
}

#[test]
fn predictive_variance_never_drops_below_floor() {
    for kind in [ModelKind::Np, ModelKind::Anp, ModelKind::NpLd, ModelKind::Feld] {
        let model = NeuralProcess::new(kind, tiny_arch(TaskKind::Regression), 21).unwrap();
        let batch = regression_batch(&[vec![(1e3, -1e3), (-1e3, 1e4)]], &[vec![-1e4, 0.0, 1e5]]);
        let Prediction::Regression { variance, sample_vars, .. } = model.predict(&batch, 4, &mut Rng::new(1, 0)).unwrap() else {
            panic!()
        };
        for v in sample_vars.iter().flat_map(|t| t.to_vec()) {
            assert!(v >= 0.1, "{kind}: {v}");
        }
        for v in variance.to_vec() {
            assert!(v >= 0.1 - 1e-12, "{kind}: {v}");
        }
    }
}

#[test]
fn encoder_kinds_match_model_kinds() {
    let arch = tiny_arch(TaskKind::Regression);
    for kind in ModelKind::ALL {
        let m = NeuralProcess::new(kind, arch.clone(), 0).unwrap();
        let expected = if kind.flexible_encoder() {
            matches!(m.encoder, Encoder::SetTransformer(_))
        } else if kind == ModelKind::Anp {
            matches!(m.encoder, Encoder::Attentive(_))
        } else {
            matches!(m.encoder, Encoder::MeanPool(_))
        };
        assert!(expected, "{kind}");
        assert_eq!(kind.linear_decoder(), matches!(m.decoder, Decoder::Linear(_)));
    }
}
