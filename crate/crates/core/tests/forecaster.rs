use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseset_core::datagen::{generate_dataset, GenerationConfig};
use sparseset_core::forecaster::{
    evaluate_loss, loss_at_params, train_model, Architecture, DeepSetModel, Encoding, TrainConfig,
};
use sparseset_core::mechanistic::ModelKind;
use sparseset_core::series::{Dataset, SparseSeries};
use sparseset_nn::{grad_check, Graph, Tensor};

fn data(kind: ModelKind) -> Dataset {
    let mut cfg = GenerationConfig::defaults(kind);
    cfg.n_train = 6;
    cfg.n_val = 2;
    cfg.n_test = 2;
    cfg.seed = 21;
    generate_dataset(&cfg).unwrap()
}

fn check(kind: ModelKind, encoding: Encoding, seed: u64) {
    let d = data(kind);
    let arch = Architecture {
        latent_dim: 5,
        extractor_hidden: vec![7],
        aggregator_hidden: vec![6, 4],
    };
    let names = d.channels.iter().map(|c| c.name.clone()).collect();
    let m = DeepSetModel::new(encoding, d.stats.clone(), names, &arch, d.obs_per_part, d.t_split, seed).unwrap();
    let point: Vec<Tensor> = m.params().into_iter().cloned().collect();
    let trajs = &d.train[..3];
    let r = grad_check(|g, vs| Ok(loss_at_params(&m, g, vs, trajs).unwrap()), &point, 1e-6).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_error < 1e-4, "{kind:?} {encoding:?} seed {seed}: {r:?}");
}

#[test]
fn loss_gradients_match_central_differences() {
    for seed in 0..4 {
        for enc in [Encoding::Triplet, Encoding::GridLinear, Encoding::GridRbf] {
            check(ModelKind::Mmk, enc, seed);
        }
        check(ModelKind::Ecoli, Encoding::Triplet, seed);
    }
}

fn model(d: &Dataset, encoding: Encoding, seed: u64) -> DeepSetModel {
    let arch = Architecture {
        latent_dim: 8,
        extractor_hidden: vec![12, 12],
        aggregator_hidden: vec![12],
    };
    let names = d.channels.iter().map(|c| c.name.clone()).collect();
    let mut m = DeepSetModel::new(encoding, d.stats.clone(), names, &arch, d.obs_per_part, d.t_split, seed).unwrap();
    // non-zero biases so that empty inputs are not trivially zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in m.extractor.layers_mut().iter_mut().chain(m.aggregator.layers_mut()) {
        for b in l.bias.data_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    m
}

fn raw_forward(m: &DeepSetModel, rows: Vec<f64>, taus: &[f64]) -> Vec<f64> {
    let d = m.input_dim();
    let n = rows.len() / d;
    let mut g = Graph::new();
    let ext = m.extractor.bind(&mut g, false);
    let agg = m.aggregator.bind(&mut g, false);
    let y = m
        .forward(
            &mut g,
            &ext,
            &agg,
            Tensor::matrix(n, d, rows).unwrap(),
            vec![0, n],
            vec![0; taus.len()],
            Tensor::matrix(taus.len(), 1, taus.to_vec()).unwrap(),
        )
        .unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn channel_empty_contexts_give_finite_forecasts() {
    let d = data(ModelKind::Ecoli);
    for enc in [Encoding::Triplet, Encoding::GridLinear, Encoding::GridRbf] {
        let m = model(&d, enc, 3);
        let ctx = &d.test[0].context;
        let only_first: Vec<_> = ctx.records().iter().filter(|r| r.channel == 0).copied().collect();
        for c in [
            ctx.with_records(only_first).unwrap(),
            SparseSeries::empty(d.t_split, d.t_max),
        ] {
            let p = m.predict_at(&c, 0.75 * d.t_max).unwrap();
            assert!(p.iter().all(|v| v.is_finite()), "{enc:?}: {p:?}");
        }
    }
}

#[test]
fn best_checkpoint_never_loses_to_initialization() {
    let d = data(ModelKind::Mmk);
    let cfg = TrainConfig {
        batch_size: 4,
        steps: 60,
        val_every: 10,
        latent_dim: 8,
        extractor_hidden: vec![12],
        aggregator_hidden: vec![12],
        ..TrainConfig::smoke()
    };
    let m0 = model(&d, Encoding::Triplet, 4);
    let out = train_model(m0, &d.train, &d.val, &cfg).unwrap();
    let best = evaluate_loss(&out.model, &d.val).unwrap();
    assert!(best <= out.history[0].val_loss);
    assert_eq!(best, out.best_val_loss);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shuffled_records_give_identical_predictions(seed in any::<u64>(), i in 0usize..2) {
        let d = data(ModelKind::Mmk);
        let m = model(&d, Encoding::Triplet, seed);
        let ctx = &d.test[i].context;
        let mut recs = ctx.records().to_vec();
        recs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = SparseSeries::new(recs, ctx.t_split(), ctx.t_max()).unwrap();
        let taus = [2.5, 3.0, 3.9];
        for t in taus {
            prop_assert_eq!(m.predict_at(ctx, t).unwrap(), m.predict_at(&shuffled, t).unwrap());
        }

        // the network itself, fed rows in another order, agrees to rounding
        let dim = m.input_dim();
        let rows = m.encode_context(ctx).unwrap();
        let mut order: Vec<usize> = (0..rows.len() / dim).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let permuted: Vec<f64> = order.iter().flat_map(|&r| rows[r * dim..(r + 1) * dim].to_vec()).collect();
        let taus_n: Vec<f64> = taus.iter().map(|t| t / d.t_max).collect();
        for (a, b) in raw_forward(&m, rows, &taus_n).iter().zip(raw_forward(&m, permuted, &taus_n)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn latent_of_a_union_is_the_sum_of_latents(seed in any::<u64>(), split in 0usize..28) {
        let d = data(ModelKind::Mmk);
        let m = model(&d, Encoding::Triplet, seed);
        let ctx = &d.test[0].context;
        let k = split.min(ctx.len());
        let (a, b) = ctx.records().split_at(k);
        let la = m.aggregate_context(&ctx.with_records(a.to_vec()).unwrap()).unwrap();
        let lb = m.aggregate_context(&ctx.with_records(b.to_vec()).unwrap()).unwrap();
        let lab = m.aggregate_context(ctx).unwrap();
        for ((x, y), z) in la.iter().zip(&lb).zip(&lab) {
            prop_assert!((x + y - z).abs() <= 1e-12 * z.abs().max(1.0));
        }
    }
}
