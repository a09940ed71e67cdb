use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseset_core::baselines::{
    bfgs_minimize, fit_mechanistic_bfgs, impute_linear, impute_rbf, make_regular_grid, median_gap_bandwidth, Bandwidth,
    BfgsOptions, FitOptions,
};
use sparseset_core::mechanistic::{eval_trajectory, integrate, MechanisticParams, ModelKind, OdeOptions, PriorSpec};
use sparseset_core::series::{SparseSeries, TripletRecord};

fn series(records: Vec<TripletRecord>, t_split: f64) -> SparseSeries {
    SparseSeries::new(records, t_split, 2.0 * t_split).unwrap()
}

#[test]
fn linear_spline_reproduces_linear_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (0.7, -1.3);
    let recs: Vec<TripletRecord> = (0..12)
        .map(|_| {
            let t = rng.random_range(0.0..2.0);
            TripletRecord::new(t, 0, a + b * t)
        })
        .collect();
    let s = series(recs, 2.0);
    let (lo, hi) = s
        .records()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| {
            (l.min(r.time), h.max(r.time))
        });
    let grid = make_regular_grid(41, 2.0).unwrap();
    let out = impute_linear(&s, &grid, 1, &[0.0]);
    for (t, v) in out.times.iter().zip(&out.values) {
        let want = a + b * t.clamp(lo, hi);
        assert!((v[0] - want).abs() <= 1e-12, "{t}: {} vs {want}", v[0]);
    }
}

#[test]
fn empty_channels_take_the_fill_value() {
    let s = series(vec![TripletRecord::new(0.5, 0, 3.0)], 2.0);
    let grid = make_regular_grid(5, 2.0).unwrap();
    for g in [
        impute_linear(&s, &grid, 2, &[9.0, -4.0]),
        impute_rbf(&s, &grid, 2, Bandwidth::MedianGap, &[9.0, -4.0]),
    ] {
        assert!(g.values.iter().all(|v| v == &[3.0, -4.0]));
    }
}

#[test]
fn single_observation_gives_a_constant_rbf_channel() {
    let s = series(vec![TripletRecord::new(1.3, 0, 0.42)], 2.0);
    let grid = make_regular_grid(20, 2.0).unwrap();
    let g = impute_rbf(&s, &grid, 1, Bandwidth::MedianGap, &[0.0]);
    assert!(g.values.iter().all(|v| v[0] == 0.42));
}

#[test]
fn regular_grid_hits_both_ends_exactly() {
    for n in [2, 3, 7, 20, 101] {
        for t_split in [1.0, 2.0, 5.0, 0.3] {
            let g = make_regular_grid(n, t_split).unwrap();
            assert_eq!(g.len(), n);
            assert_eq!(g[0], 0.0);
            assert_eq!(g[n - 1], t_split);
            assert!(g.windows(2).all(|w| w[0] < w[1]));
        }
    }
    assert!(make_regular_grid(1, 2.0).is_err());
}

#[test]
fn median_gap_uses_consecutive_gaps() {
    assert_eq!(median_gap_bandwidth(&[0.0, 1.0, 3.0, 6.0], 0.1), 2.0);
    assert_eq!(median_gap_bandwidth(&[0.0, 1.0, 3.0, 6.0, 10.0], 0.1), 2.5);
    assert_eq!(median_gap_bandwidth(&[0.0, 0.01, 0.02], 0.5), 0.5);
    assert_eq!(median_gap_bandwidth(&[1.0], 0.25), 0.25);
}

#[test]
fn bfgs_finds_the_rosenbrock_minimum() {
    let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
    let opts = BfgsOptions {
        max_iter: 1000,
        ..BfgsOptions::default()
    };
    let r = bfgs_minimize(rosen, &[-1.2, 1.0], &opts);
    assert!((r.x[0] - 1.0).abs() <= 1e-4 && (r.x[1] - 1.0).abs() <= 1e-4, "{r:?}");
    assert!(r.f <= 1e-8);
}

#[test]
fn bfgs_never_returns_a_worse_point() {
    let f = |x: &[f64]| x.iter().map(|v| (v - 3.0).powi(4)).sum::<f64>() + (x[0] * x[1]).sin();
    let x0 = [0.5, -2.0, 1.0];
    let r = bfgs_minimize(f, &x0, &BfgsOptions::default());
    assert!(r.f <= f(&x0));
    assert_eq!(r.f, f(&r.x));
}

fn mmk_context(p: &MechanisticParams, n: usize, sigma: f64, seed: u64) -> SparseSeries {
    let traj = integrate(p, 4.0, &OdeOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|i| {
            let t = 2.0 * (i as f64 + 0.5) / n as f64;
            let c = i % 2;
            let e: f64 = rng.random_range(-1.0..1.0);
            TripletRecord::new(t, c, eval_trajectory(&traj, t).unwrap()[c] + sigma * e)
        })
        .collect();
    SparseSeries::new(recs, 2.0, 4.0).unwrap()
}

#[test]
fn noise_free_dense_mmk_fit_recovers_parameters() {
    let truth = MechanisticParams::new(ModelKind::Mmk, vec![1.3, 0.4, 1.6, 0.0]).unwrap();
    let ctx = mmk_context(&truth, 60, 0.0, 0);
    let fit = fit_mechanistic_bfgs(
        &ctx,
        &PriorSpec::default_for(ModelKind::Mmk),
        &[0.05, 0.05],
        &FitOptions::default(),
    )
    .unwrap();
    for name in ["Vmax", "Km", "S0"] {
        let rel = (fit.params.get(name) / truth.get(name) - 1.0).abs();
        assert!(rel <= 0.01, "{name}: {} vs {}", fit.params.get(name), truth.get(name));
    }
}

#[test]
fn more_starts_never_raise_the_loss() {
    let truth = MechanisticParams::new(ModelKind::Mmk, vec![0.7, 0.8, 1.1, 0.0]).unwrap();
    let ctx = mmk_context(&truth, 8, 0.1, 5);
    let prior = PriorSpec::default_for(ModelKind::Mmk);
    let mut prev = f64::INFINITY;
    for k in 1..=4 {
        let opts = FitOptions {
            multistart: k,
            seed: 17,
            ..FitOptions::default()
        };
        let loss = fit_mechanistic_bfgs(&ctx, &prior, &[0.1, 0.1], &opts).unwrap().loss;
        assert!(loss <= prev, "{k} starts: {loss} > {prev}");
        prev = loss;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rbf_stays_inside_the_observed_range(
        seed in any::<u64>(),
        n in 1usize..15,
        h in prop::option::of(1e-4..3.0f64),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs: Vec<TripletRecord> = (0..n)
            .map(|_| TripletRecord::new(rng.random_range(0.0..2.0), 0, rng.random_range(-5.0..5.0)))
            .collect();
        let (lo, hi) = recs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), r| (l.min(r.value), u.max(r.value)));
        let s = series(recs, 2.0);
        let bw = h.map_or(Bandwidth::MedianGap, Bandwidth::Fixed);
        let g = impute_rbf(&s, &make_regular_grid(33, 2.0).unwrap(), 1, bw, &[0.0]);
        for v in &g.values {
            prop_assert!(v[0] >= lo && v[0] <= hi);
        }
    }
}
