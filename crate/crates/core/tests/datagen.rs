use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparseset_core::datagen::{
    generate_dataset, read_dataset, sample_observation_schedule, simulate_observations, split_file, write_dataset,
    GenerationConfig, META_FILE,
};
use sparseset_core::mechanistic::{eval_trajectory, integrate, sample_params, ModelKind, OdeOptions, PriorSpec};
use sparseset_core::series::{SplitName, TrajectoryRecord};
use sparseset_core::CoreError;

fn cfg(kind: ModelKind, n: (usize, usize, usize), seed: u64) -> GenerationConfig {
    let mut c = GenerationConfig::defaults(kind);
    (c.n_train, c.n_val, c.n_test) = n;
    c.seed = seed;
    c
}

fn files(dir: &Path) -> Vec<Vec<u8>> {
    let mut names = vec![META_FILE.to_string()];
    names.extend(SplitName::ALL.iter().map(|s| split_file(*s)));
    names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn output_does_not_depend_on_thread_count() {
    for kind in [ModelKind::Mmk, ModelKind::Ecoli] {
        let c = cfg(kind, (60, 10, 10), 9);
        let dirs: Vec<_> = [1, 3]
            .iter()
            .map(|&n| {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
                let d = pool.install(|| generate_dataset(&c)).unwrap();
                let dir = tempfile::tempdir().unwrap();
                write_dataset(&d, dir.path()).unwrap();
                dir
            })
            .collect();
        assert!(files(dirs[0].path()) == files(dirs[1].path()), "{kind:?}");
    }
}

#[test]
fn splits_have_requested_sizes_and_parts() {
    for kind in [ModelKind::Mmk, ModelKind::Ecoli] {
        let d = generate_dataset(&cfg(kind, (100, 10, 10), 1)).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (100, 10, 10));
        let per_part = if kind == ModelKind::Mmk { 14 } else { 30 };
        for t in d.train.iter().chain(&d.val).chain(&d.test) {
            assert_eq!(t.context.len(), per_part);
            assert_eq!(t.targets.len(), per_part);
            assert!(t.context.records().iter().all(|r| r.time <= d.t_split));
            assert!(t
                .targets
                .records()
                .iter()
                .all(|r| r.time > d.t_split && r.time <= d.t_max));
        }
    }
}

fn residual_variance(d: &[TrajectoryRecord], sigma: &[f64], t_max: f64) -> f64 {
    let (mut s2, mut n) = (0.0, 0usize);
    for t in d {
        let traj = integrate(&t.params, t_max, &OdeOptions::default()).unwrap();
        for r in t.context.records().iter().chain(t.targets.records()) {
            let truth = eval_trajectory(&traj, r.time).unwrap()[r.channel];
            s2 += ((r.value - truth) / sigma[r.channel]).powi(2);
            n += 1;
        }
    }
    s2 / n as f64
}

#[test]
fn normalized_noise_has_unit_variance() {
    for kind in [ModelKind::Mmk, ModelKind::Ecoli] {
        let n = if kind == ModelKind::Mmk { 2000 } else { 1000 };
        let d = generate_dataset(&cfg(kind, (n, 1, 1), 2)).unwrap();
        let v = residual_variance(&d.train, &d.noise_std(), d.t_max);
        assert!((0.97..=1.03).contains(&v), "{kind:?}: {v}");
    }
}

#[test]
fn hundred_trajectories_round_trip() {
    let d = generate_dataset(&cfg(ModelKind::Ecoli, (80, 10, 10), 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&d, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), d);
}

#[test]
fn truncated_and_bumped_files_are_rejected() {
    let d = generate_dataset(&cfg(ModelKind::Mmk, (5, 2, 2), 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&d, dir.path()).unwrap();

    let path = dir.path().join(split_file(SplitName::Train));
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let cut = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    fs::write(&path, cut).unwrap();
    match read_dataset(dir.path()) {
        Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }

    write_dataset(&d, dir.path()).unwrap();
    let meta = dir.path().join(META_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta).unwrap()).unwrap();
    v["format_version"] = 99.into();
    fs::write(&meta, v.to_string()).unwrap();
    assert!(matches!(
        read_dataset(dir.path()),
        Err(CoreError::VersionMismatch { found: 99, expected: 1 })
    ));
}

#[test]
fn schedule_bounds_order_and_channel_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = sample_observation_schedule(14, (0.0, 2.0), 2, &mut rng);
    assert_eq!(s.len(), 14);
    assert!(s.iter().all(|(t, _)| *t > 0.0 && *t < 2.0));
    assert!(s.windows(2).all(|w| w[0].0 <= w[1].0));

    let c = 4;
    let n = 100_000;
    let mut counts = vec![0usize; c];
    for (_, ch) in sample_observation_schedule(n, (2.0, 4.0), c, &mut rng) {
        counts[ch] += 1;
    }
    let p = 1.0 / c as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for k in counts {
        assert!((k as f64 - n as f64 * p).abs() <= 3.0 * sd, "{k}");
    }
}

#[test]
fn observation_noise_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = sample_params(&PriorSpec::default_for(ModelKind::Mmk), &mut rng);
    let traj = integrate(&p, 4.0, &OdeOptions::default()).unwrap();
    let schedule = sample_observation_schedule(100_000, (0.0, 4.0), 2, &mut rng);
    let sigma = [0.05, 0.2];
    let obs = simulate_observations(&traj, &schedule, &sigma, &mut rng).unwrap();
    for c in 0..2 {
        let res: Vec<f64> = obs
            .iter()
            .filter(|r| r.channel == c)
            .map(|r| r.value - eval_trajectory(&traj, r.time).unwrap()[c])
            .collect();
        let m = res.iter().sum::<f64>() / res.len() as f64;
        let sd = (res.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (res.len() - 1) as f64).sqrt();
        assert!((sd / sigma[c] - 1.0).abs() <= 0.02, "channel {c}: {sd}");
    }
    assert!(obs
        .iter()
        .zip(&schedule)
        .all(|(r, (t, c))| r.time == *t && r.channel == *c));

    let exact = simulate_observations(&traj, &schedule[..100], &[0.0, 0.0], &mut rng).unwrap();
    for r in exact {
        assert_eq!(r.value, eval_trajectory(&traj, r.time).unwrap()[r.channel]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn context_and_targets_stay_separated(seed in any::<u64>(), obs in 2usize..20) {
        let mut c = cfg(ModelKind::Mmk, (10, 1, 1), seed);
        c.obs_per_part = obs;
        let d = generate_dataset(&c).unwrap();
        for t in d.train.iter().chain(&d.val).chain(&d.test) {
            prop_assert!(t.context.records().iter().all(|r| r.time <= c.t_split));
            prop_assert!(t.targets.records().iter().all(|r| r.time > c.t_split));
        }
    }
}
