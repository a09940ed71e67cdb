//! Synthetic benchmark datasets: observation schedules, measurement noise,
//! train/val/test splits and the on-disk format.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mechanistic::{
    eval_trajectory, integrate, sample_params, DenseTrajectory, MechanisticParams, ModelKind, OdeOptions, PriorSpec,
};
use crate::series::{
    compute_normalization_stats, split_by_horizon, ChannelSpec, Dataset, NormalizationStats, SparseSeries, SplitName,
    TrajectoryRecord, TripletRecord, TruthGrid, DATASET_FORMAT_VERSION,
};
use crate::{CoreError, Result};

/// Number of evenly spaced times in every stored truth grid.
pub const TRUTH_GRID_POINTS: usize = 101;

/// Largest tolerated fraction of trajectories that needed a fresh
/// parameter draw after a failed integration.
pub const MAX_RESAMPLE_FRACTION: f64 = 0.01;

const MAX_ATTEMPTS_PER_TRAJECTORY: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub model_kind: ModelKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Observations in each of the context and target parts.
    pub obs_per_part: usize,
    /// Per-channel noise standard deviation, in channel units.
    pub noise_std: Vec<f64>,
    pub prior: PriorSpec,
    pub seed: u64,
    pub t_max: f64,
    pub t_split: f64,
}

impl GenerationConfig {
    /// Default priors, horizons and noise levels for `kind`, with the
    /// benchmark dataset sizes.
    pub fn defaults(kind: ModelKind) -> Self {
        let (obs_per_part, noise_std, t_max, t_split) = match kind {
            ModelKind::Mmk => (14, vec![MMK_NOISE_STD, MMK_NOISE_STD], 4.0, 2.0),
            ModelKind::Ecoli => (30, ECOLI_NOISE_STD.to_vec(), 10.0, 5.0),
        };
        Self {
            model_kind: kind,
            n_train: 50_000,
            n_val: 5_000,
            n_test: 5_000,
            obs_per_part,
            noise_std,
            prior: PriorSpec::default_for(kind),
            seed: 0,
            t_max,
            t_split,
        }
    }

    pub fn count(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.n_train,
            SplitName::Val => self.n_val,
            SplitName::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Validation(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("n_train, n_val and n_test must be > 0".into());
        }
        if self.obs_per_part == 0 {
            return bad("obs_per_part must be >= 1".into());
        }
        let c = self.model_kind.n_channels();
        if self.noise_std.len() != c {
            return bad(format!(
                "noise_std needs {c} entries for {}, got {}",
                self.model_kind,
                self.noise_std.len()
            ));
        }
        if let Some(s) = self.noise_std.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return bad(format!("noise_std must be > 0, got {s}"));
        }
        if self.prior.kind() != self.model_kind {
            return bad(format!(
                "prior is for {}, model is {}",
                self.prior.kind(),
                self.model_kind
            ));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0 && self.t_split > 0.0 && self.t_split < self.t_max) {
            return bad(format!(
                "need 0 < t_split < t_max, got t_split = {}, t_max = {}",
                self.t_split, self.t_max
            ));
        }
        Ok(())
    }
}

/// MMK noise level for both channels, g/L. Calibrated so that the true
/// model scores a noise-normalized R² of about 0.98 on held-out targets.
pub const MMK_NOISE_STD: f64 = 0.0447;

/// E. coli noise levels `(X, S, A, DOT)`: the 0.2 / 0.2 / 0.05 / 2.0
/// ratios scaled by 0.535 so that the true model scores about 0.994.
pub const ECOLI_NOISE_STD: [f64; 4] = [0.107, 0.107, 0.0268, 1.07];

/// `n` sorted times, i.i.d. uniform on the open interval `(lo, hi)`, each
/// paired with a channel drawn uniformly from `0..n_channels`.
pub fn sample_observation_schedule<R: Rng + ?Sized>(
    n: usize,
    range: (f64, f64),
    n_channels: usize,
    rng: &mut R,
) -> Vec<(f64, usize)> {
    let (lo, hi) = range;
    assert!(
        lo < hi && n_channels > 0,
        "schedule needs lo < hi and at least one channel"
    );
    let mut out: Vec<(f64, usize)> = (0..n)
        .map(|_| {
            let t = loop {
                let t = rng.random_range(lo..hi);
                if t > lo {
                    break t;
                }
            };
            (t, rng.random_range(0..n_channels))
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    out
}

/// True channel value at every scheduled time plus Gaussian noise.
pub fn simulate_observations<R: Rng + ?Sized>(
    traj: &DenseTrajectory,
    schedule: &[(f64, usize)],
    noise_std: &[f64],
    rng: &mut R,
) -> Result<Vec<TripletRecord>> {
    schedule
        .iter()
        .map(|&(t, c)| {
            let truth = eval_trajectory(traj, t)?[c];
            let noise = Normal::new(0.0, noise_std[c])
                .map_err(|e| CoreError::Validation(format!("noise_std {}: {e}", noise_std[c])))?
                .sample(rng);
            Ok(TripletRecord::new(t, c, truth + noise))
        })
        .collect()
}

/// Mixes the base seed with a split tag and trajectory index so every
/// trajectory owns an independent random stream.
pub fn child_seed(seed: u64, split: SplitName, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ split.index()) ^ index)
}

/// Evenly spaced times on `[0, t_max]`.
pub fn truth_times(t_max: f64) -> Vec<f64> {
    let n = TRUTH_GRID_POINTS - 1;
    (0..=n)
        .map(|i| if i == n { t_max } else { t_max * i as f64 / n as f64 })
        .collect()
}

fn truth_grid(traj: &DenseTrajectory, t_max: f64) -> Result<TruthGrid> {
    let times = truth_times(t_max);
    let values = times.iter().map(|&t| eval_trajectory(traj, t)).collect::<Result<_>>()?;
    Ok(TruthGrid { times, values })
}

/// One trajectory and the number of parameter draws that were discarded.
fn generate_one(cfg: &GenerationConfig, split: SplitName, index: usize) -> Result<(TrajectoryRecord, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, split, index as u64));
    let opts = OdeOptions::default();
    let c = cfg.model_kind.n_channels();
    for attempt in 0..MAX_ATTEMPTS_PER_TRAJECTORY {
        let params = sample_params(&cfg.prior, &mut rng);
        let traj = match integrate(&params, cfg.t_max, &opts) {
            Ok(t) => t,
            Err(e) if e.is_numerical() => {
                log::debug!("{split}[{index}]: resampling after {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut schedule = sample_observation_schedule(cfg.obs_per_part, (0.0, cfg.t_split), c, &mut rng);
        schedule.extend(sample_observation_schedule(
            cfg.obs_per_part,
            (cfg.t_split, cfg.t_max),
            c,
            &mut rng,
        ));
        let records = simulate_observations(&traj, &schedule, &cfg.noise_std, &mut rng)?;
        let (context, targets) = split_by_horizon(&records, cfg.t_split, cfg.t_max)?;
        let truth = truth_grid(&traj, cfg.t_max)?;
        return Ok((
            TrajectoryRecord {
                params,
                context,
                targets,
                truth,
            },
            attempt,
        ));
    }
    Err(CoreError::Generation(format!(
        "{split}[{index}]: {MAX_ATTEMPTS_PER_TRAJECTORY} consecutive parameter draws failed to integrate"
    )))
}

/// Simulates every split of `cfg`. Runs on the current rayon pool; the
/// output does not depend on its size.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut splits = Vec::with_capacity(3);
    let mut resample_count = 0;
    for split in SplitName::ALL {
        let made = (0..cfg.count(split))
            .into_par_iter()
            .map(|i| generate_one(cfg, split, i))
            .collect::<Result<Vec<_>>>()?;
        let mut trajs = Vec::with_capacity(made.len());
        for (t, r) in made {
            resample_count += r;
            trajs.push(t);
        }
        splits.push(trajs);
    }
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    if resample_count > 0 {
        log::info!("resampled {resample_count} parameter draws out of {total} trajectories");
    }
    if resample_count as f64 > MAX_RESAMPLE_FRACTION * total as f64 {
        return Err(CoreError::Generation(format!(
            "{resample_count} of {total} trajectories needed resampling; the prior is likely pathological"
        )));
    }
    let channels = ChannelSpec::for_model(cfg.model_kind, &cfg.noise_std);
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let stats = compute_normalization_stats(&train, &channels, cfg.t_max)?;
    Ok(Dataset {
        format_version: DATASET_FORMAT_VERSION,
        model_kind: cfg.model_kind,
        channels,
        train,
        val,
        test,
        seed: cfg.seed,
        stats,
        prior: cfg.prior.clone(),
        obs_per_part: cfg.obs_per_part,
        t_split: cfg.t_split,
        t_max: cfg.t_max,
        resample_count,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    model_kind: ModelKind,
    channels: Vec<ChannelSpec>,
    prior: PriorSpec,
    seed: u64,
    stats: NormalizationStats,
    obs_per_part: usize,
    t_split: f64,
    t_max: f64,
    resample_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    params: IndexMap<String, f64>,
    context: Vec<TripletRecord>,
    targets: Vec<TripletRecord>,
    truth: TruthGrid,
}

pub const META_FILE: &str = "meta.json";

pub fn split_file(split: SplitName) -> String {
    format!("{split}.jsonl")
}

/// Writes `meta.json` and one JSON-lines file per split into `dir`.
pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        format_version: d.format_version,
        model_kind: d.model_kind,
        channels: d.channels.clone(),
        prior: d.prior.clone(),
        seed: d.seed,
        stats: d.stats.clone(),
        obs_per_part: d.obs_per_part,
        t_split: d.t_split,
        t_max: d.t_max,
        resample_count: d.resample_count,
    };
    let mut f = BufWriter::new(File::create(dir.join(META_FILE))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    f.flush()?;
    for split in SplitName::ALL {
        let mut f = BufWriter::new(File::create(dir.join(split_file(split)))?);
        for t in d.split(split) {
            let line = TrajectoryLine {
                params: t.params.to_map(),
                context: t.context.records().to_vec(),
                targets: t.targets.records().to_vec(),
                truth: t.truth.clone(),
            };
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path)?;
    let parse_err = |line: usize, msg: String| CoreError::Parse {
        file: meta_path.clone(),
        line,
        msg,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.line(), e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| parse_err(1, "missing integer `format_version`".into()))?;
    if found != DATASET_FORMAT_VERSION {
        return Err(CoreError::VersionMismatch {
            found,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let meta: Meta = serde_json::from_str(&text).map_err(|e| parse_err(e.line(), e.to_string()))?;

    let mut splits = Vec::with_capacity(3);
    for split in SplitName::ALL {
        let path = dir.join(split_file(split));
        let reader = BufReader::new(File::open(&path)?);
        let mut trajs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let err = |msg: String| CoreError::Parse {
                file: path.clone(),
                line: i + 1,
                msg,
            };
            let tl: TrajectoryLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let params = MechanisticParams::from_map(meta.model_kind, &tl.params).map_err(|e| err(e.to_string()))?;
            let context = SparseSeries::new(tl.context, meta.t_split, meta.t_max).map_err(|e| err(e.to_string()))?;
            let targets = SparseSeries::new(tl.targets, meta.t_split, meta.t_max).map_err(|e| err(e.to_string()))?;
            trajs.push(TrajectoryRecord {
                params,
                context,
                targets,
                truth: tl.truth,
            });
        }
        splits.push(trajs);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset {
        format_version: meta.format_version,
        model_kind: meta.model_kind,
        channels: meta.channels,
        train,
        val,
        test,
        seed: meta.seed,
        stats: meta.stats,
        prior: meta.prior,
        obs_per_part: meta.obs_per_part,
        t_split: meta.t_split,
        t_max: meta.t_max,
        resample_count: meta.resample_count,
    })
}
