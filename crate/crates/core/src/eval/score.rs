use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mechanistic::{eval_trajectory, integrate, OdeOptions};
use crate::series::{TrajectoryRecord, TripletRecord};
use crate::{CoreError, Result};

/// `1 - SSE / SST` with every residual scaled by its channel's noise
/// standard deviation. The reference for SST is the pooled mean of each
/// channel's targets.
pub fn noise_normalized_r2(predictions: &[f64], targets: &[TripletRecord], sigma: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(CoreError::Scoring(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let means = channel_means(targets.iter(), sigma.len());
    let (mut sse, mut sst) = (0.0, 0.0);
    for (p, r) in predictions.iter().zip(targets) {
        let s = sigma[r.channel];
        sse += ((p - r.value) / s).powi(2);
        sst += ((r.value - means[r.channel]) / s).powi(2);
    }
    if !(sst > 0.0) {
        return Err(CoreError::Scoring("targets are constant within every channel".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Pooled mean of target values per channel (0 for a channel with none).
pub fn channel_means<'a>(targets: impl Iterator<Item = &'a TripletRecord>, n_channels: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_channels];
    let mut n = vec![0usize; n_channels];
    for r in targets {
        sum[r.channel] += r.value;
        n[r.channel] += 1;
    }
    sum.iter()
        .zip(&n)
        .map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
        .collect()
}

/// Model values at each target under the generating parameters.
pub fn ground_truth_forecast(trajectories: &[TrajectoryRecord], t_max: f64) -> Result<Vec<Vec<f64>>> {
    let opts = OdeOptions::default();
    trajectories
        .iter()
        .map(|tr| {
            let dense = integrate(&tr.params, t_max, &opts)?;
            tr.targets
                .records()
                .iter()
                .map(|r| Ok(eval_trajectory(&dense, r.time)?[r.channel]))
                .collect()
        })
        .collect()
}

/// Per-trajectory, per-channel sufficient statistics of the normalized
/// residuals. Values are centred on the split's pooled channel mean so
/// that resampled totals do not cancel catastrophically.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreParts {
    pub n: Vec<usize>,
    pub sum_u: Vec<f64>,
    pub sum_u2: Vec<f64>,
    pub sse: Vec<f64>,
}

/// Splits the scoring sums by trajectory and channel.
pub fn score_parts(
    predictions: &[Vec<f64>],
    trajectories: &[TrajectoryRecord],
    sigma: &[f64],
    means: &[f64],
) -> Vec<ScoreParts> {
    let c = sigma.len();
    trajectories
        .iter()
        .zip(predictions)
        .map(|(tr, preds)| {
            let mut p = ScoreParts {
                n: vec![0; c],
                sum_u: vec![0.0; c],
                sum_u2: vec![0.0; c],
                sse: vec![0.0; c],
            };
            for (r, y) in tr.targets.records().iter().zip(preds) {
                let k = r.channel;
                let u = (r.value - means[k]) / sigma[k];
                p.n[k] += 1;
                p.sum_u[k] += u;
                p.sum_u2[k] += u * u;
                p.sse[k] += ((y - r.value) / sigma[k]).powi(2);
            }
            p
        })
        .collect()
}

/// R² from summed parts, overall and per channel.
fn r2_from_parts<'a>(parts: impl Iterator<Item = &'a ScoreParts>, c: usize) -> (f64, Vec<f64>) {
    let mut n = vec![0usize; c];
    let mut su = vec![0.0; c];
    let mut su2 = vec![0.0; c];
    let mut sse = vec![0.0; c];
    for p in parts {
        for k in 0..c {
            n[k] += p.n[k];
            su[k] += p.sum_u[k];
            su2[k] += p.sum_u2[k];
            sse[k] += p.sse[k];
        }
    }
    let sst: Vec<f64> = (0..c)
        .map(|k| {
            if n[k] > 0 {
                su2[k] - su[k] * su[k] / n[k] as f64
            } else {
                0.0
            }
        })
        .collect();
    let total = 1.0 - sse.iter().sum::<f64>() / sst.iter().sum::<f64>();
    let per = (0..c).map(|k| 1.0 - sse[k] / sst[k]).collect();
    (total, per)
}

/// Standard deviation of R² over bootstrap resamples of whole
/// trajectories. Deterministic in `seed`.
pub fn bootstrap_stderr(parts: &[ScoreParts], resamples: usize, seed: u64) -> f64 {
    let m = parts.len();
    if m < 2 || resamples < 2 {
        return 0.0;
    }
    let c = parts[0].n.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; m];
    let draws: Vec<f64> = (0..resamples)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..m);
            }
            r2_from_parts(idx.iter().map(|&i| &parts[i]), c).0
        })
        .collect();
    // shifted by the first draw so identical draws give exactly 0
    let k = draws[0];
    let (s, s2) = draws
        .iter()
        .fold((0.0, 0.0), |(a, b), x| (a + (x - k), b + (x - k) * (x - k)));
    let nf = resamples as f64;
    ((s2 - s * s / nf) / (nf - 1.0)).max(0.0).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub method: String,
    pub dataset: String,
    pub r2: f64,
    pub stderr: f64,
    pub n_targets: usize,
    /// Trajectories scored with pooled channel means because the method
    /// produced no finite forecast.
    pub n_failed: usize,
    pub per_channel: IndexMap<String, f64>,
}

/// Scores one method on one split. A `None` entry marks a trajectory the
/// method could not forecast; its targets are predicted by the pooled
/// channel means.
pub fn score_method(
    method: &str,
    dataset: &str,
    trajectories: &[TrajectoryRecord],
    predictions: &[Option<Vec<f64>>],
    sigma: &[f64],
    channel_names: &[String],
    resamples: usize,
    seed: u64,
) -> Result<ScoreRecord> {
    if trajectories.len() != predictions.len() {
        return Err(CoreError::Scoring(format!(
            "{} forecasts for {} trajectories",
            predictions.len(),
            trajectories.len()
        )));
    }
    let c = sigma.len();
    let means = channel_means(trajectories.iter().flat_map(|t| t.targets.records()), c);
    let mut n_failed = 0;
    let filled: Vec<Vec<f64>> = trajectories
        .iter()
        .zip(predictions)
        .map(|(tr, p)| match p {
            Some(v) if v.len() == tr.targets.len() && v.iter().all(|x| x.is_finite()) => v.clone(),
            _ => {
                n_failed += 1;
                tr.targets.records().iter().map(|r| means[r.channel]).collect()
            }
        })
        .collect();
    let flat_p: Vec<f64> = filled.iter().flatten().copied().collect();
    let flat_t: Vec<TripletRecord> = trajectories
        .iter()
        .flat_map(|t| t.targets.records().iter().copied())
        .collect();
    if flat_t.is_empty() {
        return Err(CoreError::Scoring("no targets to score".into()));
    }
    let r2 = noise_normalized_r2(&flat_p, &flat_t, sigma)?;
    let parts = score_parts(&filled, trajectories, sigma, &means);
    let (_, per) = r2_from_parts(parts.iter(), c);
    Ok(ScoreRecord {
        method: method.to_string(),
        dataset: dataset.to_string(),
        r2,
        stderr: bootstrap_stderr(&parts, resamples, seed),
        n_targets: flat_t.len(),
        n_failed,
        per_channel: channel_names.iter().cloned().zip(per).collect(),
    })
}

/// Each trajectory's share `SSE_i / SST` of the split's normalized error.
pub fn r2_contributions(parts: &[ScoreParts]) -> Vec<f64> {
    let c = parts.first().map_or(0, |p| p.n.len());
    let (mut n, mut su, mut su2) = (vec![0usize; c], vec![0.0; c], vec![0.0; c]);
    for p in parts {
        for k in 0..c {
            n[k] += p.n[k];
            su[k] += p.sum_u[k];
            su2[k] += p.sum_u2[k];
        }
    }
    let sst: f64 = (0..c)
        .filter(|&k| n[k] > 0)
        .map(|k| su2[k] - su[k] * su[k] / n[k] as f64)
        .sum();
    parts.iter().map(|p| p.sse.iter().sum::<f64>() / sst).collect()
}
