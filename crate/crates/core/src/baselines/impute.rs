use serde::{Deserialize, Serialize};

use crate::series::SparseSeries;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImputeMethod {
    Linear,
    Rbf,
}

/// Bandwidth of the Gaussian kernel used by [`impute_rbf`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median gap between consecutive observation times of the channel,
    /// floored at `t_split / (2 n)` for a grid of `n` points.
    MedianGap,
    Fixed(f64),
}

/// Channel values on a regular time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputedGrid {
    pub times: Vec<f64>,
    /// `values[i][c]` is channel `c` at `times[i]`.
    pub values: Vec<Vec<f64>>,
    pub method: ImputeMethod,
}

/// `n` evenly spaced points on `[0, t_split]`, both ends included exactly.
pub fn make_regular_grid(n: usize, t_split: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(CoreError::Contract(format!(
            "regular grid needs at least 2 points, got {n}"
        )));
    }
    let last = n - 1;
    Ok((0..n)
        .map(|i| {
            if i == last {
                t_split
            } else {
                t_split * i as f64 / last as f64
            }
        })
        .collect())
}

fn channel_points(context: &SparseSeries, c: usize) -> (Vec<f64>, Vec<f64>) {
    context.channel(c).map(|r| (r.time, r.value)).unzip()
}

/// Piecewise-linear interpolation of one channel, flat outside the hull.
pub fn interp_linear(ts: &[f64], vs: &[f64], t: f64) -> f64 {
    let n = ts.len();
    debug_assert!(n > 0);
    if t <= ts[0] {
        return vs[0];
    }
    if t >= ts[n - 1] {
        return vs[n - 1];
    }
    // first index with ts[j] > t; 1 <= j <= n-1 here
    let j = ts.partition_point(|&x| x <= t);
    let (t0, t1, v0, v1) = (ts[j - 1], ts[j], vs[j - 1], vs[j]);
    if t == t0 || t1 == t0 {
        return v0;
    }
    v0 + (v1 - v0) * ((t - t0) / (t1 - t0))
}

/// Linear spline per channel. Channels without observations take
/// `fill[c]`, normally the training mean.
pub fn impute_linear(context: &SparseSeries, grid: &[f64], n_channels: usize, fill: &[f64]) -> ImputedGrid {
    let per_channel: Vec<Vec<f64>> = (0..n_channels)
        .map(|c| {
            let (ts, vs) = channel_points(context, c);
            if ts.is_empty() {
                vec![fill[c]; grid.len()]
            } else {
                grid.iter().map(|&t| interp_linear(&ts, &vs, t)).collect()
            }
        })
        .collect();
    transpose(grid, per_channel, ImputeMethod::Linear)
}

/// Median of consecutive gaps between sorted `ts`, floored at `floor`.
pub fn median_gap_bandwidth(ts: &[f64], floor: f64) -> f64 {
    let mut gaps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return floor;
    }
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len();
    let med = if m % 2 == 1 {
        gaps[m / 2]
    } else {
        0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
    };
    med.max(floor)
}

/// Nadaraya–Watson estimate at `t` with a Gaussian kernel of width `h`.
/// Weights are shifted by their largest exponent so that very small `h`
/// degrades to nearest-neighbour instead of 0/0.
pub fn nadaraya_watson(ts: &[f64], vs: &[f64], t: f64, h: f64) -> f64 {
    let inv = 1.0 / (2.0 * h * h);
    let expo: Vec<f64> = ts.iter().map(|&ti| -(t - ti) * (t - ti) * inv).collect();
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (e, v) in expo.iter().zip(vs) {
        let w = (e - top).exp();
        num += w * v;
        den += w;
    }
    let (lo, hi) = vs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // a convex combination; clamp away rounding past the hull
    (num / den).clamp(lo, hi)
}

/// RBF kernel regression per channel. Channels without observations take
/// `fill[c]`.
pub fn impute_rbf(
    context: &SparseSeries,
    grid: &[f64],
    n_channels: usize,
    bandwidth: Bandwidth,
    fill: &[f64],
) -> ImputedGrid {
    let floor = context.t_split() / (2.0 * grid.len().max(1) as f64);
    let per_channel: Vec<Vec<f64>> = (0..n_channels)
        .map(|c| {
            let (ts, vs) = channel_points(context, c);
            if ts.is_empty() {
                return vec![fill[c]; grid.len()];
            }
            let h = match bandwidth {
                Bandwidth::MedianGap => median_gap_bandwidth(&ts, floor),
                Bandwidth::Fixed(h) => h,
            };
            grid.iter().map(|&t| nadaraya_watson(&ts, &vs, t, h)).collect()
        })
        .collect();
    transpose(grid, per_channel, ImputeMethod::Rbf)
}

fn transpose(grid: &[f64], per_channel: Vec<Vec<f64>>, method: ImputeMethod) -> ImputedGrid {
    let values = (0..grid.len())
        .map(|i| per_channel.iter().map(|col| col[i]).collect())
        .collect();
    ImputedGrid {
        times: grid.to_vec(),
        values,
        method,
    }
}
