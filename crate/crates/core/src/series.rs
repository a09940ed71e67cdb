//! Sparse multichannel series as sets of `(time, channel, value)` triplets,
//! datasets of simulated cultivations, and per-channel normalization.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mechanistic::{MechanisticParams, ModelKind, PriorSpec};
use crate::{CoreError, Result};

/// Current on-disk dataset format.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Lower bound applied to every per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub id: usize,
    pub name: String,
    pub unit: String,
    /// Standard deviation of the additive measurement noise, in `unit`.
    pub noise_std: f64,
}

impl ChannelSpec {
    pub fn for_model(kind: ModelKind, noise_std: &[f64]) -> Vec<ChannelSpec> {
        kind.channels()
            .iter()
            .zip(noise_std)
            .enumerate()
            .map(|(id, ((name, unit), s))| ChannelSpec {
                id,
                name: name.to_string(),
                unit: unit.to_string(),
                noise_std: *s,
            })
            .collect()
    }
}

/// One measurement. Serialized as `[time, channel, value]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, usize, f64)", into = "(f64, usize, f64)")]
pub struct TripletRecord {
    pub time: f64,
    pub channel: usize,
    pub value: f64,
}

impl From<(f64, usize, f64)> for TripletRecord {
    fn from((time, channel, value): (f64, usize, f64)) -> Self {
        Self { time, channel, value }
    }
}

impl From<TripletRecord> for (f64, usize, f64) {
    fn from(r: TripletRecord) -> Self {
        (r.time, r.channel, r.value)
    }
}

impl TripletRecord {
    pub fn new(time: f64, channel: usize, value: f64) -> Self {
        Self { time, channel, value }
    }

    /// Total order by `(time, channel, value)`, comparing floats with
    /// `total_cmp` so that equal keys are bit-identical.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.channel.cmp(&other.channel))
            .then(self.value.total_cmp(&other.value))
    }
}

/// Sorts records into canonical order.
pub fn canonicalize(records: &mut [TripletRecord]) {
    records.sort_by(TripletRecord::canonical_cmp);
}

pub fn is_canonical(records: &[TripletRecord]) -> bool {
    records
        .windows(2)
        .all(|w| w[0].canonical_cmp(&w[1]) != Ordering::Greater)
}

/// Records of one part of a cultivation, held in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSeries {
    records: Vec<TripletRecord>,
    t_split: f64,
    t_max: f64,
}

impl SparseSeries {
    /// Canonicalizes `records` and checks the horizon invariants.
    pub fn new(mut records: Vec<TripletRecord>, t_split: f64, t_max: f64) -> Result<Self> {
        if !(t_split.is_finite() && t_max.is_finite() && 0.0 <= t_split && t_split <= t_max) {
            return Err(CoreError::Validation(format!(
                "need 0 <= t_split <= t_max, got t_split = {t_split}, t_max = {t_max}"
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if !(r.time.is_finite() && r.time >= 0.0 && r.time <= t_max) {
                return Err(CoreError::Validation(format!(
                    "record {i} has time {} outside [0, {t_max}]",
                    r.time
                )));
            }
        }
        canonicalize(&mut records);
        Ok(Self {
            records,
            t_split,
            t_max,
        })
    }

    pub fn empty(t_split: f64, t_max: f64) -> Self {
        Self {
            records: Vec::new(),
            t_split,
            t_max,
        }
    }

    pub fn records(&self) -> &[TripletRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn t_split(&self) -> f64 {
        self.t_split
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Records of channel `c` in time order.
    pub fn channel(&self, c: usize) -> impl Iterator<Item = &TripletRecord> + '_ {
        self.records.iter().filter(move |r| r.channel == c)
    }

    /// Same horizon, replaced records (re-canonicalized).
    pub fn with_records(&self, records: Vec<TripletRecord>) -> Result<Self> {
        Self::new(records, self.t_split, self.t_max)
    }

    /// Mutable access that bypasses validation; for fault-injection tests.
    #[doc(hidden)]
    pub fn records_mut_unchecked(&mut self) -> &mut Vec<TripletRecord> {
        &mut self.records
    }
}

/// Splits records at the forecast horizon: `time <= t_split` is context,
/// `time > t_split` is target.
pub fn split_by_horizon(records: &[TripletRecord], t_split: f64, t_max: f64) -> Result<(SparseSeries, SparseSeries)> {
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| !r.time.is_finite()) {
        return Err(CoreError::Validation(format!(
            "record {i} has non-finite time {}",
            r.time
        )));
    }
    let (ctx, tgt): (Vec<_>, Vec<_>) = records.iter().partition(|r| r.time <= t_split);
    Ok((
        SparseSeries::new(ctx, t_split, t_max)?,
        SparseSeries::new(tgt, t_split, t_max)?,
    ))
}

/// Noiseless model values on an even grid, kept for plots and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthGrid {
    #[serde(rename = "t")]
    pub times: Vec<f64>,
    /// `values[i][c]` is channel `c` at `times[i]`.
    #[serde(rename = "y")]
    pub values: Vec<Vec<f64>>,
}

/// One simulated cultivation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub params: MechanisticParams,
    pub context: SparseSeries,
    pub targets: SparseSeries,
    pub truth: TruthGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub t_max: f64,
}

impl NormalizationStats {
    pub fn identity(n_channels: usize, t_max: f64) -> Self {
        Self {
            mean: vec![0.0; n_channels],
            std: vec![1.0; n_channels],
            t_max,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_value(&self, channel: usize, value: f64) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize_value(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}

/// Per-channel mean and population standard deviation over every context
/// and target value of `train`. Standard deviations are floored at
/// [`STD_FLOOR`].
pub fn compute_normalization_stats(
    train: &[TrajectoryRecord],
    channels: &[ChannelSpec],
    t_max: f64,
) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(CoreError::Contract(
            "normalization needs a non-empty training split".into(),
        ));
    }
    let c = channels.len();
    let mut count = vec![0usize; c];
    let mut sum = vec![0.0f64; c];
    let all = || {
        train
            .iter()
            .flat_map(|t| t.context.records().iter().chain(t.targets.records()))
    };
    for r in all() {
        if r.channel < c {
            count[r.channel] += 1;
            sum[r.channel] += r.value;
        }
    }
    if let Some(ch) = (0..c).find(|&ch| count[ch] < 2) {
        return Err(CoreError::SparseChannel(channels[ch].name.clone()));
    }
    let mean: Vec<f64> = (0..c).map(|ch| sum[ch] / count[ch] as f64).collect();
    let mut ss = vec![0.0f64; c];
    for r in all() {
        if r.channel < c {
            let d = r.value - mean[r.channel];
            ss[r.channel] += d * d;
        }
    }
    let std = (0..c)
        .map(|ch| (ss[ch] / count[ch] as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormalizationStats { mean, std, t_max })
}

/// `(time / t_max, channel, (value - mean_c) / std_c)`.
pub fn normalize_record(r: &TripletRecord, stats: &NormalizationStats) -> TripletRecord {
    TripletRecord {
        time: r.time / stats.t_max,
        channel: r.channel,
        value: stats.normalize_value(r.channel, r.value),
    }
}

/// Inverse of [`normalize_record`].
pub fn denormalize_record(r: &TripletRecord, stats: &NormalizationStats) -> TripletRecord {
    TripletRecord {
        time: r.time * stats.t_max,
        channel: r.channel,
        value: stats.denormalize_value(r.channel, r.value),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            SplitName::Train => 0,
            SplitName::Val => 1,
            SplitName::Test => 2,
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A versioned benchmark dataset together with its generation metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub channels: Vec<ChannelSpec>,
    pub train: Vec<TrajectoryRecord>,
    pub val: Vec<TrajectoryRecord>,
    pub test: Vec<TrajectoryRecord>,
    pub seed: u64,
    pub stats: NormalizationStats,
    pub prior: PriorSpec,
    pub obs_per_part: usize,
    pub t_split: f64,
    pub t_max: f64,
    pub resample_count: usize,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[TrajectoryRecord] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Vec<TrajectoryRecord> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.noise_std).collect()
    }
}

/// One broken invariant found by [`validate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub split: Option<SplitName>,
    pub trajectory: Option<usize>,
    pub record: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.split {
            write!(f, "{s}")?;
        }
        if let Some(t) = self.trajectory {
            write!(f, "[trajectory {t}]")?;
        }
        if let Some(r) = self.record {
            write!(f, "[record {r}]")?;
        }
        if self.split.is_some() {
            f.write_str(": ")?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, split: Option<SplitName>, trajectory: Option<usize>, record: Option<usize>, message: String) {
        self.violations.push(Violation {
            split,
            trajectory,
            record,
            message,
        });
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Collects every violated dataset invariant. Never fails.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let c = d.channels.len();
    let mut names = HashSet::new();
    for (i, ch) in d.channels.iter().enumerate() {
        if ch.id != i {
            rep.push(
                None,
                None,
                None,
                format!("channel ids not contiguous: position {i} has id {}", ch.id),
            );
        }
        if !(ch.noise_std > 0.0 && ch.noise_std.is_finite()) {
            rep.push(
                None,
                None,
                None,
                format!("channel {} has noise_std {}", ch.name, ch.noise_std),
            );
        }
        if !names.insert(ch.name.as_str()) {
            rep.push(None, None, None, format!("duplicate channel name {}", ch.name));
        }
    }
    if c != d.model_kind.n_channels() {
        rep.push(
            None,
            None,
            None,
            format!(
                "{} expects {} channels, found {c}",
                d.model_kind,
                d.model_kind.n_channels()
            ),
        );
    }
    if !(0.0 <= d.t_split && d.t_split <= d.t_max && d.t_max.is_finite()) {
        rep.push(
            None,
            None,
            None,
            format!("bad horizon t_split = {}, t_max = {}", d.t_split, d.t_max),
        );
    }

    let mut train_records_ok = true;
    for split in SplitName::ALL {
        for (ti, traj) in d.split(split).iter().enumerate() {
            let before = rep.violations.len();
            validate_trajectory(d, split, ti, traj, &mut rep);
            if split == SplitName::Train && rep.violations.len() > before {
                train_records_ok = false;
            }
        }
    }

    if d.stats.mean.len() != c || d.stats.std.len() != c {
        rep.push(
            None,
            None,
            None,
            "normalization stats have the wrong number of channels".into(),
        );
    } else {
        if let Some(s) = d.stats.std.iter().find(|s| !(**s > 0.0)) {
            rep.push(None, None, None, format!("normalization std {s} is not positive"));
        }
        if d.stats.t_max != d.t_max {
            rep.push(
                None,
                None,
                None,
                "normalization t_max differs from dataset t_max".into(),
            );
        }
        // a broken training record already explains any mismatch here
        if train_records_ok {
            match compute_normalization_stats(&d.train, &d.channels, d.t_max) {
                Ok(fresh) => {
                    let ok = (0..c).all(|ch| {
                        rel_close(fresh.mean[ch], d.stats.mean[ch], 1e-9)
                            && rel_close(fresh.std[ch], d.stats.std[ch], 1e-9)
                    });
                    if !ok {
                        rep.push(
                            None,
                            None,
                            None,
                            "normalization stats do not match the training split".into(),
                        );
                    }
                }
                Err(e) => rep.push(Some(SplitName::Train), None, None, e.to_string()),
            }
        }
    }
    rep
}

fn validate_trajectory(d: &Dataset, split: SplitName, ti: usize, traj: &TrajectoryRecord, rep: &mut ValidationReport) {
    let c = d.channels.len();
    let at = |rep: &mut ValidationReport, rec: Option<usize>, msg: String| rep.push(Some(split), Some(ti), rec, msg);
    if traj.params.kind() != d.model_kind {
        at(
            rep,
            None,
            format!("parameters are for {}, dataset is {}", traj.params.kind(), d.model_kind),
        );
    } else if let Err(e) = traj.params.validate() {
        at(rep, None, e.to_string());
    }
    for (part, series) in [("context", &traj.context), ("targets", &traj.targets)] {
        if series.t_split() != d.t_split || series.t_max() != d.t_max {
            at(rep, None, format!("{part} horizon differs from the dataset's"));
        }
        if !is_canonical(series.records()) {
            at(rep, None, format!("{part} records are not in canonical order"));
        }
        for (ri, r) in series.records().iter().enumerate() {
            let rec = Some(ri);
            if !(r.time.is_finite() && r.time >= 0.0 && r.time <= d.t_max) {
                at(rep, rec, format!("{part} time {} outside [0, {}]", r.time, d.t_max));
            } else if part == "context" && r.time > d.t_split {
                at(rep, rec, format!("context time {} after t_split", r.time));
            } else if part == "targets" && r.time <= d.t_split {
                at(rep, rec, format!("target time {} not after t_split", r.time));
            }
            if r.channel >= c {
                at(rep, rec, format!("{part} channel {} out of range 0..{c}", r.channel));
            }
            if !r.value.is_finite() {
                at(rep, rec, format!("{part} value {} is not finite", r.value));
            }
        }
    }
    let grid = &traj.truth;
    if grid.times.len() != grid.values.len()
        || grid
            .values
            .iter()
            .any(|row| row.len() != c || row.iter().any(|v| !v.is_finite()))
    {
        at(rep, None, "truth grid is malformed or non-finite".into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, c: usize, v: f64) -> TripletRecord {
        TripletRecord::new(t, c, v)
    }

    #[test]
    fn boundary_goes_to_context() {
        let rs = vec![rec(3.0, 0, 1.0), rec(1.0, 1, 2.0), rec(2.0, 0, 0.5)];
        let (ctx, tgt) = split_by_horizon(&rs, 2.0, 4.0).unwrap();
        let ct: Vec<f64> = ctx.records().iter().map(|r| r.time).collect();
        assert_eq!(ct, vec![1.0, 2.0]);
        assert_eq!(tgt.records(), &[rec(3.0, 0, 1.0)]);
    }

    #[test]
    fn empty_split() {
        let (ctx, tgt) = split_by_horizon(&[], 2.0, 4.0).unwrap();
        assert!(ctx.is_empty() && tgt.is_empty());
    }

    #[test]
    fn non_finite_time_is_rejected() {
        assert!(split_by_horizon(&[rec(f64::NAN, 0, 1.0)], 2.0, 4.0).is_err());
        assert!(split_by_horizon(&[rec(f64::INFINITY, 0, 1.0)], 2.0, 4.0).is_err());
    }

    fn traj_with(values: &[f64]) -> TrajectoryRecord {
        let params = MechanisticParams::new(ModelKind::Mmk, vec![1.0, 0.5, 1.0, 0.0]).unwrap();
        let rs: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, v)| rec(i as f64 * 0.1, 0, *v))
            .collect();
        TrajectoryRecord {
            params,
            context: SparseSeries::new(rs, 2.0, 4.0).unwrap(),
            targets: SparseSeries::empty(2.0, 4.0),
            truth: TruthGrid {
                times: vec![],
                values: vec![],
            },
        }
    }

    fn one_channel() -> Vec<ChannelSpec> {
        vec![ChannelSpec {
            id: 0,
            name: "A".into(),
            unit: "g/L".into(),
            noise_std: 0.1,
        }]
    }

    #[test]
    fn two_point_moments() {
        let s = compute_normalization_stats(&[traj_with(&[1.0, 3.0])], &one_channel(), 4.0).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn constant_values_hit_the_floor() {
        let s = compute_normalization_stats(&[traj_with(&[0.0, 0.0, 0.0])], &one_channel(), 4.0).unwrap();
        assert_eq!(s.mean, vec![0.0]);
        assert_eq!(s.std, vec![STD_FLOOR]);
    }

    #[test]
    fn sparse_channel_is_named() {
        let err = compute_normalization_stats(&[traj_with(&[1.0])], &one_channel(), 4.0).unwrap_err();
        assert!(err.to_string().contains("channel A"), "{err}");
    }

    #[test]
    fn z_score_arithmetic() {
        let stats = NormalizationStats {
            mean: vec![1.0],
            std: vec![2.0],
            t_max: 4.0,
        };
        assert_eq!(normalize_record(&rec(2.0, 0, 3.0), &stats), rec(0.5, 0, 1.0));
        let id = NormalizationStats::identity(1, 1.0);
        let r = rec(0.37, 0, -4.2);
        assert_eq!(normalize_record(&r, &id), r);
    }

    #[test]
    fn triplet_serializes_as_array() {
        let s = serde_json::to_string(&rec(0.5, 1, 1.2)).unwrap();
        assert_eq!(s, "[0.5,1,1.2]");
        assert_eq!(serde_json::from_str::<TripletRecord>(&s).unwrap(), rec(0.5, 1, 1.2));
    }
}
