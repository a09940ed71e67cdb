use serde::{Deserialize, Serialize};
use sparseset_nn::{Activation, Graph, Mlp, MlpConfig, MlpVars, Tensor, Var};

use crate::baselines::{impute_linear, impute_rbf, make_regular_grid, Bandwidth};
use crate::eval::Method;
use crate::series::{NormalizationStats, SparseSeries, TrajectoryRecord, TripletRecord};
use crate::{CoreError, Result};

/// How a context is turned into the set of vectors fed to the extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Encoding {
    /// One `[time, one-hot channel, value]` vector per measurement.
    Triplet,
    /// One `[time, value per channel]` vector per regular grid point,
    /// values filled in by linear interpolation.
    GridLinear,
    /// As `GridLinear` with RBF kernel regression.
    GridRbf,
}

impl Encoding {
    pub fn input_dim(self, n_channels: usize) -> usize {
        match self {
            Encoding::Triplet => n_channels + 2,
            Encoding::GridLinear | Encoding::GridRbf => n_channels + 1,
        }
    }

    pub fn method(self) -> Method {
        match self {
            Encoding::Triplet => Method::Triplet,
            Encoding::GridLinear => Method::Linear,
            Encoding::GridRbf => Method::Rbf,
        }
    }

    pub fn for_method(m: Method) -> Option<Self> {
        match m {
            Method::Triplet => Some(Encoding::Triplet),
            Method::Linear => Some(Encoding::GridLinear),
            Method::Rbf => Some(Encoding::GridRbf),
            Method::GroundTruth | Method::Fit => None,
        }
    }
}

/// `[t / t_max, one-hot(channel), (value - mean_c) / std_c]`.
pub fn encode_triplet(r: &TripletRecord, n_channels: usize, stats: &NormalizationStats) -> Vec<f64> {
    let mut v = vec![0.0; n_channels + 2];
    v[0] = r.time / stats.t_max;
    v[1 + r.channel] = 1.0;
    v[n_channels + 1] = stats.normalize_value(r.channel, r.value);
    v
}

/// Deep Set forecaster: `g([tau, sum_i f(x_i)])` decoded to every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSetModel {
    pub extractor: Mlp,
    pub aggregator: Mlp,
    pub stats: NormalizationStats,
    pub encoding: Encoding,
    pub channel_names: Vec<String>,
    /// Grid size for the imputing encodings.
    pub grid_points: usize,
    pub t_split: f64,
}

/// Architecture of a fresh [`DeepSetModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub latent_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub aggregator_hidden: Vec<usize>,
}

/// Contexts encoded as one row block per trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedBatch {
    pub rows: Vec<f64>,
    /// Block `b` is rows `offsets[b]..offsets[b + 1]`.
    pub offsets: Vec<usize>,
}

impl DeepSetModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        encoding: Encoding,
        stats: NormalizationStats,
        channel_names: Vec<String>,
        arch: &Architecture,
        grid_points: usize,
        t_split: f64,
        seed: u64,
    ) -> Result<Self> {
        let c = stats.n_channels();
        if channel_names.len() != c {
            return Err(CoreError::Validation(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if encoding != Encoding::Triplet && grid_points < 2 {
            return Err(CoreError::Validation(format!(
                "grid_points must be >= 2, got {grid_points}"
            )));
        }
        let extractor = Mlp::new(MlpConfig {
            input_dim: encoding.input_dim(c),
            hidden_dims: arch.extractor_hidden.clone(),
            output_dim: arch.latent_dim,
            activation: Activation::Relu,
            init_seed: seed,
        })?;
        let aggregator = Mlp::new(MlpConfig {
            input_dim: arch.latent_dim + 1,
            hidden_dims: arch.aggregator_hidden.clone(),
            output_dim: c,
            activation: Activation::Relu,
            init_seed: seed ^ 0x5eed_a66e_u64,
        })?;
        let m = Self {
            extractor,
            aggregator,
            stats,
            encoding,
            channel_names,
            grid_points,
            t_split,
        };
        m.check()?;
        Ok(m)
    }

    /// Cross-checks the layer widths against the encoding and channels.
    pub fn check(&self) -> Result<()> {
        let c = self.n_channels();
        let e = self.extractor.config();
        let a = self.aggregator.config();
        if e.input_dim != self.encoding.input_dim(c) || a.input_dim != e.output_dim + 1 || a.output_dim != c {
            return Err(CoreError::Validation(format!(
                "inconsistent widths: extractor {}->{}, aggregator {}->{}, {c} channels, {:?} encoding",
                e.input_dim, e.output_dim, a.input_dim, a.output_dim, self.encoding
            )));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.stats.n_channels()
    }

    pub fn latent_dim(&self) -> usize {
        self.extractor.config().output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.config().input_dim
    }

    /// Extractor input rows for one context, in canonical record order
    /// (or grid order).
    pub fn encode_context(&self, context: &SparseSeries) -> Result<Vec<f64>> {
        let c = self.n_channels();
        match self.encoding {
            Encoding::Triplet => Ok(context
                .records()
                .iter()
                .flat_map(|r| encode_triplet(r, c, &self.stats))
                .collect()),
            Encoding::GridLinear | Encoding::GridRbf => {
                let grid = make_regular_grid(self.grid_points, self.t_split)?;
                let imputed = if self.encoding == Encoding::GridLinear {
                    impute_linear(context, &grid, c, &self.stats.mean)
                } else {
                    impute_rbf(context, &grid, c, Bandwidth::MedianGap, &self.stats.mean)
                };
                let mut rows = Vec::with_capacity(grid.len() * (c + 1));
                for (t, vals) in imputed.times.iter().zip(&imputed.values) {
                    rows.push(t / self.stats.t_max);
                    rows.extend(vals.iter().enumerate().map(|(k, v)| self.stats.normalize_value(k, *v)));
                }
                Ok(rows)
            }
        }
    }

    pub fn encode_batch<'a>(&self, contexts: impl IntoIterator<Item = &'a SparseSeries>) -> Result<EncodedBatch> {
        let mut b = EncodedBatch {
            rows: Vec::new(),
            offsets: vec![0],
        };
        let d = self.input_dim();
        for ctx in contexts {
            b.rows.extend(self.encode_context(ctx)?);
            b.offsets.push(b.rows.len() / d);
        }
        Ok(b)
    }

    /// Records the forward pass on `g`. `query_block[q]` names the context
    /// block that query `q` conditions on and `query_tau[q]` is its
    /// normalized time. Returns the `[queries, channels]` normalized
    /// output.
    ///
    /// The first aggregator layer is applied to the latent once per block
    /// and to the query time once per query, which equals applying it to
    /// `[tau, latent]` per query.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        ext: &MlpVars,
        agg: &MlpVars,
        inputs: Tensor,
        offsets: Vec<usize>,
        query_block: Vec<usize>,
        query_tau: Tensor,
    ) -> Result<Var> {
        let m = self.latent_dim();
        let x = g.constant(inputs);
        let h = self.extractor.forward(g, ext, x)?;
        let latent = g.segment_sum(h, offsets)?;
        let w0 = agg.weights[0];
        let w_tau = g.slice_rows(w0, 0, 1)?;
        let w_lat = g.slice_rows(w0, 1, m + 1)?;
        let per_block = g.matmul(latent, w_lat)?;
        let per_query = g.gather_rows(per_block, query_block)?;
        let tau = g.constant(query_tau);
        let tau_part = g.matmul(tau, w_tau)?;
        let z = g.add(per_query, tau_part)?;
        let pre = g.add_bias(z, agg.biases[0])?;
        Ok(self.aggregator.forward_from(g, agg, pre, 1)?)
    }

    /// `sum_i f(encode(r_i))` over the context; zero for an empty context.
    pub fn aggregate_context(&self, context: &SparseSeries) -> Result<Vec<f64>> {
        let d = self.input_dim();
        let rows = self.encode_context(context)?;
        let n = rows.len() / d;
        let mut g = Graph::new();
        let ext = self.extractor.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(n, d, rows)?);
        let h = self.extractor.forward(&mut g, &ext, x)?;
        let s = g.segment_sum(h, vec![0, n])?;
        Ok(g.value(s).data().to_vec())
    }

    /// Normalized outputs for every `(context, times)` pair, chunked to
    /// bound memory. Times are in hours.
    pub fn predict_normalized(&self, contexts: &[&SparseSeries], times: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        const CHUNK: usize = 256;
        let limit = 1.5 * self.stats.t_max;
        for ts in times {
            if let Some(&t) = ts.iter().find(|t| !(**t >= 0.0 && **t <= limit)) {
                return Err(CoreError::OutOfRange { t, lo: 0.0, hi: limit });
            }
        }
        let d = self.input_dim();
        let mut out = Vec::with_capacity(contexts.len());
        for (ctx_chunk, t_chunk) in contexts.chunks(CHUNK).zip(times.chunks(CHUNK)) {
            let enc = self.encode_batch(ctx_chunk.iter().copied())?;
            let n_rows = enc.rows.len() / d;
            let mut qb = Vec::new();
            let mut qt = Vec::new();
            for (b, ts) in t_chunk.iter().enumerate() {
                for t in ts {
                    qb.push(b);
                    qt.push(t / self.stats.t_max);
                }
            }
            let nq = qt.len();
            let mut g = Graph::new();
            let ext = self.extractor.bind(&mut g, false);
            let agg = self.aggregator.bind(&mut g, false);
            let y = self.forward(
                &mut g,
                &ext,
                &agg,
                Tensor::matrix(n_rows, d, enc.rows)?,
                enc.offsets,
                qb,
                Tensor::matrix(nq, 1, qt)?,
            )?;
            let y = g.value(y);
            let mut q = 0;
            for ts in t_chunk {
                out.push((0..ts.len()).map(|i| y.row(q + i).to_vec()).collect());
                q += ts.len();
            }
            debug_assert_eq!(q, nq);
        }
        Ok(out)
    }

    /// Denormalized predictions, `[context][time][channel]`.
    pub fn predict(&self, contexts: &[&SparseSeries], times: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = self.predict_normalized(contexts, times)?;
        for per_ctx in &mut out {
            for row in per_ctx.iter_mut() {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = self.stats.denormalize_value(k, *v);
                }
            }
        }
        Ok(out)
    }

    /// Per-channel forecast at time `tau` (hours), in channel units.
    /// Times up to `1.5 * t_max` are accepted.
    pub fn predict_at(&self, context: &SparseSeries, tau: f64) -> Result<Vec<f64>> {
        let mut p = self.predict(&[context], &[vec![tau]])?;
        Ok(p.remove(0).remove(0))
    }

    /// Prediction for each target record of each trajectory, on the
    /// record's own channel, in channel units.
    pub fn forecast_targets(&self, trajectories: &[TrajectoryRecord]) -> Result<Vec<Vec<f64>>> {
        let contexts: Vec<&SparseSeries> = trajectories.iter().map(|t| &t.context).collect();
        let times: Vec<Vec<f64>> = trajectories
            .iter()
            .map(|t| t.targets.records().iter().map(|r| r.time).collect())
            .collect();
        let preds = self.predict(&contexts, &times)?;
        Ok(trajectories
            .iter()
            .zip(preds)
            .map(|(t, p)| {
                t.targets
                    .records()
                    .iter()
                    .zip(p)
                    .map(|(r, row)| row[r.channel])
                    .collect()
            })
            .collect())
    }

    /// Flat parameter list: extractor then aggregator, weight before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.extractor.params();
        p.extend(self.aggregator.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.extractor.params_mut();
        p.extend(self.aggregator.params_mut());
        p
    }
}
