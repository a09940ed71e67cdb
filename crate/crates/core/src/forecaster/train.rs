use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparseset_nn::{adam_step, AdamConfig, AdamState, Graph, MlpVars, Tensor, Var};

use super::model::{Architecture, DeepSetModel, Encoding};
use crate::series::{Dataset, TrajectoryRecord};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Trajectories per step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub aggregator_hidden: Vec<usize>,
    /// Steps between validation passes.
    pub val_every: usize,
}

impl TrainConfig {
    /// Benchmark-scale defaults.
    pub fn benchmark() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            steps: 100_000,
            seed: 0,
            latent_dim: 128,
            extractor_hidden: vec![128, 128, 128],
            aggregator_hidden: vec![128, 128],
            val_every: 500,
        }
    }

    /// Desk-scale defaults: benchmark learning rate and validation cadence
    /// on a narrower network and smaller batches.
    pub fn smoke() -> Self {
        Self {
            batch_size: 64,
            steps: 20_000,
            latent_dim: 64,
            extractor_hidden: vec![64, 64],
            aggregator_hidden: vec![64, 64],
            ..Self::benchmark()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && self.steps > 0
            && self.latent_dim > 0
            && self.val_every > 0
            && self
                .extractor_hidden
                .iter()
                .chain(&self.aggregator_hidden)
                .all(|&w| w > 0);
        if ok {
            Ok(())
        } else {
            Err(CoreError::Validation(format!(
                "training settings must all be positive: {self:?}"
            )))
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            latent_dim: self.latent_dim,
            extractor_hidden: self.extractor_hidden.clone(),
            aggregator_hidden: self.aggregator_hidden.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    /// Mean training loss since the previous entry (`None` at step 0).
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss seen.
    pub model: DeepSetModel,
    pub history: Vec<HistoryEntry>,
    pub best_step: usize,
    pub best_val_loss: f64,
}

/// Pre-encoded trajectory: extractor rows plus normalized targets.
struct Prepared {
    rows: Vec<f64>,
    n_rows: usize,
    /// `(tau / t_max, channel, normalized value)`
    targets: Vec<(f64, usize, f64)>,
}

fn prepare(model: &DeepSetModel, trajs: &[TrajectoryRecord]) -> Result<Vec<Prepared>> {
    let d = model.input_dim();
    trajs
        .iter()
        .map(|t| {
            let rows = model.encode_context(&t.context)?;
            let targets = t
                .targets
                .records()
                .iter()
                .map(|r| {
                    (
                        r.time / model.stats.t_max,
                        r.channel,
                        model.stats.normalize_value(r.channel, r.value),
                    )
                })
                .collect();
            Ok(Prepared {
                n_rows: rows.len() / d,
                rows,
                targets,
            })
        })
        .collect()
}

/// Records the mean squared normalized error of `model` over the targets
/// of `batch` on `g`, with parameters bound as trainable or constant.
fn loss_graph(model: &DeepSetModel, g: &mut Graph, batch: &[&Prepared], trainable: bool) -> Result<(Var, Vec<Var>)> {
    let ext = model.extractor.bind(g, trainable);
    let agg = model.aggregator.bind(g, trainable);
    let loss = loss_with_vars(model, g, &ext, &agg, batch)?;
    let mut vars = ext.all();
    vars.extend(agg.all());
    Ok((loss, vars))
}

fn loss_with_vars(
    model: &DeepSetModel,
    g: &mut Graph,
    ext: &MlpVars,
    agg: &MlpVars,
    batch: &[&Prepared],
) -> Result<Var> {
    let d = model.input_dim();
    let total_rows: usize = batch.iter().map(|p| p.n_rows).sum();
    let mut rows = Vec::with_capacity(total_rows * d);
    let mut offsets = Vec::with_capacity(batch.len() + 1);
    offsets.push(0);
    let (mut qb, mut qt, mut qc, mut qv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (b, p) in batch.iter().enumerate() {
        rows.extend_from_slice(&p.rows);
        offsets.push(offsets[b] + p.n_rows);
        for &(t, c, v) in &p.targets {
            qb.push(b);
            qt.push(t);
            qc.push(c);
            qv.push(v);
        }
    }
    let nq = qt.len();
    let out = model.forward(
        g,
        ext,
        agg,
        Tensor::matrix(total_rows, d, rows)?,
        offsets,
        qb,
        Tensor::matrix(nq, 1, qt)?,
    )?;
    let picked = g.select_cols(out, qc)?;
    let target = g.constant(Tensor::matrix(nq, 1, qv)?);
    let diff = g.sub(picked, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Mean squared normalized error of `model` over every target of `trajs`.
pub fn evaluate_loss(model: &DeepSetModel, trajs: &[TrajectoryRecord]) -> Result<f64> {
    let prepared = prepare(model, trajs)?;
    mean_loss(model, &prepared)
}

fn mean_loss(model: &DeepSetModel, prepared: &[Prepared]) -> Result<f64> {
    const CHUNK: usize = 256;
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in prepared.chunks(CHUNK) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let nq: usize = chunk.iter().map(|p| p.targets.len()).sum();
        if nq == 0 {
            continue;
        }
        let mut g = Graph::new();
        let (loss, _) = loss_graph(model, &mut g, &refs, false)?;
        sum += g.value(loss).data()[0] * nq as f64;
        n += nq;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Seed of the random stream that draws the batch of `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains a Deep Set forecaster on the train split with Adam, validating
/// every `val_every` steps and returning the best-validation weights.
pub fn train_forecaster(dataset: &Dataset, cfg: &TrainConfig, encoding: Encoding) -> Result<TrainOutcome> {
    cfg.validate()?;
    let names = dataset.channels.iter().map(|c| c.name.clone()).collect();
    let model = DeepSetModel::new(
        encoding,
        dataset.stats.clone(),
        names,
        &cfg.architecture(),
        dataset.obs_per_part.max(2),
        dataset.t_split,
        cfg.seed,
    )?;
    train_model(model, &dataset.train, &dataset.val, cfg)
}

/// Training loop on explicit splits, starting from `model`.
pub fn train_model(
    mut model: DeepSetModel,
    train: &[TrajectoryRecord],
    val: &[TrajectoryRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Contract(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let train_p = prepare(&model, train)?;
    let val_p = prepare(&model, val)?;
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );

    let v0 = mean_loss(&model, &val_p)?;
    let mut history = vec![HistoryEntry {
        step: 0,
        train_loss: None,
        val_loss: v0,
    }];
    let mut best = (model.clone(), 0, v0);
    let (mut run_sum, mut run_n) = (0.0, 0usize);
    let started = std::time::Instant::now();

    for step in 1..=cfg.steps {
        let bseed = batch_seed(cfg.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(bseed);
        let batch: Vec<&Prepared> = (0..cfg.batch_size)
            .map(|_| &train_p[rng.random_range(0..train_p.len())])
            .collect();
        let mut g = Graph::new();
        let (loss, vars) = loss_graph(&model, &mut g, &batch, true)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                step,
                batch_seed: bseed,
            });
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|v| {
                grads
                    .take(*v)
                    .ok_or_else(|| CoreError::Contract("missing parameter gradient".into()))
            })
            .collect::<Result<_>>()?;
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adam_step(&mut model.params_mut(), &grad_refs, &mut adam)?;
        run_sum += lv;
        run_n += 1;

        if step % cfg.val_every == 0 || step == cfg.steps {
            let vl = mean_loss(&model, &val_p)?;
            let tl = run_sum / run_n as f64;
            log::info!(
                "{:?} step {step}/{}: train {tl:.5} val {vl:.5} ({:.0}s)",
                model.encoding,
                cfg.steps,
                started.elapsed().as_secs_f64()
            );
            history.push(HistoryEntry {
                step,
                train_loss: Some(tl),
                val_loss: vl,
            });
            (run_sum, run_n) = (0.0, 0);
            if vl < best.2 {
                best = (model.clone(), step, vl);
            }
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        history,
        best_step: best.1,
        best_val_loss: best.2,
    })
}

/// Training loss of `model`'s architecture on `trajs` with the parameters
/// supplied as graph nodes, in [`DeepSetModel::params`] order. This is the
/// loss the optimizer sees, exposed for gradient checks.
pub fn loss_at_params(model: &DeepSetModel, g: &mut Graph, params: &[Var], trajs: &[TrajectoryRecord]) -> Result<Var> {
    let n_ext = model.extractor.layers().len();
    let split = |vs: &[Var]| MlpVars {
        weights: vs.iter().step_by(2).copied().collect(),
        biases: vs.iter().skip(1).step_by(2).copied().collect(),
    };
    if params.len() != 2 * (n_ext + model.aggregator.layers().len()) {
        return Err(CoreError::Contract(format!(
            "{} parameter nodes for this model",
            params.len()
        )));
    }
    let ext = split(&params[..2 * n_ext]);
    let agg = split(&params[2 * n_ext..]);
    let p = prepare(model, trajs)?;
    let refs: Vec<&Prepared> = p.iter().collect();
    loss_with_vars(model, g, &ext, &agg, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenerationConfig, MMK_NOISE_STD};
    use crate::mechanistic::ModelKind;

    fn tiny(seed: u64) -> Dataset {
        tiny_with_noise(seed, MMK_NOISE_STD)
    }

    fn tiny_with_noise(seed: u64, sigma: f64) -> Dataset {
        let mut cfg = GenerationConfig::defaults(ModelKind::Mmk);
        cfg.noise_std = vec![sigma; 2];
        cfg.n_train = 24;
        cfg.n_val = 8;
        cfg.n_test = 4;
        cfg.seed = seed;
        generate_dataset(&cfg).unwrap()
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            batch_size: 8,
            steps,
            seed: 11,
            latent_dim: 16,
            extractor_hidden: vec![16],
            aggregator_hidden: vec![16],
            val_every: 10,
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = tiny(3);
        let a = train_forecaster(&d, &small_cfg(20), Encoding::Triplet).unwrap();
        let b = train_forecaster(&d, &small_cfg(20), Encoding::Triplet).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.iter().map(|h| h.step).collect::<Vec<_>>(), vec![0, 10, 20]);
    }

    // Memorizing noise spikes between near-coincident query times is slow
    // for a ReLU decoder, so the sanity run uses near noise-free targets.
    #[test]
    fn overfits_a_single_trajectory() {
        let d = tiny_with_noise(4, 1e-6);
        let one = &d.train[..1];
        let names = d.channels.iter().map(|c| c.name.clone()).collect();
        let mut cfg = small_cfg(5000);
        cfg.batch_size = 1;
        cfg.val_every = 500;
        cfg.aggregator_hidden = vec![64, 64];
        let model = DeepSetModel::new(
            Encoding::Triplet,
            d.stats.clone(),
            names,
            &cfg.architecture(),
            2,
            d.t_split,
            5,
        )
        .unwrap();
        let out = train_model(model, one, one, &cfg).unwrap();
        assert!(out.best_val_loss < 1e-3, "{}", out.best_val_loss);
        assert!((evaluate_loss(&out.model, one).unwrap() - out.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut cfg = small_cfg(10);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        assert!(train_forecaster(&tiny(1), &cfg, Encoding::GridLinear).is_err());
    }

    #[test]
    fn batch_seeds_differ_per_step() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|k| batch_seed(7, k)).collect();
        assert_eq!(s.len(), 1000);
    }
}
