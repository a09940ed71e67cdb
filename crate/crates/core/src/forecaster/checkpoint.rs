use std::path::Path;

use serde::{Deserialize, Serialize};
use sparseset_nn::{Checkpoint, Dense, Mlp, MlpConfig};

use super::model::{DeepSetModel, Encoding};
use crate::series::NormalizationStats;
use crate::Result;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    encoding: Encoding,
    stats: NormalizationStats,
    channel_names: Vec<String>,
    grid_points: usize,
    t_split: f64,
    extractor: MlpConfig,
    aggregator: MlpConfig,
}

fn put(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp) {
    for (i, l) in mlp.layers().iter().enumerate() {
        ck.insert(format!("{prefix}.{i}.weight"), l.weight.clone());
        ck.insert(format!("{prefix}.{i}.bias"), l.bias.clone());
    }
}

fn take(ck: &Checkpoint, prefix: &str, cfg: MlpConfig) -> Result<Mlp> {
    let layers = (0..cfg.layer_dims().len())
        .map(|i| {
            Ok(Dense {
                weight: ck.tensor(&format!("{prefix}.{i}.weight"))?.clone(),
                bias: ck.tensor(&format!("{prefix}.{i}.bias"))?.clone(),
            })
        })
        .collect::<sparseset_nn::Result<Vec<_>>>()?;
    Ok(Mlp::from_layers(cfg, layers)?)
}

/// Self-describing checkpoint: weights plus encoding, normalization and
/// channel metadata.
pub fn model_to_checkpoint(m: &DeepSetModel) -> Result<Checkpoint> {
    let meta = ModelMeta {
        encoding: m.encoding,
        stats: m.stats.clone(),
        channel_names: m.channel_names.clone(),
        grid_points: m.grid_points,
        t_split: m.t_split,
        extractor: m.extractor.config().clone(),
        aggregator: m.aggregator.config().clone(),
    };
    let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
    put(&mut ck, "extractor", &m.extractor);
    put(&mut ck, "aggregator", &m.aggregator);
    Ok(ck)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<DeepSetModel> {
    let meta: ModelMeta = serde_json::from_value(ck.config.clone())?;
    let m = DeepSetModel {
        extractor: take(ck, "extractor", meta.extractor)?,
        aggregator: take(ck, "aggregator", meta.aggregator)?,
        stats: meta.stats,
        encoding: meta.encoding,
        channel_names: meta.channel_names,
        grid_points: meta.grid_points,
        t_split: meta.t_split,
    };
    m.check()?;
    Ok(m)
}

pub fn save_model(m: &DeepSetModel, path: &Path) -> Result<()> {
    Ok(model_to_checkpoint(m)?.save(path)?)
}

pub fn load_model(path: &Path) -> Result<DeepSetModel> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
