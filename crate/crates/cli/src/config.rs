use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use sparseset_core::baselines::FitOptions;
use sparseset_core::datagen::GenerationConfig;
use sparseset_core::eval::Method;
use sparseset_core::forecaster::TrainConfig;
use sparseset_core::mechanistic::ModelKind;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Preset {
    /// 10000/1000/1000 trajectories, narrower networks.
    Smoke,
    Benchmark,
}

impl Preset {
    pub fn from_id(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "smoke" => Some(Preset::Smoke),
            "benchmark" => Some(Preset::Benchmark),
            _ => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Smoke => "smoke",
            Preset::Benchmark => "benchmark",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub bootstrap_resamples: usize,
    /// Test trajectories drawn as overlay plots, per method.
    pub n_plots: usize,
    pub seed: u64,
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker cap; `None` uses every core.
    pub threads: Option<usize>,
    pub methods: Vec<Method>,
    pub generation: GenerationConfig,
    /// One entry per network method.
    pub train: IndexMap<Method, TrainConfig>,
    pub fit: FitOptions,
    /// Fit only the first `fit_limit` test trajectories.
    pub fit_limit: Option<usize>,
    pub evaluation: EvalSettings,
}

/// E. coli fits on the smoke preset are capped to this many test
/// trajectories; each single-start fit takes seconds.
pub const SMOKE_ECOLI_FIT_LIMIT: usize = 250;

impl RunConfig {
    pub fn defaults(model: ModelKind, preset: Preset, seed: u64) -> Self {
        let mut generation = GenerationConfig::defaults(model);
        generation.seed = seed;
        let mut tc = match preset {
            Preset::Smoke => {
                generation.n_train = 10_000;
                generation.n_val = 1_000;
                generation.n_test = 1_000;
                TrainConfig::smoke()
            }
            Preset::Benchmark => TrainConfig::benchmark(),
        };
        tc.seed = seed;
        let fit_limit = (preset == Preset::Smoke && model == ModelKind::Ecoli).then_some(SMOKE_ECOLI_FIT_LIMIT);
        Self {
            model,
            preset,
            seed,
            out: PathBuf::from("runs"),
            threads: None,
            methods: Method::ALL.to_vec(),
            generation,
            train: Method::ALL
                .into_iter()
                .filter(|m| m.is_network())
                .map(|m| (m, tc.clone()))
                .collect(),
            fit: FitOptions {
                seed,
                ..FitOptions::default()
            },
            fit_limit,
            evaluation: EvalSettings {
                bootstrap_resamples: 1000,
                n_plots: 3,
                seed,
            },
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        self.generation
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.generation.model_kind != self.model {
            return bad(format!(
                "generation.model_kind is {} but model is {}",
                self.generation.model_kind, self.model
            ));
        }
        for m in self.methods.iter().filter(|m| m.is_network()) {
            match self.train.get(m) {
                None => return bad(format!("no train settings for method {m}")),
                Some(tc) => tc.validate().map_err(|e| CliError::Config(format!("train.{m}: {e}")))?,
            }
        }
        if let Some(m) = self.train.keys().find(|m| !m.is_network()) {
            return bad(format!("train settings given for {m}, which trains no network"));
        }
        if self.fit.multistart == 0 {
            return bad("fit.multistart must be >= 1".into());
        }
        if self.fit_limit == Some(0) {
            return bad("fit_limit must be >= 1 when set".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1 when set".into());
        }
        if self.evaluation.bootstrap_resamples < 2 {
            return bad("evaluation.bootstrap_resamples must be >= 2".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory of this dataset's artifacts.
    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join(self.model.id())
    }
}

/// Command-line values layered over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub model: Option<ModelKind>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub methods: Option<Vec<Method>>,
    /// `(dotted key, value)` pairs; `train.*.key` sets every network method.
    pub sets: Vec<(String, Value)>,
}

fn set_path(root: &mut Value, path: &[&str], v: Value) -> Result<(), CliError> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not an object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert((*key).to_string(), v);
            return Ok(());
        }
        cur = obj.entry(*key).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `KEY=VALUE`; the value is read as JSON, or as a string if it
/// is not valid JSON.
pub fn parse_set(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got `{s}`")))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

fn from_value<T: for<'de> Deserialize<'de>>(v: &Value, key: &str) -> Result<T, CliError> {
    serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("{key}: {e}")))
}

/// Resolves defaults, then the config file, then `ov`, and validates.
pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut user = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !user.is_object() {
        return Err(CliError::Config("config file must hold a JSON object".into()));
    }
    let mut top = |k: &str, v: Value| set_path(&mut user, &[k], v);
    if let Some(m) = ov.model {
        top("model", serde_json::to_value(m)?)?;
    }
    if let Some(p) = ov.preset {
        top("preset", serde_json::to_value(p)?)?;
    }
    if let Some(s) = ov.seed {
        top("seed", s.into())?;
    }
    if let Some(o) = &ov.out {
        top("out", serde_json::to_value(o)?)?;
    }
    if let Some(t) = ov.threads {
        top("threads", t.into())?;
    }
    if let Some(ms) = &ov.methods {
        top("methods", serde_json::to_value(ms)?)?;
    }
    for (key, v) in &ov.sets {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() >= 2 && parts[0] == "train" && parts[1] == "*" {
            for m in Method::ALL.into_iter().filter(|m| m.is_network()) {
                let mut p = parts.clone();
                p[1] = m.id();
                set_path(&mut user, &p, v.clone())?;
            }
        } else {
            set_path(&mut user, &parts, v.clone())?;
        }
    }

    let get = |k: &str| user.get(k).cloned();
    let model: ModelKind = get("model").map_or(Ok(ModelKind::Mmk), |v| from_value(&v, "model"))?;
    let preset: Preset = get("preset").map_or(Ok(Preset::Smoke), |v| from_value(&v, "preset"))?;
    let seed: u64 = get("seed").map_or(Ok(0), |v| from_value(&v, "seed"))?;

    let mut resolved = serde_json::to_value(RunConfig::defaults(model, preset, seed))?;
    merge(&mut resolved, user);
    let cfg: RunConfig = from_value(&resolved, "config")?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(model: ModelKind) -> Overrides {
        Overrides {
            model: Some(model),
            preset: Some(Preset::Smoke),
            ..Overrides::default()
        }
    }

    #[test]
    fn empty_config_resolves_model_defaults() {
        let c = resolve(None, &ov(ModelKind::Mmk)).unwrap();
        assert_eq!(c.generation.obs_per_part, 14);
        assert_eq!(
            (c.generation.n_train, c.generation.n_val, c.generation.n_test),
            (10_000, 1_000, 1_000)
        );
        assert_eq!(
            resolve(None, &ov(ModelKind::Ecoli)).unwrap().generation.obs_per_part,
            30
        );
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut o = ov(ModelKind::Mmk);
        o.sets.push(("generation.obs_per_prt".into(), 3.into()));
        let msg = resolve(None, &o).unwrap_err().to_string();
        assert!(msg.contains("obs_per_prt"), "{msg}");
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"seed": 3, "generation": {"n_train": 40}, "train": {"triplet": {"steps": 9}}}"#,
        )
        .unwrap();
        let mut o = ov(ModelKind::Mmk);
        o.seed = Some(5);
        o.sets.push(("train.*.lr".into(), 0.01.into()));
        let c = resolve(Some(&p), &o).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.generation.seed, 5);
        assert_eq!(c.generation.n_train, 40);
        assert_eq!(c.train[&Method::Triplet].steps, 9);
        assert_eq!(c.train[&Method::Linear].steps, TrainConfig::smoke().steps);
        assert!(c.train.values().all(|t| t.lr == 0.01));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = resolve(None, &ov(ModelKind::Ecoli)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        std::fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
        let back = resolve(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn invalid_values_name_the_constraint() {
        let mut o = ov(ModelKind::Mmk);
        o.methods = Some(vec![]);
        assert!(resolve(None, &o).unwrap_err().to_string().contains("methods"));
        let mut o = ov(ModelKind::Mmk);
        o.sets.push(("generation.model_kind".into(), "ECOLI".into()));
        assert!(matches!(resolve(None, &o), Err(CliError::Config(_))));
    }

    #[test]
    fn set_values_parse_as_json_or_string() {
        assert_eq!(parse_set("a.b=3").unwrap(), ("a.b".into(), Value::from(3)));
        assert_eq!(parse_set("out=runs/x").unwrap(), ("out".into(), Value::from("runs/x")));
        assert!(parse_set("novalue").is_err());
    }
}
