use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sparseset_core::baselines::{fit_forecast, fit_mechanistic_bfgs, read_fit_csv, write_fit_csv, FitOptions, FitRow};
use sparseset_core::datagen::{child_seed, generate_dataset, read_dataset, write_dataset, META_FILE};
use sparseset_core::eval::{
    channel_means, ground_truth_forecast, r2_contributions, render_report, score_method, score_parts, Method, PlotData,
    ScoreRecord,
};
use sparseset_core::forecaster::{load_model, save_model, train_forecaster, Encoding, HistoryEntry};
use sparseset_core::mechanistic::{eval_trajectory, integrate};
use sparseset_core::series::{Dataset, SplitName, TrajectoryRecord};

use crate::{CliError, RunConfig};

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Fit,
    Evaluate,
    Report,
    RunAll,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const SCORES_FILE: &str = "scores.json";
pub const PLOTS_FILE: &str = "plots.json";

/// Artifact locations under `<out>/<dataset>/`.
#[derive(Clone, Debug)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { dir: cfg.dataset_dir() }
    }

    pub fn data(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn model(&self, m: Method) -> PathBuf {
        self.dir.join("models").join(format!("{}.json", m.id()))
    }

    pub fn history(&self, m: Method) -> PathBuf {
        self.dir.join("models").join(format!("{}.history.csv", m.id()))
    }

    pub fn fit(&self) -> PathBuf {
        self.dir.join("fit.csv")
    }

    pub fn scores(&self) -> PathBuf {
        self.dir.join(SCORES_FILE)
    }

    pub fn plots(&self) -> PathBuf {
        self.dir.join(PLOTS_FILE)
    }
}

/// Caps rayon's global pool. Only the first call takes effect.
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads {n} ignored");
        }
    }
}

fn remove_any(p: &Path) -> std::io::Result<()> {
    if p.is_dir() {
        fs::remove_dir_all(p)
    } else if p.exists() {
        fs::remove_file(p)
    } else {
        Ok(())
    }
}

/// Builds `path` (file or directory) through a temporary sibling that is
/// renamed into place on success and removed on failure.
fn write_atomic<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    remove_any(&tmp)?;
    match f(&tmp) {
        Ok(()) => {
            remove_any(path)?;
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = remove_any(&tmp);
            Err(e)
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, |tmp| {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        fs::write(tmp, s)?;
        Ok(())
    })
}

fn stage<T>(name: &str, cfg: &RunConfig, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let hash = cfg.hash();
    log::info!("{name} [{}]: seed {}, config {}", cfg.model.id(), cfg.seed, &hash[..16]);
    let t = Instant::now();
    let r = f();
    let status = if r.is_ok() { "done" } else { "failed" };
    log::info!(
        "{name} [{}]: {status} in {:.1}s",
        cfg.model.id(),
        t.elapsed().as_secs_f64()
    );
    r
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    write_json(&cfg.out.join(RESOLVED_CONFIG), cfg)?;
    write_json(&cfg.dataset_dir().join(RESOLVED_CONFIG), cfg)
}

/// Runs one subcommand. Stages communicate only through files under
/// `cfg.out`.
pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    write_resolved(cfg)?;
    match cmd {
        Command::Generate => generate(cfg),
        Command::Train => train(cfg),
        Command::Fit => fit(cfg),
        Command::Evaluate => evaluate(cfg),
        Command::Report => stage("report", cfg, || report(&cfg.out)),
        Command::RunAll => {
            generate(cfg)?;
            train(cfg)?;
            if cfg.methods.contains(&Method::Fit) {
                fit(cfg)?;
            }
            evaluate(cfg)?;
            stage("report", cfg, || report(&cfg.out))
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = Paths::new(cfg).data();
    if !dir.join(META_FILE).exists() {
        return Err(CliError::Missing(format!(
            "dataset {} (run `sparseset generate` first)",
            dir.display()
        )));
    }
    let d = read_dataset(&dir)?;
    if d.model_kind != cfg.model {
        return Err(CliError::Config(format!(
            "dataset in {} is {}, config model is {}",
            dir.display(),
            d.model_kind,
            cfg.model
        )));
    }
    Ok(d)
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    stage("generate", cfg, || {
        let d = generate_dataset(&cfg.generation)?;
        log::info!(
            "{} train / {} val / {} test trajectories, {} parameter draws resampled",
            d.train.len(),
            d.val.len(),
            d.test.len(),
            d.resample_count
        );
        write_atomic(&Paths::new(cfg).data(), |tmp| Ok(write_dataset(&d, tmp)?))
    })
}

fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for h in history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.is_network()).collect();
    if methods.is_empty() {
        log::info!("train: no network methods selected");
        return Ok(());
    }
    let d = load_data(cfg)?;
    let paths = Paths::new(cfg);
    for m in methods {
        stage(&format!("train {m}"), cfg, || {
            let encoding = Encoding::for_method(m).expect("network method");
            let out = train_forecaster(&d, &cfg.train[&m], encoding)?;
            log::info!(
                "{m}: best validation loss {:.5} at step {}",
                out.best_val_loss,
                out.best_step
            );
            write_atomic(&paths.model(m), |tmp| Ok(save_model(&out.model, tmp)?))?;
            write_atomic(&paths.history(m), |tmp| write_history(tmp, &out.history))
        })?;
    }
    Ok(())
}

/// Fits the first `fit_limit` test trajectories and writes `fit.csv`.
pub fn fit(cfg: &RunConfig) -> Result<()> {
    let d = load_data(cfg)?;
    stage("fit", cfg, || {
        let test = d.split(SplitName::Test);
        let n = cfg.fit_limit.map_or(test.len(), |l| l.min(test.len()));
        let subset = &test[..n];
        let sigma = d.noise_std();
        let ode = cfg.fit.forecast_ode();
        let results: Vec<Result<(Option<sparseset_core::baselines::FitResult>, Option<Vec<f64>>)>> = subset
            .par_iter()
            .enumerate()
            .map(|(i, tr)| {
                if tr.context.is_empty() {
                    return Ok((None, None));
                }
                let opts = FitOptions {
                    seed: child_seed(cfg.fit.seed, SplitName::Test, i as u64),
                    ..cfg.fit.clone()
                };
                match fit_mechanistic_bfgs(&tr.context, &d.prior, &sigma, &opts) {
                    Ok(r) => {
                        let fc = fit_forecast(&r.params, tr.targets.records(), d.t_max, &ode);
                        Ok((Some(r), fc))
                    }
                    Err(e) if e.is_numerical() => Ok((None, None)),
                    Err(e) => Err(e.into()),
                }
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let c = sigma.len();
        let means = channel_means(subset.iter().flat_map(|t| t.targets.records()), c);
        let filled: Vec<Vec<f64>> = subset
            .iter()
            .zip(&results)
            .map(|(tr, (_, fc))| match fc {
                Some(v) => v.clone(),
                None => tr.targets.records().iter().map(|r| means[r.channel]).collect(),
            })
            .collect();
        let contrib = r2_contributions(&score_parts(&filled, subset, &sigma, &means));
        let rows: Vec<FitRow> = results
            .into_iter()
            .zip(contrib)
            .enumerate()
            .map(|(i, ((r, _), share))| match r {
                Some(r) => FitRow {
                    trajectory: i,
                    converged: r.converged,
                    iterations: r.iterations,
                    loss: r.loss,
                    params: Some(r.params),
                    r2_contribution: share,
                },
                None => FitRow {
                    trajectory: i,
                    converged: false,
                    iterations: 0,
                    loss: f64::INFINITY,
                    params: None,
                    r2_contribution: share,
                },
            })
            .collect();
        let converged = rows.iter().filter(|r| r.converged).count();
        log::info!("fit: {converged}/{} fits converged", rows.len());
        write_atomic(&Paths::new(cfg).fit(), |tmp| Ok(write_fit_csv(tmp, cfg.model, &rows)?))
    })
}

struct MethodOutput<'a> {
    trajectories: &'a [TrajectoryRecord],
    predictions: Vec<Option<Vec<f64>>>,
    /// Forecasts on the truth grid of the first plotted trajectories.
    curves: Vec<Option<Vec<Vec<f64>>>>,
}

fn fit_output<'a>(
    cfg: &RunConfig,
    d: &Dataset,
    test: &'a [TrajectoryRecord],
    n_plots: usize,
) -> Result<MethodOutput<'a>> {
    let path = Paths::new(cfg).fit();
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "fit results {} (run `sparseset fit` first)",
            path.display()
        )));
    }
    let rows = read_fit_csv(&path, cfg.model)?;
    if rows.len() > test.len() || rows.iter().enumerate().any(|(i, r)| r.trajectory != i) {
        return Err(CliError::Config(format!(
            "{} does not match the test split of this dataset",
            path.display()
        )));
    }
    let trajectories = &test[..rows.len()];
    let ode = cfg.fit.forecast_ode();
    let usable = |r: &FitRow| r.params.clone().filter(|_| r.loss.is_finite());
    let predictions = rows
        .par_iter()
        .zip(trajectories)
        .map(|(r, t)| usable(r).and_then(|p| fit_forecast(&p, t.targets.records(), d.t_max, &ode)))
        .collect();
    let curves = rows
        .iter()
        .zip(trajectories)
        .take(n_plots)
        .map(|(r, t)| {
            let p = usable(r)?;
            let traj = integrate(&p, d.t_max, &ode).ok()?;
            t.truth.times.iter().map(|&s| eval_trajectory(&traj, s).ok()).collect()
        })
        .collect();
    Ok(MethodOutput {
        trajectories,
        predictions,
        curves,
    })
}

fn network_output<'a>(
    cfg: &RunConfig,
    m: Method,
    test: &'a [TrajectoryRecord],
    n_plots: usize,
) -> Result<MethodOutput<'a>> {
    let path = Paths::new(cfg).model(m);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "{m} checkpoint {} (run `sparseset train --method {m}` first)",
            path.display()
        )));
    }
    let model = load_model(&path)?;
    if Some(model.encoding) != Encoding::for_method(m) {
        return Err(CliError::Config(format!(
            "{} holds a {:?} model, not {m}",
            path.display(),
            model.encoding
        )));
    }
    let predictions = model.forecast_targets(test)?.into_iter().map(Some).collect();
    let shown = &test[..n_plots];
    let contexts: Vec<_> = shown.iter().map(|t| &t.context).collect();
    let times: Vec<Vec<f64>> = shown.iter().map(|t| t.truth.times.clone()).collect();
    let curves = model.predict(&contexts, &times)?.into_iter().map(Some).collect();
    Ok(MethodOutput {
        trajectories: test,
        predictions,
        curves,
    })
}

/// Scores every configured method on the test split and stores the
/// scores plus overlay-plot data.
pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let d = load_data(cfg)?;
    stage("evaluate", cfg, || {
        let test = d.split(SplitName::Test);
        let sigma = d.noise_std();
        let names: Vec<String> = d.channels.iter().map(|c| c.name.clone()).collect();
        let n_plots = cfg.evaluation.n_plots.min(test.len());
        let mut scores: Vec<ScoreRecord> = Vec::new();
        let mut plots: Vec<PlotData> = Vec::new();
        for &m in &cfg.methods {
            let out = match m {
                Method::GroundTruth => MethodOutput {
                    trajectories: test,
                    predictions: ground_truth_forecast(test, d.t_max)?.into_iter().map(Some).collect(),
                    curves: test[..n_plots].iter().map(|t| Some(t.truth.values.clone())).collect(),
                },
                Method::Fit => fit_output(cfg, &d, test, n_plots)?,
                _ => network_output(cfg, m, test, n_plots)?,
            };
            let s = score_method(
                m.id(),
                cfg.model.id(),
                out.trajectories,
                &out.predictions,
                &sigma,
                &names,
                cfg.evaluation.bootstrap_resamples,
                cfg.evaluation.seed,
            )?;
            log::info!("{m}: R² {:.4} ± {:.1e} ({} failed)", s.r2, s.stderr, s.n_failed);
            scores.push(s);
            for (i, forecast) in out.curves.into_iter().enumerate() {
                let t = &test[i];
                plots.push(PlotData {
                    dataset: cfg.model.id().to_string(),
                    method: m.id().to_string(),
                    index: i,
                    channel_names: names.clone(),
                    t_split: d.t_split,
                    t_max: d.t_max,
                    truth: t.truth.clone(),
                    context: t.context.records().to_vec(),
                    targets: t.targets.records().to_vec(),
                    forecast,
                });
            }
        }
        let paths = Paths::new(cfg);
        write_json(&paths.scores(), &scores)?;
        write_json(&paths.plots(), &plots)
    })
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Collects `<out>/*/scores.json` (and plot data) into `results.csv`,
/// `results.md` and `plots/`.
pub fn report(out: &Path) -> Result<()> {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(out) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SCORES_FILE).is_file())
            .collect(),
        Err(_) => Vec::new(),
    };
    if dirs.is_empty() {
        return Err(CliError::Missing(format!(
            "no <dataset>/{SCORES_FILE} under {} (run `sparseset evaluate` first)",
            out.display()
        )));
    }
    dirs.sort();
    let mut scores: Vec<ScoreRecord> = Vec::new();
    let mut plots: Vec<PlotData> = Vec::new();
    for d in &dirs {
        scores.extend(read_json::<Vec<ScoreRecord>>(&d.join(SCORES_FILE))?);
        if d.join(PLOTS_FILE).is_file() {
            plots.extend(read_json::<Vec<PlotData>>(&d.join(PLOTS_FILE))?);
        }
    }
    let staging = out.join(".report.tmp");
    remove_any(&staging)?;
    if let Err(e) = render_report(&scores, &plots, &staging) {
        let _ = remove_any(&staging);
        return Err(e.into());
    }
    for name in ["results.csv", "results.md", "plots"] {
        let from = staging.join(name);
        let to = out.join(name);
        remove_any(&to)?;
        if from.exists() {
            fs::rename(from, to)?;
        }
    }
    remove_any(&staging)?;
    log::info!("report: {} scores from {} datasets", scores.len(), dirs.len());
    Ok(())
}
