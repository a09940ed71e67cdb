//! Maximum-likelihood fits of the mechanistic models to context data.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bfgs::{bfgs_minimize, BfgsOptions};
use crate::mechanistic::{
    eval_trajectory, integrate, sample_params, MechanisticParams, ModelKind, OdeOptions, PriorSpec,
};
use crate::series::{SparseSeries, TripletRecord};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    /// Number of BFGS starts; the first is always the prior midpoint.
    pub multistart: usize,
    /// Seed for the extra starts.
    pub seed: u64,
    pub bfgs: BfgsOptions,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            multistart: 1,
            seed: 0,
            bfgs: BfgsOptions::default(),
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 20_000,
        }
    }
}

impl FitOptions {
    /// Integration settings inside the objective.
    pub fn ode(&self) -> OdeOptions {
        OdeOptions {
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
        }
    }

    /// Settings for forecasting with fitted parameters: same tolerances,
    /// the integrator's default step budget. Fits can land on stiff
    /// parameters (Km near 0) that the objective's budget would reject.
    pub fn forecast_ode(&self) -> OdeOptions {
        OdeOptions {
            max_steps: OdeOptions::default().max_steps,
            ..self.ode()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: MechanisticParams,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Gaussian negative log-likelihood up to a constant,
/// `0.5 * sum(((value - model(t)) / sigma_c)^2)`, or an error if the model
/// cannot be integrated over the context span.
pub fn mechanistic_nll_checked(
    params: &MechanisticParams,
    context: &SparseSeries,
    sigma: &[f64],
    opts: &OdeOptions,
) -> Result<f64> {
    let Some(t_end) = context.records().iter().map(|r| r.time).reduce(f64::max) else {
        return Ok(0.0);
    };
    let y0 = params.initial_state();
    let traj = if t_end > 0.0 {
        Some(integrate(params, t_end, opts)?)
    } else {
        None
    };
    let mut sum = 0.0;
    for r in context.records() {
        let m = match &traj {
            Some(tr) => eval_trajectory(tr, r.time)?[r.channel],
            None => y0[r.channel],
        };
        let z = (r.value - m) / sigma[r.channel];
        sum += z * z;
    }
    Ok(0.5 * sum)
}

/// As [`mechanistic_nll_checked`], with integration failures mapped to
/// `+inf` (logged at debug level).
pub fn mechanistic_nll(params: &MechanisticParams, context: &SparseSeries, sigma: &[f64], opts: &OdeOptions) -> f64 {
    match mechanistic_nll_checked(params, context, sigma, opts) {
        Ok(v) => v,
        Err(e) => {
            log::debug!("nll is infinite: {e}");
            f64::INFINITY
        }
    }
}

/// Free-parameter layout of a fit: which entries move, and the values of
/// the pinned ones.
struct LogSpace {
    base: Vec<f64>,
    free: Vec<usize>,
    kind: ModelKind,
}

impl LogSpace {
    fn new(prior: &PriorSpec) -> Self {
        Self {
            base: prior.bounds().iter().map(|b| b.0).collect(),
            free: prior.free_indices(),
            kind: prior.kind(),
        }
    }

    fn params(&self, z: &[f64]) -> Option<MechanisticParams> {
        let mut v = self.base.clone();
        for (&i, zi) in self.free.iter().zip(z) {
            v[i] = zi.exp();
        }
        MechanisticParams::new(self.kind, v).ok()
    }

    fn encode(&self, values: &[f64], prior: &PriorSpec) -> Vec<f64> {
        self.free
            .iter()
            .map(|&i| {
                let (lo, hi) = prior.bounds()[i];
                // a lower bound of 0 has no logarithm
                let floor = if lo > 0.0 { lo } else { 1e-3 * hi };
                values[i].max(floor).ln()
            })
            .collect()
    }

    fn midpoint(&self, prior: &PriorSpec) -> Vec<f64> {
        self.free
            .iter()
            .map(|&i| {
                let (lo, hi) = prior.bounds()[i];
                let lo = if lo > 0.0 { lo } else { 1e-3 * hi };
                0.5 * (lo.ln() + hi.ln())
            })
            .collect()
    }
}

/// Fits every non-pinned parameter of `prior`, initial conditions
/// included, by BFGS on log-parameters. The first start is the geometric
/// midpoint of each prior interval; further starts are prior draws.
pub fn fit_mechanistic_bfgs(
    context: &SparseSeries,
    prior: &PriorSpec,
    sigma: &[f64],
    opts: &FitOptions,
) -> Result<FitResult> {
    if context.is_empty() {
        return Err(CoreError::Contract(
            "cannot fit a mechanistic model to an empty context".into(),
        ));
    }
    if opts.multistart == 0 {
        return Err(CoreError::Validation("multistart must be >= 1".into()));
    }
    let space = LogSpace::new(prior);
    let ode = opts.ode();
    let objective = |z: &[f64]| match space.params(z) {
        Some(p) => mechanistic_nll(&p, context, sigma, &ode),
        None => f64::INFINITY,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<FitResult> = None;
    for s in 0..opts.multistart {
        let z0 = if s == 0 {
            space.midpoint(prior)
        } else {
            let draw = sample_params(prior, &mut rng);
            space.encode(draw.values(), prior)
        };
        let r = bfgs_minimize(objective, &z0, &opts.bfgs);
        let Some(params) = space.params(&r.x) else { continue };
        if !r.f.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| r.f < b.loss) {
            best = Some(FitResult {
                params,
                loss: r.f,
                iterations: r.iterations,
                converged: r.converged,
                grad_norm: r.grad_norm,
            });
        }
    }
    best.ok_or_else(|| CoreError::Integration {
        reason: "no start produced a finite loss".into(),
        params: format!("prior midpoint of {}", prior.kind()),
    })
}

/// Model values of `params` at each target, or `None` when the model
/// cannot be evaluated there.
pub fn fit_forecast(
    params: &MechanisticParams,
    targets: &[TripletRecord],
    t_max: f64,
    opts: &OdeOptions,
) -> Option<Vec<f64>> {
    let traj = integrate(params, t_max, opts).ok()?;
    let preds: Option<Vec<f64>> = targets
        .iter()
        .map(|r| eval_trajectory(&traj, r.time).ok().map(|v| v[r.channel]))
        .collect();
    preds.filter(|p| p.iter().all(|v| v.is_finite()))
}

/// One row of the fit export.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRow {
    pub trajectory: usize,
    pub converged: bool,
    pub iterations: usize,
    pub loss: f64,
    /// `None` when no start produced a finite loss.
    pub params: Option<MechanisticParams>,
    /// This trajectory's share of the split's noise-normalized squared
    /// error, `SSE_i / SST`.
    pub r2_contribution: f64,
}

pub fn write_fit_csv(path: &Path, kind: ModelKind, rows: &[FitRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trajectory", "converged", "iterations", "loss"];
    header.extend(kind.param_names());
    header.push("r2_contribution");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.trajectory.to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
            r.loss.to_string(),
        ];
        match &r.params {
            Some(p) => rec.extend(p.values().iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), kind.param_names().len())),
        }
        rec.push(r.r2_contribution.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fit_csv(path: &Path, kind: ModelKind) -> Result<Vec<FitRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let names = kind.param_names();
    let n = names.len();
    let perr = |line: usize, msg: String| CoreError::Parse {
        file: path.to_path_buf(),
        line,
        msg,
    };
    let header = r.headers()?.clone();
    if header.len() != n + 5 || header.iter().skip(4).take(n).ne(names.iter().copied()) {
        return Err(perr(1, format!("header does not match {kind} parameters")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let f = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|e| perr(line, format!("column {}: {e}", header[j].to_string())))
        };
        let params = if (4..4 + n).all(|j| rec[j].is_empty()) {
            None
        } else {
            let values = (4..4 + n).map(f).collect::<Result<Vec<_>>>()?;
            Some(MechanisticParams::new(kind, values).map_err(|e| perr(line, e.to_string()))?)
        };
        out.push(FitRow {
            trajectory: rec[0].parse().map_err(|e| perr(line, format!("trajectory: {e}")))?,
            converged: rec[1].parse().map_err(|e| perr(line, format!("converged: {e}")))?,
            iterations: rec[2].parse().map_err(|e| perr(line, format!("iterations: {e}")))?,
            loss: f(3)?,
            params,
            r2_contribution: f(4 + n)?,
        });
    }
    Ok(out)
}
