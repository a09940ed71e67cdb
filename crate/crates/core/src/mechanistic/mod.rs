//! Macrokinetic simulators: Michaelis–Menten kinetics and a batch
//! E. coli overflow-metabolism model, integrated with an adaptive
//! Dormand–Prince scheme.

mod models;
pub mod ode;

pub use models::{
    ecoli_rhs, mmk_rhs, sample_params, EcoliKinetics, MechanisticParams, MmkKinetics, ModelKind, PriorSpec, DOT_MAX,
    TAU_O,
};
pub use ode::{DenseTrajectory, OdeError, OdeOptions};

use crate::{CoreError, Result};

/// Lower bound 0 for every state, plus `DOT <= 100` for E. coli.
pub fn state_bounds(kind: ModelKind) -> ode::StateBounds {
    let dim = kind.state_dim();
    let mut upper = vec![f64::INFINITY; dim];
    if kind == ModelKind::Ecoli {
        upper[3] = DOT_MAX;
    }
    ode::StateBounds {
        lower: vec![0.0; dim],
        upper,
    }
}

/// Simulates `params` on `[0, t_max]`.
pub fn integrate(params: &MechanisticParams, t_max: f64, opts: &OdeOptions) -> Result<DenseTrajectory> {
    let y0 = params.initial_state();
    let bounds = Some(state_bounds(params.kind()));
    let res = match params.kind() {
        ModelKind::Mmk => {
            let k = MmkKinetics::from_params(params);
            ode::integrate_adaptive(|_, y, dy| k.rhs(y, dy), &y0, t_max, opts, bounds)
        }
        ModelKind::Ecoli => {
            let k = EcoliKinetics::from_params(params);
            ode::integrate_adaptive(|_, y, dy| k.rhs(y, dy), &y0, t_max, opts, bounds)
        }
    };
    res.map_err(|e| match e {
        OdeError::StepUnderflow { t, h } | OdeError::OutOfSpan { t, hi: h, .. } => CoreError::Stiffness {
            t,
            h,
            params: params.to_string(),
        },
        other => CoreError::Integration {
            reason: other.to_string(),
            params: params.to_string(),
        },
    })
}

/// Per-channel model values at `t`. Channels coincide with the state
/// components of both models: MMK `(A = S, P)`, E. coli `(X, S, A, DOT)`.
pub fn eval_trajectory(traj: &DenseTrajectory, t: f64) -> Result<Vec<f64>> {
    traj.eval(t).map_err(|e| match e {
        OdeError::OutOfSpan { t, lo, hi } => CoreError::OutOfRange { t, lo, hi },
        other => CoreError::Validation(other.to_string()),
    })
}
