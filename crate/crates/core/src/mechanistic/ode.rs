//! Dormand–Prince 5(4) integration with the pair's native continuous
//! extension as dense output.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {0} integration steps")]
    TooManySteps(usize),
    #[error("time {t} outside trajectory span [{lo}, {hi}]")]
    OutOfSpan { t: f64, lo: f64, hi: f64 },
    #[error("invalid integration request: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 1_000_000,
        }
    }
}

/// Box constraints applied to the state after every accepted step.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBounds {
    pub fn clamp(&self, y: &mut [f64]) -> bool {
        let mut changed = false;
        for ((v, lo), hi) in y.iter_mut().zip(&self.lower).zip(&self.upper) {
            let c = v.clamp(*lo, *hi);
            if c != *v {
                *v = c;
                changed = true;
            }
        }
        changed
    }
}

// Butcher tableau
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// embedded 4th-order weights
const E1: f64 = 5179.0 / 57600.0;
const E3: f64 = 7571.0 / 16695.0;
const E4: f64 = 393.0 / 640.0;
const E5: f64 = -92097.0 / 339200.0;
const E6: f64 = 187.0 / 2100.0;
const E7: f64 = 1.0 / 40.0;
// continuous extension (Shampine)
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Scratch space for one Dormand–Prince step of a `dim`-dimensional system.
struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y5: Vec<f64>,
    y4: Vec<f64>,
}

impl Stages {
    fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
            y5: vec![0.0; dim],
            y4: vec![0.0; dim],
        }
    }

    /// Fills `y5`, `y4` and stages `k[1..7]` given `k[0] = f(t, y)`.
    /// `k[6]` ends up as `f(t + h, y5)`.
    fn step<F>(&mut self, rhs: &mut F, t: f64, y: &[f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let Self { k, tmp, y5, y4 } = self;
        let [k1, k2, k3, k4, k5, k6, k7] = k;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        rhs(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        rhs(t + h, tmp, k6);
        for i in 0..n {
            y5[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        rhs(t + h, y5, k7);
        for i in 0..n {
            y4[i] = y[i] + h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
    }
}

/// Which solution of the embedded pair a fixed-step run propagates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairComponent {
    Fifth,
    Fourth,
}

/// Non-adaptive core: `n_steps` equal Dormand–Prince steps from `t = 0`
/// to `t_end`, propagating the chosen component of the pair.
pub fn integrate_fixed<F>(mut rhs: F, y0: &[f64], t_end: f64, n_steps: usize, component: PairComponent) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let h = t_end / n_steps as f64;
    let mut st = Stages::new(y0.len());
    let mut y = y0.to_vec();
    for i in 0..n_steps {
        let t = i as f64 * h;
        rhs(t, &y, &mut st.k[0]);
        st.step(&mut rhs, t, &y, h);
        match component {
            PairComponent::Fifth => y.copy_from_slice(&st.y5),
            PairComponent::Fourth => y.copy_from_slice(&st.y4),
        }
    }
    y
}

/// Accepted steps of an adaptive run: the (clamped) state at every step
/// boundary plus five interpolation coefficient vectors per step.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTrajectory {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    coeffs: Vec<f64>,
    /// Whether step `i` ended on a clamped state.
    clamped: Vec<bool>,
    bounds: Option<StateBounds>,
}

impl DenseTrajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// State at `t`, exact at accepted-step times and interpolated with
    /// the continuous extension in between. Inside a step whose end state
    /// was clamped, interpolated values are clamped too; elsewhere the
    /// interpolant is left alone so linear invariants survive.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, OdeError> {
        let (lo, hi) = (self.times[0], self.t_end());
        if !(t >= lo && t <= hi) {
            return Err(OdeError::OutOfSpan { t, lo, hi });
        }
        let i = self.times.partition_point(|&s| s <= t);
        // times[i - 1] <= t < times[i], or i == len when t == hi
        let left = i - 1;
        if self.times[left] == t {
            return Ok(self.state(left).to_vec());
        }
        let (t0, t1) = (self.times[left], self.times[left + 1]);
        let s = (t - t0) / (t1 - t0);
        let s1 = 1.0 - s;
        let base = left * 5 * self.dim;
        let r = |k: usize, j: usize| self.coeffs[base + k * self.dim + j];
        let mut out: Vec<f64> = (0..self.dim)
            .map(|j| r(0, j) + s * (r(1, j) + s1 * (r(2, j) + s * (r(3, j) + s1 * r(4, j)))))
            .collect();
        if let (true, Some(b)) = (self.clamped[left], &self.bounds) {
            b.clamp(&mut out);
        }
        Ok(out)
    }
}

fn push_coeffs(out: &mut Vec<f64>, y: &[f64], st: &Stages, h: f64) {
    let k = &st.k;
    let n = y.len();
    let diff: Vec<f64> = (0..n).map(|i| st.y5[i] - y[i]).collect();
    let bspl: Vec<f64> = (0..n).map(|i| h * k[0][i] - diff[i]).collect();
    out.extend_from_slice(y);
    out.extend_from_slice(&diff);
    out.extend_from_slice(&bspl);
    out.extend((0..n).map(|i| diff[i] - h * k[6][i] - bspl[i]));
    out.extend(
        (0..n).map(|i| h * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i])),
    );
}

fn err_norm(y: &[f64], y5: &[f64], y4: &[f64], opts: &OdeOptions) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..y.len() {
        let sc = opts.atol + opts.rtol * y[i].abs().max(y5[i].abs());
        let e = (y5[i] - y4[i]).abs() / sc;
        if e.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(e);
    }
    worst
}

fn initial_step<F>(rhs: &mut F, y0: &[f64], f0: &[f64], t_end: f64, opts: &OdeOptions) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let sc: Vec<f64> = y0.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let rms = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let d0 = rms(y0);
    let d1 = rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(t_end);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    rhs(h0, &y1, &mut f1);
    let df: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&df) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(t_end)
}

/// Adaptive Dormand–Prince integration of `rhs` from `t = 0` to `t_end`.
///
/// A step is accepted when every component's error estimate is within
/// `atol + rtol * |y|`. Accepted states are clamped to `bounds`.
pub fn integrate_adaptive<F>(
    mut rhs: F,
    y0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
    bounds: Option<StateBounds>,
) -> Result<DenseTrajectory, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(OdeError::Invalid(format!("t_end must be positive, got {t_end}")));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::Invalid("non-finite initial state".into()));
    }
    let dim = y0.len();
    let mut y = y0.to_vec();
    if let Some(b) = &bounds {
        b.clamp(&mut y);
    }
    let mut st = Stages::new(dim);
    rhs(0.0, &y, &mut st.k[0]);
    let mut traj = DenseTrajectory {
        dim,
        times: vec![0.0],
        states: y.clone(),
        coeffs: Vec::new(),
        clamped: Vec::new(),
        bounds: None,
    };
    let h_min = 1e-12 * t_end;
    let mut h = initial_step(&mut rhs, &y, &st.k[0].clone(), t_end, opts).max(h_min);
    let mut t = 0.0;
    let mut steps = 0usize;
    while t < t_end {
        steps += 1;
        if steps > opts.max_steps {
            return Err(OdeError::TooManySteps(opts.max_steps));
        }
        let last = t + h >= t_end;
        let h_try = if last { t_end - t } else { h };
        st.step(&mut rhs, t, &y, h_try);
        let err = err_norm(&y, &st.y5, &st.y4, opts);
        if err <= 1.0 {
            t = if last { t_end } else { t + h_try };
            push_coeffs(&mut traj.coeffs, &y, &st, h_try);
            y.copy_from_slice(&st.y5);
            let clamped = bounds.as_ref().is_some_and(|b| b.clamp(&mut y));
            traj.clamped.push(clamped);
            if clamped {
                rhs(t, &y, &mut st.k[0]);
            } else {
                let (k1, rest) = st.k.split_at_mut(1);
                k1[0].copy_from_slice(&rest[5]);
            }
            traj.times.push(t);
            traj.states.extend_from_slice(&y);
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = h_try * fac;
        } else {
            let fac = if err.is_finite() {
                (0.9 * err.powf(-0.2)).clamp(0.2, 1.0)
            } else {
                0.2
            };
            h = h_try * fac;
            if h < h_min {
                return Err(OdeError::StepUnderflow { t, h });
            }
        }
    }
    traj.bounds = bounds;
    Ok(traj)
}
