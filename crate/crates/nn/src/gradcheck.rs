use crate::{Graph, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(tensor, entry)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose central-difference stencil changed a ReLU sign
    /// pattern; the function is not differentiable there.
    pub skipped_kinks: usize,
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g.value(loss).data()[0], g.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, entry by entry.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        for j in 0..point[ti].numel() {
            let analytic = grads.get(*var).map_or(0.0, |t| t.data()[j]);
            let x0 = point[ti].data()[j];
            probe[ti].data_mut()[j] = x0 + h;
            let (fp, sp) = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = x0 - h;
            let (fm, sm) = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = x0;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, j));
            }
        }
    }
    Ok(report)
}
