//! Central finite-difference verification of [`Graph::backward`].

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter, raw storage index)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares backward gradients of `f` against central differences.
///
/// The numeric derivative is Richardson-extrapolated from steps `eps` and
/// `2 * eps`, `(4 D(eps) - D(2 eps)) / 3`, which cancels the second-order
/// truncation term and allows steps large enough to keep round-off well
/// below tiny gradients.
///
/// `f` must rebuild the same computation each call from the supplied
/// parameter leaves and return a scalar. Complex parameters are perturbed in
/// their real and imaginary parts separately.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| p.zeros_like()))
        .collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].data().len() {
            let orig = work[p].data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work[p].data_mut()[i] = orig + h;
                let up = eval(&work)?;
                work[p].data_mut()[i] = orig - h;
                let down = eval(&work)?;
                work[p].data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = (4.0 * central(eps)? - central(2.0 * eps)?) / 3.0;
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}
