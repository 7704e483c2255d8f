use super::autodiff::{Graph, Var};
use super::{LanguageModel, LmError};
use crate::seeds;
use rand::seq::index;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (flat index, tape gradient, finite difference) of the worst entry.
    pub worst: (usize, f64, f64),
}

/// Denominator floor so that entries with a vanishing gradient compare in
/// absolute terms.
const FLOOR: f64 = 1e-6;

/// Compares tape gradients of `loss` with central finite differences on
/// up to `n_coords` parameter entries drawn with `seed`.
pub fn grad_check<M, F>(
    model: &mut M,
    loss: F,
    n_coords: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport, LmError>
where
    M: LanguageModel + ?Sized,
    F: Fn(&mut Graph, &M, &[Var]) -> Result<Var, LmError>,
{
    let eval = |m: &M| -> Result<f64, LmError> {
        let mut g = Graph::new();
        let pv = m.params().bind(&mut g);
        let l = loss(&mut g, m, &pv)?;
        g.ensure_finite()?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g);
    let l = loss(&mut g, model, &pv)?;
    g.ensure_finite()?;
    let grads = g.backward(l);
    let dense: Vec<f64> = model.params().collect_grads(&g, &grads).concat();

    // Most entries of a sparse gradient are exact zeros on both sides, so
    // three quarters of the budget goes to entries the tape says matter.
    let n = dense.len();
    let live: Vec<usize> = (0..n).filter(|&k| dense[k] != 0.0).collect();
    let mut rng = seeds::rng(seed, &[]);
    let n_live = (3 * n_coords / 4).min(live.len());
    let mut picks: Vec<usize> = index::sample(&mut rng, live.len(), n_live)
        .into_iter()
        .map(|i| live[i])
        .collect();
    for k in index::sample(&mut rng, n, (n_coords - n_live).min(n)) {
        if !picks.contains(&k) {
            picks.push(k);
        }
    }
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: (0, 0.0, 0.0),
    };
    for k in picks {
        let orig = model.params().flat_get(k);
        model.params_mut().flat_set(k, orig + eps);
        let up = eval(model)?;
        model.params_mut().flat_set(k, orig - eps);
        let down = eval(model)?;
        model.params_mut().flat_set(k, orig);
        let fd = (up - down) / (2.0 * eps);
        let a = dense[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (k, a, fd);
        }
    }
    Ok(report)
}
