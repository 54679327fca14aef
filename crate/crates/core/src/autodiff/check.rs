//! Central-difference gradient oracle.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{MuseError, Result};

/// Result of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    /// Max over coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares analytic gradients of a scalar graph against central
/// differences `(f(x + eps e) - f(x - eps e)) / 2 eps`.
///
/// `build` receives a fresh graph and one trainable leaf per entry of
/// `leaves` and must return a scalar node. It is re-run for every probe,
/// so it has to be deterministic; a mismatch between two evaluations at the
/// base point is reported as an oracle error.
pub fn finite_difference_check<F>(mut build: F, leaves: &[Tensor<f64>], eps: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(MuseError::Argument(format!("finite-difference eps {eps} outside (0, 1e-2]")));
    }
    let analytic = analytic_gradients(&mut build, leaves)?;
    let mut eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if !g.value(out).is_scalar() {
            return Err(MuseError::Argument("gradient check needs a scalar output".into()));
        }
        Ok(g.value(out).item())
    };

    let base = eval(leaves)?;
    let again = eval(leaves)?;
    if base.to_bits() != again.to_bits() {
        return Err(MuseError::Oracle(format!("non-deterministic function: {base:e} then {again:e}")));
    }

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for c in 0..leaf.numel() {
            let x0 = leaf.data()[c];
            probe[li].data_mut()[c] = x0 + eps;
            let fp = eval(&probe)?;
            probe[li].data_mut()[c] = x0 - eps;
            let fm = eval(&probe)?;
            probe[li].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[li][c];
            let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            worst = worst.max(err);
            coordinates += 1;
        }
    }
    Ok(CheckReport { max_rel_error: worst, coordinates })
}

/// Analytic gradient of the built scalar with respect to each leaf.
pub fn analytic_gradients<F>(build: &mut F, leaves: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad(v).expect("leaf gradient after backward").to_vec()).collect())
}
