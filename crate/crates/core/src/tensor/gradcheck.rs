//! Central finite differences, used as the independent oracle for every
//! backward rule.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the gradient checks.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Minimum distance to a nondifferentiable point required before a check
/// point is accepted.
pub const KINK_MARGIN: f64 = 1e-3;

/// Denominator floor of the per-coordinate relative error, so coordinates
/// whose true gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let base = x.to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = base[i] - eps;
        let down = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = base[i];
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Largest per-coordinate `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOutcome {
    pub max_rel_error: f64,
    pub kink_margin: f64,
}

/// Compares the backward pass of `build` against finite differences with
/// respect to every input. `build` maps input leaves to a scalar node.
pub fn check_graph_fn<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::invalid("gradient check needs a scalar function"));
        }
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let kink_margin = g.kink_margin();
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").to_vec();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |probe| {
                let mut values = inputs.to_vec();
                values[k] = probe.clone();
                match eval(&values) {
                    Ok((g, _, out)) => g.value(out).item(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &inputs[k],
            eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(CheckOutcome {
        max_rel_error: worst,
        kink_margin,
    })
}

/// Draws input sets from `sample` until the recorded graph stays at least
/// [`KINK_MARGIN`] away from every kink, then checks it.
pub fn check_at_smooth_point<F, S>(build: F, mut sample: S, max_tries: usize) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    S: FnMut() -> Vec<Tensor<f64>>,
{
    for _ in 0..max_tries {
        let inputs = sample();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        build(&mut g, &vars)?;
        if g.kink_margin() >= KINK_MARGIN {
            return check_graph_fn(&build, &inputs, DEFAULT_EPS);
        }
    }
    Err(Error::invalid(format!("no smooth check point found in {max_tries} draws")))
}
