//! Central finite-difference checks of tape gradients.

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-coordinate comparison is relative to `max(|analytic|, |numeric|)`,
/// floored at this fraction of the largest analytic entry so coordinates that
/// are numerically zero do not amplify rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-3;

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant_ref(x)).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(NumericsError::Dimension {
            op: "grad_check",
            detail: format!("function must return a scalar, got {:?}", v.shape()),
        });
    }
    Ok(v.item())
}

/// Autodiff gradients of `f` at `xs`, one tensor per input.
pub fn analytic_gradient<F>(f: &F, xs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param_ref(x)).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect())
}

/// Central difference `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for one coordinate.
pub fn numeric_partial<F>(f: &F, xs: &[Tensor], input: usize, index: usize, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut probe = xs.to_vec();
    let orig = probe[input].data()[index];
    probe[input].data_mut()[index] = orig + eps;
    let plus = evaluate(f, &probe)?;
    probe[input].data_mut()[index] = orig - eps;
    let minus = evaluate(f, &probe)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Full central-difference gradient of a single-input function.
pub fn numeric_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let wrapped = |g: &mut Graph<'_>, vs: &[Var]| f(g, vs[0]);
    let xs = [x.clone()];
    let data = (0..x.numel())
        .map(|i| numeric_partial(&wrapped, &xs, 0, i, eps))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(x.shape().to_vec(), data)
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Max relative error between autodiff and central differences over every
/// coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let wrapped = |g: &mut Graph<'_>, vs: &[Var]| f(g, vs[0]);
    let coords: Vec<(usize, usize)> = (0..x.numel()).map(|i| (0, i)).collect();
    grad_check_at(wrapped, std::slice::from_ref(x), eps, &coords)
}

/// Like [`grad_check`] for several inputs, restricted to the listed
/// `(input, flat index)` coordinates.
pub fn grad_check_at<F>(f: F, xs: &[Tensor], eps: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, xs)?;
    let scale = analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let floor = (RELATIVE_FLOOR * scale).max(1e-12);
    let mut worst: f64 = 0.0;
    for &(input, index) in coords {
        if input >= xs.len() || index >= xs[input].numel() {
            return Err(NumericsError::Index {
                what: "grad_check coordinate",
                index,
                extent: xs.get(input).map_or(0, Tensor::numel),
            });
        }
        let n = numeric_partial(&f, xs, input, index, eps)?;
        worst = worst.max(relative_error(analytic[input].data()[index], n, floor));
    }
    Ok(worst)
}
