use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used by [`grad_check`]: `|a - n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Analytic gradients of `f` at `params`, plus the detach/reversal inputs
/// recorded on the way (needed to replay perturbed evaluations).
pub fn analytic_gradient<F>(params: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::recording();
    let vars = params
        .iter()
        .map(|p| g.param(p))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let analytic = vars.iter().map(|&v| grads.wrt(v)).collect();
    Ok((value, analytic, g.into_recorded()))
}

fn evaluate<F>(params: &[Tensor], frozen: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::replaying(frozen.to_vec());
    let vars = params
        .iter()
        .map(|p| g.param(p))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::Shape("grad_check objective must be scalar".into()));
    }
    Ok(g.value(loss).item())
}

/// Central differences of `f` at `params`. Detached subgraphs stay at their
/// recorded values and reversal nodes scale their perturbation by `-λ`.
pub fn numeric_gradient<F>(
    params: &[Tensor],
    frozen: &[Tensor],
    eps: f64,
    f: &F,
) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].rows(), params[p].cols());
        for k in 0..params[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let plus = evaluate(&work, frozen, f)?;
            work[p].data_mut()[k] = orig - eps;
            let minus = evaluate(&work, frozen, f)?;
            work[p].data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Max over every parameter entry of `|analytic − central difference| /
/// max(1, |central difference|)`.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let (_, analytic, frozen) = analytic_gradient(params, &f)?;
    let numeric = numeric_gradient(params, &frozen, eps, &f)?;
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(x, y));
        }
    }
    Ok(worst)
}
