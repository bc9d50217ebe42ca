use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error over the inputs,
/// `|a - n| / max(1e-12, |a| + |n|)` with `a` and `n` the analytic and
/// numeric gradient of one input tensor (Euclidean norms).
///
/// `f` receives a fresh graph and one leaf per entry of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], requires_grad: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::NonScalarLoss(g.value(out).shape().to_vec()));
        }
        if !g.scalar(out).is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let (mut diff, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        #[allow(clippy::needless_range_loop)]
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            perturbed[k].data_mut()[idx] = orig + GRAD_CHECK_STEP;
            let (gp, _, op) = eval(&perturbed, false)?;
            perturbed[k].data_mut()[idx] = orig - GRAD_CHECK_STEP;
            let (gm, _, om) = eval(&perturbed, false)?;
            perturbed[k].data_mut()[idx] = orig;
            let numeric = (gp.scalar(op) - gm.scalar(om)) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[k][idx];
            diff += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        worst = worst.max(diff.sqrt() / (a_sq.sqrt() + n_sq.sqrt()).max(1e-12));
    }
    Ok(worst)
}
