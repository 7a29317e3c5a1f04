use rand::Rng;

use crate::numerics::params::ParameterSet;
use crate::numerics::rng::derive_rng;

/// A deterministic scalar loss over a [`ParameterSet`] together with its
/// analytic gradient.
pub trait DifferentiableLoss {
    fn value(&self, params: &ParameterSet) -> f64;
    /// Writes dL/dθ into the gradient buffers (callee zeroes them first).
    fn gradient(&self, params: &mut ParameterSet);
}

/// Any `(value_fn, gradient_fn)` closure pair is a differentiable loss.
impl<V, G> DifferentiableLoss for (V, G)
where
    V: Fn(&ParameterSet) -> f64,
    G: Fn(&mut ParameterSet),
{
    fn value(&self, params: &ParameterSet) -> f64 {
        (self.0)(params)
    }

    fn gradient(&self, params: &mut ParameterSet) {
        params.zero_grads();
        (self.1)(params)
    }
}

/// Compares the analytic gradient against central differences at `n_probes`
/// randomly chosen scalar parameters and returns the worst relative error,
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    loss: &dyn DifferentiableLoss,
    params: &mut ParameterSet,
    n_probes: usize,
    h: f64,
    seed: u64,
) -> f64 {
    loss.gradient(params);
    let analytic: Vec<f64> = (0..params.n_scalars())
        .map(|k| params.flat_grad(k))
        .collect();

    let total = params.n_scalars();
    assert!(total > 0, "no parameters to probe");
    let mut rng = derive_rng(seed, "finite-diff", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let k = rng.gen_range(0..total);
        let original = *params.flat_value_mut(k);
        *params.flat_value_mut(k) = original + h;
        let plus = loss.value(params);
        *params.flat_value_mut(k) = original - h;
        let minus = loss.value(params);
        *params.flat_value_mut(k) = original;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[k];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    params.zero_grads();
    worst
}
