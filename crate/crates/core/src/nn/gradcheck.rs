//! Central finite-difference check of autograd gradients.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::scalar;

/// Denominator floor of the relative error, so that gradients that are zero on
/// both sides compare equal.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error and both of its estimates.
    pub worst: String,
}

/// Compares the gradient of the scalar `loss` with respect to each named
/// variable against `(L(v + eps) - L(v - eps)) / 2 eps` on up to `per_var`
/// entries per variable. Variables must be `f64`; every variable is restored
/// before returning.
pub fn gradient_check<F>(loss: F, vars: &[(String, Var)], per_var: usize, eps: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    let base = loss()?;
    let grads = base.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::domain(format!(
                "gradient check needs f64, `{name}` is {:?}",
                var.dtype()
            )));
        }
        let shape = var.shape().clone();
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; original.len()],
        };
        let picks = sample(&mut rng, original.len(), per_var.min(original.len()));
        for i in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, &shape, var.device())?)?;
                scalar(&loss()?)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
            report.checked += 1;
        }
        var.set(&Tensor::from_vec(original, &shape, var.device())?)?;
    }
    Ok(report)
}

/// Fixed random weights for turning a tensor output into a scalar loss:
/// `(out * projection(out.shape)).sum()`.
pub fn projection(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut store = crate::nn::ParamStore::new(DType::F64, seed);
    store.normal("w", shape, 1.0)
}
