use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the autodiff gradient of scalar `f` at `x` with central
/// differences of step `h`; returns the largest elementwise relative error.
///
/// A NaN in either gradient is reported as [`Error::Numeric`] rather than
/// folded into the maximum.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.item(out))
    };

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            inputs[t].data_mut()[i] = orig + h;
            let fp = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - h;
            let fm = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::Numeric(format!(
                    "gradient of input {t} element {i}: autodiff {a}, finite difference {numeric}"
                )));
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
