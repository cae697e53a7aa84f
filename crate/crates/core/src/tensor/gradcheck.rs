use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v)?;
    t.item().ok_or_else(|| Error::NonScalarLoss(t.shape().to_vec()))
}

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.param(ParamId(0), x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(x.shape());
    let analytic = grads.get(ParamId(0)).unwrap_or(&zero).clone();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        scalar_of(&t, out)
    };
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[j] += eps;
        let mut minus = x.clone();
        minus.data_mut()[j] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Gradient check over every parameter of a store. `max_coords` caps the
/// number of probed coordinates per tensor (evenly strided) for large models.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore, bool) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store, true)?;
    let grads = tape.backward(out)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let out = f(&mut t, s, false)?;
        scalar_of(&t, out)
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grads.get(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &Tensor::vector(vec![3.0]),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_scalar_function_is_an_error() {
        let r = grad_check(|t, x| t.relu(x), &Tensor::vector(vec![1.0, 2.0]), 1e-3);
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
    }
}
