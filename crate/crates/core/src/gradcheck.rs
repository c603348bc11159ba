//! Central finite-difference gradient checks.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};

/// Finite-difference step for 32-bit evaluations.
pub const FD_STEP: f32 = 1e-3;

/// Relative error with a unit floor on the denominator, so coordinates whose
/// gradient is near zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let val = tape.value(v);
    if val.len() != 1 {
        return Err(Error::InvalidArgument {
            op: "check_gradients",
            msg: format!("function must return a scalar, got shape {:?}", val.shape()),
        });
    }
    Ok(val.item() as f64)
}

/// Compares the tape gradient of scalar `f` at `point` with central differences
/// coordinate by coordinate and returns the worst relative error.
pub fn check_gradients<F>(f: F, point: &Array) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y);
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Array::zeros(point.shape()));

    let eval = |p: &Array| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let y = f(&mut t, x)?;
        scalar_of(&t, y)
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let h = ((orig + FD_STEP) as f64) - ((orig - FD_STEP) as f64);
        let numeric = (up - down) / h;
        worst = worst.max(relative_error(analytic.data()[i] as f64, numeric));
    }
    Ok(worst)
}

/// Gradient check over every scalar of every parameter in `sets`.
///
/// `f` builds the scalar on a tape from the given sets; the analytic gradient
/// is the one accumulated by [`Tape::backward_into`].
pub fn check_param_gradients<F>(sets: &mut [&mut ParamSet], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[&ParamSet]) -> Result<Var>,
{
    check_param_gradients_subset(sets, usize::MAX, f)
}

/// As [`check_param_gradients`], but probes at most `max_per_param` evenly
/// spaced coordinates of each parameter.
pub fn check_param_gradients_subset<F>(sets: &mut [&mut ParamSet], max_per_param: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[&ParamSet]) -> Result<Var>,
{
    for ps in sets.iter_mut() {
        ps.zero_grads();
    }
    {
        let mut tape = Tape::new();
        let views: Vec<&ParamSet> = sets.iter().map(|p| &**p).collect();
        let y = f(&mut tape, &views)?;
        scalar_of(&tape, y)?;
        let grads = tape.backward(y);
        drop(views);
        for ps in sets.iter_mut() {
            tape.accumulate(&grads, ps);
        }
    }
    let analytic: Vec<Vec<Array>> = sets
        .iter()
        .map(|ps| ps.ids().map(|id| ps.grad(id).clone()).collect())
        .collect();

    let mut worst = 0.0f64;
    for s in 0..sets.len() {
        let ids: Vec<_> = sets[s].ids().collect();
        for (k, &id) in ids.iter().enumerate() {
            let n = sets[s].value(id).len();
            let stride = n.div_ceil(max_per_param.min(n)).max(1);
            for i in (0..n).step_by(stride) {
                let orig = sets[s].value(id).data()[i];
                let mut eval_at = |v: f32| -> Result<f64> {
                    sets[s].value_mut(id).data_mut()[i] = v;
                    let mut t = Tape::new();
                    let views: Vec<&ParamSet> = sets.iter().map(|p| &**p).collect();
                    for p in &views {
                        t.freeze(p);
                    }
                    let y = f(&mut t, &views)?;
                    scalar_of(&t, y)
                };
                let up = eval_at(orig + FD_STEP)?;
                let down = eval_at(orig - FD_STEP)?;
                sets[s].value_mut(id).data_mut()[i] = orig;
                let h = ((orig + FD_STEP) as f64) - ((orig - FD_STEP) as f64);
                let numeric = (up - down) / h;
                worst = worst.max(relative_error(analytic[s][k].data()[i] as f64, numeric));
            }
        }
    }
    for ps in sets.iter_mut() {
        ps.zero_grads();
    }
    Ok(worst)
}
