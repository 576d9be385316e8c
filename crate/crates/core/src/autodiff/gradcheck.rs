//! Central-difference gradient checking.

use std::collections::BTreeMap;

use super::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Default perturbation for central differences.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Compares analytic gradients against central differences.
///
/// `f` must deterministically rebuild the forward pass from the store and
/// return the tape plus the scalar loss node. The result is the maximum over
/// all trainable parameter elements of
/// |analytic - numeric| / max(1, |numeric|).
pub fn grad_check<F>(store: &mut ParamStore, epsilon: f64, f: F) -> Result<f64>
where
    F: Fn(&mut ParamStore) -> Result<(Tape, Var)>,
{
    Ok(grad_check_named(store, epsilon, f)?
        .values()
        .fold(0.0, |acc, &v| acc.max(v)))
}

/// Like [`grad_check`] but reports the worst relative error per parameter.
pub fn grad_check_named<F>(
    store: &mut ParamStore,
    epsilon: f64,
    f: F,
) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut ParamStore) -> Result<(Tape, Var)>,
{
    let (mut tape, loss) = f(store)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads();
    drop(tape);

    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut worst = BTreeMap::new();
    for name in names {
        let numel = store.get(&name)?.numel();
        let mut param_worst = 0.0f64;
        for i in 0..numel {
            let original = store.get(&name)?.data()[i];

            let mut bumped = store.get(&name)?.clone();
            bumped.data_mut()[i] = original + epsilon;
            store.set_value(&name, bumped)?;
            let (tape_p, loss_p) = f(store)?;
            let up = tape_p.data(loss_p)[0];
            drop(tape_p);

            let mut bumped = store.get(&name)?.clone();
            bumped.data_mut()[i] = original - epsilon;
            store.set_value(&name, bumped)?;
            let (tape_m, loss_m) = f(store)?;
            let down = tape_m.data(loss_m)[0];
            drop(tape_m);

            let mut restored = store.get(&name)?.clone();
            restored.data_mut()[i] = original;
            store.set_value(&name, restored)?;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic
                .get(&name)
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            param_worst = param_worst.max(rel);
        }
        worst.insert(name, param_worst);
    }
    Ok(worst)
}
