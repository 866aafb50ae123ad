//! Central finite-difference verification of tape gradients.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub analytic_norm: f64,
}

/// Compare [`Graph::backward`] against central differences for every scalar
/// entry of the parameters in `ids`.
///
/// `forward` must build a scalar loss from scratch each time it is called.
pub fn check<T: Scalar>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    step: f64,
    forward: impl Fn(&mut Graph<'_, T>) -> Var,
) -> GradCheckReport {
    let analytic = {
        let mut g = Graph::with_trainable(store, ids);
        let loss = forward(&mut g);
        g.backward(loss)
    };
    let eval = |store: &ParamStore<T>| -> f64 {
        let mut g = Graph::new(store);
        let loss = forward(&mut g);
        g.scalar(loss).to_f64_lossy()
    };
    let h = T::c(step);
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    for &id in ids {
        let len = store.get(id).numel();
        for i in 0..len {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i].to_f64_lossy());
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    GradCheckReport {
        relative_error: if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 },
        max_abs_error: max_abs,
        checked,
        analytic_norm: a2.sqrt(),
    }
}
