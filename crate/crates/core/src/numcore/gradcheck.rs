//! Central finite-difference comparison against tape gradients.

use super::tape::{Tape, Var};
use super::tensor::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// `(parameter name, element index)` where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with an absolute floor so entries that are both near zero
/// do not blow up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `backward` gradients of the scalar built by `f` with central
/// differences of step `h`, over every element of every parameter in
/// `store`. `f` must be deterministic.
pub fn check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    store.zero_grad();
    store.accumulate(&grads);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(s, &mut t)?;
        Ok(t.value(l).item())
    };
    for id in store.ids() {
        let n = store.get(id).value.len();
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = store.get(id).grad.data()[i];
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
