//! Central-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const WORST_KEPT: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Worst coordinates, largest relative error first.
    pub worst: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `backward()` against `(f(p+e) - f(p-e)) / 2e` for every
/// coordinate of `params` (all trainable parameters when empty).
///
/// `loss_fn` builds the scalar loss on the supplied tape; it is called
/// once on a recording tape and twice per coordinate in inference mode.
/// Parameter values are restored before returning.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    epsilon: f64,
    tolerance: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::Contract(format!(
            "epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let ids: Vec<ParamId> = if params.is_empty() {
        store.ids().filter(|&id| store.is_trainable(id)).collect()
    } else {
        params.to_vec()
    };

    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let l = loss_fn(&mut t, store)?;
        t.value(l).item()
    };

    let mut entries = Vec::new();
    let mut coordinates = 0;
    for id in ids {
        let original = store.value(id).clone();
        let analytic = store.get(id).gradient.clone();
        let name = store.get(id).identifier.clone();
        for i in 0..original.len() {
            let mut shifted = original.to_vec();
            shifted[i] = original.data()[i] + epsilon;
            store.set_value(
                id,
                Tensor::from_parts(original.shape().to_vec(), shifted.clone()),
            )?;
            let plus = eval(store)?;
            shifted[i] = original.data()[i] - epsilon;
            store.set_value(id, Tensor::from_parts(original.shape().to_vec(), shifted))?;
            let minus = eval(store)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[i];
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
            coordinates += 1;
        }
        store.set_value(id, original)?;
    }

    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    entries.truncate(WORST_KEPT);
    Ok(GradCheckReport {
        max_rel_error: entries.first().map_or(0.0, |e| e.rel_error),
        tolerance,
        coordinates,
        worst: entries,
    })
}
