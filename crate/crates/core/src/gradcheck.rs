//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// One scalar inside a named parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coordinate {
    pub name: String,
    pub index: usize,
}

impl Coordinate {
    pub fn new(name: impl Into<String>, index: usize) -> Self {
        Self {
            name: name.into(),
            index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
}

/// Compares the tape gradient of `f` against central differences with step `h`.
///
/// `f` records a scalar loss on a fresh tape from the current parameter
/// values. Parameters are restored bit-for-bit after each probe.
pub fn finite_difference_check<F>(mut f: F, store: &mut ParamStore, coords: &[Coordinate], h: f64) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.value(loss).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite difference probe",
            })
        }
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for c in coords {
        let original = *store
            .value_mut(&c.name)?
            .get(c.index)
            .ok_or_else(|| Error::invalid(format!("{}[{}] out of range", c.name, c.index)))?;
        store.value_mut(&c.name)?[c.index] = original + h;
        let plus = eval(store);
        store.value_mut(&c.name)?[c.index] = original - h;
        let minus = eval(store);
        store.value_mut(&c.name)?[c.index] = original;
        let numeric = (plus? - minus?) / (2.0 * h);

        let analytic = grads.get(&c.name).map_or(0.0, |g| g[c.index]);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(c.clone());
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Samples up to `per_param` distinct coordinates from every parameter tensor.
pub fn sample_coordinates<R: Rng>(store: &ParamStore, per_param: usize, rng: &mut R) -> Vec<Coordinate> {
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        let k = per_param.min(t.numel());
        let mut idx = sample(rng, t.numel(), k).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| Coordinate::new(name, i)));
    }
    out
}
