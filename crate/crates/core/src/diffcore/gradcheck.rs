//! Central-difference gradient verification.

use alloc::string::String;
use alloc::vec::Vec;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn eval<F>(params: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = loss_fn(&mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(alloc::format!("loss {v}")));
    }
    Ok(v)
}

/// Compares the taped gradient of `loss_fn` against
/// `(L(p + h) - L(p - h)) / 2h` for every scalar in `params`. The relative
/// error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidConfig(alloc::format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let mut probe = params.clone();
    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;
    for id in params.ids() {
        let n = params.value(id).len();
        for k in 0..n {
            let orig = params.value(id).as_slice()[k];
            probe.value_mut(id).as_mut_slice()[k] = orig + h;
            let up = eval(&probe, &loss_fn)?;
            probe.value_mut(id).as_mut_slice()[k] = orig - h;
            let down = eval(&probe, &loss_fn)?;
            probe.value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.as_slice()[k]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
            entries.push(GradCheckEntry {
                param: params.name(id).into(),
                index: k,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_error: max_rel,
        tol,
        passed: max_rel < tol,
    })
}
