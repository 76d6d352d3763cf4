//! Central finite-difference verification of recorded gradients.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Default perturbation for central differences.
pub const DEFAULT_DELTA: f64 = 1e-4;

/// Smaller perturbation for deep piecewise-linear networks, where a 1e-4 step
/// can carry a ReLU input across zero.
pub const FINE_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub delta: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// coordinates with vanishing gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            floor: 1e-6,
        }
    }
}

impl GradCheckOptions {
    pub fn fine() -> Self {
        Self {
            delta: FINE_DELTA,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<L>(store: &ParamStore<f64>, loss: &L) -> Result<(f64, Tape<f64>, Bound, Var)>
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "gradient check needs a scalar loss, got {} values",
            v.len()
        )));
    }
    Ok((v[0], tape, bound, out))
}

/// Compares recorded gradients of every coordinate of every parameter in
/// `store` against central differences of `loss`.
pub fn grad_check<L>(store: &mut ParamStore<f64>, loss: L, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let (base, tape, bound, out) = eval(store, &loss)?;
    let mut grads = tape.backward(out);
    let analytic = bound.gradients(store, &mut grads);
    drop(tape);

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let name = store.get(id).name.clone();
        let mut check = ParamCheck {
            name,
            coords: grad.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.values(id)[i];
            store.values_mut(id)[i] = orig + opts.delta;
            let plus = eval(store, &loss)?.0;
            store.values_mut(id)[i] = orig - opts.delta;
            let minus = eval(store, &loss)?.0;
            store.values_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.delta);
            let err = relative_error(a, numeric, opts.floor);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, loss: base })
}
