//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{EngineError, Result};
use crate::graph::Var;
use crate::params::{ParamStore, Tape};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation for `(f(p + eps) - f(p - eps)) / 2 eps`.
    pub epsilon: f64,
    /// Relative error above which a parameter group is flagged.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is (numerically) zero are judged on absolute error.
    pub floor: f64,
    /// Check at most this many entries per parameter, evenly spaced.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, floor: 1e-6, max_entries: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| !g.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &GroupCheck> {
        self.groups.iter().filter(|g| g.flagged)
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{} {:<40} n={:<5} rel={:.3e} abs={:.3e}",
                if g.flagged { "FAIL" } else { "ok  " },
                g.name,
                g.checked,
                g.max_rel_err,
                g.max_abs_err
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<L>(store: &ParamStore<f64>, loss_fn: &mut L) -> Result<f64>
where
    L: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(EngineError::Shape {
            op: "check_gradients",
            detail: format!("loss must be scalar, got {:?}", v.shape()),
        });
    }
    Ok(v.item())
}

/// Compares the tape's gradients of `loss_fn` against central differences,
/// for every parameter in `store`. The store is restored before returning.
pub fn check_gradients<L>(
    store: &mut ParamStore<f64>,
    options: GradCheckOptions,
    mut loss_fn: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic: BTreeMap<String, _> = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        let grads = tape.backward(loss)?;
        tape.param_gradients(&grads)
    };

    let names: Vec<String> = store.names().cloned().collect();
    let eps = options.epsilon;
    let mut groups = Vec::with_capacity(names.len());
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.len());
        let indices: Vec<usize> = match options.max_entries {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &indices {
            let orig = store.get(&name).unwrap().data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = evaluate(store, &mut loss_fn);
            store.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = evaluate(store, &mut loss_fn);
            store.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric, options.floor));
        }
        groups.push(GroupCheck {
            name,
            checked: indices.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            flagged: max_rel > options.tolerance,
        });
    }
    Ok(GradCheckReport { groups, tolerance: options.tolerance })
}
