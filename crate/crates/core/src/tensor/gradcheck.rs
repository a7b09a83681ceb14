//! Central finite-difference check of recorded gradients.

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Gradients smaller than this in both routes are compared absolutely. Central
/// differences at h = 1e-5 carry roundoff near 1e-11 per unit of loss.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare the backward pass of `loss_fn` with central differences of step `h`
/// over the entries of `ids`. At most `max_entries` entries per parameter are
/// probed, spread evenly over the parameter. `loss_fn` is evaluated on
/// evaluation-mode graphs.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    max_entries: Option<usize>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &id in ids {
        let n = store.value(id).len();
        let stride = match max_entries {
            Some(k) if k < n => n.div_ceil(k),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |m| m.data()[e]);
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + h;
            let plus = eval(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[e] = orig - h;
            let minus = eval(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), e, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    Ok(g.value(loss).item())
}
