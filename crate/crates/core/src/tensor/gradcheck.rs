//! Central finite-difference oracle for analytic gradients. Test
//! infrastructure, but shipped in the library so the CLI and acceptance
//! suite can run it on full backbones.

use super::params::ParamStore;
use crate::error::Result;

/// Per-parameter result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat element index where the max error occurred.
    pub argmax: usize,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl FiniteDiffReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare analytic gradients against central finite differences for every
/// scalar parameter in `store`.
///
/// `loss` must be a pure function of the store (it rebuilds its graph on
/// every call). `analytic` holds d(loss)/d(param) aligned with the store.
/// The relative error uses a small absolute floor so that near-zero
/// gradients do not produce spurious failures from roundoff:
/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn finite_diff_check(
    store: &mut ParamStore,
    analytic: &[super::Tensor],
    h: f64,
    tol: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<FiniteDiffReport> {
    let mut per_param = Vec::with_capacity(store.len());
    let mut global_max = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.value(id).numel();
        let name = store.name(id).to_string();
        let mut max_rel = 0.0f64;
        let mut argmax = 0usize;
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let up = loss(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let down = loss(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
                argmax = j;
            }
        }
        global_max = global_max.max(max_rel);
        per_param.push(ParamCheck { name, max_rel_err: max_rel, argmax });
    }
    Ok(FiniteDiffReport { per_param, max_rel_err: global_max, tol })
}
