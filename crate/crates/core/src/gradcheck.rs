//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::nn::{Bound, ParamGroup, ParamStore};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub group: ParamGroup,
    pub checked: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over checked entries,
    /// or the absolute difference when both norms are below `1e-7`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn by_group(&self) -> BTreeMap<ParamGroup, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let e = out.entry(p.group).or_insert(0.0f64);
            *e = e.max(p.rel_error);
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares reverse-mode gradients of `loss` against central differences with
/// step `h`. At most `max_per_param` entries of each tensor are probed, spread
/// evenly. Step nodes use their exact derivative (see [`Graph::exact`]).
pub fn check_params(
    store: &ParamStore<f64>,
    h: f64,
    max_per_param: usize,
    loss: impl Fn(&mut Graph<f64>, &Bound) -> Var,
) -> GradCheckReport {
    let mut g = Graph::exact();
    let p = store.bind(&mut g, |_| true);
    let l = loss(&mut g, &p);
    let grads = g.backward(l);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::exact();
        let p = s.bind(&mut g, |_| true);
        let l = loss(&mut g, &p);
        g.value(l).item()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (i, entry) in store.entries().iter().enumerate() {
        let n = entry.value.len();
        let analytic_full = grads
            .get(p.vars()[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in (0..n).step_by(stride) {
            let orig = entry.value.data()[j];
            work.entries_mut()[i].value.data_mut()[j] = orig + h;
            let up = eval(&work);
            work.entries_mut()[i].value.data_mut()[j] = orig - h;
            let down = eval(&work);
            work.entries_mut()[i].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
            analytic.push(analytic_full[j]);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel_error = if scale < 1e-7 { norm(&diff) } else { norm(&diff) / scale };
        report.params.push(ParamCheck {
            name: entry.name.clone(),
            group: entry.group,
            checked: analytic.len(),
            rel_error,
        });
    }
    report
}
