//! Training objectives: snippet classification, instance masks, foreground
//! completeness and inter-branch consistency.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::LossToggles;
use crate::datamodel::DenseLabels;
use crate::error::{ensure, Error, Result};
use crate::model::{ForwardVars, Stale};
use crate::nn::Bound;
use crate::tensor::{lit, Real, Tensor};

/// Log clamp used by every objective.
pub const EPS: f64 = 1e-8;
/// Weight of the dice term in the mask objective.
pub const LAMBDA_DICE: f64 = 0.4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class: f64,
    pub mask: f64,
    pub completeness: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.class, self.mask, self.completeness, self.consistency, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.class += w * other.class;
        self.mask += w * other.mask;
        self.completeness += w * other.completeness;
        self.consistency += w * other.consistency;
        self.total += w * other.total;
    }
}

fn shape_check(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    ensure(got == want, || {
        Error::Shape(format!(
            "{what}: got {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        ))
    })
}

/// Cross-entropy of `P` against one-hot `y`, averaged over all snippets.
pub fn loss_class<T: Real>(g: &mut Graph<T>, p: Var, y: &Tensor<T>) -> Result<Var> {
    let t_len = g.shape(p).1;
    loss_class_weighted(g, p, y, &vec![1.0; t_len])
}

/// `(1/T) sum_t w_t CE_t`; a zero weight drops snippet `t`.
pub fn loss_class_weighted<T: Real>(g: &mut Graph<T>, p: Var, y: &Tensor<T>, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(p);
    shape_check("class targets", y.shape(), shape)?;
    ensure(weights.len() == shape.1, || {
        Error::Shape("one weight per snippet".into())
    })?;
    let log_p = g.log_eps(p, EPS);
    let yw = Tensor::from_fn(shape.0, shape.1, |k, t| y.get(k, t) * lit(weights[t]));
    let yv = g.constant(yw);
    let prod = g.mul(yv, log_p);
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / shape.1 as f64))
}

/// Weighted BCE plus dice over the supervised (action) columns of `M`.
///
/// Column `t` with target `g = masks[:, t]` contributes
/// `-[b_fg sum g log m + b_bg sum (1-g) log(1-m)] / T + lambda (1 - m.g / sum(m^2 + g^2))`
/// where `b_fg = T / #fg(g)` and `b_bg = T / #bg(g)`. Columns whose target is
/// empty are skipped. The result is the mean over contributing columns, or 0.
pub fn loss_mask<T: Real>(g: &mut Graph<T>, m: Var, masks: &Tensor<T>, supervised: &[bool]) -> Result<Var> {
    let (t_len, cols) = g.shape(m);
    shape_check("mask targets", masks.shape(), (t_len, cols))?;
    ensure(supervised.len() == cols, || {
        Error::Shape("one supervision flag per column".into())
    })?;
    let picked: Vec<usize> = (0..cols)
        .filter(|&t| supervised[t] && masks.column(t).iter().any(|&x| x > T::zero()))
        .collect();
    if picked.is_empty() {
        return Ok(g.constant(Tensor::zeros(1, 1)));
    }
    let n = picked.len();
    let idx: Vec<Option<usize>> = picked.iter().map(|&t| Some(t)).collect();
    let ms = g.gather_cols(m, &idx);
    let gs = masks.gather_cols(&idx);

    let tf = t_len as f64;
    let mut w_fg = Tensor::zeros(t_len, n);
    let mut w_bg = Tensor::zeros(t_len, n);
    for j in 0..n {
        let col = gs.column(j);
        let n_fg = col.iter().filter(|&&x| x > T::zero()).count() as f64;
        let n_bg = tf - n_fg;
        for (r, &gv) in col.iter().enumerate() {
            let gv = gv.as_f64();
            if n_fg > 0.0 {
                w_fg.set(r, j, lit(gv * (tf / n_fg) / tf));
            }
            if n_bg > 0.0 {
                w_bg.set(r, j, lit((1.0 - gv) * (tf / n_bg) / tf));
            }
        }
    }
    let log_m = g.log_eps(ms, EPS);
    let one_minus = g.one_minus(ms);
    let log_1m = g.log_eps(one_minus, EPS);
    let wf = g.constant(w_fg);
    let wb = g.constant(w_bg);
    let a = g.mul(wf, log_m);
    let b = g.mul(wb, log_1m);
    let ab = g.add(a, b);
    let bce = g.sum(ab);
    let bce = g.scale(bce, -1.0);

    let gv = g.constant(gs.clone());
    let mg = g.mul(ms, gv);
    let num = g.sum_rows(mg);
    let mm = g.mul(ms, ms);
    let m2 = g.sum_rows(mm);
    let g2: Vec<T> = (0..n).map(|j| gs.column(j).iter().map(|&x| x * x).sum()).collect();
    let g2 = g.constant(Tensor::row(g2));
    let den = g.add(m2, g2);
    let ratio = g.div(num, den);
    let dice = g.one_minus(ratio);
    let dice = g.sum(dice);
    let dice = g.scale(dice, LAMBDA_DICE);

    let total = g.add(bce, dice);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Binary cross-entropy of the foreground score against the foreground mask.
pub fn loss_completeness<T: Real>(g: &mut Graph<T>, l_hat: Var, fg: &[bool]) -> Result<Var> {
    let (r, t_len) = g.shape(l_hat);
    shape_check("foreground scores", (r, t_len), (1, fg.len()))?;
    let target = Tensor::row(fg.iter().map(|&f| if f { T::one() } else { T::zero() }).collect());
    let inv = target.map(|x| T::one() - x);
    let log_l = g.log_eps(l_hat, EPS);
    let om = g.one_minus(l_hat);
    let log_1l = g.log_eps(om, EPS);
    let tv = g.constant(target);
    let iv = g.constant(inv);
    let a = g.mul(tv, log_l);
    let b = g.mul(iv, log_1l);
    let s = g.add(a, b);
    let s = g.sum(s);
    Ok(g.scale(s, -1.0 / t_len as f64))
}

/// Settings of the consistency objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencySettings {
    pub top_k: usize,
    pub theta_c: f64,
    pub theta_m: f64,
}

/// Per-snippet confidence of each branch: the thresholded best foreground
/// class probability and the mean thresholded mask value.
pub fn branch_scores<T: Real>(p: &Tensor<T>, m: &Tensor<T>, theta_c: f64, theta_m: f64) -> (Vec<f64>, Vec<f64>) {
    let (k1, t_len) = p.shape();
    let s_c = (0..t_len)
        .map(|t| {
            (0..k1 - 1)
                .map(|k| p.get(k, t).as_f64())
                .map(|x| if x >= theta_c { x } else { 0.0 })
                .fold(0.0, f64::max)
        })
        .collect();
    let rows = m.rows();
    let s_m = (0..m.cols())
        .map(|t| {
            (0..rows)
                .map(|r| m.get(r, t).as_f64())
                .map(|x| if x >= theta_m { x } else { 0.0 })
                .sum::<f64>()
                / rows as f64
        })
        .collect();
    (s_c, s_m)
}

/// Indices of the `k` highest positive scores, best first, ties by index.
pub fn top_k_positive(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&t| scores[t] > 0.0).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn mean_of_columns<T: Real>(g: &mut Graph<T>, x: Var, idx: &[usize]) -> Var {
    let sel: Vec<Option<usize>> = idx.iter().map(|&t| Some(t)).collect();
    let cols = g.gather_cols(x, &sel);
    let s = g.sum_cols(cols);
    g.scale(s, 1.0 / idx.len() as f64)
}

/// `1 - cos` between the mean branch features at each branch's top-k snippets.
/// Returns `None` when either branch has no surviving snippet.
pub fn loss_consistency<T: Real>(
    g: &mut Graph<T>,
    p: &Tensor<T>,
    m: &Tensor<T>,
    e_p: Var,
    e_m: Var,
    s: ConsistencySettings,
) -> Result<Option<Var>> {
    let t_len = p.cols();
    ensure(
        g.shape(e_p).1 == t_len && g.shape(e_m).1 == t_len && m.cols() == t_len,
        || Error::Shape("consistency inputs disagree on the snippet count".into()),
    )?;
    let (s_c, s_m) = branch_scores(p, m, s.theta_c, s.theta_m);
    let top_c = top_k_positive(&s_c, s.top_k);
    let top_m = top_k_positive(&s_m, s.top_k);
    if top_c.is_empty() || top_m.is_empty() {
        return Ok(None);
    }
    let f_clf = mean_of_columns(g, e_p, &top_c);
    let f_mask = mean_of_columns(g, e_m, &top_m);
    let a = g.normalize_cols(f_clf);
    let b = g.normalize_cols(f_mask);
    let prod = g.mul(a, b);
    let cos = g.sum(prod);
    Ok(Some(g.one_minus(cos)))
}

/// Dense targets in the model's precision.
#[derive(Debug, Clone)]
pub struct Targets<T> {
    pub y: Tensor<T>,
    pub masks: Tensor<T>,
    pub foreground: Vec<bool>,
}

impl<T: Real> Targets<T> {
    pub fn from_dense(d: &DenseLabels) -> Self {
        Self {
            y: d.y.cast(),
            masks: d.masks.cast(),
            foreground: d.foreground.clone(),
        }
    }
}

/// Sum of the enabled objectives for one video.
///
/// Snippets removed by the foreground gate have a uniform class distribution
/// that no parameter can change, so their constant cross-entropy is left out
/// of the class term.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Stale<T>,
    p: &Bound,
    vars: &ForwardVars,
    e: Var,
    targets: &Targets<T>,
    toggles: LossToggles,
) -> Result<(Var, LossBreakdown)> {
    let masking = model.cfg.representation_masking;
    let mut parts: Vec<Var> = Vec::with_capacity(4);
    let mut out = LossBreakdown::default();
    if toggles.class {
        let weights: Vec<f64> = if masking {
            g.value(vars.l_bin).to_f64_vec()
        } else {
            vec![1.0; targets.foreground.len()]
        };
        let l = loss_class_weighted(g, vars.p, &targets.y, &weights)?;
        out.class = g.value(l).item().as_f64();
        parts.push(l);
    }
    if toggles.mask {
        let l = loss_mask(g, vars.m, &targets.masks, &targets.foreground)?;
        out.mask = g.value(l).item().as_f64();
        parts.push(l);
    }
    if toggles.completeness && masking {
        let l = loss_completeness(g, vars.l_hat, &targets.foreground)?;
        out.completeness = g.value(l).item().as_f64();
        parts.push(l);
    }
    if toggles.consistency {
        let e_p = model.consistency.class_branch.forward(g, p, e);
        let e_m = model.consistency.mask_branch.forward(g, p, e);
        let settings = ConsistencySettings {
            top_k: model.cfg.consistency_topk,
            theta_c: model.cfg.theta_c,
            theta_m: model.cfg.theta_m,
        };
        let (pv, mv) = (g.value(vars.p).clone(), g.value(vars.m).clone());
        match loss_consistency(g, &pv, &mv, e_p, e_m, settings)? {
            Some(l) => {
                out.consistency = g.value(l).item().as_f64();
                parts.push(l);
            }
            None => log::debug!("consistency: no surviving snippet in one branch"),
        }
    }
    let total = match parts.split_first() {
        None => g.constant(Tensor::zeros(1, 1)),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &v| g.add(acc, v)),
    };
    out.total = g.value(total).item().as_f64();
    Ok((total, out))
}
