//! Turning model outputs into scored segments: snippet selection, mask
//! thresholding and classwise SoftNMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::tiou;
use crate::model::ModelOutput;

/// One scored segment in normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    /// Index into the evaluation vocabulary, background excluded.
    pub class_index: usize,
    pub confidence: f64,
    /// Snippet whose mask produced the segment.
    pub source_snippet: usize,
}

impl Detection {
    pub fn segment(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NmsMode {
    /// `s <- s * exp(-iou^2 / sigma)`.
    Gaussian { sigma: f64 },
    /// `s <- s * (1 - iou)` once `iou > threshold`.
    Linear { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub theta_c: f64,
    /// Mask binarization thresholds, each in `(0, 1)`.
    pub thresholds: Vec<f64>,
    pub top_n_snippets: usize,
    pub nms: NmsMode,
    pub score_floor: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            theta_c: 0.5,
            thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            top_n_snippets: 100,
            nms: NmsMode::Gaussian { sigma: 0.5 },
            score_floor: 1e-4,
            max_detections: 100,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.theta_c > 0.0 && self.theta_c < 1.0) {
            return bad(format!("theta_c = {} must lie in (0, 1)", self.theta_c));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return bad("mask thresholds must be a nonempty subset of (0, 1)".into());
        }
        match self.nms {
            NmsMode::Gaussian { sigma } if !(sigma > 0.0) => bad(format!("SoftNMS sigma {sigma} must be positive")),
            NmsMode::Linear { threshold } if !(0.0..1.0).contains(&threshold) => {
                bad(format!("SoftNMS threshold {threshold} must lie in [0, 1)"))
            }
            _ if !(self.score_floor >= 0.0) => bad("score_floor must be non-negative".into()),
            _ => Ok(()),
        }
    }
}

/// Maximal runs `[s, e]` (inclusive) of `true`.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &b) in mask.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len() - 1));
    }
    out
}

/// The run containing `t`, else the closest one (earlier on ties).
pub fn anchored_run(runs: &[(usize, usize)], t: usize) -> Option<(usize, usize)> {
    let dist = |&(s, e): &(usize, usize)| {
        if t < s {
            s - t
        } else {
            t.saturating_sub(e)
        }
    };
    runs.iter().copied().min_by_key(dist)
}

/// Foreground snippets worth decoding: best foreground probability above
/// `theta_c`, highest first, at most `top_n_snippets`.
pub fn select_snippets(out: &ModelOutput, cfg: &InferenceConfig) -> Vec<(usize, usize, f64)> {
    let k = out.num_classes();
    let mut picked: Vec<(usize, usize, f64)> = (0..out.num_snippets())
        .filter_map(|t| {
            let (cls, prob) = (0..k)
                .map(|c| (c, out.p.get(c, t)))
                .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
            (prob > cfg.theta_c).then_some((t, cls, prob))
        })
        .collect();
    picked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    picked.truncate(cfg.top_n_snippets);
    picked
}

/// Candidate segments before suppression, one per selected snippet and threshold.
pub fn generate_candidates(out: &ModelOutput, cfg: &InferenceConfig) -> Vec<Detection> {
    let t_len = out.num_snippets();
    let mut dets = Vec::new();
    for (t, cls, prob) in select_snippets(out, cfg) {
        let column = out.m.column(t);
        for &theta in &cfg.thresholds {
            let bin: Vec<bool> = column.iter().map(|&x| x >= theta).collect();
            let Some((s, e)) = anchored_run(&runs(&bin), t) else {
                continue;
            };
            let peak = column[s..=e].iter().copied().fold(0.0, f64::max);
            dets.push(Detection {
                start: s as f64 / t_len as f64,
                end: (e + 1) as f64 / t_len as f64,
                class_index: cls,
                confidence: prob * peak,
                source_snippet: t,
            });
        }
    }
    dets
}

fn decay(mode: NmsMode, iou: f64) -> f64 {
    match mode {
        NmsMode::Gaussian { sigma } => (-(iou * iou) / sigma).exp(),
        NmsMode::Linear { threshold } => {
            if iou > threshold {
                1.0 - iou
            } else {
                1.0
            }
        }
    }
}

/// Orders detections by confidence, then class, then position.
pub fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_index.cmp(&b.class_index))
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
}

/// Classwise SoftNMS. Within each class the most confident remaining
/// detection (first in input order on ties) is kept and decays the others;
/// anything below the score floor is dropped.
pub fn soft_nms(dets: &[Detection], mode: NmsMode, score_floor: f64, max_detections: usize) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_index).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::with_capacity(dets.len());
    for cls in classes {
        let mut pool: Vec<Detection> = dets
            .iter()
            .filter(|d| d.class_index == cls && d.confidence >= score_floor)
            .copied()
            .collect();
        while !pool.is_empty() {
            let best = (1..pool.len()).fold(0, |b, i| if pool[i].confidence > pool[b].confidence { i } else { b });
            let top = pool.remove(best);
            for d in pool.iter_mut() {
                d.confidence *= decay(mode, tiou(top.segment(), d.segment()));
            }
            pool.retain(|d| d.confidence >= score_floor);
            kept.push(top);
        }
    }
    kept.sort_by(rank_order);
    kept.truncate(max_detections);
    kept
}

/// Full post-processing of one video.
pub fn detect(out: &ModelOutput, cfg: &InferenceConfig) -> Vec<Detection> {
    soft_nms(
        &generate_candidates(out, cfg),
        cfg.nms,
        cfg.score_floor,
        cfg.max_detections,
    )
}
