//! Detection metrics: temporal IoU, interpolated average precision, mAP
//! tables and aggregation over class-split trials.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::SplitSpec;
use crate::error::{Error, Result};

/// Intersection over union of two intervals; 0 when either is empty.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    if !(a.1 > a.0) || !(b.1 > b.0) {
        return 0.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// A scored segment of one class in one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub video: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// A ground-truth segment of one class in one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtSegment {
    pub video: String,
    pub start: f64,
    pub end: f64,
}

/// Index of the detection order: descending score, input order on ties.
pub fn confidence_order(dets: &[ScoredSegment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy one-to-one matching in confidence order. Returns the TP flag of each
/// detection in `order`.
pub fn match_detections(dets: &[ScoredSegment], order: &[usize], gts: &[GtSegment], tau: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.video != d.video {
                    continue;
                }
                let iou = tiou((d.start, d.end), (g.start, g.end));
                let better = match best {
                    None => true,
                    Some((b, biou)) => iou > biou || (iou == biou && g.start < gts[b].start),
                };
                if better {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= tau => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision of one class at threshold `tau`.
/// Zero when there are no ground truths.
pub fn average_precision(dets: &[ScoredSegment], gts: &[GtSegment], tau: f64) -> f64 {
    if gts.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let order = confidence_order(dets);
    let tp = match_detections(dets, &order, gts, tau);
    let n_gt = gts.len() as f64;
    let mut rec = Vec::with_capacity(tp.len() + 2);
    let mut prec = Vec::with_capacity(tp.len() + 2);
    rec.push(0.0);
    prec.push(0.0);
    let mut hits = 0usize;
    for (i, &hit) in tp.iter().enumerate() {
        hits += hit as usize;
        rec.push(hits as f64 / n_gt);
        prec.push(hits as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

/// Threshold grid conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Columns 0.5, 0.75, 0.95; average over 0.5:0.05:0.95.
    ActivityNet,
    /// Columns and average over 0.3:0.1:0.7.
    Thumos,
}

/// Which classes the classifier sees at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vocabulary {
    /// Only the evaluated (unseen) classes plus background.
    #[default]
    Unseen,
    /// Every class in the corpus plus background.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Reported columns.
    pub thresholds: Vec<f64>,
    /// Thresholds whose mAPs are averaged into "Avg".
    pub average_grid: Vec<f64>,
    pub vocabulary: Vocabulary,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::convention(Convention::ActivityNet)
    }
}

impl EvalConfig {
    pub fn convention(c: Convention) -> Self {
        match c {
            Convention::ActivityNet => Self {
                thresholds: vec![0.5, 0.75, 0.95],
                average_grid: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
                vocabulary: Vocabulary::Unseen,
            },
            Convention::Thumos => {
                let grid: Vec<f64> = (3..=7).map(|i| i as f64 / 10.0).collect();
                Self {
                    thresholds: grid.clone(),
                    average_grid: grid,
                    vocabulary: Vocabulary::Unseen,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in [("thresholds", &self.thresholds), ("average_grid", &self.average_grid)] {
            if list.is_empty() {
                return Err(Error::Config(format!("{name} must be nonempty")));
            }
            if list.iter().any(|&t| !(t > 0.0 && t <= 1.0)) || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "{name} must be strictly increasing within (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Union of both grids, sorted, bitwise-deduplicated.
    fn all_thresholds(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.thresholds.iter().chain(&self.average_grid).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }
}

/// A detection with its class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    pub video: String,
    pub label: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// A ground-truth instance with its class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub video: String,
    pub label: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub ground_truths: usize,
    /// AP at each reported threshold.
    pub ap: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average_grid: Vec<f64>,
    pub average_map: f64,
    pub per_class: Vec<ClassAp>,
}

impl EvalReport {
    /// Reported columns plus the average, as `(header, value)` pairs.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut cols: Vec<(String, f64)> = self.thresholds.iter().map(|t| (fmt_threshold(*t), 0.0)).collect();
        for (c, &m) in cols.iter_mut().zip(&self.map) {
            c.1 = m;
        }
        cols.push(("Avg".into(), self.average_map));
        cols
    }

    /// Single-row CSV with the table layout.
    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut s = String::from("setting");
        cols.iter().for_each(|(h, _)| write!(s, ",{h}").unwrap());
        write!(s, "\n{}", self.setting).unwrap();
        cols.iter().for_each(|(_, v)| write!(s, ",{v:.6}").unwrap());
        s.push('\n');
        s
    }
}

pub fn fmt_threshold(t: f64) -> String {
    let s = format!("{t:.2}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// mAP over `classes`. Classes without ground truth are left out of the mean.
pub fn map_report(
    setting: &str,
    dets: &[LabeledDetection],
    gts: &[LabeledSegment],
    classes: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if classes.is_empty() {
        return Err(Error::Config("evaluation class subset is empty".into()));
    }
    let grid = cfg.all_thresholds();
    let pos = |t: f64| grid.iter().position(|&g| g == t).expect("threshold in union grid");
    let mut per_class = Vec::new();
    let mut grid_sums = vec![0.0; grid.len()];
    for class in classes {
        let cd: Vec<ScoredSegment> = dets
            .iter()
            .filter(|d| &d.label == class)
            .map(|d| ScoredSegment {
                video: d.video.clone(),
                start: d.start,
                end: d.end,
                score: d.score,
            })
            .collect();
        let cg: Vec<GtSegment> = gts
            .iter()
            .filter(|g| &g.label == class)
            .map(|g| GtSegment {
                video: g.video.clone(),
                start: g.start,
                end: g.end,
            })
            .collect();
        if cg.is_empty() {
            continue;
        }
        let aps: Vec<f64> = grid.iter().map(|&t| average_precision(&cd, &cg, t)).collect();
        grid_sums.iter_mut().zip(&aps).for_each(|(s, a)| *s += a);
        per_class.push(ClassAp {
            class: class.clone(),
            ground_truths: cg.len(),
            ap: cfg.thresholds.iter().map(|&t| aps[pos(t)]).collect(),
            average: mean(&cfg.average_grid.iter().map(|&t| aps[pos(t)]).collect::<Vec<_>>()),
        });
    }
    let n = per_class.len().max(1) as f64;
    let grid_map: Vec<f64> = grid_sums.iter().map(|s| s / n).collect();
    Ok(EvalReport {
        setting: setting.to_string(),
        thresholds: cfg.thresholds.clone(),
        map: cfg.thresholds.iter().map(|&t| grid_map[pos(t)]).collect(),
        average_grid: cfg.average_grid.clone(),
        average_map: mean(&cfg.average_grid.iter().map(|&t| grid_map[pos(t)]).collect::<Vec<_>>()),
        per_class,
    })
}

/// Mean and spread of one metric across trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            std: std_dev(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTrial {
    pub trial: usize,
    pub reason: String,
}

/// Per-threshold statistics over completed trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub setting: String,
    pub thresholds: Vec<f64>,
    pub map: Vec<Stat>,
    pub average_map: Stat,
    pub completed: Vec<usize>,
    pub failed: Vec<FailedTrial>,
    pub trials: Vec<EvalReport>,
}

impl AggregateReport {
    pub fn from_trials(setting: &str, trials: Vec<(usize, EvalReport)>, failed: Vec<FailedTrial>) -> Result<Self> {
        let Some((_, first)) = trials.first() else {
            return Err(Error::Numerical(format!("every trial of {setting} failed")));
        };
        let thresholds = first.thresholds.clone();
        if trials.iter().any(|(_, r)| r.thresholds != thresholds) {
            return Err(Error::Format("trial reports use different threshold grids".into()));
        }
        let map = (0..thresholds.len())
            .map(|i| Stat::of(&trials.iter().map(|(_, r)| r.map[i]).collect::<Vec<_>>()))
            .collect();
        let average_map = Stat::of(&trials.iter().map(|(_, r)| r.average_map).collect::<Vec<_>>());
        Ok(Self {
            setting: setting.to_string(),
            thresholds,
            map,
            average_map,
            completed: trials.iter().map(|(t, _)| *t).collect(),
            failed,
            trials: trials.into_iter().map(|(_, r)| r).collect(),
        })
    }

    fn header(&self) -> String {
        let mut s = String::from("setting,trials");
        for t in &self.thresholds {
            let h = fmt_threshold(*t);
            write!(s, ",{h},{h}_std").unwrap();
        }
        s.push_str(",Avg,Avg_std");
        s
    }

    fn row(&self) -> String {
        let mut s = format!("{},{}", self.setting, self.completed.len());
        for st in self.map.iter().chain(std::iter::once(&self.average_map)) {
            write!(s, ",{:.6},{:.6}", st.mean, st.std).unwrap();
        }
        s
    }
}

/// Table with one row per split setting: thresholds and Avg, mean and std.
pub fn table_csv(rows: &[AggregateReport]) -> Result<String> {
    let Some(first) = rows.first() else {
        return Ok(String::new());
    };
    let header = first.header();
    let mut s = header.clone();
    s.push('\n');
    for r in rows {
        if r.header() != header {
            return Err(Error::Format(format!(
                "setting {} uses a different threshold grid",
                r.setting
            )));
        }
        s.push_str(&r.row());
        s.push('\n');
    }
    Ok(s)
}

/// Runs `trial_fn` on every split and aggregates the reports. Trials failing
/// with a numerical error are recorded and excluded; other errors abort.
pub fn run_protocol(
    setting: &str,
    splits: &[SplitSpec],
    mut trial_fn: impl FnMut(&SplitSpec) -> Result<EvalReport>,
) -> Result<AggregateReport> {
    if splits.is_empty() {
        return Err(Error::Config("no splits to evaluate".into()));
    }
    let mut done = Vec::new();
    let mut failed = Vec::new();
    for split in splits {
        match trial_fn(split) {
            Ok(r) => done.push((split.trial, r)),
            Err(Error::Numerical(reason)) => {
                log::warn!("trial {} failed: {reason}", split.trial);
                failed.push(FailedTrial {
                    trial: split.trial,
                    reason,
                });
            }
            Err(e) => return Err(e),
        }
    }
    AggregateReport::from_trials(setting, done, failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sd(video: &str, start: f64, end: f64, score: f64) -> ScoredSegment {
        ScoredSegment {
            video: video.into(),
            start,
            end,
            score,
        }
    }

    fn gt(video: &str, start: f64, end: f64) -> GtSegment {
        GtSegment {
            video: video.into(),
            start,
            end,
        }
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou((0.0, 1.0), (0.0, 1.0)), 1.0);
        assert!((tiou((0.0, 2.0 / 3.0), (1.0 / 3.0, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tiou((0.0, 0.4), (0.5, 0.9)), 0.0);
        assert_eq!(tiou((0.3, 0.3), (0.0, 1.0)), 0.0);
    }

    #[test]
    fn ap_examples() {
        let g = [gt("a", 0.1, 0.4), gt("b", 0.2, 0.5)];
        let perfect = [sd("a", 0.1, 0.4, 0.9), sd("b", 0.2, 0.5, 0.8)];
        assert_eq!(average_precision(&perfect, &g, 0.5), 1.0);
        assert_eq!(average_precision(&[], &g, 0.5), 0.0);
        let one = [gt("a", 0.1, 0.4)];
        let fp_first = [sd("a", 0.6, 0.9, 0.9), sd("a", 0.1, 0.4, 0.5)];
        assert!((average_precision(&fp_first, &one, 0.5) - 0.5).abs() < 1e-12);
        // a detection in another video never matches
        assert_eq!(average_precision(&[sd("b", 0.1, 0.4, 1.0)], &one, 0.5), 0.0);
    }

    #[test]
    fn matching_prefers_best_overlap_then_earlier_start() {
        let g = [gt("a", 0.0, 0.5), gt("a", 0.1, 0.6)];
        let d = [sd("a", 0.1, 0.6, 1.0)];
        let tp = match_detections(&d, &[0], &g, 0.5);
        assert_eq!(tp, vec![true]);
        // equal overlap: the earlier ground truth is consumed, the later one remains
        let g = [gt("a", 0.5, 1.0), gt("a", 0.0, 0.5)];
        let d = [sd("a", 0.25, 0.75, 1.0), sd("a", 0.0, 0.5, 0.5)];
        assert_eq!(tiou((0.25, 0.75), (0.5, 1.0)), tiou((0.25, 0.75), (0.0, 0.5)));
        assert_eq!(match_detections(&d, &[0, 1], &g, 0.3), vec![true, false]);
    }

    fn labeled(label: &str, start: f64, end: f64, score: f64) -> LabeledDetection {
        LabeledDetection {
            video: "v".into(),
            label: label.into(),
            start,
            end,
            score,
        }
    }

    #[test]
    fn report_perfect_and_single_class() {
        let gts = vec![
            LabeledSegment {
                video: "v".into(),
                label: "x".into(),
                start: 0.1,
                end: 0.3,
            },
            LabeledSegment {
                video: "v".into(),
                label: "y".into(),
                start: 0.5,
                end: 0.8,
            },
        ];
        let dets = vec![labeled("x", 0.1, 0.3, 0.9), labeled("y", 0.5, 0.8, 0.7)];
        let classes = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        let r = map_report("closed-set", &dets, &gts, &classes, &EvalConfig::default()).unwrap();
        assert!(r.map.iter().all(|&m| m == 1.0) && r.average_map == 1.0);
        assert_eq!(r.per_class.len(), 2);

        let half = vec![labeled("x", 0.1, 0.3, 0.9), labeled("y", 0.0, 0.05, 0.7)];
        let r = map_report("s", &half, &gts, &classes[..1], &EvalConfig::default()).unwrap();
        assert_eq!(r.map, r.per_class[0].ap);
        let both = map_report("s", &half, &gts, &classes, &EvalConfig::convention(Convention::Thumos)).unwrap();
        assert_eq!(both.map.len(), 5);
        assert!(both.map.iter().all(|&m| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn aggregate_one_trial_has_zero_std() {
        let r = EvalReport {
            setting: "s".into(),
            thresholds: vec![0.5],
            map: vec![0.4],
            average_grid: vec![0.5],
            average_map: 0.4,
            per_class: vec![],
        };
        let agg = AggregateReport::from_trials("s", vec![(0, r)], vec![]).unwrap();
        assert_eq!(agg.average_map, Stat { mean: 0.4, std: 0.0 });
        let csv = table_csv(&[agg]).unwrap();
        assert_eq!(
            csv,
            "setting,trials,0.5,0.5_std,Avg,Avg_std\ns,1,0.400000,0.000000,0.400000,0.000000\n"
        );
    }

    #[test]
    fn protocol_skips_numerical_failures() {
        let splits: Vec<SplitSpec> = (0..3)
            .map(|trial| SplitSpec {
                trial,
                seed: trial as u64,
                seen: vec!["a".into()],
                unseen: vec!["b".into()],
            })
            .collect();
        let agg = run_protocol("s", &splits, |s| {
            if s.trial == 1 {
                return Err(Error::Numerical("nan".into()));
            }
            Ok(EvalReport {
                setting: "s".into(),
                thresholds: vec![0.5],
                map: vec![s.trial as f64 / 4.0],
                average_grid: vec![0.5],
                average_map: s.trial as f64 / 4.0,
                per_class: vec![],
            })
        })
        .unwrap();
        assert_eq!(agg.completed, vec![0, 2]);
        assert_eq!(agg.failed.len(), 1);
        assert!((agg.average_map.mean - 0.25).abs() < 1e-12);
    }
}
