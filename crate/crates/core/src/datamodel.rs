//! Domain types, label-space splits and dense training targets.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// One annotated action segment, in normalized time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

impl ActionInstance {
    pub fn new(start: f64, end: f64, label: impl Into<String>) -> Result<Self> {
        let inst = Self {
            start,
            end,
            label: label.into(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.start.is_finite()
                && self.end.is_finite()
                && 0.0 <= self.start
                && self.start < self.end
                && self.end <= 1.0,
            || {
                Error::InvalidInput(format!(
                    "instance [{}, {}] of `{}` is not a valid normalized segment",
                    self.start, self.end, self.label
                ))
            },
        )
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    Training,
    Validation,
    Testing,
}

/// Snippet features plus ground truth for one video.
///
/// `features` is `C_in x T_raw`: either one stream of `d` rows or the RGB and
/// flow streams stacked as `2d` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedVideo {
    pub id: String,
    pub features: Tensor<f64>,
    pub instances: Vec<ActionInstance>,
    pub subset: Subset,
}

impl AnnotatedVideo {
    pub fn validate(&self) -> Result<()> {
        ensure(self.features.cols() >= 1 && self.features.rows() >= 1, || {
            Error::InvalidInput(format!("video {} has an empty feature matrix", self.id))
        })?;
        ensure(self.features.all_finite(), || {
            Error::InvalidInput(format!("video {} has non-finite features", self.id))
        })?;
        self.instances.iter().try_for_each(ActionInstance::validate)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|i| i.label.as_str())
    }
}

/// Ordered foreground vocabulary; the background class sits at index `K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<String>,
}

impl LabelSpace {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        ensure(!classes.is_empty(), || {
            Error::InvalidInput("label space needs at least one class".into())
        })?;
        let mut seen = HashSet::new();
        for c in &classes {
            ensure(seen.insert(c.as_str()), || {
                Error::InvalidInput(format!("duplicate class `{c}` in label space"))
            })?;
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Number of foreground classes `K`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn background_index(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

/// Seen/unseen class partition for one zero-shot trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub trial: usize,
    pub seed: u64,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl SplitSpec {
    /// Degenerate split used for closed-set runs: both sides are the full vocabulary.
    pub fn closed_set(space: &LabelSpace) -> Self {
        Self {
            trial: 0,
            seed: 0,
            seen: space.classes().to_vec(),
            unseen: space.classes().to_vec(),
        }
    }

    /// Checks the partition property against `space`.
    pub fn validate_partition(&self, space: &LabelSpace) -> Result<()> {
        let seen: HashSet<&str> = self.seen.iter().map(String::as_str).collect();
        let unseen: HashSet<&str> = self.unseen.iter().map(String::as_str).collect();
        ensure(seen.is_disjoint(&unseen), || {
            Error::InvalidInput(format!("split {}: seen and unseen classes overlap", self.trial))
        })?;
        let all: HashSet<&str> = space.classes().iter().map(String::as_str).collect();
        let union: HashSet<&str> = seen.union(&unseen).copied().collect();
        ensure(union == all, || {
            Error::InvalidInput(format!(
                "split {}: seen ∪ unseen does not cover the label space",
                self.trial
            ))
        })
    }
}

/// Dense per-snippet targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLabels {
    /// One-hot classes, `(K+1) x T`; row `K` is background.
    pub y: Tensor<f64>,
    /// Instance masks, `T x T`; column `t` is the support of the instance covering snippet `t`.
    pub masks: Tensor<f64>,
    /// Union of all instance supports.
    pub foreground: Vec<bool>,
    /// Instance index (into the video's list) that owns each snippet.
    pub owner: Vec<Option<usize>>,
}

impl DenseLabels {
    pub fn num_snippets(&self) -> usize {
        self.foreground.len()
    }

    pub fn num_classes(&self) -> usize {
        self.y.rows() - 1
    }
}

/// Center of snippet `t` out of `n`, in normalized time.
#[inline]
pub fn snippet_center(t: usize, n: usize) -> f64 {
    (t as f64 + 0.5) / n as f64
}

/// Converts interval annotations into dense targets on a `t_len`-snippet grid.
///
/// Snippet `t` belongs to an instance when its center lies in `[start, end)`.
/// Where instances overlap the shorter one wins, then the earlier start.
pub fn assign_labels(video: &AnnotatedVideo, t_len: usize, space: &LabelSpace) -> Result<DenseLabels> {
    ensure(t_len >= 1, || {
        Error::InvalidInput("snippet count must be at least 1".into())
    })?;
    let class_idx = video
        .instances
        .iter()
        .map(|inst| {
            inst.validate()?;
            space
                .index_of(&inst.label)
                .ok_or_else(|| Error::UnknownLabel(inst.label.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let k = space.len();
    let covers = |inst: &ActionInstance, t: usize| {
        let c = snippet_center(t, t_len);
        inst.start <= c && c < inst.end
    };

    let mut owner = vec![None; t_len];
    for (t, slot) in owner.iter_mut().enumerate() {
        *slot = video
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| covers(inst, t))
            .min_by(|(ia, a), (ib, b)| {
                a.duration()
                    .total_cmp(&b.duration())
                    .then(a.start.total_cmp(&b.start))
                    .then(ia.cmp(ib))
            })
            .map(|(j, _)| j);
    }

    let supports: Vec<Vec<bool>> = video
        .instances
        .iter()
        .map(|inst| (0..t_len).map(|t| covers(inst, t)).collect())
        .collect();

    let mut y = Tensor::zeros(k + 1, t_len);
    let mut masks = Tensor::zeros(t_len, t_len);
    for t in 0..t_len {
        match owner[t] {
            Some(j) => {
                y.set(class_idx[j], t, 1.0);
                for (r, &on) in supports[j].iter().enumerate() {
                    if on {
                        masks.set(r, t, 1.0);
                    }
                }
            }
            None => y.set(k, t, 1.0),
        }
    }
    let foreground = (0..t_len).map(|t| supports.iter().any(|s| s[t])).collect();
    Ok(DenseLabels {
        y,
        masks,
        foreground,
        owner,
    })
}

/// SplitMix64 step; used to derive independent per-trial seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rebuilds the split of one trial from its recorded seed.
pub fn split_from_seed(space: &LabelSpace, n_seen: usize, trial: usize, trial_seed: u64) -> SplitSpec {
    let mut order: Vec<usize> = (0..space.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    order.shuffle(&mut rng);
    let mut seen_idx: Vec<usize> = order[..n_seen].to_vec();
    let mut unseen_idx: Vec<usize> = order[n_seen..].to_vec();
    seen_idx.sort_unstable();
    unseen_idx.sort_unstable();
    let names = |idx: &[usize]| idx.iter().map(|&i| space.classes()[i].clone()).collect();
    SplitSpec {
        trial,
        seed: trial_seed,
        seen: names(&seen_idx),
        unseen: names(&unseen_idx),
    }
}

/// Number of seen classes for a fraction, rejecting degenerate partitions.
pub fn seen_count(k: usize, seen_fraction: f64) -> Result<usize> {
    ensure(seen_fraction > 0.0 && seen_fraction < 1.0, || {
        Error::Config(format!("seen fraction {seen_fraction} must lie in (0, 1)"))
    })?;
    let n_seen = (seen_fraction * k as f64).round() as usize;
    ensure(n_seen > 0 && n_seen < k, || {
        Error::Config(format!(
            "seen fraction {seen_fraction} of {k} classes gives a degenerate split ({n_seen} seen)"
        ))
    })?;
    Ok(n_seen)
}

/// `n_trials` seeded random seen/unseen partitions of `space`.
pub fn make_splits(space: &LabelSpace, seen_fraction: f64, n_trials: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    ensure(n_trials >= 1, || Error::Config("at least one trial is required".into()))?;
    let n_seen = seen_count(space.len(), seen_fraction)?;
    Ok((0..n_trials)
        .map(|trial| {
            let trial_seed = splitmix64(seed ^ splitmix64(trial as u64));
            split_from_seed(space, n_seen, trial, trial_seed)
        })
        .collect())
}

/// Channelwise linear interpolation onto `t_len` endpoint-aligned grid points.
pub fn rescale_features(features: &Tensor<f64>, t_len: usize) -> Result<Tensor<f64>> {
    let (c_in, t_raw) = features.shape();
    ensure(t_raw >= 1 && t_len >= 1, || {
        Error::InvalidInput(format!("cannot rescale {t_raw} snippets to {t_len}"))
    })?;
    ensure(features.all_finite(), || {
        Error::InvalidInput("non-finite features".into())
    })?;
    if t_raw == t_len {
        return Ok(features.clone());
    }
    let position = |j: usize| -> f64 {
        if t_len == 1 {
            (t_raw - 1) as f64 / 2.0
        } else {
            (j * (t_raw - 1)) as f64 / (t_len - 1) as f64
        }
    };
    Ok(Tensor::from_fn(c_in, t_len, |c, j| {
        let x = position(j);
        let i0 = (x.floor() as usize).min(t_raw - 1);
        let i1 = (i0 + 1).min(t_raw - 1);
        let frac = x - i0 as f64;
        let v0 = features.get(c, i0);
        if frac == 0.0 {
            v0
        } else {
            v0 + frac * (features.get(c, i1) - v0)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(k: usize) -> LabelSpace {
        LabelSpace::new((0..k).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn video(instances: Vec<ActionInstance>) -> AnnotatedVideo {
        AnnotatedVideo {
            id: "v".into(),
            features: Tensor::zeros(2, 4),
            instances,
            subset: Subset::Training,
        }
    }

    #[test]
    fn empty_video_is_all_background() {
        let d = assign_labels(&video(vec![]), 4, &space(2)).unwrap();
        for t in 0..4 {
            assert_eq!(d.y.column(t), vec![0.0, 0.0, 1.0]);
        }
        assert_eq!(d.masks, Tensor::zeros(4, 4));
        assert_eq!(d.foreground, vec![false; 4]);
    }

    #[test]
    fn center_rule_on_quarter_instance() {
        let v = video(vec![ActionInstance::new(0.25, 0.75, "c0").unwrap()]);
        let d = assign_labels(&v, 4, &space(2)).unwrap();
        assert_eq!(d.y.column(0), vec![0.0, 0.0, 1.0]);
        assert_eq!(d.y.column(1), vec![1.0, 0.0, 0.0]);
        assert_eq!(d.y.column(2), vec![1.0, 0.0, 0.0]);
        assert_eq!(d.y.column(3), vec![0.0, 0.0, 1.0]);
        assert_eq!(d.masks.column(1), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.masks.column(2), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.masks.column(0), vec![0.0; 4]);
        assert_eq!(d.foreground, vec![false, true, true, false]);
    }

    #[test]
    fn full_coverage() {
        let v = video(vec![ActionInstance::new(0.0, 1.0, "c1").unwrap()]);
        let d = assign_labels(&v, 8, &space(3)).unwrap();
        assert!(d.foreground.iter().all(|&f| f));
        assert_eq!(d.masks, Tensor::ones(8, 8));
        assert!((0..8).all(|t| d.y.get(1, t) == 1.0));
    }

    #[test]
    fn overlap_prefers_shorter_instance() {
        let v = video(vec![
            ActionInstance::new(0.0, 1.0, "c0").unwrap(),
            ActionInstance::new(0.5, 0.75, "c1").unwrap(),
        ]);
        let d = assign_labels(&v, 4, &space(2)).unwrap();
        assert_eq!(d.owner, vec![Some(0), Some(0), Some(1), Some(0)]);
        assert_eq!(d.masks.column(2), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.masks.column(0), vec![1.0; 4]);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let v = video(vec![ActionInstance::new(0.0, 0.5, "zzz").unwrap()]);
        assert!(matches!(assign_labels(&v, 4, &space(2)), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn invalid_instances_rejected() {
        assert!(ActionInstance::new(0.5, 0.5, "a").is_err());
        assert!(ActionInstance::new(-0.1, 0.5, "a").is_err());
        assert!(ActionInstance::new(0.1, 1.5, "a").is_err());
        assert!(LabelSpace::new(vec![]).is_err());
        assert!(LabelSpace::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn splits_of_twenty_classes() {
        let s = space(20);
        let splits = make_splits(&s, 0.75, 10, 7).unwrap();
        assert_eq!(splits.len(), 10);
        for sp in &splits {
            assert_eq!(sp.seen.len(), 15);
            assert_eq!(sp.unseen.len(), 5);
            sp.validate_partition(&s).unwrap();
        }
        assert_eq!(splits, make_splits(&s, 0.75, 10, 7).unwrap());
        let distinct: HashSet<_> = splits.iter().map(|sp| sp.unseen.clone()).collect();
        assert!(distinct.len() > 1);
        // every trial is rebuildable from its recorded seed
        for sp in &splits {
            assert_eq!(&split_from_seed(&s, 15, sp.trial, sp.seed), sp);
        }
    }

    #[test]
    fn degenerate_splits_rejected() {
        assert!(make_splits(&space(3), 0.1, 1, 0).is_err());
        assert!(make_splits(&space(3), 0.95, 1, 0).is_err());
        assert!(make_splits(&space(3), 0.5, 0, 0).is_err());
        assert!(make_splits(&space(4), 1.0, 1, 0).is_err());
    }

    #[test]
    fn rescale_examples() {
        let x = Tensor::from_f64(1, 2, &[0.0, 1.0]);
        let y = rescale_features(&x, 4).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = Tensor::from_f64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(rescale_features(&z, 3).unwrap(), z);
        let bad = Tensor::from_f64(1, 2, &[0.0, f64::NAN]);
        assert!(rescale_features(&bad, 3).is_err());
    }

    proptest! {
        #[test]
        fn dense_label_invariants(
            segs in prop::collection::vec((0.0f64..0.9, 0.02f64..0.6, 0usize..3), 0..5),
            t_len in 1usize..40,
        ) {
            let instances: Vec<_> = segs
                .iter()
                .map(|&(s, l, c)| ActionInstance::new(s, (s + l).min(1.0), format!("c{c}")).unwrap())
                .collect();
            let v = video(instances.clone());
            let sp = space(3);
            let d = assign_labels(&v, t_len, &sp).unwrap();
            for t in 0..t_len {
                let col = d.y.column(t);
                prop_assert_eq!(col.iter().sum::<f64>(), 1.0);
                prop_assert_eq!(d.foreground[t], col[3] == 0.0);
                let g = d.masks.column(t);
                prop_assert_eq!(g.iter().all(|&x| x == 0.0), col[3] == 1.0);
                if let Some(j) = d.owner[t] {
                    // column equals the owning instance's support
                    for (r, &gv) in g.iter().enumerate() {
                        let c = snippet_center(r, t_len);
                        let on = instances[j].start <= c && c < instances[j].end;
                        prop_assert_eq!(gv == 1.0, on);
                    }
                    // snippets of one instance share their mask bitwise
                    for u in 0..t_len {
                        if d.owner[u] == Some(j) {
                            prop_assert_eq!(d.masks.column(u), g.clone());
                        }
                    }
                }
            }
        }

        #[test]
        fn rescale_preserves_constants_and_length(v in -5.0f64..5.0, t_raw in 1usize..30, t_len in 1usize..30) {
            let x = Tensor::full(3, t_raw, v);
            let y = rescale_features(&x, t_len).unwrap();
            prop_assert_eq!(y.shape(), (3, t_len));
            for &e in y.data() {
                prop_assert!((e - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }
}
