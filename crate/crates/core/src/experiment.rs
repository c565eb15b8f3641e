//! Experiment configuration and the seen/unseen trial protocol, including
//! the shuffled-text control and the no-mask ablation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::datamodel::{make_splits, LabelSpace, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{run_protocol, AggregateReport, EvalConfig, EvalReport, LabeledDetection};
use crate::formats::{DetectionFile, ResultEntry};
use crate::inference::InferenceConfig;
use crate::synthdata::{Corpus, SynthConfig};
use crate::tensor::{Real, Tensor};
use crate::trainer::{evaluate_checkpoint, train, SetMode, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: SetMode,
    /// Fraction of classes seen in training, one table row each.
    pub seen_fractions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Also run the shuffled-text control and the no-mask ablation.
    pub controls: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: SetMode::Open,
            seen_fractions: vec![0.75, 0.5],
            trials: 10,
            seed: 0,
            controls: false,
        }
    }
}

/// Everything an experiment directory is built from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.eval.validate()?;
        if self.protocol.trials == 0 {
            return Err(Error::Config("protocol.trials must be at least 1".into()));
        }
        Ok(())
    }
}

/// Model or data change applied on top of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Class-name tokens permuted so that no class keeps its own.
    ShuffledText,
    /// Foreground gate disabled.
    NoMask,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::ShuffledText, Variant::NoMask];

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ShuffledText => "shuffled-text",
            Variant::NoMask => "no-mask",
        }
    }
}

/// Row label of a split, e.g. `open-set 75/25`.
pub fn setting_label(split: &SplitSpec, mode: SetMode) -> String {
    match mode {
        SetMode::Closed => mode.label().to_string(),
        SetMode::Open => {
            let total = (split.seen.len() + split.unseen.len()).max(1) as f64;
            let seen = (100.0 * split.seen.len() as f64 / total).round() as usize;
            format!("{} {}/{}", mode.label(), seen, 100 - seen)
        }
    }
}

pub fn variant_label(setting: &str, variant: Variant) -> String {
    match variant {
        Variant::Full => setting.to_string(),
        v => format!("{setting} {}", v.slug()),
    }
}

/// Table row order: open-set before closed-set, larger seen share first, then
/// the full model before its controls.
pub fn setting_order(a: &str, b: &str) -> std::cmp::Ordering {
    fn key(label: &str) -> (u8, std::cmp::Reverse<u32>, usize, &str) {
        let mut words = label.split(' ');
        let mode = match words.next() {
            Some("open-set") => 0,
            Some("closed-set") => 1,
            _ => 2,
        };
        let rest = label.split_once(' ').map_or("", |(_, r)| r);
        let (seen, suffix) = match rest.split_once(' ').unwrap_or((rest, "")) {
            (ratio, suffix) if ratio.contains('/') => (
                ratio.split('/').next().and_then(|s| s.parse().ok()).unwrap_or(0),
                suffix,
            ),
            _ => (0, rest),
        };
        let variant = Variant::ALL
            .iter()
            .position(|v| v.slug() == suffix || (suffix.is_empty() && *v == Variant::Full))
            .unwrap_or(Variant::ALL.len());
        (mode, std::cmp::Reverse(seen), variant, label)
    }
    key(a).cmp(&key(b))
}

/// Trial splits for every configured seen fraction; a single split in closed mode.
pub fn protocol_splits(corpus: &Corpus, p: &ProtocolConfig) -> Result<Vec<Vec<SplitSpec>>> {
    let space = LabelSpace::new(corpus.classes.clone())?;
    match p.mode {
        SetMode::Closed => Ok(vec![vec![SplitSpec::closed_set(&space)]]),
        SetMode::Open => p
            .seen_fractions
            .iter()
            .map(|&f| make_splits(&space, f, p.trials, p.seed))
            .collect(),
    }
}

/// Copy of `corpus` whose class tokens are a seeded derangement of the originals.
pub fn shuffle_class_tokens(corpus: &Corpus, seed: u64) -> Corpus {
    let k = corpus.classes.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut source = vec![0; k];
    for i in 0..k {
        source[order[i]] = order[(i + 1) % k];
    }
    let mut out = corpus.clone();
    out.class_tokens = Tensor::from_fn(k, corpus.token_dim(), |r, c| corpus.class_tokens.get(source[r], c));
    out
}

/// Corpus and training config of `variant` for one trial.
pub fn apply_variant(corpus: &Corpus, cfg: &TrainConfig, split: &SplitSpec, variant: Variant) -> (Corpus, TrainConfig) {
    let mut cfg = cfg.clone();
    match variant {
        Variant::Full => (corpus.clone(), cfg),
        Variant::ShuffledText => (shuffle_class_tokens(corpus, split.seed), cfg),
        Variant::NoMask => {
            cfg.model.representation_masking = false;
            (corpus.clone(), cfg)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult<T: Real> {
    pub split: SplitSpec,
    pub variant: Variant,
    pub train_config: TrainConfig,
    pub outcome: TrainOutcome<T>,
    pub report: EvalReport,
    pub detections: Vec<LabeledDetection>,
}

/// Trains and evaluates one trial.
pub fn run_trial<T: Real>(
    corpus: &Corpus,
    split: &SplitSpec,
    exp: &ExperimentConfig,
    variant: Variant,
) -> Result<TrialResult<T>> {
    let mode = exp.protocol.mode;
    let (data, cfg) = apply_variant(corpus, &exp.train, split, variant);
    let outcome = train::<T>(&data, split, mode, &cfg)?;
    let (mut report, detections) =
        evaluate_checkpoint(&outcome.model, cfg.t_len, &data, split, mode, &exp.eval, &exp.inference)?;
    report.setting = variant_label(&setting_label(split, mode), variant);
    Ok(TrialResult {
        split: split.clone(),
        variant,
        train_config: cfg,
        outcome,
        report,
        detections,
    })
}

/// Runs every split of one setting under `variant`; `on_trial` sees each
/// completed trial (for persisting artifacts).
pub fn run_setting<T: Real>(
    corpus: &Corpus,
    splits: &[SplitSpec],
    exp: &ExperimentConfig,
    variant: Variant,
    mut on_trial: impl FnMut(&TrialResult<T>) -> Result<()>,
) -> Result<AggregateReport> {
    let Some(first) = splits.first() else {
        return Err(Error::Config("no splits to evaluate".into()));
    };
    let label = variant_label(&setting_label(first, exp.protocol.mode), variant);
    run_protocol(&label, splits, |split| {
        let result = run_trial::<T>(corpus, split, exp, variant)?;
        log::info!(
            "{} trial {}: avg mAP {:.4}",
            label,
            split.trial,
            result.report.average_map
        );
        on_trial(&result)?;
        Ok(result.report)
    })
}

/// Detections as an ActivityNet-style results file, segments in seconds.
pub fn detection_file(corpus: &Corpus, dets: &[LabeledDetection]) -> DetectionFile {
    let duration: BTreeMap<&str, f64> = corpus
        .videos
        .iter()
        .map(|v| (v.id.as_str(), v.features.cols() as f64 * corpus.snippet_seconds))
        .collect();
    let mut results: BTreeMap<String, Vec<ResultEntry>> = BTreeMap::new();
    for d in dets {
        let len = duration.get(d.video.as_str()).copied().unwrap_or(1.0);
        results.entry(d.video.clone()).or_default().push(ResultEntry {
            segment: [d.start * len, d.end * len],
            label: d.label.clone(),
            score: d.score,
        });
    }
    DetectionFile {
        version: "VERSION 1.3".into(),
        results,
        external_data: serde_json::json!({ "used": false }),
    }
}
