//! Optimization loop, checkpoints and checkpoint evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::TrainConfig;
use crate::datamodel::{assign_labels, rescale_features, AnnotatedVideo, LabelSpace, SplitSpec, Subset};
use crate::error::{ensure, Error, Result};
use crate::eval::{map_report, EvalConfig, EvalReport, LabeledDetection, LabeledSegment, Vocabulary};
use crate::formats::{self, sha256_hex, TOOL_VERSION};
use crate::inference::{detect, InferenceConfig};
use crate::losses::{total_loss, LossBreakdown, Targets};
use crate::model::{ModelDims, Stale};
use crate::nn::ParamGroup;
use crate::synthdata::{class_embedding_table, Corpus};
use crate::tensor::{lit, DType, Real, Tensor};

/// Open-set (disjoint train/test vocabularies) or closed-set evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SetMode {
    #[default]
    Open,
    Closed,
}

impl SetMode {
    pub fn label(self) -> &'static str {
        match self {
            SetMode::Open => "open-set",
            SetMode::Closed => "closed-set",
        }
    }
}

fn labels_within(v: &AnnotatedVideo, classes: &[String]) -> bool {
    !v.instances.is_empty() && v.labels().all(|l| classes.iter().any(|c| c == l))
}

/// Videos used for training. Open-set: every video annotated only with seen
/// classes. Closed-set: the training subset.
pub fn training_videos<'a>(corpus: &'a Corpus, split: &SplitSpec, mode: SetMode) -> Vec<&'a AnnotatedVideo> {
    corpus
        .videos
        .iter()
        .filter(|v| labels_within(v, &split.seen))
        .filter(|v| mode == SetMode::Open || v.subset == Subset::Training)
        .collect()
}

/// Classes scored at evaluation time.
pub fn evaluation_classes(split: &SplitSpec, mode: SetMode) -> Vec<String> {
    match mode {
        SetMode::Open => split.unseen.clone(),
        SetMode::Closed => split.seen.clone(),
    }
}

/// Videos used for evaluation. Open-set: any video containing an unseen
/// class. Closed-set: the validation subset.
pub fn evaluation_videos<'a>(corpus: &'a Corpus, split: &SplitSpec, mode: SetMode) -> Vec<&'a AnnotatedVideo> {
    let classes = evaluation_classes(split, mode);
    corpus
        .videos
        .iter()
        .filter(|v| match mode {
            SetMode::Open => v.labels().any(|l| classes.iter().any(|c| c == l)),
            SetMode::Closed => v.subset == Subset::Validation,
        })
        .collect()
}

/// Vocabulary given to the classifier at evaluation time.
pub fn evaluation_vocabulary(corpus: &Corpus, split: &SplitSpec, mode: SetMode, vocab: Vocabulary) -> Vec<String> {
    match vocab {
        Vocabulary::Unseen => evaluation_classes(split, mode),
        Vocabulary::All => corpus.classes.clone(),
    }
}

/// One video ready for the model: rescaled features and dense targets.
#[derive(Debug, Clone)]
pub struct PreparedVideo<T> {
    pub id: String,
    pub e: Tensor<T>,
    pub targets: Targets<T>,
}

pub fn prepare<T: Real>(videos: &[&AnnotatedVideo], space: &LabelSpace, t_len: usize) -> Result<Vec<PreparedVideo<T>>> {
    videos
        .iter()
        .map(|v| {
            let dense = assign_labels(v, t_len, space)?;
            Ok(PreparedVideo {
                id: v.id.clone(),
                e: rescale_features(&v.features, t_len)?.cast(),
                targets: Targets::from_dense(&dense),
            })
        })
        .collect()
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &Stale<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = model
            .params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads[i]` is `None` for frozen entries, which are
    /// left untouched.
    pub fn update(&mut self, model: &mut Stale<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let step_size: T = lit(self.lr / bc1);
        let decay: T = lit(1.0 - self.lr * self.weight_decay);
        let bc2_sqrt: T = lit(bc2.sqrt());
        let eps: T = lit(self.eps);
        for (i, entry) in model.params.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = entry.value.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let mj = b1 * m.data()[j] + (T::one() - b1) * gj;
                let vj = b2 * v.data()[j] + (T::one() - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                w[j] = w[j] * decay - step_size * mj / (vj.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// One optimizer step in the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub class: f64,
    pub mask: f64,
    pub completeness: f64,
    pub consistency: f64,
    pub grad_norm: f64,
}

/// Trained model with its optimizer state and loss log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub model: Stale<T>,
    pub optimizer: Adam<T>,
    pub history: Vec<StepRecord>,
    /// Training vocabulary in token-table order.
    pub classes: Vec<String>,
}

/// Trains from scratch on `videos` with the vocabulary `classes`.
pub fn train_on_videos<T: Real>(
    corpus: &Corpus,
    videos: &[&AnnotatedVideo],
    classes: &[String],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    ensure(!videos.is_empty(), || {
        Error::InvalidInput("no training videos for this split".into())
    })?;
    let space = LabelSpace::new(classes.to_vec())?;
    let dims = ModelDims {
        input_dim: videos[0].features.rows(),
        token_dim: corpus.token_dim(),
    };
    let model = Stale::new(&cfg.model, dims, cfg.seed)?;
    let optimizer = Adam::new(&model, cfg.lr, cfg.weight_decay);
    let data = prepare::<T>(videos, &space, cfg.t_len)?;
    let tokens: Tensor<T> = class_embedding_table(corpus, classes)?.cast();
    let mut outcome = TrainOutcome {
        model,
        optimizer,
        history: Vec::new(),
        classes: classes.to_vec(),
    };
    continue_training(&mut outcome, &data, &tokens, cfg, cfg.epochs)?;
    Ok(outcome)
}

/// Runs `epochs` more epochs; the batch order depends only on the seed and the
/// number of completed epochs.
pub fn continue_training<T: Real>(
    run: &mut TrainOutcome<T>,
    data: &[PreparedVideo<T>],
    tokens: &Tensor<T>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<()> {
    let first_epoch = run.history.last().map_or(0, |r| r.epoch + 1);
    for epoch in first_epoch..first_epoch + epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let videos: Vec<&PreparedVideo<T>> = batch.iter().map(|&i| &data[i]).collect();
            let record = train_step(run, &videos, tokens, cfg, epoch)?;
            log::debug!("step {} epoch {} loss {:.6}", record.step, epoch, record.total);
            run.history.push(record);
        }
    }
    Ok(())
}

/// One batch: mean loss over videos, backward, clip, Adam.
pub fn train_step<T: Real>(
    run: &mut TrainOutcome<T>,
    batch: &[&PreparedVideo<T>],
    tokens: &Tensor<T>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepRecord> {
    let model = &run.model;
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let tok = g.constant(tokens.clone());
    let f_lan = model.text_embed(&mut g, &p, tok)?;
    let mut sum = None;
    let mut parts = LossBreakdown::default();
    let w = 1.0 / batch.len() as f64;
    for v in batch {
        let e = g.constant(v.e.clone());
        let vars = model.forward_graph(&mut g, &p, e, f_lan)?;
        let (l, b) = total_loss(&mut g, model, &p, &vars, e, &v.targets, cfg.losses)?;
        parts.add_scaled(&b, w);
        sum = Some(match sum {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let loss = g.scale(sum.expect("nonempty batch"), w);
    if !parts.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|v| v.id.as_str()).collect();
        return Err(Error::Numerical(format!(
            "non-finite loss at step {} (epoch {epoch}, videos {ids:?}): {parts:?}",
            run.optimizer.step + 1
        )));
    }
    let mut grads = g.backward(loss);
    let entries = model.params.entries();
    let mut collected: Vec<Option<Tensor<T>>> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            model.is_trainable(e.group).then(|| {
                grads
                    .take(p.vars()[i])
                    .unwrap_or_else(|| Tensor::zeros(e.value.rows(), e.value.cols()))
            })
        })
        .collect();
    let norm = collected
        .iter()
        .flatten()
        .flat_map(|t| t.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient norm at step {}",
            run.optimizer.step + 1
        )));
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        collected.iter_mut().flatten().for_each(|t| *t = t.scale(lit(s)));
    }
    run.optimizer.update(&mut run.model, &collected);
    Ok(StepRecord {
        step: run.optimizer.step,
        epoch,
        total: parts.total,
        class: parts.class,
        mask: parts.mask,
        completeness: parts.completeness,
        consistency: parts.consistency,
        grad_norm: norm,
    })
}

/// Trains on the seen side of `split`.
pub fn train<T: Real>(corpus: &Corpus, split: &SplitSpec, mode: SetMode, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let videos = training_videos(corpus, split, mode);
    train_on_videos(corpus, &videos, &split.seen, cfg)
}

pub fn write_history_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::Format(format!("loss history: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("loss history: {e}")))?;
    formats::write_bytes(path, &bytes)
}

// ---- checkpoints ------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "stale-lab-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub tool_version: String,
    /// Precision the model was trained in; the payload is always 64-bit.
    pub precision: DType,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dims: ModelDims,
    pub classes: Vec<String>,
    pub step: u64,
    pub epochs_done: usize,
    pub params: Vec<TensorRecord>,
    pub blob: String,
    pub blob_sha256: String,
}

/// SHA-256 of the canonical JSON form of `cfg`.
pub fn config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and `<path>.bin` (parameters, then Adam
/// first and second moments, little-endian f64).
pub fn save_checkpoint<T: Real>(path: &Path, run: &TrainOutcome<T>, cfg: &TrainConfig) -> Result<()> {
    let mut bytes = Vec::new();
    let entries = run.model.params.entries();
    for list in [
        entries.iter().map(|e| &e.value).collect::<Vec<_>>(),
        run.optimizer.m.iter().collect(),
        run.optimizer.v.iter().collect(),
    ] {
        for t in list {
            for &x in t.data() {
                bytes.write_all(&x.as_f64().to_le_bytes()).expect("in-memory write");
            }
        }
    }
    let blob = blob_path(path);
    formats::write_bytes(&blob, &bytes)?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        tool_version: TOOL_VERSION.into(),
        precision: T::DTYPE,
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        dims: run.model.dims,
        classes: run.classes.clone(),
        step: run.optimizer.step,
        epochs_done: run.history.last().map_or(0, |r| r.epoch + 1),
        params: entries
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                group: e.group,
                shape: [e.value.rows(), e.value.cols()],
            })
            .collect(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
        blob_sha256: sha256_hex(&bytes),
    };
    formats::write_json(path, &manifest)
}

/// Loaded checkpoint. The loss history is not part of the checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub manifest: CheckpointManifest,
    pub model: Stale<T>,
    pub optimizer: Adam<T>,
}

impl<T: Real> Checkpoint<T> {
    /// Rejects a checkpoint trained under a different configuration.
    pub fn expect_config(&self, cfg: &TrainConfig) -> Result<()> {
        let expected = config_hash(cfg);
        ensure(expected == self.manifest.config_hash, || Error::ConfigHashMismatch {
            checkpoint: self.manifest.config_hash.clone(),
            expected,
        })
    }
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let manifest: CheckpointManifest = formats::read_json(path)?;
    ensure(manifest.format == CHECKPOINT_FORMAT, || {
        Error::Format(format!(
            "{}: unknown checkpoint format {:?}",
            path.display(),
            manifest.format
        ))
    })?;
    let actual = config_hash(&manifest.config);
    ensure(actual == manifest.config_hash, || Error::ConfigHashMismatch {
        checkpoint: manifest.config_hash.clone(),
        expected: actual,
    })?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    ensure(sha256_hex(&bytes) == manifest.blob_sha256, || {
        Error::Format(format!("{}: payload checksum mismatch", blob.display()))
    })?;

    let mut model = Stale::<T>::new(&manifest.config.model, manifest.dims, manifest.config.seed)?;
    let mut optimizer = Adam::new(&model, manifest.config.lr, manifest.config.weight_decay);
    optimizer.step = manifest.step;
    let layout: Vec<TensorRecord> = model
        .params
        .entries()
        .iter()
        .map(|e| TensorRecord {
            name: e.name.clone(),
            group: e.group,
            shape: [e.value.rows(), e.value.cols()],
        })
        .collect();
    ensure(layout == manifest.params, || {
        Error::Format(format!("{}: parameter layout does not match the model", path.display()))
    })?;
    let n: usize = layout.iter().map(|r| r.shape[0] * r.shape[1]).sum();
    ensure(bytes.len() == 3 * n * 8, || {
        Error::Format(format!(
            "{}: expected {} bytes, found {}",
            blob.display(),
            3 * n * 8,
            bytes.len()
        ))
    })?;
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| lit::<T>(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
    for t in model.params.entries_mut().iter_mut().map(|e| &mut e.value) {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = values.next().expect("length checked"));
    }
    for t in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = values.next().expect("length checked"));
    }
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
    })
}

// ---- evaluation -------------------------------------------------------------

/// Detections of every evaluation video, labeled with class names.
pub fn detect_videos<T: Real>(
    model: &Stale<T>,
    corpus: &Corpus,
    videos: &[&AnnotatedVideo],
    vocabulary: &[String],
    t_len: usize,
    inf: &InferenceConfig,
) -> Result<Vec<LabeledDetection>> {
    inf.validate()?;
    ensure(corpus.token_dim() == model.dims.token_dim, || {
        Error::Shape(format!(
            "corpus tokens are {}-wide, the checkpoint expects {}",
            corpus.token_dim(),
            model.dims.token_dim
        ))
    })?;
    let f_lan = model.text_table(&class_embedding_table(corpus, vocabulary)?.cast())?;
    let mut out = Vec::new();
    for v in videos {
        ensure(v.features.rows() == model.dims.input_dim, || {
            Error::Shape(format!("video {} has {} feature rows", v.id, v.features.rows()))
        })?;
        let e: Tensor<T> = rescale_features(&v.features, t_len)?.cast();
        let result = model.forward_with_text(&e, &f_lan)?;
        for d in detect(&result, inf) {
            out.push(LabeledDetection {
                video: v.id.clone(),
                label: vocabulary[d.class_index].clone(),
                start: d.start,
                end: d.end,
                score: d.confidence,
            });
        }
    }
    Ok(out)
}

/// Ground truth of `videos` restricted to `classes`.
pub fn ground_truth(videos: &[&AnnotatedVideo], classes: &[String]) -> Vec<LabeledSegment> {
    videos
        .iter()
        .flat_map(|v| {
            v.instances
                .iter()
                .filter(|i| classes.contains(&i.label))
                .map(|i| LabeledSegment {
                    video: v.id.clone(),
                    label: i.label.clone(),
                    start: i.start,
                    end: i.end,
                })
        })
        .collect()
}

/// Detects and scores the evaluation side of `split`.
pub fn evaluate_checkpoint<T: Real>(
    model: &Stale<T>,
    t_len: usize,
    corpus: &Corpus,
    split: &SplitSpec,
    mode: SetMode,
    eval: &EvalConfig,
    inf: &InferenceConfig,
) -> Result<(EvalReport, Vec<LabeledDetection>)> {
    let classes = evaluation_classes(split, mode);
    for c in &classes {
        ensure(corpus.class_index(c).is_some(), || Error::UnknownLabel(c.clone()))?;
    }
    let vocabulary = evaluation_vocabulary(corpus, split, mode, eval.vocabulary);
    let videos = evaluation_videos(corpus, split, mode);
    let dets = detect_videos(model, corpus, &videos, &vocabulary, t_len, inf)?;
    let gts = ground_truth(&videos, &classes);
    let report = map_report(mode.label(), &dets, &gts, &classes, eval)?;
    Ok((report, dets))
}
