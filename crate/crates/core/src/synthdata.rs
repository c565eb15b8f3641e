//! Seeded synthetic corpus in which snippet features and class-name tokens
//! are two linear views of one per-class latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{ActionInstance, AnnotatedVideo, Subset};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub latent_dim: usize,
    /// Rows of the feature matrix (`2d` when two-stream).
    pub feature_dim: usize,
    pub token_dim: usize,
    pub videos_per_class: usize,
    pub t_raw: usize,
    pub instances_per_video: [usize; 2],
    /// Normalized instance length bounds.
    pub instance_length: [f64; 2],
    pub feature_noise_sigma: f64,
    /// Scale of a per-video offset `A w` added to every background snippet.
    pub background_drift_sigma: f64,
    /// Linear intensity ramp across each instance; zero disables it.
    pub instance_ramp: f64,
    pub two_stream: bool,
    /// Fraction of each class's videos marked as the validation subset.
    pub validation_fraction: f64,
    pub snippet_seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            latent_dim: 32,
            feature_dim: 64,
            token_dim: 64,
            videos_per_class: 10,
            t_raw: 100,
            instances_per_video: [1, 3],
            instance_length: [0.05, 0.25],
            feature_noise_sigma: 0.5,
            background_drift_sigma: 1.0,
            instance_ramp: 0.0,
            two_stream: true,
            validation_fraction: 0.2,
            snippet_seconds: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes == 0
            || self.latent_dim == 0
            || self.feature_dim == 0
            || self.token_dim == 0
            || self.videos_per_class == 0
            || self.t_raw == 0
        {
            return bad("all synthetic dimensions and counts must be at least 1".into());
        }
        if self.two_stream && !self.feature_dim.is_multiple_of(2) {
            return bad(format!(
                "two-stream features need an even feature_dim, got {}",
                self.feature_dim
            ));
        }
        let [lo, hi] = self.instances_per_video;
        if lo == 0 || lo > hi {
            return bad(format!("instances_per_video [{lo}, {hi}] is not a valid range"));
        }
        let [a, b] = self.instance_length;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return bad(format!("instance_length [{a}, {b}] must satisfy 0 < lo <= hi <= 1"));
        }
        for (name, s) in [
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("background_drift_sigma", self.background_drift_sigma),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.instance_ramp.is_finite() {
            return bad("instance_ramp must be finite".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        if !(self.snippet_seconds.is_finite() && self.snippet_seconds > 0.0) {
            return bad("snippet_seconds must be positive".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let width = (self.n_classes.max(2) - 1).to_string().len().max(2);
        (0..self.n_classes).map(|k| format!("class_{k:0width$}")).collect()
    }
}

/// A labeled corpus with one class-name token per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub videos: Vec<AnnotatedVideo>,
    /// `K x C'`, rows in `classes` order.
    pub class_tokens: Tensor<f64>,
    /// Generating latents `K x latent_dim`, kept for diagnostics.
    pub latents: Option<Tensor<f64>>,
    pub snippet_seconds: f64,
}

impl Corpus {
    pub fn token_dim(&self) -> usize {
        self.class_tokens.cols()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.rows())
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.class_tokens.rows() == self.classes.len(), || {
            Error::Shape(format!(
                "{} class tokens for {} classes",
                self.class_tokens.rows(),
                self.classes.len()
            ))
        })?;
        ensure(self.class_tokens.all_finite(), || {
            Error::InvalidInput("non-finite class tokens".into())
        })?;
        let c_in = self.feature_dim();
        for v in &self.videos {
            v.validate()?;
            ensure(Some(v.features.rows()) == c_in, || {
                Error::Shape(format!(
                    "video {} has {} feature rows, expected {:?}",
                    v.id,
                    v.features.rows(),
                    c_in
                ))
            })?;
            for label in v.labels() {
                ensure(self.class_index(label).is_some(), || {
                    Error::UnknownLabel(label.to_string())
                })?;
            }
        }
        Ok(())
    }
}

/// Rows of the token table for `subset`, in subset order.
pub fn class_embedding_table(corpus: &Corpus, subset: &[String]) -> Result<Tensor<f64>> {
    let c = corpus.token_dim();
    let mut data = Vec::with_capacity(subset.len() * c);
    for name in subset {
        let k = corpus
            .class_index(name)
            .ok_or_else(|| Error::UnknownLabel(name.clone()))?;
        data.extend_from_slice(corpus.class_tokens.row_slice(k));
    }
    Ok(Tensor::from_vec(subset.len(), c, data))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Non-overlapping instance spans `[start, end)` in snippets, at least one
/// background snippet apart, sorted by start.
fn place_instances(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Option<Vec<(usize, usize)>> {
    let t = cfg.t_raw;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let len_norm = rng.random_range(cfg.instance_length[0]..=cfg.instance_length[1]);
                let len = ((len_norm * t as f64).round() as usize).clamp(1, t);
                let start = rng.random_range(0..=t - len);
                let end = start + len;
                if spans.iter().all(|&(s, e)| end < s || start > e) {
                    spans.push((start, end));
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if ok {
            spans.sort_unstable();
            return Some(spans);
        }
    }
    None
}

/// Generates the corpus described by `cfg`; deterministic in `cfg`.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let k = cfg.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map_std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let a = gaussian(&mut rng, cfg.feature_dim, cfg.latent_dim, map_std);
    let b = gaussian(&mut rng, cfg.token_dim, cfg.latent_dim, map_std);
    let latents = gaussian(&mut rng, k, cfg.latent_dim, 1.0);
    let background = gaussian(&mut rng, cfg.feature_dim, 1, 1.0);
    // v_k as columns (feature_dim x K), t_k as rows (K x token_dim)
    let prototypes = Tensor::matmul_t(&a, false, &latents, true);
    let class_tokens = Tensor::matmul_t(&latents, false, &b, true);

    let classes = cfg.class_names();
    let n_val = (cfg.validation_fraction * cfg.videos_per_class as f64).round() as usize;
    let n_videos = k * cfg.videos_per_class;
    let mut videos = Vec::with_capacity(n_videos);
    for vi in 0..n_videos {
        let class = vi / cfg.videos_per_class;
        let within = vi % cfg.videos_per_class;
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed);
        vrng.set_stream(vi as u64 + 1);

        let n_inst = vrng.random_range(cfg.instances_per_video[0]..=cfg.instances_per_video[1]);
        let spans = place_instances(&mut vrng, cfg, n_inst).ok_or_else(|| {
            Error::Config(format!(
                "could not place {n_inst} instances of length {:?} in {} snippets",
                cfg.instance_length, cfg.t_raw
            ))
        })?;

        let drift_latent = gaussian(&mut vrng, cfg.latent_dim, 1, cfg.background_drift_sigma);
        let drift = Tensor::matmul_t(&a, false, &drift_latent, false);
        let mut owner = vec![None; cfg.t_raw];
        for (j, &(s, e)) in spans.iter().enumerate() {
            owner[s..e].iter_mut().for_each(|o| *o = Some(j));
        }
        let noise = gaussian(&mut vrng, cfg.feature_dim, cfg.t_raw, cfg.feature_noise_sigma);
        let features = Tensor::from_fn(cfg.feature_dim, cfg.t_raw, |r, t| {
            let clean = match owner[t] {
                Some(j) => {
                    let (s, e) = spans[j];
                    let gain = if cfg.instance_ramp == 0.0 || e - s < 2 {
                        1.0
                    } else {
                        1.0 + cfg.instance_ramp * ((t - s) as f64 / (e - s - 1) as f64 - 0.5)
                    };
                    gain * prototypes.get(r, class)
                }
                None => background.get(r, 0) + drift.get(r, 0),
            };
            clean + noise.get(r, t)
        });

        let instances = spans
            .iter()
            .map(|&(s, e)| ActionInstance {
                start: s as f64 / cfg.t_raw as f64,
                end: e as f64 / cfg.t_raw as f64,
                label: classes[class].clone(),
            })
            .collect();
        let subset = if within >= cfg.videos_per_class - n_val {
            Subset::Validation
        } else {
            Subset::Training
        };
        videos.push(AnnotatedVideo {
            id: format!("v_{vi:05}"),
            features,
            instances,
            subset,
        });
    }

    let corpus = Corpus {
        classes,
        videos,
        class_tokens,
        latents: Some(latents),
        snippet_seconds: cfg.snippet_seconds,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{assign_labels, LabelSpace};

    fn small() -> SynthConfig {
        SynthConfig {
            n_classes: 10,
            videos_per_class: 2,
            t_raw: 50,
            feature_dim: 16,
            token_dim: 8,
            latent_dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_class_usage() {
        let c = gen_corpus(&small()).unwrap();
        assert_eq!(c.videos.len(), 20);
        for name in &c.classes {
            let n = c.videos.iter().filter(|v| v.labels().all(|l| l == name)).count();
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_corpus(&small()).unwrap(), gen_corpus(&small()).unwrap());
        let other = gen_corpus(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.class_tokens, gen_corpus(&small()).unwrap().class_tokens);
    }

    #[test]
    fn zero_noise_snippets_equal_their_prototype() {
        let cfg = SynthConfig {
            feature_noise_sigma: 0.0,
            ..small()
        };
        let c = gen_corpus(&cfg).unwrap();
        let latents = c.latents.as_ref().unwrap();
        // rebuild A from the seed to get v_k independently of the generator loop
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let a = gaussian(
            &mut rng,
            cfg.feature_dim,
            cfg.latent_dim,
            1.0 / (cfg.latent_dim as f64).sqrt(),
        );
        for v in &c.videos {
            for inst in &v.instances {
                let k = c.class_index(&inst.label).unwrap();
                let s = (inst.start * cfg.t_raw as f64).round() as usize;
                let e = (inst.end * cfg.t_raw as f64).round() as usize;
                for t in s..e {
                    for r in 0..cfg.feature_dim {
                        let want: f64 = (0..cfg.latent_dim).map(|j| a.get(r, j) * latents.get(k, j)).sum();
                        assert!((v.features.get(r, t) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn instances_are_separated_and_labeled() {
        let cfg = small();
        let c = gen_corpus(&cfg).unwrap();
        let space = LabelSpace::new(c.classes.clone()).unwrap();
        let t = (2.0 / cfg.instance_length[0]).ceil() as usize;
        for v in &c.videos {
            for w in v.instances.windows(2) {
                assert!(w[1].start > w[0].end);
            }
            let d = assign_labels(v, t, &space).unwrap();
            for (j, inst) in v.instances.iter().enumerate() {
                let k = space.index_of(&inst.label).unwrap();
                assert!((0..t).any(|s| d.owner[s] == Some(j) && d.y.get(k, s) == 1.0));
            }
        }
    }

    #[test]
    fn matching_class_aligns_best_under_generating_maps() {
        let cfg = SynthConfig {
            n_classes: 20,
            latent_dim: 32,
            feature_noise_sigma: 0.0,
            videos_per_class: 1,
            ..SynthConfig::default()
        };
        let c = gen_corpus(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 1.0 / (cfg.latent_dim as f64).sqrt();
        let a = gaussian(&mut rng, cfg.feature_dim, cfg.latent_dim, std);
        let b = gaussian(&mut rng, cfg.token_dim, cfg.latent_dim, std);
        let latents = c.latents.as_ref().unwrap();
        let v = Tensor::matmul_t(&a, false, latents, true); // feature_dim x K
        let u = Tensor::matmul_t(&a, true, &v, false); // latent x K
        let w = Tensor::matmul_t(&b, true, &c.class_tokens, true); // latent x K
        let cos = |i: usize, j: usize| {
            let (x, y) = (u.column(i), w.column(j));
            let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|p| p * p).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        for i in 0..cfg.n_classes {
            let best = (0..cfg.n_classes)
                .max_by(|&p, &q| cos(i, p).total_cmp(&cos(i, q)))
                .unwrap();
            assert_eq!(best, i);
        }
    }

    #[test]
    fn embedding_table_subsets() {
        let c = gen_corpus(&small()).unwrap();
        assert_eq!(class_embedding_table(&c, &c.classes).unwrap(), c.class_tokens);
        assert_eq!(class_embedding_table(&c, &[]).unwrap().shape(), (0, 8));
        let perm = vec![c.classes[3].clone(), c.classes[1].clone()];
        let t = class_embedding_table(&c, &perm).unwrap();
        assert_eq!(t.row_slice(0), c.class_tokens.row_slice(3));
        assert_eq!(t.row_slice(1), c.class_tokens.row_slice(1));
        assert!(class_embedding_table(&c, &["nope".to_string()]).is_err());
    }

    #[test]
    fn impossible_placement_is_rejected() {
        let cfg = SynthConfig {
            t_raw: 10,
            instances_per_video: [5, 5],
            instance_length: [0.5, 0.5],
            ..small()
        };
        assert!(matches!(gen_corpus(&cfg), Err(Error::Config(_))));
    }
}
