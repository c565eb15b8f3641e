//! File formats: ActivityNet-style annotations, raw feature blobs with JSON
//! sidecars, corpus manifests, splits and detection results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{ActionInstance, AnnotatedVideo, Subset};
use crate::error::{ensure, Error, Result};
use crate::synthdata::{Corpus, SynthConfig};
use crate::tensor::Tensor;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const CORPUS_FORMAT: &str = "stale-lab-corpus/1";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pretty JSON with a trailing newline; creates parent directories.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

// ---- feature blobs --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamLayout {
    /// RGB rows followed by flow rows.
    TwoStream,
    SingleStream,
    /// Class-token table, one row per class.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSidecar {
    /// `[rows, cols]`, row-major.
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_order: String,
    pub layout: StreamLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_labels: Option<Vec<String>>,
}

/// Path of the JSON sidecar that describes `blob`.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Writes `m` as little-endian f32 plus a sidecar next to it.
pub fn write_matrix_f32(
    blob: &Path,
    m: &Tensor<f64>,
    layout: StreamLayout,
    row_labels: Option<Vec<String>>,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for &x in m.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_bytes(blob, &bytes)?;
    let side = BlobSidecar {
        shape: [m.rows(), m.cols()],
        dtype: "float32".into(),
        byte_order: "little".into(),
        layout,
        row_labels,
    };
    write_json(&sidecar_path(blob), &side)
}

pub fn read_matrix_f32(blob: &Path) -> Result<(Tensor<f64>, BlobSidecar)> {
    let side: BlobSidecar = read_json(&sidecar_path(blob))?;
    ensure(side.dtype == "float32" && side.byte_order == "little", || {
        Error::Format(format!(
            "{}: unsupported payload {} / {}",
            blob.display(),
            side.dtype,
            side.byte_order
        ))
    })?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    let [rows, cols] = side.shape;
    ensure(bytes.len() == rows * cols * 4, || {
        Error::Format(format!(
            "{}: {} bytes for shape {rows}x{cols}",
            blob.display(),
            bytes.len()
        ))
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = Tensor::from_vec(rows, cols, data);
    ensure(m.all_finite(), || {
        Error::InvalidInput(format!("{}: non-finite values", blob.display()))
    })?;
    Ok((m, side))
}

// ---- annotations ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub segment: [f64; 2],
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub duration: f64,
    #[serde(default)]
    pub subset: Subset,
    pub annotations: Vec<SegmentAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    #[serde(default)]
    pub version: String,
    pub database: BTreeMap<String, VideoAnnotation>,
}

impl AnnotationFile {
    pub fn from_videos(videos: &[AnnotatedVideo], snippet_seconds: f64) -> Self {
        let database = videos
            .iter()
            .map(|v| {
                let duration = v.features.cols() as f64 * snippet_seconds;
                let annotations = v
                    .instances
                    .iter()
                    .map(|i| SegmentAnnotation {
                        segment: [i.start * duration, i.end * duration],
                        label: i.label.clone(),
                    })
                    .collect();
                (
                    v.id.clone(),
                    VideoAnnotation {
                        duration,
                        subset: v.subset,
                        annotations,
                    },
                )
            })
            .collect();
        Self {
            version: TOOL_VERSION.into(),
            database,
        }
    }
}

/// Converts one entry to normalized instances. Segments are clipped to the
/// video; segments empty after clipping are dropped with a warning.
pub fn normalize_annotation(id: &str, entry: &VideoAnnotation) -> Result<Vec<ActionInstance>> {
    ensure(entry.duration.is_finite() && entry.duration > 0.0, || {
        Error::InvalidInput(format!("video {id}: duration {} is not positive", entry.duration))
    })?;
    let mut out = Vec::with_capacity(entry.annotations.len());
    for a in &entry.annotations {
        let [s, e] = a.segment;
        ensure(s.is_finite() && e.is_finite(), || {
            Error::InvalidInput(format!("video {id}: non-finite segment"))
        })?;
        let start = (s / entry.duration).clamp(0.0, 1.0);
        let end = (e / entry.duration).clamp(0.0, 1.0);
        if start >= end {
            log::warn!("video {id}: dropping empty segment [{s}, {e}] of `{}`", a.label);
            continue;
        }
        out.push(ActionInstance {
            start,
            end,
            label: a.label.clone(),
        });
    }
    Ok(out)
}

// ---- corpus ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub features: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub tool_version: String,
    pub classes: Vec<String>,
    pub annotations: String,
    pub class_tokens: String,
    pub snippet_seconds: f64,
    pub videos: Vec<ManifestVideo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_config: Option<SynthConfig>,
}

pub const MANIFEST_FILE: &str = "corpus.json";

/// Writes a corpus directory and returns the manifest path.
pub fn write_corpus(dir: &Path, corpus: &Corpus, synth: Option<&SynthConfig>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let two_stream = synth.is_none_or(|s| s.two_stream);
    let layout = if two_stream {
        StreamLayout::TwoStream
    } else {
        StreamLayout::SingleStream
    };
    let mut videos = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let rel = format!("features/{}.bin", v.id);
        write_matrix_f32(&dir.join(&rel), &v.features, layout, None)?;
        videos.push(ManifestVideo {
            id: v.id.clone(),
            features: rel,
        });
    }
    write_json(
        &dir.join("annotations.json"),
        &AnnotationFile::from_videos(&corpus.videos, corpus.snippet_seconds),
    )?;
    write_matrix_f32(
        &dir.join("class_tokens.bin"),
        &corpus.class_tokens,
        StreamLayout::Table,
        Some(corpus.classes.clone()),
    )?;
    let latents = match &corpus.latents {
        Some(l) => {
            write_matrix_f32(
                &dir.join("latents.bin"),
                l,
                StreamLayout::Table,
                Some(corpus.classes.clone()),
            )?;
            Some("latents.bin".to_string())
        }
        None => None,
    };
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        tool_version: TOOL_VERSION.into(),
        classes: corpus.classes.clone(),
        annotations: "annotations.json".into(),
        class_tokens: "class_tokens.bin".into(),
        snippet_seconds: corpus.snippet_seconds,
        videos,
        latents,
        synth_config: synth.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Accepts the corpus directory or its manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mpath = manifest_path(path);
    let manifest: CorpusManifest = read_json(&mpath)?;
    ensure(manifest.format == CORPUS_FORMAT, || {
        Error::Format(format!(
            "{}: unknown corpus format `{}`",
            mpath.display(),
            manifest.format
        ))
    })?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let ann: AnnotationFile = read_json(&dir.join(&manifest.annotations))?;
    let (class_tokens, _) = read_matrix_f32(&dir.join(&manifest.class_tokens))?;
    let latents = match &manifest.latents {
        Some(rel) => Some(read_matrix_f32(&dir.join(rel))?.0),
        None => None,
    };
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        let entry = ann
            .database
            .get(&mv.id)
            .ok_or_else(|| Error::InvalidInput(format!("video {} has no annotation entry", mv.id)))?;
        let (features, _) = read_matrix_f32(&dir.join(&mv.features))?;
        videos.push(AnnotatedVideo {
            id: mv.id.clone(),
            features,
            instances: normalize_annotation(&mv.id, entry)?,
            subset: entry.subset,
        });
    }
    let corpus = Corpus {
        classes: manifest.classes,
        videos,
        class_tokens,
        latents,
        snippet_seconds: manifest.snippet_seconds,
    };
    corpus.validate()?;
    Ok(corpus)
}

// ---- detections -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    /// Seconds, like the annotation file.
    pub segment: [f64; 2],
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub version: String,
    pub results: BTreeMap<String, Vec<ResultEntry>>,
    #[serde(default)]
    pub external_data: serde_json::Value,
}
