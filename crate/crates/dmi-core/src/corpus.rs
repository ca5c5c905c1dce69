//! Corpus data model and on-disk interchange formats.
//!
//! A corpus is a manifest (JSON lines) plus one binary feature file per
//! video. Two manifest record shapes exist:
//!
//! ```text
//! {"video_id": "v00003", "feature_file": "features/v00003.dmif", "role": "labeled"}
//! {"pair": ["v00003", "v00003c"], "label": "similar"}
//! ```
//!
//! Feature files hold a frame-level feature matrix: magic `DMIF`, u32
//! version (currently 1), u32 frame count, u32 feature dim, then
//! `frames * dim` little-endian f32 values in row-major order. Values are
//! promoted to f64 in memory; writing narrows back to f32, so corpora
//! generated by this crate round-trip bit-exactly.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::{DmiError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"DMIF";
pub const FEATURE_VERSION: u32 = 1;

/// Frame-level features for one video: a `frames x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSeq {
    pub video_id: String,
    pub frames: Mat,
}

/// Video-level feature vector, the mean over frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeature {
    pub video_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub a: String,
    pub b: String,
    pub label: PairLabel,
}

/// In-memory corpus: every video's frame features, the labeled pairs, and
/// the ids available as unlabeled negatives.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Feature dimension shared by every video.
    pub d: usize,
    pub videos: Vec<FrameFeatureSeq>,
    pub labeled_pairs: Vec<LabeledPair>,
    pub unlabeled_ids: Vec<String>,
}

impl Corpus {
    /// Map from video id to position in `videos`.
    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.video_id.as_str(), i))
            .collect()
    }

    /// Pooled feature for every video, in `videos` order.
    pub fn pooled(&self) -> Vec<VideoFeature> {
        self.videos.iter().map(pool_frames).collect()
    }
}

/// Partition of the corpus ids by supervision role.
#[derive(Debug, Clone)]
pub struct PairViews<'a> {
    pub positive_pairs: Vec<(&'a str, &'a str)>,
    pub dissimilar_pairs: Vec<(&'a str, &'a str)>,
    pub unlabeled_ids: &'a [String],
}

/// Splits labeled pairs by label and exposes the unlabeled pool.
pub fn pair_views(corpus: &Corpus) -> PairViews<'_> {
    let mut positive_pairs = Vec::new();
    let mut dissimilar_pairs = Vec::new();
    for p in &corpus.labeled_pairs {
        match p.label {
            PairLabel::Similar => positive_pairs.push((p.a.as_str(), p.b.as_str())),
            PairLabel::Dissimilar => dissimilar_pairs.push((p.a.as_str(), p.b.as_str())),
        }
    }
    PairViews { positive_pairs, dissimilar_pairs, unlabeled_ids: &corpus.unlabeled_ids }
}

/// Temporal mean pooling: the column means of the frame matrix.
pub fn pool_frames(seq: &FrameFeatureSeq) -> VideoFeature {
    let t = seq.frames.rows;
    assert!(t >= 1, "video {} has no frames", seq.video_id);
    let d = seq.frames.cols;
    let mut values = vec![0.0; d];
    for row in seq.frames.iter_rows() {
        for (acc, x) in values.iter_mut().zip(row) {
            *acc += x;
        }
    }
    for v in &mut values {
        *v /= t as f64;
    }
    VideoFeature { video_id: seq.video_id.clone(), values }
}

#[derive(Serialize, Deserialize)]
struct VideoRecord {
    video_id: String,
    feature_file: String,
    role: String,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    pair: [String; 2],
    label: String,
}

/// Loads a corpus from a manifest path, reading every referenced feature
/// file and validating cross-references.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(manifest_path).map_err(|_| {
        DmiError::MissingFile(manifest_path.display().to_string())
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut videos: Vec<FrameFeatureSeq> = Vec::new();
    let mut unlabeled_ids: Vec<String> = Vec::new();
    let mut labeled_pairs: Vec<LabeledPair> = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut seen_pairs: HashSet<(String, String)> = HashSet::new();
    let mut d: Option<usize> = None;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            DmiError::MalformedRecord(format!("manifest line {lineno}: invalid JSON ({e})"))
        })?;
        if value.get("video_id").is_some() {
            let rec: VideoRecord = serde_json::from_value(value).map_err(|e| {
                DmiError::MalformedRecord(format!("manifest line {lineno}: {e}"))
            })?;
            if rec.role != "labeled" && rec.role != "unlabeled" {
                return Err(DmiError::MalformedRecord(format!(
                    "manifest line {lineno}: role '{}' is not labeled/unlabeled",
                    rec.role
                )));
            }
            if !seen_ids.insert(rec.video_id.clone()) {
                return Err(DmiError::MalformedRecord(format!(
                    "manifest line {lineno}: duplicate video_id '{}'",
                    rec.video_id
                )));
            }
            let frames = read_feature_file(&base.join(&rec.feature_file), &rec.video_id)?;
            match d {
                None => d = Some(frames.cols),
                Some(expect) if frames.cols != expect => {
                    return Err(DmiError::DimensionMismatch(format!(
                        "video '{}' has dim {}, corpus dim is {expect}",
                        rec.video_id, frames.cols
                    )));
                }
                _ => {}
            }
            if rec.role == "unlabeled" {
                unlabeled_ids.push(rec.video_id.clone());
            }
            videos.push(FrameFeatureSeq { video_id: rec.video_id, frames });
        } else if value.get("pair").is_some() {
            let rec: PairRecord = serde_json::from_value(value).map_err(|e| {
                DmiError::MalformedRecord(format!("manifest line {lineno}: {e}"))
            })?;
            let label = match rec.label.as_str() {
                "similar" => PairLabel::Similar,
                "dissimilar" => PairLabel::Dissimilar,
                other => {
                    return Err(DmiError::MalformedRecord(format!(
                        "manifest line {lineno}: label '{other}' is not similar/dissimilar"
                    )));
                }
            };
            let [a, b] = rec.pair;
            if a == b {
                return Err(DmiError::MalformedRecord(format!(
                    "manifest line {lineno}: self-pair ('{a}', '{a}')"
                )));
            }
            let key = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            if !seen_pairs.insert(key) {
                return Err(DmiError::MalformedRecord(format!(
                    "manifest line {lineno}: duplicate pair ('{a}', '{b}')"
                )));
            }
            labeled_pairs.push(LabeledPair { a, b, label });
        } else {
            return Err(DmiError::MalformedRecord(format!(
                "manifest line {lineno}: record is neither a video nor a pair"
            )));
        }
    }

    if videos.is_empty() {
        return Err(DmiError::EmptyInput(format!(
            "manifest {} contains no video records",
            manifest_path.display()
        )));
    }
    for p in &labeled_pairs {
        for id in [&p.a, &p.b] {
            if !seen_ids.contains(id.as_str()) {
                return Err(DmiError::DanglingPairId(format!(
                    "pair ('{}', '{}') references unknown video '{id}'",
                    p.a, p.b
                )));
            }
        }
    }

    Ok(Corpus { d: d.unwrap(), videos, labeled_pairs, unlabeled_ids })
}

fn read_feature_file(path: &Path, video_id: &str) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|_| DmiError::MissingFile(path.display().to_string()))?;
    let fail = |why: &str| {
        DmiError::MalformedRecord(format!(
            "feature file {} for video '{video_id}': {why}",
            path.display()
        ))
    };
    if bytes.len() < 16 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if t == 0 || dim == 0 {
        return Err(fail("frame count and dim must be positive"));
    }
    let expect = 16 + t * dim * 4;
    if bytes.len() != expect {
        return Err(fail(&format!(
            "payload holds {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(t * dim);
    for chunk in bytes[16..].chunks_exact(4) {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(fail("non-finite feature value"));
        }
        data.push(x as f64);
    }
    Ok(Mat { rows: t, cols: dim, data })
}

fn write_feature_file(path: &Path, frames: &Mat) -> Result<()> {
    let mut out = Vec::with_capacity(16 + frames.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.rows as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols as u32).to_le_bytes());
    for x in &frames.data {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Writes a corpus under `dir` (manifest plus a `features/` subdirectory)
/// and returns the manifest path. Feature values are narrowed to f32.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let unlabeled: HashSet<&str> = corpus.unlabeled_ids.iter().map(|s| s.as_str()).collect();

    let manifest_path = dir.join("manifest.jsonl");
    let mut lines = String::new();
    for v in &corpus.videos {
        if v.video_id.contains('/') || v.video_id.contains('\\') {
            return Err(DmiError::MalformedRecord(format!(
                "video id '{}' is not filesystem-safe",
                v.video_id
            )));
        }
        let rel = format!("features/{}.dmif", v.video_id);
        write_feature_file(&dir.join(&rel), &v.frames)?;
        let role = if unlabeled.contains(v.video_id.as_str()) { "unlabeled" } else { "labeled" };
        let rec = VideoRecord {
            video_id: v.video_id.clone(),
            feature_file: rel,
            role: role.to_string(),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("serialize video record"));
        lines.push('\n');
    }
    for p in &corpus.labeled_pairs {
        let rec = PairRecord {
            pair: [p.a.clone(), p.b.clone()],
            label: match p.label {
                PairLabel::Similar => "similar".to_string(),
                PairLabel::Dissimilar => "dissimilar".to_string(),
            },
        };
        lines.push_str(&serde_json::to_string(&rec).expect("serialize pair record"));
        lines.push('\n');
    }
    let mut f = fs::File::create(&manifest_path)?;
    f.write_all(lines.as_bytes())?;
    Ok(manifest_path)
}

/// Reads one raw feature file without manifest context. Used by the
/// embedding CLI path for ad hoc inputs.
pub fn read_single_feature_file(path: &Path) -> Result<Mat> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|_| DmiError::MissingFile(path.display().to_string()))?
        .read_to_end(&mut buf)?;
    drop(buf);
    read_feature_file(path, "<direct>")
}
