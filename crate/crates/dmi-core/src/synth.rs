//! Deterministic synthetic corpora with ground-truth similar pairs.
//!
//! Each base video is a seeded Gaussian bundle: a per-video mean drawn from
//! N(0, I) and frames scattered around it with N(0, 0.1 I) noise. Similar
//! pairs are fabricated by augmenting a base video with a feature-space
//! analogue of common re-edit operations (cropping, blocking, splicing,
//! flipping, jitter). Everything is a pure function of the spec seed, so
//! corpora regenerate bit-identically.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Corpus, FrameFeatureSeq, LabeledPair, PairLabel};
use crate::derive_seed;
use crate::mat::Mat;
use crate::{DmiError, Result};

/// Variance of per-frame noise around the video mean.
const FRAME_NOISE_VAR: f64 = 0.1;

// Seed stream salts; disjoint ranges keep per-video, pair-selection, and
// per-augmentation randomness independent.
const STREAM_VIDEO: u64 = 0x10_0000;
const STREAM_PAIRS: u64 = 0x20_0000;
const STREAM_AUGMENT: u64 = 0x30_0000;

/// Feature-space analogue of one re-edit operation.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentKind {
    /// Keep a contiguous window of ceil(keep_ratio * T) frames.
    TemporalCrop { keep_ratio: f64 },
    /// Zero a seeded subset of floor(block_ratio * d) dimensions in every frame.
    DimBlock { block_ratio: f64 },
    /// Replace floor(foreign_ratio * T) contiguous frames with frames from a
    /// seeded foreign video.
    Splice { foreign_ratio: f64 },
    /// Apply a fixed orthogonal involution to every frame.
    Flip,
    /// Add seeded Gaussian noise of the given scale; scale 0 is the identity.
    Jitter { noise_scale: f64 },
}

impl AugmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::TemporalCrop { .. } => "crop",
            AugmentKind::DimBlock { .. } => "block",
            AugmentKind::Splice { .. } => "splice",
            AugmentKind::Flip => "flip",
            AugmentKind::Jitter { .. } => "jitter",
        }
    }

    fn validate(&self) -> Result<()> {
        let ratio_ok = |r: f64| r > 0.0 && r <= 1.0;
        match self {
            AugmentKind::TemporalCrop { keep_ratio } if !ratio_ok(*keep_ratio) => Err(
                DmiError::SpecInvalid(format!("keep_ratio {keep_ratio} outside (0, 1]")),
            ),
            AugmentKind::DimBlock { block_ratio } if !ratio_ok(*block_ratio) => Err(
                DmiError::SpecInvalid(format!("block_ratio {block_ratio} outside (0, 1]")),
            ),
            AugmentKind::Splice { foreign_ratio } if !ratio_ok(*foreign_ratio) => Err(
                DmiError::SpecInvalid(format!("foreign_ratio {foreign_ratio} outside (0, 1]")),
            ),
            AugmentKind::Jitter { noise_scale } if !(*noise_scale >= 0.0) => Err(
                DmiError::SpecInvalid(format!("noise_scale {noise_scale} must be >= 0")),
            ),
            _ => Ok(()),
        }
    }
}

/// Recipe for one synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_base: usize,
    pub n_pairs: usize,
    /// Inclusive (min, max) frames per video.
    pub frames_per_video: (usize, usize),
    pub d: usize,
    /// Sampling weights over augmentation kinds.
    pub transform_mix: Vec<(AugmentKind, f64)>,
    pub seed: u64,
}

impl SynthSpec {
    /// Default augmentation mix. Flip is weighted up because it is the one
    /// transform a raw cosine cannot see through, which keeps untrained
    /// retrieval quality low while remaining learnable.
    pub fn default_mix() -> Vec<(AugmentKind, f64)> {
        vec![
            (AugmentKind::TemporalCrop { keep_ratio: 0.5 }, 1.0),
            (AugmentKind::DimBlock { block_ratio: 0.3 }, 1.0),
            (AugmentKind::Splice { foreign_ratio: 0.3 }, 1.0),
            (AugmentKind::Flip, 4.0),
            (AugmentKind::Jitter { noise_scale: 0.5 }, 1.0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_base == 0 {
            return Err(DmiError::SpecInvalid("n_base must be positive".into()));
        }
        if self.n_pairs == 0 {
            return Err(DmiError::SpecInvalid("n_pairs must be positive".into()));
        }
        if self.n_pairs > self.n_base {
            return Err(DmiError::SpecInvalid(format!(
                "n_pairs {} exceeds n_base {}",
                self.n_pairs, self.n_base
            )));
        }
        if self.d == 0 {
            return Err(DmiError::SpecInvalid("d must be positive".into()));
        }
        let (lo, hi) = self.frames_per_video;
        if lo == 0 || lo > hi {
            return Err(DmiError::SpecInvalid(format!(
                "frames_per_video ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        if self.transform_mix.is_empty() {
            return Err(DmiError::SpecInvalid("transform_mix is empty".into()));
        }
        let mut total = 0.0;
        for (kind, w) in &self.transform_mix {
            kind.validate()?;
            if !(*w >= 0.0) {
                return Err(DmiError::SpecInvalid(format!(
                    "weight {w} for {} must be non-negative",
                    kind.name()
                )));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(DmiError::SpecInvalid(
                "transform weights must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Narrow every value to f32 so in-memory corpora match their on-disk form
/// bit for bit.
fn quantize_f32(m: &mut Mat) {
    for x in &mut m.data {
        *x = *x as f32 as f64;
    }
}

fn gaussian_video(id: String, t: usize, d: usize, rng: &mut ChaCha8Rng) -> FrameFeatureSeq {
    let noise_std = FRAME_NOISE_VAR.sqrt();
    let mean: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let mut frames = Mat::zeros(t, d);
    for r in 0..t {
        for c in 0..d {
            frames.set(r, c, mean[c] + noise_std * normal(rng));
        }
    }
    let mut seq = FrameFeatureSeq { video_id: id, frames };
    quantize_f32(&mut seq.frames);
    seq
}

fn weighted_pick<'a>(mix: &'a [(AugmentKind, f64)], rng: &mut ChaCha8Rng) -> &'a AugmentKind {
    let total: f64 = mix.iter().map(|(_, w)| *w).sum();
    let x = rng.gen_range(0.0..total);
    let mut cum = 0.0;
    for (kind, w) in mix {
        cum += w;
        if x < cum {
            return kind;
        }
    }
    &mix.last().unwrap().0
}

/// Generates `n_base` base videos plus one augmented copy per fabricated
/// pair. Copies take the base id with a `c` suffix; bases not chosen for a
/// pair become the unlabeled pool.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let (lo, hi) = spec.frames_per_video;
    let width = spec.n_base.max(10_000).to_string().len();

    let mut videos: Vec<FrameFeatureSeq> = Vec::with_capacity(spec.n_base + spec.n_pairs);
    for i in 0..spec.n_base {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_VIDEO + i as u64));
        let t = rng.gen_range(lo..=hi);
        videos.push(gaussian_video(format!("v{i:0width$}"), t, spec.d, &mut rng));
    }

    let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_PAIRS));
    let mut indices: Vec<usize> = (0..spec.n_base).collect();
    for j in 0..spec.n_pairs {
        let pick = pair_rng.gen_range(j..spec.n_base);
        indices.swap(j, pick);
    }
    let mut chosen: Vec<usize> = indices[..spec.n_pairs].to_vec();
    chosen.sort_unstable();

    let mut labeled_pairs = Vec::with_capacity(spec.n_pairs);
    let mut copies = Vec::with_capacity(spec.n_pairs);
    for (p, &b) in chosen.iter().enumerate() {
        let kind = weighted_pick(&spec.transform_mix, &mut pair_rng);
        let mut copy = augment(
            &videos[b],
            kind,
            derive_seed(spec.seed, STREAM_AUGMENT + p as u64),
        )?;
        copy.video_id = format!("{}c", videos[b].video_id);
        quantize_f32(&mut copy.frames);
        labeled_pairs.push(LabeledPair {
            a: videos[b].video_id.clone(),
            b: copy.video_id.clone(),
            label: PairLabel::Similar,
        });
        copies.push(copy);
    }

    let chosen_set: std::collections::HashSet<usize> = chosen.iter().cloned().collect();
    let unlabeled_ids: Vec<String> = (0..spec.n_base)
        .filter(|i| !chosen_set.contains(i))
        .map(|i| videos[i].video_id.clone())
        .collect();

    videos.extend(copies);
    Ok(Corpus { d: spec.d, videos, labeled_pairs, unlabeled_ids })
}

/// Sign pattern of the flip involution. Coordinates are reversed and the
/// sign depends on the distance to the nearer edge, so paired indices j and
/// d-1-j always carry the same sign and the map is its own inverse for
/// every d.
fn flip_sign(j: usize, d: usize) -> f64 {
    if j.min(d - 1 - j) % 2 == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Applies one augmentation, deterministic in (seq, kind, seed).
pub fn augment(seq: &FrameFeatureSeq, kind: &AugmentKind, seed: u64) -> Result<FrameFeatureSeq> {
    kind.validate()?;
    let t = seq.frames.rows;
    let d = seq.frames.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = match kind {
        AugmentKind::TemporalCrop { keep_ratio } => {
            let w = ((keep_ratio * t as f64).ceil() as usize).min(t);
            if w == 0 {
                return Err(DmiError::EmptyResult(format!(
                    "temporal_crop(keep_ratio={keep_ratio}) of {t} frames keeps none"
                )));
            }
            let start = rng.gen_range(0..=(t - w));
            let mut out = Mat::zeros(w, d);
            for r in 0..w {
                out.row_mut(r).copy_from_slice(seq.frames.row(start + r));
            }
            out
        }
        AugmentKind::DimBlock { block_ratio } => {
            let nblk = ((block_ratio * d as f64).floor() as usize).min(d);
            let mut dims: Vec<usize> = (0..d).collect();
            dims.shuffle(&mut rng);
            let blocked = &dims[..nblk];
            let mut out = seq.frames.clone();
            for r in 0..t {
                let row = out.row_mut(r);
                for &c in blocked {
                    row[c] = 0.0;
                }
            }
            out
        }
        AugmentKind::Splice { foreign_ratio } => {
            let nrep = ((foreign_ratio * t as f64).floor() as usize).min(t);
            let foreign = gaussian_video(String::new(), nrep.max(1), d, &mut rng);
            let mut out = seq.frames.clone();
            if nrep > 0 {
                let start = rng.gen_range(0..=(t - nrep));
                for r in 0..nrep {
                    out.row_mut(start + r).copy_from_slice(foreign.frames.row(r));
                }
            }
            out
        }
        AugmentKind::Flip => {
            let mut out = Mat::zeros(t, d);
            for r in 0..t {
                let src = seq.frames.row(r);
                let dst = out.row_mut(r);
                for j in 0..d {
                    dst[j] = flip_sign(j, d) * src[d - 1 - j];
                }
            }
            out
        }
        AugmentKind::Jitter { noise_scale } => {
            if *noise_scale == 0.0 {
                seq.frames.clone()
            } else {
                let mut out = seq.frames.clone();
                for x in &mut out.data {
                    *x += noise_scale * normal(&mut rng);
                }
                out
            }
        }
    };
    Ok(FrameFeatureSeq { video_id: seq.video_id.clone(), frames })
}
