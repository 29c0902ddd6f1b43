//! Appearance features for box crops and the similarity-based re-scoring of
//! propagated candidates.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::bplp::Candidate;
use crate::geometry::{clip_to_frame, BBox, Detection};
use crate::motion::Frame;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("feature vector has zero norm")]
    ZeroNorm,
    #[error("feature value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("feature vector is empty")]
    Empty,
    #[error("no embedding for frame {frame} box {bbox}")]
    Miss { frame: usize, bbox: BBox },
    #[error("crop of {bbox} lies outside frame {frame}")]
    FullyClipped { frame: usize, bbox: BBox },
    #[error("frame {0} not loaded")]
    MissingFrame(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl SimilarityError {
    /// Lookup failures that drop the candidate rather than abort the frame.
    pub fn drops_candidate(&self) -> bool {
        matches!(self, Self::Miss { .. } | Self::FullyClipped { .. })
    }
}

/// Non-negative descriptor with every component in [0, 1] and a non-zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SimilarityError> {
        if values.is_empty() {
            return Err(SimilarityError::Empty);
        }
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SimilarityError::OutOfRange(v));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(SimilarityError::ZeroNorm);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity. Components are non-negative, so the result is in [0, 1].
pub fn cosine_sim(a: &FeatureVector, b: &FeatureVector) -> Result<f64, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(SimilarityError::ZeroNorm);
    }
    // sqrt(na * nb) keeps identical and power-of-two-scaled vectors at exactly 1.
    Ok((dot / denom).clamp(0.0, 1.0))
}

/// Source of crop descriptors. Same (frame, box) always gives the same vector.
pub trait FeatureProvider: Sync {
    fn embed(&self, frame: usize, bbox: &BBox) -> Result<FeatureVector, SimilarityError>;
}

impl<T: FeatureProvider + ?Sized> FeatureProvider for &T {
    fn embed(&self, frame: usize, bbox: &BBox) -> Result<FeatureVector, SimilarityError> {
        (**self).embed(frame, bbox)
    }
}

/// Looks vectors up from an embeddings file keyed by frame and box corners
/// rounded to two decimals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    table: HashMap<(usize, [i64; 4]), FeatureVector>,
}

fn box_key(b: &BBox) -> [i64; 4] {
    b.corners().map(|c| (c * 100.0).round() as i64)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    frame: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    vec: Vec<f64>,
}

impl PrecomputedEmbeddings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: usize, bbox: &BBox, vector: FeatureVector) {
        self.table.insert((frame, box_key(bbox)), vector);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimilarityError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SimilarityError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, SimilarityError> {
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| SimilarityError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let rec: EmbeddingRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let bbox = BBox::from_array(rec.bbox).map_err(|e| parse_err(e.to_string()))?;
            let vector = FeatureVector::new(rec.vec).map_err(|e| parse_err(e.to_string()))?;
            out.insert(rec.frame, &bbox, vector);
        }
        Ok(out)
    }

    /// JSON Lines text in the same layout `parse` reads, sorted by key.
    pub fn to_jsonl(&self) -> String {
        let mut keys: Vec<_> = self.table.keys().copied().collect();
        keys.sort();
        let mut out = String::new();
        for key in keys {
            let v = &self.table[&key];
            let b = key.1.map(|c| c as f64 / 100.0);
            let vals: Vec<String> = v.values().iter().map(|x| format!("{x:.6}")).collect();
            out.push_str(&format!(
                "{{\"frame\":{},\"box\":[{:.2},{:.2},{:.2},{:.2}],\"vec\":[{}]}}\n",
                key.0,
                b[0],
                b[1],
                b[2],
                b[3],
                vals.join(",")
            ));
        }
        out
    }
}

impl FeatureProvider for PrecomputedEmbeddings {
    fn embed(&self, frame: usize, bbox: &BBox) -> Result<FeatureVector, SimilarityError> {
        self.table
            .get(&(frame, box_key(bbox)))
            .cloned()
            .ok_or(SimilarityError::Miss { frame, bbox: *bbox })
    }
}

pub const DEFAULT_PATCH_SIDE: usize = 16;

/// Grey-level thumbnail descriptor: crop, bilinear resize to `side x side`,
/// luma, min-max normalise per vector. Flat crops map to all-0.5.
#[derive(Debug, Clone, Copy)]
pub struct PatchDescriptor<'a> {
    frames: &'a [Frame],
    side: usize,
}

impl<'a> PatchDescriptor<'a> {
    /// `frames[i]` must hold frame `i`.
    pub fn new(frames: &'a [Frame], side: usize) -> Self {
        Self {
            frames,
            side: side.max(1),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn describe(frame: &Frame, bbox: &BBox, side: usize) -> Option<FeatureVector> {
        let size = frame.size();
        let (crop, _) = clip_to_frame(bbox, size)?;
        let max_x = (size.width() - 1) as f64;
        let max_y = (size.height() - 1) as f64;
        let step_x = crop.width() / side as f64;
        let step_y = crop.height() / side as f64;

        let mut values = Vec::with_capacity(side * side);
        for j in 0..side {
            let y = (crop.y1() + (j as f64 + 0.5) * step_y - 0.5).clamp(0.0, max_y);
            for i in 0..side {
                let x = (crop.x1() + (i as f64 + 0.5) * step_x - 0.5).clamp(0.0, max_x);
                values.push(bilinear_luma(frame, x, y));
            }
        }

        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let range = hi - lo;
            for v in &mut values {
                *v = ((*v - lo) / range).clamp(0.0, 1.0);
            }
        } else {
            values.fill(0.5);
        }
        FeatureVector::new(values).ok()
    }
}

fn bilinear_luma(frame: &Frame, x: f64, y: f64) -> f64 {
    let w = frame.size().width() as usize;
    let h = frame.size().height() as usize;
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = frame.luminance(x0, y0) * (1.0 - fx) + frame.luminance(x1, y0) * fx;
    let bottom = frame.luminance(x0, y1) * (1.0 - fx) + frame.luminance(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

impl FeatureProvider for PatchDescriptor<'_> {
    fn embed(&self, frame: usize, bbox: &BBox) -> Result<FeatureVector, SimilarityError> {
        let img = self.frames.get(frame).ok_or(SimilarityError::MissingFrame(frame))?;
        Self::describe(img, bbox, self.side).ok_or(SimilarityError::FullyClipped { frame, bbox: *bbox })
    }
}

/// Tries `primary` and falls back to `fallback` on a lookup miss.
pub struct WithFallback<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: FeatureProvider, F: FeatureProvider> FeatureProvider for WithFallback<P, F> {
    fn embed(&self, frame: usize, bbox: &BBox) -> Result<FeatureVector, SimilarityError> {
        match self.primary.embed(frame, bbox) {
            Err(SimilarityError::Miss { .. }) => self.fallback.embed(frame, bbox),
            other => other,
        }
    }
}

/// Scales a propagated candidate's score by the appearance similarity between
/// its crop on `target_frame` and the original crop on its source frame.
/// Boxes with offset 0 come back untouched.
pub fn rescore(
    candidate: &Candidate,
    target_frame: usize,
    provider: &dyn FeatureProvider,
) -> Result<Detection, SimilarityError> {
    let det = candidate.detection;
    if det.source_offset == 0 {
        return Ok(det);
    }
    let here = provider.embed(target_frame, &det.bbox)?;
    let there = provider.embed(candidate.source_frame(target_frame), &candidate.source_bbox)?;
    let sim = cosine_sim(&here, &there)?;
    Ok(det
        .with_score(det.score() * sim)
        .expect("product of two [0,1] values stays in range"))
}
