//! Per-class box fusion: weighted boxes fusion with source-count re-scaling
//! (plain or similarity-aware), and the NMS, Soft-NMS and NMW baselines.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::bplp::CandidateSet;
use crate::geometry::{iou, BBox, Detection, LabelSet};
use crate::similarity::{rescore, FeatureProvider, SimilarityError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("similarity-aware fusion needs a feature provider")]
    MissingProvider,
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMethod {
    #[default]
    Swbf,
    Wbf,
    Nms,
    Snms,
    Nmw,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [Self::Swbf, Self::Wbf, Self::Nms, Self::Snms, Self::Nmw];
}

impl FromStr for FusionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "swbf" => Ok(Self::Swbf),
            "wbf" => Ok(Self::Wbf),
            "nms" => Ok(Self::Nms),
            "snms" | "soft-nms" | "soft_nms" => Ok(Self::Snms),
            "nmw" => Ok(Self::Nmw),
            other => Err(format!("unknown fusion method '{other}'")),
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Swbf => "swbf",
            Self::Wbf => "wbf",
            Self::Nms => "nms",
            Self::Snms => "snms",
            Self::Nmw => "nmw",
        })
    }
}

/// Which fused box a new box joins when several pass the IoU test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchRule {
    /// First fused box in creation order.
    #[default]
    First,
    /// Fused box with the highest IoU (earliest on ties).
    Best,
}

impl FromStr for MatchRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(Self::First),
            "best" => Ok(Self::Best),
            other => Err(format!("unknown match rule '{other}'")),
        }
    }
}

impl fmt::Display for MatchRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Best => "best",
        })
    }
}

/// How the source count in the re-scaling factor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceCount {
    /// Sources actually available for the frame (shrinks at sequence edges).
    #[default]
    Effective,
    /// Always `2k + 1`.
    Literal,
}

impl SourceCount {
    pub fn resolve(self, k: usize, effective: usize) -> usize {
        match self {
            Self::Effective => effective.max(1),
            Self::Literal => 2 * k + 1,
        }
    }
}

impl FromStr for SourceCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "effective" => Ok(Self::Effective),
            "literal" => Ok(Self::Literal),
            other => Err(format!("unknown source-count mode '{other}'")),
        }
    }
}

impl fmt::Display for SourceCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Effective => "effective",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Boxes match when IoU is strictly greater than this.
    pub iou_threshold: f64,
    pub num_sources: usize,
    pub snms_sigma: f64,
    /// Fused boxes with score at or below this are dropped.
    pub post_threshold: f64,
    pub match_rule: MatchRule,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::Swbf,
            iou_threshold: 0.5,
            num_sources: 3,
            snms_sigma: 0.5,
            post_threshold: 0.1,
            match_rule: MatchRule::First,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(FusionError::InvalidConfig(format!(
                "iou_threshold {} not in (0, 1)",
                self.iou_threshold
            )));
        }
        if self.num_sources == 0 {
            return Err(FusionError::InvalidConfig("num_sources must be >= 1".into()));
        }
        // written this way so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.snms_sigma > 0.0) {
            return Err(FusionError::InvalidConfig(format!("snms_sigma {} must be > 0", self.snms_sigma)));
        }
        if !(0.0..=1.0).contains(&self.post_threshold) {
            return Err(FusionError::InvalidConfig(format!(
                "post_threshold {} not in [0, 1]",
                self.post_threshold
            )));
        }
        Ok(())
    }
}

/// Score descending; ties by corner coordinates, then input position.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| by_score_desc(&dets[a], &dets[b]).then(a.cmp(&b)));
    idx
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// A group of same-class boxes and their running fused box.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub class_id: u32,
    pub members: Vec<Detection>,
    pub fused: BBox,
    /// Mean member score, before source-count re-scaling.
    pub score: f64,
}

impl Cluster {
    fn new(det: Detection) -> Self {
        Self {
            class_id: det.class_id,
            members: vec![det],
            fused: det.bbox,
            score: det.score(),
        }
    }

    fn push(&mut self, det: Detection) {
        self.members.push(det);
        self.refresh();
    }

    /// Mean score and score-weighted mean corners over all members.
    fn refresh(&mut self) {
        let n = self.members.len() as f64;
        let total: f64 = self.members.iter().map(|d| d.score()).sum();
        let mut acc = [0.0f64; 4];
        for d in &self.members {
            let w = if total > 0.0 { d.score() } else { 1.0 };
            for (a, c) in acc.iter_mut().zip(d.bbox.corners()) {
                *a += w * c;
            }
        }
        let norm = if total > 0.0 { total } else { n };
        let c = acc.map(|a| a / norm);
        if let Ok(b) = BBox::from_array(c) {
            self.fused = b;
        }
        self.score = total / n;
    }

    /// Score after down-weighting clusters backed by fewer than `num_sources` boxes.
    pub fn rescaled_score(&self, num_sources: usize) -> f64 {
        let members = self.members.len();
        if members < num_sources {
            self.score * members as f64 / num_sources as f64
        } else {
            self.score
        }
    }

    pub fn to_detection(&self, num_sources: usize) -> Detection {
        Detection::new(self.class_id, self.fused, self.rescaled_score(num_sources).clamp(0.0, 1.0))
            .expect("fused score in range")
    }
}

/// Greedy clustering over boxes in score order, matching against the
/// current fused boxes at IoU > `threshold`.
pub fn wbf_clusters(dets: &[Detection], threshold: f64, rule: MatchRule) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = Vec::new();
    for i in score_order(dets) {
        let det = dets[i];
        let hit = match rule {
            MatchRule::First => clusters.iter().position(|c| iou(&c.fused, &det.bbox) > threshold),
            MatchRule::Best => {
                let mut best: Option<(usize, f64)> = None;
                for (n, c) in clusters.iter().enumerate() {
                    let v = iou(&c.fused, &det.bbox);
                    if v > threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((n, v));
                    }
                }
                best.map(|(n, _)| n)
            }
        };
        match hit {
            Some(n) => clusters[n].push(det),
            None => clusters.push(Cluster::new(det)),
        }
    }
    clusters
}

/// Weighted boxes fusion with re-scaling by `min(B, N) / N`, before the
/// post-threshold filter.
pub fn weighted_boxes_fusion(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    wbf_clusters(dets, cfg.iou_threshold, cfg.match_rule)
        .iter()
        .map(|c| c.to_detection(cfg.num_sources))
        .collect()
}

/// Hard NMS: keep the best box, drop everything overlapping it above the
/// threshold, repeat.
pub fn nms(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= cfg.iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Gaussian Soft-NMS: `s <- s * exp(-iou^2 / sigma)` against each selected
/// box; boxes decayed to `post_threshold` or below leave the pool.
pub fn soft_nms(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut pool: Vec<(usize, Detection, f64)> = dets.iter().enumerate().map(|(i, d)| (i, *d, d.score())).collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let best = (0..pool.len())
            .min_by(|&a, &b| {
                pool[b]
                    .2
                    .total_cmp(&pool[a].2)
                    .then_with(|| pool[a].1.bbox.lex_cmp(&pool[b].1.bbox))
                    .then(pool[a].0.cmp(&pool[b].0))
            })
            .unwrap();
        let (_, top, score) = pool.swap_remove(best);
        out.push(top.with_score(score).expect("decayed score in range"));
        for entry in pool.iter_mut() {
            let o = iou(&top.bbox, &entry.1.bbox);
            entry.2 *= (-(o * o) / cfg.snms_sigma).exp();
        }
        pool.retain(|e| e.2 > cfg.post_threshold);
        // keep a stable scan order for the next argmin
        pool.sort_by_key(|e| e.0);
    }
    out
}

/// Non-maximum weighted: each top box absorbs its IoU > threshold
/// neighbours; position is their average weighted by score x IoU with the
/// top box, score is the top box's.
pub fn nmw(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = score_order(dets).into_iter().map(|i| dets[i]).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let top = remaining[0];
        let mut acc = [0.0f64; 4];
        let mut total = 0.0;
        let mut rest = Vec::with_capacity(remaining.len());
        for d in remaining {
            let o = iou(&top.bbox, &d.bbox);
            if o > cfg.iou_threshold {
                let w = d.score() * o;
                total += w;
                for (a, c) in acc.iter_mut().zip(d.bbox.corners()) {
                    *a += w * c;
                }
            } else {
                rest.push(d);
            }
        }
        let bbox = if total > 0.0 {
            BBox::from_array(acc.map(|a| a / total)).unwrap_or(top.bbox)
        } else {
            top.bbox
        };
        out.push(top.with_bbox(bbox));
        remaining = rest;
    }
    out
}

/// Fuses one class's boxes with `cfg.method` and applies the post threshold.
/// For `Swbf` the caller is expected to have re-scored the inputs already.
pub fn fuse_class(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let fused = match cfg.method {
        FusionMethod::Swbf | FusionMethod::Wbf => weighted_boxes_fusion(dets, cfg),
        FusionMethod::Nms => nms(dets, cfg),
        FusionMethod::Snms => soft_nms(dets, cfg),
        FusionMethod::Nmw => nmw(dets, cfg),
    };
    fused
        .into_iter()
        .filter(|d| d.score() > cfg.post_threshold)
        .map(|d| d.with_offset(0))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrame {
    pub labels: LabelSet,
    /// Candidates dropped because no feature could be computed for them.
    pub dropped_by_rescore: usize,
    /// Fused boxes before the post threshold.
    pub fused_before_threshold: usize,
}

/// Re-scores (SWBF only), splits by class and fuses a frame's candidates.
/// Output is sorted by score descending, ties by class then corners.
pub fn fuse(
    candidates: &CandidateSet,
    cfg: &FusionConfig,
    provider: Option<&dyn FeatureProvider>,
) -> Result<FusedFrame, FusionError> {
    cfg.validate()?;
    let mut dropped = 0;
    let mut by_class: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    if cfg.method == FusionMethod::Swbf {
        let provider = provider.ok_or(FusionError::MissingProvider)?;
        for c in &candidates.candidates {
            match rescore(c, candidates.frame_index, provider) {
                Ok(d) => by_class.entry(d.class_id).or_default().push(d),
                Err(e) if e.drops_candidate() => dropped += 1,
                Err(e) => return Err(e.into()),
            }
        }
    } else {
        for c in &candidates.candidates {
            by_class.entry(c.detection.class_id).or_default().push(c.detection);
        }
    }

    let post = FusionConfig {
        post_threshold: -1.0,
        ..*cfg
    };
    let mut fused_before_threshold = 0;
    let mut out = Vec::new();
    for dets in by_class.values() {
        let all = fuse_class(dets, &post);
        fused_before_threshold += all.len();
        out.extend(all.into_iter().filter(|d| d.score() > cfg.post_threshold));
    }
    out.sort_by(|a, b| by_score_desc(a, b).then(a.class_id.cmp(&b.class_id)));
    Ok(FusedFrame {
        labels: LabelSet::new(candidates.frame_index, out),
        dropped_by_rescore: dropped,
        fused_before_threshold,
    })
}
