//! Bidirectional pseudo-label propagation: gathers the detector's own boxes on
//! a target frame plus boxes carried over from up to `k` past and `k` future
//! frames through composed motion.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::geometry::{BBox, Detection, FrameSize, LabelSet};
use crate::motion::{transfer_box, ComposedMotion, CompositionMode, MotionField};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BplpError {
    #[error("offset {offset} unavailable: missing flow {from}->{to}")]
    MissingFlow { offset: i32, from: usize, to: usize },
    #[error("offset {offset} unavailable: source frame outside the sequence")]
    MissingSource { offset: i32 },
    #[error("offset 0 cannot be propagated")]
    ZeroOffset,
}

/// Read-only access to the motion field mapping frame `from` to the
/// neighbouring frame `to` (`to = from ± 1`).
pub trait FlowSource: Sync {
    fn flow(&self, from: usize, to: usize) -> Option<&MotionField>;
}

/// In-memory flow graph keyed by (from, to).
#[derive(Debug, Clone, Default)]
pub struct FlowStore {
    fields: HashMap<(usize, usize), MotionField>,
}

impl FlowStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, from: usize, to: usize, field: MotionField) {
        self.fields.insert((from, to), field);
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

impl FlowSource for FlowStore {
    fn flow(&self, from: usize, to: usize) -> Option<&MotionField> {
        self.fields.get(&(from, to))
    }
}

/// Source frame and hop chain for one propagation offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetChain {
    pub offset: i32,
    pub source_frame: usize,
    /// (from, to) pairs in the order they are applied, source first.
    pub hops: Vec<(usize, usize)>,
}

/// Which offsets feed a target frame and through which flows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropagationPlan {
    pub target_frame: usize,
    pub k: usize,
    pub chains: Vec<OffsetChain>,
}

/// Offsets 1, -1, 2, -2, ..., k, -k.
pub fn offset_order(k: usize) -> impl Iterator<Item = i32> {
    (1..=k as i32).flat_map(|i| [i, -i])
}

/// Hop chain moving labels from frame `target - offset` onto `target`.
/// Positive offsets walk forward in time, negative ones backward.
pub fn chain_for_offset(target: usize, offset: i32, num_frames: usize) -> Result<OffsetChain, BplpError> {
    if offset == 0 {
        return Err(BplpError::ZeroOffset);
    }
    let source = target as i64 - offset as i64;
    if source < 0 || source >= num_frames as i64 || target >= num_frames {
        return Err(BplpError::MissingSource { offset });
    }
    let source = source as usize;
    let hops = if offset > 0 {
        (source..target).map(|f| (f, f + 1)).collect()
    } else {
        (target + 1..=source).rev().map(|f| (f, f - 1)).collect()
    };
    Ok(OffsetChain {
        offset,
        source_frame: source,
        hops,
    })
}

impl PropagationPlan {
    /// Plan for `target` in a sequence of `num_frames` frames. Offsets whose
    /// source frame or flows are missing are left out.
    pub fn build(target: usize, k: usize, num_frames: usize, flows: &dyn FlowSource) -> Self {
        let chains = offset_order(k)
            .filter_map(|i| chain_for_offset(target, i, num_frames).ok())
            .filter(|c| c.hops.iter().all(|&(f, t)| flows.flow(f, t).is_some()))
            .collect();
        Self {
            target_frame: target,
            k,
            chains,
        }
    }

    /// Distinct sources feeding the target, the target itself included.
    pub fn effective_sources(&self) -> usize {
        self.chains.len() + 1
    }
}

/// Knobs shared by propagation and candidate building.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    pub mode: CompositionMode,
    pub min_coverage: f64,
    pub teacher_threshold: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            mode: CompositionMode::Trajectory,
            min_coverage: 0.25,
            teacher_threshold: 0.4,
        }
    }
}

/// Moves every box of `source` onto the frame `offset` steps later.
///
/// Survivors carry `source_offset = offset` and keep the source score; the
/// second tuple member is the box's position on the source frame.
pub fn propagate_from_offset(
    offset: i32,
    source: &LabelSet,
    flows: &dyn FlowSource,
    size: FrameSize,
    mode: CompositionMode,
    min_coverage: f64,
) -> Result<Vec<(Detection, BBox)>, BplpError> {
    if offset == 0 {
        return Err(BplpError::ZeroOffset);
    }
    let target = source.frame_index as i64 + offset as i64;
    if target < 0 {
        return Err(BplpError::MissingSource { offset });
    }
    let target = target as usize;
    let hops: Vec<(usize, usize)> = if offset > 0 {
        (source.frame_index..target).map(|f| (f, f + 1)).collect()
    } else {
        (target + 1..=source.frame_index).rev().map(|f| (f, f - 1)).collect()
    };
    let mut fields = Vec::with_capacity(hops.len());
    for (from, to) in hops {
        let field = flows
            .flow(from, to)
            .ok_or(BplpError::MissingFlow { offset, from, to })?;
        fields.push(field);
    }
    let motion = ComposedMotion::new(fields, mode).map_err(|_| BplpError::MissingSource { offset })?;
    Ok(source
        .detections
        .iter()
        .filter_map(|d| transfer_box(d, &motion, size, min_coverage).map(|t| (t.with_offset(offset), d.bbox)))
        .collect())
}

/// A member of the candidate set together with where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub detection: Detection,
    /// Box on the source frame; equals `detection.bbox` for offset 0.
    pub source_bbox: BBox,
}

impl Candidate {
    pub fn offset(&self) -> i32 {
        self.detection.source_offset
    }

    pub fn source_frame(&self, target: usize) -> usize {
        (target as i64 - self.offset() as i64) as usize
    }
}

/// Union of the thresholded detector output on the target frame and all
/// propagated boxes. Duplicates are kept; fusion resolves them.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub frame_index: usize,
    pub candidates: Vec<Candidate>,
    pub effective_sources: usize,
}

impl CandidateSet {
    pub fn label_set(&self) -> LabelSet {
        LabelSet::new(
            self.frame_index,
            self.candidates.iter().map(|c| c.detection).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Candidate count per source offset.
    pub fn per_offset(&self) -> BTreeMap<i32, usize> {
        let mut counts = BTreeMap::new();
        for c in &self.candidates {
            *counts.entry(c.offset()).or_insert(0) += 1;
        }
        counts
    }
}

/// Builds the candidate set for `target` from per-frame detector output
/// (`labels[f]` holds frame `f`).
pub fn build_candidates(
    target: usize,
    k: usize,
    labels: &[LabelSet],
    flows: &dyn FlowSource,
    size: FrameSize,
    cfg: &PropagationConfig,
) -> CandidateSet {
    let plan = PropagationPlan::build(target, k, labels.len(), flows);
    build_from_plan(&plan, labels, flows, size, cfg)
}

pub fn build_from_plan(
    plan: &PropagationPlan,
    labels: &[LabelSet],
    flows: &dyn FlowSource,
    size: FrameSize,
    cfg: &PropagationConfig,
) -> CandidateSet {
    let target = plan.target_frame;
    let mut candidates: Vec<Candidate> = labels
        .get(target)
        .map(|l| l.above(cfg.teacher_threshold).detections)
        .unwrap_or_default()
        .into_iter()
        .map(|d| Candidate {
            detection: d.with_offset(0),
            source_bbox: d.bbox,
        })
        .collect();

    for chain in &plan.chains {
        let source = labels[chain.source_frame].above(cfg.teacher_threshold);
        // The plan only lists offsets with a complete chain.
        let moved = propagate_from_offset(chain.offset, &source, flows, size, cfg.mode, cfg.min_coverage)
            .expect("plan chains are complete");
        candidates.extend(moved.into_iter().map(|(detection, source_bbox)| Candidate {
            detection,
            source_bbox,
        }));
    }

    CandidateSet {
        frame_index: target,
        candidates,
        effective_sources: plan.effective_sources(),
    }
}
