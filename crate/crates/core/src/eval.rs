//! COCO-style average precision and the forward/backward motion
//! self-consistency check.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::bplp::FlowSource;
use crate::geometry::{clip_to_frame, iou, BBox, FrameSize, LabelSet};
use crate::motion::{transfer_box, transfer_hull, ComposedMotion, CompositionMode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("detections use classes missing from the ground-truth vocabulary: {}", .0.join(", "))]
    UnknownClasses(Vec<String>),
    #[error("missing flow {from}->{to}")]
    MissingFlow { from: usize, to: usize },
    #[error("k_hops must be >= 1")]
    NoHops,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Recall grid 0.00, 0.01, ..., 1.00.
pub fn recall_grid() -> [f64; 101] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

/// One scored detection of a single class on some frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub frame: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// Raw (recall, precision) after each detection, precision replaced by
    /// its running maximum from the right.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Average precision of one class at one IoU threshold.
///
/// Detections are visited by descending score (stable on ties); each claims
/// the unmatched ground truth on its frame with the highest IoU at or above
/// `iou_thr`, lowest index on ties. Precision is max-interpolated and read
/// off at 101 recall points. Returns `None` when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> Option<PrCurve> {
    if gts.is_empty() {
        return None;
    }
    let mut gt_by_frame: BTreeMap<usize, Vec<(usize, BBox)>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        gt_by_frame.entry(g.frame).or_default().push((i, g.bbox));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_frame.get(&d.frame) {
            for &(gi, gb) in cands {
                if matched[gi] {
                    continue;
                }
                let o = iou(&d.bbox, &gb);
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(tp as f64 / gts.len() as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }

    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }

    let grid = recall_grid();
    let mut sum = 0.0;
    for r in grid {
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    let ap = sum / grid.len() as f64;
    Some(PrCurve {
        points: recall.into_iter().zip(precision).collect(),
        ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class: String,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mAP50")]
    pub map50: f64,
    #[serde(rename = "mAP75")]
    pub map75: f64,
    pub per_class_ap50: Vec<ClassAp>,
}

impl EvalReport {
    /// Header and one row: mAP, mAP50, mAP75, then AP50 per class.
    pub fn to_csv(&self) -> String {
        let mut head = vec!["mAP".to_string(), "mAP50".into(), "mAP75".into()];
        let mut row = vec![
            format!("{:.6}", self.map),
            format!("{:.6}", self.map50),
            format!("{:.6}", self.map75),
        ];
        for c in &self.per_class_ap50 {
            head.push(c.class.clone());
            row.push(format!("{:.6}", c.ap50));
        }
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

/// Scores detections against ground truth. `class_names[id]` names class
/// `id`; every detection class must be present in the ground truth.
/// Classes without ground truth are left out of the means.
pub fn evaluate(dets: &[LabelSet], gts: &[LabelSet], class_names: &[String]) -> Result<EvalReport, EvalError> {
    let mut gt_by_class: BTreeMap<u32, Vec<GroundTruth>> = BTreeMap::new();
    for ls in gts {
        for d in &ls.detections {
            gt_by_class.entry(d.class_id).or_default().push(GroundTruth {
                frame: ls.frame_index,
                bbox: d.bbox,
            });
        }
    }
    let mut det_by_class: BTreeMap<u32, Vec<ScoredBox>> = BTreeMap::new();
    for ls in dets {
        for d in &ls.detections {
            det_by_class.entry(d.class_id).or_default().push(ScoredBox {
                frame: ls.frame_index,
                bbox: d.bbox,
                score: d.score(),
            });
        }
    }
    let name = |id: u32| {
        class_names
            .get(id as usize)
            .cloned()
            .unwrap_or_else(|| format!("class#{id}"))
    };
    let unknown: Vec<String> = det_by_class
        .keys()
        .filter(|c| !gt_by_class.contains_key(c))
        .map(|&c| name(c))
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownClasses(unknown));
    }

    let thresholds = coco_iou_thresholds();
    let mut per_class = Vec::new();
    let (mut sum_all, mut sum50, mut sum75) = (0.0, 0.0, 0.0);
    for (&class, g) in &gt_by_class {
        let d = det_by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision(d, g, t).map(|c| c.ap).unwrap_or(0.0))
            .collect();
        sum_all += aps.iter().sum::<f64>() / aps.len() as f64;
        sum50 += aps[0];
        sum75 += aps[5];
        per_class.push(ClassAp {
            class: name(class),
            ap50: aps[0],
        });
    }
    let n = gt_by_class.len();
    let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EvalReport {
        map: mean(sum_all),
        map50: mean(sum50),
        map75: mean(sum75),
        per_class_ap50: per_class,
    })
}

pub const PMF_BINS: usize = 20;
pub const PMF_BIN_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxConsistency {
    pub class: u32,
    pub original: [f64; 4],
    pub reconstructed: Option<[f64; 4]>,
    pub iou: f64,
    /// The box was dropped or cut by the frame border on the way.
    pub left_frame: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub frame: usize,
    pub hops: usize,
    pub boxes: Vec<BoxConsistency>,
    pub mean_iou: f64,
    pub per_class_mean_iou: BTreeMap<u32, f64>,
    /// Fraction of boxes per IoU bin of width 0.05; IoU 1 falls in the last bin.
    pub pmf: Vec<f64>,
    /// Among IoU = 0 boxes: share that left the frame.
    pub out_of_frame_given_zero: Option<f64>,
    /// Among IoU = 0 boxes: share with original height <= `small_height`.
    pub small_given_zero: Option<f64>,
    pub small_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyConfig {
    pub hops: usize,
    pub mode: CompositionMode,
    pub min_coverage: f64,
    pub small_height: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            hops: 1,
            mode: CompositionMode::Trajectory,
            min_coverage: 0.25,
            small_height: 45.0,
        }
    }
}

/// Moves each box of `labels` forward `hops` frames and back again and
/// scores the round trip by IoU with the original. Lost boxes score 0.
pub fn self_consistency(
    labels: &LabelSet,
    flows: &dyn FlowSource,
    size: FrameSize,
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyReport, EvalError> {
    if cfg.hops == 0 {
        return Err(EvalError::NoHops);
    }
    let t = labels.frame_index;
    let fetch = |from: usize, to: usize| flows.flow(from, to).ok_or(EvalError::MissingFlow { from, to });
    let forward: Vec<_> = (t..t + cfg.hops).map(|f| fetch(f, f + 1)).collect::<Result<_, _>>()?;
    let backward: Vec<_> = (t + 1..=t + cfg.hops).rev().map(|f| fetch(f, f - 1)).collect::<Result<_, _>>()?;
    let forward = ComposedMotion::new(forward, cfg.mode).expect("non-empty chain of one frame size");
    let backward = ComposedMotion::new(backward, cfg.mode).expect("non-empty chain of one frame size");

    let mut boxes = Vec::with_capacity(labels.len());
    for d in &labels.detections {
        let hull = transfer_hull(&d.bbox, &forward);
        let left_frame = hull.is_none_or(|h| !size.bounds().contains(&h));
        let there = hull
            .and_then(|h| clip_to_frame(&h, size))
            .filter(|&(_, coverage)| coverage >= cfg.min_coverage)
            .map(|(b, _)| d.with_bbox(b));
        let back = there.and_then(|m| transfer_box(&m, &backward, size, cfg.min_coverage));
        let score = back.map(|b| iou(&d.bbox, &b.bbox)).unwrap_or(0.0);
        boxes.push(BoxConsistency {
            class: d.class_id,
            original: d.bbox.corners(),
            reconstructed: back.map(|b| b.bbox.corners()),
            iou: score,
            left_frame,
        });
    }

    let n = boxes.len();
    let mean_iou = if n == 0 { 0.0 } else { boxes.iter().map(|b| b.iou).sum::<f64>() / n as f64 };
    let mut class_sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut pmf = vec![0.0; PMF_BINS];
    for b in &boxes {
        let e = class_sums.entry(b.class).or_insert((0.0, 0));
        e.0 += b.iou;
        e.1 += 1;
        pmf[iou_bin(b.iou)] += 1.0;
    }
    if n > 0 {
        for p in &mut pmf {
            *p /= n as f64;
        }
    }
    let zeros: Vec<(&BoxConsistency, f64)> = boxes
        .iter()
        .filter(|b| b.iou == 0.0)
        .map(|b| (b, b.original[3] - b.original[1]))
        .collect();
    let frac = |pred: &dyn Fn(&(&BoxConsistency, f64)) -> bool| {
        if zeros.is_empty() {
            None
        } else {
            Some(zeros.iter().filter(|z| pred(z)).count() as f64 / zeros.len() as f64)
        }
    };
    Ok(ConsistencyReport {
        frame: t,
        hops: cfg.hops,
        out_of_frame_given_zero: frac(&|z| z.0.left_frame),
        small_given_zero: frac(&|z| z.1 <= cfg.small_height),
        small_height: cfg.small_height,
        per_class_mean_iou: class_sums.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect(),
        boxes,
        mean_iou,
        pmf,
    })
}

pub fn iou_bin(v: f64) -> usize {
    ((v / PMF_BIN_WIDTH).floor() as usize).min(PMF_BINS - 1)
}
