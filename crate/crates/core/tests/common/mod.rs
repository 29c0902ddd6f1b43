//! Reference implementations for the tests. They work on plain arrays and
//! share no code with the library.
#![allow(dead_code, clippy::needless_range_loop)]

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Boxf = [f64; 4];

/// Area-based IoU on raw corners.
pub fn iou_ref(a: &Boxf, b: &Boxf) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if a == b {
        1.0
    } else if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of integer boxes by counting unit cells.
pub fn pixel_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let (lo_x, hi_x) = (a[0].min(b[0]), a[2].max(b[2]));
    let (lo_y, hi_y) = (a[1].min(b[1]), a[3].max(b[3]));
    let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefBox {
    pub bbox: Boxf,
    pub score: f64,
}

fn lex(a: &Boxf, b: &Boxf) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Indices by descending score; equal scores by corners, then position.
fn descending(boxes: &[RefBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&i, &j| {
        boxes[j]
            .score
            .partial_cmp(&boxes[i].score)
            .unwrap()
            .then(lex(&boxes[i].bbox, &boxes[j].bbox))
            .then(i.cmp(&j))
    });
    idx
}

/// Weighted boxes fusion, step by step: sorted list B, cluster list L and
/// fused list F; each box joins the first fused box it overlaps by more than
/// `thr`, after which that fused box is recomputed from its whole cluster.
/// Scores are finally scaled by min(T, n) / n.
pub fn wbf_ref(boxes: &[RefBox], thr: f64, n: usize) -> Vec<RefBox> {
    let sorted: Vec<RefBox> = descending(boxes).into_iter().map(|i| boxes[i]).collect();
    let mut l: Vec<Vec<RefBox>> = Vec::new();
    let mut f: Vec<RefBox> = Vec::new();
    for b in sorted {
        let mut found = None;
        for (r, fused) in f.iter().enumerate() {
            if iou_ref(&fused.bbox, &b.bbox) > thr {
                found = Some(r);
                break;
            }
        }
        match found {
            None => {
                l.push(vec![b]);
                f.push(b);
            }
            Some(r) => {
                l[r].push(b);
                let members = &l[r];
                let mut score_sum = 0.0;
                for m in members {
                    score_sum += m.score;
                }
                let mut pos = [0.0; 4];
                for k in 0..4 {
                    let mut num = 0.0;
                    for m in members {
                        num += m.score * m.bbox[k];
                    }
                    pos[k] = num / score_sum;
                }
                f[r] = RefBox {
                    bbox: pos,
                    score: score_sum / members.len() as f64,
                };
            }
        }
    }
    f.iter()
        .zip(&l)
        .map(|(fused, members)| {
            let t = members.len();
            let score = if t >= n { fused.score } else { fused.score * t as f64 / n as f64 };
            RefBox { bbox: fused.bbox, score }
        })
        .collect()
}

/// Textbook greedy NMS.
pub fn nms_ref(boxes: &[RefBox], thr: f64) -> Vec<RefBox> {
    let mut rest: Vec<RefBox> = descending(boxes).into_iter().map(|i| boxes[i]).collect();
    let mut keep = Vec::new();
    while !rest.is_empty() {
        let top = rest.remove(0);
        rest.retain(|b| iou_ref(&top.bbox, &b.bbox) <= thr);
        keep.push(top);
    }
    keep
}

/// Gaussian Soft-NMS with removal at or below `floor`.
pub fn soft_nms_ref(boxes: &[RefBox], sigma: f64, floor: f64) -> Vec<RefBox> {
    let mut pool: Vec<(usize, RefBox)> = boxes.iter().copied().enumerate().collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            let better = a.1.score > b.1.score
                || (a.1.score == b.1.score && (lex(&a.1.bbox, &b.1.bbox) == Ordering::Less
                    || (lex(&a.1.bbox, &b.1.bbox) == Ordering::Equal && a.0 < b.0)));
            if better {
                best = i;
            }
        }
        let (_, top) = pool.remove(best);
        out.push(top);
        for e in pool.iter_mut() {
            let o = iou_ref(&top.bbox, &e.1.bbox);
            e.1.score *= (-(o * o) / sigma).exp();
        }
        pool.retain(|e| e.1.score > floor);
    }
    out
}

/// Boxes scattered around a few centres so that clusters actually form.
pub fn random_instance(rng: &mut ChaCha8Rng, max_boxes: usize) -> Vec<RefBox> {
    let n = rng.random_range(1..=max_boxes);
    let centres: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(0.0..200.0),
                rng.random_range(0.0..200.0),
                rng.random_range(8.0..60.0),
                rng.random_range(8.0..60.0),
            )
        })
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy, w, h) = centres[rng.random_range(0..centres.len())];
            let j = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-0.15..0.15) * s;
            let x1 = cx + j(rng, w);
            let y1 = cy + j(rng, h);
            let x2 = x1 + w * rng.random_range(0.8..1.2);
            let y2 = y1 + h * rng.random_range(0.8..1.2);
            let score = if rng.random_bool(0.1) { 0.5 } else { rng.random_range(0.01..1.0) };
            RefBox { bbox: [x1, y1, x2, y2], score }
        })
        .collect()
}

/// Largest corner difference and whether all scores match exactly, pairing
/// boxes in output order.
pub fn compare(got: &[RefBox], want: &[RefBox]) -> Result<f64, String> {
    if got.len() != want.len() {
        return Err(format!("{} boxes, expected {}", got.len(), want.len()));
    }
    let mut worst: f64 = 0.0;
    for (g, w) in got.iter().zip(want) {
        if g.score != w.score {
            return Err(format!("score {} != {}", g.score, w.score));
        }
        for k in 0..4 {
            worst = worst.max((g.bbox[k] - w.bbox[k]).abs());
        }
    }
    Ok(worst)
}

/// Ground truth / detection pair for the AP oracle.
#[derive(Debug, Clone, Copy)]
pub struct RefDet {
    pub frame: usize,
    pub bbox: Boxf,
    pub score: f64,
}

/// Average precision at one IoU threshold. Precision at each of the 101
/// recall levels is the largest precision among operating points whose
/// recall reaches that level (0 if none does).
pub fn ap_ref(dets: &[RefDet], gts: &[(usize, Boxf)], thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for i in order {
        let d = dets[i];
        let mut pick: Option<usize> = None;
        let mut pick_iou = 0.0;
        for (g, (f, gb)) in gts.iter().enumerate() {
            if *f != d.frame || used[g] {
                continue;
            }
            let o = iou_ref(&d.bbox, gb);
            if o >= thr && (pick.is_none() || o > pick_iou) {
                pick = Some(g);
                pick_iou = o;
            }
        }
        if let Some(g) = pick {
            used[g] = true;
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        points.push((tp / gts.len() as f64, tp / (tp + fp)));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let mut best: f64 = 0.0;
        for &(rec, prec) in &points {
            if rec >= r {
                best = best.max(prec);
            }
        }
        total += best;
    }
    total / 101.0
}
