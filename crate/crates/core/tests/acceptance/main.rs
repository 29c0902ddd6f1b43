//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#[path = "../common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::{ap_ref, nms_ref, random_instance, wbf_ref, Boxf, RefBox, RefDet};
use propfuse::bplp::{Candidate, CandidateSet};
use propfuse::eval::{coco_iou_thresholds, evaluate, self_consistency, ConsistencyConfig, PMF_BINS};
use propfuse::fusion::{fuse, fuse_class, FusionConfig, FusionMethod};
use propfuse::geometry::{iou, BBox, Detection, FrameSize, LabelSet};
use propfuse::motion::{read_flow, write_flow, FlowError, MotionField};
use propfuse::pipeline::{ablate, run_pipeline, write_output, PipelineConfig, RunOptions, Sequence};
use propfuse::similarity::{rescore, FeatureVector, PrecomputedEmbeddings};
use propfuse::synth::{generate, presets, write_bundle, BackgroundSpec, Keyframe, NoiseSpec, ObjectSpec, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POSITION_TOL: f64 = 1e-9;
const TYPE_B_TOL: f64 = 1e-9;
const PMF_TOL: f64 = 1e-9;
const AP_TOL: f64 = 1e-6;
const MIN_RECOVERY_IOU: f64 = 0.9;
const MIN_FRACTIONAL_SELF_IOU: f64 = 0.9;
const ORACLE_BUDGET_S: f64 = 10.0;
const ABLATION_BUDGET_S: f64 = 60.0;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn to_det(class: u32, b: &RefBox) -> Detection {
    Detection::new(class, BBox::from_array(b.bbox).unwrap(), b.score).unwrap()
}

fn to_ref(d: &Detection) -> RefBox {
    RefBox {
        bbox: d.bbox.corners(),
        score: d.score(),
    }
}

fn cosine_ref(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y);
    let na: f64 = a.iter().fold(0.0, |s, x| s + x * x);
    let nb: f64 = b.iter().fold(0.0, |s, x| s + x * x);
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

fn fusion_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut boxes = 0usize;
    for case in 0..1000 {
        let classes = rng.random_range(1..=3u32);
        let n = rng.random_range(1..=5usize);
        let per_class: Vec<Vec<RefBox>> = (0..classes).map(|_| random_instance(&mut rng, 8)).collect();
        boxes += per_class.iter().map(Vec::len).sum::<usize>();
        let cfg = |method| FusionConfig {
            method,
            num_sources: n,
            post_threshold: 0.0,
            ..FusionConfig::default()
        };

        for (c, inst) in per_class.iter().enumerate() {
            let dets: Vec<Detection> = inst.iter().map(|b| to_det(c as u32, b)).collect();
            let got: Vec<RefBox> = fuse_class(&dets, &cfg(FusionMethod::Wbf)).iter().map(to_ref).collect();
            let want: Vec<RefBox> = wbf_ref(inst, 0.5, n).into_iter().filter(|b| b.score > 0.0).collect();
            worst = worst.max(common::compare(&got, &want).map_err(|e| format!("case {case} wbf: {e}"))?);
            let got: Vec<RefBox> = fuse_class(&dets, &cfg(FusionMethod::Nms)).iter().map(to_ref).collect();
            let want = nms_ref(inst, 0.5);
            worst = worst.max(common::compare(&got, &want).map_err(|e| format!("case {case} nms: {e}"))?);
        }

        // SWBF on a whole frame: random offsets and embeddings.
        let target = 10usize;
        let mut table = PrecomputedEmbeddings::new();
        let mut cands = Vec::new();
        let mut rescored: Vec<Vec<RefBox>> = vec![Vec::new(); classes as usize];
        for (c, inst) in per_class.iter().enumerate() {
            for b in inst {
                let offset: i32 = rng.random_range(-2..=2);
                let bbox = BBox::from_array(b.bbox).unwrap();
                let src = bbox.translate(rng.random_range(-3.0..3.0), 0.0).unwrap();
                let mut score = b.score;
                if offset != 0 {
                    let va: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
                    let vb: Vec<f64> = if rng.random_bool(0.2) { va.clone() } else { (0..6).map(|_| rng.random_range(0.01..1.0)).collect() };
                    score *= cosine_ref(&va, &vb);
                    table.insert(target, &bbox, FeatureVector::new(va).unwrap());
                    table.insert((target as i32 - offset) as usize, &src, FeatureVector::new(vb).unwrap());
                }
                rescored[c].push(RefBox { bbox: b.bbox, score });
                cands.push(Candidate {
                    detection: to_det(c as u32, b).with_offset(offset),
                    source_bbox: src,
                });
            }
        }
        // Embedding keys are rounded, so colliding boxes would share vectors.
        let distinct = {
            let mut keys: Vec<[i64; 4]> = cands.iter().flat_map(|c| [c.detection.bbox, c.source_bbox]).map(|b| b.corners().map(|x| (x * 100.0).round() as i64)).collect();
            keys.sort();
            keys.windows(2).all(|w| w[0] != w[1])
        };
        if !distinct {
            continue;
        }
        let set = CandidateSet {
            frame_index: target,
            candidates: cands,
            effective_sources: n,
        };
        let out = fuse(&set, &cfg(FusionMethod::Swbf), Some(&table)).map_err(|e| format!("case {case} swbf: {e}"))?;
        for (c, inst) in rescored.iter().enumerate() {
            let got: Vec<RefBox> = out.labels.detections.iter().filter(|d| d.class_id == c as u32).map(to_ref).collect();
            let mut want: Vec<RefBox> = wbf_ref(inst, 0.5, n).into_iter().filter(|b| b.score > 0.0).collect();
            want.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.bbox.iter().zip(&b.bbox).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
            });
            worst = worst.max(common::compare(&got, &want).map_err(|e| format!("case {case} swbf class {c}: {e}"))?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= POSITION_TOL, || format!("position error {worst:e}"))?;
    ensure(secs < ORACLE_BUDGET_S, || format!("took {secs:.2}s"))?;
    Ok(format!("1000 instances, {boxes} boxes, max position error {worst:e}, scores exact, {secs:.2}s"))
}

fn rescale_arithmetic() -> Outcome {
    let cfg = FusionConfig {
        method: FusionMethod::Wbf,
        num_sources: 3,
        post_threshold: 0.0,
        ..FusionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let s: f64 = rng.random_range(0.0..=1.0);
        let d = Detection::new(0, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), s).unwrap();
        let out = fuse_class(&[d], &cfg);
        ensure(out.len() == 1 && out[0].score() == s / 3.0, || format!("single box {s}: {:?}", out.first().map(|d| d.score())))?;
        for members in 3..=5usize {
            let scores: Vec<f64> = (0..members).map(|_| rng.random_range(0.01..=1.0)).collect();
            let ds: Vec<Detection> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Detection::new(0, BBox::new(i as f64 * 0.1, 0.0, 10.0 + i as f64 * 0.1, 10.0).unwrap(), s).unwrap())
                .collect();
            let out = fuse_class(&ds, &cfg);
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mean = sorted.iter().fold(0.0, |a, b| a + b) / members as f64;
            ensure(out.len() == 1 && out[0].score() == mean, || format!("{members} members: {:?} vs mean {mean}", out[0].score()))?;
        }
    }
    Ok("1000 single-member clusters scaled by exactly 1/3; 3000 clusters of 3-5 members unchanged".into())
}

fn rescore_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut equal, mut lower) = (0, 0);
    for i in 0..10_000usize {
        let dim = rng.random_range(2..=32);
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..=1.0)).collect();
        let parallel = rng.random_bool(0.3);
        let b: Vec<f64> = if parallel {
            let scale = 0.5f64.powi(rng.random_range(0..4));
            a.iter().map(|x| x * scale).collect()
        } else {
            (0..dim).map(|_| rng.random_range(0.0..=1.0)).collect()
        };
        if a.iter().all(|&x| x == 0.0) || b.iter().all(|&x| x == 0.0) {
            continue;
        }
        let score: f64 = rng.random_range(0.001..=1.0);
        let offset = [-2, -1, 1, 2][i % 4];
        let here = BBox::new(i as f64, 0.0, i as f64 + 10.0, 10.0).unwrap();
        let there = here.translate(1.0, 1.0).unwrap();
        let mut table = PrecomputedEmbeddings::new();
        table.insert(5, &here, FeatureVector::new(a).unwrap());
        table.insert((5 - offset) as usize, &there, FeatureVector::new(b).unwrap());
        let c = Candidate {
            detection: Detection::new(0, here, score).unwrap().with_offset(offset),
            source_bbox: there,
        };
        let out = rescore(&c, 5, &table).map_err(|e| e.to_string())?.score();
        ensure(out <= score, || format!("candidate {i}: {out} > {score}"))?;
        ensure((out == score) == parallel, || format!("candidate {i}: parallel={parallel} but {out} vs {score}"))?;
        if parallel {
            equal += 1;
        } else {
            lower += 1;
        }
    }
    Ok(format!("{equal} parallel pairs kept their score, {lower} others strictly lower, 0 violations"))
}

fn teacher_lines(path: &Path, threshold: f64) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["score"].as_f64().unwrap() > threshold
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

fn k_zero_passthrough(tmp: &Path) -> Outcome {
    let mut crowded = presets::benchmark(40, 21);
    crowded.noise.fp_rate = 3.0;
    crowded.noise.jitter_sigma = 3.0;
    let scenes = [
        ("occlusion", presets::occlusion()),
        ("type-b", presets::type_b()),
        ("benchmark", presets::benchmark(60, 1)),
        ("crowded", crowded),
    ];
    let mut files = 0;
    for (name, spec) in scenes {
        let dir = tmp.join(format!("k0-{name}"));
        let manifest = write_bundle(&generate(&spec).map_err(|e| e.to_string())?, &dir).map_err(|e| e.to_string())?;
        let seq = Sequence::load(dir.join("manifest.json")).map_err(|e| e.to_string())?;
        for method in FusionMethod::ALL {
            let cfg = PipelineConfig {
                k: 0,
                method,
                post_threshold: 0.0,
                ..PipelineConfig::default()
            };
            let targets: Vec<usize> = (0..seq.len()).collect();
            let mut out = run_pipeline(&seq, &cfg, &targets, RunOptions::default()).map_err(|e| e.to_string())?;
            let out_dir = tmp.join(format!("k0-{name}-{method}"));
            write_output(&mut out, &seq.vocab, &out_dir, false).map_err(|e| e.to_string())?;
            for f in &manifest.frames {
                let want = teacher_lines(&dir.join(&f.detections), cfg.teacher_threshold);
                let got = fs::read_to_string(out_dir.join(format!("frame_{:06}.jsonl", f.index))).unwrap();
                ensure(got == want, || format!("{name}/{method} frame {} differs", f.index))?;
                files += 1;
            }
        }
    }
    Ok(format!("{files} output files byte-identical to teacher lines with score > 0.4 (4 scenes x 5 methods)"))
}

fn type_a_recovery() -> Outcome {
    let bundle = generate(&presets::occlusion()).map_err(|e| e.to_string())?;
    let missed = 2;
    ensure(bundle.detections[missed].is_empty() && !bundle.detections[missed - 1].is_empty() && !bundle.detections[missed + 1].is_empty(), || {
        "scene does not have the miss pattern".into()
    })?;
    let seq = Sequence::from_bundle(&bundle);
    let targets: Vec<usize> = (0..seq.len()).collect();
    let out = run_pipeline(&seq, &PipelineConfig::default(), &targets, RunOptions::default()).map_err(|e| e.to_string())?;
    let gt_box = bundle.gt[missed].detections[0].bbox;
    let best = out.labels[missed].detections.iter().map(|d| iou(&d.bbox, &gt_box)).fold(0.0, f64::max);
    ensure(best >= MIN_RECOVERY_IOU, || format!("best IoU at the missed frame {best:.4}"))?;
    let names = seq.vocab.names();
    let teacher: Vec<LabelSet> = bundle.detections.iter().map(|l| l.above(0.4)).collect();
    let fused = evaluate(&out.labels, &bundle.gt, names).map_err(|e| e.to_string())?;
    let base = evaluate(&teacher, &bundle.gt, names).map_err(|e| e.to_string())?;
    ensure(fused.map50 > base.map50, || format!("fused mAP50 {} vs teacher {}", fused.map50, base.map50))?;
    Ok(format!("IoU {best:.4} at the missed frame; mAP50 {:.4} fused vs {:.4} teacher", fused.map50, base.map50))
}

fn type_b_suppression() -> Outcome {
    let spec = presets::type_b();
    let injected = BBox::from_array(spec.injected[0].bbox).unwrap();
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let hits: Vec<usize> = bundle
        .detections
        .iter()
        .filter(|l| l.detections.iter().any(|d| iou(&d.bbox, &injected) > 0.5))
        .map(|l| l.frame_index)
        .collect();
    ensure(hits == [2], || format!("injected box found on frames {hits:?}"))?;
    let seq = Sequence::from_bundle(&bundle);
    let targets: Vec<usize> = (0..seq.len()).collect();
    let open = PipelineConfig {
        post_threshold: 0.0,
        ..PipelineConfig::default()
    };
    let out = run_pipeline(&seq, &open, &[2], RunOptions::default()).map_err(|e| e.to_string())?;
    let fused: Vec<f64> = out.labels[0].detections.iter().filter(|d| iou(&d.bbox, &injected) > 0.5).map(|d| d.score()).collect();
    ensure(fused.len() == 1 && (fused[0] - 0.8 / 3.0).abs() <= TYPE_B_TOL, || format!("fused scores {fused:?}"))?;
    let strict = PipelineConfig {
        post_threshold: 0.3,
        ..PipelineConfig::default()
    };
    let out = run_pipeline(&seq, &strict, &targets, RunOptions::default()).map_err(|e| e.to_string())?;
    let left: usize = out.labels.iter().map(|l| l.detections.iter().filter(|d| iou(&d.bbox, &injected) > 0.0).count()).sum();
    ensure(left == 0, || format!("{left} boxes near the injected one survive post_threshold 0.3"))?;
    let kept: usize = out.labels.iter().map(LabelSet::len).sum();
    ensure(kept == seq.len(), || format!("{kept} boxes kept, expected one car per frame"))?;
    Ok(format!("fused score {:.9} (0.8/3 = {:.9}); removed at post_threshold 0.3 on every frame", fused[0], 0.8 / 3.0))
}

/// Objects on a 4 x 2 grid of cells large enough that they never touch;
/// heights 40 to 145 px.
fn consistency_scene(velocities: &[(f64, f64)], seed: u64) -> SceneSpec {
    let length = 8;
    let objects = velocities
        .iter()
        .enumerate()
        .map(|(i, &(vx, vy))| {
            let x = 180.0 * (i % 4) as f64 + 30.0;
            let y = 200.0 * (i / 4) as f64 + 25.0;
            ObjectSpec {
                class: if i % 2 == 0 { "car".into() } else { "person".into() },
                size: [40.0 + 10.0 * i as f64, 40.0 + 15.0 * i as f64],
                trajectory: vec![
                    Keyframe { t: 0, x, y },
                    Keyframe {
                        t: length - 1,
                        x: x + vx * (length - 1) as f64,
                        y: y + vy * (length - 1) as f64,
                    },
                ],
                color: [200, 120, 40],
                occluded: Vec::new(),
            }
        })
        .collect();
    SceneSpec {
        width: 720,
        height: 400,
        length,
        seed,
        classes: vec!["car".into(), "person".into()],
        objects,
        background: BackgroundSpec::default(),
        noise: NoiseSpec::default(),
        injected: Vec::new(),
        min_coverage: 0.25,
        color: false,
        embeddings: false,
    }
}

/// Mean round-trip IoU over every box of every frame that has `hops`
/// frames after it, and the largest deviation of a PMF sum from 1.
fn pooled_self_consistency(spec: &SceneSpec, hops: usize) -> Result<(f64, f64, usize), String> {
    let bundle = generate(spec).map_err(|e| e.to_string())?;
    let flows = bundle.flow_store();
    let mut ious = Vec::new();
    let mut worst_pmf: f64 = 0.0;
    let cfg = ConsistencyConfig {
        hops,
        ..ConsistencyConfig::default()
    };
    for t in 0..bundle.len() - hops {
        let r = self_consistency(&bundle.gt[t], &flows, bundle.size, &cfg).map_err(|e| e.to_string())?;
        if r.pmf.len() != PMF_BINS {
            return Err("pmf has the wrong number of bins".into());
        }
        worst_pmf = worst_pmf.max((r.pmf.iter().sum::<f64>() - 1.0).abs());
        ious.extend(r.boxes.iter().map(|b| b.iou));
    }
    Ok((ious.iter().sum::<f64>() / ious.len() as f64, worst_pmf, ious.len()))
}

fn self_consistency_check() -> Outcome {
    let fractional = [(1.3, 0.7), (2.5, -1.25), (-1.7, 0.45), (0.6, 1.9), (-2.35, -0.8), (3.1, 0.15), (0.55, -1.6), (-0.9, 2.2)];
    let integer = [(1.0, 0.0), (2.0, -1.0), (-3.0, 1.0), (0.0, 2.0), (-1.0, -2.0), (3.0, 1.0), (1.0, -1.0), (-2.0, 2.0)];
    let frac_scene = consistency_scene(&fractional, 1);
    let int_scene = consistency_scene(&integer, 2);
    let (frac_mean, frac_pmf, n1) = pooled_self_consistency(&frac_scene, 1)?;
    let (int_mean, int_pmf, n2) = pooled_self_consistency(&int_scene, 1)?;
    let (int_mean3, int_pmf3, _) = pooled_self_consistency(&int_scene, 3)?;
    ensure(frac_mean >= MIN_FRACTIONAL_SELF_IOU, || format!("fractional mean IoU {frac_mean:.4}"))?;
    ensure(int_mean == 1.0 && int_mean3 == 1.0, || format!("integer mean IoU {int_mean} (1 hop), {int_mean3} (3 hops)"))?;
    let pmf = frac_pmf.max(int_pmf).max(int_pmf3);
    ensure(pmf <= PMF_TOL, || format!("pmf sums off by {pmf:e}"))?;
    Ok(format!(
        "fractional mean IoU {frac_mean:.4} over {n1} boxes; integer mean IoU exactly 1 over {n2} boxes (also at 3 hops); pmf sums within {pmf:e}"
    ))
}

fn ref_map(dets: &[(u32, RefDet)], gts: &[(u32, usize, Boxf)], classes: u32) -> (f64, f64, f64) {
    let mut sums = (0.0, 0.0, 0.0);
    let mut counted = 0;
    for c in 0..classes {
        let g: Vec<(usize, Boxf)> = gts.iter().filter(|x| x.0 == c).map(|x| (x.1, x.2)).collect();
        if g.is_empty() {
            continue;
        }
        counted += 1;
        let d: Vec<RefDet> = dets.iter().filter(|x| x.0 == c).map(|x| x.1).collect();
        let aps: Vec<f64> = coco_iou_thresholds().iter().map(|&t| ap_ref(&d, &g, t)).collect();
        sums.0 += aps.iter().sum::<f64>() / 10.0;
        sums.1 += aps[0];
        sums.2 += aps[5];
    }
    let n = counted as f64;
    (sums.0 / n, sums.1 / n, sums.2 / n)
}

fn to_sets(items: impl Iterator<Item = (u32, usize, Boxf, f64)>) -> Vec<LabelSet> {
    let mut frames: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for (c, f, b, s) in items {
        frames.entry(f).or_default().push(Detection::new(c, BBox::from_array(b).unwrap(), s).unwrap());
    }
    frames.into_iter().map(|(f, d)| LabelSet::new(f, d)).collect()
}

fn map_check(gts: &[(u32, usize, Boxf)], dets: &[(u32, RefDet)], classes: u32) -> Result<(f64, f64, f64), String> {
    let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
    let g = to_sets(gts.iter().map(|&(c, f, b)| (c, f, b, 1.0)));
    let d = to_sets(dets.iter().map(|&(c, r)| (c, r.frame, r.bbox, r.score)));
    let got = evaluate(&d, &g, &names).map_err(|e| e.to_string())?;
    // Detections arrive grouped by frame; equal scores keep that order.
    let mut by_frame = dets.to_vec();
    by_frame.sort_by_key(|d| d.1.frame);
    let want = ref_map(&by_frame, gts, classes);
    let diff = (got.map - want.0).abs().max((got.map50 - want.1).abs()).max((got.map75 - want.2).abs());
    ensure(diff <= AP_TOL, || format!("evaluator {:?} vs oracle {want:?}", (got.map, got.map50, got.map75)))?;
    Ok((got.map, got.map50, got.map75))
}

fn map_evaluator() -> Outcome {
    let rd = |frame, bbox: Boxf, score| RefDet { frame, bbox, score };
    let gts: Vec<(u32, usize, Boxf)> = vec![
        (0, 0, [0.0, 0.0, 20.0, 20.0]),
        (0, 0, [30.0, 0.0, 50.0, 20.0]),
        (0, 1, [0.0, 0.0, 20.0, 20.0]),
        (0, 2, [10.0, 10.0, 40.0, 30.0]),
        (1, 0, [60.0, 60.0, 70.0, 90.0]),
        (1, 1, [60.0, 60.0, 70.0, 90.0]),
        (1, 2, [5.0, 50.0, 25.0, 80.0]),
    ];
    let dets: Vec<(u32, RefDet)> = vec![
        (0, rd(0, [1.0, 0.0, 21.0, 20.0], 0.95)),
        (0, rd(0, [0.0, 0.0, 20.0, 20.0], 0.60)),
        (0, rd(0, [33.0, 2.0, 53.0, 22.0], 0.80)),
        (0, rd(1, [4.0, 4.0, 24.0, 24.0], 0.70)),
        (0, rd(2, [100.0, 100.0, 120.0, 120.0], 0.90)),
        (0, rd(2, [12.0, 10.0, 42.0, 31.0], 0.30)),
        (1, rd(0, [60.0, 62.0, 70.0, 92.0], 0.85)),
        (1, rd(1, [58.0, 60.0, 68.0, 90.0], 0.40)),
        (1, rd(2, [5.0, 50.0, 25.0, 65.0], 0.75)),
        (1, rd(2, [0.0, 0.0, 5.0, 5.0], 0.99)),
    ];
    let hand = map_check(&gts, &dets, 2)?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let mut g = Vec::new();
        let mut d = Vec::new();
        for _ in 0..rng.random_range(1..12) {
            let c = rng.random_range(0..3u32);
            let f = rng.random_range(0..4usize);
            let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            let b = [x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0)];
            g.push((c, f, b));
            for _ in 0..rng.random_range(0..3) {
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-4.0..4.0);
                let jb = [b[0] + j(&mut rng), b[1] + j(&mut rng), b[2] + j(&mut rng), b[3] + j(&mut rng)];
                if jb[0] < jb[2] && jb[1] < jb[3] {
                    d.push((c, rd(f, jb, (rng.random_range(1..100) as f64) / 100.0)));
                }
            }
        }
        for _ in 0..rng.random_range(0..4) {
            let c = g[rng.random_range(0..g.len())].0;
            let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            d.push((c, rd(rng.random_range(0..4), [x, y, x + 10.0, y + 10.0], rng.random_range(0.0..1.0))));
        }
        map_check(&g, &d, 3)?;
    }

    let perfect: Vec<(u32, RefDet)> = gts.iter().map(|&(c, f, b)| (c, rd(f, b, 0.9))).collect();
    let p = map_check(&gts, &perfect, 2)?;
    ensure(p == (1.0, 1.0, 1.0), || format!("perfect detections give {p:?}"))?;

    let one = map_check(&[(0, 0, [0.0, 0.0, 10.0, 10.0])], &[(0, rd(0, [0.0, 0.0, 10.0, 6.0], 0.9))], 1)?;
    ensure(one.1 == 1.0 && one.2 == 0.0, || format!("IoU 0.6 case gives AP50 {} AP75 {}", one.1, one.2))?;
    Ok(format!(
        "hand case mAP {:.6} / mAP50 {:.6} / mAP75 {:.6} matches oracle; 200 random cases match; perfect = 1; IoU 0.6 gives AP50 1, AP75 0",
        hand.0, hand.1, hand.2
    ))
}

fn flow_io(tmp: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dir = tmp.join("flows");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    for i in 0..1000 {
        let size = FrameSize::new(rng.random_range(1..=24), rng.random_range(1..=24)).unwrap();
        let n = 2 * size.pixel_count();
        let data: Vec<f32> = (0..n)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let field = MotionField::from_interleaved(size, data).map_err(|e| e.to_string())?;
        let p = dir.join(format!("{i}.flo"));
        write_flow(&field, &p).map_err(|e| e.to_string())?;
        let back = read_flow(&p).map_err(|e| e.to_string())?;
        let same = back.size() == size && back.as_interleaved().iter().zip(field.as_interleaved()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("field {i} changed on the round trip"))?;
    }
    let field = MotionField::constant(FrameSize::new(4, 3).unwrap(), 1.5, -2.0);
    let mut bad = field.to_flo_bytes();
    bad[..4].copy_from_slice(&1.0f32.to_le_bytes());
    let p = dir.join("bad.flo");
    fs::write(&p, &bad).unwrap();
    let magic = read_flow(&p);
    ensure(matches!(magic, Err(FlowError::BadMagic { .. })), || format!("bad magic gave {magic:?}"))?;
    let good = field.to_flo_bytes();
    for cut in [0, 3, 8, 11, good.len() - 1] {
        fs::write(&p, &good[..cut]).unwrap();
        let r = read_flow(&p);
        ensure(matches!(r, Err(FlowError::Truncated { .. })), || format!("cut at {cut} gave {r:?}"))?;
    }
    Ok("1000 random fields bit-exact; bad magic -> BadMagic; 5 truncations -> Truncated".into())
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in read_tree(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn determinism(tmp: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_propfuse");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
    };
    let s = |p: &Path| p.display().to_string();
    let (seq_a, seq_b) = (tmp.join("det-seq-a"), tmp.join("det-seq-b"));
    for seq in [&seq_a, &seq_b] {
        run(&["synth", "--preset", "benchmark", "--frames", "80", "--seed", "42", "--out", &s(seq)])?;
    }
    ensure(read_tree(&seq_a) == read_tree(&seq_b), || "synth outputs differ".into())?;
    let m = s(&seq_a.join("manifest.json"));
    let (out_a, out_b, out_c) = (tmp.join("det-out-a"), tmp.join("det-out-b"), tmp.join("det-out-c"));
    run(&["pipeline", "--manifest", &m, "--out", &s(&out_a), "--jobs", "4", "--k", "2"])?;
    run(&["pipeline", "--manifest", &m, "--out", &s(&out_b), "--jobs", "4", "--k", "2"])?;
    run(&["pipeline", "--manifest", &m, "--out", &s(&out_c), "--jobs", "1", "--k", "2"])?;
    let (a, b, c) = (read_tree(&out_a), read_tree(&out_b), read_tree(&out_c));
    ensure(a.len() == 81, || format!("{} files written", a.len()))?;
    ensure(a == b, || "two identical runs differ".into())?;
    ensure(a == c, || "1 and 4 workers differ".into())?;
    Ok(format!("synth twice and pipeline twice (plus once single-threaded): {} identical files", a.len()))
}

fn ablation_order() -> Outcome {
    let start = Instant::now();
    let bundle = generate(&presets::benchmark(200, 0)).map_err(|e| e.to_string())?;
    let seq = Sequence::from_bundle(&bundle);
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let report = ablate(&seq, &PipelineConfig::default(), &FusionMethod::ALL, RunOptions { jobs, keep_going: false }).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let swbf = report.methods[0].scores.map50;
    let table: Vec<String> = report.methods.iter().map(|r| format!("{} {:.4}", r.method, r.scores.map50)).collect();
    for r in &report.methods[1..] {
        ensure(swbf >= r.scores.map50, || format!("mAP50: {}", table.join(", ")))?;
    }
    ensure(secs < ABLATION_BUDGET_S, || format!("took {secs:.1}s"))?;
    Ok(format!("mAP50 {} (teacher {:.4}); {secs:.2}s", table.join(", "), report.teacher.map50))
}

type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let checks: Vec<Check> = vec![
        ("fusion oracle equivalence", Box::new(fusion_oracle)),
        ("source-count rescaling arithmetic", Box::new(rescale_arithmetic)),
        ("similarity rescoring monotonicity", Box::new(rescore_monotone)),
        ("k=0 passthrough", Box::new(|| k_zero_passthrough(tmp.path()))),
        ("occluded object recovery", Box::new(type_a_recovery)),
        ("single-source false positive suppression", Box::new(type_b_suppression)),
        ("motion self-consistency", Box::new(self_consistency_check)),
        ("mAP evaluator", Box::new(map_evaluator)),
        ("flow file I/O", Box::new(|| flow_io(tmp.path()))),
        ("determinism", Box::new(|| determinism(tmp.path()))),
        ("ablation ordering", Box::new(ablation_order)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
