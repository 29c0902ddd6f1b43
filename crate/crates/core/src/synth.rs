//! Synthetic sequences with exact motion: rigid boxes moving along
//! piecewise-linear paths over a value-noise background, plus a simulated
//! noisy detector.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bplp::FlowStore;
use crate::error::{Error, Result};
use crate::geometry::{clip_to_frame, BBox, Detection, FrameSize, LabelSet};
use crate::motion::{read_flow, write_flow, Frame, MotionField};
use crate::pipeline::io::{
    dense_label_sets, format_label_set, quantize6, read_labels, write_text, ClassVocab, FlowEntry, FrameEntry,
    SequenceManifest, Vocabulary,
};
use crate::similarity::{FeatureVector, PatchDescriptor, PrecomputedEmbeddings, DEFAULT_PATCH_SIDE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SceneError {
    #[error("invalid scene: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub t: usize,
    /// Top-left corner.
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: String,
    /// Width and height in pixels.
    pub size: [f64; 2],
    /// The object exists from the first keyframe to the last.
    pub trajectory: Vec<Keyframe>,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
    /// Inclusive frame ranges where the detector misses this object.
    #[serde(default)]
    pub occluded: Vec<[usize; 2]>,
}

fn default_color() -> [u8; 3] {
    [220, 220, 220]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundSpec {
    pub base: f64,
    pub amplitude: f64,
    /// Noise lattice spacing in pixels.
    pub cell: f64,
    /// Per-frame translation of the whole background.
    pub motion: [f64; 2],
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            base: 90.0,
            amplitude: 50.0,
            cell: 8.0,
            motion: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub miss_prob: f64,
    /// Standard deviation of the per-corner jitter in pixels.
    pub jitter_sigma: f64,
    /// Mean number of spurious boxes per frame.
    pub fp_rate: f64,
    pub fp_score_range: [f64; 2],
    pub tp_score_range: [f64; 2],
    /// Side length range of spurious boxes in pixels.
    pub fp_size_range: [f64; 2],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            miss_prob: 0.0,
            jitter_sigma: 0.0,
            fp_rate: 0.0,
            fp_score_range: [0.5, 0.9],
            tp_score_range: [1.0, 1.0],
            fp_size_range: [12.0, 40.0],
        }
    }
}

/// A spurious detection placed by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedBox {
    pub frame: usize,
    pub class: String,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    pub classes: Vec<String>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub background: BackgroundSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub injected: Vec<InjectedBox>,
    #[serde(default = "default_min_coverage")]
    pub min_coverage: f64,
    /// Render PPM instead of PGM.
    #[serde(default)]
    pub color: bool,
    /// Also write patch embeddings for every detection and GT box.
    #[serde(default)]
    pub embeddings: bool,
}

fn default_min_coverage() -> f64 {
    0.25
}

impl SceneSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn class_id(&self, name: &str) -> Option<u32> {
        self.classes.iter().position(|c| c == name).map(|i| i as u32)
    }

    /// Every violated constraint, one message per object/frame.
    pub fn validate(&self) -> Result<(), SceneError> {
        let mut errs = Vec::new();
        let size = FrameSize::new(self.width, self.height).ok();
        if size.is_none() {
            errs.push(format!("frame size {}x{} must be positive", self.width, self.height));
        }
        if self.length == 0 {
            errs.push("length must be at least 1".into());
        }
        if self.classes.is_empty() {
            errs.push("class list is empty".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                errs.push(format!("class {c:?} listed twice"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            errs.push(format!("min_coverage {} outside [0, 1]", self.min_coverage));
        }
        let n = &self.noise;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(n.miss_prob) {
            errs.push(format!("noise.miss_prob {} outside [0, 1]", n.miss_prob));
        }
        if !(n.jitter_sigma >= 0.0 && n.jitter_sigma.is_finite()) {
            errs.push(format!("noise.jitter_sigma {} must be >= 0", n.jitter_sigma));
        }
        if !(n.fp_rate >= 0.0 && n.fp_rate.is_finite()) {
            errs.push(format!("noise.fp_rate {} must be >= 0", n.fp_rate));
        }
        for (name, r) in [("fp_score_range", n.fp_score_range), ("tp_score_range", n.tp_score_range)] {
            if !(unit(r[0]) && unit(r[1]) && r[0] <= r[1]) {
                errs.push(format!("noise.{name} {r:?} must be an ordered range inside [0, 1]"));
            }
        }
        let fs = n.fp_size_range;
        if n.fp_rate > 0.0 && !(fs[0] >= 1.0 && fs[0] <= fs[1] && fs[1] <= self.width.min(self.height) as f64) {
            errs.push(format!("noise.fp_size_range {fs:?} must be ordered, >= 1 and fit the frame"));
        }
        let b = &self.background;
        if !(b.cell > 0.0 && b.base.is_finite() && b.amplitude.is_finite())
            || !b.motion.iter().all(|m| m.is_finite())
        {
            errs.push("background needs cell > 0 and finite base, amplitude and motion".into());
        }

        for (i, o) in self.objects.iter().enumerate() {
            let tag = format!("object {i}");
            if self.class_id(&o.class).is_none() {
                errs.push(format!("{tag}: unknown class {:?}", o.class));
            }
            if !(o.size[0] > 0.0 && o.size[1] > 0.0 && o.size.iter().all(|s| s.is_finite())) {
                errs.push(format!("{tag}: size {:?} must be positive", o.size));
                continue;
            }
            if o.trajectory.is_empty() {
                errs.push(format!("{tag}: trajectory has no keyframes"));
                continue;
            }
            let mut ordered = true;
            for w in o.trajectory.windows(2) {
                if w[0].t >= w[1].t {
                    errs.push(format!("{tag}: keyframes must have increasing t ({} then {})", w[0].t, w[1].t));
                    ordered = false;
                }
            }
            for k in &o.trajectory {
                if !(k.x.is_finite() && k.y.is_finite()) {
                    errs.push(format!("{tag}: keyframe at t={} is not finite", k.t));
                    ordered = false;
                }
            }
            let last = o.trajectory.last().map(|k| k.t).unwrap_or(0);
            if last >= self.length {
                errs.push(format!("{tag}: keyframe t={last} past the sequence end"));
                ordered = false;
            }
            for r in &o.occluded {
                if r[0] > r[1] {
                    errs.push(format!("{tag}: occlusion range {r:?} is reversed"));
                }
            }
            if let (true, Some(size)) = (ordered, size) {
                for t in o.trajectory[0].t..=last {
                    let bx = object_box(o, t).expect("live frame");
                    let cov = clip_to_frame(&bx, size).map(|(_, c)| c).unwrap_or(0.0);
                    if cov < self.min_coverage {
                        errs.push(format!(
                            "{tag}: frame {t} keeps {:.1}% of the box in frame, below min_coverage",
                            cov * 100.0
                        ));
                    }
                }
            }
        }
        for (i, f) in self.injected.iter().enumerate() {
            let tag = format!("injected box {i}");
            if f.frame >= self.length {
                errs.push(format!("{tag}: frame {} past the sequence end", f.frame));
            }
            if self.class_id(&f.class).is_none() {
                errs.push(format!("{tag}: unknown class {:?}", f.class));
            }
            if BBox::from_array(f.bbox).is_err() {
                errs.push(format!("{tag}: invalid box {:?}", f.bbox));
            }
            if !unit(f.score) {
                errs.push(format!("{tag}: score {} outside [0, 1]", f.score));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SceneError::Invalid(errs))
        }
    }
}

/// Top-left position of `o` at frame `t`, or `None` outside its lifespan.
pub fn object_position(o: &ObjectSpec, t: usize) -> Option<(f64, f64)> {
    let first = o.trajectory.first()?;
    let last = o.trajectory.last()?;
    if t < first.t || t > last.t {
        return None;
    }
    let i = o.trajectory.iter().rposition(|k| k.t <= t)?;
    let a = o.trajectory[i];
    if a.t == t || i + 1 == o.trajectory.len() {
        return Some((a.x, a.y));
    }
    let b = o.trajectory[i + 1];
    let s = (t - a.t) as f64 / (b.t - a.t) as f64;
    Some((a.x + (b.x - a.x) * s, a.y + (b.y - a.y) * s))
}

/// Unclipped box of `o` at frame `t`.
pub fn object_box(o: &ObjectSpec, t: usize) -> Option<BBox> {
    let (x, y) = object_position(o, t)?;
    BBox::new(x, y, x + o.size[0], y + o.size[1]).ok()
}

/// Generated sequence held in memory. `forward[t]` maps frame t to t+1 and
/// `backward[t]` maps frame t+1 to t.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub size: FrameSize,
    pub classes: Vec<String>,
    pub frames: Vec<Frame>,
    pub forward: Vec<MotionField>,
    pub backward: Vec<MotionField>,
    pub gt: Vec<LabelSet>,
    pub detections: Vec<LabelSet>,
    pub embeddings: Option<PrecomputedEmbeddings>,
}

impl SequenceBundle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn flow_store(&self) -> FlowStore {
        let mut store = FlowStore::new();
        for (t, f) in self.forward.iter().enumerate() {
            store.insert(t, t + 1, f.clone());
        }
        for (t, f) in self.backward.iter().enumerate() {
            store.insert(t + 1, t, f.clone());
        }
        store
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix(ix as u64 ^ mix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor(), gy.floor());
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    let (fx, fy) = (fade(gx - ix), fade(gy - iy));
    let (ix, iy) = (ix as i64, iy as i64);
    let top = lattice(seed, ix, iy) * (1.0 - fx) + lattice(seed, ix + 1, iy) * fx;
    let bottom = lattice(seed, ix, iy + 1) * (1.0 - fx) + lattice(seed, ix + 1, iy + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

const OBJECT_TEXTURE_CELL: f64 = 4.0;

fn render(spec: &SceneSpec, size: FrameSize, t: usize) -> Frame {
    let (w, h) = (size.width() as usize, size.height() as usize);
    let channels = if spec.color { 3 } else { 1 };
    let bg = &spec.background;
    let bg_seed = mix(spec.seed ^ 0xB6);
    let mut rgb = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5 - bg.motion[0] * t as f64;
            let py = y as f64 + 0.5 - bg.motion[1] * t as f64;
            let v = bg.base + bg.amplitude * (2.0 * value_noise(bg_seed, px, py, bg.cell) - 1.0);
            rgb[y * w + x] = [v; 3];
        }
    }
    for (i, o) in spec.objects.iter().enumerate() {
        let Some((ox, oy)) = object_position(o, t) else {
            continue;
        };
        let seed = mix(spec.seed ^ mix(i as u64 + 1));
        let x_lo = (ox - 0.5).ceil().max(0.0) as usize;
        let y_lo = (oy - 0.5).ceil().max(0.0) as usize;
        let x_hi = ((ox + o.size[0] - 0.5).ceil().max(0.0) as usize).min(w);
        let y_hi = ((oy + o.size[1] - 0.5).ceil().max(0.0) as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let n = value_noise(seed, x as f64 + 0.5 - ox, y as f64 + 0.5 - oy, OBJECT_TEXTURE_CELL);
                let gain = 0.45 + 0.55 * n;
                rgb[y * w + x] = o.color.map(|c| c as f64 * gain);
            }
        }
    }
    let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    let data: Vec<u8> = if spec.color {
        rgb.iter().flat_map(|p| p.map(to_u8)).collect()
    } else {
        rgb.iter()
            .map(|p| to_u8(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
            .collect()
    };
    Frame::new(size, channels, data).expect("buffer sized from the frame")
}

/// Flow from frame `from` to `to` (neighbours). Pixel column `i` counts as
/// inside a box [x1, x2) when x1 - 1 < i < x2, so bilinear reads at the box
/// edges only touch object pixels. Later objects overwrite earlier ones.
fn flow_between(spec: &SceneSpec, size: FrameSize, from: usize, to: usize) -> MotionField {
    let sign = to as f64 - from as f64;
    let bg = spec.background.motion;
    let mut field = MotionField::constant(size, (bg[0] * sign) as f32, (bg[1] * sign) as f32);
    let (w, h) = (size.width() as i64, size.height() as i64);
    for o in &spec.objects {
        let (Some(a), Some(b)) = (object_position(o, from), object_position(o, to)) else {
            continue;
        };
        let (du, dv) = ((b.0 - a.0) as f32, (b.1 - a.1) as f32);
        let (x1, y1, x2, y2) = (a.0, a.1, a.0 + o.size[0], a.1 + o.size[1]);
        let xs = ((x1 - 1.0).floor() as i64 + 1).max(0)..((x2.ceil() as i64).min(w));
        let ys = ((y1 - 1.0).floor() as i64 + 1).max(0)..((y2.ceil() as i64).min(h));
        for y in ys {
            for x in xs.clone() {
                if (x as f64) < x2 && (y as f64) < y2 {
                    field.set(x as usize, y as usize, du, dv);
                }
            }
        }
    }
    field
}

fn quantized_box(c: [f64; 4]) -> Option<BBox> {
    BBox::from_array(c.map(quantize6)).ok()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    r[0] + (r[1] - r[0]) * u
}

/// Builds the whole sequence. Everything random comes from one ChaCha8
/// stream seeded by `spec.seed`, drawn in a fixed order: per frame, per
/// live object (miss, four jitters, score), then the spurious-box count and
/// per spurious box (class, width, height, x, y, score).
pub fn generate(spec: &SceneSpec) -> Result<SequenceBundle> {
    spec.validate()?;
    let size = FrameSize::new(spec.width, spec.height)?;
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let poisson = (spec.noise.fp_rate > 0.0).then(|| Poisson::new(spec.noise.fp_rate).expect("positive rate"));
    let class_of = |name: &str| spec.class_id(name).expect("validated class");

    let frames: Vec<Frame> = (0..spec.length).map(|t| render(spec, size, t)).collect();
    let forward: Vec<MotionField> = (1..spec.length).map(|t| flow_between(spec, size, t - 1, t)).collect();
    let backward: Vec<MotionField> = (1..spec.length).map(|t| flow_between(spec, size, t, t - 1)).collect();

    let mut gt = Vec::with_capacity(spec.length);
    let mut detections = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let mut g = Vec::new();
        let mut d = Vec::new();
        for o in &spec.objects {
            let Some(bx) = object_box(o, t) else {
                continue;
            };
            let class = class_of(&o.class);
            let miss = rng.random::<f64>() < spec.noise.miss_prob;
            let jitter: [f64; 4] = std::array::from_fn(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * spec.noise.jitter_sigma
            });
            let score = quantize6(uniform(&mut rng, spec.noise.tp_score_range));
            let Some((clipped, _)) = clip_to_frame(&bx, size) else {
                continue;
            };
            let Some(truth) = quantized_box(clipped.corners()) else {
                continue;
            };
            g.push(Detection::new(class, truth, 1.0)?);

            let occluded = o.occluded.iter().any(|r| (r[0]..=r[1]).contains(&t));
            if occluded || miss {
                continue;
            }
            let c = bx.corners();
            let moved = [c[0] + jitter[0], c[1] + jitter[1], c[2] + jitter[2], c[3] + jitter[3]];
            let candidate = [
                moved[0].clamp(0.0, fw),
                moved[1].clamp(0.0, fh),
                moved[2].clamp(0.0, fw),
                moved[3].clamp(0.0, fh),
            ];
            let noisy = quantized_box(candidate)
                .filter(|b| b.width() >= 1.0 && b.height() >= 1.0)
                .unwrap_or(truth);
            d.push(Detection::new(class, noisy, score)?);
        }

        let count = poisson.map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
        for _ in 0..count {
            let class = rng.random_range(0..spec.classes.len()) as u32;
            let bw = uniform(&mut rng, spec.noise.fp_size_range);
            let bh = uniform(&mut rng, spec.noise.fp_size_range);
            let x = uniform(&mut rng, [0.0, fw - bw]);
            let y = uniform(&mut rng, [0.0, fh - bh]);
            let score = quantize6(uniform(&mut rng, spec.noise.fp_score_range));
            if let Some(b) = quantized_box([x, y, x + bw, y + bh]) {
                d.push(Detection::new(class, b, score)?);
            }
        }
        for f in spec.injected.iter().filter(|f| f.frame == t) {
            let b = quantized_box(f.bbox).ok_or_else(|| SceneError::Invalid(vec![format!("injected box {:?}", f.bbox)]))?;
            d.push(Detection::new(class_of(&f.class), b, quantize6(f.score))?);
        }
        gt.push(LabelSet::new(t, g));
        detections.push(LabelSet::new(t, d));
    }

    let embeddings = spec.embeddings.then(|| {
        let mut table = PrecomputedEmbeddings::new();
        for ls in detections.iter().chain(gt.iter()) {
            for d in &ls.detections {
                if let Some(v) = PatchDescriptor::describe(&frames[ls.frame_index], &d.bbox, DEFAULT_PATCH_SIDE) {
                    let q = v.values().iter().map(|&x| quantize6(x)).collect();
                    table.insert(ls.frame_index, &d.bbox, FeatureVector::new(q).expect("values stay in [0, 1]"));
                }
            }
        }
        table
    });

    Ok(SequenceBundle {
        size,
        classes: spec.classes.clone(),
        frames,
        forward,
        backward,
        gt,
        detections,
        embeddings,
    })
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:06}")
}

/// Writes the bundle under `dir` and returns the manifest (also saved as
/// `dir/manifest.json`).
pub fn write_bundle(bundle: &SequenceBundle, dir: impl AsRef<Path>) -> Result<SequenceManifest> {
    let dir = dir.as_ref();
    for sub in ["frames", "flows", "detections", "gt"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let vocab = ClassVocab::new(bundle.classes.iter().cloned());
    let mut frames = Vec::with_capacity(bundle.len());
    for (t, frame) in bundle.frames.iter().enumerate() {
        let ext = if frame.channels() == 3 { "ppm" } else { "pgm" };
        let image = format!("frames/{}.{ext}", frame_name(t));
        frame.write_pnm(dir.join(&image))?;
        let detections = format!("detections/{}.jsonl", frame_name(t));
        write_text(dir.join(&detections), &format_label_set(&bundle.detections[t], &vocab))?;
        let ground_truth = format!("gt/{}.jsonl", frame_name(t));
        write_text(dir.join(&ground_truth), &format_label_set(&bundle.gt[t], &vocab))?;
        frames.push(FrameEntry {
            index: t,
            image: Some(image),
            detections,
            ground_truth: Some(ground_truth),
        });
    }
    let mut flows = Vec::with_capacity(2 * bundle.forward.len());
    for (t, f) in bundle.forward.iter().enumerate() {
        let path = format!("flows/fwd_{t:06}.flo");
        write_flow(f, dir.join(&path))?;
        flows.push(FlowEntry { from: t, to: t + 1, path });
    }
    for (t, f) in bundle.backward.iter().enumerate() {
        let path = format!("flows/bwd_{:06}.flo", t + 1);
        write_flow(f, dir.join(&path))?;
        flows.push(FlowEntry { from: t + 1, to: t, path });
    }
    let embeddings = match &bundle.embeddings {
        Some(e) => {
            write_text(dir.join("embeddings.jsonl"), &e.to_jsonl())?;
            Some("embeddings.jsonl".to_string())
        }
        None => None,
    };
    let manifest = SequenceManifest {
        root: dir.to_path_buf(),
        width: bundle.size.width(),
        height: bundle.size.height(),
        classes: bundle.classes.clone(),
        frames,
        flows,
        embeddings,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads a bundle back from a manifest. Every frame needs an image and
/// ground truth, and every neighbouring flow pair must be listed.
pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<SequenceBundle> {
    let m = SequenceManifest::load(manifest_path)?;
    let size = m.frame_size()?;
    let n = m.num_frames();
    let mut vocab = ClassVocab::new(m.classes.iter().cloned());
    let mut frames = Vec::with_capacity(n);
    let mut det_records = Vec::new();
    let mut gt_records = Vec::new();
    for f in &m.frames {
        let image = f
            .image
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("frame {} has no image", f.index)))?;
        frames.push(Frame::read_pnm(m.resolve(image))?);
        det_records.extend(read_labels(m.resolve(&f.detections), &mut vocab, Vocabulary::Fixed)?);
        let g = f
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("frame {} has no ground truth", f.index)))?;
        gt_records.extend(read_labels(m.resolve(g), &mut vocab, Vocabulary::Fixed)?);
    }
    let find = |from: usize, to: usize| -> Result<MotionField> {
        let e = m
            .flows
            .iter()
            .find(|e| e.from == from && e.to == to)
            .ok_or(Error::MissingFlow { from, to })?;
        Ok(read_flow(m.resolve(&e.path))?)
    };
    let forward = (1..n).map(|t| find(t - 1, t)).collect::<Result<Vec<_>>>()?;
    let backward = (1..n).map(|t| find(t, t - 1)).collect::<Result<Vec<_>>>()?;
    let embeddings = m
        .embeddings
        .as_ref()
        .map(|p| PrecomputedEmbeddings::load(m.resolve(p)))
        .transpose()?;
    Ok(SequenceBundle {
        size,
        classes: m.classes.clone(),
        frames,
        forward,
        backward,
        gt: dense_label_sets(&gt_records, n),
        detections: dense_label_sets(&det_records, n),
        embeddings,
    })
}

/// Ready-made scenes used by the tests and the ablation command.
pub mod presets {
    use super::*;

    fn linear(class: &str, size: [f64; 2], t0: usize, t1: usize, from: (f64, f64), to: (f64, f64)) -> ObjectSpec {
        ObjectSpec {
            class: class.into(),
            size,
            trajectory: vec![
                Keyframe { t: t0, x: from.0, y: from.1 },
                Keyframe { t: t1, x: to.0, y: to.1 },
            ],
            color: [230, 200, 60],
            occluded: Vec::new(),
        }
    }

    /// One car moving by (3, 2) per frame over 5 frames; the detector
    /// misses it at frame 2.
    pub fn occlusion() -> SceneSpec {
        let mut car = linear("car", [24.0, 16.0], 0, 4, (10.0, 12.0), (22.0, 20.0));
        car.occluded = vec![[2, 2]];
        SceneSpec {
            width: 96,
            height: 64,
            length: 5,
            seed: 7,
            classes: vec!["car".into()],
            objects: vec![car],
            background: BackgroundSpec::default(),
            noise: NoiseSpec::default(),
            injected: Vec::new(),
            min_coverage: 0.25,
            color: false,
            embeddings: false,
        }
    }

    /// A still scene with one car and a spurious 0.8 box on frame 2 only.
    pub fn type_b() -> SceneSpec {
        let car = linear("car", [20.0, 20.0], 0, 4, (8.0, 8.0), (16.0, 8.0));
        SceneSpec {
            injected: vec![InjectedBox {
                frame: 2,
                class: "car".into(),
                bbox: [60.0, 30.0, 80.0, 50.0],
                score: 0.8,
            }],
            objects: vec![car],
            ..occlusion()
        }
    }

    /// Several hundred frames of crossing objects with finite lifespans,
    /// detector misses, occlusions, corner jitter and spurious boxes.
    pub fn benchmark(length: usize, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let (w, h) = (160.0, 120.0);
        let classes = vec!["car".to_string(), "person".to_string()];
        let mut objects = Vec::new();
        let mut start = 0usize;
        while start + 4 < length {
            let class = rng.random_range(0..classes.len());
            let (bw, bh) = if class == 0 {
                (rng.random_range(20.0..36.0), rng.random_range(14.0..24.0))
            } else {
                (rng.random_range(8.0..14.0), rng.random_range(20.0..32.0))
            };
            let life = rng.random_range(8..30).min(length - 1 - start);
            let x0 = rng.random_range(0.0..w - bw);
            let y0 = rng.random_range(0.0..h - bh);
            let vx: f64 = rng.random_range(-2.5..2.5);
            let vy: f64 = rng.random_range(-1.5..1.5);
            let x1 = (x0 + vx * life as f64).clamp(0.0, w - bw);
            let y1 = (y0 + vy * life as f64).clamp(0.0, h - bh);
            let end = start + life;
            let mut occluded = Vec::new();
            if rng.random_bool(0.5) && life > 4 {
                let at = rng.random_range(start + 1..end);
                occluded.push([at, (at + rng.random_range(0..2)).min(end - 1)]);
            }
            let color = [
                rng.random_range(120..=255),
                rng.random_range(40..=255),
                rng.random_range(0..=200),
            ];
            objects.push(ObjectSpec {
                class: classes[class].clone(),
                size: [bw, bh],
                trajectory: vec![Keyframe { t: start, x: x0, y: y0 }, Keyframe { t: end, x: x1, y: y1 }],
                color,
                occluded,
            });
            start += rng.random_range(1..4);
        }
        SceneSpec {
            width: w as u32,
            height: h as u32,
            length,
            seed,
            classes,
            objects,
            background: BackgroundSpec {
                motion: [0.5, 0.0],
                ..BackgroundSpec::default()
            },
            noise: NoiseSpec {
                miss_prob: 0.15,
                jitter_sigma: 1.0,
                fp_rate: 0.6,
                fp_score_range: [0.45, 0.95],
                tp_score_range: [0.5, 1.0],
                fp_size_range: [10.0, 32.0],
            },
            injected: Vec::new(),
            min_coverage: 0.25,
            color: false,
            embeddings: false,
        }
    }
}
