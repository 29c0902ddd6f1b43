//! On-disk formats: detection JSON Lines, the sequence manifest and the
//! class vocabulary that maps names to ids.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bplp::{Candidate, CandidateSet};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, FrameSize, LabelSet};

/// Class names in id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassVocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl ClassVocab {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::default();
        for n in names {
            v.insert(n.into());
        }
        v
    }

    pub fn insert(&mut self, name: String) -> u32 {
        if let Some(&id) = self.index.get(&name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    frame: usize,
    class: String,
    bbox: [f64; 4],
    score: f64,
    #[serde(default)]
    source_offset: i32,
    #[serde(default)]
    source_bbox: Option<[f64; 4]>,
    #[serde(default)]
    effective_sources: Option<usize>,
}

/// One parsed line of a detection file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub frame: usize,
    pub detection: Detection,
    pub source_bbox: Option<BBox>,
    pub effective_sources: Option<usize>,
}

/// How unseen class names are handled while reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vocabulary {
    /// Add new names to the vocabulary.
    Grow,
    /// Reject names that are not already present.
    Fixed,
}

pub fn parse_labels(text: &str, path: &Path, vocab: &mut ClassVocab, mode: Vocabulary) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let class_id = match (vocab.id(&raw.class), mode) {
            (Some(id), _) => id,
            (None, Vocabulary::Grow) => vocab.insert(raw.class.clone()),
            (None, Vocabulary::Fixed) => {
                if !unknown.contains(&raw.class) {
                    unknown.push(raw.class.clone());
                }
                continue;
            }
        };
        let bbox = BBox::from_array(raw.bbox).map_err(|e| err(e.to_string()))?;
        let detection = Detection::new(class_id, bbox, raw.score)
            .map_err(|e| err(e.to_string()))?
            .with_offset(raw.source_offset);
        let source_bbox = raw
            .source_bbox
            .map(BBox::from_array)
            .transpose()
            .map_err(|e| err(e.to_string()))?;
        out.push(LabelRecord {
            frame: raw.frame,
            detection,
            source_bbox,
            effective_sources: raw.effective_sources,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownClasses(unknown));
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>, vocab: &mut ClassVocab, mode: Vocabulary) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path, vocab, mode)
}

/// Reads every `*.jsonl` file in `dir` (sorted by name).
pub fn read_label_dir(dir: impl AsRef<Path>, vocab: &mut ClassVocab, mode: Vocabulary) -> Result<Vec<LabelRecord>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_labels(&p, vocab, mode)?);
    }
    Ok(all)
}

/// Groups records into per-frame label sets, ascending by frame, keeping
/// file order within a frame.
pub fn group_by_frame(records: &[LabelRecord]) -> Vec<LabelSet> {
    let mut frames: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for r in records {
        frames.entry(r.frame).or_default().push(r.detection);
    }
    frames.into_iter().map(|(f, d)| LabelSet::new(f, d)).collect()
}

/// Label sets for frames `0..num_frames`; frames absent from `records` are
/// empty.
pub fn dense_label_sets(records: &[LabelRecord], num_frames: usize) -> Vec<LabelSet> {
    let mut out: Vec<LabelSet> = (0..num_frames).map(LabelSet::empty).collect();
    for r in records {
        if let Some(ls) = out.get_mut(r.frame) {
            ls.detections.push(r.detection);
        }
    }
    out
}

/// Rebuilds candidate sets from a candidate file. A missing `source_bbox`
/// means the box sits where it came from.
pub fn candidate_sets(records: &[LabelRecord]) -> Vec<CandidateSet> {
    let mut frames: BTreeMap<usize, CandidateSet> = BTreeMap::new();
    for r in records {
        let set = frames.entry(r.frame).or_insert_with(|| CandidateSet {
            frame_index: r.frame,
            candidates: Vec::new(),
            effective_sources: 0,
        });
        set.candidates.push(Candidate {
            detection: r.detection,
            source_bbox: r.source_bbox.unwrap_or(r.detection.bbox),
        });
        if let Some(e) = r.effective_sources {
            set.effective_sources = set.effective_sources.max(e);
        }
    }
    frames.into_values().collect()
}

fn push_bbox(out: &mut String, key: &str, b: &BBox) {
    let c = b.corners();
    let _ = write!(
        out,
        ",\"{key}\":[{},{},{},{}]",
        fmt6(c[0]),
        fmt6(c[1]),
        fmt6(c[2]),
        fmt6(c[3])
    );
}

/// Six decimals, never "-0.000000".
pub fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Rounds to the value a six-decimal round trip through the file produces.
pub fn quantize6(v: f64) -> f64 {
    fmt6(v).parse::<f64>().expect("formatted float parses") + 0.0
}

fn class_json(vocab: &ClassVocab, id: u32) -> String {
    let name = vocab.name(id).map(str::to_string).unwrap_or_else(|| format!("class{id}"));
    serde_json::to_string(&name).expect("string serializes")
}

pub fn format_detection(frame: usize, d: &Detection, vocab: &ClassVocab) -> String {
    let mut s = format!("{{\"frame\":{frame},\"class\":{}", class_json(vocab, d.class_id));
    push_bbox(&mut s, "bbox", &d.bbox);
    let _ = write!(s, ",\"score\":{},\"source_offset\":{}}}", fmt6(d.score()), d.source_offset);
    s
}

/// Detection lines for one label set.
pub fn format_label_set(ls: &LabelSet, vocab: &ClassVocab) -> String {
    let mut out = String::new();
    for d in &ls.detections {
        out.push_str(&format_detection(ls.frame_index, d, vocab));
        out.push('\n');
    }
    out
}

/// Candidate lines: detection fields plus `source_bbox` for propagated
/// boxes and `effective_sources` on every line.
pub fn format_candidates(cs: &CandidateSet, vocab: &ClassVocab) -> String {
    let mut out = String::new();
    for c in &cs.candidates {
        let d = &c.detection;
        let mut s = format!("{{\"frame\":{},\"class\":{}", cs.frame_index, class_json(vocab, d.class_id));
        push_bbox(&mut s, "bbox", &d.bbox);
        let _ = write!(s, ",\"score\":{},\"source_offset\":{}", fmt6(d.score()), d.source_offset);
        if d.source_offset != 0 {
            push_bbox(&mut s, "source_bbox", &c.source_bbox);
        }
        let _ = write!(s, ",\"effective_sources\":{}}}", cs.effective_sources);
        out.push_str(&s);
        out.push('\n');
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub detections: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowEntry {
    pub from: usize,
    pub to: usize,
    pub path: String,
}

/// Describes a sequence directory. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub width: u32,
    pub height: u32,
    pub classes: Vec<String>,
    pub frames: Vec<FrameEntry>,
    pub flows: Vec<FlowEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
}

impl SequenceManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: SequenceManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn frame_size(&self) -> Result<FrameSize> {
        Ok(FrameSize::new(self.width, self.height)?)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.ground_truth.is_some())
    }

    /// Structure checks plus existence of every referenced file.
    pub fn validate(&self) -> Result<()> {
        self.frame_size()?;
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(Error::Manifest(format!(
                    "frame entries must be listed as 0..{} in order; entry {i} has index {}",
                    self.frames.len(),
                    f.index
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for fl in &self.flows {
            if fl.from.abs_diff(fl.to) != 1 {
                return Err(Error::Manifest(format!("flow {}->{} does not join neighbouring frames", fl.from, fl.to)));
            }
            if fl.from >= self.frames.len() || fl.to >= self.frames.len() {
                return Err(Error::Manifest(format!("flow {}->{} refers to a frame outside the sequence", fl.from, fl.to)));
            }
            if !seen.insert((fl.from, fl.to)) {
                return Err(Error::Manifest(format!("flow {}->{} listed twice", fl.from, fl.to)));
            }
        }
        let mut missing = Vec::new();
        let mut check = |rel: &str| {
            if !self.resolve(rel).is_file() {
                missing.push(rel.to_string());
            }
        };
        for f in &self.frames {
            check(&f.detections);
            if let Some(p) = &f.image {
                check(p);
            }
            if let Some(p) = &f.ground_truth {
                check(p);
            }
        }
        for fl in &self.flows {
            check(&fl.path);
        }
        if let Some(p) = &self.embeddings {
            check(p);
        }
        if !missing.is_empty() {
            return Err(Error::Manifest(format!("missing files: {}", missing.join(", "))));
        }
        Ok(())
    }

    pub fn has_flow(&self, from: usize, to: usize) -> bool {
        self.flows.iter().any(|f| f.from == from && f.to == to)
    }
}
