//! Loads a sequence, runs propagation and fusion over its frames and writes
//! the results.

pub mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::bplp::{build_candidates, CandidateSet, FlowSource, FlowStore, PropagationConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::fusion::{fuse, FusionConfig, FusionMethod, MatchRule, SourceCount};
use crate::geometry::{FrameSize, LabelSet};
use crate::motion::{read_flow, CompositionMode, Frame};
use crate::similarity::{FeatureProvider, PatchDescriptor, PrecomputedEmbeddings, WithFallback, DEFAULT_PATCH_SIDE};
use crate::synth::SequenceBundle;

use self::io::{dense_label_sets, format_label_set, read_labels, write_json, write_text, ClassVocab, SequenceManifest, Vocabulary};

/// Everything the pipeline reads from a sequence, held in memory.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub vocab: ClassVocab,
    pub size: FrameSize,
    /// Present when every frame lists an image.
    pub frames: Option<Vec<Frame>>,
    pub flows: FlowStore,
    pub detections: Vec<LabelSet>,
    pub ground_truth: Option<Vec<LabelSet>>,
    pub embeddings: Option<PrecomputedEmbeddings>,
}

impl Sequence {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let m = SequenceManifest::load(manifest_path)?;
        Self::from_manifest(&m)
    }

    pub fn from_manifest(m: &SequenceManifest) -> Result<Self> {
        let size = m.frame_size()?;
        let n = m.num_frames();
        let mut vocab = ClassVocab::new(m.classes.iter().cloned());
        let read = |rel: &str, vocab: &mut ClassVocab, index: usize| -> Result<Vec<io::LabelRecord>> {
            let recs = read_labels(m.resolve(rel), vocab, Vocabulary::Fixed)?;
            if let Some(r) = recs.iter().find(|r| r.frame != index) {
                return Err(Error::Manifest(format!("{rel} holds a record for frame {} but is listed as frame {index}", r.frame)));
            }
            Ok(recs)
        };
        let mut det = Vec::new();
        for f in &m.frames {
            det.extend(read(&f.detections, &mut vocab, f.index)?);
        }
        let ground_truth = if m.has_ground_truth() {
            let mut gt = Vec::new();
            for f in &m.frames {
                gt.extend(read(f.ground_truth.as_deref().expect("checked"), &mut vocab, f.index)?);
            }
            Some(dense_label_sets(&gt, n))
        } else {
            None
        };
        let frames = if m.frames.iter().all(|f| f.image.is_some()) && n > 0 {
            let mut out = Vec::with_capacity(n);
            for f in &m.frames {
                let img = Frame::read_pnm(m.resolve(f.image.as_deref().expect("checked")))?;
                if img.size() != size {
                    return Err(Error::Manifest(format!(
                        "frame {} is {}x{}, manifest says {}x{}",
                        f.index,
                        img.size().width(),
                        img.size().height(),
                        size.width(),
                        size.height()
                    )));
                }
                out.push(img);
            }
            Some(out)
        } else {
            None
        };
        let mut flows = FlowStore::new();
        for e in &m.flows {
            let field = read_flow(m.resolve(&e.path))?;
            if field.size() != size {
                return Err(Error::Manifest(format!("flow {}->{} does not match the frame size", e.from, e.to)));
            }
            flows.insert(e.from, e.to, field);
        }
        let embeddings = m
            .embeddings
            .as_ref()
            .map(|p| PrecomputedEmbeddings::load(m.resolve(p)))
            .transpose()?;
        Ok(Self {
            vocab,
            size,
            frames,
            flows,
            detections: dense_label_sets(&det, n),
            ground_truth,
            embeddings,
        })
    }

    pub fn from_bundle(b: &SequenceBundle) -> Self {
        Self {
            vocab: ClassVocab::new(b.classes.iter().cloned()),
            size: b.size,
            frames: Some(b.frames.clone()),
            flows: b.flow_store(),
            detections: b.detections.clone(),
            ground_truth: Some(b.gt.clone()),
            embeddings: b.embeddings.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// With k >= 1 every neighbouring pair is needed in both directions.
    /// Reports the first missing pair, forward before backward.
    pub fn check_flows(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Ok(());
        }
        for t in 1..self.len() {
            for (from, to) in [(t - 1, t), (t, t - 1)] {
                if self.flows.flow(from, to).is_none() {
                    return Err(Error::MissingFlow { from, to });
                }
            }
        }
        Ok(())
    }

    /// The feature provider `cfg` asks for, or `None` when fusion does not
    /// need one.
    pub fn provider(&self, cfg: &PipelineConfig) -> Result<Option<Box<dyn FeatureProvider + '_>>> {
        if cfg.method != FusionMethod::Swbf || cfg.k == 0 {
            return Ok(None);
        }
        let patch = self.frames.as_deref().map(|f| PatchDescriptor::new(f, cfg.patch_side));
        let p: Box<dyn FeatureProvider + '_> = match (cfg.provider, &self.embeddings, patch) {
            (ProviderChoice::Patch | ProviderChoice::Auto, None, Some(p)) | (ProviderChoice::Patch, _, Some(p)) => Box::new(p),
            (ProviderChoice::Embeddings | ProviderChoice::Auto, Some(e), Some(p)) => Box::new(WithFallback { primary: e, fallback: p }),
            (ProviderChoice::Embeddings | ProviderChoice::Auto, Some(e), None) => Box::new(e),
            (ProviderChoice::Embeddings, None, _) => {
                return Err(Error::Config("provider=embeddings but the manifest lists no embeddings file".into()))
            }
            (_, _, None) => {
                return Err(Error::Config("similarity rescoring needs frame images or an embeddings file".into()))
            }
        };
        Ok(Some(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProviderChoice {
    /// Embeddings file when the manifest has one (patches for misses),
    /// otherwise image patches.
    #[default]
    Auto,
    Patch,
    Embeddings,
}

impl FromStr for ProviderChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "patch" => Ok(Self::Patch),
            "embeddings" => Ok(Self::Embeddings),
            _ => Err(format!("unknown feature provider {s:?} (expected auto, patch or embeddings)")),
        }
    }
}

impl fmt::Display for ProviderChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Patch => "patch",
            Self::Embeddings => "embeddings",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub teacher_threshold: f64,
    pub iou_threshold: f64,
    pub post_threshold: f64,
    pub method: FusionMethod,
    pub composition: CompositionMode,
    pub min_coverage: f64,
    pub provider: ProviderChoice,
    pub patch_side: usize,
    pub source_count: SourceCount,
    pub match_rule: MatchRule,
    pub snms_sigma: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        let p = PropagationConfig::default();
        Self {
            k: 1,
            teacher_threshold: p.teacher_threshold,
            iou_threshold: f.iou_threshold,
            post_threshold: f.post_threshold,
            method: f.method,
            composition: p.mode,
            min_coverage: p.min_coverage,
            provider: ProviderChoice::Auto,
            patch_side: DEFAULT_PATCH_SIDE,
            source_count: SourceCount::Effective,
            match_rule: f.match_rule,
            snms_sigma: f.snms_sigma,
        }
    }
}

pub const CONFIG_KEYS: [&str; 12] = [
    "k",
    "teacher_threshold",
    "iou_threshold",
    "post_threshold",
    "method",
    "composition",
    "min_coverage",
    "provider",
    "patch_side",
    "source_count",
    "match_rule",
    "snms_sigma",
];

impl PipelineConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("bad value {value:?} for `{key}`: {e}")))
        }
        match key {
            "k" => self.k = parse(key, value)?,
            "teacher_threshold" => self.teacher_threshold = parse(key, value)?,
            "iou_threshold" | "thr" => self.iou_threshold = parse(key, value)?,
            "post_threshold" => self.post_threshold = parse(key, value)?,
            "method" => self.method = parse(key, value)?,
            "composition" => self.composition = parse(key, value)?,
            "min_coverage" => self.min_coverage = parse(key, value)?,
            "provider" => self.provider = parse(key, value)?,
            "patch_side" => self.patch_side = parse(key, value)?,
            "source_count" => self.source_count = parse(key, value)?,
            "match_rule" => self.match_rule = parse(key, value)?,
            "snms_sigma" => self.snms_sigma = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and lines starting with `#`
    /// are skipped.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => err(m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("teacher_threshold", self.teacher_threshold),
            ("iou_threshold", self.iou_threshold),
            ("post_threshold", self.post_threshold),
            ("min_coverage", self.min_coverage),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.patch_side == 0 {
            return Err(Error::Config("patch_side must be at least 1".into()));
        }
        self.fusion(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            mode: self.composition,
            min_coverage: self.min_coverage,
            teacher_threshold: self.teacher_threshold,
        }
    }

    /// Fusion settings for a frame whose candidates came from
    /// `effective_sources` frames.
    pub fn fusion(&self, effective_sources: usize) -> FusionConfig {
        FusionConfig {
            method: self.method,
            iou_threshold: self.iou_threshold,
            num_sources: self.source_count.resolve(self.k, effective_sources).max(1),
            snms_sigma: self.snms_sigma,
            post_threshold: self.post_threshold,
            match_rule: self.match_rule,
        }
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("k", self.k.to_string()),
            ("teacher_threshold", self.teacher_threshold.to_string()),
            ("iou_threshold", self.iou_threshold.to_string()),
            ("post_threshold", self.post_threshold.to_string()),
            ("method", self.method.to_string()),
            ("composition", self.composition.to_string()),
            ("min_coverage", self.min_coverage.to_string()),
            ("provider", self.provider.to_string()),
            ("patch_side", self.patch_side.to_string()),
            ("source_count", self.source_count.to_string()),
            ("match_rule", self.match_rule.to_string()),
            ("snms_sigma", self.snms_sigma.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Fuses one frame's candidates. With k = 0 the thresholded detector output
/// is passed through unchanged (apart from the post threshold).
pub fn fuse_candidates(
    cands: &CandidateSet,
    cfg: &PipelineConfig,
    provider: Option<&dyn FeatureProvider>,
) -> Result<(LabelSet, FrameCounts)> {
    let mut counts = FrameCounts {
        frame: cands.frame_index,
        candidates: cands.len(),
        per_offset: cands.per_offset(),
        effective_sources: cands.effective_sources,
        ..FrameCounts::default()
    };
    if cfg.k == 0 {
        let labels = cands.label_set().above(cfg.post_threshold);
        counts.clusters = cands.len();
        counts.kept = labels.len();
        return Ok((labels, counts));
    }
    let fused = fuse(cands, &cfg.fusion(cands.effective_sources), provider)?;
    counts.clusters = fused.fused_before_threshold;
    counts.dropped_by_rescore = fused.dropped_by_rescore;
    counts.kept = fused.labels.len();
    Ok((fused.labels, counts))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct FrameCounts {
    pub frame: usize,
    pub candidates: usize,
    pub per_offset: BTreeMap<i32, usize>,
    pub effective_sources: usize,
    /// Fused boxes before the post threshold.
    pub clusters: usize,
    pub dropped_by_rescore: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimes {
    pub propagate_s: f64,
    pub fuse_s: f64,
    pub write_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameFailure {
    pub frame: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunTotals {
    pub frames: usize,
    pub candidates: usize,
    pub per_offset: BTreeMap<i32, usize>,
    pub clusters: usize,
    pub dropped_by_rescore: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: BTreeMap<&'static str, String>,
    pub totals: RunTotals,
    pub frames: Vec<FrameCounts>,
    pub failures: Vec<FrameFailure>,
    /// Wall-clock seconds summed over frames; left out unless asked for so
    /// reports stay reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Fused labels for every target that succeeded, ascending by frame.
    pub labels: Vec<LabelSet>,
    pub report: RunReport,
    pub times: StageTimes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 lets the pool pick.
    pub jobs: usize,
    /// Record per-frame failures and go on instead of stopping.
    pub keep_going: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            keep_going: false,
        }
    }
}

type FrameResult = std::result::Result<(LabelSet, FrameCounts, Duration, Duration), (usize, Error)>;

/// Runs propagation and fusion for each of `targets`.
pub fn run_pipeline(seq: &Sequence, cfg: &PipelineConfig, targets: &[usize], opts: RunOptions) -> Result<PipelineOutput> {
    cfg.validate()?;
    seq.check_flows(cfg.k)?;
    if let Some(&bad) = targets.iter().find(|&&t| t >= seq.len()) {
        return Err(Error::Config(format!("frame {bad} is outside the sequence (length {})", seq.len())));
    }
    let provider = seq.provider(cfg)?;
    let provider = provider.as_deref();
    let prop = cfg.propagation();

    let work = |t: usize| -> FrameResult {
        let start = Instant::now();
        let cands = build_candidates(t, cfg.k, &seq.detections, &seq.flows, seq.size, &prop);
        let propagated = start.elapsed();
        let start = Instant::now();
        let (labels, counts) = fuse_candidates(&cands, cfg, provider).map_err(|e| (t, e))?;
        Ok((labels, counts, propagated, start.elapsed()))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<FrameResult> = pool.install(|| targets.par_iter().map(|&t| work(t)).collect());

    let mut labels = Vec::with_capacity(results.len());
    let mut frames = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    let mut totals = RunTotals::default();
    let mut times = StageTimes::default();
    for r in results {
        match r {
            Ok((l, c, p, f)) => {
                times.propagate_s += p.as_secs_f64();
                times.fuse_s += f.as_secs_f64();
                totals.frames += 1;
                totals.candidates += c.candidates;
                totals.clusters += c.clusters;
                totals.dropped_by_rescore += c.dropped_by_rescore;
                totals.kept += c.kept;
                for (&o, &n) in &c.per_offset {
                    *totals.per_offset.entry(o).or_insert(0) += n;
                }
                labels.push(l);
                frames.push(c);
            }
            Err((t, e)) if opts.keep_going => {
                log::warn!("frame {t}: {e}");
                failures.push(FrameFailure {
                    frame: t,
                    message: e.to_string(),
                });
            }
            Err((t, e)) => {
                log::error!("frame {t} failed");
                return Err(e);
            }
        }
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i].frame_index);
    let labels = order.iter().map(|&i| labels[i].clone()).collect();
    let frames = order.iter().map(|&i| frames[i].clone()).collect();
    log::info!(
        "{} frames: {} candidates, {} kept; propagate {:.3}s, fuse {:.3}s",
        totals.frames,
        totals.candidates,
        totals.kept,
        times.propagate_s,
        times.fuse_s
    );
    Ok(PipelineOutput {
        labels,
        report: RunReport {
            config: cfg.entries().into_iter().collect(),
            totals,
            frames,
            failures,
            timings: None,
        },
        times,
    })
}

pub fn output_file_name(frame: usize) -> String {
    format!("frame_{frame:06}.jsonl")
}

/// Writes one JSONL file per frame and `report.json` under `dir`.
pub fn write_output(out: &mut PipelineOutput, vocab: &ClassVocab, dir: impl AsRef<Path>, with_timings: bool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let start = Instant::now();
    for ls in &out.labels {
        write_text(dir.join(output_file_name(ls.frame_index)), &format_label_set(ls, vocab))?;
    }
    out.times.write_s = start.elapsed().as_secs_f64();
    out.report.timings = with_timings.then_some(out.times);
    write_json(dir.join("report.json"), &out.report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: String,
    #[serde(flatten)]
    pub scores: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub frames: usize,
    pub k: usize,
    /// Thresholded detector output without any fusion.
    pub teacher: EvalReport,
    pub methods: Vec<AblationRow>,
}

impl AblationReport {
    pub fn best_map50(&self) -> Option<&AblationRow> {
        self.methods
            .iter()
            .max_by(|a, b| a.scores.map50.total_cmp(&b.scores.map50))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mAP,mAP50,mAP75\n");
        let mut row = |name: &str, r: &EvalReport| {
            s.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", r.map, r.map50, r.map75));
        };
        row("teacher", &self.teacher);
        for m in &self.methods {
            row(&m.method, &m.scores);
        }
        s
    }
}

/// Runs the pipeline once per method on all frames and scores each run
/// against the ground truth.
pub fn ablate(seq: &Sequence, base: &PipelineConfig, methods: &[FusionMethod], opts: RunOptions) -> Result<AblationReport> {
    let gt = seq
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Manifest("ablation needs ground truth for every frame".into()))?;
    let names = seq.vocab.names();
    let targets: Vec<usize> = (0..seq.len()).collect();
    let teacher: Vec<LabelSet> = seq.detections.iter().map(|l| l.above(base.teacher_threshold)).collect();
    let teacher = evaluate(&teacher, gt, names)?;
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let cfg = PipelineConfig { method, ..*base };
        let out = run_pipeline(seq, &cfg, &targets, opts)?;
        let scores = evaluate(&out.labels, gt, names)?;
        log::info!("{method}: mAP50 {:.4}", scores.map50);
        rows.push(AblationRow {
            method: method.to_string(),
            scores,
        });
    }
    Ok(AblationReport {
        frames: seq.len(),
        k: base.k,
        teacher,
        methods: rows,
    })
}
