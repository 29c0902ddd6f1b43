use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use propfuse::bplp::build_candidates;
use propfuse::error::{Error, Result};
use propfuse::eval::{evaluate, self_consistency, ConsistencyConfig, ConsistencyReport};
use propfuse::fusion::FusionMethod;
use propfuse::pipeline::io::{
    candidate_sets, format_candidates, format_label_set, group_by_frame, read_label_dir, read_labels, write_json,
    write_text, ClassVocab, LabelRecord, Vocabulary,
};
use propfuse::pipeline::{ablate, fuse_candidates, run_pipeline, write_output, PipelineConfig, RunOptions, Sequence};
use propfuse::synth::{generate, presets, write_bundle, SceneSpec};

#[derive(Parser)]
#[command(name = "propfuse", version, about = "Propagate detections along motion fields and fuse them into pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence directory.
    Synth(SynthArgs),
    /// Write the candidate set of one frame.
    Propagate(PropagateArgs),
    /// Fuse a candidate file.
    Fuse(FuseArgs),
    /// Propagate and fuse every frame of a sequence.
    Pipeline(PipelineArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Forward/backward motion round trip of one frame's boxes.
    Selfcheck(SelfcheckArgs),
    /// Compare fusion methods on a sequence with ground truth.
    Ablate(AblateArgs),
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    teacher_threshold: Option<String>,
    #[arg(long)]
    iou_threshold: Option<String>,
    #[arg(long)]
    post_threshold: Option<String>,
    #[arg(long)]
    composition: Option<String>,
    #[arg(long)]
    min_coverage: Option<String>,
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    source_count: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("k", &self.k),
            ("method", &self.method),
            ("teacher_threshold", &self.teacher_threshold),
            ("iou_threshold", &self.iou_threshold),
            ("post_threshold", &self.post_threshold),
            ("composition", &self.composition),
            ("min_coverage", &self.min_coverage),
            ("provider", &self.provider),
            ("source_count", &self.source_count),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Built-in scene: occlusion, type-b or benchmark.
    #[arg(long)]
    preset: Option<String>,
    /// Length of the benchmark preset.
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Overrides the scene seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FuseArgs {
    /// Candidate JSONL file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sequence the candidates came from; needed for swbf.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated target frames (default: all).
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record failing frames in the report and continue.
    #[arg(long)]
    keep_going: bool,
    /// Add wall-clock stage times to report.json.
    #[arg(long)]
    report_timings: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection JSONL file or directory.
    #[arg(long)]
    dets: PathBuf,
    /// Ground-truth JSONL file or directory.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a one-row CSV summary.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    frame: usize,
    #[arg(long, default_value_t = 1)]
    hops: usize,
    #[arg(long)]
    out: PathBuf,
    /// Boxes to move: gt or detections.
    #[arg(long, default_value = "gt")]
    labels: String,
    #[arg(long, default_value = "trajectory")]
    composition: String,
    #[arg(long, default_value_t = 0.25)]
    min_coverage: f64,
    #[arg(long, default_value_t = 45.0)]
    small_height: f64,
}

#[derive(Args)]
struct AblateArgs {
    /// Sequence with ground truth; a generated benchmark is used if absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Length of the generated benchmark.
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match (&a.spec, a.preset.as_deref()) {
        (Some(p), _) => SceneSpec::load(p)?,
        (None, Some("occlusion")) => presets::occlusion(),
        (None, Some("type-b")) => presets::type_b(),
        (None, Some("benchmark")) => presets::benchmark(a.frames, a.seed.unwrap_or(0)),
        (None, Some(other)) => return Err(Error::Config(format!("unknown preset {other:?}"))),
        (None, None) => unreachable!("clap requires one of --spec and --preset"),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let bundle = generate(&spec)?;
    write_bundle(&bundle, &a.out)?;
    log::info!("wrote {} frames to {}", bundle.len(), a.out.display());
    Ok(())
}

fn propagate(a: &PropagateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let seq = Sequence::load(&a.manifest)?;
    seq.check_flows(cfg.k)?;
    if a.frame >= seq.len() {
        return Err(Error::Config(format!("frame {} is outside the sequence (length {})", a.frame, seq.len())));
    }
    let cands = build_candidates(a.frame, cfg.k, &seq.detections, &seq.flows, seq.size, &cfg.propagation());
    write_text(&a.out, &format_candidates(&cands, &seq.vocab))
}

fn fuse_file(a: &FuseArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let seq = a.manifest.as_ref().map(Sequence::load).transpose()?;
    let mut vocab = seq.as_ref().map(|s| s.vocab.clone()).unwrap_or_default();
    let mode = if seq.is_some() { Vocabulary::Fixed } else { Vocabulary::Grow };
    let records = read_labels(&a.input, &mut vocab, mode)?;
    let provider = match &seq {
        Some(s) => s.provider(&cfg)?,
        None if cfg.method == FusionMethod::Swbf && cfg.k > 0 => {
            return Err(Error::Config("swbf needs --manifest to compute box features".into()))
        }
        None => None,
    };
    let mut text = String::new();
    for mut cs in candidate_sets(&records) {
        if cs.effective_sources == 0 {
            cs.effective_sources = 2 * cfg.k + 1;
        }
        let (labels, _) = fuse_candidates(&cs, &cfg, provider.as_deref())?;
        text.push_str(&format_label_set(&labels, &vocab));
    }
    write_text(&a.out, &text)
}

fn pipeline(a: &PipelineArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let seq = Sequence::load(&a.manifest)?;
    let targets: Vec<usize> = if a.frames.is_empty() {
        (0..seq.len()).collect()
    } else {
        a.frames.clone()
    };
    let opts = RunOptions {
        jobs: a.jobs,
        keep_going: a.keep_going,
    };
    let mut out = run_pipeline(&seq, &cfg, &targets, opts)?;
    write_output(&mut out, &seq.vocab, &a.out, a.report_timings)
}

fn read_any(path: &Path, vocab: &mut ClassVocab, mode: Vocabulary) -> Result<Vec<LabelRecord>> {
    if path.is_dir() {
        read_label_dir(path, vocab, mode)
    } else {
        read_labels(path, vocab, mode)
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut vocab = ClassVocab::default();
    let gt = read_any(&a.gt, &mut vocab, Vocabulary::Grow)?;
    let dets = read_any(&a.dets, &mut vocab, Vocabulary::Fixed)?;
    let report = evaluate(&group_by_frame(&dets), &group_by_frame(&gt), vocab.names())?;
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    write_json(&a.out, &report)
}

#[derive(Serialize)]
struct NamedConsistency<'a> {
    classes: &'a [String],
    #[serde(flatten)]
    report: ConsistencyReport,
}

fn selfcheck(a: &SelfcheckArgs) -> Result<()> {
    let seq = Sequence::load(&a.manifest)?;
    let labels = match a.labels.as_str() {
        "gt" => seq
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Manifest("no ground truth listed; use --labels detections".into()))?,
        "detections" => &seq.detections,
        other => return Err(Error::Config(format!("--labels must be gt or detections, got {other:?}"))),
    };
    let frame = labels
        .get(a.frame)
        .ok_or_else(|| Error::Config(format!("frame {} is outside the sequence (length {})", a.frame, seq.len())))?;
    let cfg = ConsistencyConfig {
        hops: a.hops,
        mode: a.composition.parse().map_err(Error::Config)?,
        min_coverage: a.min_coverage,
        small_height: a.small_height,
    };
    let report = self_consistency(frame, &seq.flows, seq.size, &cfg)?;
    write_json(
        &a.out,
        &NamedConsistency {
            classes: seq.vocab.names(),
            report,
        },
    )
}

fn ablation(a: &AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let seq = match &a.manifest {
        Some(m) => Sequence::load(m)?,
        None => Sequence::from_bundle(&generate(&presets::benchmark(a.frames, a.seed))?),
    };
    let opts = RunOptions {
        jobs: a.jobs,
        keep_going: false,
    };
    let report = ablate(&seq, &cfg, &FusionMethod::ALL, opts)?;
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    write_json(&a.out, &report)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Propagate(a) => propagate(a),
        Command::Fuse(a) => fuse_file(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Eval(a) => eval(a),
        Command::Selfcheck(a) => selfcheck(a),
        Command::Ablate(a) => ablation(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PROPFUSE_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
