use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use trajcoa::chain::RunTrajectory;
use trajcoa::chunking::{cap_chunks, chunk_time_aware_with, ChunkOptions, DemographicsPlacement};
use trajcoa::rft::{self, RftConfig};
use trajcoa::run::{
    self, aggregate_reports, evaluate_files, load_dataset, write_atomic, ManifestError, Method,
    Overrides, RunContext, RunError, RunManifest,
};
use trajcoa::synth::{self, Placement, SynthConfig};
use trajcoa::{unify_to_xml, HeuristicCounter, TrajCoa};

#[derive(Parser)]
#[command(
    name = "trajcoa",
    version,
    about = "Chain-of-agents risk prediction over long patient records"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and dump its time-aware chunks as JSONL.
    Ingest(IngestArgs),
    /// Generate a synthetic cohort with planted signals.
    Synth(SynthArgs),
    /// Execute a run manifest.
    Run(RunArgs),
    /// Score a predictions file against dataset labels.
    Eval(EvalArgs),
    /// Mean and sample std of metrics across run directories.
    Aggregate(AggregateArgs),
    /// Collect rejection-sampled fine-tuning data.
    RftCollect(RftArgs),
    /// Print one subject's agent steps from a run.
    InspectTrajectory(InspectArgs),
}

#[derive(Args)]
struct IngestArgs {
    dataset: PathBuf,
    #[arg(long, default_value_t = 8192)]
    chunk_tokens: usize,
    #[arg(long, default_value_t = 15)]
    max_chunks: usize,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synth settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    controls: Option<usize>,
    /// Median XML tokens for both classes (fixed length).
    #[arg(long)]
    tokens: Option<f64>,
    /// earliest-quartile, uniform, last-year-weighted or window:A:B
    #[arg(long)]
    placement: Option<Placement>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Planted-truth JSONL.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ManifestFlags {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    chunk_tokens: Option<usize>,
    #[arg(long)]
    max_chunks: Option<usize>,
}

impl ManifestFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            method: self.method,
            dataset: self.dataset.clone(),
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            parallelism: self.parallelism,
            budget: self.budget,
            chunk_tokens: self.chunk_tokens,
            max_chunks: self.max_chunks,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    manifest: PathBuf,
    #[command(flatten)]
    flags: ManifestFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RftArgs {
    /// Run manifest supplying dataset, backend and chain settings.
    manifest: PathBuf,
    #[command(flatten)]
    flags: ManifestFlags,
    /// TOML file with rft settings; flags override it.
    #[arg(long)]
    rft_config: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// SFT samples JSONL.
    #[arg(long)]
    out: PathBuf,
    /// All candidate trajectories; defaults next to `--out`.
    #[arg(long)]
    trajectories: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Run directory or trajectories JSONL.
    path: PathBuf,
    #[arg(long)]
    subject: String,
    /// Show only this step (0-based, manager last).
    #[arg(long)]
    step: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(r) = e.downcast_ref::<RunError>() {
        return r.exit_code() as u8;
    }
    if e.downcast_ref::<ManifestError>().is_some()
        || matches!(
            e.downcast_ref::<rft::RftError>(),
            Some(rft::RftError::InvalidConfig(_))
        )
    {
        return 2;
    }
    1
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synthesize(a),
        Command::Run(a) => run_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Aggregate(a) => aggregate(a),
        Command::RftCollect(a) => rft_collect(a),
        Command::InspectTrajectory(a) => inspect(a),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .context("writing stdout"),
    }
}

fn ingest(a: IngestArgs) -> Result<u8> {
    let records = load_dataset(&a.dataset)?;
    let counter = HeuristicCounter::default();
    let options = ChunkOptions {
        demographics: DemographicsPlacement::FirstChunk,
    };
    let mut out = String::new();
    for record in &records {
        let doc = unify_to_xml(record);
        let chunks = chunk_time_aware_with(&doc, a.chunk_tokens, &counter, options)
            .with_context(|| format!("chunking {}", record.subject_id))?;
        let total = chunks.len();
        let (kept, kept_index) = cap_chunks(chunks, a.max_chunks);
        for (chunk, original) in kept.iter().zip(kept_index) {
            let line = json!({
                "subject_id": record.subject_id,
                "index": chunk.index,
                "original_index": original,
                "of": total,
                "token_count": chunk.token_count,
                "time_span": chunk.time_span,
                "flag": chunk.carried_timestamp_split,
                "text": chunk.text,
            });
            out += &(line.to_string() + "\n");
        }
    }
    write_out(a.out.as_deref(), &out)?;
    eprintln!("{} subjects validated", records.len());
    Ok(0)
}

fn synthesize(a: SynthArgs) -> Result<u8> {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(n) = a.cases {
        config.cases = n;
    }
    if let Some(n) = a.controls {
        config.controls = n;
    }
    if let Some(t) = a.tokens {
        config.case_tokens = synth::LengthDist::fixed(t);
        config.control_tokens = synth::LengthDist::fixed(t);
    }
    if let Some(p) = a.placement {
        config.placement = p;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let (records, truth) = match synth::generate_cohort(&config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    write_out(Some(&a.out), &synth::to_jsonl(&records))?;
    if let Some(t) = &a.truth {
        write_out(Some(t), &synth::to_jsonl(&truth))?;
    }
    eprintln!(
        "{} cases, {} controls -> {}",
        config.cases,
        config.controls,
        a.out.display()
    );
    Ok(0)
}

fn load_manifest(path: &Path, flags: &ManifestFlags) -> Result<RunManifest> {
    let mut manifest = RunManifest::load(path)?;
    manifest.apply(&flags.overrides());
    manifest.validate()?;
    Ok(manifest)
}

fn run_cmd(a: RunArgs) -> Result<u8> {
    let manifest = load_manifest(&a.manifest, &a.flags)?;
    let outcomes = run::run_manifest(&manifest)?;
    let mut code = 0;
    for o in &outcomes {
        eprintln!(
            "{} [{}]: {:?}, {} computed, {} resumed, {} failed, {} pending",
            o.output_dir.display(),
            o.config_fingerprint,
            o.status,
            o.computed,
            o.resumed,
            o.failures.len(),
            o.pending
        );
        for f in &o.failures {
            eprintln!("  {}: {}", f.subject_id, f.error);
        }
        match (&o.metrics, &o.metrics_note) {
            (Some(m), _) => print!("{}", m.to_table()),
            (None, Some(note)) => eprintln!("  no metrics: {note}"),
            _ => {}
        }
        code = code.max(o.status.exit_code());
    }
    Ok(code as u8)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let report = evaluate_files(&a.predictions, &a.dataset)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(0)
}

fn aggregate(a: AggregateArgs) -> Result<u8> {
    let summary = aggregate_reports(&a.runs)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", summary.to_table());
    }
    Ok(0)
}

fn rft_collect(a: RftArgs) -> Result<u8> {
    let manifest = load_manifest(&a.manifest, &a.flags)?;
    if !manifest.method.is_chain() {
        bail!("rft-collect needs a traj-coa manifest");
    }
    let mut config = match &a.rft_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<RftConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => RftConfig {
            seed: manifest.seed,
            ..RftConfig::default()
        },
    };
    if let Some(n) = a.candidates {
        config.candidates = n;
    }
    if let Some(t) = a.temperature {
        config.temperature = t;
    }
    let records = load_dataset(&manifest.dataset)?;
    let ctx = RunContext::from_manifest(&manifest)?;
    let chain = TrajCoa::new(
        manifest.gateway(ctx.backend),
        ctx.templates,
        manifest.effective_chain(),
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.parallelism)
        .build()?;
    let outcome = pool.install(|| rft::collect(&chain, &records, &config))?;

    write_out(Some(&a.out), &synth::to_jsonl(&outcome.samples))?;
    let trajectories = a
        .trajectories
        .unwrap_or_else(|| a.out.with_extension("candidates.jsonl"));
    write_out(Some(&trajectories), &synth::to_jsonl(&outcome.candidates))?;
    for f in &outcome.failures {
        eprintln!("  {f}");
    }
    let s = &outcome.summary;
    eprintln!(
        "{} subjects: {} retained, {} rejected, {} failed; {} samples",
        s.subjects, s.retained, s.rejected, s.failed, s.samples
    );
    Ok(if s.failed > 0 { 4 } else { 0 })
}

fn inspect(a: InspectArgs) -> Result<u8> {
    let file = if a.path.is_dir() {
        a.path.join("trajectories.jsonl")
    } else {
        a.path.clone()
    };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let line = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<serde_json::Value>)
        .find(|v| matches!(v, Ok(v) if v["subject_id"] == a.subject.as_str()))
        .with_context(|| format!("subject {} not in {}", a.subject, file.display()))??;
    let Ok(trajectory) = serde_json::from_value::<RunTrajectory>(line.clone()) else {
        // single-shot baselines have one call and no steps
        println!("{}", serde_json::to_string_pretty(&line)?);
        return Ok(0);
    };
    println!(
        "subject {}  score {}  chunks kept {:?}  memory events {}",
        trajectory.subject_id,
        trajectory.score,
        trajectory.kept_chunks,
        trajectory.memory.len()
    );
    for (i, step) in trajectory.steps.iter().enumerate() {
        if a.step.is_some_and(|s| s != i) {
            continue;
        }
        let label = match step.chunk_index {
            Some(c) => format!("worker {c}"),
            None => "manager".to_string(),
        };
        println!(
            "\n[{i}] {label}  attempts {}  prompt {}  output {}{}",
            step.attempts,
            step.prompt_tokens,
            step.output_tokens,
            if step.degraded { "  (degraded)" } else { "" }
        );
        println!("{}", serde_json::to_string_pretty(&step.parsed)?);
    }
    if a.step.is_none() && !trajectory.memory.is_empty() {
        println!("\nmemory:");
        for e in &trajectory.memory {
            println!("  {}", e.render());
        }
    }
    Ok(0)
}
