//! Run manifests, experiment execution and artifact persistence.
//!
//! A run writes one file per finished subject under `subjects/` and then
//! assembles the cohort artifacts from those files. Subject files are the
//! resume state: a rerun skips every subject that already has one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    BaselineTrace, EmbeddingBackend, HttpEmbedder, MockEmbedder, RagConfig, SingleShot,
};
use crate::chain::{ChainConfig, Prediction, RunTrajectory, TrajCoa};
use crate::chunking::TruncationStrategy;
use crate::llm::{
    report_from, Backend, CallRecord, Gateway, HttpBackend, HttpConfig, RetryPolicy, UsageLedger,
    UsageReport,
};
use crate::memory::MemoryEvent;
use crate::metrics::{evaluate_run, EvalError, MetricReport};
use crate::prompts::{TemplateError, TemplateSet};
use crate::record::{parse_dataset, DatasetError, PatientRecord};
use crate::synth::{OracleBackend, OracleConfig};
use crate::tokens::HeuristicCounter;

/// Environment variable read for the API key when the manifest names none.
pub const DEFAULT_API_KEY_ENV: &str = "TRAJCOA_API_KEY";

/// Margin applied to budgets with a remote tokenizer when none is set.
pub const HTTP_TOKEN_MARGIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TrajCoa,
    TrajCoaAblation,
    VanillaLeft,
    VanillaMiddle,
    Rag,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::TrajCoa => "traj-coa",
            Method::TrajCoaAblation => "traj-coa-ablation",
            Method::VanillaLeft => "vanilla-left",
            Method::VanillaMiddle => "vanilla-middle",
            Method::Rag => "rag",
        }
    }

    pub fn is_chain(self) -> bool {
        matches!(self, Method::TrajCoa | Method::TrajCoaAblation)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            Method::TrajCoa,
            Method::TrajCoaAblation,
            Method::VanillaLeft,
            Method::VanillaMiddle,
            Method::Rag,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout() -> u64 {
    300
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    Oracle {
        #[serde(default)]
        oracle: OracleConfig,
    },
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Oracle {
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Mock {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_dim() -> usize {
    256
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Mock { dim: default_dim() }
    }
}

/// Chunk-size sweep at a fixed total context: child `k` runs with
/// `chunk_tokens = k` and `max_chunks = context_tokens / k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub chunk_tokens: Vec<usize>,
    pub context_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub method: Method,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Token budget for the record body; vanilla methods only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub rag: RagConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest syntax: {0}")]
    Syntax(String),
    #[error("invalid manifest: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Command-line values that take precedence over the manifest.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub budget: Option<usize>,
    pub chunk_tokens: Option<usize>,
    pub max_chunks: Option<usize>,
}

impl RunManifest {
    pub fn new(
        method: Method,
        dataset: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        RunManifest {
            method,
            dataset: dataset.into(),
            output_dir: output_dir.into(),
            seed: 0,
            parallelism: default_parallelism(),
            budget: None,
            templates_dir: None,
            backend: BackendConfig::default(),
            chain: ChainConfig::default(),
            rag: RagConfig::default(),
            embedder: EmbedderConfig::default(),
            sweep: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ManifestError> {
        toml::from_str(text).map_err(|e| ManifestError::Syntax(e.to_string()))
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut manifest.dataset, &mut manifest.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = manifest.templates_dir.as_mut().filter(|d| d.is_relative()) {
            *dir = base.join(&*dir);
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(d) = &o.dataset {
            self.dataset = d.clone();
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.parallelism {
            self.parallelism = p;
        }
        if let Some(b) = o.budget {
            self.budget = Some(b);
        }
        if let Some(k) = o.chunk_tokens {
            self.chain.chunk_tokens = k;
        }
        if let Some(c) = o.max_chunks {
            self.chain.max_chunks = c;
        }
    }

    /// Lists every violated field.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut problems = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                problems.push(msg.to_string());
            }
        };
        let c = &self.chain;
        need(self.parallelism >= 1, "parallelism must be >= 1");
        need(c.chunk_tokens >= 1, "chain.chunk_tokens must be >= 1");
        need(c.max_chunks >= 1, "chain.max_chunks must be >= 1");
        need(c.max_attempts >= 1, "chain.max_attempts must be >= 1");
        need(
            (0.0..0.5).contains(&c.token_margin),
            "chain.token_margin must be in [0, 0.5)",
        );
        need(
            c.decoding.temperature >= 0.0,
            "chain.decoding.temperature must be >= 0",
        );
        need(
            c.decoding.top_p > 0.0 && c.decoding.top_p <= 1.0,
            "chain.decoding.top_p must be in (0, 1]",
        );
        need(
            c.decoding.top_k != Some(0),
            "chain.decoding.top_k must be positive",
        );
        need(
            c.decoding.max_output_tokens >= 1,
            "chain.decoding.max_output_tokens must be >= 1",
        );
        match self.method {
            Method::VanillaLeft | Method::VanillaMiddle => {
                need(
                    self.budget.is_some(),
                    "budget is required for vanilla methods",
                );
                need(self.budget != Some(0), "budget must be >= 1");
            }
            Method::Rag => {
                need(self.rag.chunk_tokens >= 1, "rag.chunk_tokens must be >= 1");
                need(self.rag.top_n >= 1, "rag.top_n must be >= 1");
            }
            _ => {}
        }
        if let BackendConfig::Oracle { oracle } = &self.backend {
            need(
                !oracle.score_table.is_empty(),
                "backend.oracle.score_table must not be empty",
            );
            need(
                oracle.score_table.iter().all(|s| (1..=10).contains(s)),
                "backend.oracle.score_table entries must be in 1..=10",
            );
        }
        if let EmbedderConfig::Mock { dim } = self.embedder {
            need(dim >= 1, "embedder.dim must be >= 1");
        }
        if let Some(s) = &self.sweep {
            need(self.method.is_chain(), "sweep needs a traj-coa method");
            need(
                !s.chunk_tokens.is_empty(),
                "sweep.chunk_tokens must not be empty",
            );
            need(
                s.chunk_tokens
                    .iter()
                    .all(|&k| k >= 1 && k <= s.context_tokens),
                "sweep.chunk_tokens entries must be in 1..=sweep.context_tokens",
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ManifestError::Invalid(problems))
        }
    }

    /// Child manifests of a sweep, or the manifest itself.
    pub fn expand(&self) -> Vec<RunManifest> {
        let Some(sweep) = &self.sweep else {
            return vec![self.clone()];
        };
        sweep
            .chunk_tokens
            .iter()
            .map(|&k| {
                let mut child = self.clone();
                child.sweep = None;
                child.chain.chunk_tokens = k;
                child.chain.max_chunks = (sweep.context_tokens / k).max(1);
                child.output_dir = self.output_dir.join(format!("k{k}"));
                child
            })
            .collect()
    }

    /// Token margin in force: the configured one, or a default for remote
    /// tokenizers when the configured one is zero.
    pub fn effective_margin(&self) -> f64 {
        match self.backend {
            BackendConfig::Http { .. } if self.chain.token_margin == 0.0 => HTTP_TOKEN_MARGIN,
            _ => self.chain.token_margin,
        }
    }

    /// Chain settings in force: margin resolved and ablation set by method.
    pub fn effective_chain(&self) -> ChainConfig {
        let mut chain = self.chain.clone();
        chain.token_margin = self.effective_margin();
        chain.ablation = self.method == Method::TrajCoaAblation;
        chain
    }

    /// Gateway over `backend` with this manifest's retry policy.
    pub fn gateway(&self, backend: Arc<dyn Backend>) -> Gateway {
        Gateway::new(backend, Arc::new(HeuristicCounter::default()))
            .with_retry(retry_policy(&self.backend))
    }

    /// Stable hash of the settings that determine results. Paths,
    /// parallelism and credential sources are left out.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("manifest serializes");
        if let Value::Object(map) = &mut value {
            for key in ["dataset", "output_dir", "parallelism", "templates_dir"] {
                map.remove(key);
            }
            if let Some(Value::Object(b)) = map.get_mut("backend") {
                b.remove("api_key_env");
                b.remove("timeout_secs");
                b.remove("retry");
            }
            if let Some(Value::Object(e)) = map.get_mut("embedder") {
                e.remove("api_key_env");
                e.remove("timeout_secs");
            }
        }
        let canonical = serde_json::to_string(&canonicalize(value)).expect("json");
        hex(&Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }
}

fn canonicalize(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(xs) => Value::Array(xs.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn api_key(env: &str) -> Option<String> {
    std::env::var(env).ok().filter(|k| !k.is_empty())
}

pub fn build_backend(config: &BackendConfig) -> Arc<dyn Backend> {
    match config {
        BackendConfig::Oracle { oracle } => Arc::new(OracleBackend::new(oracle.clone())),
        BackendConfig::Http {
            endpoint,
            model,
            api_key_env,
            timeout_secs,
            ..
        } => {
            let mut http = HttpConfig::new(endpoint.clone(), model.clone());
            http.api_key = api_key(api_key_env);
            http.timeout_secs = *timeout_secs;
            Arc::new(HttpBackend::new(http))
        }
    }
}

pub fn build_embedder(config: &EmbedderConfig) -> Arc<dyn EmbeddingBackend> {
    match config {
        EmbedderConfig::Mock { dim } => Arc::new(MockEmbedder { dim: *dim }),
        EmbedderConfig::Http {
            endpoint,
            model,
            api_key_env,
            timeout_secs,
        } => {
            let mut http = HttpConfig::new(endpoint.clone(), model.clone());
            http.api_key = api_key(api_key_env);
            http.timeout_secs = *timeout_secs;
            Arc::new(HttpEmbedder::new(http))
        }
    }
}

fn retry_policy(config: &BackendConfig) -> RetryPolicy {
    match config {
        BackendConfig::Oracle { .. } => RetryPolicy::no_delay(1),
        BackendConfig::Http { retry, .. } => *retry,
    }
}

/// Everything persisted for one finished subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub config_fingerprint: String,
    pub subject_id: String,
    pub prediction: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<RunTrajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineTrace>,
    pub usage: Vec<CallRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectFailure {
    pub subject_id: String,
    pub error: String,
    pub backend: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    /// Some subjects are missing; rerunning resumes.
    Partial,
    /// Nothing completed and the backend failed.
    BackendFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Complete => 0,
            RunStatus::BackendFailure => 3,
            RunStatus::Partial => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub config_fingerprint: String,
    pub status: RunStatus,
    pub subjects: usize,
    /// Subjects computed by this invocation.
    pub computed: usize,
    /// Subjects loaded from an earlier invocation.
    pub resumed: usize,
    pub failures: Vec<SubjectFailure>,
    /// Subjects skipped after a backend failure stopped the run.
    pub pending: usize,
    pub metrics: Option<MetricReport>,
    /// Why metrics are absent on a complete run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_note: Option<String>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("dataset {path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error(transparent)]
    Templates(#[from] TemplateError),
    #[error("{path} belongs to run {found}, not {expected}; use a fresh output directory")]
    FingerprintMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Io { .. } => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = path.with_file_name(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// File name for a subject: the id with unsafe characters replaced, plus a
/// hash so distinct ids never collide.
pub fn subject_file_name(subject_id: &str) -> String {
    let safe: String = subject_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .take(64)
        .collect();
    let digest = hex(&Sha256::digest(subject_id.as_bytes()));
    format!("{safe}-{}.json", &digest[..8])
}

/// Per-subject seed derived from the run seed.
pub fn subject_seed(seed: u64, subject_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(subject_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn load_dataset(path: &Path) -> Result<Vec<PatientRecord>, RunError> {
    let file = fs::File::open(path).map_err(|e| RunError::Dataset {
        path: path.to_path_buf(),
        source: DatasetError::Io(e),
    })?;
    parse_dataset(BufReader::new(file)).map_err(|source| RunError::Dataset {
        path: path.to_path_buf(),
        source,
    })
}

/// Backend, embedder and templates a run uses.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub backend: Arc<dyn Backend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub templates: TemplateSet,
}

impl RunContext {
    pub fn from_manifest(manifest: &RunManifest) -> Result<Self, RunError> {
        let templates = match &manifest.templates_dir {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        Ok(RunContext {
            backend: build_backend(&manifest.backend),
            embedder: build_embedder(&manifest.embedder),
            templates,
        })
    }
}

struct Runner<'a> {
    manifest: &'a RunManifest,
    ctx: &'a RunContext,
    fingerprint: String,
    chain: ChainConfig,
    budget: usize,
}

impl Runner<'_> {
    fn run_subject(&self, record: &PatientRecord) -> Result<SubjectResult, SubjectFailure> {
        let ledger = Arc::new(UsageLedger::new());
        let gateway = self
            .manifest
            .gateway(self.ctx.backend.clone())
            .with_ledger(ledger.clone());
        let seed = subject_seed(self.manifest.seed, &record.subject_id);
        let fail = |error: String, backend: bool| SubjectFailure {
            subject_id: record.subject_id.clone(),
            error,
            backend,
        };
        let (prediction, trajectory, baseline) = if self.manifest.method.is_chain() {
            let mut config = self.chain.clone();
            config.seed = Some(seed);
            let chain = TrajCoa::new(gateway, self.ctx.templates.clone(), config);
            let (p, t) = chain
                .predict(record, &self.fingerprint)
                .map_err(|e| fail(e.to_string(), e.is_backend_failure()))?;
            (p, Some(t), None)
        } else {
            let mut single = SingleShot::new(gateway, self.ctx.templates.clone());
            single.decoding = self.chain.decoding;
            single.max_attempts = self.chain.max_attempts;
            single.seed = Some(seed);
            let result = match self.manifest.method {
                Method::VanillaLeft => single.predict_vanilla(
                    record,
                    self.budget,
                    TruncationStrategy::Left,
                    &self.fingerprint,
                ),
                Method::VanillaMiddle => single.predict_vanilla(
                    record,
                    self.budget,
                    TruncationStrategy::Middle,
                    &self.fingerprint,
                ),
                _ => single.predict_rag(
                    record,
                    self.ctx.embedder.as_ref(),
                    &self.manifest.rag,
                    &self.fingerprint,
                ),
            };
            let (p, t) = result.map_err(|e| fail(e.to_string(), e.is_backend_failure()))?;
            (p, None, Some(t))
        };
        Ok(SubjectResult {
            config_fingerprint: self.fingerprint.clone(),
            subject_id: record.subject_id.clone(),
            prediction,
            trajectory,
            baseline,
            usage: ledger.records(),
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|item| serde_json::to_string(&item).expect("json") + "\n")
        .collect()
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_fingerprint: &'a str,
    #[serde(flatten)]
    inner: T,
}

#[derive(Serialize)]
struct MemoryLine<'a> {
    subject_id: &'a str,
    events: &'a [MemoryEvent],
}

/// Runs one manifest (sweeps are expanded by [`run_manifest`]) with the
/// backends in `ctx`.
pub fn run_experiment(manifest: &RunManifest, ctx: &RunContext) -> Result<RunOutcome, RunError> {
    manifest.validate()?;
    if manifest.sweep.is_some() {
        return Err(ManifestError::Invalid(vec![
            "run_experiment takes a single run; expand the sweep first".into(),
        ])
        .into());
    }
    let records = load_dataset(&manifest.dataset)?;
    let fingerprint = manifest.fingerprint();
    let out = &manifest.output_dir;
    let subjects_dir = out.join("subjects");
    fs::create_dir_all(&subjects_dir).map_err(|e| io_err(&subjects_dir, e))?;

    let runner = Runner {
        manifest,
        ctx,
        fingerprint: fingerprint.clone(),
        chain: manifest.effective_chain(),
        budget: crate::tokens::apply_margin(
            manifest.budget.unwrap_or(1),
            manifest.effective_margin(),
        )
        .max(1),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.parallelism)
        .build()
        .map_err(|e| io_err(out, e))?;
    let stop = AtomicBool::new(false);

    enum Done {
        Resumed(Box<SubjectResult>),
        Computed(Box<SubjectResult>),
        Failed(SubjectFailure),
        Pending,
    }

    let done: Vec<Result<Done, RunError>> = pool.install(|| {
        records
            .par_iter()
            .map(|record| {
                let path = subjects_dir.join(subject_file_name(&record.subject_id));
                if path.exists() {
                    let result: SubjectResult = read_json(&path)?;
                    if result.config_fingerprint != fingerprint {
                        return Err(RunError::FingerprintMismatch {
                            path,
                            found: result.config_fingerprint,
                            expected: fingerprint.clone(),
                        });
                    }
                    return Ok(Done::Resumed(Box::new(result)));
                }
                if stop.load(Ordering::SeqCst) {
                    return Ok(Done::Pending);
                }
                match runner.run_subject(record) {
                    Ok(result) => {
                        let text = serde_json::to_string(&result).expect("json");
                        write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
                        Ok(Done::Computed(Box::new(result)))
                    }
                    Err(failure) => {
                        if failure.backend {
                            stop.store(true, Ordering::SeqCst);
                        }
                        Ok(Done::Failed(failure))
                    }
                }
            })
            .collect()
    });

    let mut results = Vec::with_capacity(records.len());
    let mut outcome = RunOutcome {
        output_dir: out.clone(),
        config_fingerprint: fingerprint.clone(),
        status: RunStatus::Complete,
        subjects: records.len(),
        computed: 0,
        resumed: 0,
        failures: Vec::new(),
        pending: 0,
        metrics: None,
        metrics_note: None,
    };
    for d in done {
        match d? {
            Done::Resumed(r) => {
                outcome.resumed += 1;
                results.push(*r);
            }
            Done::Computed(r) => {
                outcome.computed += 1;
                results.push(*r);
            }
            Done::Failed(f) => outcome.failures.push(f),
            Done::Pending => outcome.pending += 1,
        }
    }

    if results.len() < records.len() {
        let only_backend = outcome.failures.iter().all(|f| f.backend);
        outcome.status = if results.is_empty() && only_backend {
            RunStatus::BackendFailure
        } else {
            RunStatus::Partial
        };
        let path = out.join("failures.json");
        let text = serde_json::to_string_pretty(&outcome.failures).expect("json");
        write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
        return Ok(outcome);
    }
    let _ = fs::remove_file(out.join("failures.json"));
    outcome.metrics = write_artifacts(
        manifest,
        &fingerprint,
        &records,
        &results,
        &mut outcome.metrics_note,
    )?;
    Ok(outcome)
}

fn write_artifacts(
    manifest: &RunManifest,
    fingerprint: &str,
    records: &[PatientRecord],
    results: &[SubjectResult],
    metrics_note: &mut Option<String>,
) -> Result<Option<MetricReport>, RunError> {
    let out = &manifest.output_dir;
    let write = |name: &str, contents: String| {
        let path = out.join(name);
        write_atomic(&path, contents.as_bytes()).map_err(|e| io_err(&path, e))
    };
    let predictions: Vec<Prediction> = results.iter().map(|r| r.prediction.clone()).collect();
    write("predictions.jsonl", jsonl(&predictions))?;
    write(
        "trajectories.jsonl",
        jsonl(results.iter().map(|r| Stamped {
            config_fingerprint: fingerprint,
            inner: match (&r.trajectory, &r.baseline) {
                (Some(t), _) => serde_json::to_value(t).expect("json"),
                (None, Some(b)) => serde_json::to_value(b).expect("json"),
                (None, None) => Value::Null,
            },
        })),
    )?;
    if manifest.method.is_chain() {
        write(
            "memory.jsonl",
            jsonl(results.iter().filter_map(|r| {
                r.trajectory.as_ref().map(|t| Stamped {
                    config_fingerprint: fingerprint,
                    inner: MemoryLine {
                        subject_id: &t.subject_id,
                        events: &t.memory,
                    },
                })
            })),
        )?;
    }
    let calls: Vec<CallRecord> = results
        .iter()
        .flat_map(|r| r.usage.iter().cloned())
        .collect();
    let usage: UsageReport = report_from(&calls);
    write(
        "usage.json",
        serde_json::to_string_pretty(&Stamped {
            config_fingerprint: fingerprint,
            inner: &usage,
        })
        .expect("json")
            + "\n",
    )?;
    let metrics = match evaluate_run(&predictions, records) {
        Ok(report) => {
            write(
                "metrics.json",
                serde_json::to_string_pretty(&Stamped {
                    config_fingerprint: fingerprint,
                    inner: &report,
                })
                .expect("json")
                    + "\n",
            )?;
            write("metrics.txt", report.to_table())?;
            Some(report)
        }
        Err(e) => {
            *metrics_note = Some(e.to_string());
            None
        }
    };
    write(
        "manifest.toml",
        format!(
            "# config_fingerprint = \"{fingerprint}\"\n{}",
            manifest.to_toml()
        ),
    )?;
    Ok(metrics)
}

/// Runs every child of a (possibly sweeping) manifest with backends built
/// from the manifest.
pub fn run_manifest(manifest: &RunManifest) -> Result<Vec<RunOutcome>, RunError> {
    manifest.validate()?;
    let ctx = RunContext::from_manifest(manifest)?;
    manifest
        .expand()
        .iter()
        .map(|child| run_experiment(child, &ctx))
        .collect()
}

/// Reads a run's predictions file.
pub fn read_predictions(run_dir: &Path) -> Result<Vec<Prediction>, RunError> {
    let path = run_dir.join("predictions.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    crate::metrics::parse_predictions(&text).map_err(|e| io_err(&path, e))
}

/// Evaluates a predictions file against a dataset.
pub fn evaluate_files(predictions: &Path, dataset: &Path) -> Result<MetricReport, EvalFileError> {
    let text =
        fs::read_to_string(predictions).map_err(|e| EvalFileError::Io(io_err(predictions, e)))?;
    let preds = crate::metrics::parse_predictions(&text)?;
    let records = load_dataset(dataset).map_err(EvalFileError::Io)?;
    Ok(evaluate_run(&preds, &records)?)
}

#[derive(Debug, Error)]
pub enum EvalFileError {
    #[error(transparent)]
    Io(RunError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (n - 1); std is 0 for one value.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub runs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, MeanStd>,
}

impl AggregateSummary {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<18} {:>10} {:>10}\n", "metric", "mean", "std");
        for (name, m) in &self.metrics {
            out += &format!("{name:<18} {:>10.4} {:>10.4}\n", m.mean, m.std);
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no runs given")]
    NoRuns,
    #[error("{0} covers a different cohort than {1}")]
    CohortMismatch(PathBuf, PathBuf),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Mean and sample std of each metric across completed runs.
pub fn aggregate_reports(run_dirs: &[PathBuf]) -> Result<AggregateSummary, AggregateError> {
    let first = run_dirs.first().ok_or(AggregateError::NoRuns)?;
    let cohort = |dir: &Path| -> Result<BTreeSet<String>, RunError> {
        Ok(read_predictions(dir)?
            .into_iter()
            .map(|p| p.subject_id)
            .collect())
    };
    let reference = cohort(first)?;
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for dir in run_dirs {
        if cohort(dir)? != reference {
            return Err(AggregateError::CohortMismatch(dir.clone(), first.clone()));
        }
        let report: MetricReport = read_json(&dir.join("metrics.json"))?;
        let fields = [
            ("auroc", report.auroc),
            ("auprc", report.auprc),
            ("best_f1", report.best_f1),
            ("precision_at_best", report.precision_at_best),
            ("recall_at_best", report.recall_at_best),
        ];
        for (name, v) in fields {
            columns.entry(name.to_string()).or_default().push(v);
        }
    }
    Ok(AggregateSummary {
        runs: run_dirs.to_vec(),
        metrics: columns
            .into_iter()
            .map(|(k, v)| (k, MeanStd::of(&v)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{BackendError, CompletionRequest, RawCompletion};
    use crate::synth::{generate_cohort, to_jsonl, LengthDist, SynthConfig};
    use std::sync::atomic::AtomicUsize;

    fn dataset(dir: &Path, n: usize) -> PathBuf {
        let config = SynthConfig {
            cases: n,
            controls: n,
            case_tokens: LengthDist::fixed(2_500.0),
            control_tokens: LengthDist::fixed(2_500.0),
            tokens_per_timestamp: 250.0,
            min_signals: 3,
            max_signals: 3,
            seed: 11,
            ..SynthConfig::default()
        };
        let (records, _) = generate_cohort(&config).unwrap();
        let path = dir.join("cohort.jsonl");
        fs::write(&path, to_jsonl(&records)).unwrap();
        path
    }

    fn manifest(dir: &Path, method: Method) -> RunManifest {
        let mut m = RunManifest::new(method, dataset(dir, 3), dir.join("out"));
        m.chain.chunk_tokens = 600;
        m.budget = Some(600);
        m.rag.chunk_tokens = 400;
        m.rag.top_n = 3;
        m
    }

    fn ctx(backend: Arc<dyn Backend>) -> RunContext {
        RunContext {
            backend,
            embedder: Arc::new(MockEmbedder::default()),
            templates: TemplateSet::builtin(),
        }
    }

    fn oracle() -> Arc<dyn Backend> {
        Arc::new(OracleBackend::new(OracleConfig::default()))
    }

    fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut files = BTreeMap::new();
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_file() {
                files.insert(
                    path.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&path).unwrap(),
                );
            }
        }
        files
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let text = r#"
method = "vanilla-middle"
dataset = "d.jsonl"
output_dir = "out"
budget = 8192

[backend]
kind = "http"
endpoint = "http://localhost:8000/v1"
model = "m"

[chain]
chunk_tokens = 4096
"#;
        let m = RunManifest::from_toml(text).unwrap();
        assert_eq!(m.method, Method::VanillaMiddle);
        assert_eq!(m.chain.max_chunks, 15);
        assert_eq!(m.effective_margin(), HTTP_TOKEN_MARGIN);
        assert_eq!(RunManifest::from_toml(&m.to_toml()).unwrap(), m);

        let mut bad = m.clone();
        bad.method = Method::VanillaLeft;
        bad.budget = None;
        bad.parallelism = 0;
        bad.chain.max_chunks = 0;
        match bad.validate() {
            Err(ManifestError::Invalid(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
        assert!(RunManifest::from_toml("method = \"x\"").is_err());
        assert!(RunManifest::from_toml(&format!("{text}\nbogus = 1")).is_err());
    }

    #[test]
    fn fingerprint_ignores_paths_and_parallelism() {
        let a = RunManifest::new(Method::TrajCoa, "a.jsonl", "out-a");
        let mut b = RunManifest::new(Method::TrajCoa, "b.jsonl", "out-b");
        b.parallelism = 32;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn sweep_expands_at_fixed_context() {
        let mut m = RunManifest::new(Method::TrajCoa, "d", "out");
        m.sweep = Some(Sweep {
            chunk_tokens: vec![2048, 4096, 8192, 16384],
            context_tokens: 81920,
        });
        m.validate().unwrap();
        let kids = m.expand();
        let shape: Vec<(usize, usize)> = kids
            .iter()
            .map(|k| (k.chain.chunk_tokens, k.chain.max_chunks))
            .collect();
        assert_eq!(shape, vec![(2048, 40), (4096, 20), (8192, 10), (16384, 5)]);
        assert_eq!(kids[2].output_dir, Path::new("out").join("k8192"));
    }

    #[test]
    fn every_method_runs_on_oracle() {
        for method in [
            Method::TrajCoa,
            Method::TrajCoaAblation,
            Method::VanillaLeft,
            Method::VanillaMiddle,
            Method::Rag,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let m = manifest(dir.path(), method);
            let outcome = run_experiment(&m, &ctx(oracle())).unwrap();
            assert_eq!(
                outcome.status,
                RunStatus::Complete,
                "{method:?} {:?}",
                outcome.failures
            );
            assert_eq!(outcome.computed, 6);
            let files = artifacts(&m.output_dir);
            for name in [
                "predictions.jsonl",
                "trajectories.jsonl",
                "usage.json",
                "manifest.toml",
                "metrics.json",
                "metrics.txt",
            ] {
                assert!(files.contains_key(name), "{method:?} {name}");
            }
            assert_eq!(files.contains_key("memory.jsonl"), method.is_chain());
            let fp = m.fingerprint();
            for line in String::from_utf8(files["trajectories.jsonl"].clone())
                .unwrap()
                .lines()
            {
                let v: Value = serde_json::from_str(line).unwrap();
                assert_eq!(v["config_fingerprint"], Value::String(fp.clone()));
            }
            let preds = read_predictions(&m.output_dir).unwrap();
            assert!(preds.iter().all(|p| p.config_fingerprint == fp));
            if method == Method::TrajCoa {
                assert_eq!(outcome.metrics.unwrap().auroc, 1.0);
            }
        }
    }

    #[derive(Debug)]
    struct Counting {
        inner: Arc<dyn Backend>,
        calls: AtomicUsize,
        fail_after: usize,
    }

    impl Backend for Counting {
        fn id(&self) -> String {
            self.inner.id()
        }
        fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, BackendError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) >= self.fail_after {
                return Err(BackendError::Transport("down".into()));
            }
            self.inner.send(request)
        }
    }

    #[test]
    fn resume_after_outage_matches_clean_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut clean = manifest(dir.path(), Method::TrajCoa);
        clean.parallelism = 1;
        run_experiment(&clean, &ctx(oracle())).unwrap();
        let expected = artifacts(&clean.output_dir);

        fs::remove_dir_all(&clean.output_dir).unwrap();
        let broken = clean.clone();
        let flaky = Arc::new(Counting {
            inner: oracle(),
            calls: AtomicUsize::new(0),
            fail_after: 12,
        });
        let partial = run_experiment(&broken, &ctx(flaky)).unwrap();
        assert_eq!(partial.status, RunStatus::Partial);
        assert_eq!(partial.status.exit_code(), 4);
        assert!(!broken.output_dir.join("predictions.jsonl").exists());

        let resumed = run_experiment(&broken, &ctx(oracle())).unwrap();
        assert_eq!(resumed.status, RunStatus::Complete);
        assert!(resumed.resumed > 0);
        assert_eq!(artifacts(&broken.output_dir), expected);

        // a completed directory is served from disk
        let dead = Arc::new(Counting {
            inner: oracle(),
            calls: AtomicUsize::new(0),
            fail_after: 0,
        });
        let again = run_experiment(&broken, &ctx(dead.clone())).unwrap();
        assert_eq!(again.computed, 0);
        assert_eq!(dead.calls.load(Ordering::SeqCst), 0);
        assert_eq!(artifacts(&broken.output_dir), expected);
    }

    #[test]
    fn total_outage_is_backend_failure() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path(), Method::VanillaMiddle);
        let dead = Arc::new(Counting {
            inner: oracle(),
            calls: AtomicUsize::new(0),
            fail_after: 0,
        });
        let outcome = run_experiment(&m, &ctx(dead)).unwrap();
        assert_eq!(outcome.status, RunStatus::BackendFailure);
        assert_eq!(outcome.status.exit_code(), 3);
    }

    #[test]
    fn reusing_an_output_dir_with_other_settings_fails() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path(), Method::TrajCoa);
        run_experiment(&m, &ctx(oracle())).unwrap();
        let mut other = m.clone();
        other.seed = 9;
        let err = run_experiment(&other, &ctx(oracle())).unwrap_err();
        assert!(matches!(err, RunError::FingerprintMismatch { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let m = MeanStd::of(&[0.70, 0.80]);
        assert!((m.mean - 0.75).abs() < 1e-12);
        assert!((m.std - (0.005f64).sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[0.3]).std, 0.0);

        let dir = tempfile::tempdir().unwrap();
        let mut dirs = Vec::new();
        for seed in 0..2 {
            let mut m = manifest(dir.path(), Method::TrajCoa);
            m.seed = seed;
            m.output_dir = dir.path().join(format!("run{seed}"));
            run_experiment(&m, &ctx(oracle())).unwrap();
            dirs.push(m.output_dir);
        }
        let summary = aggregate_reports(&dirs).unwrap();
        assert_eq!(
            summary.metrics["auroc"],
            MeanStd {
                mean: 1.0,
                std: 0.0
            }
        );

        let mut small = manifest(dir.path(), Method::TrajCoa);
        fs::create_dir_all(dir.path().join("x")).unwrap();
        small.dataset = dataset(&dir.path().join("x"), 1);
        small.output_dir = dir.path().join("small");
        let _ = run_experiment(&small, &ctx(oracle()));
        dirs.push(small.output_dir);
        assert!(matches!(
            aggregate_reports(&dirs),
            Err(AggregateError::CohortMismatch(..))
        ));
    }
}
