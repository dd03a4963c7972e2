//! Chain-of-agents risk prediction over long timestamped patient records.
//!
//! Records are unified into XML, split at timestamp boundaries into
//! budget-bounded chunks, and read in order by worker agents that pass a
//! summary forward and append salient dated events to a shared memory. A
//! manager agent turns the last summary and the memory into a 1-10 score.

pub mod baselines;
pub mod chain;
pub mod chunking;
pub mod llm;
pub mod memory;
pub mod metrics;
pub mod prompts;
pub mod record;
pub mod rft;
pub mod run;
pub mod synth;
pub mod tokens;

pub use baselines::{BaselineTrace, EmbeddingBackend, MockEmbedder, RagConfig, SingleShot};
pub use chain::{
    AgentKind, AgentStep, ChainConfig, ChainError, Prediction, RunTrajectory, TrajCoa,
};
pub use chunking::{chunk_time_aware, truncate_left, truncate_middle, Chunk, TruncationStrategy};
pub use llm::{
    Backend, CompletionRequest, DecodingParams, Gateway, Message, Role, UsageLedger, UsageReport,
};
pub use memory::{MemoryEvent, MemoryStore};
pub use metrics::{auprc, auroc, best_f1_sweep, evaluate_run, MetricReport};
pub use prompts::TemplateSet;
pub use record::{parse_dataset, unify_to_xml, Modality, Observation, PatientRecord, XmlDocument};
pub use rft::{RftConfig, SftSample};
pub use run::{run_experiment, run_manifest, RunManifest, RunOutcome};
pub use synth::{generate_cohort, OracleBackend, OracleConfig, SynthConfig};
pub use tokens::{HeuristicCounter, TokenCounter};
