//! Rejection-sampling data collection for fine-tuning.
//!
//! Each labeled subject gets `candidates` chain runs at high temperature.
//! Cases keep the highest-scoring run if it beats the case threshold,
//! controls the lowest-scoring run if it is under the control threshold.
//! Kept runs are cut into instruction-tuning samples.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{
    initial_worker_schema, manager_schema, subsequent_worker_schema, AgentKind, AgentStep,
    RunTrajectory, TrajCoa,
};
use crate::llm::Message;
use crate::record::PatientRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RftConfig {
    pub candidates: usize,
    pub temperature: f64,
    /// Cases need a score strictly above this.
    pub case_threshold: u8,
    /// Controls need a score strictly below this.
    pub control_threshold: u8,
    pub intermediate_count: usize,
    pub seed: u64,
}

impl Default for RftConfig {
    fn default() -> Self {
        RftConfig {
            candidates: 4,
            temperature: 1.5,
            case_threshold: 6,
            control_threshold: 4,
            intermediate_count: 2,
            seed: 0,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<(), RftError> {
        let mut problems = Vec::new();
        if self.candidates == 0 {
            problems.push("candidates must be >= 1".to_string());
        }
        if !(self.temperature >= 0.0) {
            problems.push("temperature must be >= 0".to_string());
        }
        for (name, t) in [
            ("case_threshold", self.case_threshold),
            ("control_threshold", self.control_threshold),
        ] {
            if !(1..=10).contains(&t) {
                problems.push(format!("{name} must be in 1..=10"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RftError::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RftError {
    #[error("invalid rft config: {0}")]
    InvalidConfig(String),
    #[error("subject {0} has no label")]
    Unlabeled(String),
    #[error("subject {subject}: all {} candidate runs failed", failures.len())]
    AllFailed {
        subject: String,
        failures: Vec<CandidateFailure>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub candidate: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate: usize,
    pub seed: u64,
    pub trajectory: RunTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub subject_id: String,
    pub label: u8,
    pub runs: Vec<Candidate>,
    pub failures: Vec<CandidateFailure>,
}

fn derive(seed: u64, subject: &str, salt: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(subject.as_bytes());
    h.update([0]);
    h.update(salt.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seed of candidate `index` for `subject`.
pub fn candidate_seed(seed: u64, subject: &str, index: usize) -> u64 {
    derive(seed, subject, "candidate", index as u64)
}

/// Runs `rft.candidates` independent chains with the sampling temperature
/// overridden. Failed runs are recorded; the subject is dropped only when
/// every run fails.
pub fn sample_trajectories(
    chain: &TrajCoa,
    record: &PatientRecord,
    rft: &RftConfig,
) -> Result<Candidates, RftError> {
    rft.validate()?;
    let label = record
        .label
        .ok_or_else(|| RftError::Unlabeled(record.subject_id.clone()))?;
    let outcomes: Vec<_> = (0..rft.candidates)
        .into_par_iter()
        .map(|i| {
            let seed = candidate_seed(rft.seed, &record.subject_id, i);
            let mut config = chain.config.clone();
            config.decoding.temperature = rft.temperature;
            config.seed = Some(seed);
            let run = TrajCoa::new(chain.gateway.clone(), chain.templates.clone(), config);
            (i, seed, run.predict(record, "").map(|(_, t)| t))
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (candidate, seed, outcome) in outcomes {
        match outcome {
            Ok(trajectory) => runs.push(Candidate {
                candidate,
                seed,
                trajectory,
            }),
            Err(e) => failures.push(CandidateFailure {
                candidate,
                seed,
                error: e.to_string(),
            }),
        }
    }
    if runs.is_empty() {
        return Err(RftError::AllFailed {
            subject: record.subject_id.clone(),
            failures,
        });
    }
    Ok(Candidates {
        subject_id: record.subject_id.clone(),
        label,
        runs,
        failures,
    })
}

/// Index of the retained score, lowest index on ties.
pub fn select_index(scores: &[u8], label: u8, rft: &RftConfig) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) if label == 1 => s > scores[b],
            Some(b) => s < scores[b],
        };
        if better {
            best = Some(i);
        }
    }
    let b = best?;
    let keep = if label == 1 {
        scores[b] > rft.case_threshold
    } else {
        scores[b] < rft.control_threshold
    };
    keep.then_some(b)
}

pub fn select_trajectory<'a>(
    runs: &'a [Candidate],
    label: u8,
    rft: &RftConfig,
) -> Option<&'a Candidate> {
    let scores: Vec<u8> = runs.iter().map(|c| c.trajectory.score).collect();
    select_index(&scores, label, rft).map(|i| &runs[i])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub agent: AgentKind,
    pub subject_id: String,
    pub trajectory_id: String,
    /// Worker position; the number of workers for the manager.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub messages: Vec<Message>,
    pub completion: String,
    pub meta: SftMeta,
}

/// Worker positions to sample: first, last and up to `intermediate_count`
/// distinct intermediates, ascending.
pub fn sample_worker_steps<R: Rng + ?Sized>(
    workers: usize,
    intermediate_count: usize,
    rng: &mut R,
) -> Vec<usize> {
    if workers == 0 {
        return Vec::new();
    }
    let mut steps = vec![0];
    if workers > 2 {
        let pool = workers - 2;
        let mut mid: Vec<usize> = sample(rng, pool, intermediate_count.min(pool))
            .into_iter()
            .map(|i| i + 1)
            .collect();
        mid.sort_unstable();
        steps.extend(mid);
    }
    if workers > 1 {
        steps.push(workers - 1);
    }
    steps
}

/// Expected sample count for a chain with `workers` worker steps.
pub fn expected_sample_count(workers: usize, intermediate_count: usize) -> usize {
    workers.min(2) + intermediate_count.min(workers.saturating_sub(2)) + 1
}

fn sample_from(step: &AgentStep, position: usize, subject: &str, trajectory_id: &str) -> SftSample {
    SftSample {
        messages: step.messages.clone(),
        completion: serde_json::to_string(&step.parsed).expect("json value"),
        meta: SftMeta {
            agent: step.kind,
            subject_id: subject.to_string(),
            trajectory_id: trajectory_id.to_string(),
            step: position,
        },
    }
}

/// Cuts a kept trajectory into samples. Degraded worker steps are stand-ins
/// rather than model output and are skipped.
pub fn assemble_sft_samples<R: Rng + ?Sized>(
    trajectory: &RunTrajectory,
    trajectory_id: &str,
    rft: &RftConfig,
    rng: &mut R,
) -> Vec<SftSample> {
    let workers: Vec<&AgentStep> = trajectory.workers().collect();
    let mut samples: Vec<SftSample> =
        sample_worker_steps(workers.len(), rft.intermediate_count, rng)
            .into_iter()
            .filter(|&i| !workers[i].degraded)
            .map(|i| sample_from(workers[i], i, &trajectory.subject_id, trajectory_id))
            .collect();
    if let Some(manager) = trajectory.manager() {
        samples.push(sample_from(
            manager,
            workers.len(),
            &trajectory.subject_id,
            trajectory_id,
        ));
    }
    samples
}

/// Checks a sample's completion against its agent schema.
pub fn validate_sample(sample: &SftSample) -> Result<(), String> {
    let value: Value = serde_json::from_str(&sample.completion).map_err(|e| e.to_string())?;
    let schema = match (sample.meta.agent, sample.meta.step) {
        (AgentKind::Manager, _) => manager_schema(),
        (AgentKind::Worker, 0) => initial_worker_schema(),
        (AgentKind::Worker, _) => subsequent_worker_schema(),
    };
    schema.validate(&value)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RftSummary {
    pub subjects: usize,
    pub retained: usize,
    pub rejected: usize,
    pub failed: usize,
    pub samples: usize,
}

#[derive(Debug, Default)]
pub struct RftOutcome {
    pub candidates: Vec<Candidates>,
    pub failures: Vec<RftError>,
    pub samples: Vec<SftSample>,
    pub summary: RftSummary,
}

/// Full collection over a cohort. Subjects run concurrently; output order
/// follows `records`.
pub fn collect(
    chain: &TrajCoa,
    records: &[PatientRecord],
    rft: &RftConfig,
) -> Result<RftOutcome, RftError> {
    rft.validate()?;
    let per_subject: Vec<_> = records
        .par_iter()
        .map(|record| {
            let candidates = sample_trajectories(chain, record, rft)?;
            let mut samples = Vec::new();
            if let Some(kept) = select_trajectory(&candidates.runs, candidates.label, rft) {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive(rft.seed, &record.subject_id, "assemble", 0));
                let id = format!("{}#{}", record.subject_id, kept.candidate);
                samples = assemble_sft_samples(&kept.trajectory, &id, rft, &mut rng);
            }
            Ok((candidates, samples))
        })
        .collect();
    let mut outcome = RftOutcome::default();
    outcome.summary.subjects = records.len();
    for result in per_subject {
        match result {
            Ok((candidates, samples)) => {
                if samples.is_empty() {
                    outcome.summary.rejected += 1;
                } else {
                    outcome.summary.retained += 1;
                }
                outcome.candidates.push(candidates);
                outcome.samples.extend(samples);
            }
            Err(e @ RftError::InvalidConfig(_)) => return Err(e),
            Err(e) => {
                outcome.summary.failed += 1;
                outcome.failures.push(e);
            }
        }
    }
    outcome.summary.samples = outcome.samples.len();
    Ok(outcome)
}
