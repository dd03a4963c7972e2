//! Synthetic longitudinal cohorts with planted, position-controlled signals.
//!
//! Case records carry `SIGNAL_...` marker tokens inside radiology reports
//! describing a growing lung nodule; controls carry only look-alike benign
//! findings. Every subject draws from its own ChaCha stream, so a cohort is
//! a pure function of the config.
//!
//! Separation under the oracle: a case carries at least `min_signals`
//! markers and a control none, so any pipeline that shows the manager every
//! marker scores cases `score_for(min_signals)` or more and controls
//! `score_for(0)`. A strictly increasing score table then gives an AUROC
//! of one. When no marker survives into a prompt every subject scores
//! `score_for(0)` and AUROC is exactly 0.5. Window placement at
//! 0.3-0.7 of the span keeps markers out of the head and tail that middle
//! truncation retains whenever the budget is well under 60% of the record
//! (8k of a 40k record).

mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{escape_xml, Modality, Observation, PatientRecord};
use crate::tokens::{HeuristicCounter, TokenCounter};

pub use oracle::{
    find_markers, OracleBackend, OracleConfig, OracleError, TemplateShape, TwoPhaseOracle,
};

/// Median and interquartile range of a log-normal length distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl LengthDist {
    pub fn fixed(tokens: f64) -> Self {
        LengthDist {
            median: tokens,
            q1: tokens,
            q3: tokens,
        }
    }

    fn sigma(&self) -> f64 {
        // IQR of a normal spans 2 * 0.6745 sigma
        ((self.q3.ln() - self.q1.ln()) / (2.0 * 0.674_489_750_196_081_7)).max(0.0)
    }

    /// Log-normal lengths for `n` subjects. The standard-normal draws are
    /// centred on their sample median so the cohort median equals
    /// `self.median` exactly.
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        let centre = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
        };
        for v in &mut z {
            *v = (self.median.ln() + self.sigma() * (*v - centre)).exp();
        }
        z
    }
}

/// Where case signals are placed within each record's time span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Placement {
    /// First 25% of the span.
    EarliestQuartile,
    Uniform,
    /// Four in five signals fall in the final year, the rest anywhere.
    LastYearWeighted,
    /// Fractions of the span, e.g. 0.3 to 0.7.
    Window {
        start: f64,
        end: f64,
    },
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::EarliestQuartile => f.write_str("earliest-quartile"),
            Placement::Uniform => f.write_str("uniform"),
            Placement::LastYearWeighted => f.write_str("last-year-weighted"),
            Placement::Window { start, end } => write!(f, "window:{start}:{end}"),
        }
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "earliest-quartile" => Ok(Placement::EarliestQuartile),
            "uniform" => Ok(Placement::Uniform),
            "last-year-weighted" => Ok(Placement::LastYearWeighted),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["window", a, b] => {
                        let start: f64 = a.parse().map_err(|_| format!("bad window start {a:?}"))?;
                        let end: f64 = b.parse().map_err(|_| format!("bad window end {b:?}"))?;
                        Ok(Placement::Window { start, end })
                    }
                    _ => Err(format!(
                        "unknown placement {s:?} (earliest-quartile, uniform, last-year-weighted, window:A:B)"
                    )),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cases: usize,
    pub controls: usize,
    /// XML token length of case records.
    pub case_tokens: LengthDist,
    pub control_tokens: LengthDist,
    /// Average XML tokens per timestamp; sets the number of timestamps.
    pub tokens_per_timestamp: f64,
    pub min_span_years: u32,
    pub max_span_years: u32,
    pub placement: Placement,
    pub min_signals: usize,
    pub max_signals: usize,
    /// Chance that a note repeats an earlier note verbatim.
    pub copy_forward_rate: f64,
    /// Chance per timestamp of a benign look-alike finding.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Lengths follow the case/control medians and IQRs of the reference
    /// cohort (61,270 and 51,610 XML tokens).
    fn default() -> Self {
        SynthConfig {
            cases: 28,
            controls: 272,
            case_tokens: LengthDist {
                median: 61_270.0,
                q1: 28_675.0,
                q3: 121_722.0,
            },
            control_tokens: LengthDist {
                median: 51_610.0,
                q1: 19_442.0,
                q3: 132_777.0,
            },
            tokens_per_timestamp: 1_400.0,
            min_span_years: 2,
            max_span_years: 5,
            placement: Placement::Uniform,
            min_signals: 3,
            max_signals: 5,
            copy_forward_rate: 0.1,
            distractor_rate: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("subject {subject}: cannot place {signals} signals on {available} available dates")]
    InfeasiblePlacement {
        subject: String,
        signals: usize,
        available: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSignal {
    pub marker: String,
    pub timestamp: String,
}

/// Ground truth for one subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub subject_id: String,
    pub label: u8,
    pub signals: Vec<PlantedSignal>,
    /// Oracle score when every signal reaches the manager.
    pub oracle_score: u8,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut problems = Vec::new();
        if self.cases == 0 {
            problems.push("cases must be >= 1".to_string());
        }
        if self.controls == 0 {
            problems.push("controls must be >= 1".to_string());
        }
        for (name, rate) in [
            ("copy_forward_rate", self.copy_forward_rate),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                problems.push(format!("{name} must be in [0, 1]"));
            }
        }
        if self.min_signals == 0 || self.min_signals > self.max_signals {
            problems.push("need 1 <= min_signals <= max_signals".into());
        }
        if self.min_span_years == 0
            || self.min_span_years > self.max_span_years
            || self.max_span_years > 5
        {
            problems.push("need 1 <= min_span_years <= max_span_years <= 5".into());
        }
        if !(self.tokens_per_timestamp >= 50.0) {
            problems.push("tokens_per_timestamp must be >= 50".into());
        }
        for (name, d) in [
            ("case_tokens", self.case_tokens),
            ("control_tokens", self.control_tokens),
        ] {
            if !(d.q1 > 0.0 && d.q1 <= d.median && d.median <= d.q3) {
                problems.push(format!("{name} needs 0 < q1 <= median <= q3"));
            }
        }
        if let Placement::Window { start, end } = self.placement {
            if !(0.0 <= start && start <= end && end <= 1.0) {
                problems.push("window placement needs 0 <= start <= end <= 1".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SynthError::InvalidConfig(problems.join("; ")))
        }
    }
}

pub fn marker(subject: usize, ordinal: usize) -> String {
    format!("SIGNAL_NODULE_GROWTH_{subject:05}_{ordinal:02}")
}

/// Generates the cohort: cases first (label 1), then controls (label 0).
pub fn generate_cohort(
    config: &SynthConfig,
) -> Result<(Vec<PatientRecord>, Vec<PlantedTruth>), SynthError> {
    config.validate()?;
    let oracle = OracleConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut targets = config.case_tokens.draw(config.cases, &mut rng);
    targets.extend(config.control_tokens.draw(config.controls, &mut rng));
    let subjects: Result<Vec<_>, _> = targets
        .into_par_iter()
        .enumerate()
        .map(|(i, target)| generate_subject(config, i, target, &oracle))
        .collect();
    Ok(subjects?.into_iter().unzip())
}

const CODES_DX: &[&str] = &[
    "I10 Essential hypertension",
    "E11.9 Type 2 diabetes mellitus without complications",
    "J44.9 Chronic obstructive pulmonary disease, unspecified",
    "E78.5 Hyperlipidemia, unspecified",
    "M54.5 Low back pain",
    "K21.9 Gastro-esophageal reflux disease without esophagitis",
    "J06.9 Acute upper respiratory infection, unspecified",
    "I25.10 Atherosclerotic heart disease of native coronary artery",
    "F41.1 Generalized anxiety disorder",
    "N18.3 Chronic kidney disease, stage 3",
];
const CODES_MED: &[&str] = &[
    "lisinopril 10 mg oral tablet daily",
    "metformin 500 mg oral tablet twice daily",
    "atorvastatin 40 mg oral tablet nightly",
    "albuterol 90 mcg inhaler as needed",
    "omeprazole 20 mg oral capsule daily",
    "tiotropium 18 mcg inhalation capsule daily",
    "aspirin 81 mg oral tablet daily",
    "sertraline 50 mg oral tablet daily",
];
const CODES_PROC: &[&str] = &[
    "71046 Radiologic examination, chest; 2 views",
    "93000 Electrocardiogram, routine, with interpretation",
    "94010 Spirometry",
    "36415 Collection of venous blood by venipuncture",
    "99213 Office visit, established patient",
    "45378 Colonoscopy, diagnostic",
];
const LABS: &[(&str, &str, f64, f64)] = &[
    ("Hemoglobin", "g/dL", 11.0, 16.5),
    ("White blood cell count", "10^3/uL", 3.5, 12.0),
    ("Creatinine", "mg/dL", 0.6, 1.8),
    ("Glucose", "mg/dL", 70.0, 210.0),
    ("Sodium", "mmol/L", 132.0, 146.0),
    ("Alkaline phosphatase", "U/L", 40.0, 160.0),
    ("Hemoglobin A1c", "%", 5.0, 9.5),
];
const NOTE_SENTENCES: &[&str] = &[
    "Patient presents for routine follow-up of chronic conditions.",
    "Reports mild fatigue over the past several weeks without fever or chills.",
    "Blood pressure remains acceptably controlled on the current regimen.",
    "Denies chest pain, palpitations, or syncope.",
    "Lungs clear to auscultation bilaterally with no wheezes or crackles.",
    "Heart regular rate and rhythm without murmurs.",
    "Abdomen soft, non-tender, with normal bowel sounds.",
    "Medication list reviewed and reconciled with the patient.",
    "Counseled on diet, exercise, and medication adherence.",
    "Plan to recheck laboratory values at the next visit.",
    "Patient reports intermittent heartburn relieved by antacids.",
    "Follow-up scheduled in three months or sooner as needed.",
    "No new complaints today; overall feeling well.",
    "Vaccinations reviewed and updated per schedule.",
    "Discussed results of recent laboratory testing with the patient.",
    "Knee pain improved with physical therapy and topical analgesics.",
];
const DISTRACTORS: &[&str] = &[
    "Chest radiograph: no acute cardiopulmonary process.",
    "Chest CT: 3 mm calcified granuloma in the left lower lobe, benign appearance.",
    "Chest radiograph: mild cardiomegaly without pulmonary edema.",
    "Chest CT: stable bibasilar atelectasis, no suspicious nodules.",
    "Chest radiograph: hyperinflation consistent with emphysema, no focal consolidation.",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn note_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(4..=12);
    (0..n)
        .map(|_| pick(rng, NOTE_SENTENCES))
        .collect::<Vec<_>>()
        .join(" ")
}

fn filler(
    rng: &mut ChaCha8Rng,
    notes: &mut Vec<String>,
    copy_forward_rate: f64,
) -> (Modality, String) {
    let roll: f64 = rng.random();
    match roll {
        r if r < 0.24 => (Modality::Diagnosis, pick(rng, CODES_DX).to_string()),
        r if r < 0.36 => (Modality::Medication, pick(rng, CODES_MED).to_string()),
        r if r < 0.46 => (Modality::Procedure, pick(rng, CODES_PROC).to_string()),
        r if r < 0.70 => {
            let (name, unit, lo, hi) = LABS[rng.random_range(0..LABS.len())];
            let value = rng.random_range(lo..hi);
            (Modality::Lab, format!("{name} {value:.1} {unit}"))
        }
        r if r < 0.80 => {
            let sys = rng.random_range(105..165);
            let dia = rng.random_range(60..98);
            let pulse = rng.random_range(55..105);
            (
                Modality::Vital,
                format!("BP {sys}/{dia} mmHg, pulse {pulse} bpm"),
            )
        }
        _ => {
            if !notes.is_empty() && rng.random_bool(copy_forward_rate) {
                let earlier = notes[rng.random_range(0..notes.len())].clone();
                (Modality::Note, earlier)
            } else {
                let text = note_text(rng);
                notes.push(text.clone());
                (Modality::Note, text)
            }
        }
    }
}

/// Tokens of the patient wrapper and demographics block, roughly.
const RECORD_OVERHEAD: f64 = 60.0;

fn generate_subject(
    config: &SynthConfig,
    index: usize,
    target: f64,
    oracle: &OracleConfig,
) -> Result<(PatientRecord, PlantedTruth), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let counter = HeuristicCounter::default();
    let is_case = index < config.cases;
    let subject_id = format!("SYN{index:05}");
    let target = target.clamp(1_000.0, 2_000_000.0);

    let index_date = NaiveDate::from_ymd_opt(rng.random_range(2012..=2019), 1, 1)
        .expect("valid date")
        + Duration::days(rng.random_range(0..365));
    let years = rng.random_range(config.min_span_years..=config.max_span_years);
    let end = index_date - Duration::days(1);
    let span_days = i64::from(years) * 365 - 2;
    let start = end - Duration::days(span_days);
    let day = |offset: i64| start + Duration::days(offset);

    let signals = if is_case {
        rng.random_range(config.min_signals..=config.max_signals)
    } else {
        0
    };
    let wanted_dates = ((target / config.tokens_per_timestamp).round() as usize).max(2);
    let n_dates = wanted_dates.min(span_days as usize + 1);
    let infeasible = |available: usize| SynthError::InfeasiblePlacement {
        subject: subject_id.clone(),
        signals,
        available,
    };
    if signals > n_dates {
        return Err(infeasible(n_dates));
    }

    // signal day offsets, chronological
    let frac = |f: f64| (f * span_days as f64).round() as i64;
    let window = match config.placement {
        Placement::EarliestQuartile => (0, frac(0.25)),
        Placement::Uniform | Placement::LastYearWeighted => (0, span_days),
        Placement::Window { start, end } => (frac(start), frac(end)),
    };
    let mut signal_days: Vec<i64> = Vec::with_capacity(signals);
    if signals > 0 {
        if config.placement == Placement::LastYearWeighted {
            let last_year = (span_days - 364).max(0);
            for _ in 0..signals {
                let lo = if rng.random_bool(0.8) { last_year } else { 0 };
                let mut d = rng.random_range(lo..=span_days);
                while signal_days.contains(&d) {
                    d = rng.random_range(0..=span_days);
                }
                signal_days.push(d);
            }
        } else {
            let available = (window.1 - window.0 + 1) as usize;
            if available < signals {
                return Err(infeasible(available));
            }
            signal_days.extend(
                sample(&mut rng, available, signals)
                    .into_iter()
                    .map(|o| window.0 + o as i64),
            );
        }
        signal_days.sort_unstable();
    }

    let mut days: Vec<i64> = signal_days.clone();
    for edge in [0, span_days] {
        if !days.contains(&edge) {
            days.push(edge);
        }
    }
    while days.len() < n_dates {
        let d = rng.random_range(0..=span_days);
        if !days.contains(&d) {
            days.push(d);
        }
    }
    days.sort_unstable();

    let mut demographics = BTreeMap::new();
    let birth_year = index_date.year() - rng.random_range(50..=80);
    demographics.insert("birth_year".to_string(), birth_year.to_string());
    demographics.insert(
        "sex".to_string(),
        if rng.random_bool(0.5) { "F" } else { "M" }.to_string(),
    );

    let weights: Vec<f64> = days.iter().map(|_| rng.random_range(0.5..1.5)).collect();
    let weight_sum: f64 = weights.iter().sum();
    let body = (target - RECORD_OVERHEAD).max(0.0);

    let mut observations = Vec::new();
    let mut notes: Vec<String> = Vec::new();
    let mut planted = Vec::new();
    for (slot, &offset) in days.iter().enumerate() {
        let date = day(offset);
        let ts = date.format("%Y-%m-%d").to_string();
        let share = body * weights[slot] / weight_sum;
        // markup is counted exactly; the counter is additive across lines
        let mut spent = counter.count(&format!("<record date=\"{ts}\"></record>")) as f64;
        let mut groups: Vec<Modality> = Vec::new();
        let mut push = |observations: &mut Vec<Observation>,
                        spent: &mut f64,
                        modality: Modality,
                        text: String| {
            if !groups.contains(&modality) {
                groups.push(modality);
                *spent += counter.count(&format!("<{0}></{0}>", modality.tag())) as f64;
            }
            *spent += counter.count(&format!("<item>{}</item>", escape_xml(&text))) as f64;
            observations.push(Observation::new(ts.clone(), modality, text));
        };
        if let Ok(ordinal) = signal_days.binary_search(&offset) {
            let m = marker(index, ordinal + 1);
            let size = 4 + 3 * ordinal;
            let text = format!(
                "Chest CT: right upper lobe solid nodule now measures {size} mm, enlarged compared with prior imaging. \
                 Finding code {m}."
            );
            push(
                &mut observations,
                &mut spent,
                Modality::RadiologyReport,
                text,
            );
            planted.push(PlantedSignal {
                marker: m,
                timestamp: ts.clone(),
            });
        }
        if rng.random_bool(config.distractor_rate) {
            let text = pick(&mut rng, DISTRACTORS).to_string();
            push(
                &mut observations,
                &mut spent,
                Modality::RadiologyReport,
                text,
            );
        }
        while spent + 20.0 < share {
            let (modality, text) = filler(&mut rng, &mut notes, config.copy_forward_rate);
            push(&mut observations, &mut spent, modality, text);
        }
        if !observations.iter().any(|o| o.timestamp == ts) {
            let (modality, text) = filler(&mut rng, &mut notes, config.copy_forward_rate);
            push(&mut observations, &mut spent, modality, text);
        }
    }

    let record = PatientRecord {
        subject_id: subject_id.clone(),
        demographics,
        index_date: index_date.format("%Y-%m-%d").to_string(),
        label: Some(u8::from(is_case)),
        observations,
    };
    let truth = PlantedTruth {
        subject_id,
        label: u8::from(is_case),
        oracle_score: oracle.score_for(planted.len()),
        signals: planted,
    };
    Ok((record, truth))
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn parse_truth(text: &str) -> Result<Vec<PlantedTruth>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
