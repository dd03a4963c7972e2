//! Single-prompt baselines: truncated long-context prompting and retrieval
//! over time-aware chunks.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{complete_scored, single_shot_schema, Prediction, ScoreError, Scored};
use crate::chunking::{chunk_time_aware, truncate, Chunk, ChunkError, TruncationStrategy};
use crate::llm::{
    post_json, BackendError, CompletionRequest, DecodingParams, Gateway, GatewayError, HttpConfig,
    Message, RetryPolicy, DEFAULT_STRUCTURED_ATTEMPTS,
};
use crate::prompts::{TemplateError, TemplateSet};
use crate::record::{unify_to_xml, PatientRecord, XmlDocument};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend: {0}")]
    Backend(#[from] BackendError),
    #[error("embedding response: {0}")]
    Decode(String),
}

/// Text embedder. Vectors have a fixed dimension per backend and are
/// deterministic for a given configuration.
pub trait EmbeddingBackend: Send + Sync + Debug {
    fn id(&self) -> String;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Feature-hashing embedder for offline runs: each lowercase word adds
/// +1 or -1 to one of `dim` buckets chosen by its SHA-256 digest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder { dim: 256 }
    }
}

impl MockEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim.max(1)];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let digest = Sha256::digest(word.to_lowercase().as_bytes());
            let bucket =
                u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize % v.len();
            v[bucket] += if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        v
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn id(&self) -> String {
        format!("mock-hash-{}", self.dim)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-style `POST {endpoint}/embeddings`.
#[derive(Debug)]
pub struct HttpEmbedder {
    config: HttpConfig,
    agent: ureq::Agent,
    retry: RetryPolicy,
    /// Texts per request.
    pub batch_size: usize,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig) -> Self {
        let agent = config.agent();
        HttpEmbedder {
            config,
            agent,
            retry: RetryPolicy::default(),
            batch_size: 64,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match post_json(&self.agent, &self.config, "embeddings", body) {
                Ok(v) => return Ok(v),
                Err(e) if !e.is_retryable() || attempt >= self.retry.max_attempts.max(1) => {
                    return Err(e)
                }
                Err(_) => std::thread::sleep(self.retry.delay(attempt)),
            }
        }
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size.max(1)) {
            let reply = self.post(&json!({"model": self.config.model, "input": batch}))?;
            let data = reply["data"]
                .as_array()
                .ok_or_else(|| EmbedError::Decode("missing data array".into()))?;
            if data.len() != batch.len() {
                return Err(EmbedError::Decode(format!(
                    "{} embeddings for {} inputs",
                    data.len(),
                    batch.len()
                )));
            }
            for item in data {
                let vector = item["embedding"]
                    .as_array()
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| EmbedError::Decode("embedding is not a number array".into()))?;
                out.push(vector);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no chunks to retrieve from")]
    NoChunks,
    #[error("top_n must be at least 1")]
    ZeroTopN,
    #[error("zero-norm embedding for {0}")]
    DegenerateEmbedding(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Indices of `docs` ordered by cosine similarity to `query`, highest
/// first; equal similarities keep the lower index first.
pub fn rank_by_cosine(query: &[f64], docs: &[Vec<f64>]) -> Result<Vec<usize>, RetrievalError> {
    let qn = norm(query);
    if qn == 0.0 {
        return Err(RetrievalError::DegenerateEmbedding("query".into()));
    }
    let mut sims = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        if d.len() != query.len() {
            return Err(RetrievalError::DimensionMismatch(query.len(), d.len()));
        }
        let dn = norm(d);
        if dn == 0.0 {
            return Err(RetrievalError::DegenerateEmbedding(format!("chunk {i}")));
        }
        let dot: f64 = query.iter().zip(d).map(|(a, b)| a * b).sum();
        sims.push(dot / (qn * dn));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// The `n` chunks most similar to `query`, returned in chronological
/// (index) order.
pub fn retrieve_top_n(
    query: &str,
    chunks: &[Chunk],
    embedder: &dyn EmbeddingBackend,
    n: usize,
) -> Result<Vec<Chunk>, RetrievalError> {
    if chunks.is_empty() {
        return Err(RetrievalError::NoChunks);
    }
    if n == 0 {
        return Err(RetrievalError::ZeroTopN);
    }
    let mut texts: Vec<&str> = vec![query];
    texts.extend(chunks.iter().map(|c| c.text.as_str()));
    let mut vectors = embedder.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbedError::Decode(format!(
            "{} embeddings for {} inputs",
            vectors.len(),
            texts.len()
        ))
        .into());
    }
    let docs = vectors.split_off(1);
    let mut top: Vec<usize> = rank_by_cosine(&vectors[0], &docs)?
        .into_iter()
        .take(n)
        .collect();
    top.sort_unstable();
    Ok(top.into_iter().map(|i| chunks[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagConfig {
    pub chunk_tokens: usize,
    pub top_n: usize,
    /// Retrieval query; the template set's query when unset.
    pub query: Option<String>,
}

impl Default for RagConfig {
    /// 1k-token chunks, top 32.
    fn default() -> Self {
        RagConfig {
            chunk_tokens: 1024,
            top_n: 32,
            query: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("budget must be at least 1 token")]
    ZeroBudget,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("risk_level {value} outside 1-10 after {attempts} attempts")]
    OutOfRangeScore { value: f64, attempts: u32 },
}

impl From<ScoreError> for BaselineError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::Gateway(e) => BaselineError::Gateway(e),
            ScoreError::OutOfRange { value, attempts } => {
                BaselineError::OutOfRangeScore { value, attempts }
            }
        }
    }
}

impl BaselineError {
    pub fn is_backend_failure(&self) -> bool {
        match self {
            BaselineError::Gateway(e) => e.is_backend_failure(),
            BaselineError::Retrieval(RetrievalError::Embed(EmbedError::Backend(_))) => true,
            _ => false,
        }
    }
}

/// What a baseline sent and received for one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub subject_id: String,
    pub messages: Vec<Message>,
    pub raw_completion: String,
    pub parsed: Value,
    pub attempts: u32,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    /// Tokens of record text placed in the prompt.
    pub record_tokens: usize,
    /// Segment indices (vanilla) or chunk indices (RAG) that were included.
    pub included: Vec<usize>,
    pub score: u8,
}

/// Single-prompt risk scoring over a whole (truncated or retrieved) record.
#[derive(Clone, Debug)]
pub struct SingleShot {
    pub gateway: Gateway,
    pub templates: TemplateSet,
    pub decoding: DecodingParams,
    pub max_attempts: u32,
    pub seed: Option<u64>,
}

impl SingleShot {
    pub fn new(gateway: Gateway, templates: TemplateSet) -> Self {
        SingleShot {
            gateway,
            templates,
            decoding: DecodingParams::default(),
            max_attempts: DEFAULT_STRUCTURED_ATTEMPTS,
            seed: None,
        }
    }

    /// Wraps record content in the patient element of `doc`.
    fn wrap(doc: &XmlDocument, content: &str) -> String {
        format!("{}{}{}", doc.header_text(), content, doc.footer_text())
    }

    pub fn render(&self, record_xml: &str) -> Result<CompletionRequest, TemplateError> {
        let t = &self.templates;
        Ok(CompletionRequest::new(
            vec![
                Message::system(t.single_shot_system.render(&[])?),
                Message::user(
                    t.single_shot_user
                        .render(&[("patient_record_xml", record_xml)])?,
                ),
            ],
            &self.decoding,
            self.seed,
        ))
    }

    fn score(
        &self,
        tag: &str,
        record: &PatientRecord,
        xml: String,
        record_tokens: usize,
        included: Vec<usize>,
        fingerprint: &str,
    ) -> Result<(Prediction, BaselineTrace), BaselineError> {
        let request = self.render(&xml)?;
        let Scored {
            value,
            raw,
            level,
            attempts,
            prompt_tokens,
            output_tokens,
        } = complete_scored(
            &self.gateway,
            tag,
            &request,
            &single_shot_schema(),
            self.max_attempts,
        )?;
        let prediction = Prediction {
            subject_id: record.subject_id.clone(),
            risk_score: f64::from(level),
            label: record.label,
            model: self.gateway.backend_id(),
            config_fingerprint: fingerprint.to_string(),
        };
        let trace = BaselineTrace {
            subject_id: record.subject_id.clone(),
            messages: request.messages,
            raw_completion: raw,
            parsed: value,
            attempts,
            prompt_tokens,
            output_tokens,
            record_tokens,
            included,
            score: level,
        };
        Ok((prediction, trace))
    }

    /// Long-context prompting with the record body truncated to `budget`
    /// tokens.
    pub fn predict_vanilla(
        &self,
        record: &PatientRecord,
        budget: usize,
        strategy: TruncationStrategy,
        fingerprint: &str,
    ) -> Result<(Prediction, BaselineTrace), BaselineError> {
        if budget == 0 {
            return Err(BaselineError::ZeroBudget);
        }
        let doc = unify_to_xml(record);
        let cut = truncate(&doc, budget, self.gateway.counter(), strategy);
        let xml = Self::wrap(&doc, &cut.text);
        self.score(
            "vanilla",
            record,
            xml,
            cut.tokens,
            cut.segments,
            fingerprint,
        )
    }

    /// Retrieval over time-aware chunks, retrieved chunks in chronological
    /// order.
    pub fn predict_rag(
        &self,
        record: &PatientRecord,
        embedder: &dyn EmbeddingBackend,
        config: &RagConfig,
        fingerprint: &str,
    ) -> Result<(Prediction, BaselineTrace), BaselineError> {
        let doc = unify_to_xml(record);
        let chunks = chunk_time_aware(&doc, config.chunk_tokens, self.gateway.counter())?;
        let query = config.query.as_deref().unwrap_or(&self.templates.rag_query);
        let top = retrieve_top_n(query, &chunks, embedder, config.top_n)?;
        let content: String = top.iter().map(|c| c.text.as_str()).collect();
        let tokens = top.iter().map(|c| c.token_count).sum();
        let included = top.iter().map(|c| c.index).collect();
        self.score(
            "rag",
            record,
            Self::wrap(&doc, &content),
            tokens,
            included,
            fingerprint,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::RetryPolicy;
    use crate::record::{Modality, Observation};
    use crate::synth::{find_markers, OracleBackend};
    use crate::tokens::{HeuristicCounter, TokenCounter};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    /// Returns preset vectors: `table[i]` for the i-th text of each call.
    #[derive(Debug)]
    struct Table(Vec<Vec<f64>>);

    impl EmbeddingBackend for Table {
        fn id(&self) -> String {
            "table".into()
        }
        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Ok(self.0[..texts.len()].to_vec())
        }
    }

    fn chunk(i: usize) -> Chunk {
        Chunk {
            index: i,
            token_count: 1,
            time_span: None,
            carried_timestamp_split: false,
            text: format!("c{i}"),
        }
    }

    fn indices(chunks: &[Chunk]) -> Vec<usize> {
        chunks.iter().map(|c| c.index).collect()
    }

    #[test]
    fn cosine_hand_example() {
        let table = Table(vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.6, 0.8],
        ]);
        let chunks: Vec<_> = (0..3).map(chunk).collect();
        assert_eq!(
            rank_by_cosine(&[1.0, 0.0], &table.0[1..]).unwrap(),
            [0, 2, 1]
        );
        assert_eq!(
            indices(&retrieve_top_n("q", &chunks, &table, 2).unwrap()),
            [0, 2]
        );
        assert_eq!(
            indices(&retrieve_top_n("q", &chunks, &table, 9).unwrap()),
            [0, 1, 2]
        );
    }

    #[test]
    fn ties_prefer_lower_index() {
        let table = Table(vec![vec![1.0, 1.0]; 6]);
        let chunks: Vec<_> = (0..5).map(chunk).collect();
        assert_eq!(
            indices(&retrieve_top_n("q", &chunks, &table, 3).unwrap()),
            [0, 1, 2]
        );
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let table = Table(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = retrieve_top_n("q", &[chunk(0)], &table, 1).unwrap_err();
        assert!(matches!(err, RetrievalError::DegenerateEmbedding(_)));
    }

    #[test]
    fn mock_embedder_is_deterministic() {
        let e = MockEmbedder::default();
        assert_eq!(e.embed_one("Lung nodule"), e.embed_one("lung  NODULE"));
        assert_ne!(e.embed_one("lung"), e.embed_one("heart"));
        assert_eq!(e.embed_one("x").len(), 256);
    }

    fn record(n: usize) -> PatientRecord {
        PatientRecord {
            subject_id: "p".into(),
            demographics: BTreeMap::from([("sex".to_string(), "M".to_string())]),
            index_date: "2020-01-01".into(),
            label: Some(1),
            observations: (0..n)
                .map(|i| {
                    Observation::new(
                        format!("2019-01-{:02}", i + 1),
                        Modality::Note,
                        format!("t{} text text text", i + 1),
                    )
                })
                .collect(),
        }
    }

    fn single_shot() -> SingleShot {
        let gw = Gateway::new(
            Arc::new(OracleBackend::default()),
            Arc::new(HeuristicCounter::default()),
        )
        .with_retry(RetryPolicy::no_delay(1));
        SingleShot::new(gw, TemplateSet::builtin())
    }

    #[test]
    fn vanilla_middle_keeps_ends() {
        let s = single_shot();
        let rec = record(6);
        let doc = unify_to_xml(&rec);
        let counter = HeuristicCounter::default();
        let head = counter.count(doc.demographics_text());
        let seg = counter.count(doc.segment_text(0));
        let (_, trace) = s
            .predict_vanilla(&rec, head + 4 * seg, TruncationStrategy::Middle, "fp")
            .unwrap();
        assert_eq!(trace.included, [0, 1, 4, 5]);
        let user = &trace.messages[1].content;
        for (t, present) in [
            ("t1 ", true),
            ("t2 ", true),
            ("t3 ", false),
            ("t4 ", false),
            ("t5 ", true),
            ("t6 ", true),
        ] {
            assert_eq!(user.contains(t), present, "{t}");
        }
    }

    #[test]
    fn rag_single_chunk_matches_full_vanilla() {
        let s = single_shot();
        let rec = record(3);
        let (_, vanilla) = s
            .predict_vanilla(&rec, 100_000, TruncationStrategy::Middle, "fp")
            .unwrap();
        let (_, rag) = s
            .predict_rag(&rec, &MockEmbedder::default(), &RagConfig::default(), "fp")
            .unwrap();
        assert_eq!(vanilla.messages, rag.messages);
        assert!(vanilla.messages[1]
            .content
            .contains(unify_to_xml(&rec).text()));
    }

    #[test]
    fn rag_surfaces_signal_chunk() {
        let s = single_shot();
        let mut rec = record(40);
        rec.observations[25].payload = "nodule SIGNAL_NODULE_GROWTH_01".into();
        let doc = unify_to_xml(&rec);
        let chunks = chunk_time_aware(&doc, 60, &HeuristicCounter::default()).unwrap();
        let target = chunks
            .iter()
            .position(|c| c.text.contains("SIGNAL_"))
            .unwrap();
        // query and the signal chunk point one way, everything else another
        let mut table = vec![vec![1.0, 0.0]];
        table.extend((0..chunks.len()).map(|i| {
            if i == target {
                vec![1.0, 0.1]
            } else {
                vec![0.0, 1.0]
            }
        }));
        let config = RagConfig {
            chunk_tokens: 60,
            top_n: 1,
            query: None,
        };
        let (pred, trace) = s.predict_rag(&rec, &Table(table), &config, "fp").unwrap();
        assert_eq!(trace.included, [target]);
        assert_eq!(
            find_markers(&trace.messages[1].content),
            ["SIGNAL_NODULE_GROWTH_01"]
        );
        assert_eq!(pred.risk_score, 3.0);
    }
}
