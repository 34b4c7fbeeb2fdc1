//! Analyzer boundary that turns an OBS sample into [`QueryAnalyses`].
//!
//! A staged analyzer answers three questions in order: radical analysis
//! (given the recognized radical), pictographic analysis of the whole glyph,
//! and a mutual analysis that sees both earlier answers. The fixture analyzer
//! skips staging and replays stored records.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_queries, CorpusError, QueryAnalyses};

/// Environment variable holding the remote analyzer's bearer token.
pub const TOKEN_ENV: &str = "OBS_MATCH_ANALYZER_TOKEN";

const INLINE_PREFIX: &str = "base64:";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown query_id {0:?}")]
    UnknownQuery(String),
    #[error(transparent)]
    Fixture(#[from] CorpusError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("failed to read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("analyzer returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("non-conforming response: {0}")]
    BadResponse(String),
    #[error("empty analysis")]
    EmptyAnalysis,
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: AnalysisStage,
        #[source]
        source: Box<AnalysisError>,
    },
}

impl AnalysisError {
    /// True for failures of the external service rather than of local data.
    pub fn is_external(&self) -> bool {
        match self {
            AnalysisError::Transport { .. }
            | AnalysisError::Status { .. }
            | AnalysisError::BadResponse(_)
            | AnalysisError::EmptyAnalysis => true,
            AnalysisError::Stage { source, .. } => source.is_external(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisStage {
    RadicalAnalysis,
    PictographicAnalysis,
    MutualAnalysis,
}

impl AnalysisStage {
    pub const ORDER: [AnalysisStage; 3] = [
        AnalysisStage::RadicalAnalysis,
        AnalysisStage::PictographicAnalysis,
        AnalysisStage::MutualAnalysis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnalysisStage::RadicalAnalysis => "radical_analysis",
            AnalysisStage::PictographicAnalysis => "pictographic_analysis",
            AnalysisStage::MutualAnalysis => "mutual_analysis",
        }
    }

    pub fn requires_radical(self) -> bool {
        !matches!(self, AnalysisStage::PictographicAnalysis)
    }

    fn allowed_placeholders(self) -> &'static [&'static str] {
        match self {
            AnalysisStage::RadicalAnalysis => &["radical_label"],
            AnalysisStage::PictographicAnalysis => &[],
            AnalysisStage::MutualAnalysis => {
                &["radical_label", "radical_analysis", "pictographic_analysis"]
            }
        }
    }
}

impl fmt::Display for AnalysisStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An image given either as a file path or as an inline `base64:` payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageRef {
    Path(PathBuf),
    InlineBase64(String),
}

impl ImageRef {
    pub fn parse(s: &str) -> Self {
        match s.strip_prefix(INLINE_PREFIX) {
            Some(payload) => ImageRef::InlineBase64(payload.to_string()),
            None => ImageRef::Path(PathBuf::from(s)),
        }
    }

    pub fn to_base64(&self) -> Result<String, AnalysisError> {
        match self {
            ImageRef::InlineBase64(s) => Ok(s.clone()),
            ImageRef::Path(p) => {
                let bytes = std::fs::read(p).map_err(|source| AnalysisError::Image {
                    path: p.clone(),
                    source,
                })?;
                Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
            }
        }
    }
}

/// Outputs of earlier stages made available to later prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PriorAnalyses {
    pub radical_analysis: Option<String>,
    pub pictographic_analysis: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisRequest {
    pub query_id: String,
    pub image_ref: Option<ImageRef>,
    pub stage: AnalysisStage,
    pub radical_label: Option<String>,
    pub prior: PriorAnalyses,
}

impl AnalysisRequest {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        match (self.stage.requires_radical(), &self.radical_label) {
            (true, None) => Err(AnalysisError::InvalidRequest(format!(
                "{} requires a radical label",
                self.stage
            ))),
            (false, Some(_)) => Err(AnalysisError::InvalidRequest(format!(
                "{} takes no radical label",
                self.stage
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub stage: AnalysisStage,
    pub template_text: String,
    pub version: String,
}

fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) => {
                out.push(&after[..end]);
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(
        stage: AnalysisStage,
        template_text: impl Into<String>,
        version: impl Into<String>,
    ) -> Result<Self, AnalysisError> {
        let t = Self {
            stage,
            template_text: template_text.into(),
            version: version.into(),
        };
        for p in placeholders(&t.template_text) {
            if !stage.allowed_placeholders().contains(&p) {
                return Err(AnalysisError::Template(format!(
                    "placeholder {{{p}}} is not available to {stage}"
                )));
            }
        }
        Ok(t)
    }

    pub fn render(&self, req: &AnalysisRequest) -> Result<String, AnalysisError> {
        let mut out = String::with_capacity(self.template_text.len());
        let mut rest = self.template_text.as_str();
        while let Some(start) = rest.find('{') {
            let Some(len) = rest[start + 1..].find('}') else {
                break;
            };
            let name = &rest[start + 1..start + 1 + len];
            let value = match name {
                "radical_label" => req.radical_label.as_deref(),
                "radical_analysis" => req.prior.radical_analysis.as_deref(),
                "pictographic_analysis" => req.prior.pictographic_analysis.as_deref(),
                _ => None,
            }
            .ok_or_else(|| AnalysisError::Template(format!("no value for {{{name}}}")))?;
            out.push_str(&rest[..start]);
            out.push_str(value);
            rest = &rest[start + len + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// The three stage templates that share one version tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<AnalysisStage, PromptTemplate>,
}

impl PromptSet {
    pub fn new(templates: impl IntoIterator<Item = PromptTemplate>) -> Result<Self, AnalysisError> {
        let templates: BTreeMap<_, _> = templates.into_iter().map(|t| (t.stage, t)).collect();
        for stage in AnalysisStage::ORDER {
            if !templates.contains_key(&stage) {
                return Err(AnalysisError::Template(format!("missing template for {stage}")));
            }
        }
        Ok(Self { templates })
    }

    pub fn get(&self, stage: AnalysisStage) -> &PromptTemplate {
        &self.templates[&stage]
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        let t = |stage, text: &str| PromptTemplate::new(stage, text, "default-v1").expect("valid default");
        Self::new([
            t(
                AnalysisStage::RadicalAnalysis,
                "The radical of this oracle bone character is {radical_label}. \
                 Explain what this radical depicts and what semantic class it suggests.",
            ),
            t(
                AnalysisStage::PictographicAnalysis,
                "Describe the overall glyph of this oracle bone character and the \
                 meaning its shape depicts.",
            ),
            t(
                AnalysisStage::MutualAnalysis,
                "Radical: {radical_label}. Radical analysis: {radical_analysis} \
                 Pictographic analysis: {pictographic_analysis} Combine both to \
                 explain the meaning of the whole character.",
            ),
        ])
        .expect("complete default set")
    }
}

/// Something that can answer one analysis stage.
pub trait StageAnalyzer: Send + Sync {
    fn analyze_stage(&self, req: &AnalysisRequest) -> Result<String, AnalysisError>;
}

impl<T: StageAnalyzer + ?Sized> StageAnalyzer for std::sync::Arc<T> {
    fn analyze_stage(&self, req: &AnalysisRequest) -> Result<String, AnalysisError> {
        (**self).analyze_stage(req)
    }
}

/// Replays stored [`QueryAnalyses`] records.
#[derive(Debug, Clone)]
pub struct FixtureAnalyzer {
    records: HashMap<String, QueryAnalyses>,
}

impl FixtureAnalyzer {
    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let records = load_queries(path)?
            .into_iter()
            .map(|q| (q.query_id.clone(), q))
            .collect();
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, query_id: &str) -> Result<QueryAnalyses, AnalysisError> {
        self.records
            .get(query_id)
            .cloned()
            .ok_or_else(|| AnalysisError::UnknownQuery(query_id.to_string()))
    }
}

/// Look up `query_id` in a fixture file.
pub fn fixture_analyze(query_id: &str, fixtures: &Path) -> Result<QueryAnalyses, AnalysisError> {
    FixtureAnalyzer::load(fixtures)?.get(query_id)
}

pub enum Analyzer {
    Fixture(FixtureAnalyzer),
    Staged(Box<dyn StageAnalyzer>),
}

#[derive(Debug, Clone, Copy)]
pub struct StageEvent {
    pub stage: AnalysisStage,
    pub started: Instant,
    pub finished: Instant,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineTrace {
    pub events: Vec<StageEvent>,
}

impl PipelineTrace {
    /// Stages ran in canonical order without overlapping.
    pub fn is_ordered(&self) -> bool {
        let stages: Vec<_> = self.events.iter().map(|e| e.stage).collect();
        stages == AnalysisStage::ORDER
            && self
                .events
                .windows(2)
                .all(|w| w[0].finished <= w[1].started)
    }
}

/// Produce the four analyses for one query, recording stage timings.
pub fn run_pipeline_traced(
    query_id: &str,
    image_ref: Option<&ImageRef>,
    radical_pred: &str,
    analyzer: &Analyzer,
) -> Result<(QueryAnalyses, PipelineTrace), AnalysisError> {
    let staged = match analyzer {
        Analyzer::Fixture(f) => return Ok((f.get(query_id)?, PipelineTrace::default())),
        Analyzer::Staged(s) => s,
    };
    let mut trace = PipelineTrace::default();
    let mut prior = PriorAnalyses::default();
    let mut answers = BTreeMap::new();
    for stage in AnalysisStage::ORDER {
        let req = AnalysisRequest {
            query_id: query_id.to_string(),
            image_ref: image_ref.cloned(),
            stage,
            radical_label: stage.requires_radical().then(|| radical_pred.to_string()),
            prior: prior.clone(),
        };
        let started = Instant::now();
        let text = req
            .validate()
            .and_then(|_| staged.analyze_stage(&req))
            .and_then(|t| {
                if t.trim().is_empty() {
                    Err(AnalysisError::EmptyAnalysis)
                } else {
                    Ok(t)
                }
            })
            .map_err(|e| AnalysisError::Stage {
                stage,
                source: Box::new(e),
            })?;
        trace.events.push(StageEvent {
            stage,
            started,
            finished: Instant::now(),
        });
        match stage {
            AnalysisStage::RadicalAnalysis => prior.radical_analysis = Some(text.clone()),
            AnalysisStage::PictographicAnalysis => prior.pictographic_analysis = Some(text.clone()),
            AnalysisStage::MutualAnalysis => {}
        }
        answers.insert(stage, text);
    }
    let mut take = |s| answers.remove(&s).expect("every stage answered");
    let q = QueryAnalyses {
        query_id: query_id.to_string(),
        radical_pred: radical_pred.to_string(),
        radical_analysis: take(AnalysisStage::RadicalAnalysis),
        pictographic_analysis: take(AnalysisStage::PictographicAnalysis),
        joint_analysis: take(AnalysisStage::MutualAnalysis),
        gold_label: None,
    };
    Ok((q, trace))
}

pub fn run_pipeline(
    query_id: &str,
    image_ref: Option<&ImageRef>,
    radical_pred: &str,
    analyzer: &Analyzer,
) -> Result<QueryAnalyses, AnalysisError> {
    run_pipeline_traced(query_id, image_ref, radical_pred, analyzer).map(|(q, _)| q)
}

/// One query to be analyzed: what `run_pipeline` needs besides the analyzer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineInput {
    pub query_id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub radical_pred: String,
    #[serde(default)]
    pub gold_label: Option<String>,
}

/// Run many queries with at most `max_in_flight` running at once. Output
/// order follows input order.
pub fn run_pipelines(
    inputs: &[PipelineInput],
    analyzer: &Analyzer,
    max_in_flight: usize,
) -> Result<Vec<QueryAnalyses>, AnalysisError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| AnalysisError::InvalidRequest(e.to_string()))?;
    pool.install(|| {
        inputs
            .par_iter()
            .map(|input| {
                let image = input.image_ref.as_deref().map(ImageRef::parse);
                let mut q = run_pipeline(&input.query_id, image.as_ref(), &input.radical_pred, analyzer)?;
                if q.gold_label.is_none() {
                    q.gold_label = input.gold_label.clone();
                }
                Ok(q)
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: usize) -> Duration {
        let factor = 1u32.checked_shl(attempt as u32).unwrap_or(u32::MAX);
        self.base_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: std::env::var(TOKEN_ENV).ok(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    query_id: &'a str,
    stage: &'a str,
    radical_label: Option<&'a str>,
    image_b64: Option<String>,
    prompt: String,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

type CacheKey = (String, AnalysisStage, String);

/// JSON-over-HTTP client for an external analysis service.
///
/// Responses are cached per `(query_id, stage, template version)`; status
/// codes of 500 and above and transport errors are retried with exponential
/// backoff.
pub struct RemoteAnalyzer {
    config: EndpointConfig,
    prompts: PromptSet,
    agent: ureq::Agent,
    cache: RwLock<HashMap<CacheKey, String>>,
    requests: AtomicUsize,
    retries: AtomicUsize,
}

impl RemoteAnalyzer {
    pub fn new(config: EndpointConfig, prompts: PromptSet) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self {
            config,
            prompts,
            agent,
            cache: RwLock::new(HashMap::new()),
            requests: AtomicUsize::new(0),
            retries: AtomicUsize::new(0),
        }
    }

    /// HTTP requests sent, including retries.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// Retries performed across all calls.
    pub fn retry_count(&self) -> usize {
        self.retries.load(Ordering::Relaxed)
    }

    fn post_once(&self, body: &str) -> Result<(u16, String), String> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.config.url);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .content_type("application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }

    fn post_with_retry(&self, body: &str) -> Result<String, AnalysisError> {
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            let transient = match self.post_once(body) {
                Ok((status, text)) if (200..300).contains(&status) => return Ok(text),
                Ok((status, text)) if status < 500 => {
                    return Err(AnalysisError::Status { status, body: text })
                }
                Ok((status, text)) => AnalysisError::Status { status, body: text },
                Err(message) => AnalysisError::Transport {
                    attempts: attempt + 1,
                    message,
                },
            };
            if attempt >= policy.max_retries {
                return Err(match transient {
                    AnalysisError::Status { status, body } => AnalysisError::Transport {
                        attempts: attempt + 1,
                        message: format!("status {status}: {body}"),
                    },
                    other => other,
                });
            }
            log::debug!("transient analyzer failure ({transient}); retrying");
            std::thread::sleep(policy.delay(attempt));
            self.retries.fetch_add(1, Ordering::Relaxed);
            attempt += 1;
        }
    }
}

impl StageAnalyzer for RemoteAnalyzer {
    fn analyze_stage(&self, req: &AnalysisRequest) -> Result<String, AnalysisError> {
        req.validate()?;
        let template = self.prompts.get(req.stage);
        let key = (req.query_id.clone(), req.stage, template.version.clone());
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let wire = WireRequest {
            query_id: &req.query_id,
            stage: req.stage.as_str(),
            radical_label: req.radical_label.as_deref(),
            image_b64: req.image_ref.as_ref().map(ImageRef::to_base64).transpose()?,
            prompt: template.render(req)?,
        };
        let body = serde_json::to_string(&wire).expect("serializable request");
        let raw = self.post_with_retry(&body)?;
        if raw.trim().is_empty() {
            return Err(AnalysisError::EmptyAnalysis);
        }
        let parsed: WireResponse =
            serde_json::from_str(&raw).map_err(|e| AnalysisError::BadResponse(e.to_string()))?;
        if parsed.text.trim().is_empty() {
            return Err(AnalysisError::EmptyAnalysis);
        }
        self.cache
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| parsed.text.clone());
        Ok(parsed.text)
    }
}
