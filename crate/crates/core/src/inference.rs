//! Inference clients for the vision-language and language-model stages.
//!
//! Every model call goes through [`infer`], which validates the request,
//! dispatches it to an [`InferenceBackend`] and validates the returned
//! payload against the stage schema (`iface-1`). Two backends exist: an
//! HTTP JSON backend for live models and a scripted backend replaying
//! canned payloads keyed by a request fingerprint.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const IFACE_SCHEMA: &str = "iface-1";
pub const ENV_URL: &str = "S3DSG_INFERENCE_URL";
pub const ENV_TOKEN: &str = "S3DSG_INFERENCE_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BehaviorDescription,
    ActivityProposal,
    RemoteSolver,
    QueryAnswer,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::BehaviorDescription,
        Stage::ActivityProposal,
        Stage::RemoteSolver,
        Stage::QueryAnswer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::BehaviorDescription => "behavior_description",
            Stage::ActivityProposal => "activity_proposal",
            Stage::RemoteSolver => "remote_solver",
            Stage::QueryAnswer => "query_answer",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    fn needs_image(&self) -> bool {
        matches!(self, Stage::BehaviorDescription | Stage::ActivityProposal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub stage: Stage,
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_json: Option<String>,
}

impl InferenceRequest {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::InvalidRequest(m.to_string()));
        if self.prompt_text.trim().is_empty() {
            return bad("empty prompt");
        }
        if self.stage.needs_image() && self.image_ref.is_none() {
            return bad("image_ref required for image stages");
        }
        if !self.stage.needs_image() && self.context_json.is_none() {
            return bad("context_json required for graph stages");
        }
        Ok(())
    }

    /// Stable hash of the request inputs. Whitespace runs in the prompt are
    /// collapsed first so cosmetic edits keep the fingerprint.
    pub fn fingerprint(&self) -> String {
        fingerprint(
            &self.prompt_text,
            self.image_ref.as_deref(),
            self.context_json.as_deref(),
        )
    }
}

pub fn fingerprint(
    prompt_text: &str,
    image_ref: Option<&str>,
    context_json: Option<&str>,
) -> String {
    let normalized = prompt_text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut h = Sha256::new();
    h.update(normalized.as_bytes());
    h.update([0x1f]);
    h.update(image_ref.unwrap_or("").as_bytes());
    h.update([0x1f]);
    h.update(context_json.unwrap_or("").as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub payload_json: String,
    pub latency_ms: f64,
    pub backend_id: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("schema violation for {stage:?}: {violations:?}")]
    SchemaViolation {
        stage: Stage,
        violations: Vec<String>,
        raw: String,
    },
    #[error("no scripted entry for {stage:?} with fingerprint {fingerprint}")]
    ScenarioMiss { stage: Stage, fingerprint: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl InferenceError {
    pub fn schema(stage: Stage, violations: Vec<String>, raw: &str) -> Self {
        InferenceError::SchemaViolation {
            stage,
            violations,
            raw: raw.to_string(),
        }
    }
}

/// Something that turns a validated request into a raw payload string.
pub trait InferenceBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn call(&self, request: &InferenceRequest) -> Result<String, InferenceError>;
}

/// Validates the request, calls the backend, and rejects payloads that do
/// not satisfy the stage schema.
pub fn infer(
    request: &InferenceRequest,
    backend: &dyn InferenceBackend,
) -> Result<InferenceResponse, InferenceError> {
    request.validate()?;
    let started = Instant::now();
    let payload = backend.call(request)?;
    let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
    if let Err(violations) = validate_stage_payload(request.stage, &payload) {
        log::warn!(
            "rejecting {} payload from {}: {violations:?}; raw payload: {payload}",
            request.stage.as_str(),
            backend.backend_id()
        );
        return Err(InferenceError::schema(request.stage, violations, &payload));
    }
    Ok(InferenceResponse {
        payload_json: payload,
        latency_ms,
        backend_id: backend.backend_id().to_string(),
    })
}

// ---------------------------------------------------------------------------
// Stage payloads

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorItem {
    pub marker: u32,
    pub posture: String,
    pub gaze: String,
    pub physical_state: String,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPayload {
    pub humans: Vec<BehaviorItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalItem {
    pub human_marker: u32,
    #[serde(default)]
    pub target: Option<u32>,
    pub raw_label: String,
    #[serde(default)]
    pub frame: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalPayload {
    pub local: Vec<ProposalItem>,
    pub remote: Vec<ProposalItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverItem {
    pub human_id: u32,
    pub entity_id: u32,
    pub raw_label: String,
    pub frame: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverPayload {
    pub resolutions: Vec<SolverItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub candidates: Vec<u32>,
}

fn field<'a>(obj: &'a Value, key: &str, ctx: &str, out: &mut Vec<String>) -> Option<&'a Value> {
    let v = obj.get(key);
    if v.is_none() || v == Some(&Value::Null) {
        out.push(format!("{ctx}: missing `{key}`"));
        return None;
    }
    v
}

fn require_str(obj: &Value, key: &str, ctx: &str, out: &mut Vec<String>) {
    if let Some(v) = field(obj, key, ctx, out) {
        if !v.is_string() {
            out.push(format!("{ctx}: `{key}` must be a string"));
        }
    }
}

fn require_uint(obj: &Value, key: &str, ctx: &str, out: &mut Vec<String>) -> Option<u64> {
    let v = field(obj, key, ctx, out)?;
    let n = v.as_u64();
    if n.is_none() || n > Some(u64::from(u32::MAX)) {
        out.push(format!("{ctx}: `{key}` must be a non-negative integer"));
        return None;
    }
    n
}

fn require_array<'a>(obj: &'a Value, key: &str, ctx: &str, out: &mut Vec<String>) -> &'a [Value] {
    match field(obj, key, ctx, out) {
        Some(Value::Array(a)) => a,
        Some(_) => {
            out.push(format!("{ctx}: `{key}` must be an array"));
            &[]
        }
        None => &[],
    }
}

fn optional_frame(obj: &Value, ctx: &str, out: &mut Vec<String>) {
    match obj.get("frame") {
        None | Some(Value::Null) => {}
        Some(Value::String(s)) if !s.trim().is_empty() => {}
        Some(_) => out.push(format!("{ctx}: `frame` must be a non-empty string or null")),
    }
}

/// Checks a raw payload against the stage schema; `Err` lists every
/// violation found.
pub fn validate_stage_payload(stage: Stage, payload_json: &str) -> Result<(), Vec<String>> {
    let root: Value = match serde_json::from_str(payload_json) {
        Ok(v) => v,
        Err(e) => return Err(vec![format!("payload is not JSON: {e}")]),
    };
    if !root.is_object() {
        return Err(vec!["payload must be a JSON object".into()]);
    }
    let mut out = Vec::new();
    match stage {
        Stage::BehaviorDescription => {
            let humans = require_array(&root, "humans", "behavior", &mut out);
            let mut markers = BTreeSet::new();
            for (i, h) in humans.iter().enumerate() {
                let ctx = format!("humans[{i}]");
                if let Some(m) = require_uint(h, "marker", &ctx, &mut out) {
                    if !markers.insert(m) {
                        out.push(format!("{ctx}: marker {m} described twice"));
                    }
                }
                for key in ["posture", "gaze", "physical_state"] {
                    require_str(h, key, &ctx, &mut out);
                }
                let attrs = require_array(h, "attributes", &ctx, &mut out);
                if attrs.iter().any(|a| !a.is_string()) {
                    out.push(format!("{ctx}: attributes must be strings"));
                }
                let all_empty = ["posture", "gaze", "physical_state"].iter().all(|k| {
                    h.get(*k)
                        .and_then(Value::as_str)
                        .is_none_or(|s| s.trim().is_empty())
                }) && attrs.is_empty();
                if all_empty {
                    out.push(format!("{ctx}: all behavior fields are empty"));
                }
            }
        }
        Stage::ActivityProposal => {
            let mut seen: BTreeMap<(u64, String, String), &str> = BTreeMap::new();
            for list in ["local", "remote"] {
                for (i, item) in require_array(&root, list, "proposal", &mut out)
                    .iter()
                    .enumerate()
                {
                    let ctx = format!("{list}[{i}]");
                    let marker = require_uint(item, "human_marker", &ctx, &mut out);
                    require_str(item, "raw_label", &ctx, &mut out);
                    optional_frame(item, &ctx, &mut out);
                    match item.get("target") {
                        None | Some(Value::Null) if list == "local" => {
                            out.push(format!("{ctx}: local activities need a target"))
                        }
                        None | Some(Value::Null) => {}
                        Some(t) if t.as_u64().is_none() => {
                            out.push(format!("{ctx}: `target` must be a marker integer"))
                        }
                        Some(_) => {}
                    }
                    let label = item
                        .get("raw_label")
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .trim()
                        .to_lowercase();
                    let frame = item
                        .get("frame")
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .to_string();
                    if let Some(m) = marker {
                        if let Some(prev) = seen.insert((m, label.clone(), frame), list) {
                            if prev != list {
                                out.push(format!(
                                    "{ctx}: activity {label:?} of marker {m} is both local and remote"
                                ));
                            }
                        }
                    }
                }
            }
        }
        Stage::RemoteSolver => {
            for (i, item) in require_array(&root, "resolutions", "solver", &mut out)
                .iter()
                .enumerate()
            {
                let ctx = format!("resolutions[{i}]");
                require_uint(item, "human_id", &ctx, &mut out);
                require_uint(item, "entity_id", &ctx, &mut out);
                require_str(item, "raw_label", &ctx, &mut out);
                require_str(item, "frame", &ctx, &mut out);
                if let Some(c) = field(item, "confidence", &ctx, &mut out) {
                    match c.as_f64() {
                        Some(c) if (0.0..=1.0).contains(&c) => {}
                        _ => out.push(format!("{ctx}: confidence must be a number in [0, 1]")),
                    }
                }
            }
        }
        Stage::QueryAnswer => {
            let cands = require_array(&root, "candidates", "query", &mut out);
            if cands.len() > 2 {
                out.push(format!(
                    "query: {} candidates exceed the top-2 limit",
                    cands.len()
                ));
            }
            if cands.iter().any(|c| c.as_u64().is_none()) {
                out.push("query: candidates must be node ids".into());
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

/// Inputs hashed into a scripted entry's fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintInputs {
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_json: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub stage: Stage,
    pub fingerprint_inputs: FingerprintInputs,
    pub payload: Value,
}

impl ScenarioRecord {
    pub fn from_request(request: &InferenceRequest, payload: Value) -> Self {
        ScenarioRecord {
            stage: request.stage,
            fingerprint_inputs: FingerprintInputs {
                prompt_text: request.prompt_text.clone(),
                image_ref: request.image_ref.clone(),
                context_json: request.context_json.clone(),
            },
            payload,
        }
    }
}

/// Replays canned payloads. Read-only after construction.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    entries: BTreeMap<(Stage, String), String>,
}

impl ScriptedBackend {
    pub fn from_records(records: &[ScenarioRecord]) -> Result<ScriptedBackend, InferenceError> {
        let mut entries = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let payload = serde_json::to_string(&r.payload).expect("json value serializes");
            if let Err(v) = validate_stage_payload(r.stage, &payload) {
                return Err(InferenceError::InvalidScenario(format!(
                    "record {i} ({}) fails its stage schema: {v:?}",
                    r.stage.as_str()
                )));
            }
            let fp = fingerprint(
                &r.fingerprint_inputs.prompt_text,
                r.fingerprint_inputs.image_ref.as_deref(),
                r.fingerprint_inputs.context_json.as_deref(),
            );
            entries.insert((r.stage, fp), payload);
        }
        Ok(ScriptedBackend { entries })
    }

    pub fn from_json(text: &str) -> Result<ScriptedBackend, InferenceError> {
        let records: Vec<ScenarioRecord> = serde_json::from_str(text)
            .map_err(|e| InferenceError::InvalidScenario(e.to_string()))?;
        Self::from_records(&records)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl InferenceBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        "scripted"
    }

    fn call(&self, request: &InferenceRequest) -> Result<String, InferenceError> {
        let fp = request.fingerprint();
        self.entries
            .get(&(request.stage, fp.clone()))
            .cloned()
            .ok_or(InferenceError::ScenarioMiss {
                stage: request.stage,
                fingerprint: fp,
            })
    }
}

/// Wraps a backend and records every successful exchange as a scenario
/// record, for authoring scripted scenarios from a live or oracle run.
pub struct RecordingBackend<B> {
    inner: B,
    records: Mutex<Vec<ScenarioRecord>>,
}

impl<B: InferenceBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    /// Recorded exchanges, deduplicated by (stage, fingerprint), in call order.
    pub fn records(&self) -> Vec<ScenarioRecord> {
        let records = self.records.lock().expect("recording lock");
        let mut seen = BTreeSet::new();
        records
            .iter()
            .filter(|r| {
                let fp = fingerprint(
                    &r.fingerprint_inputs.prompt_text,
                    r.fingerprint_inputs.image_ref.as_deref(),
                    r.fingerprint_inputs.context_json.as_deref(),
                );
                seen.insert((r.stage, fp))
            })
            .cloned()
            .collect()
    }
}

impl<B: InferenceBackend> InferenceBackend for RecordingBackend<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn call(&self, request: &InferenceRequest) -> Result<String, InferenceError> {
        let payload = self.inner.call(request)?;
        if let Ok(value) = serde_json::from_str::<Value>(&payload) {
            self.records
                .lock()
                .expect("recording lock")
                .push(ScenarioRecord::from_request(request, value));
        }
        Ok(payload)
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(endpoint: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            token: None,
            timeout: Duration::from_secs(120),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }

    /// Endpoint and token from `S3DSG_INFERENCE_URL` / `S3DSG_INFERENCE_TOKEN`.
    pub fn from_env() -> Result<Self, InferenceError> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| InferenceError::BackendUnavailable(format!("{ENV_URL} is not set")))?;
        let mut cfg = Self::new(&url);
        cfg.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        Ok(cfg)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore lock");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore lock");
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    schema: &'a str,
    stage: Stage,
    prompt_text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    context_json: Option<&'a str>,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

/// JSON-over-HTTP backend. The endpoint receives
/// `{schema, stage, prompt_text, image_ref?, context_json?}` and answers
/// either `{"payload": {...}}` or the payload object itself.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let in_flight = Semaphore::new(config.max_in_flight);
        Self {
            config,
            agent,
            in_flight,
        }
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                match status {
                    200..=299 => Attempt::Done(text),
                    408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
                    _ => Attempt::Fatal(format!("HTTP {status}: {text}")),
                }
            }
            Err(e) => Attempt::Retry(e.to_string()),
        }
    }
}

impl InferenceBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        "http"
    }

    fn call(&self, request: &InferenceRequest) -> Result<String, InferenceError> {
        let body = serde_json::to_string(&HttpRequestBody {
            schema: IFACE_SCHEMA,
            stage: request.stage,
            prompt_text: &request.prompt_text,
            image_ref: request.image_ref.as_deref(),
            context_json: request.context_json.as_deref(),
        })
        .expect("request body serializes");
        let _permit = self.in_flight.acquire();
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts.max(1) {
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(unwrap_payload(&text)),
                Attempt::Fatal(msg) => return Err(InferenceError::BackendUnavailable(msg)),
                Attempt::Retry(msg) => {
                    log::warn!(
                        "{} attempt {attempt}/{} failed: {msg}",
                        request.stage.as_str(),
                        self.config.max_attempts
                    );
                    last = msg;
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(InferenceError::BackendUnavailable(format!(
            "gave up after {} attempts: {last}",
            self.config.max_attempts
        )))
    }
}

fn unwrap_payload(text: &str) -> String {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(mut obj)) if obj.contains_key("payload") => {
            let payload = obj.remove("payload").unwrap_or(Value::Null);
            match payload {
                Value::String(s) => s,
                other => other.to_string(),
            }
        }
        _ => text.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn behavior_request() -> InferenceRequest {
        InferenceRequest {
            stage: Stage::BehaviorDescription,
            prompt_text: "Describe marker 1.".into(),
            image_ref: Some("frame_0_humans.png".into()),
            context_json: None,
        }
    }

    fn behavior_payload() -> Value {
        json!({"humans": [{"marker": 1, "posture": "slouched", "gaze": "averted",
                           "physical_state": "sitting", "attributes": []}]})
    }

    #[test]
    fn scripted_lookup_is_deterministic() {
        let req = behavior_request();
        let backend = ScriptedBackend::from_records(&[ScenarioRecord::from_request(
            &req,
            behavior_payload(),
        )])
        .unwrap();
        let a = infer(&req, &backend).unwrap();
        let b = infer(&req, &backend).unwrap();
        assert_eq!(a.backend_id, "scripted");
        assert_eq!(a.payload_json, b.payload_json);
        let parsed: BehaviorPayload = serde_json::from_str(&a.payload_json).unwrap();
        assert_eq!(parsed.humans[0].gaze, "averted");
    }

    #[test]
    fn scripted_miss() {
        let backend = ScriptedBackend::default();
        assert!(matches!(
            infer(&behavior_request(), &backend),
            Err(InferenceError::ScenarioMiss { .. })
        ));
    }

    #[test]
    fn fingerprint_ignores_whitespace_layout() {
        let a = fingerprint("Describe   marker\n1.", Some("x"), None);
        let b = fingerprint(" Describe marker 1. ", Some("x"), None);
        assert_eq!(a, b);
        assert_ne!(a, fingerprint("Describe marker 2.", Some("x"), None));
        assert_ne!(a, fingerprint("Describe marker 1.", Some("y"), None));
    }

    #[test]
    fn request_field_requirements() {
        let mut req = behavior_request();
        req.image_ref = None;
        assert!(req.validate().is_err());
        let q = InferenceRequest {
            stage: Stage::QueryAnswer,
            prompt_text: "who?".into(),
            image_ref: None,
            context_json: None,
        };
        assert!(q.validate().is_err());
    }

    #[test]
    fn proposal_overlap_is_a_violation() {
        let item = json!({"human_marker": 1, "target": 3, "raw_label": "reading", "frame": "READ"});
        let payload = json!({"local": [item.clone()], "remote": [item]}).to_string();
        let err = validate_stage_payload(Stage::ActivityProposal, &payload).unwrap_err();
        assert!(
            err.iter().any(|v| v.contains("both local and remote")),
            "{err:?}"
        );
    }

    #[test]
    fn proposal_remote_may_omit_target() {
        let payload = json!({
            "local": [{"human_marker": 1, "target": 3, "raw_label": "watching tv", "frame": "SEE"}],
            "remote": [{"human_marker": 1, "raw_label": "reading", "frame": null}]
        })
        .to_string();
        assert!(validate_stage_payload(Stage::ActivityProposal, &payload).is_ok());
        let bad =
            json!({"local": [{"human_marker": 1, "raw_label": "x"}], "remote": []}).to_string();
        assert!(validate_stage_payload(Stage::ActivityProposal, &bad).is_err());
    }

    #[test]
    fn behavior_missing_gaze() {
        let payload = json!({"humans": [{"marker": 1, "posture": "upright",
                                         "physical_state": "standing", "attributes": []}]})
        .to_string();
        let err = validate_stage_payload(Stage::BehaviorDescription, &payload).unwrap_err();
        assert!(err.iter().any(|v| v.contains("gaze")));
    }

    #[test]
    fn query_top_two_cap() {
        let three = json!({"candidates": [1, 2, 3]}).to_string();
        assert!(validate_stage_payload(Stage::QueryAnswer, &three).is_err());
        let two = json!({"candidates": [1, 2]}).to_string();
        assert!(validate_stage_payload(Stage::QueryAnswer, &two).is_ok());
    }

    #[test]
    fn solver_confidence_range() {
        let p = |c: f64| {
            json!({"resolutions": [{"human_id": 1, "entity_id": 2, "raw_label": "reading",
                                     "frame": "READ", "confidence": c}]})
            .to_string()
        };
        assert!(validate_stage_payload(Stage::RemoteSolver, &p(0.9)).is_ok());
        assert!(validate_stage_payload(Stage::RemoteSolver, &p(1.5)).is_err());
    }

    #[test]
    fn non_json_payload_rejected() {
        assert!(validate_stage_payload(Stage::QueryAnswer, "not json").is_err());
    }

    #[test]
    fn scenario_with_invalid_payload_rejected() {
        let rec = ScenarioRecord::from_request(&behavior_request(), json!({"humans": 3}));
        assert!(matches!(
            ScriptedBackend::from_records(&[rec]),
            Err(InferenceError::InvalidScenario(_))
        ));
    }

    #[test]
    fn schema_violation_surfaces_through_infer() {
        struct Bad;
        impl InferenceBackend for Bad {
            fn backend_id(&self) -> &str {
                "bad"
            }
            fn call(&self, _: &InferenceRequest) -> Result<String, InferenceError> {
                Ok(r#"{"candidates": [1, 2, 3]}"#.into())
            }
        }
        let req = InferenceRequest {
            stage: Stage::QueryAnswer,
            prompt_text: "who?".into(),
            image_ref: None,
            context_json: Some("{}".into()),
        };
        assert!(matches!(
            infer(&req, &Bad),
            Err(InferenceError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn recording_backend_captures_exchanges() {
        let req = behavior_request();
        let inner = ScriptedBackend::from_records(&[ScenarioRecord::from_request(
            &req,
            behavior_payload(),
        )])
        .unwrap();
        let rec = RecordingBackend::new(inner);
        infer(&req, &rec).unwrap();
        infer(&req, &rec).unwrap();
        let records = rec.records();
        assert_eq!(records.len(), 1);
        let replay = ScriptedBackend::from_records(&records).unwrap();
        assert!(infer(&req, &replay).is_ok());
    }

    #[test]
    fn payload_envelope_unwrapped() {
        assert_eq!(
            unwrap_payload(r#"{"payload": {"candidates": [1]}}"#),
            r#"{"candidates":[1]}"#
        );
        assert_eq!(
            unwrap_payload(r#"{"candidates": [1]}"#),
            r#"{"candidates": [1]}"#
        );
    }
}
