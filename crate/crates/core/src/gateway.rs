//! Persistence, the HTTP API, the action scheduler and the command line.
//!
//! The router is a plain function of (method, path, query, token, body) so it
//! can be exercised without a socket; [`serve`] wraps it in axum.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::actions::{
    advance_premortem, close_action, default_rules, poll_actions, premortem_shared_reasons, run_scripted_action,
    submit_premortem_reasons, suggest_actions, ActionError,
};
use crate::feedback::{
    consensus_from_session, consistency_from_session, influence_from_session, track_uncertainty, ConsensusMethod,
    ConsistencyConfig, Finding, ReferenceDatabase,
};
use crate::monitoring::{ingest_transcript, MonitoringError, TranscriptUtterance};
use crate::registry::{validate_pipeline, Catalogue, Pipeline};
use crate::reporting::{build_report, render, ArtifactFormat, Audience, Namer, ReportError, ReportKind};
use crate::session::{
    replay_events, Clock, ElicitationSession, EventSink, Prompt, PromptMode, Response, Role, SessionError,
    SessionEvent, SystemClock, Task,
};
use crate::simulation::{load_cohort, run_simulation, AgentProfile, Scenario, SimulationError};

/// Environment variable overriding the store directory.
pub const STORE_ENV: &str = "MICE_STORE_DIR";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("session '{0}' is locked by another writer")]
    StoreLocked(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt record on line {line}: {message}")]
    CorruptRecord { line: usize, message: String },
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Monitoring(#[from] MonitoringError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Io { .. } => "io_failure",
            GatewayError::StoreLocked(_) => "store_locked",
            GatewayError::NotFound(_) => "not_found",
            GatewayError::CorruptRecord { .. } => "corrupt_record",
            GatewayError::Unauthorized(_) | GatewayError::Forbidden(_) => "unauthorized",
            GatewayError::BadRequest(_) => "bad_request",
            GatewayError::Session(e) => e.code(),
            GatewayError::Action(e) => e.code(),
            GatewayError::Report(e) => e.code(),
            GatewayError::Monitoring(e) => e.code(),
            GatewayError::Simulation(e) => e.code(),
        }
    }

    fn is_authorization(&self) -> bool {
        matches!(self.code(), "unauthorized" | "not_facilitator" | "not_expert")
    }

    pub fn status(&self) -> u16 {
        if self.is_authorization() {
            return match self {
                GatewayError::Unauthorized(_) => 401,
                _ => 403,
            };
        }
        match self.code() {
            "io_failure" | "corrupt_record" => 500,
            "not_found" | "unknown_prompt" | "unknown_task" | "unknown_participant" | "unknown_run"
            | "unknown_descriptor" => 404,
            "store_locked" | "facilitator_exists" | "prompt_closed" | "slowdown_active" | "duplicate_prompt"
            | "run_complete" | "phase_violation" => 409,
            _ => 400,
        }
    }

    /// Uniform error body. Every authorization failure shares one code.
    pub fn to_json(&self) -> Value {
        let code = if self.is_authorization() { "unauthorized" } else { self.code() };
        json!({ "code": code, "message": self.to_string(), "subject": self.subject() })
    }

    fn subject(&self) -> Option<String> {
        match self {
            GatewayError::Io { path, .. } => Some(path.display().to_string()),
            GatewayError::StoreLocked(s) | GatewayError::NotFound(s) => Some(s.clone()),
            GatewayError::CorruptRecord { line, .. } => Some(format!("line {line}")),
            GatewayError::Session(SessionError::NotFacilitator(s) | SessionError::UnknownPrompt(s))
            | GatewayError::Action(ActionError::Session(
                SessionError::NotFacilitator(s) | SessionError::UnknownPrompt(s),
            )) => Some(s.clone()),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GatewayError + '_ {
    move |source| GatewayError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// store

/// Events parsed from a log, plus whether a half-written final line was
/// dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLog {
    pub events: Vec<SessionEvent>,
    pub truncated_tail: bool,
    /// Byte length of the intact prefix.
    pub valid_len: usize,
}

/// Parses a JSON Lines log. A final line without its newline that fails to
/// parse is treated as an interrupted append; any other bad line is corrupt.
pub fn parse_log(doc: &str) -> Result<LoadedLog, GatewayError> {
    let mut events = Vec::new();
    let mut offset = 0;
    let mut truncated_tail = false;
    for (i, chunk) in doc.split_inclusive('\n').enumerate() {
        let complete = chunk.ends_with('\n');
        let line = chunk.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            offset += chunk.len();
            continue;
        }
        match SessionEvent::from_json_line(line) {
            Ok(e) => {
                events.push(e);
                offset += chunk.len();
            }
            Err(_) if !complete => {
                truncated_tail = true;
                break;
            }
            Err(e) => {
                return Err(GatewayError::CorruptRecord {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(LoadedLog {
        events,
        truncated_tail,
        valid_len: offset,
    })
}

pub fn load_log_file(path: &Path) -> Result<LoadedLog, GatewayError> {
    let doc = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            GatewayError::NotFound(path.display().to_string())
        } else {
            GatewayError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    parse_log(&doc)
}

/// Directory of `<session>.jsonl` logs guarded by `<session>.lock` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    /// Uses the environment override when set, else `fallback`.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        match std::env::var_os(STORE_ENV) {
            Some(dir) => Self::open(PathBuf::from(dir)),
            None => Self::open(fallback),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_path(&self, session_id: &str) -> PathBuf {
        self.root.join(format!("{session_id}.jsonl"))
    }

    fn lock_path(&self, session_id: &str) -> PathBuf {
        self.root.join(format!("{session_id}.lock"))
    }

    fn tokens_path(&self, session_id: &str) -> PathBuf {
        self.root.join(format!("{session_id}.tokens.json"))
    }

    /// Session ids with a log in this store, sorted.
    pub fn sessions(&self) -> Result<Vec<String>, GatewayError> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".jsonl") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_session(&self, session_id: &str) -> Result<LoadedLog, GatewayError> {
        match load_log_file(&self.log_path(session_id)) {
            Err(GatewayError::NotFound(_)) => Err(GatewayError::NotFound(session_id.into())),
            other => other,
        }
    }

    /// Takes the single-writer lock for a session. If the log ends in a
    /// half-written line, it is cut back to the intact prefix first.
    pub fn writer(&self, session_id: &str) -> Result<StoreWriter, GatewayError> {
        let lock = self.lock_path(session_id);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(GatewayError::StoreLocked(session_id.into()))
            }
            Err(e) => return Err(io_err(&lock)(e)),
        }
        let release = |e| {
            let _ = std::fs::remove_file(&lock);
            e
        };
        let path = self.log_path(session_id);
        if path.exists() {
            let loaded = self.load_session(session_id).map_err(release)?;
            if loaded.truncated_tail {
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path)).map_err(release)?;
                f.set_len(loaded.valid_len as u64).map_err(io_err(&path)).map_err(release)?;
                f.sync_all().map_err(io_err(&path)).map_err(release)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))
            .map_err(release)?;
        Ok(StoreWriter { file, path, lock })
    }

    /// Appends events to a session's log under its lock.
    pub fn persist_session(&self, session_id: &str, events: &[SessionEvent]) -> Result<(), GatewayError> {
        let mut w = self.writer(session_id)?;
        for e in events {
            w.append(e)?;
        }
        Ok(())
    }

    /// Removes a session's log and token file.
    pub fn delete_session(&self, session_id: &str) -> Result<(), GatewayError> {
        let path = self.log_path(session_id);
        std::fs::remove_file(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                GatewayError::NotFound(session_id.into())
            } else {
                io_err(&path)(e)
            }
        })?;
        let _ = std::fs::remove_file(self.tokens_path(session_id));
        Ok(())
    }

    fn save_tokens(&self, session_id: &str, tokens: &[&AccessToken]) -> Result<(), GatewayError> {
        let path = self.tokens_path(session_id);
        let doc = serde_json::to_string_pretty(tokens).expect("tokens serialize");
        std::fs::write(&path, doc).map_err(io_err(&path))
    }

    fn load_tokens(&self, session_id: &str) -> Result<Vec<AccessToken>, GatewayError> {
        let path = self.tokens_path(session_id);
        match std::fs::read_to_string(&path) {
            Ok(doc) => serde_json::from_str(&doc).map_err(|e| GatewayError::CorruptRecord {
                line: e.line(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

/// Append handle holding a session's lock; releases it on drop.
#[derive(Debug)]
pub struct StoreWriter {
    file: File,
    path: PathBuf,
    lock: PathBuf,
}

impl StoreWriter {
    /// Writes one event line and syncs it before returning.
    pub fn append(&mut self, event: &SessionEvent) -> Result<(), GatewayError> {
        let mut line = event.to_json_line();
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for StoreWriter {
    fn persist(&mut self, event: &SessionEvent) -> Result<(), String> {
        self.append(event).map_err(|e| e.to_string())
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

// ---------------------------------------------------------------------------
// tokens

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token: String,
    pub participant_id: String,
    pub role: Role,
    pub session_id: String,
    pub issued_at: DateTime<Utc>,
}

impl AccessToken {
    fn issue(session_id: &str, participant_id: &str, role: Role, at: DateTime<Utc>) -> Self {
        Self {
            token: uuid::Uuid::new_v4().simple().to_string(),
            participant_id: participant_id.into(),
            role,
            session_id: session_id.into(),
            issued_at: at,
        }
    }
}

// ---------------------------------------------------------------------------
// findings across a session

/// Runs every analytic the session has data for and collects the findings.
/// Analytics that cannot run yet are skipped.
pub fn session_findings(state: &crate::session::SessionState) -> Vec<Finding> {
    let mut out = Vec::new();
    let params: BTreeSet<String> = state
        .prompts_in_order()
        .filter(|p| p.prompt.mode.is_numeric_estimate() && p.prompt.rates.is_none())
        .map(|p| p.prompt.parameter_name.clone())
        .collect();
    for param in &params {
        if let Ok(t) = track_uncertainty(state, param) {
            out.extend(t.findings);
        }
        if state.reference.as_ref().is_some_and(|db| db.lookup(param).is_some()) {
            if let Ok(c) = consistency_from_session(state, param, ConsistencyConfig::default()) {
                out.extend(c.findings);
            }
        }
    }
    if let Some(latest) = state
        .prompts_in_order()
        .filter(|p| p.prompt.mode.is_numeric_estimate() && p.prompt.rates.is_none())
        .filter(|p| !state.responses_for(&p.prompt.id).is_empty())
        .last()
    {
        if let Ok(c) = consensus_from_session(state, &latest.prompt.id, ConsensusMethod::Mean) {
            out.extend(c.findings);
        }
    }
    if let Ok(i) = influence_from_session(state) {
        out.extend(i.findings);
    }
    out
}

// ---------------------------------------------------------------------------
// router

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }

    fn created(body: Value) -> Self {
        Self { status: 201, body }
    }

    fn error(e: &GatewayError) -> Self {
        Self {
            status: e.status(),
            body: e.to_json(),
        }
    }
}

struct Hosted {
    session: ElicitationSession,
    log: Option<PathBuf>,
}

/// In-process service state: hosted sessions, tokens and the store.
pub struct Gateway {
    catalogue: Catalogue,
    clock: Arc<dyn Clock>,
    store: Option<Store>,
    sessions: BTreeMap<String, Hosted>,
    tokens: HashMap<String, AccessToken>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("store", &self.store)
            .field("sessions", &self.sessions.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    task: Task,
    pipeline: Pipeline,
    #[serde(default)]
    reference: Option<ReferenceDatabase>,
    #[serde(default = "facilitator_name")]
    facilitator_name: String,
}

fn facilitator_name() -> String {
    "Facilitator".into()
}

#[derive(Debug, Deserialize)]
struct JoinRequest {
    display_name: String,
    #[serde(default)]
    expertise_tags: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
struct PromptRequest {
    #[serde(default)]
    id: String,
    #[serde(default)]
    task_id: Option<String>,
    parameter_name: String,
    mode: PromptMode,
    #[serde(default)]
    coverage: Option<f64>,
    #[serde(default)]
    round_index: Option<u32>,
    #[serde(default)]
    question_id: Option<String>,
    #[serde(default)]
    anonymous_feedback: bool,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    rates: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ResponseRequest {
    prompt_id: String,
    point: f64,
    #[serde(default)]
    interval: Option<(f64, f64)>,
    #[serde(default)]
    justification: Option<String>,
    #[serde(default)]
    categories: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
struct SimulationRequest {
    scenario: Scenario,
    cohort: Vec<AgentProfile>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct ReasonsRequest {
    reasons: Vec<String>,
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Value) -> Result<T, GatewayError> {
    serde_json::from_value(body.clone()).map_err(|e| GatewayError::BadRequest(e.to_string()))
}

impl Gateway {
    /// A gateway that keeps sessions in memory only.
    pub fn in_memory(catalogue: Catalogue, clock: Arc<dyn Clock>) -> Self {
        Self {
            catalogue,
            clock,
            store: None,
            sessions: BTreeMap::new(),
            tokens: HashMap::new(),
        }
    }

    /// A gateway backed by a store; every session already in it is resumed
    /// and locked.
    pub fn with_store(catalogue: Catalogue, clock: Arc<dyn Clock>, store: Store) -> Result<Self, GatewayError> {
        let mut g = Self::in_memory(catalogue, clock);
        for id in store.sessions()? {
            let writer = store.writer(&id)?;
            let loaded = store.load_session(&id)?;
            let mut session = ElicitationSession::from_events(loaded.events, g.clock.clone())?;
            let log = writer.path().to_path_buf();
            session.attach_sink(Box::new(writer), false)?;
            for t in store.load_tokens(&id)? {
                g.tokens.insert(t.token.clone(), t);
            }
            g.sessions.insert(id, Hosted { session, log: Some(log) });
        }
        g.store = Some(store);
        Ok(g)
    }

    pub fn session(&self, id: &str) -> Option<&ElicitationSession> {
        self.sessions.get(id).map(|h| &h.session)
    }

    pub fn session_ids(&self) -> impl Iterator<Item = &String> {
        self.sessions.keys()
    }

    /// Fires due timers and completion conditions in every session.
    pub fn tick(&mut self) -> Vec<(String, Vec<String>)> {
        let mut changed = Vec::new();
        for (id, h) in self.sessions.iter_mut() {
            if let Ok(runs) = poll_actions(&mut h.session) {
                if !runs.is_empty() {
                    changed.push((id.clone(), runs));
                }
            }
        }
        changed
    }

    /// Routes a read-only request.
    pub fn get(&self, path: &str, query: &BTreeMap<String, String>, token: Option<&str>) -> ApiResponse {
        let segments: Vec<&str> = path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
        match self.query(&segments, query, token) {
            Ok(r) => r,
            Err(e) => ApiResponse::error(&e),
        }
    }

    /// Routes one request. `path` excludes the query string.
    pub fn handle(
        &mut self,
        method: &str,
        path: &str,
        query: &BTreeMap<String, String>,
        token: Option<&str>,
        body: &Value,
    ) -> ApiResponse {
        let segments: Vec<&str> = path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
        let result = if method.eq_ignore_ascii_case("GET") {
            self.query(&segments, query, token)
        } else {
            self.command(method, &segments, token, body)
        };
        match result {
            Ok(r) => r,
            Err(e) => ApiResponse::error(&e),
        }
    }

    fn authorize(&self, session_id: &str, token: Option<&str>) -> Result<&AccessToken, GatewayError> {
        if !self.sessions.contains_key(session_id) {
            return Err(GatewayError::NotFound(session_id.into()));
        }
        let token = token.ok_or_else(|| GatewayError::Unauthorized("missing bearer token".into()))?;
        match self.tokens.get(token) {
            Some(t) if t.session_id == session_id => Ok(t),
            _ => Err(GatewayError::Unauthorized("token not valid for this session".into())),
        }
    }

    fn authorize_facilitator(&self, session_id: &str, token: Option<&str>) -> Result<String, GatewayError> {
        let t = self.authorize(session_id, token)?;
        if t.role != Role::Facilitator {
            return Err(GatewayError::Forbidden("facilitator token required".into()));
        }
        Ok(t.participant_id.clone())
    }

    fn hosted(&mut self, id: &str) -> &mut Hosted {
        self.sessions.get_mut(id).expect("authorized session exists")
    }

    fn query(
        &self,
        seg: &[&str],
        query: &BTreeMap<String, String>,
        token: Option<&str>,
    ) -> Result<ApiResponse, GatewayError> {
        match seg {
            ["catalogue"] => Ok(ApiResponse::ok(serde_json::to_value(self.catalogue.descriptors()).unwrap())),
            ["sessions"] => Ok(ApiResponse::ok(json!(self.sessions.keys().collect::<Vec<_>>()))),
            ["sessions", id] => {
                let t = self.authorize(id, token)?;
                let state = self.sessions[*id].session.state();
                let me = state.participant(&t.participant_id).cloned();
                Ok(ApiResponse::ok(json!({
                    "session_id": id,
                    "round": state.round,
                    "task": state.task,
                    "anonymity": state.anonymity,
                    "me": me,
                    "experts": if t.role == Role::Facilitator || !state.anonymity {
                        json!(state.experts().map(|p| json!({"id": p.id, "display_name": p.display_name})).collect::<Vec<_>>())
                    } else {
                        json!(state.experts().map(|p| json!({"display_name": p.pseudonym})).collect::<Vec<_>>())
                    },
                })))
            }
            ["sessions", id, "prompts"] => {
                self.authorize(id, token)?;
                let state = self.sessions[*id].session.state();
                let list: Vec<_> = state
                    .prompts_in_order()
                    .map(|p| json!({ "prompt": p.prompt, "open": p.open }))
                    .collect();
                Ok(ApiResponse::ok(json!(list)))
            }
            ["sessions", id, "events"] => {
                self.authorize_facilitator(id, token)?;
                Ok(ApiResponse::ok(json!(self.sessions[*id].session.events())))
            }
            ["sessions", id, "reports", kind] => {
                let t = self.authorize(id, token)?;
                let audience = match t.role {
                    Role::Facilitator => Audience::Facilitator,
                    Role::Expert => Audience::Experts,
                };
                let state = self.sessions[*id].session.state();
                let kind: ReportKind = kind.parse()?;
                let report = build_report(state, kind, query.get("parameter").map(String::as_str))?;
                match query.get("format") {
                    Some(f) => {
                        let format: ArtifactFormat = f.parse().map_err(GatewayError::BadRequest)?;
                        let artifact = render(&report, format, state, audience)?;
                        Ok(ApiResponse::ok(serde_json::to_value(artifact).unwrap()))
                    }
                    None => {
                        let names = Namer::for_audience(state, audience);
                        Ok(ApiResponse::ok(serde_json::to_value(report.relabel(&names)).unwrap()))
                    }
                }
            }
            ["sessions", id, "actions"] => {
                self.authorize(id, token)?;
                Ok(ApiResponse::ok(json!(self.sessions[*id].session.state().actions)))
            }
            ["sessions", id, "suggestions"] => {
                self.authorize_facilitator(id, token)?;
                let findings = session_findings(self.sessions[*id].session.state());
                let suggestions = suggest_actions(&findings, &default_rules(), &self.catalogue)?;
                Ok(ApiResponse::ok(json!({ "findings": findings, "suggestions": suggestions })))
            }
            _ => Err(GatewayError::NotFound(format!("GET /{}", seg.join("/")))),
        }
    }

    fn command(
        &mut self,
        method: &str,
        seg: &[&str],
        token: Option<&str>,
        body: &Value,
    ) -> Result<ApiResponse, GatewayError> {
        let post = method.eq_ignore_ascii_case("POST");
        match seg {
            ["sessions"] if post => self.create_session(parse_body(body)?),
            ["simulations"] if post => self.simulate(parse_body(body)?),
            ["sessions", id] if method.eq_ignore_ascii_case("DELETE") => {
                self.authorize_facilitator(id, token)?;
                let id = id.to_string();
                self.sessions.remove(&id);
                self.tokens.retain(|_, t| t.session_id != id);
                if let Some(store) = &self.store {
                    store.delete_session(&id)?;
                }
                Ok(ApiResponse::ok(json!({ "deleted": id })))
            }
            ["sessions", id, "participants"] if post => {
                if !self.sessions.contains_key(*id) {
                    return Err(GatewayError::NotFound(id.to_string()));
                }
                let req: JoinRequest = parse_body(body)?;
                let h = self.hosted(id);
                let p = h.session.join(req.display_name, Role::Expert, req.expertise_tags)?;
                let token = AccessToken::issue(id, &p.id, p.role, h.session.now());
                let out = json!({ "participant_id": p.id, "token": token.token, "pseudonym": p.pseudonym });
                self.tokens.insert(token.token.clone(), token);
                self.save_tokens(id)?;
                Ok(ApiResponse::created(out))
            }
            ["sessions", id, "prompts"] if post => {
                let issuer = self.authorize_facilitator(id, token)?;
                let req: PromptRequest = parse_body(body)?;
                let s = &mut self.hosted(id).session;
                let state = s.state();
                let mut prompt = Prompt::new(
                    req.task_id.unwrap_or_else(|| state.task.id.clone()),
                    req.parameter_name,
                    req.mode,
                    req.round_index.unwrap_or(state.round),
                );
                prompt.id = req.id;
                prompt.coverage = req.coverage;
                prompt.question_id = req.question_id;
                prompt.anonymous_feedback = req.anonymous_feedback;
                prompt.text = req.text;
                prompt.rates = req.rates;
                let prompt_id = s.issue_prompt(prompt, &issuer)?;
                Ok(ApiResponse::created(json!({ "prompt_id": prompt_id })))
            }
            ["sessions", id, "responses"] if post => {
                let pid = self.authorize(id, token)?.participant_id.clone();
                let req: ResponseRequest = parse_body(body)?;
                let mut r = Response::new(pid, req.prompt_id, req.point).with_categories(req.categories);
                if let Some((lo, hi)) = req.interval {
                    r = r.with_interval(lo, hi);
                }
                if let Some(j) = req.justification {
                    r = r.with_justification(j);
                }
                self.hosted(id).session.record_response(r)?;
                Ok(ApiResponse::created(json!({ "recorded": true })))
            }
            ["sessions", id, "rounds", "advance"] if post => {
                let issuer = self.authorize_facilitator(id, token)?;
                let round = self.hosted(id).session.advance_round(&issuer)?;
                Ok(ApiResponse::ok(json!({ "round": round })))
            }
            ["sessions", id, "pipeline", "validate"] if post => {
                self.authorize(id, token)?;
                let pipeline: Pipeline = if body.is_null() {
                    self.sessions[*id].session.state().pipeline.clone()
                } else {
                    parse_body(body)?
                };
                let report = validate_pipeline(&pipeline, &self.catalogue).map_err(SessionError::from)?;
                Ok(ApiResponse::ok(serde_json::to_value(report).unwrap()))
            }
            ["sessions", id, "transcripts"] if post => {
                self.authorize_facilitator(id, token)?;
                let utterances: Vec<TranscriptUtterance> = parse_body(body)?;
                let report_id = ingest_transcript(&mut self.hosted(id).session, utterances)?;
                Ok(ApiResponse::created(json!({ "report_id": report_id })))
            }
            ["sessions", id, "actions", "runs", run, verb] if post => {
                let t = self.authorize(id, token)?.clone();
                let (run, verb) = (run.to_string(), *verb);
                let s = &mut self.hosted(id).session;
                match verb {
                    "advance" => {
                        let phase = advance_premortem(s, &run, &t.participant_id)?;
                        Ok(ApiResponse::ok(json!({ "phase": phase })))
                    }
                    "close" => {
                        close_action(s, &run, &t.participant_id)?;
                        Ok(ApiResponse::ok(json!({ "closed": run })))
                    }
                    "reasons" => {
                        let req: ReasonsRequest = parse_body(body)?;
                        submit_premortem_reasons(s, &run, &t.participant_id, req.reasons)?;
                        Ok(ApiResponse::created(json!({ "recorded": true })))
                    }
                    "shared" => {
                        let reasons = premortem_shared_reasons(s, &run, &t.participant_id)?;
                        Ok(ApiResponse::ok(json!(reasons)))
                    }
                    other => Err(GatewayError::NotFound(format!("run verb '{other}'"))),
                }
            }
            ["sessions", id, "actions", descriptor] if post => {
                let issuer = self.authorize_facilitator(id, token)?;
                let params = if body.is_null() { json!({}) } else { body.clone() };
                let s = &mut self.sessions.get_mut(*id).expect("authorized session exists").session;
                let run_id = run_scripted_action(s, &self.catalogue, descriptor, params, &issuer)?;
                Ok(ApiResponse::created(json!({ "run_id": run_id })))
            }
            _ => Err(GatewayError::NotFound(format!("{method} /{}", seg.join("/")))),
        }
    }

    fn save_tokens(&self, session_id: &str) -> Result<(), GatewayError> {
        if let Some(store) = &self.store {
            let mut mine: Vec<&AccessToken> = self.tokens.values().filter(|t| t.session_id == session_id).collect();
            mine.sort_by(|a, b| a.issued_at.cmp(&b.issued_at).then(a.participant_id.cmp(&b.participant_id)));
            store.save_tokens(session_id, &mine)?;
        }
        Ok(())
    }

    fn create_session(&mut self, req: CreateSession) -> Result<ApiResponse, GatewayError> {
        let id = format!("sess-{}", uuid::Uuid::new_v4().simple());
        let mut session = ElicitationSession::create_with_id(
            id.clone(),
            req.task,
            req.pipeline,
            req.reference,
            &self.catalogue,
            self.clock.clone(),
        )?;
        let mut log = None;
        if let Some(store) = &self.store {
            let writer = store.writer(&id)?;
            log = Some(writer.path().to_path_buf());
            session.attach_sink(Box::new(writer), true)?;
        }
        let f = session.join(req.facilitator_name, Role::Facilitator, BTreeSet::new())?;
        let token = AccessToken::issue(&id, &f.id, Role::Facilitator, session.now());
        let out = json!({
            "session_id": id,
            "participant_id": f.id,
            "token": token.token,
            "pseudonym": f.pseudonym,
            "log": log.as_ref().map(|p| p.display().to_string()),
        });
        self.tokens.insert(token.token.clone(), token);
        self.sessions.insert(id.clone(), Hosted { session, log });
        self.save_tokens(&id)?;
        Ok(ApiResponse::created(out))
    }

    fn simulate(&mut self, req: SimulationRequest) -> Result<ApiResponse, GatewayError> {
        let out = run_simulation(&req.scenario, &req.cohort, &self.catalogue, req.seed)?;
        let log = match &self.store {
            Some(store) => {
                let path = store.log_path(&out.session_id);
                if !path.exists() {
                    store.persist_session(&out.session_id, &out.events)?;
                }
                Some(path.display().to_string())
            }
            None => None,
        };
        Ok(ApiResponse::created(json!({
            "session_id": out.session_id,
            "log": log,
            "events": out.events.len(),
            "findings": out.findings,
        })))
    }

    /// Path of a hosted session's log, when persisted.
    pub fn log_path(&self, session_id: &str) -> Option<&Path> {
        self.sessions.get(session_id).and_then(|h| h.log.as_deref())
    }
}

// ---------------------------------------------------------------------------
// HTTP server

type Shared = Arc<tokio::sync::RwLock<Gateway>>;

async fn dispatch(
    axum::extract::State(gateway): axum::extract::State<Shared>,
    method: axum::http::Method,
    uri: axum::http::Uri,
    headers: axum::http::HeaderMap,
    axum::extract::Query(query): axum::extract::Query<BTreeMap<String, String>>,
    body: axum::body::Bytes,
) -> (axum::http::StatusCode, axum::Json<Value>) {
    let token = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    let reply = if body.is_empty() {
        Ok(Value::Null)
    } else {
        serde_json::from_slice::<Value>(&body).map_err(|e| GatewayError::BadRequest(e.to_string()))
    };
    let reply = match reply {
        Err(e) => ApiResponse::error(&e),
        Ok(_) if method == axum::http::Method::GET => {
            gateway.read().await.get(uri.path(), &query, token.as_deref())
        }
        Ok(body) => gateway
            .write()
            .await
            .handle(method.as_str(), uri.path(), &query, token.as_deref(), &body),
    };
    let status = axum::http::StatusCode::from_u16(reply.status).unwrap_or(axum::http::StatusCode::INTERNAL_SERVER_ERROR);
    (status, axum::Json(reply.body))
}

pub fn router(gateway: Gateway) -> axum::Router {
    let shared: Shared = Arc::new(tokio::sync::RwLock::new(gateway));
    axum::Router::new().fallback(dispatch).with_state(shared)
}

/// Serves the API until interrupted; the scheduler polls once a second.
pub async fn serve(addr: &str, gateway: Gateway) -> Result<(), GatewayError> {
    let shared: Shared = Arc::new(tokio::sync::RwLock::new(gateway));
    let ticker = shared.clone();
    tokio::spawn(async move {
        let mut every = tokio::time::interval(std::time::Duration::from_secs(1));
        loop {
            every.tick().await;
            ticker.write().await.tick();
        }
    });
    let app = axum::Router::new().fallback(dispatch).with_state(shared);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(io_err(Path::new(addr)))?;
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io_err(Path::new(addr)))
}

// ---------------------------------------------------------------------------
// command line

#[derive(Debug, Parser)]
#[command(name = "mice", about = "Expert elicitation facilitation engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List module descriptors.
    Catalogue {
        #[arg(long)]
        json: bool,
    },
    /// Validate a pipeline file against the built-in catalogue.
    Validate { pipeline: PathBuf },
    /// Run a simulated session.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report from an event log.
    Report {
        log: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "pointvalue")]
        format: String,
        #[arg(long)]
        parameter: Option<String>,
        /// Render as experts would see it.
        #[arg(long)]
        experts: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = STORE_ENV, default_value = "mice-store")]
        store: PathBuf,
    },
    /// Replay a log and print its snapshot digest.
    Replay { log: PathBuf },
}

/// Outcome classes for the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Invalid = 1,
    Io = 2,
}

fn read_file(path: &Path) -> Result<String, (Exit, String)> {
    std::fs::read_to_string(path).map_err(|e| (Exit::Io, format!("{}: {e}", path.display())))
}

fn invalid<E: std::fmt::Display>(e: E) -> (Exit, String) {
    (Exit::Invalid, e.to_string())
}

fn classify(e: GatewayError) -> (Exit, String) {
    let exit = match e {
        GatewayError::Io { .. } | GatewayError::NotFound(_) | GatewayError::CorruptRecord { .. } => Exit::Io,
        GatewayError::StoreLocked(_) => Exit::Io,
        _ => Exit::Invalid,
    };
    (exit, e.to_string())
}

/// Runs one command, writing results to `out`.
pub fn run_command(cmd: Command, out: &mut dyn Write) -> Result<(), (Exit, String)> {
    let w = |out: &mut dyn Write, s: &str| writeln!(out, "{s}").map_err(|e| (Exit::Io, e.to_string()));
    match cmd {
        Command::Catalogue { json } => {
            let cat = Catalogue::builtin();
            if json {
                w(out, &cat.to_json())
            } else {
                for d in cat.descriptors() {
                    w(out, &format!("{}\t{:?}\t{}", d.id, d.kind, d.title))?;
                }
                Ok(())
            }
        }
        Command::Validate { pipeline } => {
            let p = Pipeline::from_json(&read_file(&pipeline)?).map_err(invalid)?;
            let report = validate_pipeline(&p, &Catalogue::builtin()).map_err(invalid)?;
            w(out, &serde_json::to_string_pretty(&report).unwrap())?;
            if report.is_valid() {
                Ok(())
            } else {
                Err((Exit::Invalid, format!("{} error(s)", report.errors.len())))
            }
        }
        Command::Simulate {
            scenario,
            cohort,
            seed,
            out: dir,
        } => {
            let s = Scenario::from_json(&read_file(&scenario)?).map_err(invalid)?;
            let c = load_cohort(&read_file(&cohort)?).map_err(invalid)?;
            let result = run_simulation(&s, &c, &Catalogue::builtin(), seed).map_err(invalid)?;
            let log = result.write_to(&dir).map_err(|e| match e {
                SimulationError::Io(_) => (Exit::Io, e.to_string()),
                other => invalid(other),
            })?;
            w(out, &log.display().to_string())
        }
        Command::Report {
            log,
            kind,
            format,
            parameter,
            experts,
        } => {
            let loaded = load_log_file(&log).map_err(classify)?;
            let state = replay_events(&loaded.events).map_err(invalid)?;
            let kind: ReportKind = kind.parse().map_err(invalid)?;
            let format: ArtifactFormat = format.parse().map_err(|e: String| (Exit::Invalid, e))?;
            let report = build_report(&state, kind, parameter.as_deref()).map_err(invalid)?;
            let audience = if experts { Audience::Experts } else { Audience::Facilitator };
            let artifact = render(&report, format, &state, audience).map_err(invalid)?;
            write!(out, "{}", artifact.payload).map_err(|e| (Exit::Io, e.to_string()))
        }
        Command::Replay { log } => {
            let loaded = load_log_file(&log).map_err(classify)?;
            let state = replay_events(&loaded.events).map_err(invalid)?;
            w(out, &state.snapshot_digest())
        }
        Command::Serve { addr, store } => {
            let store = Store::open(store).map_err(classify)?;
            let gateway =
                Gateway::with_store(Catalogue::builtin(), Arc::new(SystemClock), store).map_err(classify)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| (Exit::Io, e.to_string()))?;
            w(out, &format!("listening on {addr}"))?;
            rt.block_on(serve(&addr, gateway)).map_err(classify)
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Invalid as i32 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout();
    match run_command(cli.command, &mut stdout) {
        Ok(()) => Exit::Ok as i32,
        Err((code, message)) => {
            eprintln!("error: {message}");
            code as i32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{ManualClock, TaskParameter};
    use crate::simulation::default_pipeline;

    fn event_lines(n: usize) -> Vec<SessionEvent> {
        let clock = Arc::new(ManualClock::starting_at_epoch());
        let task = Task::new("t", "x").with_parameter(TaskParameter::new("p", "u", 0.0, 1.0));
        let mut s =
            ElicitationSession::create_with_id("s1", task, default_pipeline(), None, &Catalogue::builtin(), clock)
                .unwrap();
        while s.events().len() < n {
            s.join(format!("E{}", s.events().len()), Role::Expert, BTreeSet::new()).unwrap();
        }
        s.into_events()
    }

    #[test]
    fn persist_and_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let events = event_lines(100);
        store.persist_session("s1", &events).unwrap();
        assert_eq!(store.load_session("s1").unwrap().events, events);

        let path = store.log_path("s1");
        let doc = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &doc[..doc.len() - 20]).unwrap();
        let loaded = store.load_session("s1").unwrap();
        assert!(loaded.truncated_tail);
        assert_eq!(loaded.events.len(), 99);

        // reopening for write cuts the partial line away
        drop(store.writer("s1").unwrap());
        let again = store.load_session("s1").unwrap();
        assert!(!again.truncated_tail);
        assert_eq!(again.events.len(), 99);
    }

    #[test]
    fn lock_missing_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let _w = store.writer("s1").unwrap();
        assert!(matches!(store.writer("s1"), Err(GatewayError::StoreLocked(_))));
        assert!(matches!(store.load_session("nope"), Err(GatewayError::NotFound(_))));

        let mut lines: Vec<String> = event_lines(10).iter().map(|e| e.to_json_line()).collect();
        lines[6] = "{not json".into();
        std::fs::write(store.log_path("bad"), lines.join("\n") + "\n").unwrap();
        match store.load_session("bad") {
            Err(GatewayError::CorruptRecord { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_bodies_are_uniform() {
        let e = GatewayError::Session(SessionError::NotFacilitator("p1".into()));
        assert_eq!(e.to_json()["code"], "unauthorized");
        assert_eq!(e.status(), 403);
        assert_eq!(GatewayError::Unauthorized("x".into()).to_json()["code"], "unauthorized");
    }
}
