//! Event-sourced elicitation session.
//!
//! The append-only [`SessionEvent`] log is the only source of truth. Every
//! command validates against the current [`SessionState`], emits one or more
//! events, and folds each event into the state through the same `apply` used
//! by [`replay_events`]; live state and replayed state therefore cannot
//! drift apart.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feedback::ReferenceDatabase;
use crate::registry::{validate_pipeline, Catalogue, Pipeline, RegistryError, ValidationReport};

pub const DEFAULT_COVERAGE: f64 = 0.9;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        let now = Utc::now();
        Utc.timestamp_millis_opt(now.timestamp_millis())
            .single()
            .unwrap_or(now)
    }
}

/// Settable clock for simulations and tests.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Mutex::new(start),
        }
    }

    pub fn starting_at_epoch() -> Self {
        Self::new(Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap())
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += by;
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.now.lock().unwrap() = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Expert,
    Facilitator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub display_name: String,
    pub role: Role,
    #[serde(default)]
    pub expertise_tags: BTreeSet<String>,
    pub pseudonym: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParameter {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub lower: f64,
    pub upper: f64,
}

impl TaskParameter {
    pub fn new(name: impl Into<String>, unit: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
            lower,
            upper,
        }
    }

    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combinator {
    Sum,
    Product,
    Mean,
    Min,
    Max,
    WeightedMean { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub statement: String,
    #[serde(default)]
    pub parameters: Vec<TaskParameter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assumption_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combinator: Option<Combinator>,
}

impl Task {
    pub fn new(id: impl Into<String>, statement: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            statement: statement.into(),
            parameters: Vec::new(),
            parent: None,
            assumption_label: None,
            combinator: None,
        }
    }

    pub fn with_parameter(mut self, p: TaskParameter) -> Self {
        self.parameters.push(p);
        self
    }

    pub fn parameter(&self, name: &str) -> Option<&TaskParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("task id must be nonempty".into());
        }
        let mut names = BTreeSet::new();
        for p in &self.parameters {
            if !(p.lower < p.upper) {
                return Err(format!(
                    "parameter '{}' needs lower < upper (got {} .. {})",
                    p.name, p.lower, p.upper
                ));
            }
            if !names.insert(p.name.as_str()) {
                return Err(format!("parameter '{}' declared twice", p.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Point,
    PointInterval,
    Categorical,
    Likert,
    FreeText,
}

impl PromptMode {
    pub fn is_numeric_estimate(&self) -> bool {
        matches!(self, PromptMode::Point | PromptMode::PointInterval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    /// Assigned by the session when left empty.
    #[serde(default)]
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    pub task_id: String,
    pub parameter_name: String,
    pub mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    pub round_index: u32,
    #[serde(default)]
    pub anonymous_feedback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Peer-rating prompt: responders rate the expertise of this participant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reprompt_of: Option<String>,
}

impl Prompt {
    pub fn new(
        task_id: impl Into<String>,
        parameter_name: impl Into<String>,
        mode: PromptMode,
        round_index: u32,
    ) -> Self {
        Self {
            id: String::new(),
            question_id: None,
            task_id: task_id.into(),
            parameter_name: parameter_name.into(),
            mode,
            coverage: None,
            round_index,
            anonymous_feedback: false,
            text: None,
            rates: None,
            reprompt_of: None,
        }
    }

    pub fn with_coverage(mut self, coverage: f64) -> Self {
        self.coverage = Some(coverage);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_question(mut self, question_id: impl Into<String>) -> Self {
        self.question_id = Some(question_id.into());
        self
    }

    /// Coverage of the interval, defaulting for interval prompts.
    pub fn effective_coverage(&self) -> Option<f64> {
        match self.mode {
            PromptMode::PointInterval => Some(self.coverage.unwrap_or(DEFAULT_COVERAGE)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub participant_id: String,
    pub prompt_id: String,
    pub point: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub categories: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistent_with_previous: Option<bool>,
    /// Stamped by the session clock on record.
    #[serde(default = "epoch")]
    pub recorded_at: DateTime<Utc>,
}

fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

impl Response {
    pub fn new(participant_id: impl Into<String>, prompt_id: impl Into<String>, point: f64) -> Self {
        Self {
            participant_id: participant_id.into(),
            prompt_id: prompt_id.into(),
            point,
            interval: None,
            justification: None,
            categories: BTreeSet::new(),
            consistent_with_previous: None,
            recorded_at: epoch(),
        }
    }

    pub fn with_interval(mut self, lo: f64, hi: f64) -> Self {
        self.interval = Some((lo, hi));
        self
    }

    pub fn with_justification(mut self, text: impl Into<String>) -> Self {
        self.justification = Some(text.into());
        self
    }

    pub fn with_categories<I, S>(mut self, cats: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.categories = cats.into_iter().map(Into::into).collect();
        self
    }

    pub fn half_width(&self) -> Option<f64> {
        self.interval.map(|(lo, hi)| (hi - lo) / 2.0)
    }
}

/// Step inside an action run. Carried by `action_triggered` events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum ActionStep {
    Start {
        descriptor_id: String,
        initiated_by: String,
        #[serde(default)]
        params: Value,
        phases: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        due_at: Option<DateTime<Utc>>,
    },
    Phase {
        phase: String,
        #[serde(default)]
        early_close: bool,
    },
    Submit {
        participant_id: String,
        items: Vec<String>,
    },
    Assign {
        participant_id: String,
        role: String,
    },
    Record {
        key: String,
        value: Value,
    },
    DefineTask {
        task: Task,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionOutcome {
    #[serde(default)]
    pub artifacts: BTreeMap<String, Value>,
    #[serde(default)]
    pub early_close: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    SessionCreated {
        session_id: String,
        task: Task,
        pipeline: Pipeline,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<ReferenceDatabase>,
    },
    ParticipantJoined {
        participant: Participant,
    },
    PromptIssued {
        prompt: Prompt,
    },
    ResponseRecorded {
        response: Response,
    },
    RoundAdvanced {
        round_index: u32,
        closed_prompts: Vec<String>,
    },
    ActionTriggered {
        run_id: String,
        #[serde(flatten)]
        step: ActionStep,
    },
    ActionCompleted {
        run_id: String,
        outcome: ActionOutcome,
    },
    AnonymityEnabled {
        by: String,
    },
    ReportGenerated {
        report_id: String,
        report_kind: String,
        document: Value,
    },
}

impl EventBody {
    pub const KINDS: [&'static str; 9] = [
        "session_created",
        "participant_joined",
        "prompt_issued",
        "response_recorded",
        "round_advanced",
        "action_triggered",
        "action_completed",
        "anonymity_enabled",
        "report_generated",
    ];

    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::SessionCreated { .. } => "session_created",
            EventBody::ParticipantJoined { .. } => "participant_joined",
            EventBody::PromptIssued { .. } => "prompt_issued",
            EventBody::ResponseRecorded { .. } => "response_recorded",
            EventBody::RoundAdvanced { .. } => "round_advanced",
            EventBody::ActionTriggered { .. } => "action_triggered",
            EventBody::ActionCompleted { .. } => "action_completed",
            EventBody::AnonymityEnabled { .. } => "anonymity_enabled",
            EventBody::ReportGenerated { .. } => "report_generated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Deserialize)]
struct RawEvent {
    seq: u64,
    at: DateTime<Utc>,
    kind: String,
    #[serde(default)]
    payload: Value,
}

impl SessionEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }

    /// Parses one JSON Lines record, distinguishing unknown kinds from
    /// malformed payloads.
    pub fn from_json_line(line: &str) -> Result<Self, SessionError> {
        let raw: RawEvent =
            serde_json::from_str(line).map_err(|e| SessionError::MalformedEvent(e.to_string()))?;
        if !EventBody::KINDS.contains(&raw.kind.as_str()) {
            return Err(SessionError::UnknownEventKind(raw.kind));
        }
        let body: EventBody = serde_json::from_value(serde_json::json!({
            "kind": raw.kind,
            "payload": raw.payload,
        }))
        .map_err(|e| SessionError::MalformedEvent(format!("seq {}: {e}", raw.seq)))?;
        Ok(SessionEvent {
            seq: raw.seq,
            at: raw.at,
            body,
        })
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("pipeline failed validation with {} error(s)", .0.errors.len())]
    InvalidPipeline(ValidationReport),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("participant '{0}' is not the facilitator")]
    NotFacilitator(String),
    #[error("participant '{0}' is not an expert")]
    NotExpert(String),
    #[error("session already has an active facilitator")]
    FacilitatorExists,
    #[error("unknown participant '{0}'")]
    UnknownParticipant(String),
    #[error("prompt is for round {got} but the session is in round {expected}")]
    WrongRound { expected: u32, got: u32 },
    #[error("slow-down in progress, {remaining_secs} s remaining")]
    SlowdownActive { remaining_secs: i64 },
    #[error("unknown prompt '{0}'")]
    UnknownPrompt(String),
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("prompt id '{0}' already used")]
    DuplicatePrompt(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("prompt '{0}' is closed")]
    PromptClosed(String),
    #[error("interval violation: {0}")]
    IntervalViolation(String),
    #[error("point {point} outside [{lower}, {upper}] for parameter '{parameter}'")]
    OutOfBounds {
        parameter: String,
        point: f64,
        lower: f64,
        upper: f64,
    },
    #[error("gap in event log: missing seq {0}")]
    GapInLog(u64),
    #[error("unknown event kind '{0}'")]
    UnknownEventKind(String),
    #[error("malformed event: {0}")]
    MalformedEvent(String),
    #[error("event {seq} cannot be applied: {reason}")]
    InvalidEvent { seq: u64, reason: String },
    #[error("event sink failed: {0}")]
    Sink(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::InvalidPipeline(_) => "invalid_pipeline",
            SessionError::Registry(e) => e.code(),
            SessionError::InvalidTask(_) => "invalid_task",
            SessionError::NotFacilitator(_) => "not_facilitator",
            SessionError::NotExpert(_) => "not_expert",
            SessionError::FacilitatorExists => "facilitator_exists",
            SessionError::UnknownParticipant(_) => "unknown_participant",
            SessionError::WrongRound { .. } => "wrong_round",
            SessionError::SlowdownActive { .. } => "slowdown_active",
            SessionError::UnknownPrompt(_) => "unknown_prompt",
            SessionError::UnknownTask(_) => "unknown_task",
            SessionError::DuplicatePrompt(_) => "duplicate_prompt",
            SessionError::InvalidPrompt(_) => "invalid_prompt",
            SessionError::PromptClosed(_) => "prompt_closed",
            SessionError::IntervalViolation(_) => "interval_violation",
            SessionError::OutOfBounds { .. } => "out_of_bounds",
            SessionError::GapInLog(_) => "gap_in_log",
            SessionError::UnknownEventKind(_) => "unknown_event_kind",
            SessionError::MalformedEvent(_) => "malformed_event",
            SessionError::InvalidEvent { .. } => "invalid_event",
            SessionError::Sink(_) => "io_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub prompt: Prompt,
    pub open: bool,
    pub issued_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEntry {
    pub response: Response,
    pub seq: u64,
    /// Number of earlier submissions this one replaced.
    pub supersedes: u32,
    /// Recorded while the responder held the devil's advocate role.
    pub advocacy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRun {
    pub id: String,
    pub descriptor_id: String,
    pub phases: Vec<String>,
    pub phase: String,
    pub initiated_by: String,
    pub created_at: DateTime<Utc>,
    pub completed_at: Option<DateTime<Utc>>,
    pub params: Value,
    pub due_at: Option<DateTime<Utc>>,
    pub submissions: BTreeMap<String, Vec<String>>,
    pub assignments: BTreeMap<String, String>,
    pub records: BTreeMap<String, Value>,
    pub artifacts: BTreeMap<String, Value>,
    pub early_close: bool,
}

impl ActionRun {
    pub fn is_complete(&self) -> bool {
        self.completed_at.is_some()
    }

    pub fn phase_index(&self) -> Option<usize> {
        self.phases.iter().position(|p| p == &self.phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub report_kind: String,
    pub seq: u64,
    pub round_index: u32,
    pub document: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowDown {
    pub run_id: String,
    pub until: DateTime<Utc>,
}

/// Session state folded from the event log. Every map is ordered, so the
/// serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub task: Task,
    pub tasks: BTreeMap<String, Task>,
    pub pipeline: Pipeline,
    pub reference: Option<ReferenceDatabase>,
    pub created_at: DateTime<Utc>,
    pub participants: BTreeMap<String, Participant>,
    pub join_order: Vec<String>,
    pub facilitator: Option<String>,
    pub round: u32,
    pub prompts: BTreeMap<String, PromptState>,
    pub prompt_order: Vec<String>,
    pub responses: BTreeMap<String, BTreeMap<String, ResponseEntry>>,
    pub response_events: u64,
    pub anonymity: bool,
    pub advocates: BTreeSet<String>,
    pub slowdown: Option<SlowDown>,
    pub actions: BTreeMap<String, ActionRun>,
    pub reports: BTreeMap<String, StoredReport>,
    pub last_seq: u64,
    pub last_at: DateTime<Utc>,
}

impl SessionState {
    fn from_created(event: &SessionEvent) -> Result<Self, SessionError> {
        let EventBody::SessionCreated {
            session_id,
            task,
            pipeline,
            reference,
        } = &event.body
        else {
            return Err(SessionError::InvalidEvent {
                seq: event.seq,
                reason: "first event must be session_created".into(),
            });
        };
        Ok(SessionState {
            session_id: session_id.clone(),
            task: task.clone(),
            tasks: BTreeMap::from([(task.id.clone(), task.clone())]),
            pipeline: pipeline.clone(),
            reference: reference.clone(),
            created_at: event.at,
            participants: BTreeMap::new(),
            join_order: Vec::new(),
            facilitator: None,
            round: 0,
            prompts: BTreeMap::new(),
            prompt_order: Vec::new(),
            responses: BTreeMap::new(),
            response_events: 0,
            anonymity: false,
            advocates: BTreeSet::new(),
            slowdown: None,
            actions: BTreeMap::new(),
            reports: BTreeMap::new(),
            last_seq: event.seq,
            last_at: event.at,
        })
    }

    fn apply(&mut self, event: &SessionEvent) -> Result<(), SessionError> {
        let invalid = |reason: String| SessionError::InvalidEvent {
            seq: event.seq,
            reason,
        };
        match &event.body {
            EventBody::SessionCreated { .. } => {
                return Err(invalid("duplicate session_created".into()))
            }
            EventBody::ParticipantJoined { participant } => {
                if self.participants.contains_key(&participant.id) {
                    return Err(invalid(format!("participant {} joined twice", participant.id)));
                }
                if participant.role == Role::Facilitator {
                    if self.facilitator.is_some() {
                        return Err(invalid("second facilitator".into()));
                    }
                    self.facilitator = Some(participant.id.clone());
                }
                self.join_order.push(participant.id.clone());
                self.participants
                    .insert(participant.id.clone(), participant.clone());
            }
            EventBody::PromptIssued { prompt } => {
                if self.prompts.contains_key(&prompt.id) {
                    return Err(invalid(format!("prompt {} issued twice", prompt.id)));
                }
                self.prompt_order.push(prompt.id.clone());
                self.prompts.insert(
                    prompt.id.clone(),
                    PromptState {
                        prompt: prompt.clone(),
                        open: true,
                        issued_at: event.at,
                    },
                );
            }
            EventBody::ResponseRecorded { response } => {
                if !self.prompts.contains_key(&response.prompt_id) {
                    return Err(invalid(format!("response to unknown prompt {}", response.prompt_id)));
                }
                let advocacy = self.advocates.contains(&response.participant_id);
                let slot = self.responses.entry(response.prompt_id.clone()).or_default();
                let supersedes = slot
                    .get(&response.participant_id)
                    .map(|e| e.supersedes + 1)
                    .unwrap_or(0);
                slot.insert(
                    response.participant_id.clone(),
                    ResponseEntry {
                        response: response.clone(),
                        seq: event.seq,
                        supersedes,
                        advocacy,
                    },
                );
                self.response_events += 1;
            }
            EventBody::RoundAdvanced {
                round_index,
                closed_prompts,
            } => {
                if *round_index != self.round + 1 {
                    return Err(invalid(format!(
                        "round_advanced to {round_index} from round {}",
                        self.round
                    )));
                }
                for id in closed_prompts {
                    if let Some(p) = self.prompts.get_mut(id) {
                        p.open = false;
                    }
                }
                self.round = *round_index;
            }
            EventBody::ActionTriggered { run_id, step } => match step {
                ActionStep::Start {
                    descriptor_id,
                    initiated_by,
                    params,
                    phases,
                    due_at,
                } => {
                    if self.actions.contains_key(run_id) {
                        return Err(invalid(format!("action run {run_id} started twice")));
                    }
                    if descriptor_id == "act.slow_down" {
                        if let Some(until) = due_at {
                            self.slowdown = Some(SlowDown {
                                run_id: run_id.clone(),
                                until: *until,
                            });
                        }
                    }
                    self.actions.insert(
                        run_id.clone(),
                        ActionRun {
                            id: run_id.clone(),
                            descriptor_id: descriptor_id.clone(),
                            phase: phases.first().cloned().unwrap_or_default(),
                            phases: phases.clone(),
                            initiated_by: initiated_by.clone(),
                            created_at: event.at,
                            completed_at: None,
                            params: params.clone(),
                            due_at: *due_at,
                            submissions: BTreeMap::new(),
                            assignments: BTreeMap::new(),
                            records: BTreeMap::new(),
                            artifacts: BTreeMap::new(),
                            early_close: false,
                        },
                    );
                }
                other => {
                    let run = self
                        .actions
                        .get_mut(run_id)
                        .ok_or_else(|| invalid(format!("unknown action run {run_id}")))?;
                    if run.is_complete() {
                        return Err(invalid(format!("action run {run_id} already completed")));
                    }
                    match other {
                        ActionStep::Phase { phase, early_close } => {
                            let next = run.phase_index().map(|i| i + 1);
                            if next.and_then(|i| run.phases.get(i)) != Some(phase) {
                                return Err(invalid(format!(
                                    "phase {phase} does not follow {}",
                                    run.phase
                                )));
                            }
                            run.phase = phase.clone();
                            run.early_close |= *early_close;
                        }
                        ActionStep::Submit {
                            participant_id,
                            items,
                        } => {
                            run.submissions
                                .entry(participant_id.clone())
                                .or_default()
                                .extend(items.iter().cloned());
                        }
                        ActionStep::Assign {
                            participant_id,
                            role,
                        } => {
                            run.assignments.insert(participant_id.clone(), role.clone());
                            if role == "devils_advocate" {
                                self.advocates.insert(participant_id.clone());
                            }
                        }
                        ActionStep::Record { key, value } => {
                            run.records.insert(key.clone(), value.clone());
                        }
                        ActionStep::DefineTask { task } => {
                            self.tasks.insert(task.id.clone(), task.clone());
                        }
                        ActionStep::Start { .. } => unreachable!(),
                    }
                }
            },
            EventBody::ActionCompleted { run_id, outcome } => {
                let run = self
                    .actions
                    .get_mut(run_id)
                    .ok_or_else(|| invalid(format!("unknown action run {run_id}")))?;
                if run.is_complete() {
                    return Err(invalid(format!("action run {run_id} completed twice")));
                }
                run.completed_at = Some(event.at);
                run.artifacts = outcome.artifacts.clone();
                run.early_close |= outcome.early_close;
                if let Some(last) = run.phases.last() {
                    run.phase = last.clone();
                }
                if self.slowdown.as_ref().is_some_and(|s| &s.run_id == run_id) {
                    self.slowdown = None;
                }
                let released: Vec<String> = run
                    .assignments
                    .iter()
                    .filter(|(_, r)| r.as_str() == "devils_advocate")
                    .map(|(p, _)| p.clone())
                    .collect();
                for p in released {
                    self.advocates.remove(&p);
                }
            }
            EventBody::AnonymityEnabled { .. } => {
                self.anonymity = true;
            }
            EventBody::ReportGenerated {
                report_id,
                report_kind,
                document,
            } => {
                self.reports.insert(
                    report_id.clone(),
                    StoredReport {
                        report_kind: report_kind.clone(),
                        seq: event.seq,
                        round_index: self.round,
                        document: document.clone(),
                    },
                );
            }
        }
        self.last_seq = event.seq;
        self.last_at = event.at;
        Ok(())
    }

    /// Canonical serialized snapshot.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("state serializes")
    }

    pub fn snapshot_digest(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot_bytes()))
    }

    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.participants.get(id)
    }

    /// Experts in participant-id order.
    pub fn experts(&self) -> impl Iterator<Item = &Participant> {
        self.participants
            .values()
            .filter(|p| p.role == Role::Expert)
    }

    pub fn prompt(&self, id: &str) -> Option<&Prompt> {
        self.prompts.get(id).map(|p| &p.prompt)
    }

    pub fn parameter(&self, task_id: &str, name: &str) -> Option<&TaskParameter> {
        self.tasks.get(task_id).and_then(|t| t.parameter(name))
    }

    /// Latest response per expert for one prompt, in participant-id order.
    pub fn responses_for(&self, prompt_id: &str) -> Vec<&Response> {
        self.responses
            .get(prompt_id)
            .map(|m| m.values().map(|e| &e.response).collect())
            .unwrap_or_default()
    }

    pub fn response_entries(&self, prompt_id: &str) -> Vec<&ResponseEntry> {
        self.responses
            .get(prompt_id)
            .map(|m| m.values().collect())
            .unwrap_or_default()
    }

    /// Prompts in issue order.
    pub fn prompts_in_order(&self) -> impl Iterator<Item = &PromptState> {
        self.prompt_order.iter().map(move |id| &self.prompts[id])
    }

    pub fn is_facilitator(&self, id: &str) -> bool {
        self.facilitator.as_deref() == Some(id)
    }

    pub fn transcripts(&self) -> impl Iterator<Item = (&String, &StoredReport)> {
        self.reports
            .iter()
            .filter(|(_, r)| r.report_kind == "transcript")
    }
}

/// Rebuilds state from a log. Pure: never reads a clock.
pub fn replay_events(events: &[SessionEvent]) -> Result<SessionState, SessionError> {
    let first = events.first().ok_or(SessionError::GapInLog(1))?;
    if first.seq != 1 {
        return Err(SessionError::GapInLog(1));
    }
    let mut state = SessionState::from_created(first)?;
    for (i, event) in events.iter().enumerate().skip(1) {
        let expected = i as u64 + 1;
        if event.seq != expected {
            return Err(SessionError::GapInLog(expected));
        }
        state.apply(event)?;
    }
    Ok(state)
}

/// Parses a JSON Lines log and replays it.
pub fn replay_jsonl(doc: &str) -> Result<SessionState, SessionError> {
    let events = doc
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(SessionEvent::from_json_line)
        .collect::<Result<Vec<_>, _>>()?;
    replay_events(&events)
}

/// Receives each event before it is applied; failing aborts the command.
pub trait EventSink: Send + Sync {
    fn persist(&mut self, event: &SessionEvent) -> Result<(), String>;
}

/// Single writer for one session's log.
pub struct ElicitationSession {
    events: Vec<SessionEvent>,
    state: SessionState,
    clock: Arc<dyn Clock>,
    sink: Option<Box<dyn EventSink>>,
}

impl std::fmt::Debug for ElicitationSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ElicitationSession")
            .field("session_id", &self.state.session_id)
            .field("events", &self.events.len())
            .finish()
    }
}

impl ElicitationSession {
    /// Validates the pipeline and opens a session under a fresh random id.
    pub fn create(
        task: Task,
        pipeline: Pipeline,
        catalogue: &Catalogue,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SessionError> {
        let id = format!("sess-{}", uuid::Uuid::new_v4().simple());
        Self::create_with_id(id, task, pipeline, None, catalogue, clock)
    }

    pub fn create_with_id(
        session_id: impl Into<String>,
        task: Task,
        pipeline: Pipeline,
        reference: Option<ReferenceDatabase>,
        catalogue: &Catalogue,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SessionError> {
        task.check().map_err(SessionError::InvalidTask)?;
        if task.combinator.is_some() {
            return Err(SessionError::InvalidTask(
                "combinator requires child tasks".into(),
            ));
        }
        let report = validate_pipeline(&pipeline, catalogue)?;
        if !report.is_valid() {
            return Err(SessionError::InvalidPipeline(report));
        }
        let first = SessionEvent {
            seq: 1,
            at: clock.now(),
            body: EventBody::SessionCreated {
                session_id: session_id.into(),
                task,
                pipeline,
                reference,
            },
        };
        let state = SessionState::from_created(&first)?;
        Ok(Self {
            events: vec![first],
            state,
            clock,
            sink: None,
        })
    }

    /// Resumes a session from its log.
    pub fn from_events(
        events: Vec<SessionEvent>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SessionError> {
        let state = replay_events(&events)?;
        Ok(Self {
            events,
            state,
            clock,
            sink: None,
        })
    }

    /// Attaches a sink and pushes the already-recorded events through it.
    pub fn attach_sink(&mut self, mut sink: Box<dyn EventSink>, flush_existing: bool) -> Result<(), SessionError> {
        if flush_existing {
            for e in &self.events {
                sink.persist(e).map_err(SessionError::Sink)?;
            }
        }
        self.sink = Some(sink);
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.state.session_id
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<SessionEvent> {
        self.events
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_json_line());
            out.push('\n');
        }
        out
    }

    pub(crate) fn append(&mut self, body: EventBody) -> Result<&SessionEvent, SessionError> {
        let event = SessionEvent {
            seq: self.state.last_seq + 1,
            at: self.clock.now(),
            body,
        };
        let mut next = self.state.clone();
        next.apply(&event)?;
        if let Some(sink) = self.sink.as_mut() {
            sink.persist(&event).map_err(SessionError::Sink)?;
        }
        self.state = next;
        self.events.push(event);
        Ok(self.events.last().unwrap())
    }

    pub(crate) fn require_facilitator(&self, issuer: &str) -> Result<(), SessionError> {
        if !self.state.participants.contains_key(issuer) {
            return Err(SessionError::UnknownParticipant(issuer.into()));
        }
        if !self.state.is_facilitator(issuer) {
            return Err(SessionError::NotFacilitator(issuer.into()));
        }
        Ok(())
    }

    pub(crate) fn require_expert(&self, id: &str) -> Result<&Participant, SessionError> {
        let p = self
            .state
            .participants
            .get(id)
            .ok_or_else(|| SessionError::UnknownParticipant(id.into()))?;
        if p.role != Role::Expert {
            return Err(SessionError::NotExpert(id.into()));
        }
        Ok(p)
    }

    /// Adds a participant, assigning an opaque id and a session-scoped
    /// pseudonym.
    pub fn join(
        &mut self,
        display_name: impl Into<String>,
        role: Role,
        expertise_tags: BTreeSet<String>,
    ) -> Result<Participant, SessionError> {
        let display_name = display_name.into();
        if role == Role::Facilitator && self.state.facilitator.is_some() {
            return Err(SessionError::FacilitatorExists);
        }
        let index = self.state.join_order.len();
        let id = self.fresh_participant_id(index);
        let pseudonym = self.fresh_pseudonym(index, &display_name);
        let participant = Participant {
            id,
            display_name,
            role,
            expertise_tags,
            pseudonym,
        };
        self.append(EventBody::ParticipantJoined {
            participant: participant.clone(),
        })?;
        Ok(participant)
    }

    fn fresh_participant_id(&self, index: usize) -> String {
        let mut salt = 0u32;
        loop {
            let digest = Sha256::digest(
                format!("{}:participant:{index}:{salt}", self.state.session_id).as_bytes(),
            );
            let id = format!("P-{}", &hex::encode(digest)[..10]);
            if !self.state.participants.contains_key(&id) {
                return id;
            }
            salt += 1;
        }
    }

    fn fresh_pseudonym(&self, index: usize, display_name: &str) -> String {
        let used: BTreeSet<&str> = self
            .state
            .participants
            .values()
            .map(|p| p.pseudonym.as_str())
            .collect();
        let pool: Vec<String> = pseudonym_codes()
            .map(|c| format!("Expert {c}"))
            .filter(|p| !used.contains(p.as_str()) && p != display_name)
            .collect();
        if pool.is_empty() {
            return format!("Expert #{}", index + 1);
        }
        let digest =
            Sha256::digest(format!("{}:pseudonym:{index}", self.state.session_id).as_bytes());
        let pick = u64::from_be_bytes(digest[..8].try_into().unwrap()) as usize;
        // bias toward early letters so small panels read A, B, C...
        let window = pool.len().min(26);
        pool[pick % window].clone()
    }

    pub fn issue_prompt(&mut self, mut prompt: Prompt, issuer: &str) -> Result<String, SessionError> {
        self.require_facilitator(issuer)?;
        self.check_prompt_gates(&prompt)?;
        if prompt.id.is_empty() {
            prompt.id = format!("prompt-{}", self.state.prompts.len() + 1);
        }
        if self.state.prompts.contains_key(&prompt.id) {
            return Err(SessionError::DuplicatePrompt(prompt.id));
        }
        self.normalize_prompt(&mut prompt)?;
        let id = prompt.id.clone();
        self.append(EventBody::PromptIssued { prompt })?;
        Ok(id)
    }

    /// Round and slow-down gates shared by every prompt-issuing path.
    pub(crate) fn check_prompt_gates(&self, prompt: &Prompt) -> Result<(), SessionError> {
        if prompt.round_index != self.state.round {
            return Err(SessionError::WrongRound {
                expected: self.state.round,
                got: prompt.round_index,
            });
        }
        if let Some(slow) = &self.state.slowdown {
            let now = self.clock.now();
            if now < slow.until {
                let remaining = (slow.until - now).num_milliseconds();
                return Err(SessionError::SlowdownActive {
                    remaining_secs: (remaining + 999) / 1000,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn normalize_prompt(&self, prompt: &mut Prompt) -> Result<(), SessionError> {
        let task = self
            .state
            .tasks
            .get(&prompt.task_id)
            .ok_or_else(|| SessionError::UnknownTask(prompt.task_id.clone()))?;
        if prompt.mode.is_numeric_estimate() && task.parameter(&prompt.parameter_name).is_none() {
            return Err(SessionError::InvalidPrompt(format!(
                "task '{}' has no parameter '{}'",
                task.id, prompt.parameter_name
            )));
        }
        match (prompt.mode, prompt.coverage) {
            (PromptMode::PointInterval, None) => prompt.coverage = Some(DEFAULT_COVERAGE),
            (PromptMode::PointInterval, Some(c)) if !(c > 0.0 && c < 1.0) => {
                return Err(SessionError::InvalidPrompt(format!(
                    "coverage {c} must lie in (0, 1)"
                )))
            }
            (PromptMode::PointInterval, Some(_)) => {}
            (_, Some(_)) => {
                return Err(SessionError::InvalidPrompt(
                    "coverage is only meaningful for point_interval prompts".into(),
                ))
            }
            (_, None) => {}
        }
        if let Some(ratee) = &prompt.rates {
            if !self.state.participants.contains_key(ratee) {
                return Err(SessionError::UnknownParticipant(ratee.clone()));
            }
        }
        Ok(())
    }

    /// Records a response; a later submission for the same prompt supersedes
    /// the earlier one while both stay in the log.
    pub fn record_response(&mut self, mut response: Response) -> Result<(), SessionError> {
        self.require_expert(&response.participant_id)?;
        let ps = self
            .state
            .prompts
            .get(&response.prompt_id)
            .ok_or_else(|| SessionError::UnknownPrompt(response.prompt_id.clone()))?;
        if !ps.open {
            return Err(SessionError::PromptClosed(response.prompt_id.clone()));
        }
        let prompt = &ps.prompt;
        if !response.point.is_finite() {
            return Err(SessionError::IntervalViolation("point must be finite".into()));
        }
        if prompt.mode == PromptMode::PointInterval && response.interval.is_none() {
            return Err(SessionError::IntervalViolation(
                "point_interval prompts require an interval".into(),
            ));
        }
        if let Some((lo, hi)) = response.interval {
            if !(lo.is_finite() && hi.is_finite() && lo <= response.point && response.point <= hi)
            {
                return Err(SessionError::IntervalViolation(format!(
                    "need lo <= point <= hi, got {lo} <= {} <= {hi}",
                    response.point
                )));
            }
        }
        if prompt.mode.is_numeric_estimate() {
            if let Some(param) = self.state.parameter(&prompt.task_id, &prompt.parameter_name) {
                if !param.contains(response.point) {
                    return Err(SessionError::OutOfBounds {
                        parameter: param.name.clone(),
                        point: response.point,
                        lower: param.lower,
                        upper: param.upper,
                    });
                }
            }
        }
        response.recorded_at = self.clock.now();
        self.append(EventBody::ResponseRecorded { response })?;
        Ok(())
    }

    /// Closes the current round's open prompts and moves to the next round.
    pub fn advance_round(&mut self, issuer: &str) -> Result<u32, SessionError> {
        self.require_facilitator(issuer)?;
        let closed_prompts: Vec<String> = self
            .state
            .prompts_in_order()
            .filter(|p| p.open)
            .map(|p| p.prompt.id.clone())
            .collect();
        let round_index = self.state.round + 1;
        self.append(EventBody::RoundAdvanced {
            round_index,
            closed_prompts,
        })?;
        Ok(round_index)
    }

    pub fn record_report(
        &mut self,
        report_kind: &str,
        document: Value,
    ) -> Result<String, SessionError> {
        let report_id = format!("{report_kind}-{}", self.state.last_seq + 1);
        self.append(EventBody::ReportGenerated {
            report_id: report_id.clone(),
            report_kind: report_kind.into(),
            document,
        })?;
        Ok(report_id)
    }

    pub(crate) fn record_rejection(&mut self, command: &str, reason: &str) -> Result<(), SessionError> {
        self.record_report(
            "rejected_command",
            serde_json::json!({ "command": command, "reason": reason }),
        )
        .map(|_| ())
    }
}

/// "A".."Z", then "AA".."ZZ".
fn pseudonym_codes() -> impl Iterator<Item = String> {
    let letters = || (b'A'..=b'Z').map(|c| c as char);
    letters()
        .map(|c| c.to_string())
        .chain(letters().flat_map(move |a| letters().map(move |b| format!("{a}{b}"))))
}
