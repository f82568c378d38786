//! Action modules: the suggestion engine, the scripted tool workflows,
//! training stubs, and the scoring helpers some tools rely on (risk
//! attitude, calibration, task recombination).
//!
//! Actions never run on their own. Suggestions are advisory; a facilitator
//! starts every run.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::feedback::{Finding, FindingKind, Severity};
use crate::registry::{ActionSubkind, Catalogue, ModuleKind};
use crate::session::{
    ActionOutcome, ActionRun, ActionStep, Combinator, ElicitationSession, EventBody, Prompt,
    PromptMode, Role, SessionError, SessionState, Task,
};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("suggestion rule refers to unknown action '{0}'")]
    UnknownActionIdInRules(String),
    #[error("unknown descriptor '{0}'")]
    UnknownDescriptor(String),
    #[error("descriptor '{0}' has no executable template")]
    NonExecutableDescriptor(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("unknown action run '{0}'")]
    UnknownRun(String),
    #[error("action run '{0}' is already complete")]
    RunComplete(String),
    #[error("run '{run_id}' is in phase {phase}; {attempted} is not allowed")]
    PhaseViolation {
        run_id: String,
        phase: String,
        attempted: String,
    },
    #[error("prompt '{0}' is still open")]
    PromptOpen(String),
    #[error("unknown prompt '{0}'")]
    UnknownPrompt(String),
    #[error("prompt '{0}' has no responses")]
    NoResponses(String),
    #[error("likert value {0} is outside 1..=7 or not an integer")]
    OutOfScaleValue(f64),
    #[error("no items to score")]
    EmptyItems,
    #[error("no seed results")]
    EmptySeeds,
    #[error("seed {0} has an invalid interval")]
    InvalidInterval(usize),
    #[error("leaf task '{0}' has no response")]
    MissingLeafResponse(String),
    #[error("task '{0}' has children but no combinator")]
    MissingCombinator(String),
    #[error("product combinator needs nonnegative bounds (task '{0}')")]
    NegativeBoundsProduct(String),
    #[error("task '{task}' has {children} children but {weights} weights")]
    WeightsDimensionMismatch {
        task: String,
        children: usize,
        weights: usize,
    },
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("malformed rules document: {0}")]
    Rules(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl ActionError {
    pub fn code(&self) -> &'static str {
        match self {
            ActionError::UnknownActionIdInRules(_) => "unknown_action_id_in_rules",
            ActionError::UnknownDescriptor(_) => "unknown_descriptor",
            ActionError::NonExecutableDescriptor(_) => "non_executable_descriptor",
            ActionError::BadParams(_) => "bad_params",
            ActionError::UnknownRun(_) => "unknown_run",
            ActionError::RunComplete(_) => "run_complete",
            ActionError::PhaseViolation { .. } => "phase_violation",
            ActionError::PromptOpen(_) => "prompt_open",
            ActionError::UnknownPrompt(_) => "unknown_prompt",
            ActionError::NoResponses(_) => "no_responses",
            ActionError::OutOfScaleValue(_) => "out_of_scale_value",
            ActionError::EmptyItems => "empty_items",
            ActionError::EmptySeeds => "empty_seeds",
            ActionError::InvalidInterval(_) => "invalid_interval",
            ActionError::MissingLeafResponse(_) => "missing_leaf_response",
            ActionError::MissingCombinator(_) => "missing_combinator",
            ActionError::NegativeBoundsProduct(_) => "negative_bounds_product",
            ActionError::WeightsDimensionMismatch { .. } => "weights_dimension_mismatch",
            ActionError::UnknownTask(_) => "unknown_task",
            ActionError::Rules(_) => "malformed_rules",
            ActionError::Session(e) => e.code(),
        }
    }
}

// ---------------------------------------------------------------------------
// suggestions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionRule {
    pub trigger: FindingKind,
    #[serde(default)]
    pub min_severity: Option<Severity>,
    pub suggests: Vec<String>,
    #[serde(default)]
    pub rationale: String,
}

impl SuggestionRule {
    pub fn matches(&self, finding: &Finding) -> bool {
        finding.kind == self.trigger && self.min_severity.is_none_or(|s| finding.severity >= s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub descriptor_id: String,
    pub rationale: String,
    pub trigger: FindingKind,
    pub subject: String,
}

pub fn default_rules() -> Vec<SuggestionRule> {
    load_rules(include_str!("../data/suggestion_rules.json")).expect("shipped rules parse")
}

pub fn load_rules(doc: &str) -> Result<Vec<SuggestionRule>, ActionError> {
    serde_json::from_str(doc).map_err(|e| ActionError::Rules(e.to_string()))
}

pub fn validate_rules(rules: &[SuggestionRule], catalogue: &Catalogue) -> Result<(), ActionError> {
    for id in rules.iter().flat_map(|r| &r.suggests) {
        match catalogue.get(id) {
            Some(d) if d.kind == ModuleKind::Action => {}
            _ => return Err(ActionError::UnknownActionIdInRules(id.clone())),
        }
    }
    Ok(())
}

/// For each finding in order, the first matching rule contributes its
/// suggestions; repeats are dropped keeping the first occurrence.
pub fn suggest_actions(
    findings: &[Finding],
    rules: &[SuggestionRule],
    catalogue: &Catalogue,
) -> Result<Vec<Suggestion>, ActionError> {
    validate_rules(rules, catalogue)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for f in findings {
        let Some(rule) = rules.iter().find(|r| r.matches(f)) else {
            continue;
        };
        for id in &rule.suggests {
            if seen.insert(id.clone()) {
                out.push(Suggestion {
                    descriptor_id: id.clone(),
                    rationale: rule.rationale.clone(),
                    trigger: f.kind,
                    subject: f.subject.clone(),
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// risk attitude

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskClass {
    Averse,
    Neutral,
    Seeking,
}

pub const RISK_NEUTRAL_BAND: f64 = 0.2;

pub fn classify_risk(score: f64) -> RiskClass {
    if score < -RISK_NEUTRAL_BAND {
        RiskClass::Averse
    } else if score > RISK_NEUTRAL_BAND {
        RiskClass::Seeking
    } else {
        RiskClass::Neutral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskItem {
    pub id: String,
    pub text: String,
    pub reverse_coded: bool,
}

pub fn default_risk_items() -> Vec<RiskItem> {
    serde_json::from_str(include_str!("../data/risk_items.json")).expect("shipped items parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub participant_id: String,
    pub score: f64,
    pub classification: RiskClass,
    pub item_count: usize,
}

/// Scores 1..=7 Likert answers; reverse-coded items map v to 8 - v.
pub fn score_risk_attitude(
    participant_id: &str,
    answers: &[(String, f64)],
    reverse_coded: &BTreeSet<String>,
) -> Result<RiskProfile, ActionError> {
    if answers.is_empty() {
        return Err(ActionError::EmptyItems);
    }
    let mut total = 0.0;
    for (item, v) in answers {
        if !(v.fract() == 0.0 && (1.0..=7.0).contains(v)) {
            return Err(ActionError::OutOfScaleValue(*v));
        }
        total += if reverse_coded.contains(item) { 8.0 - v } else { *v };
    }
    let mean = total / answers.len() as f64;
    let score = (mean - 4.0) / 3.0;
    Ok(RiskProfile {
        participant_id: participant_id.into(),
        score,
        classification: classify_risk(score),
        item_count: answers.len(),
    })
}

// ---------------------------------------------------------------------------
// calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub interval: (f64, f64),
    pub coverage: f64,
    pub truth: f64,
    /// Width of the seed parameter's declared range.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub participant_id: String,
    pub seed_count: usize,
    pub hits: usize,
    pub hit_rate: f64,
    pub coverage: f64,
    pub mean_normalized_width: f64,
    pub overconfident: bool,
}

pub const MIN_SEEDS_FOR_FLAG: usize = 10;
pub const OVERCONFIDENCE_MARGIN: f64 = 0.3;

impl CalibrationProfile {
    pub fn finding(&self, round_index: u32) -> Option<Finding> {
        self.overconfident.then(|| {
            Finding::new(
                FindingKind::Overconfidence,
                self.participant_id.clone(),
                Severity::Warn,
                round_index,
            )
            .with("hit_rate", self.hit_rate)
            .with("coverage", self.coverage)
            .with("seed_count", self.seed_count as f64)
        })
    }
}

pub fn profile_expert(participant_id: &str, seeds: &[SeedResult]) -> Result<CalibrationProfile, ActionError> {
    if seeds.is_empty() {
        return Err(ActionError::EmptySeeds);
    }
    let mut hits = 0;
    let mut widths = 0.0;
    let mut coverage = 0.0;
    for (i, s) in seeds.iter().enumerate() {
        let (lo, hi) = s.interval;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && s.scale > 0.0)
            || !(s.coverage > 0.0 && s.coverage < 1.0)
        {
            return Err(ActionError::InvalidInterval(i));
        }
        if lo <= s.truth && s.truth <= hi {
            hits += 1;
        }
        widths += (hi - lo) / s.scale;
        coverage += s.coverage;
    }
    let n = seeds.len();
    let hit_rate = hits as f64 / n as f64;
    let coverage = coverage / n as f64;
    Ok(CalibrationProfile {
        participant_id: participant_id.into(),
        seed_count: n,
        hits,
        hit_rate,
        coverage,
        mean_normalized_width: widths / n as f64,
        overconfident: n >= MIN_SEEDS_FOR_FLAG && hit_rate < coverage - OVERCONFIDENCE_MARGIN,
    })
}

// ---------------------------------------------------------------------------
// task recombination

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    pub fn new(point: f64, lo: f64, hi: f64) -> Self {
        Self { point, lo, hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recombined {
    pub task_id: String,
    pub estimate: Estimate,
    /// Leaf task ids that fed this estimate, in tree order.
    pub provenance: Vec<String>,
}

/// Combines child estimates. Each of point, lower and upper bound goes
/// through the combinator separately, which is exact for combinators that
/// are monotone in every argument.
pub fn combine(task_id: &str, combinator: &Combinator, children: &[Estimate]) -> Result<Estimate, ActionError> {
    let n = children.len();
    let apply = |f: &dyn Fn(&[f64]) -> f64| {
        let pick = |g: fn(&Estimate) -> f64| children.iter().map(g).collect::<Vec<_>>();
        Estimate {
            point: f(&pick(|e| e.point)),
            lo: f(&pick(|e| e.lo)),
            hi: f(&pick(|e| e.hi)),
        }
    };
    Ok(match combinator {
        Combinator::Sum => apply(&|xs| xs.iter().sum()),
        Combinator::Mean => apply(&|xs| xs.iter().sum::<f64>() / n as f64),
        Combinator::Min => apply(&|xs| xs.iter().copied().fold(f64::INFINITY, f64::min)),
        Combinator::Max => apply(&|xs| xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Combinator::Product => {
            if children.iter().any(|e| e.lo < 0.0 || e.point < 0.0 || e.hi < 0.0) {
                return Err(ActionError::NegativeBoundsProduct(task_id.into()));
            }
            apply(&|xs| xs.iter().product())
        }
        Combinator::WeightedMean { weights } => {
            if weights.len() != n {
                return Err(ActionError::WeightsDimensionMismatch {
                    task: task_id.into(),
                    children: n,
                    weights: weights.len(),
                });
            }
            let total: f64 = weights.iter().sum();
            if weights.iter().any(|w| !(*w >= 0.0)) || total <= 0.0 {
                return Err(ActionError::BadParams(format!(
                    "weights of task '{task_id}' must be nonnegative with a positive sum"
                )));
            }
            apply(&|xs| xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total)
        }
    })
}

/// Recombines leaf estimates up to `root`. Children are the tasks whose
/// `parent` names a node, in the order they appear in `tasks`.
pub fn recombine_subtasks(
    tasks: &[Task],
    root: &str,
    leaves: &BTreeMap<String, Estimate>,
) -> Result<Recombined, ActionError> {
    let node = tasks
        .iter()
        .find(|t| t.id == root)
        .ok_or_else(|| ActionError::UnknownTask(root.into()))?;
    let children: Vec<&Task> = tasks
        .iter()
        .filter(|t| t.parent.as_deref() == Some(root))
        .collect();
    if children.is_empty() {
        let estimate = *leaves
            .get(root)
            .ok_or_else(|| ActionError::MissingLeafResponse(root.into()))?;
        return Ok(Recombined {
            task_id: root.into(),
            estimate,
            provenance: vec![root.into()],
        });
    }
    let combinator = node
        .combinator
        .as_ref()
        .ok_or_else(|| ActionError::MissingCombinator(root.into()))?;
    let mut estimates = Vec::with_capacity(children.len());
    let mut provenance = Vec::new();
    for c in children {
        let r = recombine_subtasks(tasks, &c.id, leaves)?;
        estimates.push(r.estimate);
        provenance.extend(r.provenance);
    }
    Ok(Recombined {
        task_id: root.into(),
        estimate: combine(root, combinator, &estimates)?,
        provenance,
    })
}

/// One expert's latest interval answers on leaf tasks, recombined to `root`.
pub fn recombine_for_expert(
    state: &SessionState,
    root: &str,
    participant_id: &str,
) -> Result<Recombined, ActionError> {
    let mut leaves = BTreeMap::new();
    for ps in state.prompts_in_order() {
        if !ps.prompt.mode.is_numeric_estimate() {
            continue;
        }
        if let Some(r) = state
            .responses_for(&ps.prompt.id)
            .into_iter()
            .find(|r| r.participant_id == participant_id)
        {
            let (lo, hi) = r.interval.unwrap_or((r.point, r.point));
            leaves.insert(ps.prompt.task_id.clone(), Estimate::new(r.point, lo, hi));
        }
    }
    let tasks: Vec<Task> = state.tasks.values().cloned().collect();
    recombine_subtasks(&tasks, root, &leaves)
}

// ---------------------------------------------------------------------------
// ask again later

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub participant_id: String,
    pub earlier: f64,
    pub later: f64,
    pub delta: f64,
    /// Change over the earlier interval half-width; absent without a width.
    pub normalized: Option<f64>,
    pub self_consistent: Option<bool>,
}

pub fn consistency_records(state: &SessionState, original: &str, reprompt: &str) -> Vec<ConsistencyRecord> {
    let earlier: BTreeMap<&str, _> = state
        .responses_for(original)
        .into_iter()
        .map(|r| (r.participant_id.as_str(), r))
        .collect();
    state
        .responses_for(reprompt)
        .into_iter()
        .filter_map(|later| {
            let before = earlier.get(later.participant_id.as_str())?;
            let delta = (later.point - before.point).abs();
            let normalized = before
                .half_width()
                .filter(|w| *w > 0.0)
                .map(|w| delta / w);
            Some(ConsistencyRecord {
                participant_id: later.participant_id.clone(),
                earlier: before.point,
                later: later.point,
                delta,
                normalized,
                self_consistent: later.consistent_with_previous,
            })
        })
        .collect()
}

pub fn schedule_ask_again(
    session: &mut ElicitationSession,
    prompt_id: &str,
    delay: Duration,
    issuer: &str,
) -> Result<String, ActionError> {
    session.require_facilitator(issuer)?;
    let ps = session
        .state()
        .prompts
        .get(prompt_id)
        .ok_or_else(|| ActionError::UnknownPrompt(prompt_id.into()))?;
    if ps.open {
        return Err(ActionError::PromptOpen(prompt_id.into()));
    }
    if session.state().responses_for(prompt_id).is_empty() {
        return Err(ActionError::NoResponses(prompt_id.into()));
    }
    if delay < Duration::zero() {
        return Err(ActionError::BadParams("delay must be nonnegative".into()));
    }
    let due_at = session.now() + delay;
    let run_id = start_run(
        session,
        "act.ask_again",
        issuer,
        json!({ "prompt_id": prompt_id, "delay_secs": delay.num_seconds() }),
        &ASK_AGAIN_PHASES,
        Some(due_at),
    )?;
    poll_actions(session)?;
    Ok(run_id)
}

const ASK_AGAIN_PHASES: [&str; 2] = ["SCHEDULED", "REPROMPTED"];

// ---------------------------------------------------------------------------
// pre-mortem

pub const PREMORTEM_PHASES: [&str; 5] = ["PLAN", "ASSUME_FAILURE", "INDIVIDUAL_REASONS", "SHARE", "REASSESS"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedReason {
    /// Display name, or pseudonym under anonymity.
    pub author: String,
    pub reason: String,
}

/// Starts a pre-mortem on the stated plan. The run begins in PLAN.
pub fn run_premortem(
    session: &mut ElicitationSession,
    plan_statement: &str,
    issuer: &str,
) -> Result<String, ActionError> {
    session.require_facilitator(issuer)?;
    if plan_statement.trim().is_empty() {
        return Err(ActionError::BadParams("plan statement is empty".into()));
    }
    start_run(
        session,
        "act.pre_mortem",
        issuer,
        json!({ "plan": plan_statement }),
        &PREMORTEM_PHASES,
        None,
    )
}

fn open_run(session: &ElicitationSession, run_id: &str) -> Result<ActionRun, ActionError> {
    let run = session
        .state()
        .actions
        .get(run_id)
        .ok_or_else(|| ActionError::UnknownRun(run_id.into()))?;
    if run.is_complete() {
        return Err(ActionError::RunComplete(run_id.into()));
    }
    Ok(run.clone())
}

/// Logs the refused command and hands back the error.
fn rejected(session: &mut ElicitationSession, command: &str, err: ActionError) -> ActionError {
    let _ = session.record_rejection(command, &err.to_string());
    err
}

fn phase_violation(run: &ActionRun, attempted: &str) -> ActionError {
    ActionError::PhaseViolation {
        run_id: run.id.clone(),
        phase: run.phase.clone(),
        attempted: attempted.into(),
    }
}

/// Moves a pre-mortem to its next phase, or completes it from REASSESS.
/// Closing INDIVIDUAL_REASONS before everyone submitted marks an early close.
pub fn advance_premortem(
    session: &mut ElicitationSession,
    run_id: &str,
    issuer: &str,
) -> Result<String, ActionError> {
    session.require_facilitator(issuer)?;
    let run = open_run(session, run_id)?;
    if run.descriptor_id != "act.pre_mortem" {
        return Err(ActionError::BadParams(format!("run '{run_id}' is not a pre-mortem")));
    }
    let idx = run.phase_index().unwrap_or(0);
    if idx + 1 == PREMORTEM_PHASES.len() {
        let shared = shared_reasons(session.state(), &run, true);
        session.append(EventBody::ActionCompleted {
            run_id: run_id.into(),
            outcome: ActionOutcome {
                artifacts: BTreeMap::from([("reasons".into(), json!(shared))]),
                early_close: run.early_close,
            },
        })?;
        return Ok("COMPLETED".into());
    }
    let next = PREMORTEM_PHASES[idx + 1];
    let early_close = run.phase == "INDIVIDUAL_REASONS"
        && run.submissions.len() < session.state().experts().count();
    session.append(EventBody::ActionTriggered {
        run_id: run_id.into(),
        step: ActionStep::Phase {
            phase: next.into(),
            early_close,
        },
    })?;
    Ok(next.into())
}

/// Collects one expert's reasons. The phase closes on its own once every
/// joined expert has submitted.
pub fn submit_premortem_reasons(
    session: &mut ElicitationSession,
    run_id: &str,
    participant_id: &str,
    reasons: Vec<String>,
) -> Result<(), ActionError> {
    session.require_expert(participant_id)?;
    let run = open_run(session, run_id)?;
    if run.phase != "INDIVIDUAL_REASONS" {
        let err = phase_violation(&run, "submit reasons");
        return Err(rejected(session, "premortem.submit", err));
    }
    if run.submissions.contains_key(participant_id) {
        return Err(ActionError::BadParams(format!(
            "'{participant_id}' already submitted reasons"
        )));
    }
    let reasons: Vec<String> = reasons.into_iter().filter(|r| !r.trim().is_empty()).collect();
    if reasons.is_empty() {
        return Err(ActionError::BadParams("at least one reason is required".into()));
    }
    session.append(EventBody::ActionTriggered {
        run_id: run_id.into(),
        step: ActionStep::Submit {
            participant_id: participant_id.into(),
            items: reasons,
        },
    })?;
    let run = &session.state().actions[run_id];
    let everyone = session
        .state()
        .experts()
        .all(|e| run.submissions.contains_key(&e.id));
    if everyone {
        session.append(EventBody::ActionTriggered {
            run_id: run_id.into(),
            step: ActionStep::Phase {
                phase: "SHARE".into(),
                early_close: false,
            },
        })?;
    }
    Ok(())
}

fn shared_reasons(state: &SessionState, run: &ActionRun, unmasked: bool) -> Vec<SharedReason> {
    run.submissions
        .iter()
        .flat_map(|(pid, items)| {
            let author = match state.participant(pid) {
                Some(p) if state.anonymity && !unmasked => p.pseudonym.clone(),
                Some(p) if unmasked => p.id.clone(),
                Some(p) => p.display_name.clone(),
                None => pid.clone(),
            };
            items.iter().map(move |r| SharedReason {
                author: author.clone(),
                reason: r.clone(),
            })
        })
        .collect()
}

/// The pooled reasons, available from SHARE onwards.
pub fn premortem_shared_reasons(
    session: &mut ElicitationSession,
    run_id: &str,
    viewer: &str,
) -> Result<Vec<SharedReason>, ActionError> {
    if session.state().participant(viewer).is_none() {
        return Err(SessionError::UnknownParticipant(viewer.into()).into());
    }
    let run = session
        .state()
        .actions
        .get(run_id)
        .cloned()
        .ok_or_else(|| ActionError::UnknownRun(run_id.into()))?;
    let share_idx = PREMORTEM_PHASES.iter().position(|p| *p == "SHARE").unwrap();
    if run.phase_index().unwrap_or(0) < share_idx {
        let err = phase_violation(&run, "read shared reasons");
        return Err(rejected(session, "premortem.shared", err));
    }
    Ok(shared_reasons(session.state(), &run, false))
}

// ---------------------------------------------------------------------------
// anonymity

pub fn apply_forced_anonymity(session: &mut ElicitationSession, issuer: &str) -> Result<(), ActionError> {
    session.require_facilitator(issuer)?;
    if !session.state().anonymity {
        session.append(EventBody::AnonymityEnabled { by: issuer.into() })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scripted actions

pub const SLOW_DOWN_MINUTES: (f64, f64) = (5.0, 10.0);
const OPEN_CLOSED: [&str; 2] = ["OPEN", "CLOSED"];

fn start_run(
    session: &mut ElicitationSession,
    descriptor_id: &str,
    issuer: &str,
    params: Value,
    phases: &[&str],
    due_at: Option<chrono::DateTime<chrono::Utc>>,
) -> Result<String, ActionError> {
    let run_id = format!("run-{}", session.state().actions.len() + 1);
    session.append(EventBody::ActionTriggered {
        run_id: run_id.clone(),
        step: ActionStep::Start {
            descriptor_id: descriptor_id.into(),
            initiated_by: issuer.into(),
            params,
            phases: phases.iter().map(|s| s.to_string()).collect(),
            due_at,
        },
    })?;
    Ok(run_id)
}

fn complete(
    session: &mut ElicitationSession,
    run_id: &str,
    artifacts: BTreeMap<String, Value>,
    early_close: bool,
) -> Result<(), ActionError> {
    session.append(EventBody::ActionCompleted {
        run_id: run_id.into(),
        outcome: ActionOutcome {
            artifacts,
            early_close,
        },
    })?;
    Ok(())
}

fn record(session: &mut ElicitationSession, run_id: &str, key: &str, value: Value) -> Result<(), ActionError> {
    session.append(EventBody::ActionTriggered {
        run_id: run_id.into(),
        step: ActionStep::Record {
            key: key.into(),
            value,
        },
    })?;
    Ok(())
}

/// Issues a template prompt against the root task in the current round.
fn template_prompt(
    session: &mut ElicitationSession,
    issuer: &str,
    mode: PromptMode,
    parameter_name: &str,
    text: String,
    question_id: Option<String>,
) -> Result<String, ActionError> {
    let state = session.state();
    let mut p = Prompt::new(state.task.id.clone(), parameter_name, mode, state.round).with_text(text);
    p.question_id = question_id;
    Ok(session.issue_prompt(p, issuer)?)
}

fn root_parameter(state: &SessionState) -> String {
    state
        .task
        .parameters
        .first()
        .map(|p| p.name.clone())
        .unwrap_or_else(|| "notes".into())
}

fn params_as<T: serde::de::DeserializeOwned>(params: &Value) -> Result<T, ActionError> {
    let v = if params.is_null() { json!({}) } else { params.clone() };
    serde_json::from_value(v).map_err(|e| ActionError::BadParams(e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SlowDownParams {
    #[serde(default = "default_minutes")]
    minutes: f64,
}

fn default_minutes() -> f64 {
    SLOW_DOWN_MINUTES.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AssigneeParams {
    assignee: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AskAgainParams {
    prompt_id: String,
    #[serde(default)]
    delay_secs: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanParams {
    plan: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemsParams {
    #[serde(default)]
    items: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvisorParams {
    advisor: String,
    #[serde(default)]
    question: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FormatsParams {
    #[serde(default)]
    formats: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentificationParams {
    #[serde(default)]
    required_tags: BTreeSet<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfilingParams {
    seeds: BTreeMap<String, Vec<SeedResult>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskParams {
    #[serde(default)]
    items: Option<Vec<RiskItem>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeconstructParams {
    #[serde(default)]
    parent: Option<String>,
    combinator: Combinator,
    subtasks: Vec<Task>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RewordParams {
    rewordings: Vec<String>,
}

const EXPOSURE_CHECKLIST: [&str; 3] = [
    "Each shared item is labelled as measured data or as interpretation",
    "Interpretations name the person or model they came from",
    "Raw data were shown before any summary opinion",
];

const DATA_CHECKLIST: [&str; 4] = [
    "All available data types for the task have been listed",
    "Data quality and provenance are recorded for each source",
    "Missing data and the reason for the gap are noted",
    "Data were reviewed before any estimate was requested",
];

const STEP_BACK_TEXT: &str =
    "Before continuing, describe in a few sentences how you reached your current answer and what would change it.";
const EXPLICIT_KNOWLEDGE_TEXT: &str =
    "List the specific data, observations or references your current answer rests on.";

/// Starts the template behind an action descriptor. Training descriptors
/// complete at once with a placeholder artifact.
pub fn run_scripted_action(
    session: &mut ElicitationSession,
    catalogue: &Catalogue,
    descriptor_id: &str,
    params: Value,
    issuer: &str,
) -> Result<String, ActionError> {
    let d = catalogue
        .get(descriptor_id)
        .filter(|d| d.kind == ModuleKind::Action)
        .ok_or_else(|| ActionError::UnknownDescriptor(descriptor_id.into()))?;
    session.require_facilitator(issuer)?;

    if d.action_subkind == Some(ActionSubkind::Training) {
        let run_id = start_run(session, descriptor_id, issuer, params, &["DELIVERED"], None)?;
        let artifacts = BTreeMap::from([
            ("content".to_string(), json!("content stub")),
            ("title".to_string(), json!(d.title)),
        ]);
        complete(session, &run_id, artifacts, false)?;
        return Ok(run_id);
    }
    if !d.executable {
        return Err(ActionError::NonExecutableDescriptor(descriptor_id.into()));
    }

    match descriptor_id {
        "act.slow_down" => {
            let p: SlowDownParams = params_as(&params)?;
            if !(SLOW_DOWN_MINUTES.0..=SLOW_DOWN_MINUTES.1).contains(&p.minutes) {
                return Err(ActionError::BadParams(format!(
                    "minutes must lie in [{}, {}], got {}",
                    SLOW_DOWN_MINUTES.0, SLOW_DOWN_MINUTES.1, p.minutes
                )));
            }
            let due = session.now() + Duration::milliseconds((p.minutes * 60_000.0).round() as i64);
            start_run(
                session,
                descriptor_id,
                issuer,
                json!({ "minutes": p.minutes }),
                &["PAUSED"],
                Some(due),
            )
        }
        "act.devils_advocate" => {
            let p: AssigneeParams = params_as(&params)?;
            session
                .require_expert(&p.assignee)
                .map_err(|e| ActionError::BadParams(e.to_string()))?;
            let run_id = start_run(session, descriptor_id, issuer, params, &OPEN_CLOSED, None)?;
            session.append(EventBody::ActionTriggered {
                run_id: run_id.clone(),
                step: ActionStep::Assign {
                    participant_id: p.assignee,
                    role: "devils_advocate".into(),
                },
            })?;
            Ok(run_id)
        }
        "act.forced_anonymity" => {
            let run_id = start_run(session, descriptor_id, issuer, params, &["APPLIED"], None)?;
            apply_forced_anonymity(session, issuer)?;
            complete(session, &run_id, BTreeMap::new(), false)?;
            Ok(run_id)
        }
        "act.ask_again" => {
            let p: AskAgainParams = params_as(&params)?;
            schedule_ask_again(session, &p.prompt_id, Duration::seconds(p.delay_secs), issuer)
        }
        "act.pre_mortem" => {
            let p: PlanParams = params_as(&params)?;
            run_premortem(session, &p.plan, issuer)
        }
        "act.step_back" | "act.explicit_knowledge" => {
            params_as::<ItemsParams>(&params)?;
            let text = if descriptor_id == "act.step_back" {
                STEP_BACK_TEXT
            } else {
                EXPLICIT_KNOWLEDGE_TEXT
            };
            let run_id = start_run(session, descriptor_id, issuer, params, &OPEN_CLOSED, None)?;
            let param = root_parameter(session.state());
            let prompt_id = template_prompt(session, issuer, PromptMode::FreeText, &param, text.into(), None)?;
            record(session, &run_id, "prompt_id", json!(prompt_id))?;
            Ok(run_id)
        }
        "act.reword_task" => {
            let p: RewordParams = params_as(&params)?;
            if p.rewordings.iter().all(|r| r.trim().is_empty()) {
                return Err(ActionError::BadParams("at least one rewording is required".into()));
            }
            let run_id = start_run(session, descriptor_id, issuer, params, &OPEN_CLOSED, None)?;
            let param = root_parameter(session.state());
            let mut ids = Vec::new();
            for r in p.rewordings.iter().filter(|r| !r.trim().is_empty()) {
                let text = format!("The task restated: {r} Does this change your understanding of what is asked?");
                ids.push(template_prompt(session, issuer, PromptMode::FreeText, &param, text, None)?);
            }
            record(session, &run_id, "prompt_ids", json!(ids))?;
            Ok(run_id)
        }
        "act.data_checklist" | "act.exposure_control" => {
            let p: ItemsParams = params_as(&params)?;
            let items: Vec<String> = if p.items.is_empty() {
                let defaults: &[&str] = if descriptor_id == "act.data_checklist" {
                    &DATA_CHECKLIST
                } else {
                    &EXPOSURE_CHECKLIST
                };
                defaults.iter().map(|s| s.to_string()).collect()
            } else {
                p.items
            };
            let run_id = start_run(session, descriptor_id, issuer, params, &OPEN_CLOSED, None)?;
            record(session, &run_id, "checklist", json!(items))?;
            Ok(run_id)
        }
        "act.seek_advice" => {
            let p: AdvisorParams = params_as(&params)?;
            if p.advisor.trim().is_empty() {
                return Err(ActionError::BadParams("advisor is empty".into()));
            }
            let run_id = start_run(session, descriptor_id, issuer, params, &OPEN_CLOSED, None)?;
            record(session, &run_id, "advisor", json!(p.advisor))?;
            if let Some(q) = p.question {
                record(session, &run_id, "question", json!(q))?;
            }
            Ok(run_id)
        }
        "act.visualisation" => {
            let p: FormatsParams = params_as(&params)?;
            let formats = if p.formats.is_empty() {
                vec!["spreadsheet_csv".into(), "linegraph_series".into(), "pointvalue_text".into()]
            } else {
                p.formats
            };
            let run_id = start_run(session, descriptor_id, issuer, params, &OPEN_CLOSED, None)?;
            record(session, &run_id, "formats", json!(formats))?;
            Ok(run_id)
        }
        "act.expert_identification" => {
            let p: IdentificationParams = params_as(&params)?;
            let run_id = start_run(session, descriptor_id, issuer, params, &OPEN_CLOSED, None)?;
            let panel: BTreeMap<String, Value> = session
                .state()
                .experts()
                .map(|e| {
                    let missing: Vec<&String> = p.required_tags.difference(&e.expertise_tags).collect();
                    (e.id.clone(), json!({ "tags": e.expertise_tags, "missing": missing }))
                })
                .collect();
            record(session, &run_id, "panel", json!(panel))?;
            Ok(run_id)
        }
        "act.expert_profiling" => {
            let p: ProfilingParams = params_as(&params)?;
            let mut profiles = Vec::new();
            for (pid, seeds) in &p.seeds {
                session
                    .require_expert(pid)
                    .map_err(|e| ActionError::BadParams(e.to_string()))?;
                profiles.push(profile_expert(pid, seeds)?);
            }
            let run_id = start_run(session, descriptor_id, issuer, params, &["SCORED"], None)?;
            complete(
                session,
                &run_id,
                BTreeMap::from([("profiles".into(), json!(profiles))]),
                false,
            )?;
            Ok(run_id)
        }
        "act.risk_attitude" => {
            let p: RiskParams = params_as(&params)?;
            let items = p.items.unwrap_or_else(default_risk_items);
            if items.is_empty() {
                return Err(ActionError::EmptyItems);
            }
            let run_id = start_run(session, descriptor_id, issuer, json!({ "items": items }), &OPEN_CLOSED, None)?;
            let mut ids = BTreeMap::new();
            for item in &items {
                let id = template_prompt(
                    session,
                    issuer,
                    PromptMode::Likert,
                    "risk_attitude",
                    item.text.clone(),
                    Some(item.id.clone()),
                )?;
                ids.insert(id, item.id.clone());
            }
            record(session, &run_id, "prompts", json!(ids))?;
            Ok(run_id)
        }
        "act.deconstruct_task" => {
            let p: DeconstructParams = params_as(&params)?;
            let state = session.state();
            let parent_id = p.parent.unwrap_or_else(|| state.task.id.clone());
            let mut parent = state
                .tasks
                .get(&parent_id)
                .cloned()
                .ok_or_else(|| ActionError::UnknownTask(parent_id.clone()))?;
            if p.subtasks.is_empty() {
                return Err(ActionError::BadParams("no subtasks given".into()));
            }
            if let Combinator::WeightedMean { weights } = &p.combinator {
                if weights.len() != p.subtasks.len() {
                    return Err(ActionError::WeightsDimensionMismatch {
                        task: parent_id,
                        children: p.subtasks.len(),
                        weights: weights.len(),
                    });
                }
            }
            let mut children = Vec::new();
            for mut t in p.subtasks {
                t.check().map_err(ActionError::BadParams)?;
                if state.tasks.contains_key(&t.id) || t.id == parent_id {
                    return Err(ActionError::BadParams(format!("task id '{}' already used", t.id)));
                }
                t.parent = Some(parent_id.clone());
                children.push(t);
            }
            parent.combinator = Some(p.combinator);
            let run_id = start_run(session, descriptor_id, issuer, params, &["DEFINED"], None)?;
            let ids: Vec<String> = children.iter().map(|t| t.id.clone()).collect();
            for task in std::iter::once(parent).chain(children) {
                session.append(EventBody::ActionTriggered {
                    run_id: run_id.clone(),
                    step: ActionStep::DefineTask { task },
                })?;
            }
            complete(session, &run_id, BTreeMap::from([("subtasks".into(), json!(ids))]), false)?;
            Ok(run_id)
        }
        other => Err(ActionError::NonExecutableDescriptor(other.into())),
    }
}

/// Stores a facilitator note on an open run, e.g. a ticked checklist item.
pub fn record_action_note(
    session: &mut ElicitationSession,
    run_id: &str,
    issuer: &str,
    key: &str,
    value: Value,
) -> Result<(), ActionError> {
    session.require_facilitator(issuer)?;
    open_run(session, run_id)?;
    record(session, run_id, key, value)
}

fn risk_profiles(state: &SessionState, run: &ActionRun) -> Vec<RiskProfile> {
    let prompts: BTreeMap<String, String> = run
        .records
        .get("prompts")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let items: Vec<RiskItem> = run
        .params
        .get("items")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let reverse: BTreeSet<String> = items
        .iter()
        .filter(|i| i.reverse_coded)
        .map(|i| i.id.clone())
        .collect();
    let mut answers: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (prompt_id, item_id) in &prompts {
        for r in state.responses_for(prompt_id) {
            answers
                .entry(r.participant_id.clone())
                .or_default()
                .push((item_id.clone(), r.point));
        }
    }
    answers
        .iter()
        .filter_map(|(pid, a)| score_risk_attitude(pid, a, &reverse).ok())
        .collect()
}

fn run_artifacts(state: &SessionState, run: &ActionRun) -> BTreeMap<String, Value> {
    let mut artifacts: BTreeMap<String, Value> = run.records.clone();
    match run.descriptor_id.as_str() {
        "act.ask_again" => {
            let original = run.params["prompt_id"].as_str().unwrap_or_default();
            if let Some(reprompt) = run.records.get("reprompt_id").and_then(Value::as_str) {
                artifacts.insert(
                    "consistency".into(),
                    json!(consistency_records(state, original, reprompt)),
                );
            }
        }
        "act.risk_attitude" => {
            artifacts.insert("profiles".into(), json!(risk_profiles(state, run)));
        }
        _ => {}
    }
    if !run.submissions.is_empty() {
        artifacts.insert("submissions".into(), json!(run.submissions));
    }
    artifacts
}

/// Completes an open run at the facilitator's request.
pub fn close_action(session: &mut ElicitationSession, run_id: &str, issuer: &str) -> Result<(), ActionError> {
    session.require_facilitator(issuer)?;
    let run = open_run(session, run_id)?;
    match run.descriptor_id.as_str() {
        "act.pre_mortem" if run.phase != "REASSESS" => {
            let err = phase_violation(&run, "close");
            Err(rejected(session, "action.close", err))
        }
        "act.pre_mortem" => advance_premortem(session, run_id, issuer).map(|_| ()),
        "act.ask_again" if run.phase == "SCHEDULED" => {
            let err = phase_violation(&run, "close before the re-prompt is issued");
            Err(rejected(session, "action.close", err))
        }
        _ => {
            let early = run.descriptor_id == "act.slow_down"
                && run.due_at.is_some_and(|d| session.now() < d);
            let artifacts = run_artifacts(session.state(), &run);
            complete(session, run_id, artifacts, early)
        }
    }
}

/// Advances timer-driven and response-driven runs whose condition now
/// holds. Returns the ids of runs that changed.
pub fn poll_actions(session: &mut ElicitationSession) -> Result<Vec<String>, ActionError> {
    let now = session.now();
    let runs: Vec<ActionRun> = session
        .state()
        .actions
        .values()
        .filter(|r| !r.is_complete())
        .cloned()
        .collect();
    let mut changed = Vec::new();
    for run in runs {
        match run.descriptor_id.as_str() {
            "act.slow_down" if run.due_at.is_some_and(|d| now >= d) => {
                complete(session, &run.id, run_artifacts(session.state(), &run), false)?;
                changed.push(run.id);
            }
            "act.ask_again" if run.phase == "SCHEDULED" && run.due_at.is_some_and(|d| now >= d) => {
                let original_id = run.params["prompt_id"].as_str().unwrap_or_default().to_string();
                let Some(original) = session.state().prompt(&original_id).cloned() else {
                    continue;
                };
                if session.state().slowdown.as_ref().is_some_and(|s| now < s.until) {
                    continue;
                }
                let mut p = original.clone();
                p.id = String::new();
                p.round_index = session.state().round;
                p.reprompt_of = Some(original_id);
                let reprompt = session.issue_prompt(p, &run.initiated_by)?;
                session.append(EventBody::ActionTriggered {
                    run_id: run.id.clone(),
                    step: ActionStep::Phase {
                        phase: "REPROMPTED".into(),
                        early_close: false,
                    },
                })?;
                record(session, &run.id, "reprompt_id", json!(reprompt))?;
                changed.push(run.id);
            }
            "act.ask_again" if run.phase == "REPROMPTED" => {
                let state = session.state();
                let original = run.params["prompt_id"].as_str().unwrap_or_default();
                let reprompt = run.records.get("reprompt_id").and_then(Value::as_str).unwrap_or_default();
                let answered: BTreeSet<&str> = state
                    .responses_for(reprompt)
                    .into_iter()
                    .map(|r| r.participant_id.as_str())
                    .collect();
                let all_in = state
                    .responses_for(original)
                    .into_iter()
                    .all(|r| answered.contains(r.participant_id.as_str()));
                if all_in {
                    let artifacts = run_artifacts(state, &run);
                    complete(session, &run.id, artifacts, false)?;
                    changed.push(run.id);
                }
            }
            "act.risk_attitude" => {
                let state = session.state();
                let prompts: Vec<String> = run
                    .records
                    .get("prompts")
                    .and_then(|v| v.as_object())
                    .map(|m| m.keys().cloned().collect())
                    .unwrap_or_default();
                let experts: Vec<&str> = state.experts().map(|e| e.id.as_str()).collect();
                let all_in = !experts.is_empty()
                    && prompts.iter().all(|p| {
                        let got: BTreeSet<&str> = state
                            .responses_for(p)
                            .into_iter()
                            .map(|r| r.participant_id.as_str())
                            .collect();
                        experts.iter().all(|e| got.contains(e))
                    });
                if all_in {
                    let artifacts = run_artifacts(state, &run);
                    complete(session, &run.id, artifacts, false)?;
                    changed.push(run.id);
                }
            }
            _ => {}
        }
    }
    Ok(changed)
}

/// Experts currently holding the devil's advocate role.
pub fn advocates(state: &SessionState) -> Vec<&str> {
    state
        .advocates
        .iter()
        .filter(|p| state.participant(p).is_some_and(|x| x.role == Role::Expert))
        .map(String::as_str)
        .collect()
}
