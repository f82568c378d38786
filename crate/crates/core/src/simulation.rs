//! Synthetic experts with tunable biases, and a driver that runs a whole
//! session with them.
//!
//! Agent model, per parameter and round t:
//!
//! * `u_t` is the precision-weighted mean of the evidence seen so far plus a
//!   noise draw of size `noise_sd`. The draw is fixed per (master seed,
//!   agent seed, question), so asking the same question again gives the same
//!   personal error.
//! * `a_t = λ·x_0 + (1-λ)·u_t` anchors on the agent's own first answer `x_0`
//!   (`a_0 = u_0`).
//! * `p_t = a_t + (x_{t-1} - a_{t-1})` carries forward whatever the agent
//!   already conceded to the group; `p_0 = a_0`.
//! * `x_t = p_t + β·(c_{t-1} - p_t)` when the previous consensus is shown,
//!   else `x_t = p_t`.
//! * the interval is `x_t ± γ·z·s`, where `s` is the posterior sd of the
//!   pooled evidence and `z` the two-sided normal quantile for the coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use chrono::Duration;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::actions::{apply_forced_anonymity, default_rules, suggest_actions, ActionError};
use crate::feedback::{
    consensus_from_session, consistency_from_session, track_uncertainty, ConsensusMethod,
    ConsistencyConfig, FeedbackError, Finding, ReferenceDatabase,
};
use crate::registry::{Binding, Catalogue, ModuleInstance, Pipeline};
use crate::session::{
    ElicitationSession, ManualClock, Prompt, PromptMode, Response, Role, SessionError, SessionEvent, Task,
};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("agent '{id}': {reason}")]
    InvalidProfile { id: String, reason: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no evidence visible for '{0}' in round 0")]
    NoVisibleEvidence(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimulationError {
    pub fn code(&self) -> &'static str {
        match self {
            SimulationError::InvalidProfile { .. } => "invalid_profile",
            SimulationError::InvalidScenario(_) => "invalid_scenario",
            SimulationError::NoVisibleEvidence(_) => "no_visible_evidence",
            SimulationError::Session(e) => e.code(),
            SimulationError::Action(e) => e.code(),
            SimulationError::Feedback(e) => e.code(),
            SimulationError::Io(_) => "io_failure",
            SimulationError::Json(_) => "parse_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: String,
    /// λ in [0, 1].
    #[serde(default)]
    pub anchor_weight: f64,
    /// β in [0, 1].
    #[serde(default)]
    pub herding_strength: f64,
    /// γ in (0, 2].
    #[serde(default = "one")]
    pub interval_shrink: f64,
    /// σ ≥ 0, parameter units.
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_subset: Option<BTreeSet<String>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
}

fn one() -> f64 {
    1.0
}

impl AgentProfile {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        Self {
            id: id.into(),
            anchor_weight: 0.0,
            herding_strength: 0.0,
            interval_shrink: 1.0,
            noise_sd: 0.0,
            knowledge_subset: None,
            seed,
            display_name: None,
        }
    }

    pub fn anchor(mut self, lambda: f64) -> Self {
        self.anchor_weight = lambda;
        self
    }

    pub fn herding(mut self, beta: f64) -> Self {
        self.herding_strength = beta;
        self
    }

    pub fn shrink(mut self, gamma: f64) -> Self {
        self.interval_shrink = gamma;
        self
    }

    pub fn noise(mut self, sd: f64) -> Self {
        self.noise_sd = sd;
        self
    }

    pub fn knowing<I: IntoIterator<Item = S>, S: Into<String>>(mut self, cats: I) -> Self {
        self.knowledge_subset = Some(cats.into_iter().map(Into::into).collect());
        self
    }

    pub fn check(&self) -> Result<(), SimulationError> {
        let bad = |reason: &str| {
            Err(SimulationError::InvalidProfile {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.anchor_weight) {
            return bad("anchor_weight must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.herding_strength) {
            return bad("herding_strength must lie in [0, 1]");
        }
        if !(self.interval_shrink > 0.0 && self.interval_shrink <= 2.0) {
            return bad("interval_shrink must lie in (0, 2]");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub value: f64,
    pub sd: f64,
}

/// Pooled mean and posterior sd of independent Gaussian observations.
pub fn pool_evidence(evidence: &[Evidence]) -> Option<(f64, f64)> {
    if evidence.is_empty() {
        return None;
    }
    let precision: f64 = evidence.iter().map(|e| 1.0 / (e.sd * e.sd)).sum();
    let mean = evidence.iter().map(|e| e.value / (e.sd * e.sd)).sum::<f64>() / precision;
    Some((mean, (1.0 / precision).sqrt()))
}

/// Two-sided standard normal quantile for a central coverage.
pub fn z_for_coverage(coverage: f64) -> f64 {
    Normal::standard().inverse_cdf((1.0 + coverage) / 2.0)
}

fn seeded_rng(parts: &[&str]) -> ChaCha8Rng {
    let digest = Sha256::digest(parts.join("\u{1f}").as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn standard_normal(parts: &[&str]) -> f64 {
    StandardNormal.sample(&mut seeded_rng(parts))
}

/// What an agent remembers about one question across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentMemory {
    pub first_point: Option<f64>,
    pub prev_anchor: Option<f64>,
    pub prev_point: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RespondInput<'a> {
    pub master_seed: u64,
    /// Question identity; repeated asks of the same question share noise.
    pub question_key: &'a str,
    pub evidence: &'a [Evidence],
    pub prior_consensus: Option<f64>,
    pub coverage: f64,
    /// Answers are clamped into these bounds.
    pub bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAnswer {
    pub point: f64,
    pub interval: (f64, f64),
    /// The unbiased estimate u_t before anchoring and herding.
    pub unbiased: f64,
}

/// The unbiased estimate u_t for this agent and question.
pub fn unbiased_estimate(agent: &AgentProfile, input: &RespondInput) -> Result<(f64, f64), SimulationError> {
    let (mean, sd) = pool_evidence(input.evidence)
        .ok_or_else(|| SimulationError::NoVisibleEvidence(input.question_key.into()))?;
    let noise = if agent.noise_sd > 0.0 {
        agent.noise_sd
            * standard_normal(&[
                &input.master_seed.to_string(),
                &agent.seed.to_string(),
                input.question_key,
            ])
    } else {
        0.0
    };
    Ok((mean + noise, sd))
}

pub fn agent_respond(
    agent: &AgentProfile,
    memory: &mut AgentMemory,
    input: &RespondInput,
) -> Result<AgentAnswer, SimulationError> {
    let (u, sd) = unbiased_estimate(agent, input)?;
    let lambda = agent.anchor_weight;
    let anchored = match memory.first_point {
        Some(x0) => lambda * x0 + (1.0 - lambda) * u,
        None => u,
    };
    let carried = match (memory.prev_point, memory.prev_anchor) {
        (Some(x), Some(a)) => anchored + (x - a),
        _ => anchored,
    };
    let mut point = match input.prior_consensus {
        Some(c) => carried + agent.herding_strength * (c - carried),
        None => carried,
    };
    if let Some((lo, hi)) = input.bounds {
        point = point.clamp(lo, hi);
    }
    let half = agent.interval_shrink * z_for_coverage(input.coverage) * sd;
    let mut interval = (point - half, point + half);
    if let Some((lo, hi)) = input.bounds {
        interval = (interval.0.max(lo), interval.1.min(hi));
    }
    memory.first_point.get_or_insert(point);
    memory.prev_anchor = Some(anchored);
    memory.prev_point = Some(point);
    Ok(AgentAnswer {
        point,
        interval,
        unbiased: u,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task: Task,
    pub true_values: BTreeMap<String, f64>,
    /// Explicit evidence per parameter, one entry per round.
    #[serde(default)]
    pub evidence: BTreeMap<String, Vec<Evidence>>,
    /// For parameters without explicit evidence: draw one observation per
    /// round around the true value with this sd.
    #[serde(default)]
    pub evidence_sd: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceDatabase>,
    pub rounds: u32,
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    #[serde(default = "yes")]
    pub consensus_visible: bool,
    #[serde(default)]
    pub anonymous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<Pipeline>,
}

fn default_coverage() -> f64 {
    crate::session::DEFAULT_COVERAGE
}

fn yes() -> bool {
    true
}

impl Scenario {
    pub fn new(task: Task, rounds: u32) -> Self {
        Self {
            task,
            true_values: BTreeMap::new(),
            evidence: BTreeMap::new(),
            evidence_sd: BTreeMap::new(),
            reference: None,
            rounds,
            coverage: default_coverage(),
            consensus_visible: true,
            anonymous: false,
            pipeline: None,
        }
    }

    pub fn with_truth(mut self, parameter: &str, value: f64, evidence_sd: f64) -> Self {
        self.true_values.insert(parameter.into(), value);
        self.evidence_sd.insert(parameter.into(), evidence_sd);
        self
    }

    pub fn from_json(doc: &str) -> Result<Self, SimulationError> {
        let s: Scenario = serde_json::from_str(doc)?;
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::InvalidScenario(m));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return bad("coverage must lie in (0, 1)".into());
        }
        self.task.check().map_err(SimulationError::InvalidScenario)?;
        for p in &self.task.parameters {
            if !self.evidence.contains_key(&p.name) && !self.evidence_sd.contains_key(&p.name) {
                return bad(format!("parameter '{}' has no evidence source", p.name));
            }
            if self.evidence_sd.contains_key(&p.name) && !self.true_values.contains_key(&p.name) {
                return bad(format!("parameter '{}' needs a true value to draw evidence", p.name));
            }
        }
        for (name, list) in &self.evidence {
            if list.iter().any(|e| !(e.sd > 0.0)) {
                return bad(format!("evidence for '{name}' needs sd > 0"));
            }
        }
        for (name, sd) in &self.evidence_sd {
            if !(*sd > 0.0) {
                return bad(format!("evidence sd for '{name}' must be positive"));
            }
        }
        Ok(())
    }

    /// Evidence stream for one parameter, explicit or drawn from the seed.
    pub fn evidence_stream(&self, parameter: &str, master_seed: u64) -> Vec<Evidence> {
        if let Some(list) = self.evidence.get(parameter) {
            return list.clone();
        }
        let (Some(truth), Some(sd)) = (self.true_values.get(parameter), self.evidence_sd.get(parameter)) else {
            return Vec::new();
        };
        (0..self.rounds)
            .map(|r| Evidence {
                value: truth
                    + sd * standard_normal(&[&master_seed.to_string(), "evidence", parameter, &r.to_string()]),
                sd: *sd,
            })
            .collect()
    }
}

pub fn load_cohort(doc: &str) -> Result<Vec<AgentProfile>, SimulationError> {
    let cohort: Vec<AgentProfile> = serde_json::from_str(doc)?;
    for a in &cohort {
        a.check()?;
    }
    Ok(cohort)
}

/// Questionnaire feeding consensus and uncertainty analytics, rendered as a
/// line graph, point values and a spreadsheet.
pub fn default_pipeline() -> Pipeline {
    Pipeline {
        modules: vec![
            ModuleInstance::new("mon.questionnaire", "questionnaire"),
            ModuleInstance::new("fb.consensus", "consensus"),
            ModuleInstance::new("fb.uncertainty", "uncertainty"),
            ModuleInstance::new("out.linegraph", "linegraph"),
            ModuleInstance::new("out.pointvalue", "pointvalue"),
            ModuleInstance::new("out.spreadsheet", "spreadsheet"),
        ],
        bindings: vec![
            Binding::new("questionnaire", "scalar_estimate_interval", "consensus"),
            Binding::new("questionnaire", "scalar_estimate_interval", "uncertainty"),
            Binding::new("questionnaire", "timeseries", "uncertainty"),
            Binding::new("consensus", "scalar_estimate_interval", "pointvalue"),
            Binding::new("consensus", "scalar_estimate_interval", "spreadsheet"),
            Binding::new("uncertainty", "timeseries", "linegraph"),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub session_id: String,
    pub events: Vec<SessionEvent>,
    /// Report name → document.
    pub reports: BTreeMap<String, Value>,
    /// Findings from the final analytics pass.
    pub findings: Vec<Finding>,
    /// Agent id → participant id.
    pub participants: BTreeMap<String, String>,
    /// Serialized state of the live session when the run ended.
    #[serde(skip)]
    pub live_snapshot: Vec<u8>,
}

impl SimulationOutput {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_json_line());
            out.push('\n');
        }
        out
    }

    /// Writes `events.jsonl` and one JSON file per report under `reports/`.
    pub fn write_to(&self, dir: &Path) -> Result<std::path::PathBuf, SimulationError> {
        std::fs::create_dir_all(dir.join("reports"))?;
        let log = dir.join("events.jsonl");
        std::fs::write(&log, self.to_jsonl())?;
        for (name, doc) in &self.reports {
            std::fs::write(
                dir.join("reports").join(format!("{name}.json")),
                serde_json::to_string_pretty(doc)?,
            )?;
        }
        Ok(log)
    }
}

fn has_module(pipeline: &Pipeline, descriptor_id: &str) -> bool {
    pipeline.modules.iter().any(|m| m.descriptor_id == descriptor_id)
}

/// Drives a full session with synthetic agents. Identical inputs give
/// byte-identical event logs.
pub fn run_simulation(
    scenario: &Scenario,
    agents: &[AgentProfile],
    catalogue: &Catalogue,
    master_seed: u64,
) -> Result<SimulationOutput, SimulationError> {
    scenario.check()?;
    if agents.is_empty() {
        return Err(SimulationError::InvalidScenario("at least one agent is required".into()));
    }
    let mut ids = BTreeSet::new();
    for a in agents {
        a.check()?;
        if !ids.insert(&a.id) {
            return Err(SimulationError::InvalidScenario(format!("agent id '{}' repeated", a.id)));
        }
    }
    let pipeline = scenario.pipeline.clone().unwrap_or_else(default_pipeline);
    let scenario_digest = hex::encode(Sha256::digest(serde_json::to_vec(scenario)?));
    let session_id = format!("sim-{master_seed}-{}", &scenario_digest[..12]);
    let clock = Arc::new(ManualClock::starting_at_epoch());
    let mut session = ElicitationSession::create_with_id(
        session_id.clone(),
        scenario.task.clone(),
        pipeline.clone(),
        scenario.reference.clone(),
        catalogue,
        clock.clone(),
    )?;
    let step = || clock.advance(Duration::seconds(30));

    let facilitator = session.join("Facilitator", Role::Facilitator, BTreeSet::new())?.id;
    let mut participants = BTreeMap::new();
    for a in agents {
        step();
        let name = a.display_name.clone().unwrap_or_else(|| format!("Agent {}", a.id));
        let p = session.join(name, Role::Expert, BTreeSet::new())?;
        participants.insert(a.id.clone(), p.id);
    }
    if scenario.anonymous {
        apply_forced_anonymity(&mut session, &facilitator)?;
    }

    let params: Vec<_> = scenario.task.parameters.clone();
    let streams: BTreeMap<String, Vec<Evidence>> = params
        .iter()
        .map(|p| (p.name.clone(), scenario.evidence_stream(&p.name, master_seed)))
        .collect();
    let cited: BTreeMap<(String, String), BTreeSet<String>> = agents
        .iter()
        .flat_map(|a| {
            params.iter().map(move |p| {
                let known = scenario
                    .reference
                    .as_ref()
                    .and_then(|db| db.lookup(&p.name))
                    .map(|e| e.categories.clone())
                    .unwrap_or_default();
                let cats = match &a.knowledge_subset {
                    Some(subset) => subset.clone(),
                    None => known,
                };
                ((a.id.clone(), p.name.clone()), cats)
            })
        })
        .collect();

    let mut memory: BTreeMap<(String, String), AgentMemory> = BTreeMap::new();
    let mut last_consensus: BTreeMap<String, f64> = BTreeMap::new();
    let mut reports = BTreeMap::new();

    for round in 0..scenario.rounds {
        let mut prompts = Vec::new();
        for p in &params {
            step();
            let prompt = Prompt::new(scenario.task.id.clone(), p.name.clone(), PromptMode::PointInterval, round)
                .with_coverage(scenario.coverage)
                .with_question(p.name.clone())
                .with_text(format!("Estimate {} ({})", p.name, p.unit));
            let prompt_id = session.issue_prompt(prompt, &facilitator)?;
            let stream = &streams[&p.name];
            let visible = &stream[..stream.len().min(round as usize + 1)];
            let prior = if scenario.consensus_visible {
                last_consensus.get(&p.name).copied()
            } else {
                None
            };
            for a in agents {
                step();
                let mem = memory.entry((a.id.clone(), p.name.clone())).or_default();
                let ans = agent_respond(
                    a,
                    mem,
                    &RespondInput {
                        master_seed,
                        question_key: &p.name,
                        evidence: visible,
                        prior_consensus: prior,
                        coverage: scenario.coverage,
                        bounds: Some((p.lower, p.upper)),
                    },
                )?;
                let cats = cited[&(a.id.clone(), p.name.clone())].iter().cloned();
                session.record_response(
                    Response::new(participants[&a.id].clone(), prompt_id.clone(), ans.point)
                        .with_interval(ans.interval.0, ans.interval.1)
                        .with_categories(cats),
                )?;
            }
            prompts.push((p.name.clone(), prompt_id));
        }
        step();
        session.advance_round(&facilitator)?;

        for (param, prompt_id) in &prompts {
            let report = consensus_from_session(session.state(), prompt_id, ConsensusMethod::Mean)?;
            last_consensus.insert(param.clone(), report.consensus);
            if has_module(&pipeline, "fb.consensus") {
                let doc = serde_json::to_value(&report)?;
                session.record_report("consensus", doc.clone())?;
                reports.insert(format!("consensus-{param}-round{round}"), doc);
            }
            if has_module(&pipeline, "fb.uncertainty") && round > 0 {
                let t = track_uncertainty(session.state(), param)?;
                session.record_report("uncertainty", serde_json::to_value(&t)?)?;
            }
        }
    }

    let mut findings = Vec::new();
    for p in &params {
        if has_module(&pipeline, "fb.uncertainty") {
            let t = track_uncertainty(session.state(), &p.name)?;
            findings.extend(t.findings.iter().cloned());
            reports.insert(format!("uncertainty-{}", p.name), serde_json::to_value(&t)?);
        }
        if has_module(&pipeline, "fb.consistency")
            && scenario
                .reference
                .as_ref()
                .is_some_and(|db| db.lookup(&p.name).is_some())
        {
            let c = consistency_from_session(session.state(), &p.name, ConsistencyConfig::default())?;
            findings.extend(c.findings.iter().cloned());
            reports.insert(format!("consistency-{}", p.name), serde_json::to_value(&c)?);
            session.record_report("consistency", serde_json::to_value(&c)?)?;
        }
    }
    let suggestions = suggest_actions(&findings, &default_rules(), catalogue)?;
    reports.insert("findings".into(), json!(findings));
    reports.insert("suggestions".into(), json!(suggestions));

    let live_snapshot = session.state().snapshot_bytes();
    Ok(SimulationOutput {
        session_id,
        live_snapshot,
        events: session.into_events(),
        reports,
        findings,
        participants,
    })
}
