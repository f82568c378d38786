//! The four feedback analytics: consensus vs individual, uncertainty over
//! rounds, individual influence, and consistency with an external reference.
//!
//! Each analytic has a pure core working on plain inputs plus a thin
//! `*_from_session` adapter that pulls those inputs out of replayed state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitoring::{compute_airtime, Transcript};
use crate::session::{Prompt, PromptMode, Response, SessionState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingKind {
    Herding,
    Overconfidence,
    AbruptChange,
    InfluenceMismatch,
    ExternalInconsistency,
    HighDisagreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warn,
    Alert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    /// Participant id, or `"group"`.
    pub subject: String,
    pub severity: Severity,
    pub evidence: BTreeMap<String, f64>,
    pub round_index: u32,
}

pub const GROUP: &str = "group";

impl Finding {
    pub fn new(kind: FindingKind, subject: impl Into<String>, severity: Severity, round_index: u32) -> Self {
        Self {
            kind,
            subject: subject.into(),
            severity,
            evidence: BTreeMap::new(),
            round_index,
        }
    }

    pub fn with(mut self, metric: &str, value: f64) -> Self {
        self.evidence.insert(metric.into(), value);
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("no responses to analyse")]
    NoResponses,
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("parameter '{0}' has no closed round with responses")]
    InsufficientRounds(String),
    #[error("rating matrix contains a self-rating by '{0}'")]
    SelfRatingPresent(String),
    #[error("influence analysis needs airtime or ratings")]
    EmptyInput,
    #[error("rating {value} by '{rater}' is outside 1..=5")]
    RatingOutOfScale { rater: String, value: f64 },
    #[error("reference database has no entry for '{0}'")]
    ReferenceMiss(String),
    #[error("unknown prompt '{0}'")]
    UnknownPrompt(String),
    #[error("no usable transcript available")]
    NoTranscript,
}

impl FeedbackError {
    pub fn code(&self) -> &'static str {
        match self {
            FeedbackError::NoResponses => "no_responses",
            FeedbackError::UnknownParameter(_) => "unknown_parameter",
            FeedbackError::InsufficientRounds(_) => "insufficient_rounds",
            FeedbackError::SelfRatingPresent(_) => "self_rating_present",
            FeedbackError::EmptyInput => "empty_input",
            FeedbackError::RatingOutOfScale { .. } => "rating_out_of_scale",
            FeedbackError::ReferenceMiss(_) => "reference_miss",
            FeedbackError::UnknownPrompt(_) => "unknown_prompt",
            FeedbackError::NoTranscript => "no_transcript",
        }
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Population standard deviation.
pub(crate) fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Intersection length over union length; 0 for disjoint intervals.
pub fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        // both degenerate
        if a == b {
            1.0
        } else {
            0.0
        }
    } else {
        inter / union
    }
}

/// Jaccard index of two sets; `None` when both are empty.
pub fn set_jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Option<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(b).count() as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMethod {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub prompt_id: String,
    pub parameter_name: String,
    pub round_index: u32,
    pub coverage: Option<f64>,
    pub consensus: f64,
    pub method: ConsensusMethod,
    pub spread: f64,
    pub points: BTreeMap<String, f64>,
    pub intervals: BTreeMap<String, (f64, f64)>,
    pub deviations: BTreeMap<String, f64>,
    /// Only experts that gave an interval appear here.
    pub overlap_matrix: BTreeMap<String, BTreeMap<String, f64>>,
    /// Responses given while holding the devil's advocate role.
    #[serde(default)]
    pub advocacy: BTreeSet<String>,
    pub findings: Vec<Finding>,
}

/// Compares each response with the others and with the group aggregate.
pub fn consensus_vs_individual(
    prompt: &Prompt,
    responses: &[Response],
    method: ConsensusMethod,
) -> Result<ConsensusReport, FeedbackError> {
    if responses.is_empty() {
        return Err(FeedbackError::NoResponses);
    }
    let points: BTreeMap<String, f64> = responses
        .iter()
        .map(|r| (r.participant_id.clone(), r.point))
        .collect();
    let xs: Vec<f64> = points.values().copied().collect();
    let consensus = match method {
        ConsensusMethod::Mean => mean(&xs),
        ConsensusMethod::Median => median(&xs),
    };
    let spread = pop_std(&xs);
    let deviations: BTreeMap<String, f64> = points
        .iter()
        .map(|(id, x)| (id.clone(), (x - consensus).abs()))
        .collect();
    let intervals: BTreeMap<String, (f64, f64)> = responses
        .iter()
        .filter_map(|r| r.interval.map(|iv| (r.participant_id.clone(), iv)))
        .collect();
    let mut overlap_matrix = BTreeMap::new();
    for (a, ia) in &intervals {
        let row: BTreeMap<String, f64> = intervals
            .iter()
            .map(|(b, ib)| (b.clone(), if a == b { 1.0 } else { interval_overlap(*ia, *ib) }))
            .collect();
        overlap_matrix.insert(a.clone(), row);
    }

    let max_dev = deviations.values().copied().fold(0.0, f64::max);
    let min_overlap = overlap_matrix
        .values()
        .flat_map(|row| row.values().copied())
        .fold(f64::INFINITY, f64::min);
    let mut findings = Vec::new();
    if max_dev > 2.0 * spread || min_overlap == 0.0 {
        let mut f = Finding::new(
            FindingKind::HighDisagreement,
            GROUP,
            Severity::Warn,
            prompt.round_index,
        )
        .with("max_deviation", max_dev)
        .with("spread", spread);
        if min_overlap.is_finite() {
            f = f.with("min_overlap", min_overlap);
        }
        findings.push(f);
    }

    Ok(ConsensusReport {
        prompt_id: prompt.id.clone(),
        parameter_name: prompt.parameter_name.clone(),
        round_index: prompt.round_index,
        coverage: prompt.effective_coverage(),
        consensus,
        method,
        spread,
        points,
        intervals,
        deviations,
        overlap_matrix,
        advocacy: BTreeSet::new(),
        findings,
    })
}

pub fn consensus_from_session(
    state: &SessionState,
    prompt_id: &str,
    method: ConsensusMethod,
) -> Result<ConsensusReport, FeedbackError> {
    let prompt = state
        .prompt(prompt_id)
        .ok_or_else(|| FeedbackError::UnknownPrompt(prompt_id.into()))?;
    let entries = state.response_entries(prompt_id);
    let responses: Vec<Response> = entries.iter().map(|e| e.response.clone()).collect();
    let mut report = consensus_vs_individual(prompt, &responses, method)?;
    report.advocacy = entries
        .iter()
        .filter(|e| e.advocacy)
        .map(|e| e.response.participant_id.clone())
        .collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub round: u32,
    pub point: f64,
    pub interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPoint {
    pub round: u32,
    pub n: usize,
    pub consensus: f64,
    /// Population standard deviation of the round's points.
    pub spread: f64,
    /// Mean interval half-width over experts that gave one.
    pub mean_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdingPoint {
    pub round: u32,
    /// `None` when no expert had a nonzero distance to the prior consensus.
    pub index: Option<f64>,
    pub eligible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTimeline {
    pub parameter_name: String,
    pub coverage: Option<f64>,
    pub experts: BTreeMap<String, Vec<TimelinePoint>>,
    pub group: Vec<GroupPoint>,
    pub herding: Vec<HerdingPoint>,
    pub findings: Vec<Finding>,
}

impl UncertaintyTimeline {
    pub fn herding_index(&self, round: u32) -> Option<f64> {
        self.herding
            .iter()
            .find(|h| h.round == round)
            .and_then(|h| h.index)
    }

    /// Mean of the defined per-round herding indices.
    pub fn mean_herding_index(&self) -> Option<f64> {
        let xs: Vec<f64> = self.herding.iter().filter_map(|h| h.index).collect();
        (!xs.is_empty()).then(|| mean(&xs))
    }
}

pub const HERDING_THRESHOLD: f64 = 0.5;
pub const ABRUPT_CHANGE_MULTIPLIER: f64 = 2.0;

/// Share of the gap to the prior consensus an expert closed this round,
/// clipped to [0, 1]. `None` when the expert already sat on the consensus.
pub fn herding_score(prev_point: f64, prev_consensus: f64, point: f64) -> Option<f64> {
    let gap = prev_consensus - prev_point;
    let scale = prev_point.abs().max(prev_consensus.abs()).max(1.0);
    if gap.abs() <= 1e-12 * scale {
        return None;
    }
    Some(((point - prev_point) / gap).clamp(0.0, 1.0))
}

/// Builds the timeline from per-round responses. Rounds must be ascending
/// and each response belongs to the round it is listed under.
pub fn uncertainty_timeline(
    parameter_name: &str,
    coverage: Option<f64>,
    rounds: &[(u32, Vec<Response>)],
) -> Result<UncertaintyTimeline, FeedbackError> {
    let rounds: Vec<&(u32, Vec<Response>)> = rounds.iter().filter(|(_, r)| !r.is_empty()).collect();
    if rounds.is_empty() {
        return Err(FeedbackError::InsufficientRounds(parameter_name.into()));
    }
    let mut experts: BTreeMap<String, Vec<TimelinePoint>> = BTreeMap::new();
    let mut group = Vec::new();
    let mut by_round: Vec<(u32, BTreeMap<&str, &Response>)> = Vec::new();
    for (round, responses) in &rounds {
        let map: BTreeMap<&str, &Response> = responses
            .iter()
            .map(|r| (r.participant_id.as_str(), r))
            .collect();
        let xs: Vec<f64> = map.values().map(|r| r.point).collect();
        let widths: Vec<f64> = map.values().filter_map(|r| r.half_width()).collect();
        group.push(GroupPoint {
            round: *round,
            n: xs.len(),
            consensus: mean(&xs),
            spread: pop_std(&xs),
            mean_half_width: (!widths.is_empty()).then(|| mean(&widths)),
        });
        for r in map.values() {
            experts
                .entry(r.participant_id.clone())
                .or_default()
                .push(TimelinePoint {
                    round: *round,
                    point: r.point,
                    interval: r.interval,
                });
        }
        by_round.push((*round, map));
    }

    let mut herding = Vec::new();
    let mut findings = Vec::new();
    for t in 1..by_round.len() {
        let (round, ref current) = by_round[t];
        let (prev_round, ref previous) = by_round[t - 1];
        if prev_round + 1 != round {
            continue;
        }
        let prev_consensus = group[t - 1].consensus;
        let mut scores = Vec::new();
        for (id, r) in current {
            let Some(prev) = previous.get(id) else { continue };
            if let Some(s) = herding_score(prev.point, prev_consensus, r.point) {
                scores.push(s);
            }
            if let Some(w) = prev.half_width() {
                let moved = (r.point - prev.point).abs();
                if moved > ABRUPT_CHANGE_MULTIPLIER * w {
                    findings.push(
                        Finding::new(FindingKind::AbruptChange, *id, Severity::Warn, round)
                            .with("change", moved)
                            .with("prior_half_width", w),
                    );
                }
            }
        }
        herding.push(HerdingPoint {
            round,
            index: (!scores.is_empty()).then(|| mean(&scores)),
            eligible: scores.len(),
        });
    }
    for pair in herding.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.round + 1 != b.round {
            continue;
        }
        if let (Some(ha), Some(hb)) = (a.index, b.index) {
            if ha >= HERDING_THRESHOLD && hb >= HERDING_THRESHOLD {
                findings.push(
                    Finding::new(FindingKind::Herding, GROUP, Severity::Alert, b.round)
                        .with("herding_index", hb)
                        .with("previous_herding_index", ha),
                );
            }
        }
    }
    findings.sort_by_key(|f| (f.round_index, f.kind, f.subject.clone()));

    Ok(UncertaintyTimeline {
        parameter_name: parameter_name.into(),
        coverage,
        experts,
        group,
        herding,
        findings,
    })
}

/// Rounds of closed, numeric, first-issue prompts for one parameter. Within
/// a round an expert's answer to the later prompt wins.
pub fn rounds_for_parameter(state: &SessionState, parameter_name: &str) -> Vec<(u32, Vec<Response>)> {
    let mut rounds: BTreeMap<u32, BTreeMap<String, Response>> = BTreeMap::new();
    for ps in state.prompts_in_order() {
        let p = &ps.prompt;
        if ps.open
            || p.parameter_name != parameter_name
            || !p.mode.is_numeric_estimate()
            || p.reprompt_of.is_some()
        {
            continue;
        }
        let slot = rounds.entry(p.round_index).or_default();
        for r in state.responses_for(&p.id) {
            slot.insert(r.participant_id.clone(), r.clone());
        }
    }
    rounds
        .into_iter()
        .map(|(k, v)| (k, v.into_values().collect()))
        .collect()
}

pub fn track_uncertainty(
    state: &SessionState,
    parameter_name: &str,
) -> Result<UncertaintyTimeline, FeedbackError> {
    let known = state
        .tasks
        .values()
        .any(|t| t.parameter(parameter_name).is_some());
    if !known {
        return Err(FeedbackError::UnknownParameter(parameter_name.into()));
    }
    let coverage = state
        .prompts_in_order()
        .find(|p| p.prompt.parameter_name == parameter_name)
        .and_then(|p| p.prompt.effective_coverage());
    uncertainty_timeline(parameter_name, coverage, &rounds_for_parameter(state, parameter_name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRating {
    pub rater: String,
    pub ratee: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub airtime_share: BTreeMap<String, f64>,
    pub expertise_score: BTreeMap<String, Option<f64>>,
    pub airtime_rank: BTreeMap<String, usize>,
    pub expertise_rank: BTreeMap<String, usize>,
    pub findings: Vec<Finding>,
}

fn rank_desc(values: &BTreeMap<String, Option<f64>>) -> BTreeMap<String, usize> {
    let mut order: Vec<(&String, Option<f64>)> = values.iter().map(|(k, v)| (k, *v)).collect();
    // stable sort keeps participant-id order among ties; missing values last
    order.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    order
        .into_iter()
        .enumerate()
        .map(|(i, (k, _))| (k.clone(), i + 1))
        .collect()
}

pub const MISMATCH_RANK_GAP: usize = 2;

/// Relates discussion share to peer-rated expertise.
pub fn influence_report(
    airtime: &BTreeMap<String, f64>,
    ratings: &[PeerRating],
) -> Result<InfluenceReport, FeedbackError> {
    if airtime.is_empty() && ratings.is_empty() {
        return Err(FeedbackError::EmptyInput);
    }
    let mut received: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in ratings {
        if r.rater == r.ratee {
            return Err(FeedbackError::SelfRatingPresent(r.rater.clone()));
        }
        if !(1.0..=5.0).contains(&r.value) {
            return Err(FeedbackError::RatingOutOfScale {
                rater: r.rater.clone(),
                value: r.value,
            });
        }
        received.entry(r.ratee.clone()).or_default().push(r.value);
    }
    let people: BTreeSet<String> = airtime.keys().chain(received.keys()).cloned().collect();
    let airtime_share: BTreeMap<String, f64> = people
        .iter()
        .map(|p| (p.clone(), airtime.get(p).copied().unwrap_or(0.0)))
        .collect();
    let expertise_score: BTreeMap<String, Option<f64>> = people
        .iter()
        .map(|p| (p.clone(), received.get(p).map(|v| mean(v))))
        .collect();
    let airtime_rank = rank_desc(
        &airtime_share
            .iter()
            .map(|(k, v)| (k.clone(), Some(*v)))
            .collect(),
    );
    let expertise_rank = rank_desc(&expertise_score);
    let findings = people
        .iter()
        .filter(|p| expertise_rank[*p] >= airtime_rank[*p] + MISMATCH_RANK_GAP)
        .map(|p| {
            let mut f = Finding::new(FindingKind::InfluenceMismatch, p.clone(), Severity::Warn, 0)
                .with("airtime_rank", airtime_rank[p] as f64)
                .with("expertise_rank", expertise_rank[p] as f64)
                .with("airtime_share", airtime_share[p]);
            if let Some(s) = expertise_score[p] {
                f = f.with("expertise_score", s);
            }
            f
        })
        .collect();
    Ok(InfluenceReport {
        airtime_share,
        expertise_score,
        airtime_rank,
        expertise_rank,
        findings,
    })
}

/// Ratings are responses to prompts that carry a `rates` target.
pub fn peer_ratings(state: &SessionState) -> Vec<PeerRating> {
    state
        .prompts_in_order()
        .filter_map(|ps| ps.prompt.rates.as_ref().map(|t| (&ps.prompt.id, t)))
        .flat_map(|(pid, ratee)| {
            state.responses_for(pid).into_iter().map(move |r| PeerRating {
                rater: r.participant_id.clone(),
                ratee: ratee.clone(),
                value: r.point,
            })
        })
        .collect()
}

/// Uses the most recent transcript for airtime.
pub fn influence_from_session(state: &SessionState) -> Result<InfluenceReport, FeedbackError> {
    let transcript = state
        .transcripts()
        .max_by_key(|(_, r)| r.seq)
        .map(|(_, r)| serde_json::from_value::<Transcript>(r.document.clone()))
        .transpose()
        .map_err(|_| FeedbackError::NoTranscript)?;
    let airtime = match transcript {
        Some(t) if !t.utterances.is_empty() => {
            compute_airtime(&t).map_err(|_| FeedbackError::NoTranscript)?
        }
        _ => BTreeMap::new(),
    };
    let mut report = influence_report(&airtime, &peer_ratings(state))?;
    for f in &mut report.findings {
        f.round_index = state.round;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Probability,
    Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub value: f64,
    #[serde(default)]
    pub categories: BTreeSet<String>,
    #[serde(default)]
    pub source: String,
    /// Defaults to probability when the value lies in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ReferenceKind>,
    /// Phrase used in statements, e.g. "how likely this fault is to occur".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ReferenceEntry {
    pub fn effective_kind(&self) -> ReferenceKind {
        self.kind.unwrap_or(if (0.0..=1.0).contains(&self.value) {
            ReferenceKind::Probability
        } else {
            ReferenceKind::Quantity
        })
    }
}

/// Parameter name → reference entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceDatabase(pub BTreeMap<String, ReferenceEntry>);

impl ReferenceDatabase {
    pub fn from_json(doc: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(doc)
    }

    pub fn lookup(&self, parameter: &str) -> Option<&ReferenceEntry> {
        self.0.get(parameter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    /// Absolute for probabilities, relative to |reference| for quantities.
    pub threshold: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { threshold: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEstimate {
    pub participant_id: String,
    pub estimate: f64,
    #[serde(default)]
    pub cited: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConsistency {
    pub estimate: f64,
    pub reference: f64,
    pub discrepancy: f64,
    pub coverage: Option<f64>,
    pub cited: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub parameter_name: String,
    pub reference_value: f64,
    pub reference_kind: ReferenceKind,
    pub source: String,
    pub description: Option<String>,
    pub experts: BTreeMap<String, ExpertConsistency>,
    /// Jaccard of the union of cited categories against the database.
    pub group_coverage: Option<f64>,
    /// Pairwise Jaccard between experts' cited categories.
    pub knowledge_overlap: BTreeMap<String, BTreeMap<String, f64>>,
    pub findings: Vec<Finding>,
}

pub fn external_consistency(
    parameter_name: &str,
    estimates: &[ExpertEstimate],
    db: &ReferenceDatabase,
    config: ConsistencyConfig,
) -> Result<ConsistencyReport, FeedbackError> {
    let entry = db
        .lookup(parameter_name)
        .ok_or_else(|| FeedbackError::ReferenceMiss(parameter_name.into()))?;
    let kind = entry.effective_kind();
    let mut experts = BTreeMap::new();
    let mut findings = Vec::new();
    for e in estimates {
        let discrepancy = (e.estimate - entry.value).abs();
        let scaled = match kind {
            ReferenceKind::Probability => discrepancy,
            ReferenceKind::Quantity if entry.value != 0.0 => discrepancy / entry.value.abs(),
            ReferenceKind::Quantity => discrepancy,
        };
        let coverage = set_jaccard(&e.cited, &entry.categories);
        if scaled > config.threshold {
            let mut f = Finding::new(
                FindingKind::ExternalInconsistency,
                e.participant_id.clone(),
                Severity::Warn,
                0,
            )
            .with("estimate", e.estimate)
            .with("reference", entry.value)
            .with("discrepancy", discrepancy);
            if let Some(c) = coverage {
                f = f.with("coverage", c);
            }
            findings.push(f);
        }
        experts.insert(
            e.participant_id.clone(),
            ExpertConsistency {
                estimate: e.estimate,
                reference: entry.value,
                discrepancy,
                coverage,
                cited: e.cited.clone(),
            },
        );
    }
    let all_cited: BTreeSet<String> = estimates.iter().flat_map(|e| e.cited.iter().cloned()).collect();
    let mut knowledge_overlap = BTreeMap::new();
    for a in estimates {
        let row: BTreeMap<String, f64> = estimates
            .iter()
            .filter(|b| b.participant_id != a.participant_id)
            .filter_map(|b| set_jaccard(&a.cited, &b.cited).map(|j| (b.participant_id.clone(), j)))
            .collect();
        knowledge_overlap.insert(a.participant_id.clone(), row);
    }
    Ok(ConsistencyReport {
        parameter_name: parameter_name.into(),
        reference_value: entry.value,
        reference_kind: kind,
        source: entry.source.clone(),
        description: entry.description.clone(),
        experts,
        group_coverage: set_jaccard(&all_cited, &entry.categories),
        knowledge_overlap,
        findings,
    })
}

/// Latest numeric answer per expert for the parameter, plus every category
/// the expert cited anywhere in the session.
pub fn estimates_from_session(state: &SessionState, parameter_name: &str) -> Vec<ExpertEstimate> {
    let mut latest: BTreeMap<String, f64> = BTreeMap::new();
    let mut cited: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for ps in state.prompts_in_order() {
        for r in state.responses_for(&ps.prompt.id) {
            cited
                .entry(r.participant_id.clone())
                .or_default()
                .extend(r.categories.iter().cloned());
            if ps.prompt.parameter_name == parameter_name
                && ps.prompt.mode.is_numeric_estimate()
                && ps.prompt.rates.is_none()
            {
                latest.insert(r.participant_id.clone(), r.point);
            }
        }
    }
    latest
        .into_iter()
        .map(|(id, estimate)| ExpertEstimate {
            cited: cited.remove(&id).unwrap_or_default(),
            participant_id: id,
            estimate,
        })
        .collect()
}

pub fn consistency_from_session(
    state: &SessionState,
    parameter_name: &str,
    config: ConsistencyConfig,
) -> Result<ConsistencyReport, FeedbackError> {
    let db = state
        .reference
        .as_ref()
        .ok_or_else(|| FeedbackError::ReferenceMiss(parameter_name.into()))?;
    let mut report =
        external_consistency(parameter_name, &estimates_from_session(state, parameter_name), db, config)?;
    for f in &mut report.findings {
        f.round_index = state.round;
    }
    Ok(report)
}

/// Categorical prompts carry answers in `Response::categories`.
pub fn is_category_prompt(prompt: &Prompt) -> bool {
    prompt.mode == PromptMode::Categorical
}
