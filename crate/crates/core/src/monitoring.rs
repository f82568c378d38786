//! Executable monitoring modules: questionnaires drawn from a question
//! library, and meeting transcripts with airtime shares.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{ElicitationSession, Prompt, PromptMode, SessionError, DEFAULT_COVERAGE};

#[derive(Debug, Error)]
pub enum MonitoringError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("question {index}: field '{field}' {reason}")]
    InvalidQuestion {
        index: usize,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate question id '{0}'")]
    DuplicateQuestionId(String),
    #[error("unknown question '{0}'")]
    UnknownQuestion(String),
    #[error("utterance {index} has unknown speaker '{speaker}'")]
    UnknownSpeaker { index: usize, speaker: String },
    #[error("utterance {index} is invalid: {reason}")]
    InvalidUtterance { index: usize, reason: String },
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl MonitoringError {
    pub fn code(&self) -> &'static str {
        match self {
            MonitoringError::Parse { .. } => "parse_error",
            MonitoringError::InvalidQuestion { .. } => "invalid_question",
            MonitoringError::DuplicateQuestionId(_) => "duplicate_question_id",
            MonitoringError::UnknownQuestion(_) => "unknown_question",
            MonitoringError::UnknownSpeaker { .. } => "unknown_speaker",
            MonitoringError::InvalidUtterance { .. } => "invalid_utterance",
            MonitoringError::EmptyTranscript => "empty_transcript",
            MonitoringError::Session(e) => e.code(),
        }
    }
}

fn parse_error(e: serde_json::Error) -> MonitoringError {
    MonitoringError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    /// Facilitator's note on why the question is phrased this way.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub framing_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuestionLibrary {
    pub questions: Vec<Question>,
}

impl QuestionLibrary {
    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Questions carrying `tag`, in library order.
    pub fn tagged<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a Question> {
        self.questions.iter().filter(move |q| q.tags.contains(tag))
    }
}

/// Parses and validates a question library document.
pub fn load_question_library(doc: &str) -> Result<QuestionLibrary, MonitoringError> {
    let mut lib: QuestionLibrary = serde_json::from_str(doc).map_err(parse_error)?;
    let mut seen = BTreeSet::new();
    for (index, q) in lib.questions.iter_mut().enumerate() {
        let invalid = |field, reason: &str| MonitoringError::InvalidQuestion {
            index,
            field,
            reason: reason.into(),
        };
        if q.id.trim().is_empty() {
            return Err(invalid("id", "is empty"));
        }
        if q.text.trim().is_empty() {
            return Err(invalid("text", "is empty"));
        }
        match (q.mode, q.coverage) {
            (PromptMode::PointInterval, None) => q.coverage = Some(DEFAULT_COVERAGE),
            (PromptMode::PointInterval, Some(c)) if !(c > 0.0 && c < 1.0) => {
                return Err(invalid("coverage", "must lie in (0, 1)"))
            }
            (PromptMode::PointInterval, Some(_)) | (_, None) => {}
            (_, Some(_)) => return Err(invalid("coverage", "is only allowed for point_interval")),
        }
        if !seen.insert(q.id.clone()) {
            return Err(MonitoringError::DuplicateQuestionId(q.id.clone()));
        }
    }
    Ok(lib)
}

/// Issues one prompt per question in the current round. Either every
/// prompt is issued or none is.
pub fn administer_questionnaire(
    session: &mut ElicitationSession,
    library: &QuestionLibrary,
    question_ids: &[&str],
    task_id: &str,
    parameter_name: &str,
    issuer: &str,
) -> Result<Vec<String>, MonitoringError> {
    if question_ids.is_empty() {
        return Ok(Vec::new());
    }
    session.require_facilitator(issuer)?;
    let round = session.state().round;
    let mut prompts = Vec::with_capacity(question_ids.len());
    for id in question_ids {
        let q = library
            .get(id)
            .ok_or_else(|| MonitoringError::UnknownQuestion((*id).into()))?;
        let mut p = Prompt::new(task_id, parameter_name, q.mode, round)
            .with_text(q.text.clone())
            .with_question(q.id.clone());
        p.coverage = q.coverage;
        session.check_prompt_gates(&p)?;
        session.normalize_prompt(&mut p)?;
        prompts.push(p);
    }
    prompts
        .into_iter()
        .map(|p| session.issue_prompt(p, issuer).map_err(Into::into))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptUtterance {
    pub speaker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_s: Option<f64>,
    /// Filled from `text` when omitted.
    #[serde(default)]
    pub word_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl TranscriptUtterance {
    pub fn spoken(speaker_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            speaker_id: speaker_id.into(),
            start_s: None,
            end_s: None,
            word_count: token_count(&text),
            text: Some(text),
        }
    }

    pub fn timed(speaker_id: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            start_s: Some(start_s),
            end_s: Some(end_s),
            word_count: 0,
            text: None,
        }
    }

    pub fn words(speaker_id: impl Into<String>, word_count: u64) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            start_s: None,
            end_s: None,
            word_count,
            text: None,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        let text = text.into();
        self.word_count = token_count(&text);
        self.text = Some(text);
        self
    }

    pub fn duration(&self) -> Option<f64> {
        Some(self.end_s? - self.start_s?)
    }
}

pub fn token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Serialized as a bare JSON array of utterances.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    pub utterances: Vec<TranscriptUtterance>,
}

impl Transcript {
    pub fn from_json(doc: &str) -> Result<Self, MonitoringError> {
        let mut t: Transcript = serde_json::from_str(doc).map_err(parse_error)?;
        t.normalize()?;
        Ok(t)
    }

    /// Checks timestamps and fills or checks word counts against text.
    pub fn normalize(&mut self) -> Result<(), MonitoringError> {
        for (index, u) in self.utterances.iter_mut().enumerate() {
            let invalid = |reason: String| MonitoringError::InvalidUtterance { index, reason };
            match (u.start_s, u.end_s) {
                (Some(s), Some(e)) => {
                    if !(s.is_finite() && e.is_finite() && e > s) {
                        return Err(invalid(format!("end_s {e} must exceed start_s {s}")));
                    }
                }
                (None, None) => {}
                _ => return Err(invalid("start_s and end_s must be given together".into())),
            }
            if let Some(text) = &u.text {
                let n = token_count(text);
                if u.word_count == 0 {
                    u.word_count = n;
                } else if u.word_count != n {
                    return Err(invalid(format!(
                        "word_count {} disagrees with {n} tokens of text",
                        u.word_count
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.utterances.iter().map(|u| u.speaker_id.as_str()).collect()
    }

    pub fn words_by_speaker(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for u in &self.utterances {
            *out.entry(u.speaker_id.clone()).or_insert(0) += u.word_count;
        }
        out
    }
}

/// Validates and stores a transcript as a `transcript` report; returns its id.
pub fn ingest_transcript(
    session: &mut ElicitationSession,
    utterances: Vec<TranscriptUtterance>,
) -> Result<String, MonitoringError> {
    let mut transcript = Transcript { utterances };
    transcript.normalize()?;
    for (index, u) in transcript.utterances.iter().enumerate() {
        if session.state().participant(&u.speaker_id).is_none() {
            return Err(MonitoringError::UnknownSpeaker {
                index,
                speaker: u.speaker_id.clone(),
            });
        }
    }
    let doc = serde_json::to_value(&transcript).expect("transcript serializes");
    Ok(session.record_report("transcript", doc)?)
}

/// Share of discussion per speaker, by duration when every utterance is
/// timed and by word count otherwise.
pub fn compute_airtime(transcript: &Transcript) -> Result<BTreeMap<String, f64>, MonitoringError> {
    if transcript.utterances.is_empty() {
        return Err(MonitoringError::EmptyTranscript);
    }
    let timed = transcript.utterances.iter().all(|u| u.duration().is_some());
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for u in &transcript.utterances {
        let amount = if timed {
            u.duration().unwrap()
        } else {
            u.word_count as f64
        };
        *totals.entry(u.speaker_id.clone()).or_insert(0.0) += amount;
    }
    let sum: f64 = totals.values().sum();
    if sum <= 0.0 {
        return Err(MonitoringError::EmptyTranscript);
    }
    Ok(totals.into_iter().map(|(k, v)| (k, v / sum)).collect())
}
