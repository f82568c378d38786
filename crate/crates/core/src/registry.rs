//! Module catalogue and pipeline validation.
//!
//! Every monitoring, output, feedback and action module is described by a
//! [`ModuleDescriptor`]. Descriptors declare the data channels they consume
//! and produce, which is what makes a [`Pipeline`] checkable: feedback
//! modules must be fed by monitoring modules, and output modules must be able
//! to render whatever is bound into them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_CATALOGUE: &str = include_str!("../data/catalogue.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Monitoring,
    Output,
    Feedback,
    Action,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [
        ModuleKind::Monitoring,
        ModuleKind::Output,
        ModuleKind::Feedback,
        ModuleKind::Action,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    ScalarEstimateInterval,
    CategoricalAnswer,
    LikertAnswer,
    FreeText,
    Transcript,
    ExpertiseRating,
    Timeseries,
    ReferenceLookup,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataChannel {
    pub name: String,
    pub payload_kind: PayloadKind,
}

impl DataChannel {
    pub fn new(name: impl Into<String>, payload_kind: PayloadKind) -> Self {
        Self {
            name: name.into(),
            payload_kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    Facilitator,
    Expert,
    Computer,
    ExternalDatabase,
    RecordingEquipment,
    TimeAllowance,
    Initiator,
    ProblemOwner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSubkind {
    Training,
    Tool,
}

/// One catalogue entry.
///
/// `executable` is false for modules that exist only as descriptors (video
/// and audio capture, interviews, 3D graphics, training courses).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub id: String,
    pub kind: ModuleKind,
    pub title: String,
    pub description: String,
    pub requirements: BTreeSet<Requirement>,
    pub consumes: Vec<DataChannel>,
    pub produces: Vec<DataChannel>,
    pub action_subkind: Option<ActionSubkind>,
    pub executable: bool,
}

impl ModuleDescriptor {
    /// Checks the descriptor-local invariants and names the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id must be nonempty".into());
        }
        match (self.kind, self.action_subkind) {
            (ModuleKind::Action, None) => {
                return Err("action descriptors require action_subkind".into())
            }
            (kind, Some(_)) if kind != ModuleKind::Action => {
                return Err("action_subkind is only allowed on action descriptors".into())
            }
            _ => {}
        }
        if self.kind == ModuleKind::Monitoring && !self.consumes.is_empty() {
            return Err("monitoring descriptors must not consume channels".into());
        }
        if self.kind == ModuleKind::Output && !self.produces.is_empty() {
            return Err("output descriptors must not produce channels".into());
        }
        for (side, list) in [("consumes", &self.consumes), ("produces", &self.produces)] {
            let mut seen = BTreeSet::new();
            for ch in list {
                if ch.name.trim().is_empty() {
                    return Err(format!("{side} contains a channel with an empty name"));
                }
                if !seen.insert(ch.name.as_str()) {
                    return Err(format!("{side} lists channel '{}' twice", ch.name));
                }
            }
        }
        Ok(())
    }

    pub fn produces_channel(&self, name: &str) -> Option<&DataChannel> {
        self.produces.iter().find(|c| c.name == name)
    }

    pub fn consumes_channel(&self, name: &str) -> Option<&DataChannel> {
        self.consumes.iter().find(|c| c.name == name)
    }

    pub fn accepts_payload(&self, kind: PayloadKind) -> bool {
        self.consumes.iter().any(|c| c.payload_kind == kind)
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("module id '{0}' is already registered")]
    DuplicateId(String),
    #[error("malformed descriptor '{id}': {violation}")]
    MalformedDescriptor { id: String, violation: String },
    #[error("unknown module descriptor '{0}'")]
    UnknownDescriptor(String),
    #[error("kind misuse in binding {producer} -[{channel}]-> {consumer}: {reason}")]
    KindMisuse {
        producer: String,
        channel: String,
        consumer: String,
        reason: String,
    },
    #[error("malformed pipeline: {0}")]
    MalformedPipeline(String),
    #[error("invalid JSON document: {0}")]
    Json(#[from] serde_json::Error),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::DuplicateId(_) => "duplicate_id",
            RegistryError::MalformedDescriptor { .. } => "malformed_descriptor",
            RegistryError::UnknownDescriptor(_) => "unknown_descriptor_id",
            RegistryError::KindMisuse { .. } => "kind_misuse",
            RegistryError::MalformedPipeline(_) => "malformed_pipeline",
            RegistryError::Json(_) => "parse_error",
        }
    }
}

/// The 33 built-in descriptors, in catalogue-file order.
pub fn builtin_catalogue() -> Vec<ModuleDescriptor> {
    serde_json::from_str(BUILTIN_CATALOGUE).expect("bundled catalogue.json is valid")
}

/// Raw bytes of the bundled `catalogue.json`.
pub fn builtin_catalogue_json() -> &'static str {
    BUILTIN_CATALOGUE
}

/// Descriptor store. Registration is `&mut`, lookups are `&`, so a catalogue
/// behind an `Arc` is read-only for the rest of the process.
#[derive(Debug, Clone, Default)]
pub struct Catalogue {
    descriptors: Vec<ModuleDescriptor>,
    index: HashMap<String, usize>,
    channels: HashMap<String, PayloadKind>,
}

impl Catalogue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        Self::from_descriptors(builtin_catalogue()).expect("bundled catalogue is consistent")
    }

    pub fn from_descriptors(
        descriptors: impl IntoIterator<Item = ModuleDescriptor>,
    ) -> Result<Self, RegistryError> {
        let mut cat = Self::new();
        for d in descriptors {
            cat.register(d)?;
        }
        Ok(cat)
    }

    pub fn from_json(doc: &str) -> Result<Self, RegistryError> {
        let descriptors: Vec<ModuleDescriptor> = serde_json::from_str(doc)?;
        Self::from_descriptors(descriptors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.descriptors).expect("descriptors serialize")
    }

    pub fn register(&mut self, descriptor: ModuleDescriptor) -> Result<String, RegistryError> {
        if self.index.contains_key(&descriptor.id) {
            return Err(RegistryError::DuplicateId(descriptor.id));
        }
        let malformed = |violation: String| RegistryError::MalformedDescriptor {
            id: descriptor.id.clone(),
            violation,
        };
        descriptor.check().map_err(malformed)?;
        // channel names are global: one name, one payload kind
        let mut new_channels = Vec::new();
        for ch in descriptor.consumes.iter().chain(&descriptor.produces) {
            let known = self
                .channels
                .get(&ch.name)
                .copied()
                .or_else(|| {
                    new_channels
                        .iter()
                        .find(|(n, _)| n == &ch.name)
                        .map(|(_, k)| *k)
                });
            match known {
                Some(k) if k != ch.payload_kind => {
                    return Err(malformed(format!(
                        "channel '{}' is already declared with payload kind {:?}",
                        ch.name, k
                    )))
                }
                Some(_) => {}
                None => new_channels.push((ch.name.clone(), ch.payload_kind)),
            }
        }
        self.channels.extend(new_channels);
        let id = descriptor.id.clone();
        self.index.insert(id.clone(), self.descriptors.len());
        self.descriptors.push(descriptor);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<&ModuleDescriptor> {
        self.index.get(id).map(|&i| &self.descriptors[i])
    }

    pub fn descriptors(&self) -> &[ModuleDescriptor] {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn channel_kind(&self, name: &str) -> Option<PayloadKind> {
        self.channels.get(name).copied()
    }

    pub fn count_by_kind(&self) -> BTreeMap<ModuleKind, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.descriptors {
            *counts.entry(d.kind).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleInstance {
    pub descriptor_id: String,
    pub label: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl ModuleInstance {
    pub fn new(descriptor_id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            descriptor_id: descriptor_id.into(),
            label: label.into(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub producer: String,
    pub channel: String,
    pub consumer: String,
}

impl Binding {
    pub fn new(
        producer: impl Into<String>,
        channel: impl Into<String>,
        consumer: impl Into<String>,
    ) -> Self {
        Self {
            producer: producer.into(),
            channel: channel.into(),
            consumer: consumer.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Pipeline {
    pub modules: Vec<ModuleInstance>,
    #[serde(default)]
    pub bindings: Vec<Binding>,
}

impl Pipeline {
    pub fn from_json(doc: &str) -> Result<Self, RegistryError> {
        let p: Pipeline = serde_json::from_str(doc)?;
        p.check_structure()?;
        Ok(p)
    }

    pub fn instance(&self, label: &str) -> Option<&ModuleInstance> {
        self.modules.iter().find(|m| m.label == label)
    }

    /// Labels unique, bindings reference declared instances.
    pub fn check_structure(&self) -> Result<(), RegistryError> {
        let mut labels = BTreeSet::new();
        for m in &self.modules {
            if !labels.insert(m.label.as_str()) {
                return Err(RegistryError::MalformedPipeline(format!(
                    "duplicate instance label '{}'",
                    m.label
                )));
            }
        }
        for b in &self.bindings {
            for end in [&b.producer, &b.consumer] {
                if !labels.contains(end.as_str()) {
                    return Err(RegistryError::MalformedPipeline(format!(
                        "binding references unknown instance '{end}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IssueCode {
    #[serde(rename = "E_UNMATCHED_REQUIREMENT")]
    UnmatchedRequirement,
    #[serde(rename = "E_INCOMPATIBLE_OUTPUT")]
    IncompatibleOutput,
    #[serde(rename = "E_CHANNEL_NOT_PRODUCED")]
    ChannelNotProduced,
    #[serde(rename = "W_MIN_OUTPUTS")]
    MinOutputs,
    #[serde(rename = "W_NO_ACTION")]
    NoAction,
    #[serde(rename = "W_NO_TRAINING")]
    NoTraining,
    #[serde(rename = "W_NOT_EXECUTABLE")]
    NotExecutable,
    #[serde(rename = "W_UNUSED_BINDING")]
    UnusedBinding,
}

impl IssueCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            IssueCode::UnmatchedRequirement => "E_UNMATCHED_REQUIREMENT",
            IssueCode::IncompatibleOutput => "E_INCOMPATIBLE_OUTPUT",
            IssueCode::ChannelNotProduced => "E_CHANNEL_NOT_PRODUCED",
            IssueCode::MinOutputs => "W_MIN_OUTPUTS",
            IssueCode::NoAction => "W_NO_ACTION",
            IssueCode::NoTraining => "W_NO_TRAINING",
            IssueCode::NotExecutable => "W_NOT_EXECUTABLE",
            IssueCode::UnusedBinding => "W_UNUSED_BINDING",
        }
    }
}

impl std::fmt::Display for IssueCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    pub subject: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has_error(&self, code: IssueCode, subject: &str) -> bool {
        self.errors
            .iter()
            .any(|i| i.code == code && i.subject == subject)
    }

    pub fn warning_codes(&self) -> Vec<IssueCode> {
        self.warnings.iter().map(|w| w.code).collect()
    }

    fn error(&mut self, code: IssueCode, subject: String, message: String) {
        self.errors.push(Issue {
            code,
            subject,
            message,
        });
    }

    fn warn(&mut self, code: IssueCode, subject: String, message: String) {
        self.warnings.push(Issue {
            code,
            subject,
            message,
        });
    }
}

/// Checks a pipeline against the catalogue.
///
/// Hard failures (unknown descriptor, structurally broken pipeline, a binding
/// whose ends have the wrong kinds) are `Err`. Everything else lands in the
/// report, in module/binding declaration order.
///
/// Unmatched-requirement subjects are `"<feedback label>:<channel>"`; a
/// feedback channel counts as matched only when some monitoring instance that
/// produces it is bound to that feedback instance on that channel.
pub fn validate_pipeline(
    pipeline: &Pipeline,
    catalogue: &Catalogue,
) -> Result<ValidationReport, RegistryError> {
    pipeline.check_structure()?;

    let mut resolved: HashMap<&str, &ModuleDescriptor> = HashMap::new();
    for m in &pipeline.modules {
        let d = catalogue
            .get(&m.descriptor_id)
            .ok_or_else(|| RegistryError::UnknownDescriptor(m.descriptor_id.clone()))?;
        resolved.insert(m.label.as_str(), d);
    }

    for b in &pipeline.bindings {
        let producer = resolved[b.producer.as_str()];
        let consumer = resolved[b.consumer.as_str()];
        let reason = if producer.kind == ModuleKind::Output {
            Some("an output module cannot act as a producer")
        } else if consumer.kind == ModuleKind::Monitoring {
            Some("a monitoring module cannot consume channels")
        } else if b.producer == b.consumer {
            Some("an instance cannot be bound to itself")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(RegistryError::KindMisuse {
                producer: b.producer.clone(),
                channel: b.channel.clone(),
                consumer: b.consumer.clone(),
                reason: reason.into(),
            });
        }
    }

    let mut report = ValidationReport::default();

    for m in &pipeline.modules {
        let d = resolved[m.label.as_str()];
        if !d.executable && d.action_subkind != Some(ActionSubkind::Training) {
            report.warn(
                IssueCode::NotExecutable,
                m.label.clone(),
                format!("'{}' is catalogued but has no built-in behaviour", d.title),
            );
        }
    }

    for b in &pipeline.bindings {
        let producer = resolved[b.producer.as_str()];
        let consumer = resolved[b.consumer.as_str()];
        let Some(channel) = producer.produces_channel(&b.channel) else {
            report.error(
                IssueCode::ChannelNotProduced,
                format!("{}:{}", b.producer, b.channel),
                format!("'{}' does not produce channel '{}'", producer.id, b.channel),
            );
            continue;
        };
        match consumer.kind {
            ModuleKind::Output if !consumer.accepts_payload(channel.payload_kind) => {
                report.error(
                    IssueCode::IncompatibleOutput,
                    format!("{}:{}", b.consumer, b.channel),
                    format!(
                        "output '{}' cannot render {:?} payloads",
                        consumer.id, channel.payload_kind
                    ),
                );
            }
            ModuleKind::Feedback if consumer.consumes_channel(&b.channel).is_none() => {
                report.warn(
                    IssueCode::UnusedBinding,
                    format!("{}:{}", b.consumer, b.channel),
                    format!("feedback '{}' ignores channel '{}'", consumer.id, b.channel),
                );
            }
            _ => {}
        }
    }

    for m in &pipeline.modules {
        let d = resolved[m.label.as_str()];
        if d.kind != ModuleKind::Feedback {
            continue;
        }
        for need in &d.consumes {
            let matched = pipeline.bindings.iter().any(|b| {
                b.consumer == m.label && b.channel == need.name && {
                    let p = resolved[b.producer.as_str()];
                    p.kind == ModuleKind::Monitoring && p.produces_channel(&need.name).is_some()
                }
            });
            if !matched {
                report.error(
                    IssueCode::UnmatchedRequirement,
                    format!("{}:{}", m.label, need.name),
                    format!(
                        "no monitoring module feeds channel '{}' into '{}'",
                        need.name, m.label
                    ),
                );
            }
        }
    }

    let distinct_outputs: BTreeSet<&str> = pipeline
        .modules
        .iter()
        .filter(|m| resolved[m.label.as_str()].kind == ModuleKind::Output)
        .map(|m| m.descriptor_id.as_str())
        .collect();
    if distinct_outputs.len() < 2 {
        report.warn(
            IssueCode::MinOutputs,
            "pipeline".into(),
            format!(
                "{} distinct output module(s); at least two are recommended",
                distinct_outputs.len()
            ),
        );
    }

    let kinds: Vec<&ModuleDescriptor> = pipeline
        .modules
        .iter()
        .map(|m| resolved[m.label.as_str()])
        .collect();
    let actions: Vec<&&ModuleDescriptor> =
        kinds.iter().filter(|d| d.kind == ModuleKind::Action).collect();
    // feedback findings route to suggested actions, so a feedback module
    // makes actions reachable even without an explicit action instance
    let has_feedback = kinds.iter().any(|d| d.kind == ModuleKind::Feedback);
    if actions.is_empty() && !has_feedback {
        report.warn(
            IssueCode::NoAction,
            "pipeline".into(),
            "no action module is reachable from this pipeline".into(),
        );
    }
    if !actions.is_empty()
        && !actions
            .iter()
            .any(|d| d.action_subkind == Some(ActionSubkind::Training))
    {
        report.warn(
            IssueCode::NoTraining,
            "pipeline".into(),
            "no training action precedes elicitation".into(),
        );
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn questionnaire_consensus_linegraph() -> Pipeline {
        Pipeline {
            modules: vec![
                ModuleInstance::new("mon.questionnaire", "q"),
                ModuleInstance::new("fb.consensus", "c"),
                ModuleInstance::new("out.linegraph", "g"),
            ],
            bindings: vec![
                Binding::new("q", "scalar_estimate_interval", "c"),
                Binding::new("c", "scalar_estimate_interval", "g"),
            ],
        }
    }

    #[test]
    fn builtin_counts() {
        let cat = Catalogue::builtin();
        assert_eq!(cat.len(), 33);
        let counts = cat.count_by_kind();
        assert_eq!(counts[&ModuleKind::Monitoring], 5);
        assert_eq!(counts[&ModuleKind::Output], 4);
        assert_eq!(counts[&ModuleKind::Feedback], 4);
        assert_eq!(counts[&ModuleKind::Action], 20);
        assert_eq!(builtin_catalogue(), builtin_catalogue());
    }

    #[test]
    fn uncertainty_needs_observations_over_time() {
        let cat = Catalogue::builtin();
        let d = cat.get("fb.uncertainty").unwrap();
        assert!(d.consumes_channel("timeseries").is_some());
        assert!(d.requirements.contains(&Requirement::TimeAllowance));
    }

    #[test]
    fn register_custom_action() {
        let mut cat = Catalogue::builtin();
        let id = cat
            .register(ModuleDescriptor {
                id: "act.custom.checklist2".into(),
                kind: ModuleKind::Action,
                title: "Second checklist".into(),
                description: "Site-specific checklist".into(),
                requirements: BTreeSet::from([Requirement::Facilitator]),
                consumes: vec![],
                produces: vec![],
                action_subkind: Some(ActionSubkind::Tool),
                executable: true,
            })
            .unwrap();
        assert_eq!(id, "act.custom.checklist2");
        assert_eq!(cat.len(), 34);
    }

    #[test]
    fn register_rejects_bad_descriptors() {
        let mut cat = Catalogue::builtin();
        let mut bad = cat.get("mon.questionnaire").unwrap().clone();
        bad.id = "mon.custom".into();
        bad.consumes = vec![DataChannel::new("free_text", PayloadKind::FreeText)];
        match cat.register(bad) {
            Err(RegistryError::MalformedDescriptor { violation, .. }) => {
                assert!(violation.contains("monitoring"))
            }
            other => panic!("{other:?}"),
        }

        let dup = cat.get("fb.consensus").unwrap().clone();
        assert!(matches!(cat.register(dup), Err(RegistryError::DuplicateId(_))));

        let mut clash = cat.get("mon.transcript").unwrap().clone();
        clash.id = "mon.clash".into();
        clash.produces = vec![DataChannel::new("transcript", PayloadKind::FreeText)];
        assert!(matches!(
            cat.register(clash),
            Err(RegistryError::MalformedDescriptor { .. })
        ));
        assert_eq!(cat.len(), 33);
    }

    #[test]
    fn nominal_pipeline_only_warns_about_outputs() {
        let report =
            validate_pipeline(&questionnaire_consensus_linegraph(), &Catalogue::builtin()).unwrap();
        assert!(report.is_valid(), "{report:?}");
        assert_eq!(report.warning_codes(), vec![IssueCode::MinOutputs]);
    }

    #[test]
    fn feedback_without_monitoring_is_unmatched() {
        let p = Pipeline {
            modules: vec![ModuleInstance::new("fb.uncertainty", "u")],
            bindings: vec![],
        };
        let report = validate_pipeline(&p, &Catalogue::builtin()).unwrap();
        assert!(report.has_error(IssueCode::UnmatchedRequirement, "u:scalar_estimate_interval"));
    }

    #[test]
    fn output_binding_checks_payload() {
        let p = Pipeline {
            modules: vec![
                ModuleInstance::new("mon.transcript", "t"),
                ModuleInstance::new("out.linegraph", "g"),
                ModuleInstance::new("out.spreadsheet", "s"),
            ],
            bindings: vec![
                Binding::new("t", "transcript", "g"),
                Binding::new("t", "transcript", "s"),
            ],
        };
        let report = validate_pipeline(&p, &Catalogue::builtin()).unwrap();
        assert_eq!(report.errors.len(), 1);
        assert!(report.has_error(IssueCode::IncompatibleOutput, "g:transcript"));
        assert!(report.warning_codes().contains(&IssueCode::NoAction));
    }

    #[test]
    fn kind_misuse_and_unknown_ids() {
        let cat = Catalogue::builtin();
        let mut p = questionnaire_consensus_linegraph();
        p.bindings.push(Binding::new("g", "scalar_estimate_interval", "c"));
        assert!(matches!(
            validate_pipeline(&p, &cat),
            Err(RegistryError::KindMisuse { .. })
        ));

        let mut p = questionnaire_consensus_linegraph();
        p.modules.push(ModuleInstance::new("fb.nope", "x"));
        assert!(matches!(
            validate_pipeline(&p, &cat),
            Err(RegistryError::UnknownDescriptor(id)) if id == "fb.nope"
        ));

        let mut p = questionnaire_consensus_linegraph();
        p.modules.push(ModuleInstance::new("out.spreadsheet", "q"));
        assert!(matches!(
            validate_pipeline(&p, &cat),
            Err(RegistryError::MalformedPipeline(_))
        ));
    }

    #[test]
    fn training_warning_only_with_actions() {
        let cat = Catalogue::builtin();
        let mut p = questionnaire_consensus_linegraph();
        p.modules.push(ModuleInstance::new("act.pre_mortem", "pm"));
        let r = validate_pipeline(&p, &cat).unwrap();
        assert!(r.warning_codes().contains(&IssueCode::NoTraining));
        p.modules
            .push(ModuleInstance::new("act.training.general_bias", "tr"));
        let r = validate_pipeline(&p, &cat).unwrap();
        assert!(!r.warning_codes().contains(&IssueCode::NoTraining));
    }

    #[test]
    fn pipeline_json_round_trip() {
        let p = questionnaire_consensus_linegraph();
        let doc = serde_json::to_string(&p).unwrap();
        assert_eq!(Pipeline::from_json(&doc).unwrap(), p);
    }
}
