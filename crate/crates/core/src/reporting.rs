//! Output modules: CSV spreadsheets, line-graph series (with an SVG export),
//! and templated point-value statements. Names are resolved at render time,
//! so anonymity applies to everything a non-facilitator sees.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::feedback::{
    consensus_from_session, consistency_from_session, influence_from_session, track_uncertainty,
    ConsensusMethod, ConsensusReport, ConsistencyConfig, ConsistencyReport, FeedbackError, Finding,
    InfluenceReport, ReferenceKind, UncertaintyTimeline,
};
use crate::session::SessionState;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report '{0}' has no tabular projection")]
    NonTabularReport(String),
    #[error("no statement template for report '{0}'")]
    NoTemplateForReport(String),
    #[error("timeline has no rounds")]
    EmptyTimeline,
    #[error("unknown report kind '{0}'")]
    UnknownKind(String),
    #[error("no prompt with responses to report on")]
    NothingToReport,
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("csv: {0}")]
    Csv(String),
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        match self {
            ReportError::NonTabularReport(_) => "non_tabular_report",
            ReportError::NoTemplateForReport(_) => "no_template_for_report",
            ReportError::EmptyTimeline => "empty_timeline",
            ReportError::UnknownKind(_) => "unknown_report_kind",
            ReportError::NothingToReport => "nothing_to_report",
            ReportError::Feedback(e) => e.code(),
            ReportError::Csv(_) => "csv_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Facilitator,
    Experts,
}

/// Resolves participant ids to the names an audience may see.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Namer {
    labels: BTreeMap<String, String>,
    masked: bool,
}

impl Namer {
    /// Pseudonyms when the session is anonymous and the audience is not the
    /// facilitator; display names otherwise.
    pub fn for_audience(state: &SessionState, audience: Audience) -> Self {
        let masked = state.anonymity && audience != Audience::Facilitator;
        let labels = state
            .participants
            .values()
            .map(|p| {
                let label = if masked { &p.pseudonym } else { &p.display_name };
                (p.id.clone(), label.clone())
            })
            .collect();
        Self { labels, masked }
    }

    pub fn explicit(labels: BTreeMap<String, String>, masked: bool) -> Self {
        Self { labels, masked }
    }

    /// Labels every id with itself.
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn masked(&self) -> bool {
        self.masked
    }

    pub fn label(&self, id: &str) -> String {
        self.labels.get(id).cloned().unwrap_or_else(|| id.to_string())
    }

    fn key(&self, id: &str) -> String {
        if self.masked {
            self.label(id)
        } else {
            id.to_string()
        }
    }

    fn rekey<V: Clone>(&self, map: &BTreeMap<String, V>) -> BTreeMap<String, V> {
        map.iter().map(|(k, v)| (self.key(k), v.clone())).collect()
    }

    fn findings(&self, fs: &[Finding]) -> Vec<Finding> {
        fs.iter()
            .map(|f| Finding {
                subject: self.key(&f.subject),
                ..f.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "snake_case")]
pub enum Report {
    Consensus(ConsensusReport),
    Uncertainty(UncertaintyTimeline),
    Influence(InfluenceReport),
    Consistency(ConsistencyReport),
    /// Any other stored document, e.g. action artifacts.
    Document { kind: String, body: Value },
}

impl Report {
    pub fn kind(&self) -> &str {
        match self {
            Report::Consensus(_) => "consensus",
            Report::Uncertainty(_) => "uncertainty",
            Report::Influence(_) => "influence",
            Report::Consistency(_) => "consistency",
            Report::Document { kind, .. } => kind,
        }
    }

    /// Copy with participant ids replaced by labels when the namer masks.
    pub fn relabel(&self, names: &Namer) -> Report {
        if !names.masked {
            return self.clone();
        }
        match self {
            Report::Consensus(r) => Report::Consensus(ConsensusReport {
                points: names.rekey(&r.points),
                intervals: names.rekey(&r.intervals),
                deviations: names.rekey(&r.deviations),
                overlap_matrix: r
                    .overlap_matrix
                    .iter()
                    .map(|(k, row)| (names.key(k), names.rekey(row)))
                    .collect(),
                advocacy: r.advocacy.iter().map(|p| names.key(p)).collect(),
                findings: names.findings(&r.findings),
                ..r.clone()
            }),
            Report::Uncertainty(t) => Report::Uncertainty(UncertaintyTimeline {
                experts: names.rekey(&t.experts),
                findings: names.findings(&t.findings),
                ..t.clone()
            }),
            Report::Influence(r) => Report::Influence(InfluenceReport {
                airtime_share: names.rekey(&r.airtime_share),
                expertise_score: names.rekey(&r.expertise_score),
                airtime_rank: names.rekey(&r.airtime_rank),
                expertise_rank: names.rekey(&r.expertise_rank),
                findings: names.findings(&r.findings),
            }),
            Report::Consistency(r) => Report::Consistency(ConsistencyReport {
                experts: names.rekey(&r.experts),
                knowledge_overlap: r
                    .knowledge_overlap
                    .iter()
                    .map(|(k, row)| (names.key(k), names.rekey(row)))
                    .collect(),
                findings: names.findings(&r.findings),
                ..r.clone()
            }),
            Report::Document { kind, body } => Report::Document {
                kind: kind.clone(),
                body: relabel_value(body, names),
            },
        }
    }
}

fn relabel_value(v: &Value, names: &Namer) -> Value {
    match v {
        Value::String(s) => Value::String(names.key(s)),
        Value::Array(xs) => Value::Array(xs.iter().map(|x| relabel_value(x, names)).collect()),
        Value::Object(m) => Value::Object(
            m.iter()
                .map(|(k, x)| (names.key(k), relabel_value(x, names)))
                .collect(),
        ),
        other => other.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Consensus,
    Uncertainty,
    Influence,
    Consistency,
}

impl std::str::FromStr for ReportKind {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consensus" => Ok(ReportKind::Consensus),
            "uncertainty" => Ok(ReportKind::Uncertainty),
            "influence" => Ok(ReportKind::Influence),
            "consistency" => Ok(ReportKind::Consistency),
            other => Err(ReportError::UnknownKind(other.into())),
        }
    }
}

/// Builds a report from replayed state. Consensus uses the most recently
/// issued numeric prompt that has responses; the other kinds default to the
/// root task's first parameter.
pub fn build_report(
    state: &SessionState,
    kind: ReportKind,
    parameter: Option<&str>,
) -> Result<Report, ReportError> {
    let param = parameter
        .map(str::to_string)
        .or_else(|| state.task.parameters.first().map(|p| p.name.clone()))
        .unwrap_or_default();
    Ok(match kind {
        ReportKind::Consensus => {
            let prompt = state
                .prompts_in_order()
                .filter(|p| {
                    p.prompt.mode.is_numeric_estimate()
                        && p.prompt.rates.is_none()
                        && (parameter.is_none() || p.prompt.parameter_name == param)
                        && !state.responses_for(&p.prompt.id).is_empty()
                })
                .last()
                .ok_or(ReportError::NothingToReport)?;
            Report::Consensus(consensus_from_session(state, &prompt.prompt.id, ConsensusMethod::Mean)?)
        }
        ReportKind::Uncertainty => Report::Uncertainty(track_uncertainty(state, &param)?),
        ReportKind::Influence => Report::Influence(influence_from_session(state)?),
        ReportKind::Consistency => {
            Report::Consistency(consistency_from_session(state, &param, ConsistencyConfig::default())?)
        }
    })
}

// ---------------------------------------------------------------------------
// formatting helpers

/// Integer percent, rounding halves up.
pub fn percent(fraction: f64) -> i64 {
    (fraction * 100.0 + 0.5 + 1e-9).floor() as i64
}

pub fn ordinal(n: i64) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn num(x: f64) -> String {
    format!("{x}")
}

// ---------------------------------------------------------------------------
// spreadsheet

pub fn write_csv(rows: &[Vec<String>]) -> Result<String, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .terminator(csv::Terminator::Any(b'\n'))
        .flexible(true)
        .from_writer(Vec::new());
    for row in rows {
        w.write_record(row).map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Csv(e.to_string()))
}

pub fn parse_csv(doc: &str) -> Result<Vec<Vec<String>>, ReportError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(doc.as_bytes());
    r.records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| ReportError::Csv(e.to_string()))
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Header row, then one row per expert in participant-id order.
pub fn spreadsheet_rows(report: &Report, names: &Namer) -> Result<Vec<Vec<String>>, ReportError> {
    let mut rows = Vec::new();
    match report {
        Report::Consensus(r) => {
            let p = &r.parameter_name;
            rows.push(vec![
                "expert".into(),
                p.clone(),
                format!("{p}_lo"),
                format!("{p}_hi"),
                "deviation".into(),
            ]);
            for (id, x) in &r.points {
                let iv = r.intervals.get(id);
                rows.push(vec![
                    names.label(id),
                    num(*x),
                    opt(iv.map(|i| i.0)),
                    opt(iv.map(|i| i.1)),
                    num(r.deviations[id]),
                ]);
            }
        }
        Report::Uncertainty(t) => {
            let rounds: Vec<u32> = t.group.iter().map(|g| g.round).collect();
            let mut header = vec!["expert".to_string()];
            header.extend(rounds.iter().map(|r| format!("{}_round_{r}", t.parameter_name)));
            rows.push(header);
            for (id, series) in &t.experts {
                let mut row = vec![names.label(id)];
                row.extend(rounds.iter().map(|r| {
                    opt(series.iter().find(|p| p.round == *r).map(|p| p.point))
                }));
                rows.push(row);
            }
        }
        Report::Influence(r) => {
            rows.push(
                ["expert", "airtime_share", "expertise_score", "airtime_rank", "expertise_rank"]
                    .map(String::from)
                    .to_vec(),
            );
            for (id, share) in &r.airtime_share {
                rows.push(vec![
                    names.label(id),
                    num(*share),
                    opt(r.expertise_score[id]),
                    r.airtime_rank[id].to_string(),
                    r.expertise_rank[id].to_string(),
                ]);
            }
        }
        Report::Consistency(r) => {
            rows.push(vec![
                "expert".into(),
                r.parameter_name.clone(),
                "reference".into(),
                "discrepancy".into(),
                "coverage".into(),
            ]);
            for (id, e) in &r.experts {
                rows.push(vec![
                    names.label(id),
                    num(e.estimate),
                    num(e.reference),
                    num(e.discrepancy),
                    opt(e.coverage),
                ]);
            }
        }
        Report::Document { kind, .. } => return Err(ReportError::NonTabularReport(kind.clone())),
    }
    Ok(rows)
}

pub fn render_spreadsheet(report: &Report, names: &Namer) -> Result<String, ReportError> {
    write_csv(&spreadsheet_rows(report, names)?)
}

// ---------------------------------------------------------------------------
// line graph

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub round: u32,
    pub point: f64,
    /// Distance from the point down to the interval's lower end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSeriesPoint {
    pub round: u32,
    pub consensus: f64,
    pub spread: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineGraph {
    pub parameter_name: String,
    pub series: Vec<Series>,
    pub group: Vec<GroupSeriesPoint>,
}

pub fn render_linegraph(timeline: &UncertaintyTimeline, names: &Namer) -> Result<LineGraph, ReportError> {
    if timeline.group.is_empty() {
        return Err(ReportError::EmptyTimeline);
    }
    let series = timeline
        .experts
        .iter()
        .map(|(id, pts)| {
            let mut points: Vec<SeriesPoint> = pts
                .iter()
                .map(|p| SeriesPoint {
                    round: p.round,
                    point: p.point,
                    err_lo: p.interval.map(|(lo, _)| p.point - lo),
                    err_hi: p.interval.map(|(_, hi)| hi - p.point),
                })
                .collect();
            points.sort_by_key(|p| p.round);
            Series {
                label: names.label(id),
                points,
            }
        })
        .collect();
    let mut group: Vec<GroupSeriesPoint> = timeline
        .group
        .iter()
        .map(|g| GroupSeriesPoint {
            round: g.round,
            consensus: g.consensus,
            spread: g.spread,
            mean_half_width: g.mean_half_width,
        })
        .collect();
    group.sort_by_key(|g| g.round);
    Ok(LineGraph {
        parameter_name: timeline.parameter_name.clone(),
        series,
        group,
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Plain SVG: one polyline with error bars per expert, the group spread as
/// a shaded band around the consensus.
pub fn linegraph_svg(graph: &LineGraph) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let rounds: Vec<u32> = graph.group.iter().map(|g| g.round).collect();
    let (r0, r1) = (
        *rounds.first().unwrap_or(&0) as f64,
        *rounds.last().unwrap_or(&0) as f64,
    );
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &graph.series {
        for p in &s.points {
            lo = lo.min(p.point - p.err_lo.unwrap_or(0.0));
            hi = hi.max(p.point + p.err_hi.unwrap_or(0.0));
        }
    }
    for g in &graph.group {
        lo = lo.min(g.consensus - g.spread);
        hi = hi.max(g.consensus + g.spread);
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let x = |r: f64| {
        if r1 > r0 {
            m + (r - r0) / (r1 - r0) * (w - 2.0 * m)
        } else {
            w / 2.0
        }
    };
    let y = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{m}" y="20" font-family="sans-serif" font-size="14">{}</text>"#,
        xml_escape(&graph.parameter_name)
    );
    if !graph.group.is_empty() {
        let upper: Vec<String> = graph
            .group
            .iter()
            .map(|g| format!("{:.2},{:.2}", x(g.round as f64), y(g.consensus + g.spread)))
            .collect();
        let lower: Vec<String> = graph
            .group
            .iter()
            .rev()
            .map(|g| format!("{:.2},{:.2}", x(g.round as f64), y(g.consensus - g.spread)))
            .collect();
        let _ = writeln!(
            out,
            r##"<polygon points="{} {}" fill="#cccccc" fill-opacity="0.4"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
    }
    for (i, s) in graph.series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.round as f64), y(p.point)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}"><title>{}</title></polyline>"#,
            pts.join(" "),
            xml_escape(&s.label)
        );
        for p in &s.points {
            if let (Some(a), Some(b)) = (p.err_lo, p.err_hi) {
                let px = x(p.round as f64);
                let _ = writeln!(
                    out,
                    r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="{colour}"/>"#,
                    y(p.point - a),
                    y(p.point + b)
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

// ---------------------------------------------------------------------------
// point values

pub fn overlap_statement(a: &str, b: &str, overlap: f64) -> String {
    format!("{a}'s estimate overlapped with {b}'s by {} %", percent(overlap))
}

pub fn airtime_statement(who: &str, share: f64) -> String {
    format!("{who} spoke for {} % of the group discussion time", percent(share))
}

pub fn containment_statement(inside: bool, coverage: f64) -> String {
    format!(
        "the final parameter estimate lies {} the {} percentile of the initial uncertainty range",
        if inside { "within" } else { "outside" },
        ordinal(percent(coverage))
    )
}

pub fn render_pointvalues(report: &Report, names: &Namer) -> Result<Vec<String>, ReportError> {
    let mut out = Vec::new();
    match report {
        Report::Consensus(r) => {
            let mut ids: Vec<&String> = r.overlap_matrix.keys().collect();
            ids.sort_by_key(|id| (names.label(id), (*id).clone()));
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    out.push(overlap_statement(&names.label(a), &names.label(b), r.overlap_matrix[*a][*b]));
                }
            }
        }
        Report::Uncertainty(t) => {
            let (Some(first), Some(last)) = (t.group.first(), t.group.last()) else {
                return Err(ReportError::EmptyTimeline);
            };
            let initial: Vec<(f64, f64)> = t
                .experts
                .values()
                .filter_map(|s| s.iter().find(|p| p.round == first.round).and_then(|p| p.interval))
                .collect();
            if let (Some(coverage), false) = (t.coverage, initial.is_empty()) {
                let n = initial.len() as f64;
                let lo = initial.iter().map(|i| i.0).sum::<f64>() / n;
                let hi = initial.iter().map(|i| i.1).sum::<f64>() / n;
                let inside = lo <= last.consensus && last.consensus <= hi;
                out.push(containment_statement(inside, coverage));
            }
        }
        Report::Influence(r) => {
            let mut order: Vec<(&String, &usize)> = r.airtime_rank.iter().collect();
            order.sort_by_key(|(_, rank)| **rank);
            for (id, _) in order {
                out.push(airtime_statement(&names.label(id), r.airtime_share[id]));
            }
        }
        Report::Consistency(r) => {
            let subject = r.description.as_deref().unwrap_or(&r.parameter_name);
            for (id, e) in &r.experts {
                let (mine, theirs) = match r.reference_kind {
                    ReferenceKind::Probability => (
                        format!("{} %", percent(e.estimate)),
                        format!("{} %", percent(e.reference)),
                    ),
                    ReferenceKind::Quantity => (num(e.estimate), num(e.reference)),
                };
                out.push(format!(
                    "{}'s estimate of {subject} is {mine}, global database says {theirs}",
                    names.label(id)
                ));
            }
        }
        Report::Document { kind, .. } => return Err(ReportError::NoTemplateForReport(kind.clone())),
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// artifacts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactFormat {
    SpreadsheetCsv,
    LinegraphSeries,
    PointvalueText,
}

impl std::str::FromStr for ArtifactFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" | "spreadsheet_csv" => Ok(ArtifactFormat::SpreadsheetCsv),
            "series" | "linegraph_series" => Ok(ArtifactFormat::LinegraphSeries),
            "pointvalue" | "pointvalue_text" => Ok(ArtifactFormat::PointvalueText),
            other => Err(format!("unknown format '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub format: ArtifactFormat,
    pub payload: String,
    pub masked: bool,
}

/// Renders a report for an audience; point values are newline-separated,
/// series are JSON.
pub fn render(
    report: &Report,
    format: ArtifactFormat,
    state: &SessionState,
    audience: Audience,
) -> Result<ReportArtifact, ReportError> {
    let names = Namer::for_audience(state, audience);
    let payload = match format {
        ArtifactFormat::SpreadsheetCsv => render_spreadsheet(report, &names)?,
        ArtifactFormat::PointvalueText => {
            let mut s = render_pointvalues(report, &names)?.join("\n");
            s.push('\n');
            s
        }
        ArtifactFormat::LinegraphSeries => match report {
            Report::Uncertainty(t) => {
                serde_json::to_string_pretty(&render_linegraph(t, &names)?).expect("series serialize")
            }
            other => return Err(ReportError::NonTabularReport(other.kind().to_string())),
        },
    };
    Ok(ReportArtifact {
        format,
        payload,
        masked: names.masked(),
    })
}

/// Latest point per expert and parameter across all tasks, for external
/// multi-parameter plotting.
pub fn multiparameter_export(state: &SessionState, names: &Namer) -> Value {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ps in state.prompts_in_order() {
        if !ps.prompt.mode.is_numeric_estimate() || ps.prompt.rates.is_some() {
            continue;
        }
        let column = format!("{}.{}", ps.prompt.task_id, ps.prompt.parameter_name);
        for r in state.responses_for(&ps.prompt.id) {
            out.entry(names.label(&r.participant_id))
                .or_default()
                .insert(column.clone(), r.point);
        }
    }
    serde_json::to_value(out).expect("export serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{consensus_vs_individual, uncertainty_timeline};
    use crate::session::{Prompt, PromptMode, Response};

    fn names() -> Namer {
        Namer::explicit(
            BTreeMap::from([
                ("a".to_string(), "Expert A".to_string()),
                ("b".to_string(), "Expert B".to_string()),
            ]),
            true,
        )
    }

    #[test]
    fn rounding_and_ordinals() {
        assert_eq!(percent(0.2), 20);
        assert_eq!(percent(2.0 / 18.0), 11);
        assert_eq!(percent(0.125), 13);
        assert_eq!(percent(0.57), 57);
        assert_eq!(ordinal(95), "95th");
        assert_eq!(ordinal(91), "91st");
        assert_eq!(ordinal(92), "92nd");
        assert_eq!(ordinal(11), "11th");
        assert_eq!(ordinal(13), "13th");
    }

    #[test]
    fn overlap_statement_text() {
        assert_eq!(
            overlap_statement("Expert A", "Expert B", 0.20),
            "Expert A's estimate overlapped with Expert B's by 20 %"
        );
        let p = Prompt::new("t", "x", PromptMode::PointInterval, 0);
        let rs = vec![
            Response::new("a", "p", 5.0).with_interval(0.0, 10.0),
            Response::new("b", "p", 10.0).with_interval(8.0, 18.0),
        ];
        let r = Report::Consensus(consensus_vs_individual(&p, &rs, ConsensusMethod::Mean).unwrap());
        assert_eq!(
            render_pointvalues(&r, &names()).unwrap(),
            ["Expert A's estimate overlapped with Expert B's by 11 %"]
        );
    }

    #[test]
    fn containment() {
        let rounds = vec![
            (0, vec![
                Response::new("a", "p", 5.0).with_interval(2.0, 8.0),
                Response::new("b", "p", 7.0).with_interval(4.0, 10.0),
            ]),
            (1, vec![Response::new("a", "p", 6.0), Response::new("b", "p", 6.0)]),
        ];
        let t = uncertainty_timeline("x", Some(0.95), &rounds).unwrap();
        assert_eq!(
            render_pointvalues(&Report::Uncertainty(t), &names()).unwrap(),
            ["the final parameter estimate lies within the 95th percentile of the initial uncertainty range"]
        );
    }

    #[test]
    fn csv_quoting_and_roundtrip() {
        let labels = Namer::explicit(BTreeMap::from([("a".to_string(), "O'Hara, J".to_string())]), false);
        let p = Prompt::new("t", "porosity", PromptMode::Point, 0);
        let r = Report::Consensus(
            consensus_vs_individual(&p, &[Response::new("a", "p", 5.0)], ConsensusMethod::Mean).unwrap(),
        );
        let csv = render_spreadsheet(&r, &labels).unwrap();
        assert_eq!(csv, "expert,porosity,porosity_lo,porosity_hi,deviation\n\"O'Hara, J\",5,,,0\n");
        let again = write_csv(&parse_csv(&csv).unwrap()).unwrap();
        assert_eq!(again, csv);
        let tricky = vec![vec!["a\"b".to_string(), "x\ny".into(), "".into(), " c ".into()]];
        let doc = write_csv(&tricky).unwrap();
        assert_eq!(parse_csv(&doc).unwrap(), tricky);
        assert!(matches!(
            render_spreadsheet(&Report::Document { kind: "notes".into(), body: Value::Null }, &labels),
            Err(ReportError::NonTabularReport(_))
        ));
    }

    #[test]
    fn linegraph_shapes() {
        let rounds: Vec<_> = (0..3)
            .map(|r| (r, vec![Response::new("a", "p", 1.0 + r as f64)]))
            .collect();
        let t = uncertainty_timeline("x", None, &rounds).unwrap();
        let g = render_linegraph(&t, &names()).unwrap();
        assert_eq!(g.series.len(), 1);
        assert_eq!(g.series[0].points.len(), 3);
        assert!(g.series[0].points[0].err_lo.is_none());
        assert_eq!(g.series[0].label, "Expert A");
        let svg = linegraph_svg(&g);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<title>Expert A</title>"));
        let empty = UncertaintyTimeline {
            parameter_name: "x".into(),
            coverage: None,
            experts: BTreeMap::new(),
            group: vec![],
            herding: vec![],
            findings: vec![],
        };
        assert!(matches!(render_linegraph(&empty, &names()), Err(ReportError::EmptyTimeline)));
    }
}
