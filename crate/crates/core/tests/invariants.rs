use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use mice::actions::{classify_risk, combine, default_rules, suggest_actions, Estimate, RiskClass};
use mice::feedback::{
    consensus_vs_individual, herding_score, interval_overlap, uncertainty_timeline, ConsensusMethod, Finding,
    FindingKind, Severity,
};
use mice::gateway::parse_log;
use mice::monitoring::{compute_airtime, Transcript, TranscriptUtterance};
use mice::registry::{validate_pipeline, Catalogue, IssueCode, ModuleInstance};
use mice::reporting::{parse_csv, percent, write_csv};
use mice::session::{
    replay_events, Combinator, ElicitationSession, ManualClock, Prompt, PromptMode, Response, Role, Task,
    TaskParameter,
};
use mice::simulation::{agent_respond, default_pipeline, AgentMemory, AgentProfile, Evidence, RespondInput};
use proptest::prelude::*;

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (-100.0..100.0f64, 0.0..50.0f64).prop_map(|(lo, w)| (lo, lo + w))
}

fn responses(points: &[(f64, f64, f64)]) -> (Prompt, Vec<Response>) {
    let prompt = Prompt::new("t", "x", PromptMode::PointInterval, 0);
    let rs = points
        .iter()
        .enumerate()
        .map(|(i, (x, lo, hi))| Response::new(format!("e{i}"), "p", *x).with_interval(*lo, *hi))
        .collect();
    (prompt, rs)
}

/// A random sequence of session commands; invalid ones are simply rejected.
#[derive(Debug, Clone)]
enum Op {
    Join,
    Prompt,
    Respond(usize, f64),
    Advance,
    Tick(i64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Join),
        Just(Op::Prompt),
        (0..6usize, -5.0..45.0f64).prop_map(|(i, x)| Op::Respond(i, x)),
        Just(Op::Advance),
        (1..600i64).prop_map(Op::Tick),
    ]
}

fn drive(ops: &[Op]) -> ElicitationSession {
    let clock = Arc::new(ManualClock::starting_at_epoch());
    let task = Task::new("t", "porosity").with_parameter(TaskParameter::new("x", "%", 0.0, 40.0));
    let mut s =
        ElicitationSession::create_with_id("prop", task, default_pipeline(), None, &Catalogue::builtin(), clock.clone())
            .unwrap();
    let fac = s.join("F", Role::Facilitator, BTreeSet::new()).unwrap().id;
    let mut experts = Vec::new();
    let mut prompt: Option<String> = None;
    for (n, op) in ops.iter().enumerate() {
        match op {
            Op::Join => {
                if let Ok(p) = s.join(format!("E{n}"), Role::Expert, BTreeSet::new()) {
                    experts.push(p.id);
                }
            }
            Op::Prompt => {
                let round = s.state().round;
                if let Ok(id) = s.issue_prompt(Prompt::new("t", "x", PromptMode::Point, round), &fac) {
                    prompt = Some(id);
                }
            }
            Op::Respond(i, x) => {
                if let (Some(p), Some(e)) = (&prompt, experts.get(*i % experts.len().max(1))) {
                    let _ = s.record_response(Response::new(e.clone(), p.clone(), *x));
                }
            }
            Op::Advance => {
                let _ = s.advance_round(&fac);
            }
            Op::Tick(secs) => clock.advance(chrono::Duration::seconds(*secs)),
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_is_byte_identical_and_rounds_increase(ops in prop::collection::vec(op(), 0..60)) {
        let s = drive(&ops);
        let replayed = replay_events(s.events()).unwrap();
        prop_assert_eq!(replayed.snapshot_bytes(), s.state().snapshot_bytes());
        let reparsed = parse_log(&s.to_jsonl()).unwrap();
        prop_assert_eq!(&reparsed.events[..], s.events());

        let rounds: Vec<u64> = s
            .events()
            .iter()
            .filter(|e| e.body.kind() == "round_advanced")
            .map(|e| serde_json::to_value(&e.body).unwrap()["payload"]["round_index"].as_u64().unwrap())
            .collect();
        let expected: Vec<u64> = (1..=rounds.len() as u64).collect();
        prop_assert_eq!(rounds, expected);

        for (i, e) in s.events().iter().enumerate() {
            prop_assert_eq!(e.seq, i as u64 + 1);
        }
        for p in s.state().prompts_in_order() {
            let counted = s.state().responses_for(&p.prompt.id);
            let ids: BTreeSet<&str> = counted.iter().map(|r| r.participant_id.as_str()).collect();
            prop_assert_eq!(ids.len(), counted.len());
            for id in ids {
                prop_assert!(s.state().experts().any(|e| e.id == id));
            }
        }
    }

    #[test]
    fn overlap_matrix_is_symmetric_and_bounded(ivs in prop::collection::vec(interval(), 1..8)) {
        let pts: Vec<(f64, f64, f64)> = ivs.iter().map(|(lo, hi)| ((lo + hi) / 2.0, *lo, *hi)).collect();
        let (prompt, rs) = responses(&pts);
        let r = consensus_vs_individual(&prompt, &rs, ConsensusMethod::Mean).unwrap();
        for (a, row) in &r.overlap_matrix {
            prop_assert_eq!(row[a], 1.0);
            for (b, v) in row {
                prop_assert!((0.0..=1.0).contains(v));
                prop_assert_eq!(*v, r.overlap_matrix[b][a]);
                let (ia, ib) = (r.intervals[a], r.intervals[b]);
                if a != b && (ia.1 < ib.0 || ib.1 < ia.0) {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn consensus_is_translation_equivariant(
        pts in prop::collection::vec((-50.0..50.0f64, 0.0..5.0f64), 1..8),
        delta in -100.0..100.0f64,
    ) {
        let base: Vec<(f64, f64, f64)> = pts.iter().map(|(x, w)| (*x, x - w, x + w)).collect();
        let moved: Vec<(f64, f64, f64)> = base.iter().map(|(x, lo, hi)| (x + delta, lo + delta, hi + delta)).collect();
        let (p, a) = responses(&base);
        let (_, b) = responses(&moved);
        let ra = consensus_vs_individual(&p, &a, ConsensusMethod::Mean).unwrap();
        let rb = consensus_vs_individual(&p, &b, ConsensusMethod::Mean).unwrap();
        prop_assert!((rb.consensus - ra.consensus - delta).abs() <= 1e-9 * (1.0 + delta.abs() + ra.consensus.abs()));
        for (id, d) in &ra.deviations {
            prop_assert!((rb.deviations[id] - d).abs() <= 1e-9 * (1.0 + delta.abs()));
        }
    }

    #[test]
    fn herding_index_ignores_affine_rescaling(
        rounds in prop::collection::vec(prop::collection::vec(0.0..100.0f64, 4), 2..5),
        scale in 0.1..10.0f64,
        shift in -50.0..50.0f64,
    ) {
        let build = |f: &dyn Fn(f64) -> f64| -> Vec<(u32, Vec<Response>)> {
            rounds
                .iter()
                .enumerate()
                .map(|(r, xs)| {
                    (r as u32, xs.iter().enumerate().map(|(i, x)| Response::new(format!("e{i}"), "p", f(*x))).collect())
                })
                .collect()
        };
        let a = uncertainty_timeline("x", None, &build(&|x| x)).unwrap();
        let b = uncertainty_timeline("x", None, &build(&|x| scale * x + shift)).unwrap();
        for (ha, hb) in a.herding.iter().zip(&b.herding) {
            match (ha.index, hb.index) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-6),
                (x, y) => prop_assert_eq!(x.is_some(), y.is_some()),
            }
        }
    }

    #[test]
    fn herding_score_is_a_clipped_ratio(p in -100.0..100.0f64, c in -100.0..100.0f64, x in -100.0..100.0f64) {
        if let Some(s) = herding_score(p, c, x) {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        prop_assert_eq!(herding_score(p, p, x), None);
        if (c - p).abs() > 1e-6 {
            prop_assert_eq!(herding_score(p, c, c), Some(1.0));
        }
    }

    #[test]
    fn overlap_is_symmetric(a in interval(), b in interval()) {
        prop_assert_eq!(interval_overlap(a, b), interval_overlap(b, a));
    }

    #[test]
    fn csv_round_trips(rows in prop::collection::vec(prop::collection::vec("[a-z ,\"\n\r';é]{0,8}", 1..4), 1..5)) {
        let width = rows[0].len();
        let rows: Vec<Vec<String>> = rows.into_iter().map(|mut r| { r.resize(width, String::new()); r }).collect();
        let doc = write_csv(&rows).unwrap();
        let back = parse_csv(&doc).unwrap();
        prop_assert_eq!(write_csv(&back).unwrap(), doc);
    }

    #[test]
    fn airtime_sums_to_one_and_ignores_order_and_splits(
        words in prop::collection::vec((0..4usize, 1..200u64), 1..12),
        split in 0..12usize,
    ) {
        let speakers = ["a", "b", "c", "d"];
        let utts: Vec<TranscriptUtterance> =
            words.iter().map(|(s, w)| TranscriptUtterance::words(speakers[*s], *w)).collect();
        let share = compute_airtime(&Transcript { utterances: utts.clone() }).unwrap();
        let total: f64 = share.values().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(share.values().all(|v| *v >= 0.0));

        let mut reversed = utts.clone();
        reversed.reverse();
        let r = compute_airtime(&Transcript { utterances: reversed }).unwrap();
        let k = split % utts.len();
        let mut split_utts = utts.clone();
        let u = split_utts.remove(k);
        if u.word_count >= 2 {
            let half = u.word_count / 2;
            split_utts.insert(k, TranscriptUtterance::words(u.speaker_id.clone(), u.word_count - half));
            split_utts.insert(k, TranscriptUtterance::words(u.speaker_id.clone(), half));
        } else {
            split_utts.insert(k, u);
        }
        let sp = compute_airtime(&Transcript { utterances: split_utts }).unwrap();
        for (id, v) in &share {
            prop_assert!((r[id] - v).abs() <= 1e-12);
            prop_assert!((sp[id] - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn suggestions_are_deterministic_catalogue_actions(kinds in prop::collection::vec(0..6usize, 0..8)) {
        let all = [
            FindingKind::Herding,
            FindingKind::Overconfidence,
            FindingKind::AbruptChange,
            FindingKind::InfluenceMismatch,
            FindingKind::ExternalInconsistency,
            FindingKind::HighDisagreement,
        ];
        let findings: Vec<Finding> = kinds.iter().map(|k| Finding::new(all[*k], "group", Severity::Alert, 1)).collect();
        let cat = Catalogue::builtin();
        let a = suggest_actions(&findings, &default_rules(), &cat).unwrap();
        let b = suggest_actions(&findings, &default_rules(), &cat).unwrap();
        prop_assert_eq!(&a, &b);
        for s in &a {
            let d = cat.get(&s.descriptor_id).unwrap();
            prop_assert_eq!(d.kind, mice::registry::ModuleKind::Action);
        }
    }

    #[test]
    fn sum_and_mean_propagate_endpoints(
        leaves in prop::collection::vec((-10.0..10.0f64, 0.0..5.0f64), 1..5),
    ) {
        let est: Vec<Estimate> = leaves.iter().map(|(lo, w)| Estimate::new(lo + w / 2.0, *lo, lo + w)).collect();
        for c in [Combinator::Sum, Combinator::Mean, Combinator::Min, Combinator::Max] {
            let e = combine("r", &c, &est).unwrap();
            prop_assert!(e.lo <= e.point && e.point <= e.hi);
        }
    }

    #[test]
    fn adding_modules_never_clears_unmatched_requirements(extra in prop::collection::vec(0..33usize, 0..5)) {
        let cat = Catalogue::builtin();
        let mut p = default_pipeline();
        p.modules.push(ModuleInstance::new("fb.influence", "influence"));
        let before = validate_pipeline(&p, &cat).unwrap();
        prop_assert!(before.has_error(IssueCode::UnmatchedRequirement, "influence:transcript"));
        for (i, k) in extra.iter().enumerate() {
            p.modules.push(ModuleInstance::new(cat.descriptors()[*k].id.clone(), format!("extra{i}")));
        }
        let after = validate_pipeline(&p, &cat).unwrap();
        for e in before.errors.iter().filter(|e| e.code == IssueCode::UnmatchedRequirement) {
            prop_assert!(after.has_error(IssueCode::UnmatchedRequirement, &e.subject));
        }
    }

    #[test]
    fn anchoring_is_monotone_in_lambda(
        values in prop::collection::vec(0.0..100.0f64, 2..6),
        l1 in 0.0..=1.0f64,
        l2 in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let evidence: Vec<Evidence> = values.iter().map(|v| Evidence { value: *v, sd: 2.0 }).collect();
        let drift = |lambda: f64| {
            let agent = AgentProfile::new("a", seed).anchor(lambda).noise(3.0);
            let mut mem = AgentMemory::default();
            let mut out = Vec::new();
            for t in 0..evidence.len() {
                let input = RespondInput {
                    master_seed: 1,
                    question_key: "q",
                    evidence: &evidence[..=t],
                    prior_consensus: None,
                    coverage: 0.9,
                    bounds: None,
                };
                out.push(agent_respond(&agent, &mut mem, &input).unwrap().point);
            }
            out.iter().map(|x| (x - out[0]).abs()).collect::<Vec<_>>()
        };
        for (a, b) in drift(lo).iter().zip(drift(hi)) {
            prop_assert!(b <= a + 1e-9);
        }
    }

    #[test]
    fn noiseless_agent_reports_pooled_mean(values in prop::collection::vec((0.0..100.0f64, 0.1..5.0f64), 1..6)) {
        let evidence: Vec<Evidence> = values.iter().map(|(v, sd)| Evidence { value: *v, sd: *sd }).collect();
        let precision: f64 = evidence.iter().map(|e| 1.0 / (e.sd * e.sd)).sum();
        let mean = evidence.iter().map(|e| e.value / (e.sd * e.sd)).sum::<f64>() / precision;
        let agent = AgentProfile::new("a", 0);
        let input = RespondInput {
            master_seed: 0,
            question_key: "q",
            evidence: &evidence,
            prior_consensus: None,
            coverage: 0.9,
            bounds: None,
        };
        let ans = agent_respond(&agent, &mut AgentMemory::default(), &input).unwrap();
        prop_assert!((ans.point - mean).abs() <= 1e-6);
    }
}

#[test]
fn risk_band_edges() {
    assert_eq!(classify_risk(-0.2), RiskClass::Neutral);
    assert_eq!(classify_risk(-0.2000001), RiskClass::Averse);
    assert_eq!(classify_risk(0.2), RiskClass::Neutral);
    assert_eq!(classify_risk(0.2000001), RiskClass::Seeking);
}

#[test]
fn percent_rounds_halves_up() {
    let cases: BTreeMap<i64, f64> = [(20, 0.2), (11, 0.105), (95, 0.95), (0, 0.0), (100, 1.0)].into_iter().collect();
    for (want, x) in cases {
        assert_eq!(percent(x), want, "{x}");
    }
}
