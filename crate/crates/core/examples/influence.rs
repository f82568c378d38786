//! Compare who talked the most with who the group rated as most expert.
//!
//! cargo run --example influence

use std::collections::BTreeSet;
use std::sync::Arc;

use mice::feedback::{influence_report, PeerRating};
use mice::monitoring::{compute_airtime, ingest_transcript, Transcript, TranscriptUtterance};
use mice::registry::Catalogue;
use mice::reporting::airtime_statement;
use mice::session::{ElicitationSession, ManualClock, Role, Task, TaskParameter};
use mice::simulation::default_pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = Arc::new(ManualClock::starting_at_epoch());
    let task = Task::new("dam", "Probability the spillway overtops in the next decade")
        .with_parameter(TaskParameter::new("p_overtop", "", 0.0, 1.0));
    let mut session =
        ElicitationSession::create_with_id("panel", task, default_pipeline(), None, &Catalogue::builtin(), clock)?;
    session.join("Fran", Role::Facilitator, BTreeSet::new())?;
    let ids: Vec<String> = ["Dee", "Eli", "Fay"]
        .iter()
        .map(|n| session.join(*n, Role::Expert, BTreeSet::new()).map(|p| p.id))
        .collect::<Result<_, _>>()?;

    let utterances = vec![
        TranscriptUtterance::timed(ids[0].clone(), 0.0, 410.0),
        TranscriptUtterance::timed(ids[1].clone(), 410.0, 470.0),
        TranscriptUtterance::timed(ids[0].clone(), 470.0, 800.0),
        TranscriptUtterance::timed(ids[2].clone(), 800.0, 900.0),
    ];
    let stored = ingest_transcript(&mut session, utterances.clone())?;
    println!("transcript stored as {stored}");

    let airtime = compute_airtime(&Transcript { utterances })?;
    let names = ["Dee", "Eli", "Fay"];
    for (id, name) in ids.iter().zip(names) {
        println!("{}", airtime_statement(name, airtime[id]));
    }

    // everyone rates the others on a 1-5 scale
    let scores = [[0.0, 2.0, 2.5], [4.5, 0.0, 4.0], [5.0, 2.0, 0.0]];
    let mut ratings = Vec::new();
    for (i, rater) in ids.iter().enumerate() {
        for (j, ratee) in ids.iter().enumerate() {
            if i != j {
                ratings.push(PeerRating { rater: rater.clone(), ratee: ratee.clone(), value: scores[j][i] });
            }
        }
    }
    let report = influence_report(&airtime, &ratings)?;
    for (id, name) in ids.iter().zip(names) {
        println!(
            "{name}: airtime rank {}, expertise rank {}",
            report.airtime_rank[id], report.expertise_rank[id]
        );
    }
    for f in &report.findings {
        let who = ids.iter().position(|id| *id == f.subject).map_or(f.subject.as_str(), |i| names[i]);
        println!("finding {:?} on {who} ({:?})", f.kind, f.severity);
    }
    Ok(())
}
