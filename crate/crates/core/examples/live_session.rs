//! Run a two-round elicitation by hand and look at the feedback it produces.
//!
//! cargo run --example live_session

use std::collections::BTreeSet;
use std::sync::Arc;

use mice::feedback::track_uncertainty;
use mice::registry::Catalogue;
use mice::reporting::{build_report, linegraph_svg, render, render_linegraph, ArtifactFormat, Audience, Namer, ReportKind};
use mice::session::{replay_jsonl, ElicitationSession, ManualClock, Prompt, PromptMode, Response, Role, Task, TaskParameter};
use mice::simulation::default_pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = Arc::new(ManualClock::starting_at_epoch());
    let task = Task::new("reservoir", "Estimate the average porosity of the reservoir")
        .with_parameter(TaskParameter::new("porosity", "%", 0.0, 40.0));
    let mut session = ElicitationSession::create_with_id(
        "demo",
        task,
        default_pipeline(),
        None,
        &Catalogue::builtin(),
        clock.clone(),
    )?;
    let fac = session.join("Fran", Role::Facilitator, BTreeSet::new())?.id;
    let experts: Vec<String> = ["Ada", "Ben", "Cleo"]
        .iter()
        .map(|n| session.join(*n, Role::Expert, BTreeSet::new()).map(|p| p.id))
        .collect::<Result<_, _>>()?;

    let answers = [[(12.0, 4.0), (22.0, 3.0), (17.0, 6.0)], [(15.0, 3.0), (19.0, 3.0), (17.0, 5.0)]];
    for round in answers {
        let r = session.state().round;
        let prompt = Prompt::new("reservoir", "porosity", PromptMode::PointInterval, r).with_coverage(0.9);
        let pid = session.issue_prompt(prompt, &fac)?;
        for (who, (x, w)) in experts.iter().zip(round) {
            clock.advance(chrono::Duration::seconds(40));
            session.record_response(Response::new(who.clone(), pid.clone(), x).with_interval(x - w, x + w))?;
        }
        session.advance_round(&fac)?;
    }

    let state = session.state();
    let consensus = build_report(state, ReportKind::Consensus, Some("porosity"))?;
    print!("{}", render(&consensus, ArtifactFormat::PointvalueText, state, Audience::Facilitator)?.payload);
    println!();
    print!("{}", render(&consensus, ArtifactFormat::SpreadsheetCsv, state, Audience::Experts)?.payload);

    let timeline = track_uncertainty(state, "porosity")?;
    for h in &timeline.herding {
        println!("round {} herding index {:?}", h.round, h.index);
    }
    let svg = linegraph_svg(&render_linegraph(&timeline, &Namer::for_audience(state, Audience::Facilitator))?);
    println!("line graph: {} bytes of svg", svg.len());

    let replayed = replay_jsonl(&session.to_jsonl())?;
    assert_eq!(replayed.snapshot_digest(), state.snapshot_digest());
    println!("{} events, replay digest {}", session.events().len(), state.snapshot_digest());
    Ok(())
}
