//! Simulate a herding panel and an independent panel on the same question
//! and compare what the monitoring picks up.
//!
//! cargo run --example herding_simulation

use mice::registry::Catalogue;
use mice::session::{Task, TaskParameter};
use mice::simulation::{run_simulation, AgentProfile, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = Task::new("yield", "Expected crop yield next season")
        .with_parameter(TaskParameter::new("yield", "t/ha", 0.0, 100.0));
    let scenario = Scenario::new(task, 4).with_truth("yield", 50.0, 1.0);
    let catalogue = Catalogue::builtin();

    for (label, beta) in [("herding", 0.6), ("independent", 0.0)] {
        let cohort: Vec<AgentProfile> = (0..6)
            .map(|i| AgentProfile::new(format!("agent{i}"), i).herding(beta).noise(5.0))
            .collect();
        let out = run_simulation(&scenario, &cohort, &catalogue, 7)?;
        let timeline = &out.reports["uncertainty-yield"]["herding"];
        let indices: Vec<String> = timeline
            .as_array()
            .into_iter()
            .flatten()
            .map(|h| match h["index"].as_f64() {
                Some(x) => format!("{x:.2}"),
                None => "-".into(),
            })
            .collect();
        println!("{label:>11}: herding index by round [{}]", indices.join(", "));
        for f in &out.findings {
            println!("{:>11}  {:?} on {} in round {}", "", f.kind, f.subject, f.round_index);
        }
    }
    Ok(())
}
