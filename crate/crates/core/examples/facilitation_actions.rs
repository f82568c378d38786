//! Drive a session through the JSON API: collect answers, ask the engine
//! which interventions it recommends, then run a pre-mortem.
//!
//! cargo run --example facilitation_actions

use std::collections::BTreeMap;
use std::sync::Arc;

use mice::gateway::Gateway;
use mice::registry::Catalogue;
use mice::session::{ManualClock, Task, TaskParameter};
use mice::simulation::default_pipeline;
use serde_json::{json, Value};

fn call(gw: &mut Gateway, method: &str, path: &str, token: Option<&str>, body: Value) -> Value {
    let r = gw.handle(method, path, &BTreeMap::new(), token, &body);
    if r.status >= 400 {
        panic!("{method} {path} -> {} {}", r.status, r.body);
    }
    r.body
}

fn main() {
    let clock = Arc::new(ManualClock::starting_at_epoch());
    let mut gw = Gateway::in_memory(Catalogue::builtin(), clock.clone());
    let task = Task::new("levee", "Peak river stage at the levee for a 100-year flood")
        .with_parameter(TaskParameter::new("stage", "m", 0.0, 20.0));
    let created = call(
        &mut gw,
        "POST",
        "/sessions",
        None,
        json!({ "task": task, "pipeline": default_pipeline(), "facilitator_name": "Fran" }),
    );
    let sid = created["session_id"].as_str().unwrap().to_string();
    let fac = created["token"].as_str().unwrap().to_string();
    let experts: Vec<String> = ["Gus", "Hana", "Ivo"]
        .iter()
        .map(|n| {
            let j = call(&mut gw, "POST", &format!("/sessions/{sid}/participants"), None, json!({ "display_name": n }));
            j["token"].as_str().unwrap().to_string()
        })
        .collect();

    // everybody drifts onto the running consensus
    let rounds = [
        [(6.0, 0.5), (11.0, 0.4), (14.0, 0.6)],
        [(10.0, 0.3), (10.5, 0.3), (11.0, 0.3)],
        [(10.4, 0.2), (10.5, 0.2), (10.6, 0.2)],
    ];
    for answers in rounds {
        let p = call(
            &mut gw,
            "POST",
            &format!("/sessions/{sid}/prompts"),
            Some(&fac),
            json!({ "parameter_name": "stage", "mode": "point_interval", "coverage": 0.9 }),
        );
        let prompt = p["prompt_id"].as_str().unwrap();
        for (tok, (x, w)) in experts.iter().zip(answers) {
            call(
                &mut gw,
                "POST",
                &format!("/sessions/{sid}/responses"),
                Some(tok),
                json!({ "prompt_id": prompt, "point": x, "interval": [x - w, x + w] }),
            );
        }
        call(&mut gw, "POST", &format!("/sessions/{sid}/rounds/advance"), Some(&fac), Value::Null);
    }

    let suggestions = gw.get(&format!("/sessions/{sid}/suggestions"), &BTreeMap::new(), Some(&fac));
    for s in suggestions.body["suggestions"].as_array().into_iter().flatten() {
        println!("suggested {} because of {} on {}", s["descriptor_id"], s["trigger"], s["subject"]);
    }

    let run = call(
        &mut gw,
        "POST",
        &format!("/sessions/{sid}/actions/act.pre_mortem"),
        Some(&fac),
        json!({ "plan": "design the levee crest for the elicited stage" }),
    );
    let run = run["run_id"].as_str().unwrap().to_string();
    for _ in 0..2 {
        let phase = call(&mut gw, "POST", &format!("/sessions/{sid}/actions/runs/{run}/advance"), Some(&fac), Value::Null);
        println!("pre-mortem now in {}", phase["phase"]);
    }
    let reasons = ["upstream dam release was not considered", "gauge record is too short", "debris raised the stage"];
    for (tok, reason) in experts.iter().zip(reasons) {
        call(
            &mut gw,
            "POST",
            &format!("/sessions/{sid}/actions/runs/{run}/reasons"),
            Some(tok),
            json!({ "reasons": [reason] }),
        );
    }
    let shared = call(&mut gw, "POST", &format!("/sessions/{sid}/actions/runs/{run}/shared"), Some(&experts[0]), Value::Null);
    println!("shared reasons:");
    for r in shared.as_array().into_iter().flatten() {
        println!("  {r}");
    }
}
