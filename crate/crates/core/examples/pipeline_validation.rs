//! Browse the module catalogue and check a few pipelines against it.
//!
//! cargo run --example pipeline_validation

use mice::registry::{validate_pipeline, Binding, Catalogue, ModuleInstance, Pipeline};
use mice::simulation::default_pipeline;

fn show(name: &str, pipeline: &Pipeline, catalogue: &Catalogue) {
    let report = validate_pipeline(pipeline, catalogue).expect("pipeline is well formed");
    println!("{name}: {}", if report.is_valid() { "valid" } else { "invalid" });
    for issue in report.errors.iter().chain(&report.warnings) {
        println!("  {} {}: {}", issue.code.as_str(), issue.subject, issue.message);
    }
}

fn main() {
    let catalogue = Catalogue::builtin();
    println!("{} modules in the catalogue", catalogue.len());
    for (kind, n) in catalogue.count_by_kind() {
        println!("  {kind:?}: {n}");
    }
    println!();

    show("default", &default_pipeline(), &catalogue);

    // consensus feedback with nothing feeding it
    let orphan = Pipeline {
        modules: vec![
            ModuleInstance::new("fb.consensus", "consensus"),
            ModuleInstance::new("out.linegraph", "graph"),
        ],
        bindings: vec![Binding::new("consensus", "scalar_estimate_interval", "graph")],
    };
    show("orphan feedback", &orphan, &catalogue);

    // influence feedback needs a transcript
    let mut influence = default_pipeline();
    influence.modules.push(ModuleInstance::new("fb.influence", "influence"));
    show("influence without transcript", &influence, &catalogue);
}
