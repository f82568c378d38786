//! Score experts on seed questions with known answers.
//!
//! cargo run --example calibration

use mice::actions::{profile_expert, SeedResult, MIN_SEEDS_FOR_FLAG};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // ten seed questions on a 0-100 scale; each expert misses the truth by
    // the same amount but states intervals of different widths
    let truths = [12.0, 31.0, 42.0, 75.0, 64.0, 5.0, 88.0, 50.0, 23.0, 57.0];
    let misses = [3.0, -6.0, 1.0, 9.0, -2.0, 4.0, -8.0, 0.5, -3.5, 6.0];
    println!("flagging needs at least {MIN_SEEDS_FOR_FLAG} seeds");
    for (who, half_width) in [("careful", 10.0), ("narrow", 1.5), ("vague", 45.0)] {
        let results: Vec<SeedResult> = truths
            .iter()
            .zip(misses)
            .map(|(&truth, miss)| SeedResult {
                interval: (truth + miss - half_width, truth + miss + half_width),
                coverage: 0.9,
                truth,
                scale: 100.0,
            })
            .collect();
        let p = profile_expert(who, &results)?;
        println!(
            "{who:>8}: {}/{} hits, mean relative width {:.2}, overconfident: {}",
            p.hits, p.seed_count, p.mean_normalized_width, p.overconfident
        );
        if let Some(f) = p.finding(0) {
            println!("          {:?} finding, evidence {:?}", f.kind, f.evidence);
        }
    }
    Ok(())
}
