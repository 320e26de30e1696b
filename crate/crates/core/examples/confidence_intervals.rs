//! Pointwise sandwich intervals along the single-bump slope, and how the
//! `Λ̂` scaling constant changes their width.
//!
//! `cargo run --release --example confidence_intervals`

use vcforest::simulation::{test_grid, true_beta};
use vcforest::{fit_forest, generate, DgpSpec, ForestConfig, LambdaScale, Model};

fn main() -> vcforest::Result<()> {
    let ds = generate(&DgpSpec::new(Model::M1, 1000, 3))?;
    let cfg = ForestConfig {
        n_trees: 500,
        master_seed: 3,
        ..ForestConfig::default()
    };
    let forest = fit_forest(&ds, &cfg)?;

    println!("z     slope    90% interval          truth   covered");
    for c in test_grid() {
        let p = forest.confidence_interval(&[c], 0.90)?;
        let truth = true_beta(&Model::M1, &[c])?[1];
        let hit = p.lo[1] <= truth && truth <= p.hi[1];
        println!(
            "{c:.1}   {:7.3}  [{:7.3}, {:7.3}]  {truth:7.3}   {hit}",
            p.beta[1], p.lo[1], p.hi[1]
        );
    }

    println!("\nslope se at z = 0.5 by Λ̂ scale:");
    for scale in [
        LambdaScale::HonestHalf,
        LambdaScale::SampleMean,
        LambdaScale::Printed,
    ] {
        let f = fit_forest(
            &ds,
            &ForestConfig {
                lambda_scale: scale,
                ..cfg.clone()
            },
        )?;
        let p = f.confidence_interval(&[0.5], 0.90)?;
        println!("  {scale:?}: {:.4}", p.se[1]);
    }
    Ok(())
}
