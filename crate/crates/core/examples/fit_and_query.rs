//! Fit a forest to the two-bump design and compare `β̄(z)` with the truth.
//!
//! `cargo run --release --example fit_and_query`

use vcforest::simulation::true_beta;
use vcforest::{fit_forest, generate, DgpSpec, ForestConfig, Model};

fn main() -> vcforest::Result<()> {
    let ds = generate(&DgpSpec::new(Model::M2, 2000, 11))?;
    let cfg = ForestConfig {
        n_trees: 300,
        master_seed: 11,
        ..ForestConfig::default()
    };
    let forest = fit_forest(&ds, &cfg)?;
    let s = forest.summary();
    println!(
        "{} trees, s = {}, k = {}, {} leaves, mean depth {:.1}, invalid leaves {:.0}%",
        s.trees,
        s.subsample,
        s.k,
        s.leaves,
        s.mean_depth,
        100.0 * s.invalid_leaf_fraction
    );

    println!("z1    z2    slope   truth   trees");
    for z in [[0.1, 0.1], [0.5, 0.1], [0.5, 0.5], [0.9, 0.5], [0.5, 0.9]] {
        let est = forest.beta_bar(&z)?;
        let truth = true_beta(&Model::M2, &z)?;
        println!(
            "{:.1}   {:.1}   {:+.3}  {:+.3}  {}",
            z[0], z[1], est.beta_bar[1], truth[1], est.valid_trees
        );
    }

    // The Gram-weighted alternative pools leaves before solving.
    let z = [0.5, 0.5];
    println!("β̌(0.5, 0.5) = {:?}", forest.beta_check(&z)?);
    Ok(())
}
