//! A control that takes a handful of levels sits next to a continuous one;
//! the forest splits it one level against the rest.
//!
//! `cargo run --release --example discrete_controls`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcforest::{fit_forest, Dataset, ForestConfig, ZKind};

fn main() -> vcforest::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut y, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..1500 {
        let level = rng.random_range(0..4usize);
        let age: f64 = rng.random_range(20.0..60.0);
        let xi: f64 = rng.random();
        // Slope depends on the level only; the intercept drifts with age.
        let slope = [0.5, 1.0, 2.0, 4.0][level];
        y.push(0.02 * age + slope * xi + 0.3 * (rng.random::<f64>() - 0.5));
        x.push(vec![xi]);
        z.push(vec![age, level as f64 / 3.0]);
    }
    let ds = Dataset::new(y, x, z, vec![ZKind::Continuous, ZKind::Discrete { m: 4 }])?
        .with_names("y", &["x"], &["age", "level"])?
        .normalize_z()?
        .augment_intercept()?;

    let forest = fit_forest(
        &ds,
        &ForestConfig {
            n_trees: 300,
            master_seed: 5,
            ..ForestConfig::default()
        },
    )?;
    println!("level  slope at age 40 (true 0.5, 1, 2, 4)");
    for level in 0..4 {
        let z = ds.map_point(&[40.0, level as f64 / 3.0])?;
        let p = forest.confidence_interval(&z, 0.95)?;
        println!("{level}      {:.3} ± {:.3}", p.beta[1], 1.96 * p.se[1]);
    }
    Ok(())
}
