//! CSV in, model file out, reload, then query on the original scale.

use std::fs;

use vcforest::{fit_forest, prepare, Forest, ForestConfig, Schema};

fn main() -> vcforest::Result<()> {
    let dir = std::env::temp_dir().join("vcforest_csv_pipeline");
    fs::create_dir_all(&dir)?;

    // Wage-like toy data: the return to schooling rises with experience.
    let mut text = String::from("wage,school,exper\n");
    for i in 0..800 {
        let school = 8.0 + (i % 13) as f64;
        let exper = (i * 7 % 40) as f64;
        let noise = ((i * 2654435761usize) % 1000) as f64 / 1000.0 - 0.5;
        let wage = 1.0 + (0.05 + 0.002 * exper) * school + 0.2 * noise;
        text.push_str(&format!("{wage},{school},{exper}\n"));
    }
    fs::write(dir.join("wages.csv"), text)?;
    let schema = Schema::from_json_str(
        r#"{"y": "wage", "x": ["school"], "z": [{"name": "exper", "kind": "continuous"}]}"#,
    )?;

    let ds = prepare(dir.join("wages.csv"), &schema)?;
    let forest = fit_forest(
        &ds,
        &ForestConfig {
            n_trees: 200,
            ..ForestConfig::default()
        },
    )?;
    let model = dir.join("model.json");
    forest.save(&model)?;

    let loaded = Forest::load(&model)?;
    println!("model {} ({} trees)", model.display(), loaded.n_trees());
    for exper in [0.0, 10.0, 20.0, 30.0] {
        let z = loaded.dataset().map_point(&[exper])?;
        let p = loaded.confidence_interval(&z, 0.95)?;
        println!(
            "exper {exper:>4}: return to school {:.4}  [{:.4}, {:.4}]  (true {:.4})",
            p.beta[1],
            p.lo[1],
            p.hi[1],
            0.05 + 0.002 * exper
        );
    }
    Ok(())
}
