//! Desk-scale Monte Carlo for the single-bump slope model.
//!
//! `cargo run --release --example monte_carlo_model_one -- [reps] [n] [trees]`

use vcforest::simulation::{run_monte_carlo, DgpSpec, Model, Preset};

fn main() -> vcforest::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let reps = args.first().copied().unwrap_or(20);
    let n = args.get(1).copied().unwrap_or(1000);
    let mut cfg = Preset::Desk.forest();
    if let Some(&b) = args.get(2) {
        cfg.n_trees = b;
    }

    let report = run_monte_carlo(&DgpSpec::new(Model::M1, n, 2024), &cfg, reps, None)?;
    println!(
        "n={n} reps={} residual sd={:.4} kurtosis={:.3} LM rejection={:.2}",
        report.completed, report.residual.sd, report.residual.kurtosis, report.lm_rejection_rate
    );
    println!("point  coef  bias     mse      cov90  cov95  mean_se  sd_est");
    for p in &report.points {
        for (j, name) in ["b0", "b1"].iter().enumerate() {
            println!(
                "{:.1}    {name}   {:+.4}  {:.5}  {:.2}   {:.2}   {:.4}   {:.4}",
                p.point,
                p.bias[j],
                p.mse[j],
                p.coverage_90[j],
                p.coverage_95[j],
                p.mean_se[j],
                p.sd_estimate[j]
            );
        }
    }
    Ok(())
}
