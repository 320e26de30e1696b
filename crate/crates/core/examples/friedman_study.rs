//! Slope accuracy on the Friedman design as the sample grows.
//!
//! `cargo run --release --example friedman_study -- [n ...]`

use vcforest::simulation::friedman_study;
use vcforest::Preset;

fn main() -> vcforest::Result<()> {
    let mut ns: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    if ns.is_empty() {
        ns = vec![1000, 2000, 4000];
    }
    let cfg = Preset::Desk.forest();
    println!("n       bias      mse");
    for s in friedman_study(&ns, &cfg, 1)? {
        println!("{:<7} {:+.4}   {:.4}", s.n, s.bias, s.mse);
    }
    Ok(())
}
