//! The end-to-end three-way comparison on one synthetic scene: dense
//! supervision, incomplete supervision (2% sparse masks), and inaccurate
//! supervision (noisy labels plus iterative refinement), each scored on a
//! geographically disjoint test region.
//!
//! This is a reduced-budget run; `forestmap bench --profile tiny` runs the
//! full version. Run: cargo run --release --example benchmark

use anyhow::Result;
use forestmap::experiment::{run_bench, ExperimentConfig};

fn main() -> Result<()> {
    let config = ExperimentConfig::parse(
        "seed = 7\n\
         scene.height = 128\n\
         scene.width = 256\n\
         patch.count = 120\n\
         patch.val_count = 24\n\
         train.max_epochs = 8\n\
         train.patience = 8\n\
         refine.patch_count = 100\n\
         refine.max_epochs = 5\n\
         refine.max_rounds = 4\n",
    )?;
    let out = std::env::temp_dir().join("forestmap_bench");
    let summary = run_bench(&config, &out)?;

    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
    println!("forest F1 on the held-out test region:");
    println!("  dense supervision       {}", fmt(summary.dense_forest_f1));
    println!("  incomplete supervision  {}", fmt(summary.incomplete_forest_f1));
    println!(
        "  inaccurate supervision  {} (initial noisy model {})",
        fmt(summary.inaccurate_forest_f1),
        fmt(summary.inaccurate_initial_forest_f1)
    );
    println!(
        "refinement: {} rounds, final change fraction {:.4}, converged: {}",
        summary.refine_rounds, summary.refine_final_change_fraction, summary.refine_converged
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
