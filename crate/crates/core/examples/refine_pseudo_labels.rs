//! Inaccurate supervision: start from degraded labels, train on them, predict
//! a full map, adopt the prediction as the next round's pseudo-labels, and
//! repeat until fewer than 10% of pixels change between rounds.
//!
//! Run: cargo run --release --example refine_pseudo_labels

use anyhow::Result;
use forestmap::metrics::confusion;
use forestmap::raster::FOREST;
use forestmap::scene::{degrade_labels, generate_truth, render_sar, NoiseSpec, SceneSpec};
use forestmap::selftrain::{refine_loop, RefineConfig};
use forestmap::train::TrainConfig;
use forestmap::unet::UnetConfig;

fn main() -> Result<()> {
    let spec = SceneSpec::new(12, 96, 96, 0.5);
    let truth = generate_truth(&spec)?;
    let sar = render_sar(&truth, &spec)?;
    let noisy = degrade_labels(
        &truth,
        &NoiseSpec {
            coarse_factor: 8,
            flip_rate: 0.08,
            jitter_radius: 1,
            seed: 5,
        },
    )?;

    let initial_f1 = confusion(&noisy, &truth)?.prf(FOREST).f1.unwrap();
    println!("initial noisy labels: forest F1 vs truth {initial_f1:.4}");

    let config = RefineConfig {
        stop_threshold: 0.10,
        max_rounds: 5,
        tile: 32,
        overlap: 16,
        patch_size: 32,
        patch_count: 80,
        val_count: 16,
        net: UnetConfig {
            depth: 2,
            base_filters: 4,
            width_multipliers: vec![1, 2],
            bottleneck_multiplier: 2,
            ..UnetConfig::tiny()
        },
        train: TrainConfig {
            learning_rate: 0.003,
            batch_size: 8,
            max_epochs: 25,
            patience: 25,
            ..TrainConfig::default()
        },
        fine_tune: false,
        seed: 7,
    };
    let outcome = refine_loop(&sar, &noisy, &config, Some(&truth), None)?;

    for r in &outcome.records {
        println!(
            "round {}: change fraction {:.4}, forest pixels {}",
            r.round, r.change_fraction, r.forest_pixels
        );
    }
    let final_f1 = confusion(&outcome.labels, &truth)?.prf(FOREST).f1.unwrap();
    println!(
        "converged: {} after {} rounds; final forest F1 vs truth {final_f1:.4}",
        outcome.converged,
        outcome.records.len()
    );
    Ok(())
}
