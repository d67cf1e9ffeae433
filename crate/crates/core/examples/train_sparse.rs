//! Incomplete supervision: train on patches where only 2% of the label pixels
//! carry loss (the mask encodes sparsity), and compare against a densely
//! supervised twin with the same seed.
//!
//! Run: cargo run --release --example train_sparse

use anyhow::Result;
use forestmap::patch::{extract_patches_in, mask_labels, split_scene};
use forestmap::scene::{generate_truth, render_sar, SceneSpec};
use forestmap::train::{train, TrainConfig, TrainMode};
use forestmap::unet::UnetConfig;

fn main() -> Result<()> {
    let spec = SceneSpec::new(21, 128, 192, 0.5);
    let truth = generate_truth(&spec)?;
    let sar = render_sar(&truth, &spec)?;
    let (train_ext, val_ext) = split_scene(128, 192, 0.7, 32)?;

    let train_dense = extract_patches_in(&sar, &truth, train_ext, 32, 120, 41)?;
    let val_set = extract_patches_in(&sar, &truth, val_ext, 32, 24, 42)?;

    // keep 2% of labeled pixels per patch: round(0.02 * 32 * 32) = 20
    let train_sparse = mask_labels(&train_dense, 0.02, 43)?;
    let kept = train_sparse.mask.iter().map(|&v| v as u64).sum::<u64>()
        / train_sparse.count as u64;
    println!("sparse mask keeps {kept} of {} pixels per patch", 32 * 32);

    let net = UnetConfig {
        depth: 2,
        base_filters: 8,
        width_multipliers: vec![1, 2],
        bottleneck_multiplier: 2,
        ..UnetConfig::tiny()
    };
    let config = TrainConfig {
        learning_rate: 0.002,
        max_epochs: 10,
        patience: 10,
        batch_size: 16,
        seed: 7,
        ..TrainConfig::default()
    };

    for (name, set, mode) in [
        ("dense", &train_dense, TrainMode::Dense),
        ("sparse", &train_sparse, TrainMode::Sparse),
    ] {
        let outcome = train(&net, &config, set, &val_set, mode)?;
        let last = outcome.history.last().unwrap();
        println!(
            "{name:>6}: {} epochs, train loss {:.4}, val F1 {}",
            outcome.history.len(),
            last.train_loss,
            last.val_f1.map_or("n/a".into(), |f| format!("{f:.4}")),
        );
    }
    Ok(())
}
