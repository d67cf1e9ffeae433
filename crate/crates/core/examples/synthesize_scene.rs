//! Generate a synthetic forest scene: ground truth, a speckled
//! dual-polarization SAR rendering, and degraded labels standing in for a
//! coarse global reference product.
//!
//! Run: cargo run --release --example synthesize_scene

use anyhow::Result;
use forestmap::raster::{export_png, FOREST};
use forestmap::scene::{degrade_labels, generate_truth, render_sar, NoiseSpec, SceneSpec};

fn main() -> Result<()> {
    let spec = SceneSpec::new(7, 256, 256, 0.5);
    let truth = generate_truth(&spec)?;
    let sar = render_sar(&truth, &spec)?;

    let forest = truth.values.iter().filter(|&&v| v == FOREST).count();
    println!(
        "truth: {}x{}, {:.1}% forest",
        truth.height,
        truth.width,
        100.0 * forest as f64 / truth.values.len() as f64
    );

    // per-class mean backscatter in dB, per band
    for (name, class) in [("non-forest", 0u8), ("forest", 1u8)] {
        for band in 0..sar.bands {
            let (mut sum, mut n) = (0.0f64, 0usize);
            for r in 0..sar.height {
                for c in 0..sar.width {
                    if truth.get(r, c) == class {
                        sum += sar.get(band, r, c) as f64;
                        n += 1;
                    }
                }
            }
            println!("{name:>10} band {band}: mean {:+.2} dB", sum / n as f64);
        }
    }

    let noise = NoiseSpec {
        coarse_factor: 8,
        flip_rate: 0.08,
        jitter_radius: 2,
        seed: 99,
    };
    let noisy = degrade_labels(&truth, &noise)?;
    let disagree = truth
        .values
        .iter()
        .zip(&noisy.values)
        .filter(|(a, b)| a != b)
        .count();
    println!(
        "degraded labels disagree with truth on {:.1}% of pixels",
        100.0 * disagree as f64 / truth.values.len() as f64
    );

    let dir = std::env::temp_dir().join("forestmap_scene");
    std::fs::create_dir_all(&dir)?;
    export_png(&truth, dir.join("truth.png"))?;
    export_png(&noisy, dir.join("noisy.png"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
