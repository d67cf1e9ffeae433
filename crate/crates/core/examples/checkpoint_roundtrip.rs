//! Save a model to the binary checkpoint format and load it back; the
//! round trip is bit-exact, including batch-norm running statistics.
//!
//! Run: cargo run --release --example checkpoint_roundtrip

use anyhow::Result;
use forestmap::autodiff::Tensor;
use forestmap::unet::{build, load_checkpoint, save_checkpoint, UnetConfig};

fn main() -> Result<()> {
    let config = UnetConfig::tiny();
    let model = build(&config, 7)?;
    println!(
        "tiny network: depth {}, {} tensors, {} parameters",
        config.depth,
        model.params.len(),
        model.parameter_count()
    );

    let path = std::env::temp_dir().join("forestmap_model.wslm");
    save_checkpoint(&model, &path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("checkpoint: {bytes} bytes at {}", path.display());

    let restored = load_checkpoint(&path)?;
    assert_eq!(restored.config, model.config);
    for ((name, a), (_, b)) in model.params.iter().zip(&restored.params) {
        let same = a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name} changed across the round trip");
    }

    // inference agrees bit-for-bit
    let input = Tensor::new(vec![1, 32, 32, 2], vec![0.25f32; 32 * 32 * 2]);
    let a = model.forward(&input)?;
    let b = restored.forward(&input)?;
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("round trip is bit-exact across {} tensors", model.params.len());
    Ok(())
}
