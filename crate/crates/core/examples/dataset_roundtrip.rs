//! Writes a small dataset and a checkpoint, reads both back and checks
//! that nothing changed on the way.
//!
//!     cargo run --release --example dataset_roundtrip -- [dir]

use dcign::io::{load_checkpoint, read_dataset, save_checkpoint, write_dataset, Checkpoint};
use dcign::scene::ObjectKind;
use dcign::trainer::{BatchGenerator, BatchRatio, TrainConfig};
use dcign::{Factor, NetworkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "roundtrip".into()));
    std::fs::create_dir_all(&dir)?;

    let data = dir.join("batches.dat");
    let gen = BatchGenerator::new(ObjectKind::Head, BatchRatio::default(), 20, 32, 7)?;
    let written: Vec<_> = gen.take(26).collect::<dcign::Result<_>>()?;
    write_dataset(&data, 32, ObjectKind::Head, written.iter().cloned().map(Ok))?;
    let (header, read) = read_dataset(&data)?;
    assert_eq!(read, written);
    let mut counts = [0; 4];
    for b in &read {
        counts[Factor::ALL.iter().position(|&f| f == b.active).unwrap()] += 1;
    }
    println!(
        "{}: {} batches at {}x{}, per factor {:?}, {} bytes",
        data.display(),
        header.batches,
        header.resolution,
        header.resolution,
        counts,
        std::fs::metadata(&data)?.len()
    );

    let ckpt = dir.join("model.ckpt");
    let config = TrainConfig {
        network: NetworkConfig::tiny(32),
        ..TrainConfig::default()
    };
    let saved = Checkpoint::<f32>::initial(config)?;
    save_checkpoint(&ckpt, &saved)?;
    let loaded: Checkpoint = load_checkpoint(&ckpt)?;
    let image = &read[0].images[0];
    assert_eq!(saved.net.encode_mean(image)?, loaded.net.encode_mean(image)?);
    println!("{}: {} parameters, encodes bit-identically after reload", ckpt.display(), loaded.net.parameter_count());
    Ok(())
}
