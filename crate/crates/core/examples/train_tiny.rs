//! Trains a small network on freshly rendered single-factor batches and
//! saves a checkpoint. Useful as a smoke test of the whole training loop.
//!
//!     cargo run --release --example train_tiny -- [steps] [out.ckpt]

use dcign::io::{save_checkpoint, Checkpoint};
use dcign::trainer::{train, BatchGenerator, TrainConfig, Trainer};
use dcign::NetworkConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let out = args.next().unwrap_or_else(|| "tiny.ckpt".into());

    let config = TrainConfig {
        network: NetworkConfig::tiny(8),
        steps,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(config)?;
    let batches = BatchGenerator::for_config(&trainer.config)?;
    let mut log = Vec::new();
    let summary = train(&mut trainer, batches, &mut log, |_| Ok(()))?;

    // print every 50th line of the metrics log
    let text = String::from_utf8(log)?;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || i % 50 == 0 {
            println!("{line}");
        }
    }
    println!(
        "{} steps, mean reconstruction {:.2}, mean kl {:.2}",
        summary.steps_run, summary.metrics.mean.reconstruction, summary.metrics.mean.kl
    );
    save_checkpoint(&out, &Checkpoint::from_trainer(&trainer))?;
    println!("saved {out}");
    Ok(())
}
