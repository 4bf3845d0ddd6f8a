//! Encodes a rendered head, then re-renders it while one latent moves
//! across a range and every other latent stays at its encoded value.
//!
//!     cargo run --release --example latent_sweep -- <model.ckpt> [latent] [out.png]
//!
//! Without a checkpoint argument a tiny model is trained for a few hundred
//! steps first, which is enough to see the mechanics but not a clean sweep.

use dcign::eval::latent_sweep_render;
use dcign::io::{image_grid, load_checkpoint, write_png, Checkpoint};
use dcign::scene::{intensity_centroid, render, SceneParams};
use dcign::trainer::{train, BatchGenerator, TrainConfig, Trainer};
use dcign::{Network, NetworkConfig};

fn quick_model() -> dcign::Result<Network<f32>> {
    let config = TrainConfig {
        network: NetworkConfig::tiny(16),
        steps: 300,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(config)?;
    let batches = BatchGenerator::for_config(&trainer.config)?;
    train(&mut trainer, batches, &mut std::io::sink(), |_| Ok(()))?;
    Ok(trainer.net)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let net = match args.first() {
        Some(path) => load_checkpoint::<f32>(path).map(|c: Checkpoint| c.net)?,
        None => quick_model()?,
    };
    let latent: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = args.get(2).cloned().unwrap_or_else(|| "sweep.png".into());

    let image = render(&SceneParams::neutral(), net.resolution())?;
    let sweep = latent_sweep_render(&net, &image, latent, -15.0, 15.0, 9)?;
    for (code, img) in sweep.codes.iter().zip(&sweep.images) {
        let (cx, cy) = intensity_centroid(img);
        println!("z[{latent}] = {:>6.2}  centroid ({cx:.2}, {cy:.2})", code[latent]);
    }
    let mut row = vec![image];
    row.extend(sweep.images);
    write_png(&out, &image_grid(&row, row.len())?)?;
    println!("wrote {out} (input first, then the sweep)");
    Ok(())
}
