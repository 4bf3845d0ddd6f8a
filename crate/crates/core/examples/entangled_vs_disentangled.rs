//! Trains the clamped network and a plain variational baseline with the
//! same architecture, data and budget, then compares how well each one
//! separates the scene factors and re-renders new views.
//!
//!     cargo run --release --example entangled_vs_disentangled -- [steps] [resolution]

use dcign::eval::{compare_novel_view, equivariance_from_batches, identify_entangled_latent, invariance_score};
use dcign::scene::{make_batch, ObjectKind, TransformBatch};
use dcign::trainer::{train, BatchGenerator, TrainConfig, TrainMode, Trainer};
use dcign::{Factor, Network, NetworkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fit(mode: TrainMode, steps: u64, res: usize) -> dcign::Result<Network<f32>> {
    let config = TrainConfig {
        network: NetworkConfig::tiny(res),
        steps,
        mode,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(config)?;
    let batches = BatchGenerator::for_config(&trainer.config)?;
    train(&mut trainer, batches, &mut std::io::sink(), |_| Ok(()))?;
    Ok(trainer.net)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(600);
    let res: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(16);

    let dcign = fit(TrainMode::Disentangled, steps, res)?;
    let baseline = fit(TrainMode::Baseline, steps, res)?;
    let layout = dcign.layout().clone();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let held_out: Vec<TransformBatch> = (0..10)
        .flat_map(|_| [Factor::Azimuth, Factor::Elevation, Factor::LightAzimuth])
        .map(|f| make_batch(&mut rng, ObjectKind::Head, f, 20, res))
        .collect::<dcign::Result<_>>()?;

    println!("{:<28}{:>12}{:>12}", "", "clamped", "baseline");
    for factor in [Factor::Azimuth, Factor::Elevation, Factor::LightAzimuth] {
        let a = equivariance_from_batches(&dcign, &layout, factor, &held_out, (-90.0, 90.0))?;
        let b = equivariance_from_batches(&baseline, &layout, factor, &held_out, (-90.0, 90.0))?;
        println!("{:<28}{:>12.3}{:>12.3}", format!("equivariance r, {factor}"), a.mean_pearson, b.mean_pearson);
    }
    let a = invariance_score(&dcign, &layout, &held_out)?;
    let b = invariance_score(&baseline, &layout, &held_out)?;
    println!("{:<28}{:>12.3}{:>12.3}", "invariance ratio", a.ratio, b.ratio);

    let az = &held_out[0];
    println!("baseline latent most tied to azimuth: {}", identify_entangled_latent(&baseline, az)?);
    let sources: Vec<_> = held_out.iter().skip(1).step_by(3).map(|b| b.params[0].clone()).collect();
    let r = compare_novel_view(&dcign, &baseline, &layout, ObjectKind::Head, az, &sources, &[-60.0, 0.0, 60.0], res)?;
    println!("{:<28}{:>12.5}{:>12.5}", "novel-view MSE", r.dcign_mse, r.baseline_mse);
    Ok(())
}
