//! Compares the hand-derived backward pass of a whole network (encoder,
//! reparameterization, decoder, both loss terms) with central finite
//! differences at 64-bit precision.
//!
//!     cargo run --release --example gradient_check -- [seed]

use dcign::loss::{kl_divergence, reconstruction_loss_logits, Likelihood};
use dcign::network::{reparameterize, reparameterize_backward};
use dcign::scene::{render, SceneParams};
use dcign::{Network, NetworkConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-5;

fn objective(net: &Network<f64>, x: &Tensor<f64>, noise: &[f64]) -> Result<f64> {
    let (dist, _) = net.encode(x)?;
    let z = reparameterize(&dist, noise)?;
    let (_, logits, _) = net.decode_with_logits(&z)?;
    let (rec, _) = reconstruction_loss_logits(x, &logits, Likelihood::Bernoulli)?;
    Ok(rec + kl_divergence(&dist).0)
}

fn main() -> std::result::Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::build(NetworkConfig::tiny(8).with_seed(seed))?;
    let p = SceneParams {
        azimuth: rng.random_range(-90.0..90.0),
        ..SceneParams::neutral()
    };
    let x: Tensor<f64> = render(&p, 8)?.cast();
    let noise: Vec<f64> = (0..net.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();

    // analytic
    let mut grads = net.zero_grads();
    let (dist, enc) = net.encode(&x)?;
    let z = reparameterize(&dist, &noise)?;
    let (_, logits, dec) = net.decode_with_logits(&z)?;
    let (_, g_logits) = reconstruction_loss_logits(&x, &logits, Likelihood::Bernoulli)?;
    let g_z = net.decode_backward_logits(&dec, &g_logits, &mut grads)?;
    let (mut g_mu, mut g_lv) = reparameterize_backward(&dist, &noise, &g_z);
    let (_, k_mu, k_lv) = kl_divergence(&dist);
    g_mu.iter_mut().zip(&k_mu).for_each(|(a, b)| *a += b);
    g_lv.iter_mut().zip(&k_lv).for_each(|(a, b)| *a += b);
    net.encode_backward(&enc, &g_mu, &g_lv, &mut grads, false)?;
    let analytic: Vec<Vec<f64>> = grads.flat().iter().map(|t| t.data().to_vec()).collect();

    // numeric, tensor by tensor
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    let mut worst: f64 = 0.0;
    for (t, name) in names.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        for i in 0..analytic[t].len() {
            let orig = net.params()[t].data()[i];
            net.params_mut()[t].data_mut()[i] = orig + STEP;
            let up = objective(&net, &x, &noise)?;
            net.params_mut()[t].data_mut()[i] = orig - STEP;
            let down = objective(&net, &x, &noise)?;
            net.params_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[t][i];
            max_rel = max_rel.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
        println!("{name:<24} {:>5} params  max rel err {max_rel:.2e}", analytic[t].len());
        worst = worst.max(max_rel);
    }
    println!("worst {worst:.2e}");
    Ok(())
}
