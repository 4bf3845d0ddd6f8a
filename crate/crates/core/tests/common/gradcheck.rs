//! Central finite-difference checks in f64.

use dcign::loss::{kl_divergence, reconstruction_loss, reconstruction_loss_logits, Likelihood};
use dcign::network::{reparameterize, reparameterize_backward, LatentDistribution, Network, NetworkConfig};
use dcign::ops::{self, ActivationKind, Layer};
use dcign::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale of `REL_TOL * FLOOR`.
const FLOOR: f64 = 1e-3;
/// At most this fraction of coordinates may sit on a kink (ReLU at 0, pool tie).
const MAX_KINK_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, Default)]
pub struct CheckStats {
    pub case: String,
    pub seeds: u64,
    pub coords: usize,
    pub kinks: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl CheckStats {
    pub fn new(case: &str) -> Self {
        Self {
            case: case.to_string(),
            ..Default::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.seeds >= SEEDS
            && self.coords > 0
            && self.max_rel < REL_TOL
            && (self.kinks as f64) <= MAX_KINK_FRACTION * self.coords as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} seeds, {} coords, {} kinks skipped, max rel err {:.2e}{}",
            self.case,
            self.seeds,
            self.coords,
            self.kinks,
            self.max_rel,
            if self.worst.is_empty() { String::new() } else { format!(" ({})", self.worst) }
        )
    }

    /// Compares `analytic[i]` with the central difference of `f` along
    /// coordinate `i` of `x`, for every `i`.
    pub fn check(&mut self, label: &str, x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
        assert_eq!(x.len(), analytic.len(), "{label}: gradient length");
        let mut probe = x.to_vec();
        let f0 = f(x);
        for i in 0..x.len() {
            probe[i] = x[i] + STEP;
            let fp = f(&probe);
            probe[i] = x[i] - STEP;
            let fm = f(&probe);
            probe[i] = x[i];
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            self.coords += 1;
            if rel >= REL_TOL {
                // one-sided slopes disagree at a non-differentiable point
                let (right, left) = ((fp - f0) / STEP, (f0 - fm) / STEP);
                let jump = (right - left).abs();
                if jump > 10.0 * REL_TOL * right.abs().max(left.abs()).max(FLOOR) {
                    self.kinks += 1;
                    continue;
                }
            }
            if rel > self.max_rel {
                self.max_rel = rel;
                self.worst = format!("{label}[{i}]: analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, lo, hi)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_params(layer: &Layer<f64>, flat: &[f64]) -> Layer<f64> {
    let mut l = layer.clone();
    let mut off = 0;
    for p in l.params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    l
}

fn flat_params(layer: &Layer<f64>) -> Vec<f64> {
    layer.params().iter().flat_map(|p| p.data().iter().copied()).collect()
}

/// Checks input and parameter gradients of `layer` under the objective
/// `sum(probe * forward(x))`.
pub fn check_layer(stats: &mut CheckStats, rng: &mut ChaCha8Rng, layer: &Layer<f64>, input: &Tensor<f64>) {
    let (out, cache) = ops::forward(layer, input).unwrap();
    let probe = uniform(rng, out.len(), -1.0, 1.0);
    let g_out = Tensor::new(out.shape(), probe.clone()).unwrap();
    let (g_in, g_params) = ops::backward(layer, &cache, &g_out).unwrap();
    let shape = input.shape().to_vec();
    stats.check("input", input.data(), g_in.data(), |x| {
        let t = Tensor::new(&shape, x.to_vec()).unwrap();
        dot(ops::forward(layer, &t).unwrap().0.data(), &probe)
    });
    let theta = flat_params(layer);
    if !theta.is_empty() {
        let analytic: Vec<f64> = g_params.iter().flat_map(|p| p.data().iter().copied()).collect();
        stats.check("params", &theta, &analytic, |p| {
            dot(ops::forward(&with_params(layer, p), input).unwrap().0.data(), &probe)
        });
    }
}

fn conv_case(case: &str, out_channels: std::ops::RangeInclusive<usize>) -> CheckStats {
    let mut s = CheckStats::new(case);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_in = rng.random_range(1..=3);
        let c_out = rng.random_range(out_channels.clone());
        let k = [1, 2, 3, 5][rng.random_range(0..4)];
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=k / 2);
        let (h, w) = (rng.random_range(k.max(4)..=8), rng.random_range(k.max(4)..=8));
        let batch = rng.random_range(0..=2);
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let layer = Layer::Conv {
            kernels: tensor(&mut rng, &[c_out, c_in, k, k], -bound, bound),
            bias: tensor(&mut rng, &[c_out], -0.5, 0.5),
            stride,
            padding,
        };
        let shape: Vec<usize> = if batch == 0 { vec![c_in, h, w] } else { vec![batch, c_in, h, w] };
        let input = tensor(&mut rng, &shape, -1.0, 1.0);
        check_layer(&mut s, &mut rng, &layer, &input);
        s.seeds += 1;
    }
    s
}

/// Few output channels (direct loop).
pub fn conv_narrow() -> CheckStats {
    conv_case("conv, 1-4 output channels", 1..=4)
}

/// Many output channels (column matrix and GEMM).
pub fn conv_wide() -> CheckStats {
    conv_case("conv, 5-9 output channels", 5..=9)
}

pub fn maxpool() -> CheckStats {
    let mut s = CheckStats::new("max pool");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let window = rng.random_range(2..=3);
        let c = rng.random_range(1..=3);
        let (h, w) = (window * rng.random_range(1..=4), window * rng.random_range(1..=4));
        let input = tensor(&mut rng, &[2, c, h, w], -1.0, 1.0);
        check_layer(&mut s, &mut rng, &Layer::MaxPool { window }, &input);
        s.seeds += 1;
    }
    s
}

pub fn upsample() -> CheckStats {
    let mut s = CheckStats::new("nearest-neighbor upsample");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let factor = rng.random_range(1..=3);
        let c = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let input = tensor(&mut rng, &[c, h, w], -1.0, 1.0);
        check_layer(&mut s, &mut rng, &Layer::Upsample { factor }, &input);
        s.seeds += 1;
    }
    s
}

pub fn dense() -> CheckStats {
    let mut s = CheckStats::new("dense");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=12));
        let layer = Layer::Dense {
            weight: tensor(&mut rng, &[m, n], -0.5, 0.5),
            bias: tensor(&mut rng, &[m], -0.5, 0.5),
        };
        let input = if seed % 2 == 0 {
            tensor(&mut rng, &[n], -1.0, 1.0)
        } else {
            tensor(&mut rng, &[3, n], -1.0, 1.0)
        };
        check_layer(&mut s, &mut rng, &layer, &input);
        s.seeds += 1;
    }
    s
}

pub fn activations() -> CheckStats {
    let mut s = CheckStats::new("relu and sigmoid");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let input = tensor(&mut rng, &[2, 3, 4], -4.0, 4.0);
        for kind in [ActivationKind::Relu, ActivationKind::Sigmoid] {
            check_layer(&mut s, &mut rng, &Layer::Activation(kind), &input);
        }
        check_layer(&mut s, &mut rng, &Layer::Reshape { to: vec![12] }, &input);
        s.seeds += 1;
    }
    s
}

pub fn reparameterization() -> CheckStats {
    let mut s = CheckStats::new("reparameterization");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let d = rng.random_range(1..=10);
        let dist = LatentDistribution {
            mu: uniform(&mut rng, d, -2.0, 2.0),
            logvar: uniform(&mut rng, d, -3.0, 2.0),
        };
        let noise = uniform(&mut rng, d, -2.0, 2.0);
        let probe = uniform(&mut rng, d, -1.0, 1.0);
        let (gmu, glv) = reparameterize_backward(&dist, &noise, &probe);
        let lv = dist.logvar.clone();
        stats_reparam(&mut s, &dist.mu, &gmu, |m| {
            dot(&reparameterize(&LatentDistribution { mu: m.to_vec(), logvar: lv.clone() }, &noise).unwrap(), &probe)
        });
        let mu = dist.mu.clone();
        stats_reparam(&mut s, &dist.logvar, &glv, |l| {
            dot(&reparameterize(&LatentDistribution { mu: mu.clone(), logvar: l.to_vec() }, &noise).unwrap(), &probe)
        });
        s.seeds += 1;
    }
    s
}

fn stats_reparam(s: &mut CheckStats, x: &[f64], g: &[f64], f: impl Fn(&[f64]) -> f64) {
    s.check("latent", x, g, f);
}

pub fn kl() -> CheckStats {
    let mut s = CheckStats::new("KL divergence");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let d = rng.random_range(1..=10);
        let mu = uniform(&mut rng, d, -2.0, 2.0);
        let lv = uniform(&mut rng, d, -3.0, 2.0);
        let (_, gmu, glv) = kl_divergence(&LatentDistribution { mu: mu.clone(), logvar: lv.clone() });
        let lv2 = lv.clone();
        s.check("mu", &mu, &gmu, |m| kl_divergence(&LatentDistribution { mu: m.to_vec(), logvar: lv2.clone() }).0);
        s.check("logvar", &lv, &glv, |l| kl_divergence(&LatentDistribution { mu: mu.clone(), logvar: l.to_vec() }).0);
        s.seeds += 1;
    }
    s
}

pub fn reconstruction() -> CheckStats {
    let mut s = CheckStats::new("reconstruction losses");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let shape = [1, 3, 4];
        let x = tensor(&mut rng, &shape, 0.0, 1.0);
        let p = tensor(&mut rng, &shape, 0.05, 0.95);
        let l = tensor(&mut rng, &shape, -4.0, 4.0);
        for lk in [Likelihood::Bernoulli, Likelihood::Mse] {
            let (_, g) = reconstruction_loss(&x, &p, lk).unwrap();
            s.check("probabilities", p.data(), g.data(), |v| {
                reconstruction_loss(&x, &Tensor::new(&shape, v.to_vec()).unwrap(), lk).unwrap().0
            });
            let (_, g) = reconstruction_loss_logits(&x, &l, lk).unwrap();
            s.check("logits", l.data(), g.data(), |v| {
                reconstruction_loss_logits(&x, &Tensor::new(&shape, v.to_vec()).unwrap(), lk).unwrap().0
            });
        }
        s.seeds += 1;
    }
    s
}

/// Full variational objective through encoder, sample and decoder with fixed
/// noise: every parameter and every input pixel.
pub fn end_to_end(resolution: usize) -> CheckStats {
    let mut s = CheckStats::new(&format!("encoder + decoder, {resolution}x{resolution}"));
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let mut cfg = NetworkConfig::tiny(resolution).with_seed(seed);
        cfg.init.scale = 2.0;
        let net = Network::<f64>::build(cfg).unwrap();
        let batch = 2;
        let x = tensor(&mut rng, &[batch, 1, resolution, resolution], 0.0, 1.0);
        let noise = uniform(&mut rng, batch * net.latent_dim(), -1.5, 1.5);
        // the reconstruction target stays `x`; only the encoder input moves
        let objective = |net: &Network<f64>, input: &Tensor<f64>| -> f64 {
            let (lat, _) = net.encode_batch(input).unwrap();
            let dist = LatentDistribution { mu: lat.mu, logvar: lat.logvar };
            let z = reparameterize(&dist, &noise).unwrap();
            let (_, logits, _) = net.decode_with_logits(&z).unwrap();
            reconstruction_loss_logits(&x, &logits, Likelihood::Bernoulli).unwrap().0 + kl_divergence(&dist).0
        };

        let (lat, ec) = net.encode_batch(&x).unwrap();
        let dist = LatentDistribution { mu: lat.mu, logvar: lat.logvar };
        let z = reparameterize(&dist, &noise).unwrap();
        let (_, logits, dc) = net.decode_with_logits(&z).unwrap();
        let (_, gl) = reconstruction_loss_logits(&x, &logits, Likelihood::Bernoulli).unwrap();
        let (_, kmu, klv) = kl_divergence(&dist);
        let mut grads = net.zero_grads();
        let gz = net.decode_backward_logits(&dc, &gl, &mut grads).unwrap();
        let (gmu, glv) = reparameterize_backward(&dist, &noise, &gz);
        let gmu: Vec<f64> = gmu.iter().zip(&kmu).map(|(a, b)| a + b).collect();
        let glv: Vec<f64> = glv.iter().zip(&klv).map(|(a, b)| a + b).collect();
        let gx = net.encode_backward(&ec, &gmu, &glv, &mut grads, true).unwrap().unwrap();

        let shape = x.shape().to_vec();
        s.check("input pixels", x.data(), gx.data(), |v| objective(&net, &Tensor::new(&shape, v.to_vec()).unwrap()));

        let theta: Vec<f64> = net.params().iter().flat_map(|p| p.data().iter().copied()).collect();
        let analytic: Vec<f64> = grads.flat().iter().flat_map(|p| p.data().iter().copied()).collect();
        s.check("parameters", &theta, &analytic, |v| {
            let mut n = net.clone();
            let mut off = 0;
            for p in n.params_mut() {
                let len = p.len();
                p.data_mut().copy_from_slice(&v[off..off + len]);
                off += len;
            }
            objective(&n, &x)
        });
        s.seeds += 1;
    }
    s
}

/// Every case, in a fixed order.
pub fn all_cases() -> Vec<CheckStats> {
    vec![
        conv_narrow(),
        conv_wide(),
        maxpool(),
        upsample(),
        dense(),
        activations(),
        reparameterization(),
        kl(),
        reconstruction(),
        end_to_end(4),
        end_to_end(8),
    ]
}
