//! Straight-line re-implementation of one clamped training step for
//! `NetworkConfig::tiny(4)`, written with explicit loops and no library
//! kernels.
//!
//! Shapes: input 1x4x4 -> conv3 (pad 1) 2x4x4 -> relu -> pool2 2x2x2 ->
//! dense 8->6 -> relu -> mu, logvar heads 6->5. Decoder: dense 5->8 -> relu
//! -> 2x2x2 -> upsample2 2x4x4 -> conv3 (pad 1) 1x4x4 -> sigmoid.

use dcign::layout::Factor;
use dcign::network::{Network, NetworkConfig};
use dcign::optim::{rmsprop_step, OptimHyper, OptimState};
use dcign::trainer::{train_step, TrainConfig, TrainMode};
use dcign::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const D: usize = 5;

/// Parameters in the network's canonical order.
#[derive(Clone, Debug)]
pub struct TinyParams {
    pub enc_k: Vec<f64>,  // [2,1,3,3]
    pub enc_b: Vec<f64>,  // [2]
    pub enc_w: Vec<f64>,  // [6,8]
    pub enc_wb: Vec<f64>, // [6]
    pub mu_w: Vec<f64>,   // [5,6]
    pub mu_b: Vec<f64>,   // [5]
    pub lv_w: Vec<f64>,   // [5,6]
    pub lv_b: Vec<f64>,   // [5]
    pub dec_w: Vec<f64>,  // [8,5]
    pub dec_b: Vec<f64>,  // [8]
    pub dec_k: Vec<f64>,  // [1,2,3,3]
    pub dec_kb: Vec<f64>, // [1]
}

impl TinyParams {
    pub fn from_flat(t: &[Vec<f64>]) -> Self {
        assert_eq!(t.len(), 12);
        Self {
            enc_k: t[0].clone(),
            enc_b: t[1].clone(),
            enc_w: t[2].clone(),
            enc_wb: t[3].clone(),
            mu_w: t[4].clone(),
            mu_b: t[5].clone(),
            lv_w: t[6].clone(),
            lv_b: t[7].clone(),
            dec_w: t[8].clone(),
            dec_b: t[9].clone(),
            dec_k: t[10].clone(),
            dec_kb: t[11].clone(),
        }
    }

    pub fn to_flat(&self) -> Vec<Vec<f64>> {
        vec![
            self.enc_k.clone(),
            self.enc_b.clone(),
            self.enc_w.clone(),
            self.enc_wb.clone(),
            self.mu_w.clone(),
            self.mu_b.clone(),
            self.lv_w.clone(),
            self.lv_b.clone(),
            self.dec_w.clone(),
            self.dec_b.clone(),
            self.dec_k.clone(),
            self.dec_kb.clone(),
        ]
    }

    fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Self {
            enc_k: z(&self.enc_k),
            enc_b: z(&self.enc_b),
            enc_w: z(&self.enc_w),
            enc_wb: z(&self.enc_wb),
            mu_w: z(&self.mu_w),
            mu_b: z(&self.mu_b),
            lv_w: z(&self.lv_w),
            lv_b: z(&self.lv_b),
            dec_w: z(&self.dec_w),
            dec_b: z(&self.dec_b),
            dec_k: z(&self.dec_k),
            dec_kb: z(&self.dec_kb),
        }
    }
}

/// `x` at (c, y, x) of a CxHxW map, zero outside.
fn at(m: &[f64], h: usize, w: usize, c: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        m[(c * h + y as usize) * w + x as usize]
    }
}

pub struct OracleStep {
    pub params: TinyParams,
    pub cache: Vec<Vec<f64>>,
    pub reconstruction: f64,
    pub kl: f64,
}

/// One step: encode, sample, clamp, decode, loss, backward with invariance
/// gradients, batch-mean gradients, rmsprop. `images` are 16 pixels each.
#[allow(clippy::too_many_arguments)]
pub fn step<R: Rng>(
    p: &TinyParams,
    cache: &[Vec<f64>],
    images: &[Vec<f64>],
    active: &[usize],
    clamp: bool,
    scale: f64,
    (lr, rho, wd, eps): (f64, f64, f64, f64),
    rng: &mut R,
) -> OracleStep {
    let b = images.len();
    // 1. encoder forward, per example
    let mut conv_pre = vec![vec![0.0; 32]; b];
    let mut pooled = vec![vec![0.0; 8]; b];
    let mut pool_arg = vec![vec![0usize; 8]; b];
    let mut hid_pre = vec![vec![0.0; 6]; b];
    let mut hid = vec![vec![0.0; 6]; b];
    let mut mu = vec![vec![0.0; D]; b];
    let mut lv = vec![vec![0.0; D]; b];
    for e in 0..b {
        let x = &images[e];
        for o in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let mut s = p.enc_b[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let v = at(x, 4, 4, 0, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            s += p.enc_k[o * 9 + ky * 3 + kx] * v;
                        }
                    }
                    conv_pre[e][o * 16 + y * 4 + xx] = s;
                }
            }
        }
        let act: Vec<f64> = conv_pre[e].iter().map(|v| v.max(0.0)).collect();
        for c in 0..2 {
            for py in 0..2 {
                for px in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = c * 16 + (2 * py + dy) * 4 + 2 * px + dx;
                            if act[idx] > best {
                                best = act[idx];
                                arg = idx;
                            }
                        }
                    }
                    pooled[e][c * 4 + py * 2 + px] = best;
                    pool_arg[e][c * 4 + py * 2 + px] = arg;
                }
            }
        }
        for i in 0..6 {
            let mut s = p.enc_wb[i];
            for j in 0..8 {
                s += p.enc_w[i * 8 + j] * pooled[e][j];
            }
            hid_pre[e][i] = s;
            hid[e][i] = s.max(0.0);
        }
        for k in 0..D {
            let (mut m, mut l) = (p.mu_b[k], p.lv_b[k]);
            for j in 0..6 {
                m += p.mu_w[k * 6 + j] * hid[e][j];
                l += p.lv_w[k * 6 + j] * hid[e][j];
            }
            mu[e][k] = m;
            lv[e][k] = l;
        }
    }

    // 2. sample, example by example
    let mut eps_n = vec![vec![0.0; D]; b];
    let mut z = vec![vec![0.0; D]; b];
    for e in 0..b {
        for k in 0..D {
            eps_n[e][k] = rng.sample::<f64, _>(StandardNormal);
            z[e][k] = mu[e][k] + (0.5 * lv[e][k]).exp() * eps_n[e][k];
        }
    }

    // 3. clamp inactive latents to the batch mean
    let mut means = vec![0.0; D];
    for k in 0..D {
        let mut s = 0.0;
        for e in 0..b {
            s += z[e][k];
        }
        means[k] = s / b as f64;
    }
    let inactive = |k: usize| clamp && !active.contains(&k);
    let zc: Vec<Vec<f64>> = z
        .iter()
        .map(|row| (0..D).map(|k| if inactive(k) { means[k] } else { row[k] }).collect())
        .collect();

    // 4. decoder forward and loss
    let mut g = p.zeros_like();
    let mut rec = 0.0;
    let mut kl = 0.0;
    for e in 0..b {
        let mut d_pre = [0.0; 8];
        let mut d = [0.0; 8];
        for i in 0..8 {
            let mut s = p.dec_b[i];
            for k in 0..D {
                s += p.dec_w[i * D + k] * zc[e][k];
            }
            d_pre[i] = s;
            d[i] = s.max(0.0);
        }
        // upsample [2,2,2] -> [2,4,4]
        let mut up = vec![0.0; 32];
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    up[c * 16 + y * 4 + x] = d[c * 4 + (y / 2) * 2 + x / 2];
                }
            }
        }
        let mut logits = [0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                let mut s = p.dec_kb[0];
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let v = at(&up, 4, 4, c, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            s += p.dec_k[c * 9 + ky * 3 + kx] * v;
                        }
                    }
                }
                logits[y * 4 + x] = s;
            }
        }
        let x = &images[e];
        let mut g_logit = [0.0; 16];
        for i in 0..16 {
            let l = logits[i];
            rec += l.max(0.0) + (-l.abs()).exp().ln_1p() - x[i] * l;
            g_logit[i] = 1.0 / (1.0 + (-l).exp()) - x[i];
        }
        for k in 0..D {
            kl += 0.5 * (lv[e][k].exp() + mu[e][k] * mu[e][k] - 1.0 - lv[e][k]);
        }

        // 5. decoder backward
        let mut g_up = vec![0.0; 32];
        for y in 0..4 {
            for x in 0..4 {
                let go = g_logit[y * 4 + x];
                g.dec_kb[0] += go;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if yy < 0 || xx < 0 || yy >= 4 || xx >= 4 {
                                continue;
                            }
                            let ui = c * 16 + yy as usize * 4 + xx as usize;
                            g.dec_k[c * 9 + ky * 3 + kx] += go * up[ui];
                            g_up[ui] += go * p.dec_k[c * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
        let mut g_d = [0.0; 8];
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    g_d[c * 4 + (y / 2) * 2 + x / 2] += g_up[c * 16 + y * 4 + x];
                }
            }
        }
        let mut g_zc = [0.0; D];
        for i in 0..8 {
            let gd = if d_pre[i] > 0.0 { g_d[i] } else { 0.0 };
            g.dec_b[i] += gd;
            for k in 0..D {
                g.dec_w[i * D + k] += gd * zc[e][k];
                g_zc[k] += gd * p.dec_w[i * D + k];
            }
        }

        // 6. gradient at z: decoder gradient for active latents, pull toward
        // the batch mean for clamped ones
        let mut g_mu = [0.0; D];
        let mut g_lv = [0.0; D];
        for k in 0..D {
            let gz = if inactive(k) { scale * (z[e][k] - means[k]) } else { g_zc[k] };
            let sigma = (0.5 * lv[e][k]).exp();
            g_mu[k] = gz + mu[e][k];
            g_lv[k] = gz * eps_n[e][k] * 0.5 * sigma + 0.5 * (lv[e][k].exp() - 1.0);
        }

        // 7. encoder backward
        let mut g_hid = [0.0; 6];
        for k in 0..D {
            g.mu_b[k] += g_mu[k];
            g.lv_b[k] += g_lv[k];
            for j in 0..6 {
                g.mu_w[k * 6 + j] += g_mu[k] * hid[e][j];
                g.lv_w[k * 6 + j] += g_lv[k] * hid[e][j];
                g_hid[j] += g_mu[k] * p.mu_w[k * 6 + j] + g_lv[k] * p.lv_w[k * 6 + j];
            }
        }
        let mut g_pool = [0.0; 8];
        for i in 0..6 {
            let gh = if hid_pre[e][i] > 0.0 { g_hid[i] } else { 0.0 };
            g.enc_wb[i] += gh;
            for j in 0..8 {
                g.enc_w[i * 8 + j] += gh * pooled[e][j];
                g_pool[j] += gh * p.enc_w[i * 8 + j];
            }
        }
        let mut g_conv = [0.0; 32];
        for j in 0..8 {
            g_conv[pool_arg[e][j]] += g_pool[j];
        }
        for o in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let idx = o * 16 + y * 4 + xx;
                    let go = if conv_pre[e][idx] > 0.0 { g_conv[idx] } else { 0.0 };
                    g.enc_b[o] += go;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let v = at(x, 4, 4, 0, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            g.enc_k[o * 9 + ky * 3 + kx] += go * v;
                        }
                    }
                }
            }
        }
    }

    // 8. batch mean and rmsprop
    let params = p.to_flat();
    let grads = g.to_flat();
    let mut new_params = Vec::new();
    let mut new_cache = Vec::new();
    for ((pt, gt), ct) in params.iter().zip(&grads).zip(cache) {
        let mut np = pt.clone();
        let mut nc = ct.clone();
        for i in 0..pt.len() {
            let gi = gt[i] / b as f64 + wd * pt[i];
            nc[i] = (1.0 - rho) * ct[i] + rho * gi * gi;
            np[i] = pt[i] - lr * gi / (nc[i].sqrt() + eps);
        }
        new_params.push(np);
        new_cache.push(nc);
    }
    OracleStep {
        params: TinyParams::from_flat(&new_params),
        cache: new_cache,
        reconstruction: rec / b as f64,
        kl: kl / b as f64,
    }
}

/// Agreement required between the library step and the oracle.
pub const TOL: f64 = 1e-10;

fn config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig::tiny(4).with_seed(17),
        mode,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

/// Runs three steps with rotating batch types through both implementations
/// and returns the largest parameter difference.
pub fn max_deviation(seed: u64, mode: TrainMode) -> f64 {
    let mut cfg = config(mode);
    cfg.network.seed = seed;
    cfg.network.init.scale = 2.0;
    let mut net = Network::<f64>::build(cfg.network.clone()).unwrap();
    let mut state = OptimState::new(&net.params());
    let mut o_params = TinyParams::from_flat(&net.params().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>());
    let mut o_cache: Vec<Vec<f64>> = net.params().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut data_rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut rng_lib = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_oracle = rng_lib.clone();
    let h = cfg.optim;
    let mut worst: f64 = 0.0;
    for (i, factor) in [Factor::Azimuth, Factor::Intrinsic, Factor::LightAzimuth].into_iter().enumerate() {
        let b = 4;
        let images: Vec<Vec<f64>> = (0..b).map(|_| (0..16).map(|_| data_rng.random::<f64>()).collect()).collect();
        let batch = Tensor::new(&[b, 1, 4, 4], images.concat()).unwrap();
        let active = cfg.layout().active_indices(factor).unwrap();
        let loss = train_step(&mut net, &batch, &active, &mut state, &cfg, &mut rng_lib).unwrap();
        let o = step(
            &o_params,
            &o_cache,
            &images,
            &active,
            mode == TrainMode::Disentangled,
            cfg.invariance_scale,
            (h.learning_rate, h.sq_decay, h.weight_decay, h.epsilon),
            &mut rng_oracle,
        );
        assert!((loss.reconstruction - o.reconstruction).abs() < TOL * o.reconstruction.abs().max(1.0), "step {i}");
        assert!((loss.kl - o.kl).abs() < TOL * o.kl.abs().max(1.0), "step {i}");
        o_params = o.params;
        o_cache = o.cache;
        for (t, o) in net.params().iter().zip(o_params.to_flat()) {
            for (a, b) in t.data().iter().zip(&o) {
                worst = worst.max((a - b).abs());
            }
        }
        for (t, o) in state.cache.iter().zip(&o_cache) {
            for (a, b) in t.data().iter().zip(o) {
                worst = worst.max((a - b).abs() / b.abs().max(1e-12).max(1.0));
            }
        }
    }
    worst
}

/// Three rmsprop steps against a scalar re-derivation with the default
/// hyperparameters written out as literals; returns the largest deviation
/// in parameters or cache.
pub fn rmsprop_deviation(seed: u64) -> f64 {
    let h = OptimHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p0: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
    let grads: Vec<Vec<f64>> = (0..3).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut p = Tensor::new(&[7], p0.clone()).unwrap();
    let mut state = OptimState::new(&[&p]);
    let (mut q, mut c) = (p0, vec![0.0; 7]);
    let mut worst: f64 = 0.0;
    for g in &grads {
        let gt = Tensor::new(&[7], g.clone()).unwrap();
        rmsprop_step(&mut [&mut p], &[&gt], &mut state, &h).unwrap();
        for i in 0..7 {
            let gi = g[i] + 0.01 * q[i];
            c[i] = 0.9 * c[i] + 0.1 * gi * gi;
            q[i] -= 0.0005 * gi / (c[i].sqrt() + 1e-8);
        }
        for i in 0..7 {
            worst = worst.max((p.data()[i] - q[i]).abs());
            worst = worst.max((state.cache[0].data()[i] - c[i]).abs());
        }
    }
    assert_eq!(state.step, 3);
    worst
}
