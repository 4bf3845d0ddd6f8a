//! Clamped single-factor training and the plain variational baseline.
//!
//! Each step draws a mini-batch in which one scene factor varies. In
//! disentangled mode the latents not assigned to that factor are replaced by
//! their batch mean before decoding, and their gradient at the sample is
//! replaced by a small pull toward the batch mean.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Factor, LatentLayout};
use crate::loss::{kl_divergence, reconstruction_loss_logits, Likelihood, LossBreakdown};
use crate::network::{reparameterize, reparameterize_backward, LatentDistribution, Network, NetworkConfig};
use crate::optim::{rmsprop_step, OptimHyper, OptimState};
use crate::scene::{make_batch, ObjectKind, TransformBatch};
use crate::tensor::{Scalar, Tensor};

/// Relative frequency of each batch type, in `Factor::ALL` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRatio(pub [f64; 4]);

impl Default for BatchRatio {
    fn default() -> Self {
        BatchRatio([1.0, 1.0, 1.0, 10.0])
    }
}

impl BatchRatio {
    /// Only azimuth and intrinsic batches, for objects without light or
    /// elevation changes.
    pub fn azimuth_intrinsic(azimuth: f64, intrinsic: f64) -> Self {
        BatchRatio([azimuth, 0.0, 0.0, intrinsic])
    }

    /// Entries must be finite and non-negative with a positive sum.
    pub fn validate(&self) -> Result<()> {
        let ok = self.0.iter().all(|w| w.is_finite() && *w >= 0.0) && self.total() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid batch ratio {self}")))
        }
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn weight(&self, factor: Factor) -> f64 {
        self.0[factor.tag() as usize]
    }

    pub fn probability(&self, factor: Factor) -> f64 {
        self.weight(factor) / self.total()
    }
}

impl fmt::Display for BatchRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a}:{b}:{c}:{d}")
    }
}

impl FromStr for BatchRatio {
    type Err = Error;

    /// Parses `azimuth:elevation:light:intrinsic`, e.g. `1:1:1:10`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config(format!("batch ratio {s:?} is not four ':'-separated numbers"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut w = [0.0; 4];
        for (slot, p) in w.iter_mut().zip(parts) {
            *slot = p.trim().parse().map_err(|_| bad())?;
        }
        let ratio = BatchRatio(w);
        ratio.validate()?;
        Ok(ratio)
    }
}

/// Draws a batch type with probability proportional to its ratio entry.
pub fn select_batch_type<R: Rng + ?Sized>(rng: &mut R, ratio: &BatchRatio) -> Factor {
    let u = rng.random::<f64>() * ratio.total();
    let mut acc = 0.0;
    let mut last = Factor::Intrinsic;
    for f in Factor::ALL {
        let w = ratio.weight(f);
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = f;
        if u < acc {
            return f;
        }
    }
    last
}

fn check_matrix<T: Scalar>(z: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *z.shape() {
        [b, d] if b >= 2 => Ok((b, d)),
        ref s => Err(Error::Contract(format!("{what} must be [B>=2, D], got {s:?}"))),
    }
}

fn inactive_columns(d: usize, active: &[usize]) -> Result<Vec<usize>> {
    if active.is_empty() {
        return Err(Error::Contract("active latent set is empty".into()));
    }
    if let Some(i) = active.iter().find(|&&i| i >= d) {
        return Err(Error::Contract(format!("active index {i} out of range for {d} latents")));
    }
    Ok((0..d).filter(|i| !active.contains(i)).collect())
}

fn column_mean<T: Scalar>(z: &[T], b: usize, d: usize, col: usize) -> T {
    let mut sum = T::zero();
    for r in 0..b {
        sum += z[r * d + col];
    }
    sum / T::from_f64(b as f64)
}

/// Replaces every inactive column of `z` (`[B, D]`) by its batch mean.
pub fn clamp_latents<T: Scalar>(z: &Tensor<T>, active: &[usize]) -> Result<Tensor<T>> {
    let (b, d) = check_matrix(z, "latent batch")?;
    let inactive = inactive_columns(d, active)?;
    let mut out = z.clone();
    let data = out.data_mut();
    for col in inactive {
        let mean = column_mean(z.data(), b, d, col);
        for r in 0..b {
            data[r * d + col] = mean;
        }
    }
    Ok(out)
}

/// Gradient at the sampled latents after surgery: active columns keep the
/// decoder gradient, inactive columns get `scale * (z - column mean)`.
pub fn invariance_gradients<T: Scalar>(
    z: &Tensor<T>,
    active: &[usize],
    decoder_grad_z: &Tensor<T>,
    scale: f64,
) -> Result<Tensor<T>> {
    let (b, d) = check_matrix(z, "latent batch")?;
    if decoder_grad_z.shape() != z.shape() {
        return Err(Error::Contract(format!(
            "gradient shape {:?} differs from latent shape {:?}",
            decoder_grad_z.shape(),
            z.shape()
        )));
    }
    let inactive = inactive_columns(d, active)?;
    let scale = T::from_f64(scale);
    let mut out = decoder_grad_z.clone();
    let data = out.data_mut();
    for col in inactive {
        let mean = column_mean(z.data(), b, d, col);
        for r in 0..b {
            data[r * d + col] = scale * (z.data()[r * d + col] - mean);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Clamping and invariance gradients on every batch.
    #[default]
    Disentangled,
    /// Plain variational training on the same batches.
    Baseline,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disentangled" => Ok(TrainMode::Disentangled),
            "baseline" => Ok(TrainMode::Baseline),
            _ => Err(Error::config(format!("unknown training mode {s:?}"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Disentangled => "disentangled",
            TrainMode::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub ratio: BatchRatio,
    pub invariance_scale: f64,
    pub optim: OptimHyper,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub likelihood: Likelihood,
    pub object: ObjectKind,
    /// Write a checkpoint every this many steps; 0 disables intermediate ones.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    /// Desk-scale heads: 3000 batches of 20 at 32x32.
    fn default() -> Self {
        Self {
            network: NetworkConfig::desk_scale(),
            ratio: BatchRatio::default(),
            invariance_scale: 0.01,
            optim: OptimHyper::default(),
            steps: 3000,
            batch_size: 20,
            seed: 0,
            mode: TrainMode::Disentangled,
            likelihood: Likelihood::Bernoulli,
            object: ObjectKind::Head,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn layout(&self) -> &LatentLayout {
        &self.network.layout
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.ratio.validate()?;
        self.optim.validate()?;
        if !(self.invariance_scale > 0.0 && self.invariance_scale.is_finite()) {
            return Err(Error::config(format!(
                "invariance scale must be positive, got {}",
                self.invariance_scale
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch size {} is below 2", self.batch_size)));
        }
        for f in Factor::ALL {
            if self.ratio.weight(f) > 0.0 {
                if !self.layout().contains(f) {
                    return Err(Error::config(format!("ratio schedules {f} batches but the layout has no {f} latent")));
                }
                if !self.object.factors().contains(&f) {
                    return Err(Error::config(format!("{:?} scenes cannot vary {f}", self.object)));
                }
            }
        }
        Ok(())
    }
}

/// Batch-mean losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub factor: Factor,
    pub loss: LossBreakdown,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\tfactor\treconstruction\tkl\ttotal";

    /// One tab-separated log line without the trailing newline.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.factor, self.loss.reconstruction, self.loss.kl, self.loss.total
        )
    }
}

/// Running means over all steps seen so far.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub steps: u64,
    pub mean: LossBreakdown,
    pub last: Option<StepMetrics>,
}

impl TrainMetrics {
    pub fn record(&mut self, m: StepMetrics) {
        self.steps += 1;
        let n = self.steps as f64;
        let upd = |mean: f64, x: f64| mean + (x - mean) / n;
        self.mean = LossBreakdown {
            reconstruction: upd(self.mean.reconstruction, m.loss.reconstruction),
            kl: upd(self.mean.kl, m.loss.kl),
            total: upd(self.mean.total, m.loss.total),
        };
        self.last = Some(m);
    }
}

/// Where the reparameterization noise stream stands; enough to resume it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

const NOISE_STREAM: u64 = 1;

fn noise_rng(state: RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

/// Network, optimizer state and noise stream of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f32> {
    pub config: TrainConfig,
    pub net: Network<T>,
    pub optim: OptimState<T>,
    rng: ChaCha8Rng,
    rng_seed: u64,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh network initialized from `config.network.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::build(config.network.clone())?;
        let optim = OptimState::new(&net.params());
        let state = RngState {
            seed: config.seed,
            stream: NOISE_STREAM,
            word_pos: 0,
        };
        Ok(Self {
            rng: noise_rng(state),
            rng_seed: config.seed,
            config,
            net,
            optim,
        })
    }

    /// Resumes from saved parts.
    pub fn from_parts(config: TrainConfig, net: Network<T>, optim: OptimState<T>, rng: RngState) -> Result<Self> {
        config.validate()?;
        if net.config() != &config.network {
            return Err(Error::config("network does not match the training config"));
        }
        if optim.cache.len() != net.params().len() {
            return Err(Error::Corrupt("optimizer state does not match the network".into()));
        }
        Ok(Self {
            rng: noise_rng(rng),
            rng_seed: rng.seed,
            config,
            net,
            optim,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng_seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    /// Latent indices the batch's factor owns under the current layout.
    pub fn active_indices(&self, factor: Factor) -> Result<Vec<usize>> {
        self.config.layout().active_indices(factor)
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &TransformBatch) -> Result<StepMetrics> {
        batch.validate()?;
        let images = batch.stacked::<T>()?;
        let active = self.active_indices(batch.active)?;
        let loss = train_step(
            &mut self.net,
            &images,
            &active,
            &mut self.optim,
            &self.config,
            &mut self.rng,
        )?;
        Ok(StepMetrics {
            step: self.optim.step,
            factor: batch.active,
            loss,
        })
    }
}

/// Draws `n` standard normal values in order.
pub fn draw_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Forward, loss, backward with optional clamping and gradient surgery, and
/// one rmsprop update. `images` is `[B,1,H,W]`; returns batch-mean losses.
///
/// Reparameterization noise is drawn from `rng` example by example, latent by
/// latent.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    active: &[usize],
    optim: &mut OptimState<T>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let b = match *images.shape() {
        [b, 1, _, _] if b >= 2 => b,
        ref s => return Err(Error::Contract(format!("image batch must be [B>=2,1,H,W], got {s:?}"))),
    };
    let d = net.latent_dim();
    let disentangled = config.mode == TrainMode::Disentangled;

    let (latents, enc_cache) = net.encode_batch(images)?;
    let dist = LatentDistribution {
        mu: latents.mu,
        logvar: latents.logvar,
    };
    let noise = draw_noise::<T, _>(rng, b * d);
    let z = Tensor::new(&[b, d], reparameterize(&dist, &noise)?)?;
    let z_dec = if disentangled { clamp_latents(&z, active)? } else { z.clone() };

    let (_, logits, dec_cache) = net.decode_with_logits(z_dec.data())?;
    let (rec, grad_logits) = reconstruction_loss_logits(images, &logits, config.likelihood)?;
    let (kl, kl_mu, kl_logvar) = kl_divergence(&dist);

    let mut grads = net.zero_grads();
    let grad_z = net.decode_backward_logits(&dec_cache, &grad_logits, &mut grads)?;
    let grad_z = Tensor::new(&[b, d], grad_z)?;
    let grad_z = if disentangled {
        invariance_gradients(&z, active, &grad_z, config.invariance_scale)?
    } else {
        grad_z
    };
    let (mut grad_mu, mut grad_logvar) = reparameterize_backward(&dist, &noise, grad_z.data());
    for (g, k) in grad_mu.iter_mut().zip(&kl_mu) {
        *g += *k;
    }
    for (g, k) in grad_logvar.iter_mut().zip(&kl_logvar) {
        *g += *k;
    }
    net.encode_backward(&enc_cache, &grad_mu, &grad_logvar, &mut grads, false)?;
    grads.scale(T::one() / T::from_f64(b as f64));

    rmsprop_step(&mut net.params_mut(), &grads.flat(), optim, &config.optim)?;
    let n = b as f64;
    Ok(LossBreakdown::new(rec / n, kl / n))
}

/// Endless stream of freshly rendered batches.
///
/// Batch types come from one scheduler stream; each batch is rendered from
/// its own stream derived from the seed and the batch index, so batch `i`
/// is the same whether generated here or read back from a dataset file.
#[derive(Clone, Debug)]
pub struct BatchGenerator {
    pub object: ObjectKind,
    pub ratio: BatchRatio,
    pub batch_size: usize,
    pub resolution: usize,
    seed: u64,
    scheduler: ChaCha8Rng,
    index: u64,
}

const SCHEDULER_STREAM: u64 = u64::MAX;

impl BatchGenerator {
    pub fn new(object: ObjectKind, ratio: BatchRatio, batch_size: usize, resolution: usize, seed: u64) -> Result<Self> {
        ratio.validate()?;
        let mut scheduler = ChaCha8Rng::seed_from_u64(seed);
        scheduler.set_stream(SCHEDULER_STREAM);
        Ok(Self {
            object,
            ratio,
            batch_size,
            resolution,
            seed,
            scheduler,
            index: 0,
        })
    }

    /// Generator matching a training config.
    pub fn for_config(config: &TrainConfig) -> Result<Self> {
        Self::new(
            config.object,
            config.ratio,
            config.batch_size,
            config.network.resolution,
            config.seed,
        )
    }

    /// Number of batches produced so far.
    pub fn position(&self) -> u64 {
        self.index
    }

    pub fn next_batch(&mut self) -> Result<TransformBatch> {
        let factor = select_batch_type(&mut self.scheduler, &self.ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        self.index += 1;
        make_batch(&mut rng, self.object, factor, self.batch_size, self.resolution)
    }
}

impl Iterator for BatchGenerator {
    type Item = Result<TransformBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// How a call to [`train`] ended.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps_run: u64,
    /// The source ran dry before the requested number of steps.
    pub exhausted: bool,
    pub metrics: TrainMetrics,
}

/// Runs up to `config.steps - trainer.step_count()` steps from `source`,
/// appending one metrics line per step to `log` (header first when the
/// trainer is at step 0). `on_checkpoint` is called every
/// `config.checkpoint_every` steps.
pub fn train<T, I, W>(
    trainer: &mut Trainer<T>,
    source: I,
    log: &mut W,
    mut on_checkpoint: impl FnMut(&Trainer<T>) -> Result<()>,
) -> Result<TrainSummary>
where
    T: Scalar,
    I: IntoIterator<Item = Result<TransformBatch>>,
    W: Write,
{
    let log_err = |e: std::io::Error| Error::io("metrics log", e);
    if trainer.step_count() == 0 {
        writeln!(log, "{}", StepMetrics::HEADER).map_err(log_err)?;
    }
    let mut metrics = TrainMetrics::default();
    let mut source = source.into_iter();
    let mut steps_run = 0;
    let mut exhausted = false;
    while trainer.step_count() < trainer.config.steps {
        let Some(batch) = source.next() else {
            exhausted = true;
            break;
        };
        let m = trainer.step(&batch?)?;
        writeln!(log, "{}", m.log_line()).map_err(log_err)?;
        metrics.record(m);
        steps_run += 1;
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.step_count() % every == 0 {
            on_checkpoint(trainer)?;
        }
    }
    log.flush().map_err(log_err)?;
    Ok(TrainSummary {
        steps_run,
        exhausted,
        metrics,
    })
}
