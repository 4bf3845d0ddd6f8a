//! Encoder/decoder assembly, the Gaussian latent parametrization and the
//! reparameterized sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LatentLayout;
use crate::ops::{self, conv_output_extent, ActivationKind, Layer, LayerCache};
use crate::tensor::{Scalar, Tensor};

/// One entry of the encoder or decoder layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Option<ActivationKind>,
    },
    Pool {
        window: usize,
    },
    Unpool {
        factor: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        activation: Option<ActivationKind>,
    },
    /// `[C,H,W]` to a flat vector.
    Flatten,
    /// Flat vector to `[channels, height, width]`.
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, activation: ActivationKind) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            activation: Some(activation),
        }
    }

    pub fn dense(in_features: usize, out_features: usize, activation: Option<ActivationKind>) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
            activation,
        }
    }
}

/// Weights are drawn from `U(-scale/sqrt(fan_in), scale/sqrt(fan_in))`; biases start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scale: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Square grayscale input of `resolution x resolution`.
    pub resolution: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub layout: LatentLayout,
    pub init: InitSpec,
    pub seed: u64,
}

impl NetworkConfig {
    /// 32x32 input, two conv+pool stages, 256-wide dense layer, 16 latents
    /// (azimuth, elevation, light at 0..3) and a mirrored decoder.
    pub fn desk_scale() -> Self {
        use ActivationKind::{Relu, Sigmoid};
        Self {
            resolution: 32,
            encoder: vec![
                LayerSpec::conv(1, 32, 5, Relu),
                LayerSpec::Pool { window: 2 },
                LayerSpec::conv(32, 64, 5, Relu),
                LayerSpec::Pool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(64 * 8 * 8, 256, Some(Relu)),
            ],
            decoder: vec![
                LayerSpec::dense(16, 256, Some(Relu)),
                LayerSpec::dense(256, 64 * 8 * 8, Some(Relu)),
                LayerSpec::Reshape {
                    channels: 64,
                    height: 8,
                    width: 8,
                },
                LayerSpec::Unpool { factor: 2 },
                LayerSpec::conv(64, 32, 5, Relu),
                LayerSpec::Unpool { factor: 2 },
                LayerSpec::conv(32, 1, 5, Sigmoid),
            ],
            layout: LatentLayout::standard(16).expect("static layout"),
            init: InitSpec::default(),
            seed: 0,
        }
    }

    /// Two-channel toy network with a 5-latent code (3 extrinsic, 2
    /// intrinsic), small enough for finite-difference checks. `resolution`
    /// must be even.
    pub fn tiny(resolution: usize) -> Self {
        use ActivationKind::{Relu, Sigmoid};
        let half = resolution / 2;
        Self {
            resolution,
            encoder: vec![
                LayerSpec::conv(1, 2, 3, Relu),
                LayerSpec::Pool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(2 * half * half, 6, Some(Relu)),
            ],
            decoder: vec![
                LayerSpec::dense(5, 2 * half * half, Some(Relu)),
                LayerSpec::Reshape {
                    channels: 2,
                    height: half,
                    width: half,
                },
                LayerSpec::Unpool { factor: 2 },
                LayerSpec::conv(2, 1, 3, Sigmoid),
            ],
            layout: LatentLayout::standard(5).expect("static layout"),
            init: InitSpec::default(),
            seed: 0,
        }
    }

    /// 150x150 input with a 200-dimensional code.
    pub fn full_scale() -> Self {
        use ActivationKind::{Relu, Sigmoid};
        let conv = |i, o, k, padding, act| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: 1,
            padding,
            activation: Some(act),
        };
        Self {
            resolution: 150,
            encoder: vec![
                conv(1, 96, 5, 2, Relu), // 150
                LayerSpec::Pool { window: 2 },
                conv(96, 64, 4, 0, Relu), // 72
                LayerSpec::Pool { window: 2 },
                conv(64, 32, 5, 2, Relu), // 36
                LayerSpec::Pool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(32 * 18 * 18, 200 * 2, Some(Relu)),
            ],
            decoder: vec![
                LayerSpec::dense(200, 32 * 18 * 18, Some(Relu)),
                LayerSpec::Reshape {
                    channels: 32,
                    height: 18,
                    width: 18,
                },
                LayerSpec::Unpool { factor: 2 },
                conv(32, 64, 5, 2, Relu), // 36
                LayerSpec::Unpool { factor: 2 },
                conv(64, 96, 4, 3, Relu), // 72 -> 75
                LayerSpec::Unpool { factor: 2 },
                conv(96, 1, 5, 2, Sigmoid), // 150
            ],
            layout: LatentLayout::standard(200).expect("static layout"),
            init: InitSpec::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn latent_dim(&self) -> usize {
        self.layout.total_dim()
    }

    /// Checks that every layer accepts its predecessor's output shape and
    /// returns the width of the encoder feature vector.
    pub fn validate(&self) -> Result<usize> {
        if self.resolution == 0 {
            return Err(Error::config("resolution must be positive"));
        }
        let enc_out = propagate(&self.encoder, vec![1, self.resolution, self.resolution], 0)?;
        let [features] = enc_out[..] else {
            return Err(Error::Config {
                layer: Some(self.encoder.len().saturating_sub(1)),
                message: format!("encoder must end in a flat vector, got shape {enc_out:?}"),
            });
        };
        let dec_out = propagate(&self.decoder, vec![self.latent_dim()], 0)?;
        if dec_out != [1, self.resolution, self.resolution] {
            return Err(Error::Config {
                layer: Some(self.decoder.len().saturating_sub(1)),
                message: format!(
                    "decoder output {dec_out:?} does not match input shape [1, {r}, {r}]",
                    r = self.resolution
                ),
            });
        }
        let final_act = match self.decoder.iter().rev().find(|s| {
            matches!(s, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
        }) {
            Some(LayerSpec::Conv { activation, .. }) | Some(LayerSpec::Dense { activation, .. }) => *activation,
            _ => None,
        };
        let trailing_ok = matches!(
            self.decoder.last(),
            Some(LayerSpec::Conv { .. }) | Some(LayerSpec::Dense { .. })
        );
        if final_act != Some(ActivationKind::Sigmoid) || !trailing_ok {
            return Err(Error::Config {
                layer: Some(self.decoder.len().saturating_sub(1)),
                message: "decoder must end in a sigmoid conv or dense layer".into(),
            });
        }
        Ok(features)
    }
}

fn propagate(specs: &[LayerSpec], mut shape: Vec<usize>, offset: usize) -> Result<Vec<usize>> {
    for (i, spec) in specs.iter().enumerate() {
        let err = |message: String| Error::Config {
            layer: Some(offset + i),
            message,
        };
        shape = match (spec, shape.as_slice()) {
            (
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                &[c, h, w],
            ) => {
                if c != *in_channels {
                    return Err(err(format!("conv expects {in_channels} input channels, previous layer produces {c}")));
                }
                if *out_channels == 0 {
                    return Err(err("conv needs at least one output channel".into()));
                }
                match (
                    conv_output_extent(h, *kernel, *stride, *padding),
                    conv_output_extent(w, *kernel, *stride, *padding),
                ) {
                    (Some(ho), Some(wo)) => vec![*out_channels, ho, wo],
                    _ => return Err(err(format!("kernel {kernel} does not fit a {h}x{w} input"))),
                }
            }
            (LayerSpec::Pool { window }, &[c, h, w]) => {
                if *window == 0 || h % window != 0 || w % window != 0 {
                    return Err(err(format!("{h}x{w} not divisible by pool window {window}")));
                }
                vec![c, h / window, w / window]
            }
            (LayerSpec::Unpool { factor }, &[c, h, w]) => {
                if *factor == 0 {
                    return Err(err("unpool factor must be positive".into()));
                }
                vec![c, h * factor, w * factor]
            }
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                },
                &[n],
            ) => {
                if n != *in_features {
                    return Err(err(format!("dense expects {in_features} inputs, previous layer produces {n}")));
                }
                if *out_features == 0 {
                    return Err(err("dense needs at least one output".into()));
                }
                vec![*out_features]
            }
            (LayerSpec::Flatten, &[c, h, w]) => vec![c * h * w],
            (
                LayerSpec::Reshape {
                    channels,
                    height,
                    width,
                },
                &[n],
            ) => {
                if n != channels * height * width || n == 0 {
                    return Err(err(format!("cannot reshape {n} values to [{channels},{height},{width}]")));
                }
                vec![*channels, *height, *width]
            }
            (spec, shape) => return Err(err(format!("{spec:?} cannot follow a layer producing {shape:?}"))),
        };
    }
    Ok(shape)
}

/// Diagonal Gaussian posterior: mean and natural-log variance per latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution<T = f32> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize<T: Scalar>(dist: &LatentDistribution<T>, noise: &[T]) -> Result<Vec<T>> {
    if noise.len() != dist.mu.len() || dist.logvar.len() != dist.mu.len() {
        return Err(Error::Dimension(format!(
            "noise of length {} for a {}-dimensional latent",
            noise.len(),
            dist.mu.len()
        )));
    }
    let half = T::from_f64(0.5);
    Ok(dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .zip(noise)
        .map(|((&m, &lv), &n)| m + (lv * half).exp() * n)
        .collect())
}

/// Gradients of a scalar w.r.t. `mu` and `logvar` given its gradient at `z`.
pub fn reparameterize_backward<T: Scalar>(
    dist: &LatentDistribution<T>,
    noise: &[T],
    grad_z: &[T],
) -> (Vec<T>, Vec<T>) {
    let half = T::from_f64(0.5);
    let grad_logvar = dist
        .logvar
        .iter()
        .zip(noise)
        .zip(grad_z)
        .map(|((&lv, &n), &g)| g * n * half * (lv * half).exp())
        .collect();
    (grad_z.to_vec(), grad_logvar)
}

/// Per-layer gradient storage in the network's canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    per_layer: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> Vec<&Tensor<T>> {
        self.per_layer.iter().flatten().collect()
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.per_layer.iter_mut().flatten().collect()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.flat_mut() {
            for v in t.data_mut() {
                *v = *v * factor;
            }
        }
    }

    fn accumulate(&mut self, layer: usize, grads: Vec<Tensor<T>>) {
        for (dst, src) in self.per_layer[layer].iter_mut().zip(grads) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += *s;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    layers: Vec<LayerCache<T>>,
    mu_head: LayerCache<T>,
    logvar_head: LayerCache<T>,
    input_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    layers: Vec<LayerCache<T>>,
    output_shape: Vec<usize>,
}

/// Posterior parameters for a batch, row-major `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLatents<T> {
    pub dim: usize,
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

impl<T: Scalar> BatchLatents<T> {
    pub fn batch_size(&self) -> usize {
        self.mu.len() / self.dim
    }

    pub fn example(&self, i: usize) -> LatentDistribution<T> {
        LatentDistribution {
            mu: self.mu[i * self.dim..(i + 1) * self.dim].to_vec(),
            logvar: self.logvar[i * self.dim..(i + 1) * self.dim].to_vec(),
        }
    }
}

/// Instantiated encoder and decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    encoder: Vec<Layer<T>>,
    mu_head: Layer<T>,
    logvar_head: Layer<T>,
    decoder: Vec<Layer<T>>,
}

fn expand<T: Scalar>(
    specs: &[LayerSpec],
    mut shape: Vec<usize>,
    init: InitSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Layer<T>>> {
    let mut layers = Vec::new();
    for spec in specs {
        shape = propagate(std::slice::from_ref(spec), shape, 0)?;
        match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                activation,
            } => {
                let fan_in = in_channels * kernel * kernel;
                layers.push(Layer::Conv {
                    kernels: init_weights(&[out_channels, in_channels, kernel, kernel], fan_in, init, rng),
                    bias: Tensor::zeros(&[out_channels]),
                    stride,
                    padding,
                });
                layers.extend(activation.map(Layer::Activation));
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                activation,
            } => {
                layers.push(dense_layer(in_features, out_features, init, rng));
                layers.extend(activation.map(Layer::Activation));
            }
            LayerSpec::Pool { window } => layers.push(Layer::MaxPool { window }),
            LayerSpec::Unpool { factor } => layers.push(Layer::Upsample { factor }),
            LayerSpec::Flatten => layers.push(Layer::Reshape { to: shape.clone() }),
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => layers.push(Layer::Reshape {
                to: vec![channels, height, width],
            }),
        }
    }
    Ok(layers)
}

fn dense_layer<T: Scalar>(inputs: usize, outputs: usize, init: InitSpec, rng: &mut ChaCha8Rng) -> Layer<T> {
    Layer::Dense {
        weight: init_weights(&[outputs, inputs], inputs, init, rng),
        bias: Tensor::zeros(&[outputs]),
    }
}

fn init_weights<T: Scalar>(shape: &[usize], fan_in: usize, init: InitSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = init.scale / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn run_layers<T: Scalar>(layers: &[Layer<T>], mut x: Tensor<T>) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (out, cache) = ops::forward(layer, &x)?;
        caches.push(cache);
        x = out;
    }
    Ok((x, caches))
}

fn ensure_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} contains non-finite values")))
    }
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes every parameter from the config seed.
    pub fn build(config: NetworkConfig) -> Result<Self> {
        let features = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = expand(&config.encoder, vec![1, config.resolution, config.resolution], config.init, &mut rng)?;
        let dim = config.latent_dim();
        let mu_head = dense_layer(features, dim, config.init, &mut rng);
        let logvar_head = dense_layer(features, dim, config.init, &mut rng);
        let decoder = expand(&config.decoder, vec![dim], config.init, &mut rng)?;
        Ok(Self {
            config,
            encoder,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.config.layout
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.config.resolution, self.config.resolution]
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.encoder
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(&self.decoder)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.encoder
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.logvar_head])
            .chain(&mut self.decoder)
    }

    fn layer_names(&self) -> Vec<String> {
        let e = self.encoder.len();
        (0..e)
            .map(|i| format!("encoder.{i}"))
            .chain(["mu_head".to_string(), "logvar_head".to_string()])
            .chain((0..self.decoder.len()).map(|i| format!("decoder.{i}")))
            .collect()
    }

    /// Every parameter tensor in canonical order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// `(name, tensor)` pairs in canonical order, e.g. `encoder.0.weight`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layer_names()
            .into_iter()
            .zip(self.layers())
            .flat_map(|(name, layer)| {
                let suffixes: &[&str] = match layer {
                    Layer::Conv { .. } | Layer::Dense { .. } => &["weight", "bias"],
                    _ => &[],
                };
                suffixes
                    .iter()
                    .zip(layer.params())
                    .map(move |(s, t)| (format!("{name}.{s}"), t))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Replaces parameters from `(name, tensor)` pairs, which must match
    /// [`Network::named_params`] exactly in names, order and shapes.
    pub fn load_named_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&named) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        for (dst, (_, src)) in self.params_mut().into_iter().zip(named) {
            *dst = src;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            per_layer: self
                .layers()
                .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }

    fn check_latent_len(&self, len: usize) -> Result<usize> {
        let d = self.latent_dim();
        if len == 0 || len % d != 0 {
            return Err(Error::Dimension(format!(
                "latent data of length {len} for a {d}-dimensional code"
            )));
        }
        Ok(len / d)
    }

    /// Posterior parameters for a `[N,1,H,W]` batch (or a single `[1,H,W]`
    /// image), plus the caches the encoder backward pass needs.
    pub fn encode_batch(&self, images: &Tensor<T>) -> Result<(BatchLatents<T>, EncoderCache<T>)> {
        let [c, h, w] = self.input_shape();
        let input = match *images.shape() {
            [_, ci, hi, wi] if [ci, hi, wi] == [c, h, w] => images.clone(),
            [ci, hi, wi] if [ci, hi, wi] == [c, h, w] => images.clone().reshape(&[1, c, h, w])?,
            _ => {
                return Err(Error::Dimension(format!(
                    "encoder input must be [{c},{h},{w}] or [N,{c},{h},{w}], got {:?}",
                    images.shape()
                )))
            }
        };
        let (features, layers) = run_layers(&self.encoder, input)?;
        let (mu, mu_cache) = ops::forward(&self.mu_head, &features)?;
        let (logvar, lv_cache) = ops::forward(&self.logvar_head, &features)?;
        let latents = BatchLatents {
            dim: self.latent_dim(),
            mu: mu.into_data(),
            logvar: logvar.into_data(),
        };
        ensure_finite(&latents.mu, "latent mean")?;
        ensure_finite(&latents.logvar, "latent log-variance")?;
        Ok((
            latents,
            EncoderCache {
                layers,
                mu_head: mu_cache,
                logvar_head: lv_cache,
                input_shape: images.shape().to_vec(),
            },
        ))
    }

    /// Posterior parameters for one `[1,H,W]` image.
    pub fn encode(&self, image: &Tensor<T>) -> Result<(LatentDistribution<T>, EncoderCache<T>)> {
        image.ensure_shape(&self.input_shape(), "encoder input")?;
        let (latents, cache) = self.encode_batch(image)?;
        Ok((latents.example(0), cache))
    }

    /// Renders `N` latent codes (row-major `[N, D]`) to a `[N,1,H,W]` batch.
    /// A single code of length `D` yields a `[1,H,W]` image.
    pub fn decode(&self, z: &[T]) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let (image, _, cache) = self.decode_with_logits(z)?;
        Ok((image, cache))
    }

    /// Like [`Network::decode`] but also returns the pre-sigmoid logits of the
    /// final layer.
    pub fn decode_with_logits(&self, z: &[T]) -> Result<(Tensor<T>, Tensor<T>, DecoderCache<T>)> {
        let n = self.check_latent_len(z.len())?;
        let single = z.len() == self.latent_dim();
        let input = Tensor::from_parts(vec![n, self.latent_dim()], z.to_vec());
        let last = self.decoder.len() - 1;
        let (logits, mut layers) = run_layers(&self.decoder[..last], input)?;
        let (image, cache) = ops::forward(&self.decoder[last], &logits)?;
        layers.push(cache);
        ensure_finite(logits.data(), "decoder logits")?;
        let [c, h, w] = self.input_shape();
        let shape = if single { vec![c, h, w] } else { vec![n, c, h, w] };
        Ok((
            image.reshape(&shape)?,
            logits.reshape(&shape)?,
            DecoderCache {
                layers,
                output_shape: shape,
            },
        ))
    }

    /// Backpropagates `grad_image` through the decoder, accumulating parameter
    /// gradients into `grads`, and returns the gradient at the latent codes.
    pub fn decode_backward(
        &self,
        cache: &DecoderCache<T>,
        grad_image: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Vec<T>> {
        self.backward_decoder_layers(self.decoder.len(), cache, grad_image, grads)
    }

    /// Decoder backward pass starting from the gradient at the final logits.
    pub fn decode_backward_logits(
        &self,
        cache: &DecoderCache<T>,
        grad_logits: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Vec<T>> {
        self.backward_decoder_layers(self.decoder.len() - 1, cache, grad_logits, grads)
    }

    fn backward_decoder_layers(
        &self,
        upto: usize,
        cache: &DecoderCache<T>,
        grad: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Vec<T>> {
        if cache.layers.len() != self.decoder.len() {
            return Err(Error::Contract("decoder cache does not belong to this network".into()));
        }
        grad.ensure_shape(&cache.output_shape, "decoder output gradient")?;
        let [c, h, w] = self.input_shape();
        let n = grad.len() / (c * h * w);
        let mut g = grad.clone().reshape(&[n, c, h, w])?;
        let offset = self.encoder.len() + 2;
        for i in (0..upto).rev() {
            let lg = ops::backward_with(&self.decoder[i], &cache.layers[i], &g, true)?;
            grads.accumulate(offset + i, lg.grad_params);
            g = lg.grad_input.expect("requested");
        }
        Ok(g.into_data())
    }

    /// Backpropagates gradients at `mu` and `logvar` (row-major `[N, D]`)
    /// through both heads and the encoder. Returns the input gradient, shaped
    /// like the encoder input, when `want_input`.
    pub fn encode_backward(
        &self,
        cache: &EncoderCache<T>,
        grad_mu: &[T],
        grad_logvar: &[T],
        grads: &mut Gradients<T>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let e = self.encoder.len();
        if cache.layers.len() != e {
            return Err(Error::Contract("encoder cache does not belong to this network".into()));
        }
        let n = self.check_latent_len(grad_mu.len())?;
        if grad_logvar.len() != grad_mu.len() {
            return Err(Error::Dimension("grad_mu and grad_logvar lengths differ".into()));
        }
        let d = self.latent_dim();
        let gm = Tensor::from_parts(vec![n, d], grad_mu.to_vec());
        let gl = Tensor::from_parts(vec![n, d], grad_logvar.to_vec());
        let mu_g = ops::backward_with(&self.mu_head, &cache.mu_head, &gm, true)?;
        let lv_g = ops::backward_with(&self.logvar_head, &cache.logvar_head, &gl, true)?;
        grads.accumulate(e, mu_g.grad_params);
        grads.accumulate(e + 1, lv_g.grad_params);
        let mut g = mu_g.grad_input.expect("requested");
        for (a, b) in g.data_mut().iter_mut().zip(lv_g.grad_input.expect("requested").data()) {
            *a += *b;
        }
        for i in (0..e).rev() {
            let need = i > 0 || want_input;
            let lg = ops::backward_with(&self.encoder[i], &cache.layers[i], &g, need)?;
            grads.accumulate(i, lg.grad_params);
            match lg.grad_input {
                Some(gi) => g = gi,
                None => return Ok(None),
            }
        }
        Ok(Some(g.reshape(&cache.input_shape)?))
    }

    /// Posterior mean only.
    pub fn encode_mean(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        self.encode(image).map(|(d, _)| d.mu)
    }

    pub fn decode_image(&self, z: &[T]) -> Result<Tensor<T>> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latent of length {} for a {}-dimensional code",
                z.len(),
                self.latent_dim()
            )));
        }
        self.decode(z).map(|(x, _)| x)
    }
}
