use candle_core::{DType, Module, Tensor, D};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, Optimizer, VarBuilder};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_latents, ComputeDevice, Generator, ImageShape, LatentSpec, TruncatedNormalParams};
use crate::corpus::ImageDataset;
use crate::error::{Error, Result};
use crate::nn::{adam, Params};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyVaeConfig {
    /// Latent size per scale, coarsest first.
    pub dims: Vec<usize>,
    /// Decoder channel width.
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Std of the Gaussian pixel likelihood.
    pub obs_std: f64,
    pub kl_weight: f64,
    pub val_fraction: f64,
    /// Truncation of the learned anchor distributions, in std units.
    pub anchor_trunc: f64,
}

impl Default for ToyVaeConfig {
    fn default() -> Self {
        Self {
            dims: vec![32, 64, 128],
            width: 32,
            epochs: 15,
            batch_size: 64,
            lr: 2e-3,
            obs_std: 0.1,
            kl_weight: 1.0,
            val_fraction: 0.1,
            anchor_trunc: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainReport {
    pub epochs: Vec<VaeEpoch>,
    /// Per-pixel reconstruction MSE on the held-out split after training.
    pub val_mse: f64,
    pub train_items: usize,
    pub val_items: usize,
}

struct Stage {
    style: Option<Linear>,
    conv: Conv2d,
}

/// Style-modulated upsampling decoder. Scale 1 sets a coarse feature map;
/// each later scale rescales and shifts the channels of the next, finer
/// stage.
struct Decoder {
    fc: Linear,
    stages: Vec<Stage>,
    out: Conv2d,
    width: usize,
    base: usize,
}

impl Decoder {
    fn new(dims: &[usize], width: usize, shape: ImageShape, vb: VarBuilder) -> Result<Self> {
        let n = dims.len();
        let base = shape.height >> n;
        if base == 0 || base << n != shape.height || shape.height != shape.width {
            return Err(Error::param(format!("{n} scales need square images with side divisible by {}", 1 << n)));
        }
        let pad = Conv2dConfig { padding: 1, ..Default::default() };
        let fc = linear(dims[0], width * base * base, vb.pp("fc"))?;
        let mut stages = Vec::with_capacity(n);
        for (k, &m) in dims.iter().enumerate() {
            let cout = if k + 1 == n { width / 2 } else { width };
            let style = if k == 0 { None } else { Some(linear(m, 2 * width, vb.pp(format!("style{k}")))?) };
            let conv = conv2d(width, cout, 3, pad, vb.pp(format!("conv{k}")))?;
            stages.push(Stage { style, conv });
        }
        let out = conv2d(width / 2, shape.channels, 3, pad, vb.pp("out"))?;
        Ok(Self { fc, stages, out, width, base })
    }

    fn forward(&self, latents: &[Tensor]) -> Result<Tensor> {
        let b = latents[0].dim(0)?;
        let mut h = self.fc.forward(&latents[0])?.reshape((b, self.width, self.base, self.base))?.relu()?;
        for (k, st) in self.stages.iter().enumerate() {
            if let Some(style) = &st.style {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
                let s = style.forward(&latents[k])?.reshape((b, 2 * self.width, 1, 1))?;
                let scale = (s.narrow(1, 0, self.width)? + 1.0)?;
                let shift = s.narrow(1, self.width, self.width)?;
                h = h.broadcast_mul(&scale)?.broadcast_add(&shift)?;
            }
            h = st.conv.forward(&h)?.relu()?;
        }
        let (_, _, hh, ww) = h.dims4()?;
        let h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&h)?)?)
    }
}

/// Three stride-2 convolutions; every scale's posterior head reads the
/// flattened coarsest map together with pooled finer maps.
struct PosteriorEncoder {
    convs: Vec<Conv2d>,
    heads: Vec<Linear>,
}

impl PosteriorEncoder {
    fn new(dims: &[usize], width: usize, shape: ImageShape, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let widths = [shape.channels, width / 2, width, width];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| conv2d(w[0], w[1], 3, cfg, vb.pp(format!("enc{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let side = shape.height / 8;
        let feat = width * side * side + width + width / 2;
        let heads = dims
            .iter()
            .enumerate()
            .map(|(k, &m)| linear(feat, 2 * m, vb.pp(format!("head{k}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { convs, heads })
    }

    /// Per-scale `(mean, logvar)`.
    fn forward(&self, x: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let h1 = self.convs[0].forward(x)?.relu()?;
        let h2 = self.convs[1].forward(&h1)?.relu()?;
        let h3 = self.convs[2].forward(&h2)?.relu()?;
        let feat = Tensor::cat(&[h3.flatten_from(1)?, h2.mean((2, 3))?, h1.mean((2, 3))?], 1)?;
        self.heads
            .iter()
            .map(|head| {
                let o = head.forward(&feat)?;
                let m = o.dim(1)? / 2;
                Ok((o.narrow(1, 0, m)?, o.narrow(1, m, m)?.clamp(-8f32, 4f32)?))
            })
            .collect()
    }
}

/// Small hierarchical VAE over 32x32 images whose decoder consumes its
/// latent scales coarsest to finest.
pub struct ToyVae {
    config: ToyVaeConfig,
    spec: LatentSpec,
    shape: ImageShape,
    params: Params,
    decoder: Decoder,
    encoder: PosteriorEncoder,
    device: ComputeDevice,
    report: Option<VaeTrainReport>,
}

impl ToyVae {
    /// Freshly initialized model with standard-normal anchors.
    pub fn new(config: ToyVaeConfig, shape: ImageShape, device: ComputeDevice, init_seed: u64) -> Result<Self> {
        if config.width < 2 || config.width % 2 != 0 {
            return Err(Error::param("vae width must be even and >= 2"));
        }
        let prior = TruncatedNormalParams::new(0.0, 1.0, config.anchor_trunc)?;
        let spec = LatentSpec::uniform(config.dims.clone(), prior)?;
        let params = Params::new(&device.device);
        let decoder = Decoder::new(&config.dims, config.width, shape, params.vb().pp("dec"))?;
        let encoder = PosteriorEncoder::new(&config.dims, config.width, shape, params.vb().pp("enc"))?;
        params.init(init_seed)?;
        Ok(Self { config, spec, shape, params, decoder, encoder, device, report: None })
    }

    pub fn config(&self) -> &ToyVaeConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn report(&self) -> Option<&VaeTrainReport> {
        self.report.as_ref()
    }

    pub(crate) fn set_trained(&mut self, spec: LatentSpec, report: Option<VaeTrainReport>) -> Result<()> {
        if spec.dims != self.config.dims {
            return Err(Error::Schema("checkpoint spec disagrees with vae dims".into()));
        }
        self.spec = spec;
        self.report = report;
        Ok(())
    }

    pub fn posterior(&self, x: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        self.encoder.forward(x)
    }

    /// Decode the posterior means of `x`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let means: Vec<Tensor> = self.posterior(x)?.into_iter().map(|(m, _)| m).collect();
        self.decoder.forward(&means)
    }

    /// Per-pixel reconstruction MSE over `ds`.
    pub fn reconstruction_mse(&self, ds: &ImageDataset, batch: usize) -> Result<f64> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(batch.max(1)) {
            let x = ds.batch(chunk, &self.device.device)?;
            let r = self.reconstruct(&x)?.detach();
            total += (r - &x)?.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
        Ok(total / (ds.len() * ds.shape.numel()).max(1) as f64)
    }
}

impl Generator for ToyVae {
    fn spec(&self) -> &LatentSpec {
        &self.spec
    }

    fn output_shape(&self) -> ImageShape {
        self.shape
    }

    fn device(&self) -> &ComputeDevice {
        &self.device
    }

    /// The decoder is deterministic; `noise_seed` is unused.
    fn decode(&self, latents: &[Tensor], _noise_seed: u64) -> Result<Tensor> {
        check_latents(&self.spec, latents)?;
        self.decoder.forward(latents)
    }
}

fn gaussian(shape: (usize, usize), rng: &mut seed::Rng, device: &candle_core::Device) -> Result<Tensor> {
    let v: Vec<f32> = (0..shape.0 * shape.1)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            e as f32
        })
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

/// Fit a [`ToyVae`] on `corpus` and learn per-scale anchor distributions
/// from the aggregate posterior.
pub fn train_toy_vae(corpus: &ImageDataset, config: &ToyVaeConfig, seed_value: u64) -> Result<ToyVae> {
    train_toy_vae_on(corpus, config, seed_value, ComputeDevice::default())
}

pub fn train_toy_vae_on(
    corpus: &ImageDataset,
    config: &ToyVaeConfig,
    seed_value: u64,
    device: ComputeDevice,
) -> Result<ToyVae> {
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::param("val_fraction must be in [0, 1)"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::param("vae batch size and epochs must be positive"));
    }
    let (train, val) = corpus.split(config.val_fraction);
    if train.len() < config.batch_size {
        return Err(Error::BatchSize { min: config.batch_size, got: train.len() });
    }
    let mut vae = ToyVae::new(config.clone(), corpus.shape, device, seed::derive(seed_value, "vae-init", 0))?;
    let dev = vae.device.device.clone();
    let mut opt = adam(vae.params.vars(), config.lr, 0.9, 0.999)?;
    let mut rng = seed::rng(seed::derive(seed_value, "vae-train", 0));
    let pix_w = 1.0 / (2.0 * config.obs_std * config.obs_std);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks_exact(config.batch_size) {
            let x = train.batch(chunk, &dev)?;
            let b = chunk.len();
            let post = vae.encoder.forward(&x)?;
            let mut zs = Vec::with_capacity(post.len());
            let mut kl = Tensor::zeros((), DType::F32, &dev)?;
            for (mu, logvar) in &post {
                let eps = gaussian((b, mu.dim(1)?), &mut rng, &dev)?;
                zs.push((mu + (logvar * 0.5)?.exp()?.mul(&eps)?)?);
                let term = ((mu.sqr()? + logvar.exp()?)? - logvar)?.affine(0.5, -0.5)?;
                kl = (kl + term.sum_all()?)?;
            }
            let kl = (kl / b as f64)?;
            let xr = vae.decoder.forward(&zs)?;
            let recon = ((xr - &x)?.sqr()?.sum_all()? * (pix_w / b as f64))?;
            let loss = (&recon + (&kl * config.kl_weight)?)?;
            let lv = loss.to_scalar::<f32>()? as f64;
            if !lv.is_finite() {
                return Err(Error::Training {
                    step,
                    diagnostics: format!(
                        "epoch {epoch}: loss {lv}, recon {}, kl {}",
                        recon.to_scalar::<f32>()?,
                        kl.to_scalar::<f32>()?
                    ),
                });
            }
            opt.backward_step(&loss)?;
            loss_sum += lv;
            kl_sum += kl.to_scalar::<f32>()? as f64;
            batches += 1;
            step += 1;
        }
        let val_mse = if val.is_empty() { f64::NAN } else { vae.reconstruction_mse(&val, 256)? };
        epochs.push(VaeEpoch { epoch, loss: loss_sum / batches as f64, kl: kl_sum / batches as f64, val_mse });
    }
    let spec = learned_anchors(&vae, &train, config.anchor_trunc)?;
    let report = VaeTrainReport {
        val_mse: epochs.last().map_or(f64::NAN, |e| e.val_mse),
        epochs,
        train_items: train.len(),
        val_items: val.len(),
    };
    vae.set_trained(spec, Some(report))?;
    Ok(vae)
}

/// Moment-matched truncated normal per scale: mean of the posterior means,
/// and the aggregate-posterior variance averaged over dimensions.
fn learned_anchors(vae: &ToyVae, ds: &ImageDataset, trunc: f64) -> Result<LatentSpec> {
    let n_levels = vae.config.dims.len();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut mus: Vec<Vec<Tensor>> = vec![Vec::new(); n_levels];
    let mut vars: Vec<Vec<Tensor>> = vec![Vec::new(); n_levels];
    for chunk in idx.chunks(256) {
        let x = ds.batch(chunk, &vae.device.device)?;
        for (k, (m, lv)) in vae.posterior(&x)?.into_iter().enumerate() {
            mus[k].push(m.detach().to_dtype(DType::F64)?);
            vars[k].push(lv.detach().exp()?.to_dtype(DType::F64)?);
        }
    }
    let mut anchors = Vec::with_capacity(n_levels);
    for k in 0..n_levels {
        let m = Tensor::cat(&mus[k], 0)?;
        let v = Tensor::cat(&vars[k], 0)?;
        let per_dim_mean = m.mean(0)?;
        let per_dim_var = (m.broadcast_sub(&per_dim_mean)?.sqr()?.mean(0)? + v.mean(0)?)?;
        let mean = per_dim_mean.mean_all()?.to_scalar::<f64>()?;
        let var = per_dim_var.mean(D::Minus1)?.to_scalar::<f64>()?;
        anchors.push(TruncatedNormalParams::new(mean, var.sqrt().max(1e-6), trunc)?);
    }
    LatentSpec::new(vae.config.dims.clone(), anchors)
}
