//! Per-level influence probe.
//!
//! For one latent level (or group) an additive perturbation network
//! `T(z) = z + p(z)` plays against a contrastive encoder: the encoder
//! minimizes InfoNCE between views generated from `z` and from `T(z)`, the
//! network maximizes it. Training stops once the windowed loss sits at the
//! common target `gamma`; the perturbation magnitude the network needed to get
//! there measures how much the level matters. A level whose perturbations
//! never lift the loss to the target is reported as degenerate.

use std::fs;
use std::path::Path;

use candle_core::{Module, Tensor};
use candle_nn::{linear, Linear, Optimizer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, LatentBatch, Unit};
use crate::mi::{infonce_loss, scalar};
use crate::nn::{adam, EncoderKind, Init, Params};
use crate::seed;

pub const PROBE_FORMAT_VERSION: u32 = 1;

/// Two-layer perceptron `p` acting as `T(z) = z + p(z)`.
pub struct PerturbationNet {
    params: Params,
    l1: Linear,
    l2: Linear,
    dim: usize,
    hidden: usize,
}

impl PerturbationNet {
    pub fn new(dim: usize, hidden: usize, device: &candle_core::Device) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::param("perturbation net needs positive dim and hidden size"));
        }
        let params = Params::new(device);
        let vb = params.vb();
        let l1 = linear(dim, hidden, vb.pp("l1"))?;
        let l2 = linear(hidden, dim, vb.pp("l2"))?;
        Ok(Self { params, l1, l2, dim, hidden })
    }

    /// Near-identity start: weights `N(0, 0.01^2)`, biases `U(-0.001, 0.001)`.
    pub fn init_identity(&self, seed_value: u64) -> Result<()> {
        self.params.init_with(seed_value, |name, _| {
            if name.ends_with("bias") {
                Init::Uniform(0.001)
            } else {
                Init::Normal(0.01)
            }
        })
    }

    /// The additive offset `p(z)`.
    pub fn offset(&self, z: &Tensor) -> Result<Tensor> {
        let d = z.dim(candle_core::D::Minus1)?;
        if d != self.dim {
            return Err(Error::shape(format!("perturbation net expects dim {}, got {d}", self.dim)));
        }
        let h = candle_nn::ops::leaky_relu(&self.l1.forward(z)?, 0.2)?;
        Ok(self.l2.forward(&h)?)
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        Ok((z + self.offset(z)?)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Common InfoNCE target.
    pub gamma: f64,
    /// Stop band half-width; `None` means `0.05 * gamma`.
    pub tolerance: Option<f64>,
    pub batch_size: usize,
    pub encoder_lr: f64,
    /// Encoder learning rate during warmup.
    pub warmup_lr: f64,
    /// Perturbation-net learning rate as a multiple of the encoder's.
    pub perturbation_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub temperature: f64,
    pub max_iters: usize,
    pub window: usize,
    /// Encoder-only iterations on unperturbed pairs before the game starts.
    pub warmup_iters: usize,
    pub hidden: usize,
    /// Probe encoder; chosen from the image size when absent.
    pub encoder: Option<EncoderKind>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            tolerance: None,
            batch_size: 64,
            encoder_lr: 1e-5,
            warmup_lr: 1e-3,
            perturbation_lr_ratio: 10.0,
            beta1: 0.5,
            beta2: 0.999,
            temperature: 0.1,
            max_iters: 20_000,
            window: 100,
            warmup_iters: 500,
            hidden: 128,
            encoder: None,
        }
    }
}

impl ProbeConfig {
    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(0.05 * self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |key: &str, message: &str| Err(Error::Config { key: format!("probe.{key}"), message: message.into() });
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be finite and >= 0");
        }
        if !(self.tolerance() > 0.0) {
            return bad("tolerance", "must be positive");
        }
        if self.window == 0 {
            return bad("window", "must be positive");
        }
        if self.max_iters <= self.window + self.warmup_iters {
            return bad("max_iters", "must exceed warmup_iters + window");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        for (key, v) in [
            ("encoder_lr", self.encoder_lr),
            ("warmup_lr", self.warmup_lr),
            ("perturbation_lr_ratio", self.perturbation_lr_ratio),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0) {
                return bad(key, "must be positive");
            }
        }
        Ok(())
    }

    fn encoder_for(&self, shape: (usize, usize, usize)) -> EncoderKind {
        self.encoder.clone().unwrap_or(if shape.1 < 8 || shape.2 < 8 {
            EncoderKind::Mlp { hidden: 128, depth: 2, out: 64 }
        } else {
            EncoderKind::Conv { out: 128 }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeStatus {
    Converged,
    Degenerate,
}

impl ProbeStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeStatus::Converged => "converged",
            ProbeStatus::Degenerate => "degenerate",
        }
    }
}

/// `|mean(window) - gamma| <= tolerance`.
pub fn stop_criterion(window: &[f64], gamma: f64, tolerance: f64) -> Result<bool> {
    if window.is_empty() {
        return Err(Error::Usage("stop criterion needs a non-empty loss window".into()));
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    Ok((mean - gamma).abs() <= tolerance)
}

/// First iteration at which `stop_criterion` fires when replaying a loss
/// curve, with the criterion armed from `armed_from` once a full window of
/// armed iterations is available.
pub fn replay_stop(
    losses: &[f64],
    armed_from: usize,
    window: usize,
    gamma: f64,
    tolerance: f64,
) -> Result<Option<usize>> {
    for it in armed_from..losses.len() {
        if it + 1 >= armed_from + window && stop_criterion(&losses[it + 1 - window..=it], gamma, tolerance)? {
            return Ok(Some(it));
        }
    }
    Ok(None)
}

pub struct ProbeResult {
    pub unit: Unit,
    pub status: ProbeStatus,
    /// Window-mean loss when training stopped.
    pub final_loss: f64,
    pub stop_iter: Option<usize>,
    pub iterations: usize,
    /// Per-iteration encoder-step InfoNCE loss.
    pub losses: Vec<f64>,
    /// Per-iteration batch mean of `||p(z)||`.
    pub magnitudes: Vec<f64>,
    pub gamma: f64,
    pub tolerance: f64,
    pub warmup_iters: usize,
    pub window: usize,
    pub net: PerturbationNet,
}

/// One iteration's record, passed to observers.
#[derive(Debug, Clone, Copy)]
pub struct ProbeStep {
    pub iter: usize,
    pub loss: f64,
    pub magnitude: f64,
}

/// Concatenate the latents of `unit` along the feature axis.
pub fn unit_latent(latents: &[Tensor], unit: &Unit) -> Result<Tensor> {
    let parts: Vec<&Tensor> = latents[unit.levels.clone()].iter().collect();
    Ok(Tensor::cat(&parts, 1)?)
}

/// Replace the latents of `unit` with the columns of `zu`.
pub fn replace_unit(latents: &[Tensor], unit: &Unit, zu: &Tensor) -> Result<Vec<Tensor>> {
    let mut out = latents.to_vec();
    let mut offset = 0;
    for l in unit.levels.clone() {
        let m = latents[l].dim(1)?;
        out[l] = zu.narrow(1, offset, m)?;
        offset += m;
    }
    Ok(out)
}

pub fn probe_level(
    generator: &dyn Generator,
    unit_index: usize,
    config: &ProbeConfig,
    seed_value: u64,
) -> Result<ProbeResult> {
    probe_level_observed(generator, unit_index, config, seed_value, &mut |_| {})
}

pub fn probe_level_observed(
    generator: &dyn Generator,
    unit_index: usize,
    config: &ProbeConfig,
    seed_value: u64,
    observer: &mut dyn FnMut(&ProbeStep),
) -> Result<ProbeResult> {
    config.validate()?;
    let spec = generator.spec();
    let unit = spec.unit(unit_index)?;
    let dev = generator.device().device.clone();
    let shape = generator.output_shape().dims3();
    let tol = config.tolerance();

    let enc_params = Params::new(&dev);
    let encoder = config.encoder_for(shape).build(shape, enc_params.vb())?;
    enc_params.init(seed::derive(seed_value, "probe-encoder", unit.index as u64))?;
    let net = PerturbationNet::new(spec.unit_dim(&unit), config.hidden, &dev)?;
    net.init_identity(seed::derive(seed_value, "probe-net", unit.index as u64))?;

    let mut enc_opt = adam(enc_params.vars(), config.warmup_lr, config.beta1, config.beta2)?;
    let mut net_opt =
        adam(net.params().vars(), config.encoder_lr * config.perturbation_lr_ratio, config.beta1, config.beta2)?;

    let mut losses = Vec::new();
    let mut magnitudes = Vec::new();
    let mut stop_iter = None;
    for it in 0..config.max_iters {
        let mut rng = seed::rng(seed::derive(seed_value, "probe-anchors", it as u64));
        let z = LatentBatch::sample(spec, config.batch_size, &mut rng).tensors(spec, &dev)?;
        let x = generator.decode(&z, seed::derive(seed_value, "probe-noise-a", it as u64))?.detach();
        let noise_p = seed::derive(seed_value, "probe-noise-p", it as u64);
        let playing = it >= config.warmup_iters;
        if it == config.warmup_iters {
            enc_opt.set_learning_rate(config.encoder_lr);
        }

        let (x_pos, magnitude) = if playing {
            let zu = unit_latent(&z, &unit)?;
            let off = net.offset(&zu)?;
            let mag = scalar(&off.sqr()?.sum(1)?.sqrt()?.mean_all()?)?;
            let z_pos = replace_unit(&z, &unit, &(zu + off)?)?;
            (generator.decode(&z_pos, noise_p)?, mag)
        } else {
            (generator.decode(&z, noise_p)?.detach(), 0.0)
        };

        // Encoder step on detached views.
        let loss = infonce_loss(
            &encoder.forward_t(&x, true)?,
            &encoder.forward_t(&x_pos.detach(), true)?,
            config.temperature,
        )?;
        let lv = scalar(&loss)?;
        if !lv.is_finite() {
            return Err(Error::Training {
                step: it,
                diagnostics: format!("unit {}: encoder loss {lv}, mean |p(z)| {magnitude}", unit.label()),
            });
        }
        enc_opt.backward_step(&loss)?;

        // Perturbation step against the updated encoder.
        if playing {
            let adv = infonce_loss(
                &encoder.forward_t(&x, true)?.detach(),
                &encoder.forward_t(&x_pos, true)?,
                config.temperature,
            )?;
            let grads = adv.neg()?.backward()?;
            net_opt.step(&grads)?;
        }

        losses.push(lv);
        magnitudes.push(magnitude);
        observer(&ProbeStep { iter: it, loss: lv, magnitude });
        if playing && it + 1 >= config.warmup_iters + config.window {
            let w = &losses[it + 1 - config.window..=it];
            if stop_criterion(w, config.gamma, tol)? {
                stop_iter = Some(it);
                break;
            }
        }
    }

    let n = losses.len();
    let final_loss = losses[n.saturating_sub(config.window)..].iter().sum::<f64>() / n.min(config.window) as f64;
    Ok(ProbeResult {
        unit,
        status: if stop_iter.is_some() { ProbeStatus::Converged } else { ProbeStatus::Degenerate },
        final_loss,
        stop_iter,
        iterations: n,
        losses,
        magnitudes,
        gamma: config.gamma,
        tolerance: tol,
        warmup_iters: config.warmup_iters,
        window: config.window,
        net,
    })
}

/// Metadata stored next to a probe's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCheckpoint {
    pub format_version: u32,
    pub unit_index: usize,
    pub label: String,
    pub dim: usize,
    pub hidden: usize,
    pub status: ProbeStatus,
    pub final_loss: f64,
    pub stop_iter: Option<usize>,
    pub iterations: usize,
    pub gamma: f64,
    pub tolerance: f64,
    pub digest: String,
    pub weights: String,
}

impl ProbeResult {
    pub fn checkpoint(&self, weights: &str) -> Result<ProbeCheckpoint> {
        Ok(ProbeCheckpoint {
            format_version: PROBE_FORMAT_VERSION,
            unit_index: self.unit.index,
            label: self.unit.label(),
            dim: self.net.dim(),
            hidden: self.net.hidden(),
            status: self.status,
            final_loss: self.final_loss,
            stop_iter: self.stop_iter,
            iterations: self.iterations,
            gamma: self.gamma,
            tolerance: self.tolerance,
            digest: self.net.digest()?,
            weights: weights.to_string(),
        })
    }

    /// Write `<dir>/probe-<label>.json`, its weights and the loss curve.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir)?;
        let stem = format!("probe-{}", self.unit.label());
        let weights = format!("{stem}.safetensors");
        self.net.params().save(&dir.join(&weights))?;
        let meta = dir.join(format!("{stem}.json"));
        fs::write(&meta, serde_json::to_string_pretty(&self.checkpoint(&weights)?)?)?;
        let mut curve = String::from("iter,loss,magnitude\n");
        for (i, (l, m)) in self.losses.iter().zip(&self.magnitudes).enumerate() {
            curve.push_str(&format!("{i},{l},{m}\n"));
        }
        fs::write(dir.join(format!("{stem}-curve.csv")), curve)?;
        Ok(meta)
    }
}

/// Load a saved probe: its metadata and the trained network.
pub fn load_probe(meta_path: &Path, device: &candle_core::Device) -> Result<(ProbeCheckpoint, PerturbationNet)> {
    let text = fs::read_to_string(meta_path)
        .map_err(|e| Error::MissingArtifact(format!("probe checkpoint {}: {e}", meta_path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != PROBE_FORMAT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            path: meta_path.to_path_buf(),
            found: found as u32,
            expected: PROBE_FORMAT_VERSION,
        });
    }
    let ck: ProbeCheckpoint = serde_json::from_value(raw)?;
    let net = PerturbationNet::new(ck.dim, ck.hidden, device)?;
    let w = meta_path.parent().unwrap_or(Path::new(".")).join(&ck.weights);
    if !w.is_file() {
        return Err(Error::MissingArtifact(format!("probe weights {}", w.display())));
    }
    net.params().load_into(&w)?;
    Ok((ck, net))
}

/// Read a saved loss curve.
pub fn read_curve(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("loss curve {}: {e}", path.display())))?;
    let mut losses = Vec::new();
    let mut mags = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Schema(format!("{}:{}: bad number `{s}`", path.display(), n + 1)))
        };
        if cols.len() != 3 {
            return Err(Error::Schema(format!("{}:{}: expected 3 columns", path.display(), n + 1)));
        }
        losses.push(parse(cols[1])?);
        mags.push(parse(cols[2])?);
    }
    Ok((losses, mags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{ImageShape, LinearGaussianMlvgm, TruncatedNormalParams};
    use candle_core::{DType, Device};

    #[test]
    fn stop_criterion_band() -> Result<()> {
        assert!(stop_criterion(&[1.0; 10], 1.0, 0.05)?);
        assert!(!stop_criterion(&[1.1; 10], 1.0, 0.05)?);
        assert!(matches!(stop_criterion(&[], 1.0, 0.05), Err(Error::Usage(_))));
        Ok(())
    }

    #[test]
    fn identity_init_is_near_identity() -> Result<()> {
        let net = PerturbationNet::new(16, 128, &Device::Cpu)?;
        net.init_identity(3)?;
        let mut rng = seed::rng(1);
        let p = TruncatedNormalParams::new(0.0, 1.0, 2.0)?;
        let z = Tensor::from_vec(p.sample_n(10_000 * 16, &mut rng), (10_000, 16), &Device::Cpu)?;
        let rel =
            (net.offset(&z)?.sqr()?.sum(1)?.sqrt()? / z.sqr()?.sum(1)?.sqrt()?)?.mean_all()?.to_scalar::<f32>()?;
        assert!(rel < 0.05, "relative perturbation {rel}");
        assert_eq!(net.apply(&z)?.dims(), z.dims());
        assert!(net.offset(&Tensor::zeros((2, 3), DType::F32, &Device::Cpu)?).is_err());
        Ok(())
    }

    #[test]
    fn config_validation() {
        let bad = ProbeConfig { max_iters: 50, ..Default::default() };
        assert!(bad.validate().is_err());
        let zero_gamma = ProbeConfig { gamma: 0.0, ..Default::default() };
        assert!(zero_gamma.validate().is_err());
        let zero_gamma_tol = ProbeConfig { gamma: 0.0, tolerance: Some(0.3), ..Default::default() };
        assert!(zero_gamma_tol.validate().is_ok());
    }

    #[test]
    fn zero_target_converges_as_soon_as_armed() -> Result<()> {
        let tn = TruncatedNormalParams::new(0.0, 1.0, 8.0)?;
        let g = LinearGaussianMlvgm::hierarchical(4, &[2.0, 1.0], tn, ImageShape::new(1, 4, 4), 0.1, 0)?;
        let cfg = ProbeConfig {
            gamma: 0.0,
            tolerance: Some(0.5),
            warmup_iters: 150,
            window: 20,
            max_iters: 400,
            ..Default::default()
        };
        let r = probe_level(&g, 1, &cfg, 7)?;
        assert_eq!(r.status, ProbeStatus::Converged);
        assert_eq!(r.stop_iter, Some(cfg.warmup_iters + cfg.window - 1));
        Ok(())
    }

    #[test]
    fn replay_matches_recorded_stop() -> Result<()> {
        let mut losses = vec![0.0; 10];
        losses.extend([0.5, 0.8, 0.97, 1.0, 1.02, 0.99, 1.01, 1.0]);
        let stop = replay_stop(&losses, 10, 4, 1.0, 0.05)?;
        assert_eq!(stop, Some(15));
        Ok(())
    }
}
