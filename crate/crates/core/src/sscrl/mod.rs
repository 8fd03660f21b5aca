//! Contrastive encoder training (SimCLR, SimSiam, BYOL) from real images or
//! generated views, linear-probe evaluation, and data-source benchmarking.

mod bench;
mod frameworks;
mod linear_eval;

pub use bench::{
    loader_benchmark, BenchConfig, BenchReport, BenchRow, BenchSource, ContinuousBench, NaiveDiskBench, PackedBench,
};
pub use frameworks::{byol_loss, ema_update, neg_cosine, simsiam_loss, MlpHead, SscrlModel};
pub use linear_eval::{extract_features, linear_probe, linear_probe_checkpoint, LinearEvalConfig, ProbeAccuracy};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ImageDataset;
use crate::error::{Error, Result};
use crate::generator::{ComputeDevice, Generator, ImageShape};
use crate::mi::scalar;
use crate::nn::{cosine_lr, Encoder, EncoderKind, Params, SgdMomentum};
use crate::sampling::{cs_batch, BatchSpec};
use crate::seed::{self, SeedPolicy};
use crate::views::{pixel_augment_batch, PerturbationPlan, PixelAugmentConfig, Strategy};

pub const ENCODER_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    SimClr,
    SimSiam,
    Byol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameworkConfig {
    pub framework: Framework,
    pub encoder: EncoderKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Peak learning rate per 256 items.
    pub base_lr: f64,
    /// Used only when `batch_size >= 1024`.
    pub warmup_epochs: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    /// SimCLR only.
    pub temperature: Option<f64>,
    /// BYOL only.
    pub ema_decay: Option<f64>,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self::simsiam()
    }
}

impl FrameworkConfig {
    pub fn simsiam() -> Self {
        Self {
            framework: Framework::SimSiam,
            encoder: EncoderKind::ResNet { width: 16 },
            epochs: 100,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.05,
            warmup_epochs: 10,
            proj_dim: 256,
            pred_hidden: 64,
            temperature: None,
            ema_decay: None,
        }
    }

    pub fn simclr() -> Self {
        Self { framework: Framework::SimClr, temperature: Some(0.5), ..Self::simsiam() }
    }

    pub fn byol() -> Self {
        Self { framework: Framework::Byol, ema_decay: Some(0.99), ..Self::simsiam() }
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn effective_warmup(&self) -> usize {
        if self.batch_size >= 1024 {
            self.warmup_epochs
        } else {
            0
        }
    }

    /// Learning rate at a fractional epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        cosine_lr(self.peak_lr(), epoch, self.epochs as f64, self.effective_warmup() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config { key: format!("train.framework.{key}"), message: message.into() })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr", "must be positive");
        }
        match (self.framework, self.temperature) {
            (Framework::SimClr, None) => return bad("temperature", "required for simclr"),
            (Framework::SimClr, Some(t)) if !(t > 0.0) => return bad("temperature", "must be positive"),
            (Framework::SimSiam | Framework::Byol, Some(_)) => return bad("temperature", "only used by simclr"),
            _ => {}
        }
        match (self.framework, self.ema_decay) {
            (Framework::Byol, None) => return bad("ema_decay", "required for byol"),
            (Framework::Byol, Some(t)) if !(0.0..1.0).contains(&t) => return bad("ema_decay", "must be in [0, 1)"),
            (Framework::SimClr | Framework::SimSiam, Some(_)) => return bad("ema_decay", "only used by byol"),
            _ => {}
        }
        Ok(())
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceDescriptor {
    Real { items: usize },
    SyntheticFixed { batches: usize, plan: String },
    Continuous { plan: String, base_seed: u64, replica: u32 },
}

/// A stream of (anchor, positive) image batches with a fixed epoch length.
pub trait PairSource {
    fn descriptor(&self) -> SourceDescriptor;
    fn image_shape(&self) -> ImageShape;
    fn steps_per_epoch(&self) -> usize;
    fn pairs(&mut self, epoch: u64, step: usize) -> Result<(Tensor, Tensor)>;
    fn plan_digest(&self) -> Result<String> {
        Ok(String::from("none"))
    }
}

/// Hex digest identifying a plan, including learned network weights.
pub fn plan_digest(plan: &PerturbationPlan) -> Result<String> {
    let mut h = Sha256::new();
    h.update(plan.describe().as_bytes());
    for s in &plan.strategies {
        if let Strategy::Learned(net) = s {
            h.update(net.digest()?.as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Continuous sampling from a generator.
pub struct ContinuousSource {
    pub generator: Arc<dyn Generator>,
    pub spec: BatchSpec,
    pub policy: SeedPolicy,
    consumer: ComputeDevice,
}

impl ContinuousSource {
    pub fn new(generator: Arc<dyn Generator>, spec: BatchSpec, policy: SeedPolicy) -> Self {
        let consumer = generator.device().clone();
        Self { generator, spec, policy, consumer }
    }
}

impl PairSource for ContinuousSource {
    fn descriptor(&self) -> SourceDescriptor {
        SourceDescriptor::Continuous {
            plan: self.spec.plan.describe(),
            base_seed: self.policy.base_seed,
            replica: self.policy.replica,
        }
    }

    fn image_shape(&self) -> ImageShape {
        let s = self.generator.output_shape();
        match &self.spec.augment {
            Some(a) if a.crop => ImageShape::new(s.channels, a.crop_size, a.crop_size),
            _ => s,
        }
    }

    fn steps_per_epoch(&self) -> usize {
        self.spec.steps_per_epoch
    }

    fn pairs(&mut self, epoch: u64, step: usize) -> Result<(Tensor, Tensor)> {
        let it = epoch * self.spec.steps_per_epoch as u64 + step as u64;
        let v = cs_batch(self.generator.as_ref(), &self.spec, self.policy, it, &self.consumer)?;
        Ok((v.anchors, v.positives))
    }

    fn plan_digest(&self) -> Result<String> {
        plan_digest(&self.spec.plan)
    }
}

/// A finite synthetic dataset: the first `batches` continuous batches,
/// replayed every epoch.
pub struct SyntheticFixedSource {
    pub inner: ContinuousSource,
    pub batches: usize,
}

impl PairSource for SyntheticFixedSource {
    fn descriptor(&self) -> SourceDescriptor {
        SourceDescriptor::SyntheticFixed { batches: self.batches, plan: self.inner.spec.plan.describe() }
    }

    fn image_shape(&self) -> ImageShape {
        self.inner.image_shape()
    }

    fn steps_per_epoch(&self) -> usize {
        self.inner.steps_per_epoch()
    }

    fn pairs(&mut self, epoch: u64, step: usize) -> Result<(Tensor, Tensor)> {
        let it = (epoch * self.steps_per_epoch() as u64 + step as u64) % self.batches.max(1) as u64;
        let v = cs_batch(self.inner.generator.as_ref(), &self.inner.spec, self.inner.policy, it, &self.inner.consumer)?;
        Ok((v.anchors, v.positives))
    }

    fn plan_digest(&self) -> Result<String> {
        self.inner.plan_digest()
    }
}

/// Two independently augmented views of each real image, reshuffled every epoch.
pub struct RealSource {
    pub dataset: ImageDataset,
    pub batch_size: usize,
    pub augment: PixelAugmentConfig,
    pub seed: u64,
    device: candle_core::Device,
    order: Option<(u64, Vec<usize>)>,
}

impl RealSource {
    pub fn new(
        dataset: ImageDataset,
        batch_size: usize,
        augment: PixelAugmentConfig,
        seed_value: u64,
        device: &candle_core::Device,
    ) -> Self {
        Self { dataset, batch_size, augment, seed: seed_value, device: device.clone(), order: None }
    }
}

impl PairSource for RealSource {
    fn descriptor(&self) -> SourceDescriptor {
        SourceDescriptor::Real { items: self.dataset.len() }
    }

    fn image_shape(&self) -> ImageShape {
        let s = self.dataset.shape;
        ImageShape::new(s.channels, self.augment.crop_size, self.augment.crop_size)
    }

    fn steps_per_epoch(&self) -> usize {
        (self.dataset.len() / self.batch_size.max(1)).max(1)
    }

    fn pairs(&mut self, epoch: u64, step: usize) -> Result<(Tensor, Tensor)> {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..self.dataset.len()).collect();
            idx.shuffle(&mut seed::rng(seed::derive(self.seed, "real-shuffle", epoch)));
            self.order = Some((epoch, idx));
        }
        let order = &self.order.as_ref().expect("order set above").1;
        let b = self.batch_size.min(order.len());
        let start = (step * b) % order.len();
        let idx: Vec<usize> = (0..b).map(|i| order[(start + i) % order.len()]).collect();
        let x = self.dataset.batch(&idx, &self.device)?;
        let s = seed::derive(seed::derive(self.seed, "real-augment", epoch), "step", step as u64);
        Ok((
            pixel_augment_batch(&x, &self.augment, seed::derive(s, "view", 0))?,
            pixel_augment_batch(&x, &self.augment, seed::derive(s, "view", 1))?,
        ))
    }
}

/// Self-describing encoder checkpoint (JSON plus sibling safetensors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCheckpoint {
    pub format_version: u32,
    pub framework: Framework,
    pub encoder: EncoderKind,
    pub input_shape: ImageShape,
    pub digest: String,
    pub weights: String,
}

pub fn save_encoder(model: &SscrlModel, cfg: &FrameworkConfig, shape: ImageShape, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let weights = dir.join("encoder.safetensors");
    model.encoder_params.save(&weights)?;
    let ck = EncoderCheckpoint {
        format_version: ENCODER_CHECKPOINT_VERSION,
        framework: cfg.framework,
        encoder: cfg.encoder.clone(),
        input_shape: shape,
        digest: model.encoder_params.digest()?,
        weights: "encoder.safetensors".into(),
    };
    let meta = dir.join("encoder.json");
    fs::write(&meta, serde_json::to_string_pretty(&ck)?)?;
    Ok(meta)
}

/// Load a frozen encoder for evaluation.
pub fn load_encoder(meta: &Path, device: &candle_core::Device) -> Result<(EncoderCheckpoint, Box<dyn Encoder>)> {
    let text = fs::read_to_string(meta)
        .map_err(|e| Error::MissingArtifact(format!("encoder checkpoint {}: {e}", meta.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != ENCODER_CHECKPOINT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            path: meta.to_path_buf(),
            found: found as u32,
            expected: ENCODER_CHECKPOINT_VERSION,
        });
    }
    let ck: EncoderCheckpoint = serde_json::from_value(raw)?;
    let params = Params::new(device);
    let enc = ck.encoder.build(ck.input_shape.dims3(), params.vb().pp("enc"))?;
    let w = meta.parent().unwrap_or(Path::new(".")).join(&ck.weights);
    if !w.is_file() {
        return Err(Error::MissingArtifact(format!("encoder weights {}", w.display())));
    }
    params.load_into(&w)?;
    if params.digest()? != ck.digest {
        return Err(Error::Schema(format!("{}: weights do not match recorded digest", meta.display())));
    }
    Ok((ck, enc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub source: SourceDescriptor,
    pub plan_digest: String,
    pub framework: FrameworkConfig,
    pub seed: u64,
    pub steps_per_epoch: usize,
    /// Loss at every optimizer step.
    pub losses: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub checkpoint: PathBuf,
    /// Digest of the final encoder weights.
    pub digest: String,
}

impl TrainRunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("train record {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// What the observer sees after each optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent {
    pub epoch: usize,
    pub step: usize,
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn train_encoder(
    source: &mut dyn PairSource,
    cfg: &FrameworkConfig,
    seed_value: u64,
    out_dir: &Path,
) -> Result<TrainRunRecord> {
    train_encoder_observed(source, cfg, seed_value, out_dir, &mut |_, _| {})
}

/// Train an encoder, calling `observer` after every step. Writes the encoder
/// checkpoint, `train-record.json` and `loss-curve.csv` into `out_dir`.
pub fn train_encoder_observed(
    source: &mut dyn PairSource,
    cfg: &FrameworkConfig,
    seed_value: u64,
    out_dir: &Path,
    observer: &mut dyn FnMut(&StepEvent, &SscrlModel),
) -> Result<TrainRunRecord> {
    cfg.validate()?;
    let shape = source.image_shape();
    let steps = source.steps_per_epoch();
    let device = candle_core::Device::Cpu;
    let model = SscrlModel::new(cfg, shape, &device, seed_value)?;
    let mut opt = SgdMomentum::new(model.trainable(), cfg.lr_at(0.0), cfg.momentum, cfg.weight_decay);
    let (mut losses, mut epoch_loss, mut epoch_seconds) = (Vec::new(), Vec::new(), Vec::new());
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut sum = 0.0;
        for step in 0..steps {
            let lr = cfg.lr_at(epoch as f64 + step as f64 / steps as f64);
            opt.set_learning_rate(lr);
            let (x1, x2) = source.pairs(epoch as u64, step)?;
            let loss = model.loss(&x1, &x2)?;
            let v = scalar(&loss)?;
            let iteration = epoch * steps + step;
            if !v.is_finite() {
                return Err(Error::Training {
                    step: iteration,
                    diagnostics: format!("loss {v} at epoch {epoch} step {step}, lr {lr}"),
                });
            }
            opt.backward_step(&loss)?;
            model.after_step()?;
            losses.push(v);
            sum += v;
            observer(&StepEvent { epoch, step, iteration, loss: v, lr }, &model);
        }
        epoch_loss.push(sum / steps as f64);
        epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    let checkpoint = save_encoder(&model, cfg, shape, out_dir)?;
    let curve: String = std::iter::once("step,loss\n".to_string())
        .chain(losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    fs::write(out_dir.join("loss-curve.csv"), curve)?;
    let record = TrainRunRecord {
        source: source.descriptor(),
        plan_digest: source.plan_digest()?,
        framework: cfg.clone(),
        seed: seed_value,
        steps_per_epoch: steps,
        losses,
        epoch_loss,
        epoch_seconds,
        checkpoint,
        digest: model.encoder_params.digest()?,
    };
    record.save(&out_dir.join("train-record.json"))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framework_fields_present_exactly_when_required() {
        assert!(FrameworkConfig::simsiam().validate().is_ok());
        assert!(FrameworkConfig::simclr().validate().is_ok());
        assert!(FrameworkConfig::byol().validate().is_ok());
        let c = FrameworkConfig { temperature: Some(0.1), ..FrameworkConfig::simsiam() };
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "train.framework.temperature"));
        let c = FrameworkConfig { ema_decay: None, ..FrameworkConfig::byol() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn lr_schedule_endpoints_and_warmup() {
        let c = FrameworkConfig { batch_size: 512, epochs: 10, ..Default::default() };
        assert!((c.lr_at(0.0) - 0.1).abs() < 1e-12);
        assert!(c.lr_at(10.0).abs() < 1e-12);
        let big = FrameworkConfig { batch_size: 1024, epochs: 100, ..Default::default() };
        assert_eq!(big.effective_warmup(), 10);
        assert!((big.lr_at(5.0) - 0.1).abs() < 1e-12);
        assert!((big.lr_at(10.0) - 0.2).abs() < 1e-12);
    }
}
