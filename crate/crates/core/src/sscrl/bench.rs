use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FrameworkConfig, SscrlModel};
use crate::corpus::{decode_png, ImageDataset};
use crate::error::{Error, Result};
use crate::generator::{Generator, ImageShape};
use crate::nn::{EncoderKind, SgdMomentum};
use crate::sampling::{cs_batch, BatchSpec};
use crate::seed::{self, SeedPolicy};
use crate::views::{pixel_augment, pixel_augment_batch, PerturbationPlan, PixelAugmentConfig};

/// A data source under benchmark. `reset` is called before every trial.
pub trait BenchSource {
    fn name(&self) -> String;
    fn image_shape(&self) -> ImageShape;
    fn reset(&mut self, batch_size: usize, trial: usize) -> Result<()>;
    /// `None` once the source has no more full batches this epoch.
    fn next_pairs(&mut self) -> Result<Option<(Tensor, Tensor)>>;
}

/// Continuous sampling from a generator.
pub struct ContinuousBench {
    generator: Arc<dyn Generator>,
    spec: BatchSpec,
    policy: SeedPolicy,
    iteration: u64,
}

impl ContinuousBench {
    pub fn new(
        generator: Arc<dyn Generator>,
        plan: PerturbationPlan,
        augment: PixelAugmentConfig,
        seed_value: u64,
    ) -> Self {
        Self {
            generator,
            spec: BatchSpec::new(1, plan, 1).with_augment(augment),
            policy: SeedPolicy::new(seed_value, 0),
            iteration: 0,
        }
    }
}

impl BenchSource for ContinuousBench {
    fn name(&self) -> String {
        "continuous".into()
    }

    fn image_shape(&self) -> ImageShape {
        let s = self.generator.output_shape();
        let a = self.spec.augment.as_ref().expect("set in new");
        ImageShape::new(s.channels, a.output_size((s.height, s.width)).0, a.output_size((s.height, s.width)).1)
    }

    fn reset(&mut self, batch_size: usize, trial: usize) -> Result<()> {
        self.spec.batch_size = batch_size;
        self.policy.replica = trial as u32;
        self.iteration = 0;
        Ok(())
    }

    fn next_pairs(&mut self) -> Result<Option<(Tensor, Tensor)>> {
        let consumer = self.generator.device().clone();
        let v = cs_batch(self.generator.as_ref(), &self.spec, self.policy, self.iteration, &consumer)?;
        self.iteration += 1;
        Ok(Some((v.anchors, v.positives)))
    }
}

/// The whole corpus decoded in memory; batches are gathered and augmented
/// as whole tensors.
pub struct PackedBench {
    dataset: ImageDataset,
    augment: PixelAugmentConfig,
    seed: u64,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    calls: u64,
}

impl PackedBench {
    pub fn new(dataset: ImageDataset, augment: PixelAugmentConfig, seed_value: u64) -> Self {
        Self { dataset, augment, seed: seed_value, order: Vec::new(), pos: 0, batch: 1, calls: 0 }
    }
}

impl BenchSource for PackedBench {
    fn name(&self) -> String {
        "packed-memory".into()
    }

    fn image_shape(&self) -> ImageShape {
        let s = self.dataset.shape;
        let (h, w) = self.augment.output_size((s.height, s.width));
        ImageShape::new(s.channels, h, w)
    }

    fn reset(&mut self, batch_size: usize, trial: usize) -> Result<()> {
        self.order = (0..self.dataset.len()).collect();
        self.order.shuffle(&mut seed::rng(seed::derive(self.seed, "bench-order", trial as u64)));
        self.pos = 0;
        self.batch = batch_size;
        Ok(())
    }

    fn next_pairs(&mut self) -> Result<Option<(Tensor, Tensor)>> {
        if self.pos + self.batch > self.order.len() {
            return Ok(None);
        }
        let idx = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        let x = self.dataset.batch(idx, &Device::Cpu)?;
        self.calls += 1;
        let s = seed::derive(self.seed, "bench-augment", self.calls);
        Ok(Some((
            pixel_augment_batch(&x, &self.augment, seed::derive(s, "view", 0))?,
            pixel_augment_batch(&x, &self.augment, seed::derive(s, "view", 1))?,
        )))
    }
}

/// One file open, PNG decode and augmentation per item and view, with no
/// caching or batching: the unoptimized baseline.
pub struct NaiveDiskBench {
    items: Vec<PathBuf>,
    shape: ImageShape,
    augment: PixelAugmentConfig,
    seed: u64,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    calls: u64,
}

impl NaiveDiskBench {
    /// `items` are image files; `shape` is the decoded training resolution.
    pub fn new(items: Vec<PathBuf>, shape: ImageShape, augment: PixelAugmentConfig, seed_value: u64) -> Self {
        Self { items, shape, augment, seed: seed_value, order: Vec::new(), pos: 0, batch: 1, calls: 0 }
    }

    fn load(&self, path: &Path, s: u64) -> Result<(Tensor, Tensor)> {
        let px = decode_png(path, self.shape)?;
        let (c, h, w) = self.shape.dims3();
        let x =
            Tensor::from_vec(px.into_iter().map(|p| p as f32 / 255.0).collect::<Vec<_>>(), (c, h, w), &Device::Cpu)?;
        Ok((
            pixel_augment(&x, &self.augment, seed::derive(s, "view", 0))?,
            pixel_augment(&x, &self.augment, seed::derive(s, "view", 1))?,
        ))
    }
}

impl BenchSource for NaiveDiskBench {
    fn name(&self) -> String {
        "naive-disk".into()
    }

    fn image_shape(&self) -> ImageShape {
        let (h, w) = self.augment.output_size((self.shape.height, self.shape.width));
        ImageShape::new(self.shape.channels, h, w)
    }

    fn reset(&mut self, batch_size: usize, trial: usize) -> Result<()> {
        self.order = (0..self.items.len()).collect();
        self.order.shuffle(&mut seed::rng(seed::derive(self.seed, "bench-order", trial as u64)));
        self.pos = 0;
        self.batch = batch_size;
        Ok(())
    }

    fn next_pairs(&mut self) -> Result<Option<(Tensor, Tensor)>> {
        if self.pos + self.batch > self.order.len() {
            return Ok(None);
        }
        let (mut a, mut p) = (Vec::with_capacity(self.batch), Vec::with_capacity(self.batch));
        for k in 0..self.batch {
            self.calls += 1;
            let (x1, x2) =
                self.load(&self.items[self.order[self.pos + k]], seed::derive(self.seed, "bench-item", self.calls))?;
            a.push(x1);
            p.push(x2);
        }
        self.pos += self.batch;
        Ok(Some((Tensor::stack(&a, 0)?, Tensor::stack(&p, 0)?)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    /// Steps per epoch, identical for every source.
    pub steps: usize,
    pub trials: usize,
    /// Untimed trials run first.
    pub warmup_trials: usize,
    /// Time a SimSiam optimizer step on every batch, as in end-to-end training.
    pub train_step: bool,
    pub encoder: EncoderKind,
    /// Upsampling factor of the PNG files read by the naive loader; they are
    /// resized back to the training resolution on decode.
    pub disk_scale: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![64, 128],
            steps: 4,
            trials: 3,
            warmup_trials: 1,
            train_step: true,
            encoder: EncoderKind::ResNet { width: 16 },
            disk_scale: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub source: String,
    pub batch_size: usize,
    pub steps: usize,
    pub trial_seconds: Vec<f64>,
    pub seconds_per_epoch: f64,
    pub std_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, source: &str, batch_size: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.source == source && r.batch_size == batch_size)
    }

    /// Fastest row at a batch size.
    pub fn fastest(&self, batch_size: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .filter(|r| r.batch_size == batch_size)
            .min_by(|a, b| a.seconds_per_epoch.total_cmp(&b.seconds_per_epoch))
    }

    /// Writes `bench.json` and `bench.svg`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let j = dir.join("bench.json");
        fs::write(&j, serde_json::to_string_pretty(self)?)?;
        let s = dir.join("bench.svg");
        crate::plot::bench_chart(self, &s)?;
        Ok((j, s))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("bench report {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

fn run_epoch(
    src: &mut dyn BenchSource,
    steps: usize,
    consumer: Option<(&SscrlModel, &mut SgdMomentum)>,
) -> Result<f64> {
    let start = Instant::now();
    let mut consumer = consumer;
    for step in 0..steps {
        let (a, p) = src
            .next_pairs()?
            .ok_or_else(|| Error::Benchmark(format!("{} exhausted after {step} of {steps} steps", src.name())))?;
        match consumer.as_mut() {
            Some((model, opt)) => opt.backward_step(&model.loss(&a, &p)?)?,
            // Force materialization so lazy sources are charged in full.
            None => {
                let _ = (a.sum_all()?.to_scalar::<f32>()?, p.sum_all()?.to_scalar::<f32>()?);
            }
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Mean wall seconds per epoch of `steps` batches for every
/// (source, batch size), over `trials` timed trials after untimed warmup.
pub fn loader_benchmark(
    sources: &mut [Box<dyn BenchSource>],
    cfg: &BenchConfig,
    seed_value: u64,
) -> Result<BenchReport> {
    if cfg.trials < 3 {
        return Err(Error::Config { key: "bench.trials".into(), message: "at least 3 trials required".into() });
    }
    if cfg.steps == 0 || cfg.batch_sizes.is_empty() {
        return Err(Error::Config {
            key: "bench.steps".into(),
            message: "steps and batch sizes must be non-empty".into(),
        });
    }
    let shapes: Vec<_> = sources.iter().map(|s| s.image_shape()).collect();
    if shapes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Benchmark(format!("sources yield different image shapes: {shapes:?}")));
    }
    let fw = FrameworkConfig { encoder: cfg.encoder.clone(), ..FrameworkConfig::simsiam() };
    let mut rows = Vec::new();
    for &b in &cfg.batch_sizes {
        for src in sources.iter_mut() {
            let model = if cfg.train_step {
                Some(SscrlModel::new(
                    &FrameworkConfig { batch_size: b.max(2), ..fw.clone() },
                    shapes[0],
                    &Device::Cpu,
                    seed_value,
                )?)
            } else {
                None
            };
            let mut opt = model.as_ref().map(|m| SgdMomentum::new(m.trainable(), 0.0, 0.9, 1e-4));
            let mut times = Vec::with_capacity(cfg.trials);
            for trial in 0..cfg.warmup_trials + cfg.trials {
                src.reset(b, trial)?;
                let t = run_epoch(src.as_mut(), cfg.steps, model.as_ref().zip(opt.as_mut()))?;
                if trial >= cfg.warmup_trials {
                    times.push(t);
                }
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
            rows.push(BenchRow {
                source: src.name(),
                batch_size: b,
                steps: cfg.steps,
                trial_seconds: times,
                seconds_per_epoch: mean,
                std_seconds: var.sqrt(),
            });
        }
    }
    Ok(BenchReport { config: cfg.clone(), seed: seed_value, rows })
}
