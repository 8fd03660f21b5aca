//! Continuous sampling: fresh anchor/positive batches generated on the
//! consumer's device at every training step, in place of a stored dataset.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::generator::{ComputeDevice, Generator};
use crate::seed::{self, SeedPolicy};
use crate::views::{make_view_batch, pixel_augment_batch, PerturbationPlan, PixelAugmentConfig, ViewBatch};

#[derive(Debug, Clone)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub plan: PerturbationPlan,
    pub steps_per_epoch: usize,
    /// Applied independently to anchors and positives after generation.
    pub augment: Option<PixelAugmentConfig>,
}

impl BatchSpec {
    pub fn new(batch_size: usize, plan: PerturbationPlan, steps_per_epoch: usize) -> Self {
        Self { batch_size, plan, steps_per_epoch, augment: None }
    }

    pub fn with_augment(mut self, augment: PixelAugmentConfig) -> Self {
        self.augment = Some(augment);
        self
    }
}

/// Steps per epoch matching a real dataset of `reference_size` items.
pub fn default_steps_per_epoch(reference_size: usize, global_batch: usize) -> usize {
    reference_size.div_ceil(global_batch.max(1))
}

fn empty_batch(generator: &dyn Generator) -> Result<ViewBatch> {
    let (c, h, w) = generator.output_shape().dims3();
    let dev = &generator.device().device;
    let img = Tensor::zeros((0, c, h, w), candle_core::DType::F32, dev)?;
    let lat = generator
        .spec()
        .dims
        .iter()
        .map(|&m| Ok(Tensor::zeros((0, m), candle_core::DType::F32, dev)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewBatch { anchor_latents: lat.clone(), positive_latents: lat, anchors: img.clone(), positives: img })
}

/// One batch for global step `iteration`. A pure function of
/// `(policy, iteration)` and the generator's weights; nothing is persisted.
pub fn cs_batch(
    generator: &dyn Generator,
    spec: &BatchSpec,
    policy: SeedPolicy,
    iteration: u64,
    consumer: &ComputeDevice,
) -> Result<ViewBatch> {
    if !generator.device().same(consumer) {
        return Err(Error::Placement(format!(
            "generator on {:?}#{}, consumer on {:?}#{}",
            generator.device().device,
            generator.device().ordinal,
            consumer.device,
            consumer.ordinal
        )));
    }
    if spec.batch_size == 0 {
        return empty_batch(generator);
    }
    let sub = policy.subseed(iteration);
    let mut v = make_view_batch(generator, &spec.plan, spec.batch_size, sub)?;
    v.anchors = v.anchors.detach();
    v.positives = v.positives.detach();
    if let Some(aug) = &spec.augment {
        v.anchors = pixel_augment_batch(&v.anchors, aug, seed::derive(sub, "augment-anchor", 0))?;
        v.positives = pixel_augment_batch(&v.positives, aug, seed::derive(sub, "augment-positive", 0))?;
    }
    Ok(v)
}

/// The batches of one epoch, in order. Global iteration of step `s` in epoch
/// `e` is `e * steps_per_epoch + s`, so resuming mid-epoch replays exactly.
pub struct EpochStream<'a> {
    generator: &'a dyn Generator,
    spec: &'a BatchSpec,
    policy: SeedPolicy,
    consumer: ComputeDevice,
    epoch: u64,
    step: usize,
}

impl<'a> EpochStream<'a> {
    /// Skip to `step` within the epoch.
    pub fn starting_at(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn iteration(&self) -> u64 {
        self.epoch * self.spec.steps_per_epoch as u64 + self.step as u64
    }
}

impl Iterator for EpochStream<'_> {
    type Item = Result<ViewBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.spec.steps_per_epoch {
            return None;
        }
        let it = self.iteration();
        self.step += 1;
        Some(cs_batch(self.generator, self.spec, self.policy, it, &self.consumer))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.spec.steps_per_epoch.saturating_sub(self.step);
        (n, Some(n))
    }
}

impl ExactSizeIterator for EpochStream<'_> {}

/// Stream for one epoch. The consumer is the generator's own device.
pub fn epoch_stream<'a>(
    generator: &'a dyn Generator,
    spec: &'a BatchSpec,
    policy: SeedPolicy,
    epoch_index: u64,
) -> Result<EpochStream<'a>> {
    if spec.steps_per_epoch == 0 {
        return Err(Error::param("steps per epoch must be positive"));
    }
    Ok(EpochStream { generator, spec, policy, consumer: generator.device().clone(), epoch: epoch_index, step: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{ImageShape, LinearGaussianMlvgm, TruncatedNormalParams};

    fn oracle() -> LinearGaussianMlvgm {
        let tn = TruncatedNormalParams::new(0.0, 1.0, 2.0).unwrap();
        LinearGaussianMlvgm::hierarchical(2, &[2.0, 1.0], tn, ImageShape::new(1, 2, 2), 0.1, 0).unwrap()
    }

    fn host(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn empty_batch_and_placement() -> Result<()> {
        let g = oracle();
        let spec = BatchSpec::new(0, PerturbationPlan::resample_last(g.spec()), 1);
        let v = cs_batch(&g, &spec, SeedPolicy::new(0, 0), 0, &ComputeDevice::cpu(0))?;
        assert!(v.is_empty() && v.positives.dims()[0] == 0);
        assert!(matches!(
            cs_batch(&g, &spec, SeedPolicy::new(0, 0), 0, &ComputeDevice::cpu(1)),
            Err(Error::Placement(_))
        ));
        Ok(())
    }

    #[test]
    fn epoch_yields_steps_batches() -> Result<()> {
        let g = oracle();
        let spec = BatchSpec::new(4, PerturbationPlan::resample_last(g.spec()), 10);
        let batches: Vec<_> = epoch_stream(&g, &spec, SeedPolicy::new(1, 0), 0)?.collect::<Result<_>>()?;
        assert_eq!(batches.len(), 10);
        assert!(batches.iter().all(|b| b.len() == 4));
        Ok(())
    }

    #[test]
    fn resume_replays_the_same_batch() -> Result<()> {
        let g = oracle();
        let spec = BatchSpec::new(3, PerturbationPlan::resample_last(g.spec()), 5);
        let p = SeedPolicy::new(7, 0);
        let full: Vec<_> = epoch_stream(&g, &spec, p, 2)?.collect::<Result<_>>()?;
        let resumed = epoch_stream(&g, &spec, p, 2)?.starting_at(3).next().unwrap()?;
        assert_eq!(host(&full[3].anchors), host(&resumed.anchors));
        assert_eq!(host(&full[3].positives), host(&resumed.positives));
        Ok(())
    }

    #[test]
    fn steps_default_rounds_up() {
        assert_eq!(default_steps_per_epoch(50_000, 512), 98);
        assert_eq!(default_steps_per_epoch(512, 512), 1);
    }
}
