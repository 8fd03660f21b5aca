use candle_core::Tensor;
use rand_distr::{Distribution, StandardNormal};

use super::{check_latents, ComputeDevice, Generator, GeneratorHandle, ImageShape, LatentSpec};
use crate::error::{Error, Result};
use crate::seed;

/// Per-level map applied to latents before they reach the synthesis network,
/// in the spirit of a style-space mapping `f(z) = w`. Here each level gets a
/// fixed `tanh(z W + b)` layer.
#[derive(Debug, Clone)]
pub struct LatentMapping {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl LatentMapping {
    /// Random square maps with weights `N(0, gain^2 / m)`.
    pub fn random(spec: &LatentSpec, gain: f64, seed_value: u64, device: &ComputeDevice) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, &m) in spec.dims.iter().enumerate() {
            let mut rng = seed::rng(seed::derive(seed_value, "mapping", i as u64));
            let scale = gain / (m as f64).sqrt();
            let mut draw = |n: usize, s: f64| -> Vec<f32> {
                (0..n)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        (e * s) as f32
                    })
                    .collect()
            };
            weights.push(Tensor::from_vec(draw(m * m, scale), (m, m), &device.device)?);
            biases.push(Tensor::from_vec(draw(m, 0.1), m, &device.device)?);
        }
        Ok(Self { weights, biases })
    }

    pub fn apply(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        if latents.len() != self.weights.len() {
            return Err(Error::shape("mapping and latents disagree on level count"));
        }
        latents
            .iter()
            .zip(self.weights.iter().zip(&self.biases))
            .map(|(z, (w, b))| Ok(z.matmul(w)?.broadcast_add(b)?.tanh()?))
            .collect()
    }
}

/// A generator whose public latents pass through a [`LatentMapping`] first.
/// Perturbations, being applied to the latents handed to `decode`, therefore
/// act before the mapping.
pub struct MappedGenerator {
    inner: GeneratorHandle,
    mapping: LatentMapping,
}

impl MappedGenerator {
    pub fn new(inner: GeneratorHandle, mapping: LatentMapping) -> Self {
        Self { inner, mapping }
    }

    pub fn mapping(&self) -> &LatentMapping {
        &self.mapping
    }
}

impl Generator for MappedGenerator {
    fn spec(&self) -> &LatentSpec {
        self.inner.spec()
    }

    fn output_shape(&self) -> ImageShape {
        self.inner.output_shape()
    }

    fn device(&self) -> &ComputeDevice {
        self.inner.device()
    }

    fn decode(&self, latents: &[Tensor], noise_seed: u64) -> Result<Tensor> {
        check_latents(self.spec(), latents)?;
        self.inner.decode(&self.mapping.apply(latents)?, noise_seed)
    }

    fn has_mapping(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::generator::{generate, LinearGaussianMlvgm, TruncatedNormalParams};
    use nalgebra::DMatrix;

    #[test]
    fn mapping_runs_before_synthesis() -> Result<()> {
        let tn = TruncatedNormalParams::new(0.0, 1.0, 2.0)?;
        let spec = LatentSpec::uniform(vec![2], tn)?;
        let inner =
            LinearGaussianMlvgm::new(spec.clone(), ImageShape::new(1, 1, 2), vec![DMatrix::identity(2, 2)], 0.0)?;
        let dev = ComputeDevice::default();
        let mapping = LatentMapping::random(&spec, 1.0, 3, &dev)?;
        let g = MappedGenerator::new(Arc::new(inner), mapping.clone());
        assert!(g.has_mapping());
        let z = vec![0.3f32, -0.7];
        let out = generate(&g, &[z.clone()], 0)?.flatten_all()?.to_vec1::<f32>()?;
        let mapped = mapping.apply(&[Tensor::from_vec(z, (1, 2), &dev.device)?])?[0].flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(out, mapped);
        assert!(out.iter().all(|v| v.abs() < 1.0));
        Ok(())
    }
}
