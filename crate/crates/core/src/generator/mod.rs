//! Multi-latent generators: latent hierarchy descriptors, the generator
//! abstraction and the two concrete models (an analytically tractable linear
//! Gaussian model and a small hierarchical VAE).

mod checkpoint;
mod linear;
mod mapping;
mod toy_vae;
mod truncnorm;

pub use checkpoint::{load_generator, GeneratorCheckpoint, GeneratorModel, CHECKPOINT_VERSION};
pub use linear::{gaussian_mi_from_covariances, LinearGaussianMlvgm, LinearParams};
pub use mapping::{LatentMapping, MappedGenerator};
pub use toy_vae::{train_toy_vae, train_toy_vae_on, ToyVae, ToyVaeConfig, VaeEpoch, VaeTrainReport};
pub use truncnorm::{sample_truncated_normal, TruncatedNormalParams};

use std::ops::Range;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Channels, height, width of generated images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    /// Flattened dimension.
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// The latent hierarchy of a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    /// Per-level dimensionality, coarsest level first.
    pub dims: Vec<usize>,
    /// Optional grouping of consecutive levels, given as group sizes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<usize>>,
    /// Per-level anchor sampling distribution.
    pub anchor: Vec<TruncatedNormalParams>,
}

/// A level or a group of consecutive levels, the granularity at which
/// influence is probed and perturbation plans are declared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub index: usize,
    pub levels: Range<usize>,
}

impl Unit {
    /// 1-based label: `"3"` for a level, `"1-4"` for a group.
    pub fn label(&self) -> String {
        if self.levels.len() == 1 {
            format!("{}", self.levels.start + 1)
        } else {
            format!("{}-{}", self.levels.start + 1, self.levels.end)
        }
    }
}

impl LatentSpec {
    pub fn new(dims: Vec<usize>, anchor: Vec<TruncatedNormalParams>) -> Result<Self> {
        let s = Self { dims, groups: None, anchor };
        s.validate()?;
        Ok(s)
    }

    /// Same anchor distribution on every level.
    pub fn uniform(dims: Vec<usize>, anchor: TruncatedNormalParams) -> Result<Self> {
        let n = dims.len();
        Self::new(dims, vec![anchor; n])
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        self.groups = Some(groups);
        self.validate()?;
        Ok(self)
    }

    pub fn n_levels(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::param("latent spec needs at least one level"));
        }
        if let Some(i) = self.dims.iter().position(|&d| d == 0) {
            return Err(Error::param(format!("latent level {} has zero dimension", i + 1)));
        }
        if self.anchor.len() != self.dims.len() {
            return Err(Error::param(format!(
                "{} anchor distributions for {} levels",
                self.anchor.len(),
                self.dims.len()
            )));
        }
        for a in &self.anchor {
            a.validate()?;
        }
        if let Some(g) = &self.groups {
            if g.is_empty() || g.contains(&0) || g.iter().sum::<usize>() != self.dims.len() {
                return Err(Error::param(format!("groups {g:?} do not partition {} levels", self.dims.len())));
            }
        }
        Ok(())
    }

    pub fn units(&self) -> Vec<Unit> {
        let sizes = self.groups.clone().unwrap_or_else(|| vec![1; self.dims.len()]);
        let mut start = 0;
        sizes
            .into_iter()
            .enumerate()
            .map(|(index, s)| {
                let u = Unit { index, levels: start..start + s };
                start += s;
                u
            })
            .collect()
    }

    pub fn unit(&self, index: usize) -> Result<Unit> {
        self.units().into_iter().nth(index).ok_or_else(|| {
            Error::param(format!("unit index {} out of range ({} units)", index + 1, self.units().len()))
        })
    }

    /// Concatenated latent dimension of a unit.
    pub fn unit_dim(&self, unit: &Unit) -> usize {
        self.dims[unit.levels.clone()].iter().sum()
    }
}

/// Where a generator's outputs live. `ordinal` distinguishes logical devices
/// (replicas) that share a backend.
#[derive(Debug, Clone)]
pub struct ComputeDevice {
    pub device: Device,
    pub ordinal: usize,
}

impl ComputeDevice {
    pub fn cpu(ordinal: usize) -> Self {
        Self { device: Device::Cpu, ordinal }
    }

    pub fn same(&self, other: &ComputeDevice) -> bool {
        self.ordinal == other.ordinal && self.device.same_device(&other.device)
    }
}

impl Default for ComputeDevice {
    fn default() -> Self {
        Self::cpu(0)
    }
}

/// A generator `g(z_1, ..., z_n) -> x` consuming latents coarsest first.
///
/// `decode` is pure in `(latents, noise_seed)` and safe to call concurrently.
/// Latents are pre-mapping: a generator with an internal mapping hook applies
/// it inside `decode`, so perturbations act before the mapping.
pub trait Generator: Send + Sync {
    fn spec(&self) -> &LatentSpec;
    fn output_shape(&self) -> ImageShape;
    fn device(&self) -> &ComputeDevice;
    /// `latents[i]` has shape `(B, dims[i])`; returns `(B, C, H, W)`.
    fn decode(&self, latents: &[Tensor], noise_seed: u64) -> Result<Tensor>;
    fn has_mapping(&self) -> bool {
        false
    }
}

pub type GeneratorHandle = Arc<dyn Generator>;

/// Validate latent tensors against the spec; returns the batch size.
pub fn check_latents(spec: &LatentSpec, latents: &[Tensor]) -> Result<usize> {
    if latents.len() != spec.n_levels() {
        return Err(Error::shape(format!("expected {} latent levels, got {}", spec.n_levels(), latents.len())));
    }
    let mut batch = None;
    for (i, (z, &m)) in latents.iter().zip(&spec.dims).enumerate() {
        let (b, d) =
            z.dims2().map_err(|_| Error::shape(format!("level {} latent must be 2-D, got {:?}", i + 1, z.dims())))?;
        if d != m {
            return Err(Error::shape(format!("level {} expects dim {m}, got {d}", i + 1)));
        }
        if *batch.get_or_insert(b) != b {
            return Err(Error::shape("latent levels disagree on batch size"));
        }
    }
    Ok(batch.unwrap_or(0))
}

/// Host-side latents for a batch: one row-major `(batch, dims[i])` buffer per level.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub batch: usize,
    pub levels: Vec<Vec<f32>>,
}

impl LatentBatch {
    /// Draw anchors from each level's anchor distribution.
    pub fn sample(spec: &LatentSpec, batch: usize, rng: &mut Rng) -> Self {
        let levels = spec.dims.iter().zip(&spec.anchor).map(|(&m, a)| a.sample_n(batch * m, rng)).collect();
        Self { batch, levels }
    }

    pub fn tensors(&self, spec: &LatentSpec, device: &Device) -> Result<Vec<Tensor>> {
        self.levels
            .iter()
            .zip(&spec.dims)
            .map(|(v, &m)| Ok(Tensor::from_vec(v.clone(), (self.batch, m), device)?))
            .collect()
    }

    /// Latent vector of item `b` at `level`.
    pub fn item(&self, level: usize, b: usize, spec: &LatentSpec) -> &[f32] {
        let m = spec.dims[level];
        &self.levels[level][b * m..(b + 1) * m]
    }
}

/// Generate a single image `(C, H, W)` from one latent vector per level.
pub fn generate(generator: &dyn Generator, latents: &[Vec<f32>], seed: u64) -> Result<Tensor> {
    let spec = generator.spec();
    if latents.len() != spec.n_levels() {
        return Err(Error::shape(format!("expected {} latent levels, got {}", spec.n_levels(), latents.len())));
    }
    let dev = &generator.device().device;
    let ts = latents
        .iter()
        .zip(&spec.dims)
        .enumerate()
        .map(|(i, (z, &m))| {
            if z.len() != m {
                return Err(Error::shape(format!("level {} expects dim {m}, got {}", i + 1, z.len())));
            }
            Ok(Tensor::from_vec(z.clone(), (1, m), dev)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(generator.decode(&ts, seed)?.squeeze(0)?)
}
