use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::linear::LinearParams;
use super::toy_vae::{ToyVaeConfig, VaeTrainReport};
use super::{ComputeDevice, Generator, GeneratorHandle, ImageShape, LatentSpec, LinearGaussianMlvgm, ToyVae};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorModel {
    Linear(LinearParams),
    ToyVae {
        config: ToyVaeConfig,
        /// Weights file, relative to the checkpoint.
        weights: String,
        report: Option<VaeTrainReport>,
    },
}

/// Self-describing generator checkpoint (JSON metadata, plus a safetensors
/// file for models with weights).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorCheckpoint {
    pub format_version: u32,
    pub spec: LatentSpec,
    pub output_shape: ImageShape,
    pub model: GeneratorModel,
}

impl GeneratorCheckpoint {
    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("generator checkpoint {}: {e}", path.display())))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Schema(format!("{}: no format_version", path.display())))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }
}

impl LinearGaussianMlvgm {
    pub fn save(&self, path: &Path) -> Result<()> {
        GeneratorCheckpoint {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec().clone(),
            output_shape: self.output_shape(),
            model: GeneratorModel::Linear(self.to_params()),
        }
        .write(path)
    }
}

fn weights_path(path: &Path) -> PathBuf {
    path.with_extension("safetensors")
}

impl ToyVae {
    /// Writes `path` (metadata) and a sibling `.safetensors` file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let w = weights_path(path);
        self.params().save(&w)?;
        GeneratorCheckpoint {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec().clone(),
            output_shape: self.output_shape(),
            model: GeneratorModel::ToyVae {
                config: self.config().clone(),
                weights: w.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                report: self.report().cloned(),
            },
        }
        .write(path)
    }

    pub fn load(path: &Path, device: ComputeDevice) -> Result<Self> {
        let ck = GeneratorCheckpoint::read(path)?;
        match ck.model {
            GeneratorModel::ToyVae { config, weights, report } => {
                let mut vae = ToyVae::new(config, ck.output_shape, device, 0)?;
                let w = path.parent().unwrap_or(Path::new(".")).join(weights);
                if !w.is_file() {
                    return Err(Error::MissingArtifact(format!("vae weights {}", w.display())));
                }
                vae.params().load_into(&w)?;
                vae.set_trained(ck.spec, report)?;
                Ok(vae)
            }
            GeneratorModel::Linear(_) => Err(Error::Schema(format!("{} is not a vae checkpoint", path.display()))),
        }
    }
}

/// Load any generator checkpoint for inference.
pub fn load_generator(path: &Path, device: ComputeDevice) -> Result<GeneratorHandle> {
    let ck = GeneratorCheckpoint::read(path)?;
    Ok(match ck.model {
        GeneratorModel::Linear(p) => Arc::new(LinearGaussianMlvgm::from_params(p, device)?),
        GeneratorModel::ToyVae { .. } => Arc::new(ToyVae::load(path, device)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate, TruncatedNormalParams};

    #[test]
    fn vae_round_trip_and_version_gate() -> Result<()> {
        let cfg = ToyVaeConfig { dims: vec![2, 3, 4], width: 4, ..Default::default() };
        let vae = ToyVae::new(cfg, ImageShape::new(3, 32, 32), ComputeDevice::default(), 5)?;
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("gen.json");
        vae.save(&p)?;
        let back = load_generator(&p, ComputeDevice::default())?;
        let z = vec![vec![0.3f32; 2], vec![-0.1; 3], vec![0.7; 4]];
        assert_eq!(
            generate(&vae, &z, 0)?.flatten_all()?.to_vec1::<f32>()?,
            generate(back.as_ref(), &z, 0)?.flatten_all()?.to_vec1::<f32>()?
        );

        let text = fs::read_to_string(&p)?.replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&p, text)?;
        assert!(matches!(
            load_generator(&p, ComputeDevice::default()),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
        Ok(())
    }

    #[test]
    fn linear_round_trip() -> Result<()> {
        let tn = TruncatedNormalParams::new(0.0, 1.0, 8.0)?;
        let g = LinearGaussianMlvgm::hierarchical(2, &[2.0, 1.0], tn, ImageShape::new(1, 2, 2), 0.3, 1)?;
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("lin.json");
        g.save(&p)?;
        let back = load_generator(&p, ComputeDevice::default())?;
        assert_eq!(back.spec(), g.spec());
        assert!(matches!(
            load_generator(&dir.path().join("nope.json"), ComputeDevice::default()),
            Err(Error::MissingArtifact(_))
        ));
        Ok(())
    }
}
