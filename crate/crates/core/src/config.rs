//! Run configuration: one TOML document with a section per stage, dotted
//! `key=value` overrides, and validation that names the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ShapesConfig;
use crate::error::{Error, Result};
use crate::generator::{ImageShape, ToyVaeConfig, TruncatedNormalParams};
use crate::monte_carlo::{Norm, DEFAULT_SAMPLES};
use crate::probe::ProbeConfig;
use crate::sscrl::{BenchConfig, FrameworkConfig, LinearEvalConfig};
use crate::views::{PixelAugmentConfig, PlanEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    pub generator: GeneratorSection,
    pub probe: ProbeConfig,
    pub mc: McSection,
    pub views: ViewsSection,
    pub sampling: SamplingSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorSection::default(),
            probe: ProbeConfig::default(),
            mc: McSection::default(),
            views: ViewsSection::default(),
            sampling: SamplingSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    ToyVae,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    /// Trained generator used by every downstream command.
    pub checkpoint: Option<PathBuf>,
    /// Labeled corpus: VAE training data, real-image source and probe data.
    pub corpus: ShapesConfig,
    pub corpus_seed: u64,
    /// Leading fraction of the training split the VAE is fit on.
    pub corpus_fraction: f64,
    pub vae: ToyVaeConfig,
    pub linear: LinearSection,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::ToyVae,
            checkpoint: None,
            corpus: ShapesConfig::default(),
            corpus_seed: 0,
            corpus_fraction: 1.0,
            vae: ToyVaeConfig::default(),
            linear: LinearSection::default(),
        }
    }
}

/// Closed-form oracle generator with levels sharing one column space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSection {
    pub latent_dim: usize,
    /// Per-level operator norms, coarsest first.
    pub scales: Vec<f64>,
    pub eps: f64,
    pub anchor: TruncatedNormalParams,
    pub shape: ImageShape,
}

impl Default for LinearSection {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            scales: vec![4.0, 2.0, 1.0],
            eps: 0.5,
            anchor: TruncatedNormalParams { mean: 0.0, std: 1.0, trunc: 2.0 },
            shape: ImageShape::new(1, 4, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub samples: usize,
    pub norm: Norm,
    /// Probe run directories or probe checkpoint files.
    pub probes: Vec<PathBuf>,
    /// Level labels that must be present; all found levels are reported.
    pub levels: Option<Vec<String>>,
}

impl Default for McSection {
    fn default() -> Self {
        Self { samples: DEFAULT_SAMPLES, norm: Norm::L2, probes: Vec::new(), levels: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewsSection {
    /// Explicit per-unit plan. Takes precedence over `report`.
    pub plan: Option<Vec<PlanEntry>>,
    /// Magnitude report to derive random-perturbation stds from.
    pub report: Option<PathBuf>,
    pub report_scale: f64,
    pub report_trunc: f64,
    pub augment: PixelAugmentConfig,
    /// Anchors shown by `gen-views`.
    pub anchors: usize,
}

impl Default for ViewsSection {
    fn default() -> Self {
        Self {
            plan: None,
            report: None,
            report_scale: 1.0,
            report_trunc: 2.0,
            augment: PixelAugmentConfig::default(),
            anchors: 6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    /// Fixed epoch length; otherwise the corpus size over the batch size.
    pub steps_per_epoch: Option<usize>,
    /// Dataset size an epoch is defined against; the corpus size if absent.
    pub reference_size: Option<usize>,
    pub replica: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Continuous,
    SyntheticFixed,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub source: SourceKind,
    /// Distinct batches of the synthetic-fixed source; 0 means one epoch.
    pub fixed_batches: usize,
    /// Augmentation for the real-image source.
    pub real_augment: PixelAugmentConfig,
    pub framework: FrameworkConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            source: SourceKind::Continuous,
            fixed_batches: 0,
            real_augment: PixelAugmentConfig::standard(32),
            framework: FrameworkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Encoder checkpoint (`encoder.json`) to evaluate.
    pub encoder: Option<PathBuf>,
    pub linear: LinearEvalConfig,
}

/// Optional keys absent from the defaults, listed in the reference.
pub const OPTIONAL_KEYS: [(&str, &str); 11] = [
    ("generator.checkpoint", "\"path/to/generator.json\""),
    ("probe.tolerance", "0.05"),
    ("probe.encoder", "{ kind = \"conv\", out = 128 }"),
    ("mc.levels", "[\"1\", \"2\"]"),
    (
        "views.plan",
        "[{ kind = \"fixed\" }, { kind = \"random\", mean = 0.0, std = 0.1, trunc = 2.0 }, { kind = \"resample\" }]",
    ),
    ("views.report", "\"path/to/mc-report.json\""),
    ("sampling.steps_per_epoch", "40"),
    ("sampling.reference_size", "10000"),
    ("train.framework.temperature", "0.5"),
    ("train.framework.ema_decay", "0.99"),
    ("eval.encoder", "\"path/to/encoder.json\""),
];

impl RunConfig {
    /// Parse a config document, apply `key=value` overrides and validate.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)
            .map_err(|e| Error::Config { key: "<file>".into(), message: e.message().to_string() })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config { key: e.path().to_string(), message: e.inner().message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config { key: "<file>".into(), message: format!("{}: {e}", p.display()) })?,
            None => String::new(),
        };
        Self::load(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config { key: "<config>".into(), message: e.to_string() })
    }

    /// Every default, followed by the optional keys as comments.
    pub fn reference() -> Result<String> {
        let mut s = String::from("# Defaults. Any key can be overridden with --set section.key=value.\n\n");
        s.push_str(&Self::default().to_toml()?);
        s.push_str("\n# Optional keys (unset by default):\n");
        for (k, v) in OPTIONAL_KEYS {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        Ok(s)
    }

    /// Checks beyond the schema, reported against their dotted key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: key.into(), message });
        let g = &self.generator;
        if !(g.corpus_fraction > 0.0 && g.corpus_fraction <= 1.0) {
            return bad("generator.corpus_fraction", "must be in (0, 1]".into());
        }
        if g.corpus.train == 0 || g.corpus.test == 0 {
            return bad("generator.corpus", "train and test sizes must be positive".into());
        }
        if g.vae.dims.is_empty() || g.vae.dims.contains(&0) {
            return bad("generator.vae.dims", "needs at least one non-zero level".into());
        }
        if let Err(e) = g.linear.anchor.validate() {
            return bad("generator.linear.anchor", e.to_string());
        }
        self.probe.validate()?;
        if self.mc.samples < 2 {
            return bad("mc.samples", "at least 2 samples are required".into());
        }
        if !(self.views.report_scale > 0.0) {
            return bad("views.report_scale", "must be positive".into());
        }
        let size = (g.corpus.size, g.corpus.size);
        self.views.augment.validate(size)?;
        self.train.real_augment.validate(size).map_err(|e| rekey(e, "views.augment", "train.real_augment"))?;
        if self.sampling.steps_per_epoch == Some(0) {
            return bad("sampling.steps_per_epoch", "must be positive".into());
        }
        self.train.framework.validate()?;
        if self.eval.linear.epochs == 0 || self.eval.linear.batch_size == 0 {
            return bad("eval.linear", "epochs and batch_size must be positive".into());
        }
        if self.bench.trials < 3 {
            return bad("bench.trials", "at least 3 trials required".into());
        }
        if self.bench.batch_sizes.is_empty() || self.bench.steps == 0 {
            return bad("bench.batch_sizes", "batch sizes and steps must be non-empty".into());
        }
        Ok(())
    }
}

fn rekey(e: Error, from: &str, to: &str) -> Error {
    match e {
        Error::Config { key, message } => Error::Config { key: key.replacen(from, to, 1), message },
        e => e,
    }
}

/// Set `a.b.c=value` in `table`. The value is read as a TOML value, falling
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.into(),
        message: "override must look like section.key=value".into(),
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config { key: key.into(), message: "empty key segment".into() });
    }
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = table;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config { key: parts[..=i].join("."), message: "is not a section".into() })?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_round_trip_through_reference() -> Result<()> {
        let back = RunConfig::load(&RunConfig::reference()?, &[])?;
        assert_eq!(back, RunConfig::default());
        Ok(())
    }

    #[test]
    fn overrides_reach_nested_keys() -> Result<()> {
        let c = RunConfig::load(
            "",
            &[
                "train.framework.epochs=3".into(),
                "generator.kind=linear".into(),
                "generator.checkpoint=runs/x/generator.json".into(),
                "bench.batch_sizes=[8, 16]".into(),
                "mc.norm=\"linf\"".into(),
            ],
        )?;
        assert_eq!(c.train.framework.epochs, 3);
        assert_eq!(c.generator.kind, GeneratorKind::Linear);
        assert_eq!(c.generator.checkpoint.as_deref(), Some(Path::new("runs/x/generator.json")));
        assert_eq!(c.bench.batch_sizes, vec![8, 16]);
        assert_eq!(c.mc.norm, Norm::Linf);
        Ok(())
    }

    #[test]
    fn every_optional_key_is_accepted() -> Result<()> {
        for (k, v) in OPTIONAL_KEYS {
            let mut set = vec![format!("{k}={v}")];
            if k == "train.framework.temperature" {
                set.push("train.framework.framework=simclr".into());
            }
            if k == "train.framework.ema_decay" {
                set.push("train.framework.framework=byol".into());
            }
            RunConfig::load("", &set)?;
        }
        Ok(())
    }

    #[test]
    fn errors_name_the_offending_key() {
        assert_eq!(key_of(RunConfig::load("", &["train.framework.epohcs=3".into()])), "train.framework.epohcs");
        assert_eq!(key_of(RunConfig::load("[mc]\nsamples = \"many\"\n", &[])), "mc.samples");
        assert_eq!(key_of(RunConfig::load("", &["nonsense=1".into()])), "nonsense");
        assert_eq!(key_of(RunConfig::load("", &["mc.samples=1".into()])), "mc.samples");
        assert_eq!(key_of(RunConfig::load("", &["train.framework.epochs=0".into()])), "train.framework.epochs");
        assert_eq!(
            key_of(RunConfig::load("", &["train.real_augment.crop_size=64".into()])),
            "train.real_augment.crop_size"
        );
        assert_eq!(key_of(RunConfig::load("", &["seed".into()])), "seed");
    }
}
