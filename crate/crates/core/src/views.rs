//! Anchor/positive view synthesis: per-unit latent perturbation plans and a
//! small pixel-space augmentation stage.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{sample_truncated_normal, Generator, LatentBatch, LatentSpec, TruncatedNormalParams};
use crate::monte_carlo::McReport;
use crate::probe::{load_probe, replace_unit, unit_latent, PerturbationNet};
use crate::seed::{self, Rng};

/// Config form of a plan entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlanEntry {
    Fixed,
    Random(TruncatedNormalParams),
    /// Probe checkpoint metadata, relative paths resolved against the config.
    Learned {
        checkpoint: PathBuf,
    },
    Resample,
}

/// How one unit's latent is transformed to build the positive view.
#[derive(Clone)]
pub enum Strategy {
    /// Shared verbatim.
    Fixed,
    /// `z + w`, `w` drawn elementwise from the given distribution.
    Random(TruncatedNormalParams),
    /// `z + p(z)` with a trained perturbation network.
    Learned(Arc<PerturbationNet>),
    /// Independent fresh draw from the unit's anchor distribution.
    Resample,
}

impl std::fmt::Debug for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Fixed => write!(f, "fixed"),
            Strategy::Random(p) => write!(f, "random({}, {}, {})", p.mean, p.std, p.trunc),
            Strategy::Learned(n) => write!(f, "learned(dim {})", n.dim()),
            Strategy::Resample => write!(f, "resample"),
        }
    }
}

/// One strategy per unit (level, or group when the spec is grouped).
#[derive(Debug, Clone)]
pub struct PerturbationPlan {
    pub strategies: Vec<Strategy>,
}

impl PerturbationPlan {
    pub fn new(strategies: Vec<Strategy>) -> Self {
        Self { strategies }
    }

    pub fn all_fixed(spec: &LatentSpec) -> Self {
        Self::new(vec![Strategy::Fixed; spec.units().len()])
    }

    /// Same random perturbation on every unit: the single-latent baseline.
    pub fn uniform_random(spec: &LatentSpec, params: TruncatedNormalParams) -> Self {
        Self::new(vec![Strategy::Random(params); spec.units().len()])
    }

    /// Every unit fixed except the last, which is resampled.
    pub fn resample_last(spec: &LatentSpec) -> Self {
        let n = spec.units().len();
        let mut s = vec![Strategy::Fixed; n];
        s[n - 1] = Strategy::Resample;
        Self::new(s)
    }

    pub fn from_entries(entries: &[PlanEntry], base_dir: &Path, device: &Device) -> Result<Self> {
        let strategies = entries
            .iter()
            .map(|e| {
                Ok(match e {
                    PlanEntry::Fixed => Strategy::Fixed,
                    PlanEntry::Random(p) => {
                        p.validate()?;
                        Strategy::Random(*p)
                    }
                    PlanEntry::Learned { checkpoint } => {
                        let (_, net) = load_probe(&base_dir.join(checkpoint), device)?;
                        Strategy::Learned(Arc::new(net))
                    }
                    PlanEntry::Resample => Strategy::Resample,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(strategies))
    }

    /// True when every unit is fixed, so views are identical up to noise.
    pub fn is_trivial(&self) -> bool {
        self.strategies.iter().all(|s| matches!(s, Strategy::Fixed))
    }

    pub fn validate_for(&self, spec: &LatentSpec) -> Result<()> {
        let units = spec.units();
        if self.strategies.len() != units.len() {
            return Err(Error::param(format!("plan has {} entries for {} units", self.strategies.len(), units.len())));
        }
        for (s, u) in self.strategies.iter().zip(&units) {
            match s {
                Strategy::Random(p) => p.validate()?,
                Strategy::Learned(n) if n.dim() != spec.unit_dim(u) => {
                    return Err(Error::shape(format!(
                        "unit {} has dim {}, perturbation net expects {}",
                        u.label(),
                        spec.unit_dim(u),
                        n.dim()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Short text form, e.g. `fixed,fixed,resample`, used in run records.
    pub fn describe(&self) -> String {
        self.strategies.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(",")
    }
}

/// `z + w` with `w` drawn elementwise from `params`.
pub fn perturb_random(z: &Tensor, params: &TruncatedNormalParams, seed_value: u64) -> Result<Tensor> {
    let w = sample_truncated_normal(params, z.elem_count(), seed_value)?;
    let w = Tensor::from_vec(w, z.shape(), z.device())?.to_dtype(z.dtype())?;
    Ok((z + w)?)
}

/// `z + p(z)`. `z` is `(B, dim)`.
pub fn perturb_learned(z: &Tensor, net: &PerturbationNet) -> Result<Tensor> {
    let (_, d) = z.dims2().map_err(|_| Error::shape(format!("latent must be 2-D, got {:?}", z.dims())))?;
    if d != net.dim() {
        return Err(Error::shape(format!("latent dim {d}, perturbation net expects {}", net.dim())));
    }
    Ok(net.apply(z)?.detach())
}

/// A batch of anchor/positive images with the latents that produced them.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub anchor_latents: Vec<Tensor>,
    pub positive_latents: Vec<Tensor>,
    pub anchors: Tensor,
    pub positives: Tensor,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.anchors.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Apply `plan` to anchor latents. Perturbation randomness comes only from
/// `perturb_seed`.
pub fn apply_plan(
    spec: &LatentSpec,
    plan: &PerturbationPlan,
    anchors: &[Tensor],
    perturb_seed: u64,
) -> Result<Vec<Tensor>> {
    plan.validate_for(spec)?;
    let batch = anchors.first().map(|z| z.dims()[0]).unwrap_or(0);
    let mut out = anchors.to_vec();
    for (s, u) in plan.strategies.iter().zip(spec.units()) {
        let unit_seed = seed::derive(perturb_seed, "unit", u.index as u64);
        let zu = match s {
            Strategy::Fixed => continue,
            Strategy::Random(p) => perturb_random(&unit_latent(&out, &u)?, p, unit_seed)?,
            Strategy::Learned(net) => perturb_learned(&unit_latent(&out, &u)?, net)?,
            Strategy::Resample => {
                let mut rng = seed::rng(unit_seed);
                let parts = u
                    .levels
                    .clone()
                    .map(|l| {
                        let v = spec.anchor[l].sample_n(batch * spec.dims[l], &mut rng);
                        Ok(Tensor::from_vec(v, (batch, spec.dims[l]), anchors[l].device())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::cat(&parts, 1)?
            }
        };
        out = replace_unit(&out, &u, &zu)?;
    }
    Ok(out)
}

/// `batch` anchor/positive pairs. Anchor latents, perturbations and the two
/// decodes draw from disjoint children of `seed_value`.
pub fn make_view_batch(
    generator: &dyn Generator,
    plan: &PerturbationPlan,
    batch: usize,
    seed_value: u64,
) -> Result<ViewBatch> {
    let spec = generator.spec();
    let dev = &generator.device().device;
    let mut rng = seed::rng(seed::derive(seed_value, "view-anchors", 0));
    let anchor_latents = LatentBatch::sample(spec, batch, &mut rng).tensors(spec, dev)?;
    let positive_latents = apply_plan(spec, plan, &anchor_latents, seed::derive(seed_value, "view-perturb", 0))?;
    let anchors = generator.decode(&anchor_latents, seed::derive(seed_value, "view-noise", 0))?;
    let positives = generator.decode(&positive_latents, seed::derive(seed_value, "view-noise", 1))?;
    Ok(ViewBatch { anchor_latents, positive_latents, anchors, positives })
}

/// One anchor/positive pair, each `(C, H, W)`.
pub fn make_view_pair(generator: &dyn Generator, plan: &PerturbationPlan, seed_value: u64) -> Result<(Tensor, Tensor)> {
    let v = make_view_batch(generator, plan, 1, seed_value)?;
    Ok((v.anchors.squeeze(0)?, v.positives.squeeze(0)?))
}

/// Derive random-perturbation stds from a magnitude report: unit `i` gets
/// `std = scale * mu_i / sqrt(dim_i)`, so the expected perturbation norm
/// tracks `mu_i`, then stds are made non-decreasing in `mu`. A unit whose
/// std comes out zero stays fixed.
pub fn plan_from_report(report: &McReport, spec: &LatentSpec, scale: f64, trunc: f64) -> Result<PerturbationPlan> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param(format!("plan scale must be positive, got {scale}")));
    }
    let units = spec.units();
    let mut mus = Vec::with_capacity(units.len());
    for u in &units {
        let row = report
            .rows
            .iter()
            .find(|r| r.level == u.label())
            .ok_or_else(|| Error::Schema(format!("report has no row for level {}", u.label())))?;
        mus.push(row.mu);
    }
    let mut stds: Vec<f64> =
        units.iter().zip(&mus).map(|(u, mu)| scale * mu / (spec.unit_dim(u) as f64).sqrt()).collect();
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| mus[a].total_cmp(&mus[b]));
    let mut running = 0.0f64;
    for &i in &order {
        running = running.max(stds[i]);
        stds[i] = running;
    }
    let strategies = stds
        .into_iter()
        .map(|s| {
            if s > 0.0 {
                Ok(Strategy::Random(TruncatedNormalParams::new(0.0, s, trunc)?))
            } else {
                Ok(Strategy::Fixed)
            }
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationPlan::new(strategies))
}

/// Pixel-space augmentations applied after generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PixelAugmentConfig {
    /// Random resized crop to `crop_size` square.
    pub crop: bool,
    pub crop_size: usize,
    /// Range of the crop's area fraction.
    pub crop_scale: [f64; 2],
    pub flip: bool,
    pub grayscale: bool,
    pub grayscale_p: f64,
    pub color_jitter: bool,
    pub jitter_p: f64,
    /// Brightness, contrast, saturation, hue strengths.
    pub jitter: [f64; 4],
}

impl Default for PixelAugmentConfig {
    fn default() -> Self {
        Self::ml_views(32)
    }
}

impl PixelAugmentConfig {
    /// Crop and flip only; generated views already vary in color.
    pub fn ml_views(size: usize) -> Self {
        Self {
            crop: true,
            crop_size: size,
            crop_scale: [0.2, 1.0],
            flip: true,
            grayscale: false,
            grayscale_p: 0.2,
            color_jitter: false,
            jitter_p: 0.8,
            jitter: [0.4, 0.4, 0.4, 0.1],
        }
    }

    /// The full set used on real images.
    pub fn standard(size: usize) -> Self {
        Self { grayscale: true, color_jitter: true, ..Self::ml_views(size) }
    }

    pub fn none() -> Self {
        Self { crop: false, flip: false, ..Self::ml_views(0) }
    }

    pub fn is_identity(&self) -> bool {
        !(self.crop || self.flip || self.grayscale || self.color_jitter)
    }

    pub fn validate(&self, input: (usize, usize)) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: format!("views.augment.{key}"), message });
        if self.crop {
            if self.crop_size == 0 {
                return bad("crop_size", "must be positive when crop is enabled".into());
            }
            if self.crop_size > input.0.min(input.1) {
                return bad("crop_size", format!("{} exceeds input {}x{}", self.crop_size, input.0, input.1));
            }
            let [lo, hi] = self.crop_scale;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad("crop_scale", format!("{:?} is not a sub-range of (0, 1]", self.crop_scale));
            }
        }
        for (k, p) in [("grayscale_p", self.grayscale_p), ("jitter_p", self.jitter_p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(k, format!("probability {p} outside [0, 1]"));
            }
        }
        if self.jitter.iter().any(|j| !(*j >= 0.0)) || self.jitter[3] > 0.5 {
            return bad("jitter", format!("{:?}: strengths must be >= 0 and hue <= 0.5", self.jitter));
        }
        Ok(())
    }

    /// Output `(height, width)` for an input of the given size.
    pub fn output_size(&self, input: (usize, usize)) -> (usize, usize) {
        if self.crop {
            (self.crop_size, self.crop_size)
        } else {
            input
        }
    }
}

/// Host-side image, channel-major.
struct Img {
    c: usize,
    h: usize,
    w: usize,
    px: Vec<f32>,
}

/// Crop window in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

fn sample_crop(h: usize, w: usize, scale: [f64; 2], rng: &mut Rng) -> CropBox {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(scale[0]..=scale[1]);
        let log_r = rng.random_range((3f64 / 4.0).ln()..=(4f64 / 3.0).ln());
        let ratio = log_r.exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w as f64 && ch <= h as f64 {
            let top = rng.random_range(0.0..=(h as f64 - ch));
            let left = rng.random_range(0.0..=(w as f64 - cw));
            return CropBox { top: top.floor(), left: left.floor(), height: ch, width: cw };
        }
    }
    // Fall back to a centered full-size crop.
    CropBox { top: 0.0, left: 0.0, height: h as f64, width: w as f64 }
}

/// Bilinear resample of `bx` to `out_h x out_w`.
fn resized_crop(img: &Img, bx: CropBox, out_h: usize, out_w: usize) -> Img {
    let mut px = vec![0f32; img.c * out_h * out_w];
    let sy = bx.height / out_h as f64;
    let sx = bx.width / out_w as f64;
    for y in 0..out_h {
        let fy = (bx.top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..out_w {
            let fx = (bx.left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let tx = (fx - x0 as f64) as f32;
            for c in 0..img.c {
                let at = |yy: usize, xx: usize| img.px[(c * img.h + yy) * img.w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                px[(c * out_h + y) * out_w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Img { c: img.c, h: out_h, w: out_w, px }
}

/// Mirror each row in place.
fn hflip(img: &mut Img) {
    for row in img.px.chunks_mut(img.w) {
        row.reverse();
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn to_gray(img: &mut Img) {
    if img.c != 3 {
        return;
    }
    let n = img.h * img.w;
    for i in 0..n {
        let y = luma(img.px[i], img.px[n + i], img.px[2 * n + i]);
        img.px[i] = y;
        img.px[n + i] = y;
        img.px[2 * n + i] = y;
    }
}

fn jitter(img: &mut Img, strength: [f64; 4], rng: &mut Rng) {
    let factor =
        |s: f64, rng: &mut Rng| if s > 0.0 { rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32 } else { 1.0 };
    let b = factor(strength[0], rng);
    let c = factor(strength[1], rng);
    let s = factor(strength[2], rng);
    let h = if strength[3] > 0.0 { rng.random_range(-strength[3]..=strength[3]) as f32 } else { 0.0 };
    for v in img.px.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let n = img.h * img.w;
    let gray_mean = if img.c == 3 {
        (0..n).map(|i| luma(img.px[i], img.px[n + i], img.px[2 * n + i])).sum::<f32>() / n as f32
    } else {
        img.px.iter().sum::<f32>() / img.px.len() as f32
    };
    for v in img.px.iter_mut() {
        *v = (gray_mean + (*v - gray_mean) * c).clamp(0.0, 1.0);
    }
    if img.c != 3 {
        return;
    }
    // Saturation blends with luma; hue rotates chroma in YIQ space.
    let (sin, cos) = (2.0 * std::f32::consts::PI * h).sin_cos();
    for i in 0..n {
        let (r, g, bl) = (img.px[i], img.px[n + i], img.px[2 * n + i]);
        let y = luma(r, g, bl);
        let (r, g, bl) = (y + (r - y) * s, y + (g - y) * s, y + (bl - y) * s);
        let ci = 0.596 * r - 0.274 * g - 0.322 * bl;
        let cq = 0.211 * r - 0.523 * g + 0.312 * bl;
        let (i2, q2) = (ci * cos - cq * sin, ci * sin + cq * cos);
        img.px[i] = (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0);
        img.px[n + i] = (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0);
        img.px[2 * n + i] = (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0);
    }
}

fn augment_one(img: Img, cfg: &PixelAugmentConfig, rng: &mut Rng) -> Img {
    let mut img = if cfg.crop {
        let bx = sample_crop(img.h, img.w, cfg.crop_scale, rng);
        resized_crop(&img, bx, cfg.crop_size, cfg.crop_size)
    } else {
        img
    };
    if cfg.flip && rng.random::<bool>() {
        hflip(&mut img);
    }
    if cfg.color_jitter && rng.random::<f64>() < cfg.jitter_p {
        jitter(&mut img, cfg.jitter, rng);
    }
    if cfg.grayscale && rng.random::<f64>() < cfg.grayscale_p {
        to_gray(&mut img);
    }
    img
}

/// Augment a `(B, C, H, W)` batch; item `b` uses its own child of `seed_value`.
pub fn pixel_augment_batch(images: &Tensor, cfg: &PixelAugmentConfig, seed_value: u64) -> Result<Tensor> {
    let (b, c, h, w) =
        images.dims4().map_err(|_| Error::shape(format!("expected (B, C, H, W), got {:?}", images.dims())))?;
    cfg.validate((h, w))?;
    if cfg.is_identity() {
        return Ok(images.clone());
    }
    let (oh, ow) = cfg.output_size((h, w));
    let host = images.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for i in 0..b {
        let img = Img { c, h, w, px: host[i * per..(i + 1) * per].to_vec() };
        let mut rng = seed::rng(seed::derive(seed_value, "augment", i as u64));
        out.extend(augment_one(img, cfg, &mut rng).px);
    }
    Ok(Tensor::from_vec(out, (b, c, oh, ow), images.device())?.to_dtype(images.dtype())?)
}

/// Augment one `(C, H, W)` image with values in `[0, 1]`.
pub fn pixel_augment(image: &Tensor, cfg: &PixelAugmentConfig, seed_value: u64) -> Result<Tensor> {
    Ok(pixel_augment_batch(&image.unsqueeze(0)?, cfg, seed_value)?.squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{ImageShape, LinearGaussianMlvgm};

    fn oracle(eps: f64) -> LinearGaussianMlvgm {
        let tn = TruncatedNormalParams::new(0.0, 1.0, 2.0).unwrap();
        LinearGaussianMlvgm::hierarchical(3, &[4.0, 2.0, 1.0], tn, ImageShape::new(1, 4, 4), eps, 3).unwrap()
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let v: Vec<f32> = (0..c * h * w).map(|i| (i % 97) as f32 / 97.0).collect();
        Tensor::from_vec(v, (c, h, w), &Device::Cpu).unwrap()
    }

    fn host(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn all_fixed_views_are_identical_without_noise() -> Result<()> {
        let g = oracle(0.0);
        let v = make_view_batch(&g, &PerturbationPlan::all_fixed(g.spec()), 8, 1)?;
        assert_eq!(host(&v.anchors), host(&v.positives));
        Ok(())
    }

    #[test]
    fn fixed_levels_are_bitwise_shared() -> Result<()> {
        let g = oracle(0.1);
        let tn = TruncatedNormalParams::new(0.0, 0.3, 2.0)?;
        let plan = PerturbationPlan::new(vec![Strategy::Fixed, Strategy::Random(tn), Strategy::Resample]);
        let v = make_view_batch(&g, &plan, 5, 9)?;
        assert_eq!(host(&v.anchor_latents[0]), host(&v.positive_latents[0]));
        assert_ne!(host(&v.anchor_latents[1]), host(&v.positive_latents[1]));
        assert_ne!(host(&v.anchor_latents[2]), host(&v.positive_latents[2]));
        Ok(())
    }

    #[test]
    fn plan_length_is_checked() {
        let g = oracle(0.0);
        let plan = PerturbationPlan::new(vec![Strategy::Fixed]);
        assert!(make_view_batch(&g, &plan, 2, 0).is_err());
    }

    #[test]
    fn tiny_std_is_near_identity() -> Result<()> {
        let z = Tensor::new(&[[0.5f32, -1.0, 2.0]], &Device::Cpu)?;
        let tn = TruncatedNormalParams::new(0.0, 1e-9, 2.0)?;
        let out = host(&perturb_random(&z, &tn, 4)?);
        for (a, b) in out.iter().zip(host(&z)) {
            assert!((a - b).abs() < 1e-6);
        }
        Ok(())
    }

    #[test]
    fn identity_net_barely_moves_latents() -> Result<()> {
        let net = PerturbationNet::new(3, 16, &Device::Cpu)?;
        net.init_identity(0)?;
        let z = Tensor::new(&[[0.5f32, -1.0, 2.0]], &Device::Cpu)?;
        let d = (perturb_learned(&z, &net)? - &z)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert!(d < 0.05);
        let wrong = Tensor::zeros((1, 4), candle_core::DType::F32, &Device::Cpu)?;
        assert!(perturb_learned(&wrong, &net).is_err());
        Ok(())
    }

    #[test]
    fn augment_toggles_off_is_identity() -> Result<()> {
        let img = ramp(3, 8, 8);
        assert_eq!(host(&pixel_augment(&img, &PixelAugmentConfig::none(), 5)?), host(&img));
        Ok(())
    }

    #[test]
    fn flip_twice_is_identity() {
        let px: Vec<f32> = (0..2 * 3 * 5).map(|i| i as f32).collect();
        let mut img = Img { c: 2, h: 3, w: 5, px: px.clone() };
        hflip(&mut img);
        assert_ne!(img.px, px);
        hflip(&mut img);
        assert_eq!(img.px, px);
    }

    #[test]
    fn crop_sets_output_size_and_rejects_oversize() -> Result<()> {
        let img = ramp(3, 32, 32);
        let out = pixel_augment(&img, &PixelAugmentConfig::ml_views(24), 1)?;
        assert_eq!(out.dims(), [3, 24, 24]);
        assert!(matches!(pixel_augment(&img, &PixelAugmentConfig::ml_views(40), 1), Err(Error::Config { .. })));
        let a = pixel_augment(&img, &PixelAugmentConfig::standard(32), 7)?;
        let b = pixel_augment(&img, &PixelAugmentConfig::standard(32), 7)?;
        assert_eq!(host(&a), host(&b));
        assert!(host(&a).iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    }

    #[test]
    fn ml_view_default_is_crop_and_flip() {
        let c = PixelAugmentConfig::default();
        assert!(c.crop && c.flip && !c.grayscale && !c.color_jitter);
    }

    #[test]
    fn full_crop_box_is_identity_resample() {
        let px: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let img = Img { c: 1, h: 4, w: 4, px: px.clone() };
        let bx = CropBox { top: 0.0, left: 0.0, height: 4.0, width: 4.0 };
        assert_eq!(resized_crop(&img, bx, 4, 4).px, px);
    }

    #[test]
    fn plan_entries_parse_from_toml() {
        #[derive(Deserialize)]
        struct W {
            plan: Vec<PlanEntry>,
        }
        let w: W = toml::from_str(
            r#"plan = [{ kind = "fixed" }, { kind = "random", mean = 0.0, std = 0.2, trunc = 2.0 }, { kind = "resample" }]"#,
        )
        .unwrap();
        assert_eq!(w.plan[0], PlanEntry::Fixed);
        assert!(matches!(w.plan[1], PlanEntry::Random(p) if p.std == 0.2));
        let plan = PerturbationPlan::from_entries(&w.plan, Path::new("."), &Device::Cpu).unwrap();
        assert_eq!(plan.describe(), "fixed,random(0, 0.2, 2),resample");
    }
}
