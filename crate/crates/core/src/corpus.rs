//! Labeled 32x32 image corpora.
//!
//! Images are held as `u8` planes in `(N, C, H, W)` order and converted to
//! `[0, 1]` floats only when a batch is assembled. Two on-disk formats are
//! supported: the packed binary record layout popularized by CIFAR-10 (one
//! label byte followed by the channel planes) and a directory tree with one
//! sub-directory of PNG files per class.
//!
//! [`shapes`] renders a procedural corpus of ten shape classes with random
//! color, position, scale, rotation and texture, for use when no real corpus
//! is at hand.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ImageShape;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub shape: ImageShape,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub class_names: Vec<String>,
}

impl ImageDataset {
    pub fn new(shape: ImageShape, pixels: Vec<u8>, labels: Vec<u8>, class_names: Vec<String>) -> Result<Self> {
        if pixels.len() != labels.len() * shape.numel() {
            return Err(Error::shape(format!(
                "{} pixel bytes for {} images of {:?}",
                pixels.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::Schema(format!("label {l} outside {} classes", class_names.len())));
        }
        Ok(Self { shape, pixels, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.shape.numel();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Float batch `(len, C, H, W)` in `[0, 1]`.
    pub fn batch(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let n = self.shape.numel();
        let mut buf = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            buf.extend(self.image(i).iter().map(|&p| p as f32 / 255.0));
        }
        let (c, h, w) = self.shape.dims3();
        Ok(Tensor::from_vec(buf, (indices.len(), c, h, w), device)?)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i] as u32).collect()
    }

    /// Items `range`, copied.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let n = self.shape.numel();
        Self {
            shape: self.shape,
            pixels: self.pixels[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
            class_names: self.class_names.clone(),
        }
    }

    /// Split off the last `fraction` of items.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let cut = self.len() - ((self.len() as f64 * fraction).round() as usize).min(self.len());
        (self.slice(0, cut), self.slice(cut, self.len()))
    }
}

/// Float tensor `(C, H, W)` in `[0, 1]` to `u8` planes.
pub fn to_u8(image: &Tensor) -> Result<Vec<u8>> {
    Ok(image
        .flatten_all()?
        .to_dtype(DType::F32)?
        .to_vec1::<f32>()?
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn read_packed(path: &Path, shape: ImageShape, class_names: Vec<String>) -> Result<ImageDataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let rec = 1 + shape.numel();
    if bytes.len() % rec != 0 {
        return Err(Error::Schema(format!(
            "{}: {} bytes is not a multiple of the {rec}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * shape.numel());
    for r in bytes.chunks_exact(rec) {
        labels.push(r[0]);
        pixels.extend_from_slice(&r[1..]);
    }
    ImageDataset::new(shape, pixels, labels, class_names)
}

pub fn write_packed(ds: &ImageDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for i in 0..ds.len() {
        f.write_all(&[ds.labels[i]])?;
        f.write_all(ds.image(i))?;
    }
    f.flush()?;
    Ok(())
}

/// Encode `(C, H, W)` planes as an RGB or grayscale PNG.
pub fn encode_png(planes: &[u8], shape: ImageShape) -> Result<image::DynamicImage> {
    let (c, h, w) = shape.dims3();
    let hw = h * w;
    Ok(match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, planes.to_vec())
            .map(image::DynamicImage::ImageLuma8)
            .ok_or_else(|| Error::shape("bad grayscale buffer"))?,
        3 => {
            let mut rgb = Vec::with_capacity(3 * hw);
            for p in 0..hw {
                rgb.extend([planes[p], planes[hw + p], planes[2 * hw + p]]);
            }
            image::RgbImage::from_raw(w as u32, h as u32, rgb)
                .map(image::DynamicImage::ImageRgb8)
                .ok_or_else(|| Error::shape("bad rgb buffer"))?
        }
        _ => return Err(Error::shape(format!("cannot encode {c}-channel image"))),
    })
}

/// Decode an image file into `(C, H, W)` planes, resizing to `shape`.
pub fn decode_png(path: &Path, shape: ImageShape) -> Result<Vec<u8>> {
    let img = image::open(path)?;
    let (c, h, w) = shape.dims3();
    let img = if img.width() as usize != w || img.height() as usize != h {
        img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let hw = h * w;
    Ok(match c {
        1 => img.to_luma8().into_raw(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut planes = vec![0u8; 3 * hw];
            for p in 0..hw {
                for ch in 0..3 {
                    planes[ch * hw + p] = rgb[3 * p + ch];
                }
            }
            planes
        }
        _ => return Err(Error::shape(format!("cannot decode into {c} channels"))),
    })
}

/// Write `root/<class>/<index>.png`. `scale` > 1 stores upsampled copies.
pub fn write_image_folder(ds: &ImageDataset, root: &Path, scale: u32) -> Result<()> {
    for name in &ds.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for i in 0..ds.len() {
        let mut img = encode_png(ds.image(i), ds.shape)?;
        if scale > 1 {
            img = img.resize_exact(
                ds.shape.width as u32 * scale,
                ds.shape.height as u32 * scale,
                image::imageops::FilterType::Nearest,
            );
        }
        img.save(root.join(&ds.class_names[ds.labels[i] as usize]).join(format!("{i:06}.png")))?;
    }
    Ok(())
}

/// Sorted `(path, class index)` listing of an image-folder tree.
pub fn list_image_folder(root: &Path) -> Result<(Vec<(std::path::PathBuf, u8)>, Vec<String>)> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(format!("image folder {}", root.display())));
    }
    let mut classes: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.len() > 256 {
        return Err(Error::Schema("more than 256 classes".into()));
    }
    let mut items = Vec::new();
    for (ci, c) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.join(c))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        items.extend(files.into_iter().map(|p| (p, ci as u8)));
    }
    Ok((items, classes))
}

pub fn read_image_folder(root: &Path, shape: ImageShape) -> Result<ImageDataset> {
    let (items, classes) = list_image_folder(root)?;
    let mut pixels = Vec::with_capacity(items.len() * shape.numel());
    let mut labels = Vec::with_capacity(items.len());
    for (p, l) in items {
        pixels.extend(decode_png(&p, shape)?);
        labels.push(l);
    }
    ImageDataset::new(shape, pixels, labels, classes)
}

/// Procedural shapes corpus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    /// Maximum rotation in degrees.
    pub max_rotation: f64,
    /// Standard deviation of the per-pixel texture noise, in `[0, 1]` units.
    pub texture: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self { train: 10_000, test: 2_000, size: 32, max_rotation: 20.0, texture: 0.04 }
    }
}

pub const SHAPE_CLASSES: [&str; 10] =
    ["disk", "square", "triangle", "plus", "ring", "diamond", "cross", "half-disk", "frame", "dots"];

/// Inside test in the shape's unit frame, coordinates in `[-1, 1]`.
fn inside(class: usize, x: f64, y: f64) -> bool {
    let r = (x * x + y * y).sqrt();
    match class {
        0 => r <= 0.9,
        1 => x.abs() <= 0.75 && y.abs() <= 0.75,
        2 => y >= -0.65 && y <= 0.85 - 1.875 * x.abs(),
        3 => (x.abs() <= 0.25 && y.abs() <= 0.9) || (y.abs() <= 0.25 && x.abs() <= 0.9),
        4 => (0.55..=0.9).contains(&r),
        5 => x.abs() + y.abs() <= 0.95,
        6 => ((x - y).abs() <= 0.3 || (x + y).abs() <= 0.3) && x.abs() <= 0.8 && y.abs() <= 0.8,
        7 => r <= 0.9 && y >= 0.0,
        8 => x.abs().max(y.abs()) <= 0.85 && x.abs().max(y.abs()) >= 0.55,
        _ => ((x - 0.45).powi(2) + y * y).sqrt() <= 0.38 || ((x + 0.45).powi(2) + y * y).sqrt() <= 0.38,
    }
}

fn random_color(rng: &mut seed::Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Render one image of `class`. Returns `(C, H, W)` planes.
pub fn render_shape(class: usize, cfg: &ShapesConfig, rng: &mut seed::Rng) -> Vec<u8> {
    let s = cfg.size;
    let mut fg = random_color(rng);
    let bg = random_color(rng);
    // Keep foreground and background distinguishable.
    let dist: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
    if dist < 0.6 {
        for (f, b) in fg.iter_mut().zip(&bg) {
            *f = if *b > 0.5 { (b - 0.5).max(0.0) } else { (b + 0.5).min(1.0) };
        }
    }
    let scale = rng.random_range(0.45..0.8) * s as f64 / 2.0;
    let cx = s as f64 / 2.0 + rng.random_range(-0.2..0.2) * s as f64;
    let cy = s as f64 / 2.0 + rng.random_range(-0.2..0.2) * s as f64;
    let theta = rng.random_range(-cfg.max_rotation..=cfg.max_rotation).to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut planes = vec![0u8; 3 * s * s];
    for py in 0..s {
        for px in 0..s {
            // 2x2 supersampling for soft edges.
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = (px as f64 + ox - cx) / scale;
                let dy = (py as f64 + oy - cy) / scale;
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                if inside(class, u, -v) {
                    cover += 0.25;
                }
            }
            let noise = cfg.texture * (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
            for c in 0..3 {
                let v = cover * fg[c] + (1.0 - cover) * bg[c] + noise;
                planes[c * s * s + py * s + px] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    planes
}

/// Class-balanced shapes corpus: `(train, test)`.
pub fn shapes(cfg: &ShapesConfig, seed_value: u64) -> Result<(ImageDataset, ImageDataset)> {
    let make = |n: usize, label: &str| -> Result<ImageDataset> {
        let mut rng = seed::rng(seed::derive(seed_value, label, 0));
        let shape = ImageShape::new(3, cfg.size, cfg.size);
        let mut pixels = Vec::with_capacity(n * shape.numel());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % SHAPE_CLASSES.len();
            pixels.extend(render_shape(class, cfg, &mut rng));
            labels.push(class as u8);
        }
        ImageDataset::new(shape, pixels, labels, SHAPE_CLASSES.iter().map(|s| s.to_string()).collect())
    };
    Ok((make(cfg.train, "shapes-train")?, make(cfg.test, "shapes-test")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ShapesConfig {
        ShapesConfig { train: 20, test: 10, ..Default::default() }
    }

    #[test]
    fn every_class_renders_a_visible_shape() {
        let cfg = ShapesConfig { texture: 0.0, max_rotation: 0.0, ..Default::default() };
        for class in 0..10 {
            let mut rng = seed::rng(class as u64);
            let img = render_shape(class, &cfg, &mut rng);
            let first = &img[..32 * 32];
            let distinct = first.iter().filter(|&&v| v != first[0]).count();
            assert!(distinct > 20, "class {class} rendered {distinct} foreground pixels");
        }
    }

    #[test]
    fn packed_round_trip() -> Result<()> {
        let (train, _) = shapes(&tiny(), 1)?;
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("data.bin");
        write_packed(&train, &p)?;
        assert_eq!(fs::metadata(&p)?.len() as usize, train.len() * 3073);
        let back = read_packed(&p, train.shape, train.class_names.clone())?;
        assert_eq!(back, train);
        Ok(())
    }

    #[test]
    fn image_folder_round_trip() -> Result<()> {
        let (train, _) = shapes(&tiny(), 2)?;
        let dir = tempfile::tempdir()?;
        write_image_folder(&train, dir.path(), 1)?;
        let back = read_image_folder(dir.path(), train.shape)?;
        assert_eq!(back.len(), train.len());
        // Listing is class-sorted; compare as multisets of (label, pixels).
        let mut a: Vec<_> = (0..train.len())
            .map(|i| (train.class_names[train.labels[i] as usize].clone(), train.image(i).to_vec()))
            .collect();
        let mut b: Vec<_> = (0..back.len())
            .map(|i| (back.class_names[back.labels[i] as usize].clone(), back.image(i).to_vec()))
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        Ok(())
    }

    #[test]
    fn shapes_are_deterministic_and_balanced() -> Result<()> {
        let (a, t) = shapes(&tiny(), 3)?;
        let (b, _) = shapes(&tiny(), 3)?;
        assert_eq!(a, b);
        assert_eq!(t.len(), 10);
        assert!((0..10u8).all(|c| a.labels.iter().filter(|&&l| l == c).count() == 2));
        Ok(())
    }

    #[test]
    fn truncated_packed_file_is_rejected() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("bad.bin");
        fs::write(&p, [0u8; 100])?;
        assert!(matches!(read_packed(&p, ImageShape::new(3, 32, 32), vec!["a".into()]), Err(Error::Schema(_))));
        Ok(())
    }
}
