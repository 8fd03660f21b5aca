//! Static figures: view grids (PNG), loss curves and benchmark bars (SVG).

use std::path::Path;

use candle_core::Tensor;
use plotters::prelude::*;

use crate::corpus::{encode_png, to_u8};
use crate::error::{Error, Result};
use crate::generator::ImageShape;
use crate::sscrl::BenchReport;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Grid of `(C, H, W)` images, one row per inner vector, `pad` pixels apart,
/// each image upscaled by `scale`.
pub fn image_grid(rows: &[Vec<Tensor>], path: &Path, scale: u32, pad: u32) -> Result<()> {
    let first =
        rows.iter().flatten().next().ok_or_else(|| Error::Usage("image grid needs at least one image".into()))?;
    let (c, h, w) = first.dims3()?;
    let shape = ImageShape::new(c, h, w);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (cw, ch) = (w as u32 * scale, h as u32 * scale);
    let mut canvas = image::RgbImage::from_pixel(
        cols * (cw + pad) + pad,
        rows.len() as u32 * (ch + pad) + pad,
        image::Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            if img.dims3()? != (c, h, w) {
                return Err(Error::shape(format!("grid image {:?} differs from {:?}", img.dims(), first.dims())));
            }
            let tile =
                encode_png(&to_u8(img)?, shape)?.resize_exact(cw, ch, image::imageops::FilterType::Nearest).to_rgb8();
            let (x0, y0) = (pad + k as u32 * (cw + pad), pad + r as u32 * (ch + pad));
            image::imageops::replace(&mut canvas, &tile, x0 as i64, y0 as i64);
        }
    }
    canvas.save(path)?;
    Ok(())
}

/// Line chart of named series against their index, optionally with a
/// horizontal reference line.
pub fn curves(
    series: &[(String, Vec<f64>)],
    title: &str,
    y_label: &str,
    reference: Option<f64>,
    path: &Path,
) -> Result<()> {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied()).chain(reference);
    let (lo, hi) =
        vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let margin = 0.05 * (hi - lo);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..(n - 1) as f64, (lo - margin)..(hi + margin))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("iteration").y_desc(y_label).draw().map_err(plot_err)?;
    for (i, (name, v)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(v.iter().enumerate().map(|(x, &y)| (x as f64, y)), &color))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if let Some(r) = reference {
        chart.draw_series(LineSeries::new([(0.0, r), ((n - 1) as f64, r)], BLACK.mix(0.5))).map_err(plot_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Grouped bars: seconds per epoch for each source, grouped by batch size.
pub fn bench_chart(report: &BenchReport, path: &Path) -> Result<()> {
    let mut sources: Vec<String> = Vec::new();
    for r in &report.rows {
        if !sources.contains(&r.source) {
            sources.push(r.source.clone());
        }
    }
    let batches = &report.config.batch_sizes;
    let top = report.rows.iter().map(|r| r.seconds_per_epoch + r.std_seconds).fold(0.0, f64::max).max(1e-9) * 1.15;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let groups = batches.len() as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("seconds per epoch", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..groups, 0f64..top)
        .map_err(plot_err)?;
    let labels = batches.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(batches.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 0.26 && i < labels.len() {
                format!("B={}", labels[i])
            } else {
                String::new()
            }
        })
        .y_desc("seconds")
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / sources.len().max(1) as f64;
    for (si, s) in sources.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let bars = batches.iter().enumerate().filter_map(|(bi, &b)| {
            report.row(s, b).map(|r| {
                let x0 = bi as f64 + 0.1 + si as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width * 0.95, r.seconds_per_epoch)], color.filled())
            })
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(s.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn grid_and_curves_render() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let img = Tensor::ones((3, 4, 4), candle_core::DType::F32, &Device::Cpu)?;
        image_grid(&[vec![img.clone(), img.clone()], vec![img]], &dir.path().join("g.png"), 2, 1)?;
        let g = image::open(dir.path().join("g.png"))?;
        assert_eq!((g.width(), g.height()), (2 * 9 + 1, 2 * 9 + 1));
        let p = dir.path().join("c.svg");
        curves(&[("a".into(), vec![1.0, 0.5, 0.2])], "loss", "nats", Some(1.0), &p)?;
        assert!(std::fs::read_to_string(p)?.contains("<svg"));
        Ok(())
    }
}
