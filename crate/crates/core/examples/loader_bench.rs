//! Seconds per epoch for continuous sampling, an in-memory packed dataset and
//! a naive per-item PNG loader, each feeding a SimSiam step.

use std::path::Path;
use std::sync::Arc;

use mlvgm::corpus::{list_image_folder, shapes, write_image_folder, ShapesConfig};
use mlvgm::generator::{Generator, ImageShape, ToyVae, ToyVaeConfig};
use mlvgm::sscrl::{loader_benchmark, BenchConfig, BenchSource, ContinuousBench, NaiveDiskBench, PackedBench};
use mlvgm::views::{PerturbationPlan, PixelAugmentConfig};

fn main() -> mlvgm::Result<()> {
    let shape = ImageShape::new(3, 32, 32);
    let g: Arc<dyn Generator> = Arc::new(ToyVae::new(ToyVaeConfig::default(), shape, Default::default(), 0)?);
    let (train, _) = shapes(&ShapesConfig { train: 1_000, test: 10, ..Default::default() }, 0)?;
    let disk = tempfile::tempdir()?;
    write_image_folder(&train, disk.path(), 1)?;
    let files = list_image_folder(disk.path())?.0.into_iter().map(|(p, _)| p).collect();

    let aug = PixelAugmentConfig::ml_views(32);
    let plan = PerturbationPlan::resample_last(g.spec());
    let mut sources: Vec<Box<dyn BenchSource>> = vec![
        Box::new(ContinuousBench::new(g, plan, aug.clone(), 0)),
        Box::new(PackedBench::new(train, aug.clone(), 0)),
        Box::new(NaiveDiskBench::new(files, shape, aug, 0)),
    ];
    let report = loader_benchmark(&mut sources, &BenchConfig::default(), 0)?;
    for r in &report.rows {
        println!("{:<14} B={:<4} {:.3}s/epoch (std {:.3})", r.source, r.batch_size, r.seconds_per_epoch, r.std_seconds);
    }
    let (json, svg) = report.write(Path::new("example-out/loader_bench"))?;
    println!("wrote {} and {}", json.display(), svg.display());
    Ok(())
}
