//! Train the three-scale toy VAE on the procedural shapes corpus, save the
//! checkpoint and write a grid of real images, reconstructions and samples.
//!
//! ```text
//! cargo run --release --example train_toy_generator [epochs]
//! ```

use std::path::Path;

use candle_core::Device;
use mlvgm::corpus::{shapes, ShapesConfig};
use mlvgm::generator::{train_toy_vae, Generator, LatentBatch, ToyVaeConfig};
use mlvgm::plot::image_grid;
use mlvgm::seed;

fn main() -> mlvgm::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let out = Path::new("example-out/train_toy_generator");
    std::fs::create_dir_all(out)?;

    let (train, _) = shapes(&ShapesConfig { train: 1_000, test: 10, ..Default::default() }, 0)?;
    let cfg = ToyVaeConfig { dims: vec![8, 16, 32], width: 16, epochs, ..Default::default() };
    let vae = train_toy_vae(&train, &cfg, 0)?;
    let report = vae.report().expect("trained model has a report");
    for e in &report.epochs {
        println!("epoch {:>3}  loss {:>9.2}  kl {:>7.2}  val mse {:.4}", e.epoch, e.loss, e.kl, e.val_mse);
    }
    for (i, a) in vae.spec().anchor.iter().enumerate() {
        println!("level {} anchor: mean {:+.3} std {:.3} trunc {}", i + 1, a.mean, a.std, a.trunc);
    }
    vae.save(&out.join("generator.json"))?;

    let dev = Device::Cpu;
    let idx: Vec<usize> = (0..8).collect();
    let real = train.batch(&idx, &dev)?;
    let recon = vae.reconstruct(&real)?;
    let z = LatentBatch::sample(vae.spec(), 8, &mut seed::rng(1)).tensors(vae.spec(), &dev)?;
    let samples = vae.decode(&z, 2)?;
    let rows = [real, recon, samples]
        .iter()
        .map(|t| (0..8).map(|i| t.get(i)).collect::<candle_core::Result<Vec<_>>>())
        .collect::<candle_core::Result<Vec<_>>>()?;
    image_grid(&rows, &out.join("samples.png"), 3, 2)?;
    println!("wrote {}", out.display());
    Ok(())
}
