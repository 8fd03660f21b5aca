//! Render anchor/positive pairs under several perturbation plans, both on a
//! freshly initialized toy VAE (or a checkpoint given as argument) and as a
//! plan derived from a magnitude report.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mlvgm::generator::{
    load_generator, ComputeDevice, Generator, ImageShape, ToyVae, ToyVaeConfig, TruncatedNormalParams,
};
use mlvgm::monte_carlo::{McReport, McRow};
use mlvgm::plot::image_grid;
use mlvgm::probe::ProbeStatus;
use mlvgm::views::{make_view_batch, plan_from_report, PerturbationPlan, PixelAugmentConfig, Strategy};

fn main() -> mlvgm::Result<()> {
    let g: Arc<dyn Generator> = match std::env::args().nth(1).map(PathBuf::from) {
        Some(p) => load_generator(&p, ComputeDevice::default())?,
        None => {
            Arc::new(ToyVae::new(ToyVaeConfig::default(), ImageShape::new(3, 32, 32), ComputeDevice::default(), 0)?)
        }
    };
    let spec = g.spec().clone();

    let row = |level: &str, mu: f64| McRow {
        level: level.into(),
        loss: 1.0,
        mu,
        sigma: 0.1,
        n: 100_000,
        status: ProbeStatus::Converged,
    };
    let report = McReport::new(vec![row("1", 0.8), row("2", 1.4), row("3", 2.5)])?;

    let plans = [
        ("resample last", PerturbationPlan::resample_last(&spec)),
        ("random 0.1", PerturbationPlan::uniform_random(&spec, TruncatedNormalParams::new(0.0, 0.1, 2.0)?)),
        ("level 1 only", PerturbationPlan::new(vec![Strategy::Resample, Strategy::Fixed, Strategy::Fixed])),
        ("from report", plan_from_report(&report, &spec, 1.0, 2.0)?),
    ];
    let mut rows = Vec::new();
    for (i, (name, plan)) in plans.iter().enumerate() {
        println!("{name}: {}", plan.describe());
        let v = make_view_batch(g.as_ref(), plan, 8, i as u64)?;
        let aug = PixelAugmentConfig::ml_views(32);
        let pos = mlvgm::views::pixel_augment_batch(&v.positives, &aug, i as u64)?;
        rows.push((0..8).map(|k| v.anchors.get(k)).collect::<candle_core::Result<Vec<_>>>()?);
        rows.push((0..8).map(|k| pos.get(k)).collect::<candle_core::Result<Vec<_>>>()?);
    }
    let out = Path::new("example-out/view_plans");
    std::fs::create_dir_all(out)?;
    image_grid(&rows, &out.join("views.png"), 3, 2)?;
    println!("wrote {}", out.join("views.png").display());
    Ok(())
}
