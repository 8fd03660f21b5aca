//! Probe a linear oracle that has one inert level, estimate perturbation
//! magnitudes by Monte Carlo and print the per-level report.

use std::path::Path;

use mlvgm::generator::{Generator, ImageShape, LinearGaussianMlvgm, TruncatedNormalParams};
use mlvgm::monte_carlo::{build_report, estimate_unit_magnitudes, Norm, ReportEntry, DEFAULT_SAMPLES};
use mlvgm::probe::{probe_level, ProbeConfig};

fn main() -> mlvgm::Result<()> {
    let anchor = TruncatedNormalParams::new(0.0, 1.0, 2.0)?;
    let g = LinearGaussianMlvgm::hierarchical(4, &[4.0, 2.0, 0.0], anchor, ImageShape::new(1, 4, 4), 0.25, 0)?;
    let cfg = ProbeConfig { max_iters: 5_000, ..Default::default() };
    let spec = g.spec();
    let mut entries = Vec::new();
    for unit in spec.units() {
        let r = probe_level(&g, unit.index, &cfg, 0)?;
        let estimate = estimate_unit_magnitudes(&r.net, spec, &unit, DEFAULT_SAMPLES, 1, Norm::L2)?;
        entries.push(ReportEntry { unit, loss: r.final_loss, estimate, status: r.status });
    }
    let report = build_report(&spec.units(), entries)?;
    print!("{}", report.to_table());
    for row in report.degenerate() {
        println!("level {} never reached the target loss", row.level);
    }
    let out = Path::new("example-out/magnitude_report");
    let (json, _) = report.write(out)?;
    println!("wrote {}", json.display());
    Ok(())
}
