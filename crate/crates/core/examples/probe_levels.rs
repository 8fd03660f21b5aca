//! Probe every level of a three-level linear oracle whose operator norms are
//! 4:2:1 and print where each probe stopped.

use mlvgm::generator::{ImageShape, LinearGaussianMlvgm, TruncatedNormalParams};
use mlvgm::probe::{probe_level_observed, ProbeConfig};

fn main() -> mlvgm::Result<()> {
    let anchor = TruncatedNormalParams::new(0.0, 1.0, 2.0)?;
    let g = LinearGaussianMlvgm::hierarchical(4, &[4.0, 2.0, 1.0], anchor, ImageShape::new(1, 4, 4), 0.5, 0)?;
    let cfg = ProbeConfig::default();
    for level in 0..3 {
        let r = probe_level_observed(&g, level, &cfg, 0, &mut |s| {
            if s.iter % 250 == 0 {
                println!("  level {} iter {:>5}  loss {:.3}  |p(z)| {:.3}", level + 1, s.iter, s.loss, s.magnitude);
            }
        })?;
        println!(
            "level {}: {} after {} iterations, window loss {:.3}",
            r.unit.label(),
            r.status.as_str(),
            r.iterations,
            r.final_loss
        );
    }
    Ok(())
}
