//! SimSiam on continuously sampled views of a toy VAE, followed by a linear
//! probe on the labeled shapes corpus.
//!
//! ```text
//! cargo run --release --example train_sscrl [epochs]
//! ```

use std::path::Path;
use std::sync::Arc;

use mlvgm::corpus::{shapes, ShapesConfig};
use mlvgm::generator::{train_toy_vae, Generator, ToyVaeConfig};
use mlvgm::nn::EncoderKind;
use mlvgm::sampling::{default_steps_per_epoch, BatchSpec};
use mlvgm::seed::SeedPolicy;
use mlvgm::sscrl::{
    linear_probe_checkpoint, train_encoder_observed, ContinuousSource, FrameworkConfig, LinearEvalConfig,
};
use mlvgm::views::{PerturbationPlan, PixelAugmentConfig};

fn main() -> mlvgm::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let out = Path::new("example-out/train_sscrl");
    std::fs::create_dir_all(out)?;

    let (train, test) = shapes(&ShapesConfig { train: 1_000, test: 500, ..Default::default() }, 0)?;
    let vae_cfg = ToyVaeConfig { dims: vec![8, 16, 32], width: 16, epochs: 5, ..Default::default() };
    let g: Arc<dyn Generator> = Arc::new(train_toy_vae(&train, &vae_cfg, 0)?);

    let batch = 128;
    let spec =
        BatchSpec::new(batch, PerturbationPlan::resample_last(g.spec()), default_steps_per_epoch(train.len(), batch))
            .with_augment(PixelAugmentConfig::ml_views(32));
    let mut source = ContinuousSource::new(g, spec, SeedPolicy::new(0, 0));
    let cfg = FrameworkConfig {
        encoder: EncoderKind::ResNet { width: 8 },
        epochs,
        batch_size: batch,
        ..FrameworkConfig::simsiam()
    };
    let record = train_encoder_observed(&mut source, &cfg, 0, out, &mut |e, _| {
        if e.step == 0 {
            println!("epoch {} lr {:.4} loss {:.3}", e.epoch, e.lr, e.loss);
        }
    })?;
    println!("encoder digest {}", record.digest);

    let acc = linear_probe_checkpoint(&record.checkpoint, &train, &test, &LinearEvalConfig::default(), 0)?;
    println!("linear probe: top-1 {:.1}%  top-5 {:.1}%", 100.0 * acc.top1, 100.0 * acc.top5);
    Ok(())
}
