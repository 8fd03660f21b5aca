//! The InfoNCE bound against closed-form mutual information on a linear
//! Gaussian oracle: encoders of growing capacity tighten the bound but never
//! cross it.

use candle_core::Device;
use candle_nn::Optimizer;
use mlvgm::generator::{ImageShape, LinearGaussianMlvgm, TruncatedNormalParams};
use mlvgm::mi::{infonce_loss, mi_lower_bound, scalar};
use mlvgm::nn::{adam, EncoderKind, Params};
use mlvgm::views::{make_view_batch, PerturbationPlan, Strategy};
use nalgebra::DMatrix;

fn main() -> mlvgm::Result<()> {
    let k = 64;
    let wide = TruncatedNormalParams::new(0.0, 1.0, 8.0)?;
    let g = LinearGaussianMlvgm::hierarchical(2, &[2.0, 1.0], wide, ImageShape::new(1, 4, 4), 0.5, 1)?;
    let plan = PerturbationPlan::new(vec![Strategy::Random(wide), Strategy::Fixed]);
    let analytic = g.analytic_pair_mi(0, &(DMatrix::identity(2, 2) * wide.variance()))?;
    println!("analytic I(X; X') = {analytic:.3} nats");

    for (hidden, depth, out) in [(4, 1, 2), (32, 1, 8), (128, 2, 64)] {
        let params = Params::new(&Device::Cpu);
        let enc = EncoderKind::Mlp { hidden, depth, out }.build((1, 4, 4), params.vb())?;
        params.init(0)?;
        let mut opt = adam(params.vars(), 1e-3, 0.9, 0.999)?;
        for it in 0..600 {
            let v = make_view_batch(&g, &plan, k, it)?;
            opt.backward_step(&infonce_loss(
                &enc.forward_t(&v.anchors, true)?,
                &enc.forward_t(&v.positives, true)?,
                0.1,
            )?)?;
        }
        let v = make_view_batch(&g, &plan, k, 1 << 40)?;
        let loss =
            scalar(&infonce_loss(&enc.forward_t(&v.anchors, false)?, &enc.forward_t(&v.positives, false)?, 0.1)?)?;
        println!("mlp {hidden}x{depth} -> {out}: bound {:.3} nats", mi_lower_bound(loss, k)?);
    }
    Ok(())
}
