use std::collections::BTreeMap;

use candle_core::{Module, ModuleT, Tensor, D};
use candle_nn::{batch_norm, linear, BatchNorm, Linear, VarBuilder};

use super::{Framework, FrameworkConfig};
use crate::error::{Error, Result};
use crate::generator::ImageShape;
use crate::mi::infonce_loss;
use crate::nn::{Encoder, Params};
use crate::seed;

/// `Linear -> BN -> ReLU -> Linear`, optionally followed by BN.
pub struct MlpHead {
    l1: Linear,
    bn1: BatchNorm,
    l2: Linear,
    bn_out: Option<BatchNorm>,
}

impl MlpHead {
    pub fn new(input: usize, hidden: usize, out: usize, out_bn: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            l1: linear(input, hidden, vb.pp("l1"))?,
            bn1: batch_norm(hidden, 1e-5, vb.pp("bn1"))?,
            l2: linear(hidden, out, vb.pp("l2"))?,
            bn_out: if out_bn { Some(batch_norm(out, 1e-5, vb.pp("bn_out"))?) } else { None },
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward_t(&self.l1.forward(x)?, train)?.relu()?;
        let h = self.l2.forward(&h)?;
        Ok(match &self.bn_out {
            Some(bn) => bn.forward_t(&h, train)?,
            None => h,
        })
    }
}

/// Negative mean cosine similarity, with `target` treated as a constant.
pub fn neg_cosine(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    let unit = |x: &Tensor| -> Result<Tensor> {
        let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(x.broadcast_div(&n)?)
    };
    let cos = (unit(prediction)? * unit(&target.detach())?)?.sum(D::Minus1)?;
    Ok(cos.mean_all()?.neg()?)
}

/// Symmetrized stop-gradient loss: `(D(p1, z2) + D(p2, z1)) / 2`.
pub fn simsiam_loss(p1: &Tensor, p2: &Tensor, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    Ok(((neg_cosine(p1, z2)? + neg_cosine(p2, z1)?)? * 0.5)?)
}

/// `sum over both directions of mean(2 - 2 cos(q, t))`, targets constant.
pub fn byol_loss(q1: &Tensor, q2: &Tensor, t1: &Tensor, t2: &Tensor) -> Result<Tensor> {
    let a = (neg_cosine(q1, t2)? * 2.0)? + 2.0;
    let b = (neg_cosine(q2, t1)? * 2.0)? + 2.0;
    Ok((a? + b?)?)
}

/// `target <- tau * target + (1 - tau) * online`, tensor by tensor.
pub fn ema_update(target: &Params, online: &Params, tau: f64) -> Result<()> {
    let on = online.tensors();
    for (name, t) in target.tensors() {
        let o = on.get(&name).ok_or_else(|| Error::shape(format!("online network has no tensor `{name}`")))?;
        let next = ((&t * tau)? + (o * (1.0 - tau))?)?;
        target.var(&name).expect("listed variable exists").set(&next)?;
    }
    Ok(())
}

/// Encoder plus framework heads. Encoder weights live in their own store so
/// they can be checkpointed alone.
pub struct SscrlModel {
    pub framework: Framework,
    pub encoder_params: Params,
    pub encoder: Box<dyn Encoder>,
    pub head_params: Params,
    projector: MlpHead,
    predictor: Option<MlpHead>,
    target: Option<TargetNet>,
    temperature: f64,
    ema_decay: f64,
}

/// BYOL's slow-moving copy of encoder and projector.
struct TargetNet {
    params: Params,
    encoder: Box<dyn Encoder>,
    projector: MlpHead,
}

impl SscrlModel {
    pub fn new(
        cfg: &FrameworkConfig,
        shape: ImageShape,
        device: &candle_core::Device,
        seed_value: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder_params = Params::new(device);
        let encoder = cfg.encoder.build(shape.dims3(), encoder_params.vb().pp("enc"))?;
        encoder_params.init(seed::derive(seed_value, "sscrl-encoder", 0))?;
        let d = encoder.out_dim();
        let head_params = Params::new(device);
        let (projector, predictor) = build_heads(cfg, d, head_params.vb())?;
        head_params.init(seed::derive(seed_value, "sscrl-head", 0))?;
        let target = if cfg.framework == Framework::Byol {
            let params = Params::new(device);
            let encoder = cfg.encoder.build(shape.dims3(), params.vb().pp("enc"))?;
            let projector = build_projector(cfg, d, params.vb())?;
            let t = TargetNet { params, encoder, projector };
            ema_update(&t.params, &online_view(&encoder_params, &head_params)?, 0.0)?;
            Some(t)
        } else {
            None
        };
        Ok(Self {
            framework: cfg.framework,
            encoder_params,
            encoder,
            head_params,
            projector,
            predictor,
            target,
            temperature: cfg.temperature.unwrap_or(0.0),
            ema_decay: cfg.ema_decay.unwrap_or(0.0),
        })
    }

    /// Variables updated by the optimizer.
    pub fn trainable(&self) -> Vec<candle_core::Var> {
        let mut v = self.encoder_params.vars();
        v.extend(self.head_params.vars());
        v
    }

    fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.projector.forward_t(&self.encoder.forward_t(x, true)?, true)
    }

    pub fn loss(&self, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
        let z1 = self.project(x1)?;
        let z2 = self.project(x2)?;
        match self.framework {
            Framework::SimClr => infonce_loss(&z1, &z2, self.temperature),
            Framework::SimSiam => {
                let pred = self.predictor.as_ref().expect("simsiam has a predictor");
                simsiam_loss(&pred.forward_t(&z1, true)?, &pred.forward_t(&z2, true)?, &z1, &z2)
            }
            Framework::Byol => {
                let pred = self.predictor.as_ref().expect("byol has a predictor");
                let t = self.target.as_ref().expect("byol has a target");
                let tz = |x: &Tensor| -> Result<Tensor> {
                    Ok(t.projector.forward_t(&t.encoder.forward_t(x, true)?, true)?.detach())
                };
                byol_loss(&pred.forward_t(&z1, true)?, &pred.forward_t(&z2, true)?, &tz(x1)?, &tz(x2)?)
            }
        }
    }

    /// Post-step bookkeeping: the target EMA for BYOL.
    pub fn after_step(&self) -> Result<()> {
        if let Some(t) = &self.target {
            ema_update(&t.params, &online_view(&self.encoder_params, &self.head_params)?, self.ema_decay)?;
        }
        Ok(())
    }

    /// Online tensors sharing names with the target network.
    pub fn online_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(online_view(&self.encoder_params, &self.head_params)?.tensors())
    }

    pub fn target_tensors(&self) -> Option<BTreeMap<String, Tensor>> {
        self.target.as_ref().map(|t| t.params.tensors())
    }
}

fn build_projector(cfg: &FrameworkConfig, d: usize, vb: VarBuilder) -> Result<MlpHead> {
    let p = cfg.proj_dim;
    let vb = vb.pp("proj");
    match cfg.framework {
        Framework::SimClr => MlpHead::new(d, d, p, false, vb),
        Framework::SimSiam => MlpHead::new(d, p, p, true, vb),
        Framework::Byol => MlpHead::new(d, cfg.pred_hidden.max(p), p, false, vb),
    }
}

fn build_heads(cfg: &FrameworkConfig, d: usize, vb: VarBuilder) -> Result<(MlpHead, Option<MlpHead>)> {
    let p = cfg.proj_dim;
    let projector = build_projector(cfg, d, vb.clone())?;
    let predictor = match cfg.framework {
        Framework::SimClr => None,
        Framework::SimSiam => Some(MlpHead::new(p, cfg.pred_hidden, p, false, vb.pp("pred"))?),
        Framework::Byol => Some(MlpHead::new(p, cfg.pred_hidden.max(p), p, false, vb.pp("pred"))?),
    };
    Ok((projector, predictor))
}

/// A name-compatible view of encoder + projector, for EMA against the target.
fn online_view(encoder: &Params, heads: &Params) -> Result<Params> {
    let view = Params::new(encoder.device());
    {
        let map = view.var_map();
        let mut data = map.data().lock().expect("var map poisoned");
        for (prefix, src) in [("enc", encoder), ("proj", heads)] {
            let src_map = src.var_map();
            let src_data = src_map.data().lock().expect("var map poisoned");
            for (k, v) in src_data.iter().filter(|(k, _)| k.starts_with(prefix)) {
                data.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(view)
}
