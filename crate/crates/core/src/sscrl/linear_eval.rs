use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, loss::cross_entropy};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::load_encoder;
use crate::corpus::ImageDataset;
use crate::error::{Error, Result};
use crate::mi::scalar;
use crate::nn::{cosine_lr, Encoder, Params, SgdMomentum};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearEvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Standardize features with training-set statistics.
    pub standardize: bool,
    /// Expected class count; checked against the datasets when set.
    pub n_classes: Option<usize>,
    pub feature_batch: usize,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 256,
            lr: 30.0,
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: true,
            n_classes: None,
            feature_batch: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeAccuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Frozen-encoder features for the whole dataset, `(N, out_dim)`.
pub fn extract_features(encoder: &dyn Encoder, ds: &ImageDataset, batch: usize, device: &Device) -> Result<Tensor> {
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        parts.push(encoder.forward_t(&ds.batch(chunk, device)?, false)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn check_labels(ds: &ImageDataset, n: usize, which: &str) -> Result<()> {
    if ds.n_classes() != n {
        return Err(Error::Schema(format!("{which} set has {} classes, expected {n}", ds.n_classes())));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l as usize >= n) {
        return Err(Error::Schema(format!("{which} set label {l} out of range for {n} classes")));
    }
    Ok(())
}

/// Train a linear classifier on frozen features and report test accuracy.
pub fn linear_probe(
    encoder: &dyn Encoder,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &LinearEvalConfig,
    seed_value: u64,
) -> Result<ProbeAccuracy> {
    let n_classes = cfg.n_classes.unwrap_or(train.n_classes());
    check_labels(train, n_classes, "train")?;
    check_labels(test, n_classes, "test")?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Schema("linear probe needs non-empty train and test sets".into()));
    }
    let dev = Device::Cpu;
    let mut ftr = extract_features(encoder, train, cfg.feature_batch, &dev)?;
    let mut fte = extract_features(encoder, test, cfg.feature_batch, &dev)?;
    if cfg.standardize {
        let mean = ftr.mean_keepdim(0)?;
        let std = (ftr.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)? + 1e-6)?.sqrt()?;
        ftr = ftr.broadcast_sub(&mean)?.broadcast_div(&std)?;
        fte = fte.broadcast_sub(&mean)?.broadcast_div(&std)?;
    }
    let d = ftr.dim(1)?;
    let params = Params::new(&dev);
    let head = linear(d, n_classes, params.vb().pp("fc"))?;
    params.init(seed::derive(seed_value, "linear-probe", 0))?;
    let ytr = Tensor::new(train.labels_of(&(0..train.len()).collect::<Vec<_>>()), &dev)?;
    let mut opt = SgdMomentum::new(params.vars(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps = train.len().div_ceil(cfg.batch_size.max(1));
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive(seed_value, "linear-probe-shuffle", epoch as u64)));
        for (s, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            opt.set_learning_rate(cosine_lr(cfg.lr, epoch as f64 + s as f64 / steps as f64, cfg.epochs as f64, 0.0));
            let idx = Tensor::new(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), &dev)?;
            let loss = cross_entropy(&head.forward(&ftr.index_select(&idx, 0)?)?, &ytr.index_select(&idx, 0)?)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::Training { step: epoch * steps + s, diagnostics: format!("linear probe loss {v}") });
            }
            opt.backward_step(&loss)?;
        }
    }
    let logits = head.forward(&fte)?;
    let yte = test.labels_of(&(0..test.len()).collect::<Vec<_>>());
    Ok(topk_accuracy(&logits, &yte, 5)?)
}

/// Top-1 and top-k accuracy from logits; `k` is capped at the class count.
pub(crate) fn topk_accuracy(logits: &Tensor, labels: &[u32], k: usize) -> Result<ProbeAccuracy> {
    let rows = logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let (mut top1, mut topk) = (0usize, 0usize);
    for (row, &y) in rows.iter().zip(labels) {
        let target = row[y as usize];
        // Rank = number of classes scoring strictly higher; ties favor the label.
        let rank = row.iter().filter(|&&v| v > target).count();
        top1 += (rank == 0) as usize;
        topk += (rank < k.min(row.len())) as usize;
    }
    let n = labels.len().max(1) as f64;
    Ok(ProbeAccuracy { top1: top1 as f64 / n, top5: topk as f64 / n })
}

/// [`linear_probe`] on an encoder checkpoint.
pub fn linear_probe_checkpoint(
    meta: &Path,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &LinearEvalConfig,
    seed_value: u64,
) -> Result<ProbeAccuracy> {
    let (ck, enc) = load_encoder(meta, &Device::Cpu)?;
    if ck.input_shape != train.shape {
        return Err(Error::Schema(format!(
            "encoder expects {:?} images, dataset has {:?}",
            ck.input_shape, train.shape
        )));
    }
    linear_probe(enc.as_ref(), train, test, cfg, seed_value)
}
