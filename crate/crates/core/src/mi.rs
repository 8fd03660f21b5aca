//! InfoNCE over a batch of embedded view pairs and the mutual-information
//! lower bound it implies.
//!
//! The loss is the symmetric 2K-view form: the K anchors and K positives are
//! pooled, each view's positive is its partner and the other 2K-2 views are
//! negatives. With this construction the bound constant is `ln(2K-1)`.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Anchor and positive embeddings, row `i` of each forming a pair.
#[derive(Debug, Clone)]
pub struct InfoNceBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub temperature: f64,
}

impl InfoNceBatch {
    pub fn new(anchors: Tensor, positives: Tensor, temperature: f64) -> Result<Self> {
        check(&anchors, &positives, temperature)?;
        Ok(Self { anchors, positives, temperature })
    }

    pub fn k(&self) -> usize {
        self.anchors.dims()[0]
    }

    pub fn loss(&self) -> Result<Tensor> {
        infonce_loss(&self.anchors, &self.positives, self.temperature)
    }
}

fn check(anchors: &Tensor, positives: &Tensor, temperature: f64) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param(format!("temperature must be positive, got {temperature}")));
    }
    let (k, e) = anchors
        .dims2()
        .map_err(|_| Error::shape(format!("anchor embeddings must be 2-D, got {:?}", anchors.dims())))?;
    if positives.dims() != [k, e] {
        return Err(Error::shape(format!(
            "positive embeddings {:?} do not match anchors {:?}",
            positives.dims(),
            anchors.dims()
        )));
    }
    if k < 2 {
        return Err(Error::BatchSize { min: 2, got: k });
    }
    Ok(k)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    // The offset keeps the gradient finite at the origin.
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean symmetric InfoNCE (NT-Xent) loss, differentiable in both inputs.
/// Works in the dtype of the inputs.
pub fn infonce_loss(anchors: &Tensor, positives: &Tensor, temperature: f64) -> Result<Tensor> {
    let k = check(anchors, positives, temperature)?;
    let a = l2_normalize(anchors)?;
    let p = l2_normalize(positives)?;
    let z = Tensor::cat(&[&a, &p], 0)?;
    let logits = (z.matmul(&z.t()?)? / temperature)?;
    let n = 2 * k;
    let mut mask = vec![0f64; n * n];
    for i in 0..n {
        mask[i * n + i] = f64::NEG_INFINITY;
    }
    let mask = Tensor::from_vec(mask, (n, n), z.device())?.to_dtype(z.dtype())?;
    let lse = (logits + mask)?.log_sum_exp(D::Minus1)?;
    let pos = ((a * p)?.sum(D::Minus1)? / temperature)?;
    // Each pair's positive logit appears once from each side.
    let loss = (lse.mean_all()? - pos.mean_all()?)?;
    Ok(loss)
}

/// `ln(2K-1) - loss`, returned as-is even when negative.
pub fn mi_lower_bound(loss: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::BatchSize { min: 2, got: k });
    }
    if !(loss >= 0.0) {
        return Err(Error::param(format!("InfoNCE loss must be >= 0, got {loss}")));
    }
    Ok(((2 * k - 1) as f64).ln() - loss)
}

/// Scalar value of a loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn identical_embeddings_give_uniform_loss() -> Result<()> {
        for k in [2usize, 5, 64] {
            let e = Tensor::ones((k, 8), DType::F64, &Device::Cpu)?;
            let l = scalar(&infonce_loss(&e, &e, 0.1)?)?;
            let expected = ((2 * k - 1) as f64).ln();
            assert!((l - expected).abs() < 1e-12, "k={k}: {l} vs {expected}");
        }
        Ok(())
    }

    #[test]
    fn orthogonal_negatives_closed_form() -> Result<()> {
        let k = 4;
        let tau = 0.1;
        let eye = Tensor::eye(k, DType::F64, &Device::Cpu)?;
        let l = scalar(&infonce_loss(&eye, &eye, tau)?)?;
        let expected = (1.0 + (2 * k - 2) as f64 * (-1.0 / tau).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn rejects_tiny_batches_and_mismatches() -> Result<()> {
        let dev = Device::Cpu;
        let one = Tensor::ones((1, 3), DType::F32, &dev)?;
        assert!(matches!(infonce_loss(&one, &one, 0.1), Err(Error::BatchSize { min: 2, got: 1 })));
        let two = Tensor::ones((2, 3), DType::F32, &dev)?;
        let other = Tensor::ones((2, 4), DType::F32, &dev)?;
        assert!(matches!(infonce_loss(&two, &other, 0.1), Err(Error::Shape(_))));
        assert!(infonce_loss(&two, &two, 0.0).is_err());
        Ok(())
    }

    #[test]
    fn bound_arithmetic() -> Result<()> {
        assert_eq!(mi_lower_bound(127f64.ln(), 64)?, 0.0);
        assert!((mi_lower_bound(0.0, 64)? - 127f64.ln()).abs() < 1e-15);
        assert!(mi_lower_bound(9.0, 4)? < 0.0);
        assert!(mi_lower_bound(0.0, 1).is_err());
        Ok(())
    }

    #[test]
    fn gradient_is_finite_for_zero_rows() -> Result<()> {
        let dev = Device::Cpu;
        let a = Var::from_tensor(&Tensor::zeros((3, 2), DType::F64, &dev)?)?;
        let p = Tensor::ones((3, 2), DType::F64, &dev)?;
        let g = infonce_loss(a.as_tensor(), &p, 0.1)?.backward()?;
        let ga = g.get(a.as_tensor()).expect("grad");
        assert!(ga.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| v.is_finite()));
        Ok(())
    }
}
