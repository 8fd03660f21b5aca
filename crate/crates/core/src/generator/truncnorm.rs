use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Normal distribution truncated symmetrically at `mean ± trunc * std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedNormalParams {
    pub mean: f64,
    pub std: f64,
    /// Half-width of the support, in units of `std`.
    pub trunc: f64,
}

impl TruncatedNormalParams {
    pub fn new(mean: f64, std: f64, trunc: f64) -> Result<Self> {
        let p = Self { mean, std, trunc };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::param(format!("truncated normal std must be positive, got {}", self.std)));
        }
        if !(self.trunc > 0.0) {
            return Err(Error::param(format!("truncated normal trunc must be positive, got {}", self.trunc)));
        }
        if !self.mean.is_finite() {
            return Err(Error::param("truncated normal mean must be finite"));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.trunc * self.std
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.trunc * self.std
    }

    /// One draw by exact rejection. Narrow supports (`trunc < 1`) use a
    /// uniform proposal, accepted with probability `exp(-x^2/2) >= e^-0.5`;
    /// wider ones propose from the untruncated normal.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        self.mean + self.std * standard_truncated(self.trunc, rng)
    }

    pub fn variance(&self) -> f64 {
        let t = self.trunc;
        let phi = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = statrs::function::erf::erf(t / std::f64::consts::SQRT_2);
        self.std * self.std * (1.0 - 2.0 * t * phi / mass)
    }

    pub fn sample_n(&self, count: usize, rng: &mut Rng) -> Vec<f32> {
        (0..count).map(|_| self.sample(rng) as f32).collect()
    }
}

fn standard_truncated(t: f64, rng: &mut Rng) -> f64 {
    if t < 1.0 {
        loop {
            let x = rng.random_range(-t..=t);
            if rng.random::<f64>() <= (-0.5 * x * x).exp() {
                return x;
            }
        }
    }
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= t {
            return x;
        }
    }
}

/// `count` independent draws, deterministic in `seed`.
pub fn sample_truncated_normal(params: &TruncatedNormalParams, count: usize, seed: u64) -> Result<Vec<f32>> {
    params.validate()?;
    let mut rng = seed::rng(seed);
    Ok(params.sample_n(count, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_params() {
        assert!(TruncatedNormalParams::new(0.0, 0.0, 2.0).is_err());
        assert!(TruncatedNormalParams::new(0.0, 1.0, 0.0).is_err());
        assert!(TruncatedNormalParams::new(0.0, -1.0, 1.0).is_err());
        let bad = TruncatedNormalParams { mean: 0.0, std: 1.0, trunc: -2.0 };
        assert!(sample_truncated_normal(&bad, 3, 0).is_err());
    }

    #[test]
    fn zero_count_is_empty() -> Result<()> {
        let p = TruncatedNormalParams::new(0.0, 1.0, 2.0)?;
        assert!(sample_truncated_normal(&p, 0, 1)?.is_empty());
        Ok(())
    }

    #[test]
    fn narrow_support_uses_bounded_proposal() -> Result<()> {
        let p = TruncatedNormalParams::new(3.0, 0.5, 0.2)?;
        let xs = sample_truncated_normal(&p, 20_000, 4)?;
        assert!(xs.iter().all(|&x| (x as f64) >= p.lower() - 1e-6 && (x as f64) <= p.upper() + 1e-6));
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64;
        assert!((mean - 3.0).abs() < 0.01);
        Ok(())
    }
}
