use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_latents, ComputeDevice, Generator, ImageShape, LatentSpec, TruncatedNormalParams};
use crate::error::{Error, Result};
use crate::seed;

/// `x = sum_i A_i z_i + eps * eta`, with `eta` standard normal and drawn
/// fresh for every generated view.
///
/// Every pair of views sharing all but a Gaussian-perturbed level is jointly
/// Gaussian (up to anchor truncation), so their mutual information has a
/// closed form.
#[derive(Debug, Clone)]
pub struct LinearGaussianMlvgm {
    spec: LatentSpec,
    shape: ImageShape,
    a: Vec<DMatrix<f64>>,
    a_t: Vec<Tensor>,
    eps: f64,
    device: ComputeDevice,
}

/// Serializable form, used by checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub spec: LatentSpec,
    pub shape: ImageShape,
    /// Row-major `d x m_i` matrices.
    pub a: Vec<Vec<f64>>,
    pub eps: f64,
}

impl LinearGaussianMlvgm {
    pub fn new(spec: LatentSpec, shape: ImageShape, a: Vec<DMatrix<f64>>, eps: f64) -> Result<Self> {
        Self::on(spec, shape, a, eps, ComputeDevice::default())
    }

    pub fn on(
        spec: LatentSpec,
        shape: ImageShape,
        a: Vec<DMatrix<f64>>,
        eps: f64,
        device: ComputeDevice,
    ) -> Result<Self> {
        spec.validate()?;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::param(format!("observation noise must be >= 0, got {eps}")));
        }
        if a.len() != spec.n_levels() {
            return Err(Error::shape(format!("{} matrices for {} levels", a.len(), spec.n_levels())));
        }
        let d = shape.numel();
        let mut a_t = Vec::with_capacity(a.len());
        for (i, (m, &dim)) in a.iter().zip(&spec.dims).enumerate() {
            if m.nrows() != d || m.ncols() != dim {
                return Err(Error::shape(format!("A_{} must be {d}x{dim}, got {}x{}", i + 1, m.nrows(), m.ncols())));
            }
            // nalgebra storage is column-major, which is A^T in row-major order.
            let t: Vec<f32> = m.iter().map(|&v| v as f32).collect();
            let t = Tensor::from_vec(t, (dim, d), &device.device)?;
            a_t.push(t);
        }
        Ok(Self { spec, shape, a, a_t, eps, device })
    }

    /// Levels sharing one column space: `A_i = scales[i] * B` with `B` a
    /// random `d x m` matrix with orthonormal columns. Because every level
    /// writes into the same subspace, a perturbation of level `i` can only be
    /// told apart from the anchor through its magnitude, which must grow like
    /// `1 / scales[i]` for a fixed shift in mutual information. A zero scale
    /// yields a level with no influence.
    pub fn hierarchical(
        latent_dim: usize,
        scales: &[f64],
        anchor: TruncatedNormalParams,
        shape: ImageShape,
        eps: f64,
        basis_seed: u64,
    ) -> Result<Self> {
        let d = shape.numel();
        if latent_dim == 0 || latent_dim > d {
            return Err(Error::param(format!("latent dim {latent_dim} must be in 1..={d}")));
        }
        let basis = orthonormal_basis(d, latent_dim, basis_seed);
        let a = scales.iter().map(|&s| &basis * s).collect();
        let spec = LatentSpec::uniform(vec![latent_dim; scales.len()], anchor)?;
        Self::new(spec, shape, a, eps)
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn to_params(&self) -> LinearParams {
        LinearParams {
            spec: self.spec.clone(),
            shape: self.shape,
            a: self.a.iter().map(|m| m.transpose().iter().copied().collect()).collect(),
            eps: self.eps,
        }
    }

    pub fn from_params(p: LinearParams, device: ComputeDevice) -> Result<Self> {
        let d = p.shape.numel();
        let a =
            p.a.iter()
                .zip(&p.spec.dims)
                .map(|(v, &m)| {
                    if v.len() != d * m {
                        return Err(Error::Schema(format!("matrix has {} entries, expected {}", v.len(), d * m)));
                    }
                    Ok(DMatrix::from_row_slice(d, m, v))
                })
                .collect::<Result<Vec<_>>>()?;
        Self::on(p.spec, p.shape, a, p.eps, device)
    }

    /// Covariance of the noiseless signal `sum_i A_i z_i` under the anchor
    /// distribution.
    fn signal_cov(&self) -> DMatrix<f64> {
        let d = self.shape.numel();
        let mut s = DMatrix::zeros(d, d);
        for (a, p) in self.a.iter().zip(&self.spec.anchor) {
            s += a * a.transpose() * p.variance();
        }
        s
    }

    /// Exact `I(X; X')` in nats, where `X'` reuses every latent of `X` except
    /// `level`, which receives an independent zero-mean Gaussian perturbation
    /// with covariance `perturbation_cov`, and both views draw their own
    /// observation noise.
    ///
    /// The latents are treated through their second moments; the value is
    /// exact when anchors are Gaussian and accurate to the truncation error
    /// otherwise (negligible for `trunc >= 4`).
    pub fn analytic_pair_mi(&self, level: usize, perturbation_cov: &DMatrix<f64>) -> Result<f64> {
        if level >= self.spec.n_levels() {
            return Err(Error::param(format!("level {} out of range", level + 1)));
        }
        if self.eps == 0.0 {
            return Err(Error::InfiniteMi(
                "observation noise is zero, so the views share a deterministic component".into(),
            ));
        }
        let m = self.spec.dims[level];
        if perturbation_cov.nrows() != m || perturbation_cov.ncols() != m {
            return Err(Error::shape(format!("perturbation covariance must be {m}x{m}")));
        }
        let min_eig = perturbation_cov.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-9 {
            return Err(Error::param("perturbation covariance is not positive semi-definite"));
        }
        let d = self.shape.numel();
        let s = self.signal_cov();
        let noise = DMatrix::<f64>::identity(d, d) * (self.eps * self.eps);
        let a = &self.a[level];
        let cx = &s + &noise;
        let cy = &s + a * perturbation_cov * a.transpose() + &noise;
        gaussian_mi_from_covariances(&cx, &cy, &s)
    }
}

/// `I(X;Y)` for jointly Gaussian vectors from `Cov(X)`, `Cov(Y)` and `Cov(X,Y)`.
pub fn gaussian_mi_from_covariances(cx: &DMatrix<f64>, cy: &DMatrix<f64>, cxy: &DMatrix<f64>) -> Result<f64> {
    let (dx, dy) = (cx.nrows(), cy.nrows());
    if cx.ncols() != dx || cy.ncols() != dy || cxy.shape() != (dx, dy) {
        return Err(Error::shape("inconsistent covariance blocks"));
    }
    let mut joint = DMatrix::zeros(dx + dy, dx + dy);
    joint.view_mut((0, 0), (dx, dx)).copy_from(cx);
    joint.view_mut((dx, dx), (dy, dy)).copy_from(cy);
    joint.view_mut((0, dx), (dx, dy)).copy_from(cxy);
    joint.view_mut((dx, 0), (dy, dx)).copy_from(&cxy.transpose());
    let mi = 0.5 * (log_det(cx)? + log_det(cy)? - log_det(&joint)?);
    Ok(mi.max(0.0))
}

fn log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m.clone().cholesky().ok_or_else(|| Error::InfiniteMi("covariance is singular".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn orthonormal_basis(d: usize, m: usize, seed_value: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(seed_value);
    let g = DMatrix::from_fn(d, m, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    q.columns(0, m).into_owned()
}

impl Generator for LinearGaussianMlvgm {
    fn spec(&self) -> &LatentSpec {
        &self.spec
    }

    fn output_shape(&self) -> ImageShape {
        self.shape
    }

    fn device(&self) -> &ComputeDevice {
        &self.device
    }

    fn decode(&self, latents: &[Tensor], noise_seed: u64) -> Result<Tensor> {
        let b = check_latents(&self.spec, latents)?;
        let d = self.shape.numel();
        let mut x = Tensor::zeros((b, d), DType::F32, &self.device.device)?;
        for (z, a_t) in latents.iter().zip(&self.a_t) {
            x = (x + z.matmul(a_t)?)?;
        }
        if self.eps > 0.0 {
            x = (x + noise(b * d, noise_seed, self.eps, &self.device.device)?.reshape((b, d))?)?;
        }
        let (c, h, w) = self.shape.dims3();
        Ok(x.reshape((b, c, h, w))?)
    }
}

fn noise(n: usize, seed_value: u64, scale: f64, device: &Device) -> Result<Tensor> {
    let mut rng = seed::rng(seed::derive(seed_value, "observation-noise", 0));
    let v: Vec<f32> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (scale * e) as f32
        })
        .collect();
    Ok(Tensor::from_vec(v, n, device)?)
}

/// Empirical covariance, rows are samples.
#[cfg(test)]
pub(crate) fn sample_cov(rows: &[nalgebra::DVector<f64>]) -> DMatrix<f64> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean = rows.iter().fold(nalgebra::DVector::zeros(d), |acc, r| acc + r) / n;
    rows.iter().fold(DMatrix::zeros(d, d), |acc, r| {
        let c = r - &mean;
        acc + &c * c.transpose()
    }) / (n - 1.0)
}
