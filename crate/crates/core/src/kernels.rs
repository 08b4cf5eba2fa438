//! Covariance functions.
//!
//! Standard RBF kernels for the alignment and warping layers, plus the
//! closed-form convolution-process (CP) cross-output kernel for the shared
//! layer. In the CP construction every output is a latent white-noise process
//! convolved with an output-specific squared-exponential smoothing filter
//! `T_d(t) = sigma_d * prod_k sqrt(2) * exp(-t_k^2 / (2 l_{d,k}^2))`,
//! so cross-output covariances have a closed form in the combined lengthscales
//! `lhat_k = sqrt(l_{d,k}^2 + l_{d',k}^2)`.
//!
//! All hyperparameters are stored in log-space so they can be optimized
//! without positivity constraints.

use crate::linalg::Mat;
use crate::{Error, Result};

pub(crate) const SQRT_8PI: f64 = 5.013_256_549_262_001; // sqrt(8 * pi)

/// RBF kernel hyperparameters, log-parameterized.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfParams {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl RbfParams {
    /// Builds from natural-scale variance and lengthscales.
    pub fn new(variance: f64, lengthscales: &[f64]) -> Result<Self> {
        if !(variance > 0.0) || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidParameter(
                "RBF variance and lengthscales must be strictly positive".into(),
            ));
        }
        Ok(RbfParams {
            log_variance: variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        })
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscale(&self, k: usize) -> f64 {
        self.log_lengthscales[k].exp()
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }
}

/// Smoothing-filter hyperparameters of the CP kernel: one scale and one
/// lengthscale vector per (output d, latent process r).
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingKernelParams {
    outputs: usize,
    latent_processes: usize,
    input_dim: usize,
    /// log sigma_{d,r}, indexed d * R + r.
    pub log_scales: Vec<f64>,
    /// log l_{d,r,k}, indexed (d * R + r) * K + k.
    pub log_lengthscales: Vec<f64>,
}

impl SmoothingKernelParams {
    pub fn new(outputs: usize, latent_processes: usize, input_dim: usize) -> Result<Self> {
        if outputs == 0 || latent_processes == 0 || input_dim == 0 {
            return Err(Error::InvalidParameter(
                "smoothing kernel needs D >= 1, R >= 1, K >= 1".into(),
            ));
        }
        Ok(SmoothingKernelParams {
            outputs,
            latent_processes,
            input_dim,
            log_scales: vec![0.0; outputs * latent_processes],
            log_lengthscales: vec![0.0; outputs * latent_processes * input_dim],
        })
    }

    /// Builds with uniform natural-scale values.
    pub fn constant(
        outputs: usize,
        latent_processes: usize,
        input_dim: usize,
        scale: f64,
        lengthscale: f64,
    ) -> Result<Self> {
        if !(scale > 0.0) || !(lengthscale > 0.0) {
            return Err(Error::InvalidParameter(
                "smoothing kernel scale and lengthscale must be strictly positive".into(),
            ));
        }
        let mut p = Self::new(outputs, latent_processes, input_dim)?;
        p.log_scales.fill(scale.ln());
        p.log_lengthscales.fill(lengthscale.ln());
        Ok(p)
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn latent_processes(&self) -> usize {
        self.latent_processes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn scale(&self, d: usize, r: usize) -> f64 {
        self.log_scales[d * self.latent_processes + r].exp()
    }

    pub fn set_scale(&mut self, d: usize, r: usize, scale: f64) {
        self.log_scales[d * self.latent_processes + r] = scale.ln();
    }

    pub fn lengthscale(&self, d: usize, r: usize, k: usize) -> f64 {
        self.log_lengthscales[(d * self.latent_processes + r) * self.input_dim + k].exp()
    }

    pub fn set_lengthscale(&mut self, d: usize, r: usize, k: usize, l: f64) {
        self.log_lengthscales[(d * self.latent_processes + r) * self.input_dim + k] = l.ln();
    }

    /// Combined lengthscale `lhat_{d,d',r,k} = sqrt(l_{d,r,k}^2 + l_{d',r,k}^2)`.
    pub fn combined_lengthscale(&self, d: usize, dp: usize, r: usize, k: usize) -> f64 {
        let a = self.lengthscale(d, r, k);
        let b = self.lengthscale(dp, r, k);
        (a * a + b * b).sqrt()
    }

    /// Prefactor of the closed-form cross-covariance for one latent process:
    /// `sigma_d sigma_d' prod_k sqrt(8 pi) l_{d,k} l_{d',k} / lhat_k`.
    ///
    /// This is the value of the convolution integral at zero separation, i.e.
    /// the `sigma_hat^2` variance term of the pair `(d, d')`.
    pub fn pair_variance(&self, d: usize, dp: usize, r: usize) -> f64 {
        let mut v = self.scale(d, r) * self.scale(dp, r);
        for k in 0..self.input_dim {
            let a = self.lengthscale(d, r, k);
            let b = self.lengthscale(dp, r, k);
            v *= SQRT_8PI * a * b / (a * a + b * b).sqrt();
        }
        v
    }

    fn check_output(&self, d: usize) -> Result<()> {
        if d >= self.outputs {
            return Err(Error::InvalidOutputIndex { index: d, outputs: self.outputs });
        }
        Ok(())
    }
}

/// Points with per-point output tags, as used by the CP layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputTaggedPoints {
    /// Row-major N x K coordinates.
    coords: Vec<f64>,
    dim: usize,
    tags: Vec<usize>,
}

impl OutputTaggedPoints {
    pub fn new(coords: Vec<f64>, dim: usize, tags: Vec<usize>, outputs: usize) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "coordinate buffer of length {} is not a multiple of dim {}",
                coords.len(),
                dim
            )));
        }
        if coords.len() / dim != tags.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} output tags",
                coords.len() / dim,
                tags.len()
            )));
        }
        if let Some(&bad) = tags.iter().find(|&&t| t >= outputs) {
            return Err(Error::InvalidOutputIndex { index: bad, outputs });
        }
        Ok(OutputTaggedPoints { coords, dim, tags })
    }

    /// One-dimensional convenience constructor.
    pub fn new_1d(xs: &[f64], tags: &[usize], outputs: usize) -> Result<Self> {
        Self::new(xs.to_vec(), 1, tags.to_vec(), outputs)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tag(&self, i: usize) -> usize {
        self.tags[i]
    }

    pub fn tags(&self) -> &[usize] {
        &self.tags
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Squared-exponential kernel evaluation.
pub fn rbf_eval(x: &[f64], xp: &[f64], p: &RbfParams) -> Result<f64> {
    if x.len() != xp.len() || x.len() != p.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "rbf_eval: point dims {} / {} vs {} lengthscales",
            x.len(),
            xp.len(),
            p.input_dim()
        )));
    }
    let mut q = 0.0;
    for k in 0..x.len() {
        let d = x[k] - xp[k];
        let l = p.lengthscale(k);
        q += d * d / (l * l);
    }
    Ok(p.variance() * (-0.5 * q).exp())
}

/// Closed-form CP cross-output covariance
/// `cov(f_d(x), f_d'(x')) = sum_r sigma_hat^2_{d,d',r} exp(-1/2 sum_k (x_k - x'_k)^2 / lhat_k^2)`.
pub fn cp_cross_cov(
    x: &[f64],
    d: usize,
    xp: &[f64],
    dp: usize,
    p: &SmoothingKernelParams,
) -> Result<f64> {
    p.check_output(d)?;
    p.check_output(dp)?;
    if x.len() != p.input_dim() || xp.len() != p.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "cp_cross_cov: point dims {} / {} vs kernel dim {}",
            x.len(),
            xp.len(),
            p.input_dim()
        )));
    }
    let mut total = 0.0;
    for r in 0..p.latent_processes() {
        let mut q = 0.0;
        for k in 0..p.input_dim() {
            let delta = x[k] - xp[k];
            let lhat = p.combined_lengthscale(d, dp, r, k);
            q += delta * delta / (lhat * lhat);
        }
        total += p.pair_variance(d, dp, r) * (-0.5 * q).exp();
    }
    Ok(total)
}

/// Kernel reference used by [`gram`].
#[derive(Debug, Clone, Copy)]
pub enum Kernel<'a> {
    Rbf(&'a RbfParams),
    Cp(&'a SmoothingKernelParams),
}

impl Kernel<'_> {
    pub fn eval(&self, x: &[f64], d: usize, xp: &[f64], dp: usize) -> Result<f64> {
        match self {
            Kernel::Rbf(p) => rbf_eval(x, xp, p),
            Kernel::Cp(p) => cp_cross_cov(x, d, xp, dp, p),
        }
    }
}

/// Gram matrix between two tagged point sets. Symmetric PSD when both
/// arguments are the same set.
pub fn gram(a: &OutputTaggedPoints, b: &OutputTaggedPoints, kernel: Kernel) -> Result<Mat> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "gram: point dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mut m = Mat::zeros(a.len(), b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            m[(i, j)] = kernel.eval(a.point(i), a.tag(i), b.point(j), b.tag(j))?;
        }
    }
    Ok(m)
}
