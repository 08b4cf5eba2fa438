//! Closed-form kernel expectations under Gaussian input uncertainty.
//!
//! For a layer whose inputs are only known as per-point Gaussians
//! `q(a_n) = N(mu_n, s_n)`, the variational bound needs three expectations of
//! kernel matrices: `psi0 = E[tr K_ff]`, `psi1 = E[K_fu]` and
//! `psi2 = E[K_uf K_fu]`. Both the CP kernel and the plain RBF kernel admit
//! closed forms because each kernel entry is a scaled Gaussian bump in the
//! uncertain input; the expectations reduce to Gaussian-times-Gaussian
//! integrals.
//!
//! A seeded Monte-Carlo oracle is provided as the independent ground truth
//! for all closed forms. Uncertain inputs are one-dimensional, matching the
//! scalar-valued layers of the hierarchy.

use crate::kernels::{Kernel, OutputTaggedPoints, RbfParams, SmoothingKernelParams};
use crate::linalg::Mat;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Per-point Gaussian moments `(mu_n, s_n)` carrying propagated uncertainty
/// between layers. Only diagonal covariances are represented.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} means vs {} variances",
                means.len(),
                variances.len()
            )));
        }
        if variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter("negative input variance".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("input means".into()));
        }
        Ok(GaussianMoments { means, variances })
    }

    /// Point-mass moments (zero variance).
    pub fn exact(means: &[f64]) -> Self {
        GaussianMoments { means: means.to_vec(), variances: vec![0.0; means.len()] }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// The three kernel expectations.
#[derive(Debug, Clone)]
pub struct PsiTriple {
    pub psi0: f64,
    /// N x M.
    pub psi1: Mat,
    /// M x M, symmetric PSD.
    pub psi2: Mat,
}

/// Monte-Carlo estimate with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct McPsi {
    pub estimate: PsiTriple,
    pub stderr: PsiTriple,
}

// ---------------------------------------------------------------------------
// Gaussian factor primitives, shared with the autodiff tape.
//
// Every kernel entry in play has the shape `c * exp(-(a - z)^2 / (2 v))`; the
// two integrals below are all that is needed for the psi statistics, and each
// returns its partial derivatives for the reverse pass.
// ---------------------------------------------------------------------------

/// `E_{a ~ N(mu, s)}[exp(-(a - z)^2 / (2 v))]` with partials.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GaussFactor {
    pub val: f64,
    pub d_mu: f64,
    pub d_s: f64,
    pub d_z: f64,
    pub d_v: f64,
}

pub(crate) fn gauss_expect(mu: f64, s: f64, z: f64, v: f64) -> GaussFactor {
    let w = v + s;
    let delta = mu - z;
    let val = (v / w).sqrt() * (-0.5 * delta * delta / w).exp();
    let d_mu = -val * delta / w;
    let d_s = val * (-0.5 / w + 0.5 * delta * delta / (w * w));
    GaussFactor {
        val,
        d_mu,
        d_s,
        d_z: -d_mu,
        d_v: val * (0.5 / v - 0.5 / w + 0.5 * delta * delta / (w * w)),
    }
}

/// `E_{a ~ N(mu, s)}[a * exp(-(a - z)^2 / (2 v))]` expressed as
/// `gauss_expect * mbar` with `mbar = (mu v + z s) / (v + s)`; returns the
/// product with partials.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinGaussFactor {
    pub val: f64,
    pub d_mu: f64,
    pub d_s: f64,
    pub d_z: f64,
    pub d_v: f64,
}

pub(crate) fn lin_gauss_expect(mu: f64, s: f64, z: f64, v: f64) -> LinGaussFactor {
    let g = gauss_expect(mu, s, z, v);
    let w = v + s;
    let mbar = (mu * v + z * s) / w;
    let dm_mu = v / w;
    let dm_s = v * (z - mu) / (w * w);
    let dm_z = s / w;
    let dm_v = s * (mu - z) / (w * w);
    LinGaussFactor {
        val: g.val * mbar,
        d_mu: g.d_mu * mbar + g.val * dm_mu,
        d_s: g.d_s * mbar + g.val * dm_s,
        d_z: g.d_z * mbar + g.val * dm_z,
        d_v: g.d_v * mbar + g.val * dm_v,
    }
}

/// `E_{a ~ N(mu, s)}[exp(-(a - zi)^2 / (2 vi)) * exp(-(a - zj)^2 / (2 vj))]`
/// with partials. Used for the psi2 statistic.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairFactor {
    pub val: f64,
    pub d_mu: f64,
    pub d_s: f64,
    pub d_zi: f64,
    pub d_zj: f64,
    pub d_vi: f64,
    pub d_vj: f64,
}

pub(crate) fn pair_expect(mu: f64, s: f64, zi: f64, zj: f64, vi: f64, vj: f64) -> PairFactor {
    // Product of the two bumps: a Gaussian bump at zbar with width h, times a
    // separation factor in (zi - zj).
    let vsum = vi + vj;
    let dz = zi - zj;
    let front = (-0.5 * dz * dz / vsum).exp();
    let h = vi * vj / vsum;
    let zbar = (zi * vj + zj * vi) / vsum;
    let g = gauss_expect(mu, s, zbar, h);
    let val = front * g.val;

    // front partials
    let df_dzi = front * (-dz / vsum);
    let df_dzj = -df_dzi;
    let df_dv = front * (0.5 * dz * dz / (vsum * vsum)); // same for vi and vj

    // h and zbar partials
    let dh_dvi = vj * vj / (vsum * vsum);
    let dh_dvj = vi * vi / (vsum * vsum);
    let dzbar_dzi = vj / vsum;
    let dzbar_dzj = vi / vsum;
    let dzbar_dvi = (zj - zbar) / vsum;
    let dzbar_dvj = (zi - zbar) / vsum;

    PairFactor {
        val,
        d_mu: front * g.d_mu,
        d_s: front * g.d_s,
        d_zi: df_dzi * g.val + front * (g.d_z * dzbar_dzi),
        d_zj: df_dzj * g.val + front * (g.d_z * dzbar_dzj),
        d_vi: df_dv * g.val + front * (g.d_v * dh_dvi + g.d_z * dzbar_dvi),
        d_vj: df_dv * g.val + front * (g.d_v * dh_dvj + g.d_z * dzbar_dvj),
    }
}

/// Per-pair CP kernel constants: the variance prefactor `sighat2` and squared
/// combined lengthscale `vhat` for outputs `(d, d')` and latent process `r`,
/// with partials in the log-parameters. The `d == d'` case is handled by the
/// caller accumulating both slots into the same parameter.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CpPairConsts {
    pub sighat2: f64,
    pub vhat: f64,
    /// d sighat2 / d log sigma_{d,r} (per slot; equal for both slots).
    pub ds2_dlogsig: f64,
    /// d sighat2 / d log l for the first slot (d).
    pub ds2_dlogl_a: f64,
    /// d sighat2 / d log l for the second slot (d').
    pub ds2_dlogl_b: f64,
    /// d vhat / d log l for the first slot.
    pub dv_dlogl_a: f64,
    /// d vhat / d log l for the second slot.
    pub dv_dlogl_b: f64,
}

pub(crate) fn cp_pair_consts(p: &SmoothingKernelParams, d: usize, dp: usize, r: usize) -> CpPairConsts {
    let la = p.lengthscale(d, r, 0);
    let lb = p.lengthscale(dp, r, 0);
    let vhat = la * la + lb * lb;
    let sighat2 = crate::kernels::SQRT_8PI * p.scale(d, r) * p.scale(dp, r) * la * lb / vhat.sqrt();
    // log sighat2 = c + log la + log lb - 0.5 log vhat
    CpPairConsts {
        sighat2,
        vhat,
        ds2_dlogsig: sighat2,
        ds2_dlogl_a: sighat2 * (1.0 - la * la / vhat),
        ds2_dlogl_b: sighat2 * (1.0 - lb * lb / vhat),
        dv_dlogl_a: 2.0 * la * la,
        dv_dlogl_b: 2.0 * lb * lb,
    }
}

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

fn check_1d(dim: usize, what: &str) -> Result<()> {
    if dim != 1 {
        return Err(Error::DimensionMismatch(format!(
            "{what}: psi statistics require 1-d inputs, got dim {dim}"
        )));
    }
    Ok(())
}

/// Psi statistics of the CP kernel: uncertain inputs `q` tagged with outputs,
/// inducing inputs `z` (also output-tagged).
pub fn psi_cp(
    q: &GaussianMoments,
    q_tags: &[usize],
    z: &OutputTaggedPoints,
    p: &SmoothingKernelParams,
) -> Result<PsiTriple> {
    check_1d(p.input_dim(), "psi_cp")?;
    check_1d(z.dim(), "psi_cp inducing inputs")?;
    if q.len() != q_tags.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} moments vs {} tags",
            q.len(),
            q_tags.len()
        )));
    }
    if q.is_empty() || z.is_empty() {
        return Err(Error::InvalidParameter("psi_cp needs N >= 1 and M >= 1".into()));
    }
    if let Some(&bad) = q_tags.iter().find(|&&t| t >= p.outputs()) {
        return Err(Error::InvalidOutputIndex { index: bad, outputs: p.outputs() });
    }
    let n = q.len();
    let m = z.len();
    let rr = p.latent_processes();

    // psi0 = sum_n k((a_n, d_n), (a_n, d_n)); independent of mu and s.
    let mut psi0 = 0.0;
    for &d in q_tags {
        for r in 0..rr {
            psi0 += p.pair_variance(d, d, r);
        }
    }

    let mut psi1 = Mat::zeros(n, m);
    let mut psi2 = Mat::zeros(m, m);
    for ni in 0..n {
        let (mu, s, d) = (q.means[ni], q.variances[ni], q_tags[ni]);
        // per-latent-process constants against every inducing point
        let consts: Vec<Vec<CpPairConsts>> = (0..m)
            .map(|i| (0..rr).map(|r| cp_pair_consts(p, d, z.tag(i), r)).collect())
            .collect();
        for i in 0..m {
            let zi = z.point(i)[0];
            let mut acc = 0.0;
            for r in 0..rr {
                let c = consts[i][r];
                acc += c.sighat2 * gauss_expect(mu, s, zi, c.vhat).val;
            }
            psi1[(ni, i)] = acc;
        }
        // psi2 couples pairs of latent processes: the integrand is a product
        // of two kernel entries, each a sum over r.
        for i in 0..m {
            let zi = z.point(i)[0];
            for j in 0..=i {
                let zj = z.point(j)[0];
                let mut acc = 0.0;
                for r in 0..rr {
                    let ci = consts[i][r];
                    for rp in 0..rr {
                        let cj = consts[j][rp];
                        acc += ci.sighat2
                            * cj.sighat2
                            * pair_expect(mu, s, zi, zj, ci.vhat, cj.vhat).val;
                    }
                }
                psi2[(i, j)] += acc;
                if i != j {
                    psi2[(j, i)] += acc;
                }
            }
        }
    }
    Ok(PsiTriple { psi0, psi1, psi2 })
}

/// Psi statistics of the plain RBF kernel (the single-output special case,
/// used by the warping layers).
pub fn psi_rbf(q: &GaussianMoments, z: &[f64], p: &RbfParams) -> Result<PsiTriple> {
    check_1d(p.input_dim(), "psi_rbf")?;
    if q.is_empty() || z.is_empty() {
        return Err(Error::InvalidParameter("psi_rbf needs N >= 1 and M >= 1".into()));
    }
    let n = q.len();
    let m = z.len();
    let var = p.variance();
    let l = p.lengthscale(0);
    let v = l * l;

    let psi0 = n as f64 * var;
    let mut psi1 = Mat::zeros(n, m);
    let mut psi2 = Mat::zeros(m, m);
    for ni in 0..n {
        let (mu, s) = (q.means[ni], q.variances[ni]);
        for i in 0..m {
            psi1[(ni, i)] = var * gauss_expect(mu, s, z[i], v).val;
        }
        for i in 0..m {
            for j in 0..=i {
                let t = var * var * pair_expect(mu, s, z[i], z[j], v, v).val;
                psi2[(i, j)] += t;
                if i != j {
                    psi2[(j, i)] += t;
                }
            }
        }
    }
    Ok(PsiTriple { psi0, psi1, psi2 })
}

// ---------------------------------------------------------------------------
// Monte-Carlo oracle
// ---------------------------------------------------------------------------

/// Sample-average estimates of the three psi statistics with per-entry
/// standard errors. Deterministic for a fixed seed.
pub fn mc_psi_oracle(
    q: &GaussianMoments,
    q_tags: &[usize],
    z: &OutputTaggedPoints,
    kernel: Kernel,
    n_samples: usize,
    seed: u64,
) -> Result<McPsi> {
    if n_samples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "mc_psi_oracle needs at least 1000 samples, got {n_samples}"
        )));
    }
    if q.len() != q_tags.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} moments vs {} tags",
            q.len(),
            q_tags.len()
        )));
    }
    check_1d(z.dim(), "mc_psi_oracle inducing inputs")?;
    let n = q.len();
    let m = z.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut sum0 = 0.0;
    let mut sumsq0 = 0.0;
    let mut sum1 = Mat::zeros(n, m);
    let mut sumsq1 = Mat::zeros(n, m);
    let mut sum2 = Mat::zeros(m, m);
    let mut sumsq2 = Mat::zeros(m, m);

    let mut krow = Mat::zeros(n, m);
    for _ in 0..n_samples {
        let mut t0 = 0.0;
        for ni in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let a = q.means[ni] + q.variances[ni].sqrt() * eps;
            t0 += kernel.eval(&[a], q_tags[ni], &[a], q_tags[ni])?;
            for i in 0..m {
                krow[(ni, i)] = kernel.eval(&[a], q_tags[ni], z.point(i), z.tag(i))?;
            }
        }
        sum0 += t0;
        sumsq0 += t0 * t0;
        for ni in 0..n {
            for i in 0..m {
                let v = krow[(ni, i)];
                sum1[(ni, i)] += v;
                sumsq1[(ni, i)] += v * v;
            }
        }
        for i in 0..m {
            for j in 0..=i {
                let mut t = 0.0;
                for ni in 0..n {
                    t += krow[(ni, i)] * krow[(ni, j)];
                }
                sum2[(i, j)] += t;
                sumsq2[(i, j)] += t * t;
            }
        }
    }

    let s = n_samples as f64;
    let mean_se = |sum: f64, sumsq: f64| {
        let mean = sum / s;
        let var = (sumsq / s - mean * mean).max(0.0);
        (mean, (var / s).sqrt())
    };

    let (psi0, se0) = mean_se(sum0, sumsq0);
    let mut psi1 = Mat::zeros(n, m);
    let mut se1 = Mat::zeros(n, m);
    for ni in 0..n {
        for i in 0..m {
            let (mv, se) = mean_se(sum1[(ni, i)], sumsq1[(ni, i)]);
            psi1[(ni, i)] = mv;
            se1[(ni, i)] = se;
        }
    }
    let mut psi2 = Mat::zeros(m, m);
    let mut se2 = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let (mv, se) = mean_se(sum2[(i, j)], sumsq2[(i, j)]);
            psi2[(i, j)] = mv;
            psi2[(j, i)] = mv;
            se2[(i, j)] = se;
            se2[(j, i)] = se;
        }
    }

    Ok(McPsi {
        estimate: PsiTriple { psi0, psi1: psi1.clone(), psi2: psi2.clone() },
        stderr: PsiTriple { psi0: se0, psi1: se1, psi2: se2 },
    })
}
