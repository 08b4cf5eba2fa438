//! Synthetic benchmark data and reference baseline models.
//!
//! The artificial task: a dampened sine as the shared latent function, read
//! through two outputs. Output 0 keeps its time axis but is squashed through
//! a sigmoid; output 1 reads the latent function on a quadratically warped
//! time axis but reports it unwarped. Each output has a held-out gap that the
//! other output covers, so a model can only predict into a gap by sharing
//! information across outputs.

use crate::model::{AmoGpModel, LabeledDataset, MiddleKind, ModelSpec, Series, WarpKind};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Generator settings for the artificial two-output dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_points: usize,
    pub noise_sd: f64,
    /// Test gap on output 0, as a sub-interval of [0, 1].
    pub gap_1: (f64, f64),
    /// Test gap on output 1.
    pub gap_2: (f64, f64),
    pub seed: u64,
    /// Exponential decay rate of the latent dampened sine.
    pub decay: f64,
    /// Angular frequency of the latent dampened sine.
    pub angular_frequency: f64,
    /// Slope of the sigmoid warping applied to output 0.
    pub sigmoid_slope: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_points: 500,
            noise_sd: 0.05,
            gap_1: (0.7, 0.8),
            gap_2: (0.35, 0.65),
            seed: 0,
            decay: 2.0,
            angular_frequency: 6.0 * std::f64::consts::PI,
            sigmoid_slope: 3.0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_points < 10 {
            return Err(Error::InvalidParameter(format!(
                "n_points {} below the minimum of 10",
                self.n_points
            )));
        }
        for (name, (lo, hi)) in [("gap_1", self.gap_1), ("gap_2", self.gap_2)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(Error::InvalidParameter(format!(
                    "{name} [{lo}, {hi}] is not a sub-interval of [0, 1]"
                )));
            }
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidParameter("noise_sd must be non-negative".into()));
        }
        Ok(())
    }

    /// The shared latent function `f(t) = exp(-c t) sin(w t)`.
    pub fn latent(&self, t: f64) -> f64 {
        (-self.decay * t).exp() * (self.angular_frequency * t).sin()
    }

    /// True alignment of output d: identity for output 0, quadratic for 1.
    pub fn alignment(&self, d: usize, t: f64) -> f64 {
        if d == 0 {
            t
        } else {
            t * t
        }
    }

    /// True warping of output d: sigmoid for output 0, identity for 1.
    pub fn warping(&self, d: usize, v: f64) -> f64 {
        if d == 0 {
            1.0 / (1.0 + (-self.sigmoid_slope * v).exp())
        } else {
            v
        }
    }

    /// Noiseless composite observed on output d at input t.
    pub fn composite(&self, d: usize, t: f64) -> f64 {
        self.warping(d, self.latent(self.alignment(d, t)))
    }
}

/// One generated output series with its ground truth decomposition.
#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Point lies inside this output's test gap.
    pub is_test: Vec<bool>,
    /// True aligned inputs a_d(x).
    pub aligned: Vec<f64>,
    /// True latent values f(a_d(x)).
    pub latent: Vec<f64>,
    /// Noiseless composite targets.
    pub clean: Vec<f64>,
}

/// The artificial dataset plus its generating functions.
#[derive(Debug, Clone)]
pub struct ArtificialDataset {
    pub spec: SyntheticSpec,
    pub outputs: Vec<SyntheticOutput>,
}

impl ArtificialDataset {
    fn subset(&self, test: bool) -> Result<LabeledDataset> {
        let series = self
            .outputs
            .iter()
            .map(|o| {
                let sel = |v: &[f64]| {
                    v.iter()
                        .zip(&o.is_test)
                        .filter(|(_, &t)| t == test)
                        .map(|(x, _)| *x)
                        .collect::<Vec<f64>>()
                };
                Series { x: sel(&o.x), y: sel(&o.y) }
            })
            .collect();
        LabeledDataset::new(series)
    }

    /// Points outside the gaps.
    pub fn train_data(&self) -> Result<LabeledDataset> {
        self.subset(false)
    }

    /// Points inside the gaps.
    pub fn test_data(&self) -> Result<LabeledDataset> {
        self.subset(true)
    }

    /// Per-output test masks against the full point set, in generation order.
    pub fn test_masks(&self) -> Vec<Vec<bool>> {
        self.outputs.iter().map(|o| o.is_test.clone()).collect()
    }

    /// The full dataset (train and test points together).
    pub fn full_data(&self) -> Result<LabeledDataset> {
        let series = self
            .outputs
            .iter()
            .map(|o| Series { x: o.x.clone(), y: o.y.clone() })
            .collect();
        LabeledDataset::new(series)
    }
}

/// Sample `n` inputs uniformly over [0, 1] with exactly `round(n * gap length)`
/// of them inside the gap, so the deterministic gap split always produces the
/// same train/test counts. The marginal distribution stays uniform because the
/// in-gap fraction matches the gap length.
fn stratified_inputs(rng: &mut ChaCha8Rng, n: usize, gap: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = gap;
    let len = hi - lo;
    let n_gap = (n as f64 * len).round() as usize;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n_gap {
        xs.push(lo + len * rng.gen::<f64>());
    }
    for _ in 0..n - n_gap {
        // uniform on [0,1] \ [lo, hi)
        let u = (1.0 - len) * rng.gen::<f64>();
        xs.push(if u < lo { u } else { u + len });
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs
}

/// Generate the two-output artificial dataset with ground truth.
pub fn generate_artificial(spec: &SyntheticSpec) -> Result<ArtificialDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut outputs = Vec::with_capacity(2);
    for (d, gap) in [(0usize, spec.gap_1), (1usize, spec.gap_2)] {
        let x = stratified_inputs(&mut rng, spec.n_points, gap);
        let aligned: Vec<f64> = x.iter().map(|&t| spec.alignment(d, t)).collect();
        let latent: Vec<f64> = aligned.iter().map(|&a| spec.latent(a)).collect();
        let clean: Vec<f64> = latent.iter().map(|&f| spec.warping(d, f)).collect();
        let y: Vec<f64> = clean
            .iter()
            .map(|&c| {
                let e: f64 = rng.sample(StandardNormal);
                c + spec.noise_sd * e
            })
            .collect();
        let is_test: Vec<bool> = x.iter().map(|&t| t >= gap.0 && t < gap.1).collect();
        outputs.push(SyntheticOutput { x, y, is_test, aligned, latent, clean });
    }
    Ok(ArtificialDataset { spec: spec.clone(), outputs })
}

/// Reference model families for the benchmark comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Independent per-output sparse GPs: one trainable layer each.
    ShallowGp,
    /// Multi-output GP: the shared convolution layer alone.
    MoGp,
    /// Per-output three-layer deep GPs with no cross-output coupling.
    Dgp3,
}

/// Structural spec of the full aligned model for this benchmark: output 0
/// keeps the identity alignment, the last output keeps the identity warping,
/// everything else is a trainable GP around the shared convolution layer.
pub fn amo_spec(outputs: usize) -> ModelSpec {
    let mut spec = ModelSpec::new(outputs);
    spec.align_frozen = (0..outputs).map(|d| d == 0).collect();
    spec.warpings =
        (0..outputs).map(|d| if d + 1 == outputs { WarpKind::FrozenIdentity } else { WarpKind::Gp }).collect();
    spec.inducing_align = 12;
    spec.inducing_middle = 24;
    spec.inducing_warp = 12;
    spec
}

/// Structural spec of a baseline with the same inducing budget as [`amo_spec`].
pub fn baseline_spec(kind: BaselineKind, outputs: usize) -> ModelSpec {
    let mut spec = amo_spec(outputs);
    match kind {
        BaselineKind::ShallowGp => {
            spec.align_frozen = vec![true; outputs];
            spec.middle = MiddleKind::IndependentRbf;
            spec.warpings = vec![WarpKind::FrozenIdentity; outputs];
        }
        BaselineKind::MoGp => {
            spec.align_frozen = vec![true; outputs];
            spec.middle = MiddleKind::SharedCp;
            spec.warpings = vec![WarpKind::FrozenIdentity; outputs];
        }
        BaselineKind::Dgp3 => {
            spec.align_frozen = vec![false; outputs];
            spec.middle = MiddleKind::IndependentRbf;
            spec.warpings = vec![WarpKind::Gp; outputs];
        }
    }
    spec
}

/// Build an initialized baseline model for a dataset.
pub fn make_baseline(kind: BaselineKind, data: &LabeledDataset) -> Result<AmoGpModel> {
    AmoGpModel::build(&baseline_spec(kind, data.outputs()), data)
}

/// Build the initialized aligned model for a dataset.
pub fn make_amo(data: &LabeledDataset) -> Result<AmoGpModel> {
    AmoGpModel::build(&amo_spec(data.outputs()), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{cp_cross_cov, gram, Kernel, OutputTaggedPoints};
    use crate::layer::{kl_gaussian, layer_marginal, LayerInput, LayerKernel};
    use crate::linalg::SymMatrix;
    use crate::model::gaussian_score;
    use crate::model::Middle;

    #[test]
    fn default_spec_produces_expected_split_sizes() {
        let data = generate_artificial(&SyntheticSpec::default()).unwrap();
        let train = data.train_data().unwrap();
        let test = data.test_data().unwrap();
        assert_eq!(train.series(0).x.len(), 450);
        assert_eq!(train.series(1).x.len(), 350);
        assert_eq!(test.series(0).x.len(), 50);
        assert_eq!(test.series(1).x.len(), 150);
        assert_eq!(data.full_data().unwrap().total_points(), 1000);
    }

    #[test]
    fn gap_membership_decides_the_split() {
        let spec = SyntheticSpec::default();
        let data = generate_artificial(&spec).unwrap();
        for (d, gap) in [(0, spec.gap_1), (1, spec.gap_2)] {
            let o = &data.outputs[d];
            for (i, &x) in o.x.iter().enumerate() {
                let inside = x >= gap.0 && x < gap.1;
                assert_eq!(o.is_test[i], inside, "output {d} point {x}");
            }
        }
    }

    #[test]
    fn zero_noise_targets_equal_the_composite() {
        let spec = SyntheticSpec { noise_sd: 0.0, ..SyntheticSpec::default() };
        let data = generate_artificial(&spec).unwrap();
        for (d, o) in data.outputs.iter().enumerate() {
            for i in 0..o.x.len() {
                assert_eq!(o.y[i], o.clean[i]);
                assert_eq!(o.clean[i], spec.composite(d, o.x[i]));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_artificial(&spec).unwrap();
        let b = generate_artificial(&spec).unwrap();
        for d in 0..2 {
            assert_eq!(a.outputs[d].x, b.outputs[d].x);
            assert_eq!(a.outputs[d].y, b.outputs[d].y);
        }
        let c = generate_artificial(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.outputs[0].x, c.outputs[0].x);
    }

    #[test]
    fn true_alignment_and_warping_are_monotone() {
        let spec = SyntheticSpec::default();
        let grid: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        for w in grid.windows(2) {
            assert!(spec.alignment(1, w[1]) >= spec.alignment(1, w[0]));
            let (a, b) = (4.0 * (w[0] - 0.5), 4.0 * (w[1] - 0.5));
            assert!(spec.warping(0, b) > spec.warping(0, a));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = SyntheticSpec::default();
        assert!(generate_artificial(&SyntheticSpec { n_points: 5, ..base.clone() }).is_err());
        assert!(
            generate_artificial(&SyntheticSpec { gap_2: (0.9, 0.2), ..base.clone() }).is_err()
        );
        assert!(generate_artificial(&SyntheticSpec { gap_1: (-0.1, 0.5), ..base }).is_err());
    }

    #[test]
    fn mo_gp_baseline_has_cross_output_coupling_and_dgp_has_none() {
        let data = generate_artificial(&SyntheticSpec::default()).unwrap();
        let train = data.train_data().unwrap();
        let mo = make_baseline(BaselineKind::MoGp, &train).unwrap();
        match &mo.middle {
            Middle::SharedCp { latent_processes, log_scales, log_lengthscales, .. } => {
                let mut p = crate::kernels::SmoothingKernelParams::new(2, *latent_processes, 1)
                    .unwrap();
                p.log_scales = log_scales.clone();
                p.log_lengthscales = log_lengthscales.clone();
                let c = cp_cross_cov(&[0.4], 0, &[0.4], 1, &p).unwrap();
                assert!(c.abs() > 1e-3, "cross-output prior covariance {c}");
            }
            _ => panic!("mo_gp must use the shared convolution layer"),
        }
        let dgp = make_baseline(BaselineKind::Dgp3, &train).unwrap();
        assert!(matches!(dgp.middle, Middle::IndependentRbf(_)));
    }

    #[test]
    fn shallow_baseline_elbo_equals_sum_of_svgp_bounds() {
        let data = generate_artificial(&SyntheticSpec {
            n_points: 30,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let train = data.train_data().unwrap();
        let mut spec = baseline_spec(BaselineKind::ShallowGp, 2);
        spec.inducing_middle = 8;
        let model = AmoGpModel::build(&spec, &train).unwrap();
        let eval = model.elbo(&train, None).unwrap();

        let mut expected = 0.0;
        for d in 0..2 {
            let (lspec, u) = model.middle_layer(d).unwrap();
            let sigma_y = model.likelihood_noise(d);
            let xs = &train.series(d).x;
            let pts = OutputTaggedPoints::new_1d(xs, &vec![0; xs.len()], 1).unwrap();
            let like = crate::layer::LayerSpec {
                kernel: lspec.kernel.clone(),
                mean: lspec.mean,
                log_noise: sigma_y.ln(),
            };
            let (marg, _) = layer_marginal(&like, &u, &LayerInput::Exact(&pts)).unwrap();
            for (i, &y) in train.series(d).y.iter().enumerate() {
                // latent middle noise joins the trace penalty, not the likelihood
                let s_pre = marg.variances[i] - sigma_y + lspec.noise_variance();
                expected += gaussian_score(y, marg.means[i], sigma_y) - 0.5 * s_pre / sigma_y;
            }
            let kern = match &lspec.kernel {
                LayerKernel::Rbf(p) => Kernel::Rbf(p),
                _ => unreachable!(),
            };
            let kuu = gram(u.z(), u.z(), kern).unwrap();
            let prior = SymMatrix::from_fn(u.len(), |i, j| 0.5 * (kuu[(i, j)] + kuu[(j, i)]));
            expected -= kl_gaussian(&u, &vec![0.0; u.len()], &prior).unwrap();
        }
        assert!(
            (eval.total - expected).abs() < 1e-6,
            "elbo {} vs summed svgp bounds {}",
            eval.total,
            expected
        );
    }
}
