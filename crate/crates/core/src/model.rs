//! The full aligned multi-output hierarchy.
//!
//! Per output d the chain is: alignment a_d (RBF, identity mean, or frozen to
//! the identity) → shared middle layer f (convolution-process multi-output
//! kernel with one output-tagged inducing block per output, or independent
//! RBF layers for the deep-GP baseline) → warping g_d (RBF with identity
//! mean, a trainable affine map, or frozen) → Gaussian likelihood.
//!
//! The evidence lower bound is assembled on the autodiff tape
//! ([`crate::tape`]): every Gaussian fit term, per-layer variance penalty and
//! KL divergence is a named node, so the term breakdown always sums exactly
//! to the total. Prediction, decomposition and sampling use the plain
//! layer-marginal path ([`crate::layer`]), which doubles as an independent
//! implementation of the same moment propagation.

use crate::kernels::{gram, Kernel, OutputTaggedPoints, RbfParams, SmoothingKernelParams};
use crate::layer::{
    layer_marginal, InducingSet, LayerInput, LayerKernel, LayerSpec, MeanFn,
};
use crate::linalg::{robust_cholesky, Mat, SymMatrix, JITTER};
use crate::psi::GaussianMoments;
use crate::tape::{NodeId, Tape};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// One observed output series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Per-output inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    series: Vec<Series>,
}

impl LabeledDataset {
    pub fn new(series: Vec<Series>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::InvalidParameter("dataset needs at least one output".into()));
        }
        for (d, s) in series.iter().enumerate() {
            if s.x.len() != s.y.len() {
                return Err(Error::DimensionMismatch(format!(
                    "output {d}: {} inputs vs {} targets",
                    s.x.len(),
                    s.y.len()
                )));
            }
            if s.x.iter().chain(&s.y).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("output {d} data")));
            }
        }
        Ok(LabeledDataset { series })
    }

    pub fn outputs(&self) -> usize {
        self.series.len()
    }

    pub fn series(&self, d: usize) -> &Series {
        &self.series[d]
    }

    pub fn total_points(&self) -> usize {
        self.series.iter().map(|s| s.x.len()).sum()
    }

    /// Global index offset of output d in the flattened point ordering.
    fn offset(&self, d: usize) -> usize {
        self.series[..d].iter().map(|s| s.x.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

/// Trainable state of one RBF GP layer.
///
/// The inducing posterior is whitened: with `L = chol(K_uu)` the actual
/// posterior is `mean(Z) + L m` with covariance `L F F^T L^T`, where `F` is
/// the unpacked `s_packed` factor. Whitening keeps the KL kernel-independent
/// and the optimization geometry well conditioned.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GpState {
    pub log_variance: f64,
    pub log_lengthscale: f64,
    pub log_noise: f64,
    pub z: Vec<f64>,
    pub m: Vec<f64>,
    /// Row-major packed lower triangle of the whitened factor; diagonal in
    /// log space.
    pub s_packed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Alignment {
    Frozen,
    Gp(GpState),
}

/// One inducing block of the shared CP layer.
/// `m` and `s_packed` are whitened against the joint CP prior: the actual
/// posterior over the concatenated inducing values is
/// `L m_joint, L blockdiag(F_d) (..)^T L^T` with `L = chol(K_joint)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CpBlock {
    pub z: Vec<f64>,
    pub m: Vec<f64>,
    pub s_packed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Middle {
    SharedCp {
        latent_processes: usize,
        log_scales: Vec<f64>,
        log_lengthscales: Vec<f64>,
        log_noise: f64,
        blocks: Vec<CpBlock>,
    },
    IndependentRbf(Vec<GpState>),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Warping {
    Frozen { log_noise: f64 },
    Linear { slope: f64, intercept: f64, log_noise: f64 },
    Gp(GpState),
}

/// Middle-layer flavor selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiddleKind {
    SharedCp,
    IndependentRbf,
}

/// Warping-layer flavor selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpKind {
    FrozenIdentity,
    Linear,
    Gp,
}

/// Structural description used to build a model against a dataset.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub align_frozen: Vec<bool>,
    pub middle: MiddleKind,
    pub warpings: Vec<WarpKind>,
    pub inducing_align: usize,
    pub inducing_middle: usize,
    pub inducing_warp: usize,
    pub latent_processes: usize,
    pub init_middle_lengthscale: f64,
    pub init_signal_variance: f64,
    pub init_latent_noise: f64,
    pub init_likelihood_noise: f64,
}

impl ModelSpec {
    /// Defaults for a given number of outputs: everything trainable, shared
    /// CP middle, 50 inducing points per layer.
    pub fn new(outputs: usize) -> Self {
        ModelSpec {
            align_frozen: vec![false; outputs],
            middle: MiddleKind::SharedCp,
            warpings: vec![WarpKind::Gp; outputs],
            inducing_align: 50,
            inducing_middle: 50,
            inducing_warp: 50,
            latent_processes: 1,
            init_middle_lengthscale: 0.1,
            init_signal_variance: 0.05,
            init_latent_noise: 1e-4,
            init_likelihood_noise: 1e-2,
        }
    }

    pub fn outputs(&self) -> usize {
        self.align_frozen.len()
    }
}

/// Parameter families, used for hyperpriors, schedule freezing, and the
/// gradient-check sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFamily {
    Lengthscale,
    SignalVariance,
    Noise,
    InducingInput,
    InducingMean,
    InducingCov,
    MeanCoeff,
    CpLengthscale,
    CpScale,
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub family: ParamFamily,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl ParamLayout {
    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// ELBO value with its exact per-term breakdown (signed contributions) and
/// the count of negative-variance clip events.
#[derive(Debug, Clone)]
pub struct ElboEval {
    pub total: f64,
    pub terms: Vec<(String, f64)>,
    pub clip_events: usize,
}

/// Predictive marginals without and with the likelihood noise.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub noiseless: GaussianMoments,
    pub noisy: GaussianMoments,
}

/// The three intermediate posteriors of the predict chain.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub alignment: GaussianMoments,
    pub shared: GaussianMoments,
    pub warping: GaussianMoments,
}

/// The full model.
#[derive(Debug, Clone, PartialEq)]
pub struct AmoGpModel {
    pub(crate) alignments: Vec<Alignment>,
    pub(crate) middle: Middle,
    pub(crate) warpings: Vec<Warping>,
}

fn equally_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let span = hi - lo;
    (0..n).map(|i| lo + span * i as f64 / (n - 1) as f64).collect()
}

fn packed_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Packed whitened factor `scale * I`: lower triangle row major, diagonal in
/// log space. The actual posterior covariance is `scale^2 K_uu`.
fn packed_scaled_identity(m: usize, scale: f64) -> Vec<f64> {
    let mut packed = vec![0.0; packed_len(m)];
    for i in packed_diag_indices(m) {
        packed[i] = scale.ln();
    }
    packed
}

/// Rebuild the lower-triangular factor from its packed form.
fn factor_from_packed(packed: &[f64], m: usize) -> Mat {
    let mut f = Mat::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in 0..=i {
            f[(i, j)] = if i == j { packed[k].exp() } else { packed[k] };
            k += 1;
        }
    }
    f
}

/// Indices of the (log-space) diagonal slots inside a packed factor.
fn packed_diag_indices(m: usize) -> Vec<usize> {
    (0..m).map(|i| i * (i + 1) / 2 + i).collect()
}

impl AmoGpModel {
    /// Build an initialized model for a dataset: inducing inputs equally
    /// spaced over the observed ranges, q(u) started near the prior
    /// (m = meanfn(Z), S = 0.01 K_uu).
    pub fn build(spec: &ModelSpec, data: &LabeledDataset) -> Result<Self> {
        let d_out = spec.outputs();
        if d_out == 0 || spec.warpings.len() != d_out {
            return Err(Error::InvalidParameter(
                "model spec needs matching alignment and warping counts".into(),
            ));
        }
        if data.outputs() != d_out {
            return Err(Error::DimensionMismatch(format!(
                "{} outputs in spec vs {} in data",
                d_out,
                data.outputs()
            )));
        }
        let ranges: Vec<(f64, f64)> = (0..d_out)
            .map(|d| {
                let xs = &data.series(d).x;
                let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect();

        // whitened m = 0 puts the posterior mean on the prior mean; a factor
        // of 0.1 I starts the posterior covariance at 0.01 K_uu
        let init_rbf_state = |z: Vec<f64>, variance: f64, lengthscale: f64, noise: f64| {
            GpState {
                log_variance: variance.ln(),
                log_lengthscale: lengthscale.ln(),
                log_noise: noise.ln(),
                m: vec![0.0; z.len()],
                s_packed: packed_scaled_identity(z.len(), 0.1),
                z,
            }
        };

        let mut alignments = Vec::with_capacity(d_out);
        for d in 0..d_out {
            if spec.align_frozen[d] {
                alignments.push(Alignment::Frozen);
            } else {
                let (lo, hi) = ranges[d];
                let z = equally_spaced(lo, hi, spec.inducing_align);
                // a third of the range: smooth enough to start near the
                // identity mean while keeping K_uu comfortably conditioned
                alignments.push(Alignment::Gp(init_rbf_state(
                    z,
                    spec.init_signal_variance,
                    ((hi - lo) / 3.0).max(1e-3),
                    spec.init_latent_noise,
                )));
            }
        }

        let middle = match spec.middle {
            MiddleKind::SharedCp => {
                let r = spec.latent_processes;
                let base_len = spec.init_middle_lengthscale;
                let mut blocks = Vec::with_capacity(d_out);
                for (d, &(lo, hi)) in ranges.iter().enumerate() {
                    let mut z = equally_spaced(lo, hi, spec.inducing_middle);
                    // stagger the tagged grids per output: coincident inducing
                    // inputs across strongly correlated blocks leave the joint
                    // prior close to singular
                    if spec.inducing_middle > 1 && d_out > 1 {
                        let step = (hi - lo) / (spec.inducing_middle - 1) as f64;
                        let shift =
                            step * (d as f64 + 0.5 - 0.5 * d_out as f64) / d_out as f64;
                        for zi in &mut z {
                            *zi += shift;
                        }
                    }
                    blocks.push(CpBlock {
                        m: vec![0.0; z.len()],
                        s_packed: packed_scaled_identity(z.len(), 0.1),
                        z,
                    });
                }
                let mut params = SmoothingKernelParams::new(d_out, r, 1)?;
                for i in 0..d_out * r {
                    // stagger the smoothing filters per (output, latent) slot:
                    // identical filters make the joint prior exactly singular
                    let len = base_len * 1.4f64.powi(i as i32);
                    // scale chosen so the same-output prior variance is about 1
                    let scale =
                        (1.0 / (2.0 * std::f64::consts::PI.sqrt() * len * r as f64)).sqrt();
                    params.log_lengthscales[i] = len.ln();
                    params.log_scales[i] = scale.ln();
                }
                Middle::SharedCp {
                    latent_processes: r,
                    log_scales: params.log_scales,
                    log_lengthscales: params.log_lengthscales,
                    log_noise: spec.init_latent_noise.ln(),
                    blocks,
                }
            }
            MiddleKind::IndependentRbf => {
                let mut layers = Vec::with_capacity(d_out);
                for &(lo, hi) in &ranges {
                    let z = equally_spaced(lo, hi, spec.inducing_middle);
                    layers.push(init_rbf_state(
                        z,
                        1.0,
                        spec.init_middle_lengthscale,
                        spec.init_latent_noise,
                    ));
                }
                Middle::IndependentRbf(layers)
            }
        };

        let mut warpings = Vec::with_capacity(d_out);
        for d in 0..d_out {
            match spec.warpings[d] {
                WarpKind::FrozenIdentity => warpings.push(Warping::Frozen {
                    log_noise: spec.init_likelihood_noise.ln(),
                }),
                WarpKind::Linear => warpings.push(Warping::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                    log_noise: spec.init_likelihood_noise.ln(),
                }),
                WarpKind::Gp => {
                    // the warping input is the middle-layer output; its scale
                    // is about the middle-layer prior standard deviation
                    let z = equally_spaced(-2.0, 2.0, spec.inducing_warp);
                    warpings.push(Warping::Gp(init_rbf_state(
                        z,
                        spec.init_signal_variance,
                        1.0,
                        spec.init_likelihood_noise,
                    )));
                }
            }
        }

        Ok(AmoGpModel { alignments, middle, warpings })
    }

    pub fn outputs(&self) -> usize {
        self.alignments.len()
    }

    fn middle_is_last_gp(&self, d: usize) -> bool {
        !matches!(self.warpings[d], Warping::Gp(_))
    }

    // -- parameter flattening ---------------------------------------------

    /// Walk every trainable segment in a fixed order.
    fn visit_segments(&self, f: &mut dyn FnMut(String, ParamFamily, &[f64])) {
        use ParamFamily::*;
        let gp = |f: &mut dyn FnMut(String, ParamFamily, &[f64]), prefix: &str, g: &GpState| {
            f(format!("{prefix}.log_variance"), SignalVariance, &[g.log_variance]);
            f(format!("{prefix}.log_lengthscale"), Lengthscale, &[g.log_lengthscale]);
            f(format!("{prefix}.log_noise"), Noise, &[g.log_noise]);
            f(format!("{prefix}.z"), InducingInput, &g.z);
            f(format!("{prefix}.m"), InducingMean, &g.m);
            f(format!("{prefix}.s_packed"), InducingCov, &g.s_packed);
        };
        for (d, a) in self.alignments.iter().enumerate() {
            if let Alignment::Gp(g) = a {
                gp(f, &format!("align{d}"), g);
            }
        }
        match &self.middle {
            Middle::SharedCp { log_scales, log_lengthscales, log_noise, blocks, .. } => {
                f("middle.log_scales".into(), CpScale, log_scales);
                f("middle.log_lengthscales".into(), CpLengthscale, log_lengthscales);
                f("middle.log_noise".into(), Noise, &[*log_noise]);
                for (d, b) in blocks.iter().enumerate() {
                    f(format!("middle{d}.z"), InducingInput, &b.z);
                    f(format!("middle{d}.m"), InducingMean, &b.m);
                    f(format!("middle{d}.s_packed"), InducingCov, &b.s_packed);
                }
            }
            Middle::IndependentRbf(layers) => {
                for (d, g) in layers.iter().enumerate() {
                    gp(f, &format!("middle{d}"), g);
                }
            }
        }
        for (d, w) in self.warpings.iter().enumerate() {
            match w {
                Warping::Frozen { log_noise } => {
                    f(format!("warp{d}.log_noise"), Noise, &[*log_noise]);
                }
                Warping::Linear { slope, intercept, log_noise } => {
                    f(format!("warp{d}.slope"), MeanCoeff, &[*slope]);
                    f(format!("warp{d}.intercept"), MeanCoeff, &[*intercept]);
                    f(format!("warp{d}.log_noise"), Noise, &[*log_noise]);
                }
                Warping::Gp(g) => gp(f, &format!("warp{d}"), g),
            }
        }
    }

    pub fn param_layout(&self) -> ParamLayout {
        let mut segments = Vec::new();
        let mut total = 0;
        self.visit_segments(&mut |name, family, vals| {
            segments.push(Segment { name, family, offset: total, len: vals.len() });
            total += vals.len();
        });
        ParamLayout { segments, total }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_segments(&mut |_, _, vals| out.extend_from_slice(vals));
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let layout = self.param_layout();
        if flat.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters given, model has {}",
                flat.len(),
                layout.total
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        let mut cursor = 0;
        let mut take = |len: usize| {
            let s = &flat[cursor..cursor + len];
            cursor += len;
            s
        };
        let set_gp = |g: &mut GpState, take: &mut dyn FnMut(usize) -> Vec<f64>| {
            g.log_variance = take(1)[0];
            g.log_lengthscale = take(1)[0];
            g.log_noise = take(1)[0];
            let m = g.z.len();
            g.z = take(m);
            g.m = take(m);
            g.s_packed = take(packed_len(m));
        };
        let mut take_vec = |len: usize| take(len).to_vec();
        for a in self.alignments.iter_mut() {
            if let Alignment::Gp(g) = a {
                set_gp(g, &mut take_vec);
            }
        }
        match &mut self.middle {
            Middle::SharedCp { log_scales, log_lengthscales, log_noise, blocks, .. } => {
                *log_scales = take_vec(log_scales.len());
                *log_lengthscales = take_vec(log_lengthscales.len());
                *log_noise = take_vec(1)[0];
                for b in blocks.iter_mut() {
                    let m = b.z.len();
                    b.z = take_vec(m);
                    b.m = take_vec(m);
                    b.s_packed = take_vec(packed_len(m));
                }
            }
            Middle::IndependentRbf(layers) => {
                for g in layers.iter_mut() {
                    set_gp(g, &mut take_vec);
                }
            }
        }
        for w in self.warpings.iter_mut() {
            match w {
                Warping::Frozen { log_noise } => *log_noise = take_vec(1)[0],
                Warping::Linear { slope, intercept, log_noise } => {
                    *slope = take_vec(1)[0];
                    *intercept = take_vec(1)[0];
                    *log_noise = take_vec(1)[0];
                }
                Warping::Gp(g) => set_gp(g, &mut take_vec),
            }
        }
        debug_assert_eq!(cursor, flat.len());
        Ok(())
    }

    // -- ELBO ----------------------------------------------------------------

    /// Evaluate the bound (optionally on a minibatch given by global point
    /// indices, with data-sum terms rescaled by N/|batch|).
    pub fn elbo(&self, data: &LabeledDataset, batch: Option<&[usize]>) -> Result<ElboEval> {
        let asm = self.assemble(data, batch)?;
        Ok(asm.eval())
    }

    /// Bound plus its gradient with respect to the flat parameter vector.
    pub fn elbo_with_grad(
        &self,
        data: &LabeledDataset,
        batch: Option<&[usize]>,
    ) -> Result<(ElboEval, Vec<f64>)> {
        let asm = self.assemble(data, batch)?;
        let eval = asm.eval();
        let grads = asm.tape.backward(asm.root);
        let mut flat = Vec::new();
        for &(_, id) in &asm.leaves {
            flat.extend_from_slice(grads.wrt(id).data());
        }
        Ok((eval, flat))
    }

    fn assemble(&self, data: &LabeledDataset, batch: Option<&[usize]>) -> Result<Assembly> {
        let d_out = self.outputs();
        if data.outputs() != d_out {
            return Err(Error::DimensionMismatch(format!(
                "model has {} outputs, data has {}",
                d_out,
                data.outputs()
            )));
        }
        let n_total = data.total_points();
        // per-output point index lists for this batch
        let mut idx: Vec<Vec<usize>> = vec![Vec::new(); d_out];
        let scale = match batch {
            None => {
                for d in 0..d_out {
                    idx[d] = (0..data.series(d).x.len()).collect();
                }
                1.0
            }
            Some(b) => {
                if b.is_empty() {
                    return Err(Error::InvalidParameter("empty batch".into()));
                }
                for &g in b {
                    if g >= n_total {
                        return Err(Error::InvalidParameter(format!(
                            "batch index {g} out of range for {n_total} points"
                        )));
                    }
                    let mut d = 0;
                    while g >= data.offset(d) + data.series(d).x.len() {
                        d += 1;
                    }
                    idx[d].push(g - data.offset(d));
                }
                n_total as f64 / b.len() as f64
            }
        };

        let mut tape = Tape::new();
        let mut leaves: Vec<(String, NodeId)> = Vec::new();
        self.visit_segments(&mut |name, _, vals| {
            let id = tape.input(Mat::column(vals));
            leaves.push((name, id));
        });
        let node = |leaves: &[(String, NodeId)], name: &str| -> NodeId {
            leaves
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("unknown parameter segment {name}"))
                .1
        };

        let mut terms: Vec<(String, NodeId)> = Vec::new();
        let mut clip_events = 0usize;

        // -- per-layer posterior assembly helper (whitened q) --
        // q(u) = N(mean(Z) + L m_w, L F F^T L^T) with L = chol(K_uu), so
        // KL is kernel-free, beta = K^{-1}(m - mean(Z)) = L^{-T} m_w, and
        // K^{-1} S K^{-1} = (L^{-T} F)(L^{-T} F)^T.
        struct Posterior {
            beta: NodeId,
            w: NodeId,
            kl: NodeId,
        }
        let posterior = |tape: &mut Tape,
                         kuu: NodeId,
                         factor: NodeId,
                         m_w: NodeId,
                         logdet_s: NodeId,
                         m_dim: usize|
         -> Result<Posterior> {
            let l = tape.cholesky(kuu, JITTER)?;
            // KL(q || prior) = 0.5 (||F||^2 + ||m_w||^2 - M - log det F F^T)
            let fsq = tape.mul_elem(factor, factor);
            let tr = tape.sum(fsq);
            let msq = tape.mul_elem(m_w, m_w);
            let quad = tape.sum(msq);
            let mut kl = tape.add(tr, quad);
            kl = tape.sub(kl, logdet_s);
            kl = tape.add_const(kl, -(m_dim as f64));
            kl = tape.scale_const(kl, 0.5);
            // posterior weights
            let eye = tape.constant(Mat::identity(m_dim));
            let linv = tape.tri_solve_lower(l, eye);
            let linv_t = tape.transpose(linv);
            let kinv = tape.matmul(linv_t, linv);
            let beta = tape.tri_solve_lower_t(l, m_w);
            let c = tape.tri_solve_lower_t(l, factor);
            let ct = tape.transpose(c);
            let gsg = tape.matmul(c, ct);
            let beta_t = tape.transpose(beta);
            let bbt = tape.matmul(beta, beta_t);
            let mut w = tape.sub(bbt, kinv);
            w = tape.add(w, gsg);
            Ok(Posterior { beta, w, kl })
        };
        let half_penalty = |tape: &mut Tape, s_vec: NodeId, log_noise: NodeId, scale: f64| {
            let total = tape.sum(s_vec);
            let neg = tape.neg(log_noise);
            let inv = tape.exp_elem(neg);
            let p = tape.scale_by(inv, total);
            tape.scale_const(p, -0.5 * scale)
        };

        // -- alignment layers: produce middle-layer input moments per output --
        let mut mid_mu: Vec<Option<NodeId>> = vec![None; d_out];
        let mut mid_s: Vec<Option<NodeId>> = vec![None; d_out];
        for d in 0..d_out {
            let has_data = !idx[d].is_empty();
            match &self.alignments[d] {
                Alignment::Frozen => {
                    if has_data {
                        let xb: Vec<f64> =
                            idx[d].iter().map(|&i| data.series(d).x[i]).collect();
                        mid_mu[d] = Some(tape.constant(Mat::column(&xb)));
                        mid_s[d] = Some(tape.constant(Mat::zeros(xb.len(), 1)));
                    }
                }
                Alignment::Gp(g) => {
                    let prefix = format!("align{d}");
                    let lv = node(&leaves, &format!("{prefix}.log_variance"));
                    let ll = node(&leaves, &format!("{prefix}.log_lengthscale"));
                    let ln = node(&leaves, &format!("{prefix}.log_noise"));
                    let z = node(&leaves, &format!("{prefix}.z"));
                    let m = node(&leaves, &format!("{prefix}.m"));
                    let packed = node(&leaves, &format!("{prefix}.s_packed"));
                    let mdim = g.z.len();
                    let kuu = tape.rbf_gram_zz(z, lv, ll);
                    let factor = tape.lower_from_packed(packed, mdim);
                    let ld_half = tape.sum_indices(packed, packed_diag_indices(mdim));
                    let logdet_s = tape.scale_const(ld_half, 2.0);
                    let post = posterior(&mut tape, kuu, factor, m, logdet_s, mdim)?;
                    let neg_kl = tape.neg(post.kl);
                    terms.push((format!("align_kl[{d}]"), neg_kl));
                    if has_data {
                        let xb: Vec<f64> =
                            idx[d].iter().map(|&i| data.series(d).x[i]).collect();
                        let psi1 = tape.rbf_gram_xz(&xb, z, lv, ll);
                        let proj = tape.matmul(psi1, post.beta);
                        let quad = tape.row_quad_form(psi1, post.w);
                        let var = tape.exp_elem(lv);
                        let ones = tape.constant(Mat::from_fn(xb.len(), 1, |_, _| 1.0));
                        let psi0 = tape.scale_by(var, ones);
                        let projsq = tape.mul_elem(proj, proj);
                        let t = tape.add(psi0, quad);
                        let s_pre = tape.sub(t, projsq);
                        clip_events +=
                            tape.value(s_pre).data().iter().filter(|v| **v < 0.0).count();
                        let s_clip = tape.clip_min(s_pre, 0.0);
                        let pen = half_penalty(&mut tape, s_clip, ln, scale);
                        terms.push((format!("align_penalty[{d}]"), pen));
                        let xc = tape.constant(Mat::column(&xb));
                        let mu_out = tape.add(xc, proj);
                        let noise = tape.exp_elem(ln);
                        let s_out = tape.add_broadcast(s_clip, noise);
                        mid_mu[d] = Some(mu_out);
                        mid_s[d] = Some(s_out);
                    }
                }
            }
        }

        // -- middle layer: per-output function moments --
        let mut f_mu: Vec<Option<NodeId>> = vec![None; d_out];
        let mut f_s_pre: Vec<Option<NodeId>> = vec![None; d_out];
        let mut f_noise: Vec<Option<NodeId>> = vec![None; d_out];
        match &self.middle {
            Middle::SharedCp { latent_processes, blocks, .. } => {
                let r = *latent_processes;
                let ls = node(&leaves, "middle.log_scales");
                let ll = node(&leaves, "middle.log_lengthscales");
                let ln = node(&leaves, "middle.log_noise");
                let z_nodes: Vec<NodeId> = (0..d_out)
                    .map(|d| node(&leaves, &format!("middle{d}.z")))
                    .collect();
                let m_nodes: Vec<NodeId> = (0..d_out)
                    .map(|d| node(&leaves, &format!("middle{d}.m")))
                    .collect();
                let z_joint = tape.concat_rows(&z_nodes);
                let m_joint = tape.concat_rows(&m_nodes);
                let mut ztags = Vec::new();
                for (d, b) in blocks.iter().enumerate() {
                    ztags.extend(std::iter::repeat(d).take(b.z.len()));
                }
                let m_dim = ztags.len();
                let factors: Vec<NodeId> = (0..d_out)
                    .map(|d| {
                        let p = node(&leaves, &format!("middle{d}.s_packed"));
                        tape.lower_from_packed(p, blocks[d].z.len())
                    })
                    .collect();
                let factor = tape.block_diag(&factors);
                let mut logdet_s = tape.constant_scalar(0.0);
                for (d, b) in blocks.iter().enumerate() {
                    let p = node(&leaves, &format!("middle{d}.s_packed"));
                    let half = tape.sum_indices(p, packed_diag_indices(b.z.len()));
                    let twice = tape.scale_const(half, 2.0);
                    logdet_s = tape.add(logdet_s, twice);
                }
                let kuu = tape.cp_gram_zz(z_joint, &ztags, ls, ll, d_out, r);
                let post = posterior(&mut tape, kuu, factor, m_joint, logdet_s, m_dim)?;
                let neg_kl = tape.neg(post.kl);
                terms.push(("middle_kl".into(), neg_kl));

                // joint batched inputs
                let present: Vec<usize> = (0..d_out).filter(|&d| !idx[d].is_empty()).collect();
                if !present.is_empty() {
                    let mu_parts: Vec<NodeId> =
                        present.iter().map(|&d| mid_mu[d].unwrap()).collect();
                    let s_parts: Vec<NodeId> =
                        present.iter().map(|&d| mid_s[d].unwrap()).collect();
                    let mu_joint = tape.concat_rows(&mu_parts);
                    let s_joint = tape.concat_rows(&s_parts);
                    let mut tags = Vec::new();
                    let mut ranges = Vec::new();
                    for &d in &present {
                        let start = tags.len();
                        tags.extend(std::iter::repeat(d).take(idx[d].len()));
                        ranges.push((d, start..tags.len()));
                    }
                    let psi0 = tape.cp_psi0(&tags, ls, ll, d_out, r);
                    let psi1 =
                        tape.cp_psi1(mu_joint, s_joint, &tags, z_joint, &ztags, ls, ll, d_out, r);
                    let quad = tape.cp_psi_quad(
                        mu_joint, s_joint, &tags, z_joint, &ztags, ls, ll, d_out, r, post.w,
                    );
                    let proj = tape.matmul(psi1, post.beta);
                    let projsq = tape.mul_elem(proj, proj);
                    let t = tape.add(psi0, quad);
                    let s_pre = tape.sub(t, projsq);
                    clip_events +=
                        tape.value(s_pre).data().iter().filter(|v| **v < 0.0).count();
                    let s_clip = tape.clip_min(s_pre, 0.0);
                    for (d, range) in ranges {
                        let sel: Vec<usize> = range.collect();
                        let mu_d = tape.gather(proj, sel.clone());
                        let s_d = tape.gather(s_clip, sel);
                        if !self.middle_is_last_gp(d) {
                            let pen = half_penalty(&mut tape, s_d, ln, scale);
                            terms.push((format!("middle_penalty[{d}]"), pen));
                        }
                        f_mu[d] = Some(mu_d);
                        f_s_pre[d] = Some(s_d);
                        f_noise[d] = Some(ln);
                    }
                }
            }
            Middle::IndependentRbf(layers) => {
                for (d, g) in layers.iter().enumerate() {
                    let prefix = format!("middle{d}");
                    let lv = node(&leaves, &format!("{prefix}.log_variance"));
                    let ll = node(&leaves, &format!("{prefix}.log_lengthscale"));
                    let ln = node(&leaves, &format!("{prefix}.log_noise"));
                    let z = node(&leaves, &format!("{prefix}.z"));
                    let m = node(&leaves, &format!("{prefix}.m"));
                    let packed = node(&leaves, &format!("{prefix}.s_packed"));
                    let mdim = g.z.len();
                    let kuu = tape.rbf_gram_zz(z, lv, ll);
                    let factor = tape.lower_from_packed(packed, mdim);
                    let ld_half = tape.sum_indices(packed, packed_diag_indices(mdim));
                    let logdet_s = tape.scale_const(ld_half, 2.0);
                    let post = posterior(&mut tape, kuu, factor, m, logdet_s, mdim)?;
                    let neg_kl = tape.neg(post.kl);
                    terms.push((format!("middle_kl[{d}]"), neg_kl));
                    if !idx[d].is_empty() {
                        let mu_in = mid_mu[d].unwrap();
                        let s_in = mid_s[d].unwrap();
                        let nb = idx[d].len();
                        let psi1 = tape.rbf_psi1(mu_in, s_in, z, lv, ll);
                        let quad = tape.rbf_psi_quad(mu_in, s_in, z, lv, ll, post.w);
                        let var = tape.exp_elem(lv);
                        let ones = tape.constant(Mat::from_fn(nb, 1, |_, _| 1.0));
                        let psi0 = tape.scale_by(var, ones);
                        let proj = tape.matmul(psi1, post.beta);
                        let projsq = tape.mul_elem(proj, proj);
                        let t = tape.add(psi0, quad);
                        let s_pre = tape.sub(t, projsq);
                        clip_events +=
                            tape.value(s_pre).data().iter().filter(|v| **v < 0.0).count();
                        let s_clip = tape.clip_min(s_pre, 0.0);
                        if !self.middle_is_last_gp(d) {
                            let pen = half_penalty(&mut tape, s_clip, ln, scale);
                            terms.push((format!("middle_penalty[{d}]"), pen));
                        }
                        f_mu[d] = Some(proj);
                        f_s_pre[d] = Some(s_clip);
                        f_noise[d] = Some(ln);
                    }
                }
            }
        }

        // -- warping layers and likelihood fit per output --
        for d in 0..d_out {
            // KL terms exist regardless of batch content
            if let Warping::Gp(g) = &self.warpings[d] {
                let prefix = format!("warp{d}");
                let lv = node(&leaves, &format!("{prefix}.log_variance"));
                let ll = node(&leaves, &format!("{prefix}.log_lengthscale"));
                let ln = node(&leaves, &format!("{prefix}.log_noise"));
                let z = node(&leaves, &format!("{prefix}.z"));
                let m = node(&leaves, &format!("{prefix}.m"));
                let packed = node(&leaves, &format!("{prefix}.s_packed"));
                let mdim = g.z.len();
                let kuu = tape.rbf_gram_zz(z, lv, ll);
                let factor = tape.lower_from_packed(packed, mdim);
                let ld_half = tape.sum_indices(packed, packed_diag_indices(mdim));
                let logdet_s = tape.scale_const(ld_half, 2.0);
                let post = posterior(&mut tape, kuu, factor, m, logdet_s, mdim)?;
                let neg_kl = tape.neg(post.kl);
                terms.push((format!("warp_kl[{d}]"), neg_kl));

                if !idx[d].is_empty() {
                    let mu_f = f_mu[d].unwrap();
                    let s_f_pre = f_s_pre[d].unwrap();
                    let noise_f = {
                        let lnf = f_noise[d].unwrap();
                        tape.exp_elem(lnf)
                    };
                    let mu_in = mu_f;
                    let s_in = tape.add_broadcast(s_f_pre, noise_f);
                    let nb = idx[d].len();
                    let psi1 = tape.rbf_psi1(mu_in, s_in, z, lv, ll);
                    let quad = tape.rbf_psi_quad(mu_in, s_in, z, lv, ll, post.w);
                    let lin = tape.rbf_psi1_lin(mu_in, s_in, z, lv, ll, post.beta);
                    let var = tape.exp_elem(lv);
                    let ones = tape.constant(Mat::from_fn(nb, 1, |_, _| 1.0));
                    let psi0 = tape.scale_by(var, ones);
                    let proj = tape.matmul(psi1, post.beta);
                    let projsq = tape.mul_elem(proj, proj);
                    // identity-mean cross terms: s_in + 2 (lin - mu_in * proj)
                    let mp = tape.mul_elem(mu_in, proj);
                    let cross = tape.sub(lin, mp);
                    let cross2 = tape.scale_const(cross, 2.0);
                    let meanvar = tape.add(s_in, cross2);
                    let mut s_pre = tape.add(psi0, quad);
                    s_pre = tape.sub(s_pre, projsq);
                    s_pre = tape.add(s_pre, meanvar);
                    clip_events +=
                        tape.value(s_pre).data().iter().filter(|v| **v < 0.0).count();
                    let s_clip = tape.clip_min(s_pre, 0.0);
                    let mu_y = tape.add(mu_in, proj);
                    let fit = likelihood_fit(
                        &mut tape,
                        data,
                        &idx[d],
                        d,
                        mu_y,
                        s_clip,
                        ln,
                        scale,
                    );
                    terms.push((format!("fit[{d}]"), fit));
                }
            } else if !idx[d].is_empty() {
                // frozen or linear warping: middle layer is the last GP;
                // its own noise folds into the likelihood penalty
                let mu_f = f_mu[d].unwrap();
                let s_f_pre = f_s_pre[d].unwrap();
                let lnf = f_noise[d].unwrap();
                let noise_f = tape.exp_elem(lnf);
                let s_total = tape.add_broadcast(s_f_pre, noise_f);
                let (mu_y, s_y, ln_y) = match &self.warpings[d] {
                    Warping::Frozen { .. } => {
                        (mu_f, s_total, node(&leaves, &format!("warp{d}.log_noise")))
                    }
                    Warping::Linear { .. } => {
                        let a = node(&leaves, &format!("warp{d}.slope"));
                        let b = node(&leaves, &format!("warp{d}.intercept"));
                        let ln_y = node(&leaves, &format!("warp{d}.log_noise"));
                        let scaled = tape.scale_by(a, mu_f);
                        let mu_y = tape.add_broadcast(scaled, b);
                        let asq = tape.mul_elem(a, a);
                        let s_y = tape.scale_by(asq, s_total);
                        (mu_y, s_y, ln_y)
                    }
                    Warping::Gp(_) => unreachable!(),
                };
                let fit = likelihood_fit(&mut tape, data, &idx[d], d, mu_y, s_y, ln_y, scale);
                terms.push((format!("fit[{d}]"), fit));
            }
        }

        // total = sum of the signed terms, in breakdown order
        let mut root = tape.constant_scalar(0.0);
        for &(_, id) in &terms {
            root = tape.add(root, id);
        }
        if !tape.scalar(root).is_finite() {
            return Err(Error::NonFinite("bound evaluation".into()));
        }
        Ok(Assembly { tape, root, terms, leaves, clip_events })
    }

    // -- plain prediction path ----------------------------------------------

    pub(crate) fn alignment_layer(&self, d: usize) -> Result<Option<(LayerSpec, InducingSet)>> {
        match &self.alignments[d] {
            Alignment::Frozen => Ok(None),
            Alignment::Gp(g) => Ok(Some(rbf_layer_pieces(g, MeanFn::Identity)?)),
        }
    }

    /// The middle layer as seen from output d: the joint tagged inducing set
    /// for the shared CP kernel, or the per-output RBF layer.
    pub(crate) fn middle_layer(&self, _d: usize) -> Result<(LayerSpec, InducingSet)> {
        match &self.middle {
            Middle::SharedCp {
                latent_processes,
                log_scales,
                log_lengthscales,
                log_noise,
                blocks,
            } => {
                let d_out = blocks.len();
                let mut params = SmoothingKernelParams::new(d_out, *latent_processes, 1)?;
                params.log_scales = log_scales.clone();
                params.log_lengthscales = log_lengthscales.clone();
                let mut coords = Vec::new();
                let mut tags = Vec::new();
                let mut m = Vec::new();
                for (d, b) in blocks.iter().enumerate() {
                    coords.extend_from_slice(&b.z);
                    tags.extend(std::iter::repeat(d).take(b.z.len()));
                    m.extend_from_slice(&b.m);
                }
                let z = OutputTaggedPoints::new_1d(&coords, &tags, d_out)?;
                let total = coords.len();
                let mut white = Mat::zeros(total, total);
                let mut off = 0;
                for b in blocks {
                    let f = factor_from_packed(&b.s_packed, b.z.len());
                    for i in 0..b.z.len() {
                        for j in 0..=i {
                            white[(off + i, off + j)] = f[(i, j)];
                        }
                    }
                    off += b.z.len();
                }
                // de-whiten against the joint prior
                let kuu = gram(&z, &z, Kernel::Cp(&params))?;
                let sym = SymMatrix::from_fn(total, |i, j| 0.5 * (kuu[(i, j)] + kuu[(j, i)]));
                let l = robust_cholesky(&sym, JITTER)?.l;
                let factor = l.matmul(&white);
                let mut m_actual = vec![0.0; total];
                for i in 0..total {
                    for j in 0..=i {
                        m_actual[i] += l[(i, j)] * m[j];
                    }
                }
                let spec = LayerSpec {
                    kernel: LayerKernel::Cp(params),
                    mean: MeanFn::Zero,
                    log_noise: *log_noise,
                };
                Ok((spec, InducingSet::new(z, m_actual, factor)?))
            }
            Middle::IndependentRbf(layers) => rbf_layer_pieces(&layers[_d], MeanFn::Zero),
        }
    }

    pub(crate) fn warping_gp_layer(&self, d: usize) -> Result<Option<(LayerSpec, InducingSet)>> {
        match &self.warpings[d] {
            Warping::Gp(g) => Ok(Some(rbf_layer_pieces(g, MeanFn::Identity)?)),
            _ => Ok(None),
        }
    }

    pub fn likelihood_noise(&self, d: usize) -> f64 {
        match &self.warpings[d] {
            Warping::Frozen { log_noise }
            | Warping::Linear { log_noise, .. }
            | Warping::Gp(GpState { log_noise, .. }) => log_noise.exp(),
        }
    }

    fn propagate(&self, xs: &[f64], d: usize) -> Result<Decomposition> {
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction inputs".into()));
        }
        let points = OutputTaggedPoints::new_1d(xs, &vec![0; xs.len()], 1)?;
        // alignment
        let alignment = match self.alignment_layer(d)? {
            None => GaussianMoments::exact(xs),
            Some((spec, u)) => layer_marginal(&spec, &u, &LayerInput::Exact(&points))?.0,
        };
        // shared/middle
        let tags = vec![d; xs.len()];
        let (mspec, mu) = self.middle_layer(d)?;
        let shared = layer_marginal(
            &mspec,
            &mu,
            &LayerInput::Moments { q: &alignment, tags: &tags },
        )?
        .0;
        // warping (noiseless: likelihood noise excluded)
        let warping = match &self.warpings[d] {
            Warping::Frozen { .. } => shared.clone(),
            Warping::Linear { slope, intercept, .. } => GaussianMoments::new(
                shared.means.iter().map(|m| slope * m + intercept).collect(),
                shared.variances.iter().map(|s| slope * slope * s).collect(),
            )?,
            Warping::Gp(g) => {
                let mut spec = rbf_layer_pieces(g, MeanFn::Identity)?;
                spec.0.log_noise = f64::NEG_INFINITY; // exclude likelihood noise
                let wtags = vec![0; xs.len()];
                layer_marginal(
                    &spec.0,
                    &spec.1,
                    &LayerInput::Moments { q: &shared, tags: &wtags },
                )?
                .0
            }
        };
        Ok(Decomposition { alignment, shared, warping })
    }

    /// Predictive moments for output d at the given inputs.
    pub fn predict(&self, xs: &[f64], d: usize) -> Result<Prediction> {
        if d >= self.outputs() {
            return Err(Error::InvalidOutputIndex { index: d, outputs: self.outputs() });
        }
        let dec = self.propagate(xs, d)?;
        let noise = self.likelihood_noise(d);
        let noisy = GaussianMoments::new(
            dec.warping.means.clone(),
            dec.warping.variances.iter().map(|v| v + noise).collect(),
        )?;
        Ok(Prediction { noiseless: dec.warping, noisy })
    }

    /// The intermediate posteriors of the predict chain.
    pub fn decompose(&self, xs: &[f64], d: usize) -> Result<Decomposition> {
        if d >= self.outputs() {
            return Err(Error::InvalidOutputIndex { index: d, outputs: self.outputs() });
        }
        self.propagate(xs, d)
    }

    /// Draw joint function samples for output d: fresh u ~ q(u) per layer and
    /// per sample, propagated through each layer's exact Gaussian conditional.
    /// Latent layer noises are included; the likelihood noise is not.
    pub fn sample_functions(
        &self,
        xs: &[f64],
        d: usize,
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        if d >= self.outputs() {
            return Err(Error::InvalidOutputIndex { index: d, outputs: self.outputs() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_samples);
        let align = self.alignment_layer(d)?;
        let (mspec, mu_set) = self.middle_layer(d)?;
        let warp = self.warping_gp_layer(d)?;
        for _ in 0..n_samples {
            let mut cur = xs.to_vec();
            if let Some((spec, u)) = &align {
                cur = sample_layer(&mut rng, spec, u, &cur, 0, true)?;
            }
            cur = sample_layer(&mut rng, &mspec, &mu_set, &cur, d, true)?;
            match &self.warpings[d] {
                Warping::Frozen { .. } => {}
                Warping::Linear { slope, intercept, .. } => {
                    for v in cur.iter_mut() {
                        *v = slope * *v + intercept;
                    }
                }
                Warping::Gp(_) => {
                    let (spec, u) = warp.as_ref().unwrap();
                    cur = sample_layer(&mut rng, spec, u, &cur, 0, false)?;
                }
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Mean per-point test log likelihood of masked points under the noisy
    /// predictive marginals.
    pub fn test_log_likelihood(&self, data: &LabeledDataset, mask: &[Vec<bool>]) -> Result<f64> {
        if mask.len() != data.outputs() || data.outputs() != self.outputs() {
            return Err(Error::DimensionMismatch(format!(
                "{} mask outputs vs {} data outputs",
                mask.len(),
                data.outputs()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for d in 0..data.outputs() {
            let s = data.series(d);
            if mask[d].len() != s.x.len() {
                return Err(Error::DimensionMismatch(format!(
                    "output {d}: mask length {} vs {} points",
                    mask[d].len(),
                    s.x.len()
                )));
            }
            let xs: Vec<f64> = s
                .x
                .iter()
                .zip(&mask[d])
                .filter(|(_, &m)| m)
                .map(|(x, _)| *x)
                .collect();
            if xs.is_empty() {
                continue;
            }
            let ys: Vec<f64> = s
                .y
                .iter()
                .zip(&mask[d])
                .filter(|(_, &m)| m)
                .map(|(y, _)| *y)
                .collect();
            let pred = self.predict(&xs, d)?;
            for (i, &y) in ys.iter().enumerate() {
                total += gaussian_score(y, pred.noisy.means[i], pred.noisy.variances[i]);
            }
            count += xs.len();
        }
        if count == 0 {
            return Err(Error::InvalidParameter("empty test mask".into()));
        }
        Ok(total / count as f64)
    }
}

/// log N(y | mean, var).
pub fn gaussian_score(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

fn rbf_layer_pieces(g: &GpState, mean: MeanFn) -> Result<(LayerSpec, InducingSet)> {
    let p = RbfParams::new(g.log_variance.exp(), &[g.log_lengthscale.exp()])?;
    let n = g.z.len();
    let z = OutputTaggedPoints::new_1d(&g.z, &vec![0; n], 1)?;
    // de-whiten: m = mean(Z) + L m_w, S factor = L F_w
    let kuu = gram(&z, &z, Kernel::Rbf(&p))?;
    let sym = SymMatrix::from_fn(n, |i, j| 0.5 * (kuu[(i, j)] + kuu[(j, i)]));
    let l = robust_cholesky(&sym, JITTER)?.l;
    let white = factor_from_packed(&g.s_packed, n);
    let factor = l.matmul(&white);
    let mut m = vec![0.0; n];
    for i in 0..n {
        m[i] = mean.eval(g.z[i]);
        for j in 0..=i {
            m[i] += l[(i, j)] * g.m[j];
        }
    }
    let spec = LayerSpec { kernel: LayerKernel::Rbf(p), mean, log_noise: g.log_noise };
    Ok((spec, InducingSet::new(z, m, factor)?))
}

/// Draw one joint function sample of a layer at the given points, feeding a
/// fresh u ~ q(u). `with_noise` adds the layer's own noise per point.
fn sample_layer(
    rng: &mut ChaCha8Rng,
    spec: &LayerSpec,
    u: &InducingSet,
    xs: &[f64],
    tag: usize,
    with_noise: bool,
) -> Result<Vec<f64>> {
    let m = u.len();
    let n = xs.len();
    // u ~ N(m, F F^T)
    let mut usample = u.m().to_vec();
    let f = u.s_factor();
    let eps: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..m {
        for j in 0..=i {
            usample[i] += f[(i, j)] * eps[j];
        }
    }
    let kern = match &spec.kernel {
        LayerKernel::Rbf(p) => Kernel::Rbf(p),
        LayerKernel::Cp(p) => Kernel::Cp(p),
    };
    let outputs = u.z().tags().iter().copied().max().unwrap_or(0).max(tag) + 1;
    let points = OutputTaggedPoints::new_1d(xs, &vec![tag; n], outputs)?;
    let kxu = gram(&points, u.z(), kern)?;
    let kxx = gram(&points, &points, kern)?;
    let kuu = gram(u.z(), u.z(), kern)?;
    let sym = SymMatrix::from_fn(m, |i, j| 0.5 * (kuu[(i, j)] + kuu[(j, i)]));
    let chol = robust_cholesky(&sym, JITTER)?;
    let centered: Vec<f64> = (0..m)
        .map(|i| usample[i] - spec.mean.eval(u.z().point(i)[0]))
        .collect();
    let alpha = chol.solve(&centered);
    // conditional mean and covariance
    let mut mean = vec![0.0; n];
    for i in 0..n {
        mean[i] = spec.mean.eval(xs[i]);
        for j in 0..m {
            mean[i] += kxu[(i, j)] * alpha[j];
        }
    }
    let kinv_kux = chol.solve_mat(&kxu.transpose());
    let mut cov = Mat::from_fn(n, n, |i, j| {
        let mut v = kxx[(i, j)];
        for t in 0..m {
            v -= kxu[(i, t)] * kinv_kux[(t, j)];
        }
        v
    });
    // symmetrize and factor with escalating jitter
    cov = Mat::from_fn(n, n, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let cov_sym = SymMatrix::from_fn(n, |i, j| cov[(i, j)]);
    let cchol = robust_cholesky(&cov_sym, JITTER)?;
    let eps2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = mean;
    for i in 0..n {
        for j in 0..=i {
            out[i] += cchol.l[(i, j)] * eps2[j];
        }
    }
    if with_noise {
        let sd = spec.noise_variance().sqrt();
        for v in out.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sd * e;
        }
    }
    Ok(out)
}

/// Gaussian likelihood fit term including the variance penalty, batch-scaled:
/// `scale * sum_n [log N(y_n | mu_n, sigma^2) - s_n / (2 sigma^2)]`.
#[allow(clippy::too_many_arguments)]
fn likelihood_fit(
    tape: &mut Tape,
    data: &LabeledDataset,
    idx: &[usize],
    d: usize,
    mu: NodeId,
    s: NodeId,
    log_noise: NodeId,
    scale: f64,
) -> NodeId {
    let nb = idx.len();
    let yb: Vec<f64> = idx.iter().map(|&i| data.series(d).y[i]).collect();
    let yc = tape.constant(Mat::column(&yb));
    let r = tape.sub(yc, mu);
    let rsq = tape.mul_elem(r, r);
    let sse = tape.sum(rsq);
    let spen = tape.sum(s);
    let both = tape.add(sse, spen);
    let neg = tape.neg(log_noise);
    let inv = tape.exp_elem(neg);
    let datafit = tape.scale_by(inv, both);
    let half = tape.scale_const(datafit, -0.5);
    let lognorm = tape.scale_const(log_noise, -0.5 * nb as f64);
    let partial = tape.add(half, lognorm);
    let full = tape.add_const(partial, -0.5 * nb as f64 * (2.0 * std::f64::consts::PI).ln());
    tape.scale_const(full, scale)
}

struct Assembly {
    tape: Tape,
    root: NodeId,
    terms: Vec<(String, NodeId)>,
    leaves: Vec<(String, NodeId)>,
    clip_events: usize,
}

impl Assembly {
    fn eval(&self) -> ElboEval {
        ElboEval {
            total: self.tape.scalar(self.root),
            terms: self
                .terms
                .iter()
                .map(|(n, id)| (n.clone(), self.tape.scalar(*id)))
                .collect(),
            clip_events: self.clip_events,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::cp_cross_cov;
    use crate::layer::{kl_gaussian, layer_trace_terms};
    use nalgebra::DMatrix;

    fn toy_data(seed: u64, n0: usize, n1: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series = [n0, n1]
            .iter()
            .map(|&n| {
                let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
                let y: Vec<f64> =
                    x.iter().map(|t| (6.0 * t).sin() + 0.1 * rng.gen_range(-1.0..1.0)).collect();
                Series { x, y }
            })
            .collect();
        LabeledDataset::new(series).unwrap()
    }

    fn small_amo_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(2);
        spec.align_frozen = vec![true, false];
        spec.warpings = vec![WarpKind::Gp, WarpKind::FrozenIdentity];
        spec.inducing_align = 4;
        spec.inducing_middle = 5;
        spec.inducing_warp = 4;
        spec
    }

    #[test]
    fn params_roundtrip() {
        let data = toy_data(1, 12, 9);
        let spec = small_amo_spec();
        let mut model = AmoGpModel::build(&spec, &data).unwrap();
        let layout = model.param_layout();
        let p = model.params();
        assert_eq!(p.len(), layout.total);
        assert_eq!(
            layout.segments.iter().map(|s| s.len).sum::<usize>(),
            layout.total
        );
        // perturb, write back, read again
        let q: Vec<f64> = p.iter().enumerate().map(|(i, v)| v + 0.001 * i as f64).collect();
        model.set_params(&q).unwrap();
        assert_eq!(model.params(), q);
        // families present
        for fam in [
            ParamFamily::Lengthscale,
            ParamFamily::SignalVariance,
            ParamFamily::Noise,
            ParamFamily::InducingInput,
            ParamFamily::InducingMean,
            ParamFamily::InducingCov,
            ParamFamily::CpLengthscale,
            ParamFamily::CpScale,
        ] {
            assert!(layout.segments.iter().any(|s| s.family == fam), "missing {fam:?}");
        }
    }

    #[test]
    fn breakdown_sums_to_total_and_terms_have_proper_signs() {
        let data = toy_data(2, 15, 11);
        let spec = small_amo_spec();
        let model = AmoGpModel::build(&spec, &data).unwrap();
        let eval = model.elbo(&data, None).unwrap();
        let sum: f64 = eval.terms.iter().map(|(_, v)| v).sum();
        assert!((sum - eval.total).abs() < 1e-12, "{} vs {}", sum, eval.total);
        for (name, v) in &eval.terms {
            if name.contains("kl") {
                assert!(*v <= 1e-10, "{name} = {v} (KL must be non-negative)");
            }
            if name.contains("penalty") {
                assert!(*v <= 1e-9, "{name} = {v} (trace penalties subtract)");
            }
            assert!(v.is_finite());
        }
    }

    /// Collapsed single-output model: frozen alignment and warping, so the
    /// hierarchy reduces to a single SVGP with the CP kernel.
    fn collapsed_model(n: usize, m: usize) -> (AmoGpModel, LabeledDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|t| (8.0 * t).sin() + 0.05 * rng.gen_range(-1.0..1.0)).collect();
        let data = LabeledDataset::new(vec![Series { x, y }]).unwrap();
        let mut spec = ModelSpec::new(1);
        spec.align_frozen = vec![true];
        spec.warpings = vec![WarpKind::FrozenIdentity];
        spec.inducing_middle = m;
        spec.init_middle_lengthscale = 0.15;
        let mut model = AmoGpModel::build(&spec, &data).unwrap();
        // force the latent middle noise to (near) zero so the effective
        // likelihood noise is the warping noise alone
        let layout = model.param_layout();
        let mut p = model.params();
        let seg = layout.segment("middle.log_noise").unwrap();
        p[seg.offset] = (1e-12f64).ln();
        model.set_params(&p).unwrap();
        (model, data)
    }

    #[test]
    fn collapsed_elbo_matches_single_layer_svgp_bound() {
        let (model, data) = collapsed_model(20, 6);
        let eval = model.elbo(&data, None).unwrap();

        // hand-assembled SVGP bound via the plain layer machinery
        let (spec, u) = model.middle_layer(0).unwrap();
        let sigma_y = model.likelihood_noise(0);
        let x = OutputTaggedPoints::new_1d(&data.series(0).x, &vec![0; 20], 1).unwrap();
        let input = LayerInput::Exact(&x);
        // bound assembly with the likelihood noise as the trace scale
        let like_spec = LayerSpec {
            kernel: spec.kernel.clone(),
            mean: MeanFn::Zero,
            log_noise: sigma_y.ln(),
        };
        let (marg, _) = layer_marginal(&like_spec, &u, &input).unwrap();
        let mut fit = 0.0;
        for (i, &y) in data.series(0).y.iter().enumerate() {
            // marginal variance includes sigma_y once; remove it for the mean
            // fit and keep it inside the penalty assembled by gaussian_score
            let s_pre = marg.variances[i] - sigma_y;
            fit += gaussian_score(y, marg.means[i], sigma_y) - 0.5 * s_pre / sigma_y;
        }
        let (vt, sc) = layer_trace_terms(&like_spec, &u, &input).unwrap();
        let _ = (vt, sc); // variance pieces already inside the marginal path
        let kern = match &spec.kernel {
            LayerKernel::Cp(p) => Kernel::Cp(p),
            _ => unreachable!(),
        };
        let kuu = gram(u.z(), u.z(), kern).unwrap();
        let prior = SymMatrix::from_fn(u.len(), |i, j| 0.5 * (kuu[(i, j)] + kuu[(j, i)]));
        let kl = kl_gaussian(&u, &vec![0.0; u.len()], &prior).unwrap();
        let expected = fit - kl;
        assert!(
            (eval.total - expected).abs() < 1e-6,
            "elbo {} vs svgp bound {}",
            eval.total,
            expected
        );
    }

    #[test]
    fn collapsed_elbo_below_dense_log_marginal() {
        let (model, data) = collapsed_model(25, 25);
        let eval = model.elbo(&data, None).unwrap();

        let (spec, _) = model.middle_layer(0).unwrap();
        let p = match &spec.kernel {
            LayerKernel::Cp(p) => p.clone(),
            _ => unreachable!(),
        };
        let noise = model.likelihood_noise(0) + spec.noise_variance();
        let xs = &data.series(0).x;
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            cp_cross_cov(&[xs[i]], 0, &[xs[j]], 0, &p).unwrap() + if i == j { noise } else { 0.0 }
        });
        let chol = k.cholesky().unwrap();
        let y = DMatrix::from_column_slice(n, 1, &data.series(0).y);
        let alpha = chol.solve(&y);
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let logml = -0.5 * (y.transpose() * alpha)[(0, 0)]
            - 0.5 * logdet
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!(
            eval.total <= logml + 1e-8,
            "elbo {} exceeds dense log marginal {}",
            eval.total,
            logml
        );
    }

    #[test]
    fn minibatch_partition_recovers_full_elbo() {
        let data = toy_data(4, 10, 10);
        let spec = small_amo_spec();
        let model = AmoGpModel::build(&spec, &data).unwrap();
        let full = model.elbo(&data, None).unwrap().total;
        let all: Vec<usize> = (0..20).collect();
        let (a, b) = all.split_at(10);
        let ea = model.elbo(&data, Some(a)).unwrap().total;
        let eb = model.elbo(&data, Some(b)).unwrap().total;
        let mean = 0.5 * (ea + eb);
        assert!((mean - full).abs() < 1e-8, "{mean} vs {full}");
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let data = toy_data(5, 8, 7);
        let mut spec = small_amo_spec();
        spec.inducing_align = 3;
        spec.inducing_middle = 3;
        spec.inducing_warp = 3;
        let mut model = AmoGpModel::build(&spec, &data).unwrap();
        let p0 = model.params();
        let (_, grad) = model.elbo_with_grad(&data, None).unwrap();
        assert_eq!(grad.len(), p0.len());
        for i in 0..p0.len() {
            let h = 1e-6 * p0[i].abs().max(1.0);
            let mut p = p0.clone();
            p[i] += h;
            model.set_params(&p).unwrap();
            let fp = model.elbo(&data, None).unwrap().total;
            p[i] = p0[i] - h;
            model.set_params(&p).unwrap();
            let fm = model.elbo(&data, None).unwrap().total;
            let fd = (fp - fm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1.0);
            assert!(
                (grad[i] - fd).abs() / denom < 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
        model.set_params(&p0).unwrap();
    }

    #[test]
    fn predict_interpolates_with_complete_inducing_set() {
        // frozen a and g, M = N, q(u) set to interpolate the targets
        let (mut model, data) = collapsed_model(15, 15);
        let layout = model.param_layout();
        let mut p = model.params();
        // move inducing inputs onto the data and the posterior onto the
        // targets: the whitened mean for posterior mean y is L^{-1} y
        let zseg = layout.segment("middle0.z").unwrap();
        let mseg = layout.segment("middle0.m").unwrap();
        p[zseg.offset..zseg.offset + 15].copy_from_slice(&data.series(0).x);
        model.set_params(&p).unwrap();
        let (mspec, mu) = model.middle_layer(0).unwrap();
        let kern = match &mspec.kernel {
            LayerKernel::Cp(cp) => Kernel::Cp(cp),
            _ => unreachable!(),
        };
        let kuu = gram(mu.z(), mu.z(), kern).unwrap();
        let sym = SymMatrix::from_fn(15, |i, j| 0.5 * (kuu[(i, j)] + kuu[(j, i)]));
        let chol = crate::linalg::robust_cholesky(&sym, JITTER).unwrap();
        let m_w = chol.solve_lower(&data.series(0).y);
        p[mseg.offset..mseg.offset + 15].copy_from_slice(&m_w);
        // shrink S
        let sseg = layout.segment("middle0.s_packed").unwrap();
        for (k, slot) in packed_diag_indices(15).into_iter().enumerate() {
            let _ = k;
            p[sseg.offset + slot] = (1e-6f64).ln();
        }
        for i in 0..sseg.len {
            if !packed_diag_indices(15).contains(&i) {
                p[sseg.offset + i] = 0.0;
            }
        }
        // tighten the likelihood noise
        let nseg = layout.segment("warp0.log_noise").unwrap();
        p[nseg.offset] = (1e-4f64).ln();
        model.set_params(&p).unwrap();

        let pred = model.predict(&data.series(0).x, 0).unwrap();
        for i in 0..15 {
            let sd = pred.noisy.variances[i].sqrt();
            let err = (pred.noisy.means[i] - data.series(0).y[i]).abs();
            assert!(err <= 3.0 * sd, "point {i}: err {err}, sd {sd}");
        }
    }

    #[test]
    fn predict_reverts_to_prior_far_from_data() {
        let data = toy_data(6, 14, 10);
        let spec = small_amo_spec();
        let model = AmoGpModel::build(&spec, &data).unwrap();
        // far outside [0, 1]: identity alignment, zero-mean middle, identity
        // warping mean -> mean near 0 for output 0 (frozen alignment, GP warp)
        let far = [30.0, 60.0, 120.0, 240.0];
        let pred = model.predict(&far, 0).unwrap();
        let near = model.predict(&[0.5], 0).unwrap();
        for i in 0..far.len() {
            assert!(
                pred.noiseless.variances[i] >= near.noiseless.variances[0],
                "variance should grow away from data"
            );
        }
        for w in pred.noiseless.variances.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "variance must grow monotonically: {w:?}");
        }
    }

    #[test]
    fn decompose_is_consistent_with_predict() {
        let data = toy_data(7, 12, 10);
        let spec = small_amo_spec();
        let model = AmoGpModel::build(&spec, &data).unwrap();
        let xs = [0.1, 0.4, 0.77];
        for d in 0..2 {
            let dec = model.decompose(&xs, d).unwrap();
            let pred = model.predict(&xs, d).unwrap();
            for i in 0..xs.len() {
                assert_eq!(dec.warping.means[i], pred.noiseless.means[i]);
                assert_eq!(dec.warping.variances[i], pred.noiseless.variances[i]);
            }
        }
        // frozen alignment (output 0) passes inputs through exactly
        let dec = model.decompose(&xs, 0).unwrap();
        assert_eq!(dec.alignment.means, xs.to_vec());
        assert!(dec.alignment.variances.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sample_mean_matches_predict_mean() {
        let data = toy_data(8, 12, 10);
        let spec = small_amo_spec();
        let model = AmoGpModel::build(&spec, &data).unwrap();
        let xs = [0.2, 0.5, 0.8];
        let pred = model.predict(&xs, 0).unwrap();
        let n = 10_000;
        let samples = model.sample_functions(&xs, 0, n, 99).unwrap();
        for i in 0..xs.len() {
            let vals: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - pred.noiseless.means[i]).abs() <= 3.0 * se + 1e-9,
                "point {i}: sample mean {mean} vs predict {}",
                pred.noiseless.means[i]
            );
        }
    }

    #[test]
    fn samples_are_deterministic_and_degenerate_posterior_collapses() {
        let (mut model, data) = collapsed_model(10, 10);
        let layout = model.param_layout();
        let mut p = model.params();
        let zseg = layout.segment("middle0.z").unwrap();
        p[zseg.offset..zseg.offset + 10].copy_from_slice(&data.series(0).x);
        let sseg = layout.segment("middle0.s_packed").unwrap();
        for i in 0..sseg.len {
            p[sseg.offset + i] = if packed_diag_indices(10).contains(&i) {
                (1e-9f64).ln()
            } else {
                0.0
            };
        }
        model.set_params(&p).unwrap();

        let a = model.sample_functions(&data.series(0).x, 0, 3, 7).unwrap();
        let b = model.sample_functions(&data.series(0).x, 0, 3, 7).unwrap();
        assert_eq!(a, b);

        // degenerate q(u), M = N, near-zero latent noise: all samples agree
        // with the mean path
        let pred = model.predict(&data.series(0).x, 0).unwrap();
        for s in &a {
            for (i, v) in s.iter().enumerate() {
                assert!(
                    (v - pred.noiseless.means[i]).abs() < 1e-3,
                    "sample deviates: {v} vs {}",
                    pred.noiseless.means[i]
                );
            }
        }
    }

    #[test]
    fn gaussian_score_examples() {
        let v: f64 = 0.3;
        let at_mode = gaussian_score(1.0, 1.0, v);
        assert!((at_mode + 0.5 * (2.0 * std::f64::consts::PI * v).ln()).abs() < 1e-12);
        let one_sigma = gaussian_score(1.0 + v.sqrt(), 1.0, v);
        assert!((one_sigma - (at_mode - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn test_log_likelihood_masks_and_averages() {
        let data = toy_data(9, 10, 8);
        let spec = small_amo_spec();
        let model = AmoGpModel::build(&spec, &data).unwrap();
        let mask = vec![vec![true; 10], vec![false; 8]];
        let v = model.test_log_likelihood(&data, &mask).unwrap();
        assert!(v.is_finite());
        let empty = vec![vec![false; 10], vec![false; 8]];
        assert!(model.test_log_likelihood(&data, &empty).is_err());
    }

    #[test]
    fn dgp_baseline_has_zero_cross_output_prior_covariance() {
        let data = toy_data(10, 10, 10);
        let mut spec = small_amo_spec();
        spec.middle = MiddleKind::IndependentRbf;
        spec.align_frozen = vec![false, false];
        spec.warpings = vec![WarpKind::Gp, WarpKind::Gp];
        let model = AmoGpModel::build(&spec, &data).unwrap();
        let eval = model.elbo(&data, None).unwrap();
        assert!(eval.total.is_finite());
        // independent middles: separate KL terms per output, no shared one
        assert!(eval.terms.iter().any(|(n, _)| n == "middle_kl[0]"));
        assert!(eval.terms.iter().any(|(n, _)| n == "middle_kl[1]"));
        assert!(!eval.terms.iter().any(|(n, _)| n == "middle_kl"));
    }
}
