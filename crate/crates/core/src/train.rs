//! Training: Adam ascent on the bound, gradient checking, hyperpriors.

use crate::model::{AmoGpModel, ElboEval, LabeledDataset, ParamFamily};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Optimizer settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: usize,
    /// Minibatch size; `None` trains on the full dataset every step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Weight of the log-normal hyperprior on kernel hyperparameters.
    pub prior_strength: f64,
    /// Stop early once the bound moves less than this across a 50-step window.
    pub convergence_tol: Option<f64>,
    /// Keep the shared-kernel lengthscales fixed for this many initial steps,
    /// letting the inducing posteriors settle first.
    pub cp_freeze_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 1000,
            batch_size: None,
            seed: 0,
            prior_strength: 1.0,
            convergence_tol: None,
            cp_freeze_steps: 1000,
        }
    }
}

/// One optimizer step as recorded in the trace.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub elbo: f64,
    pub terms: Vec<(String, f64)>,
    pub param_norm: f64,
    pub grad_norm: f64,
    pub clip_events: usize,
}

/// Full optimization history.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    /// Step at which a numerical abort restored the last finite state.
    pub aborted_at: Option<usize>,
    /// Step at which the convergence window closed.
    pub converged_at: Option<usize>,
}

impl TrainTrace {
    /// Render the trace as CSV: fixed columns, then one column per bound term.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,elbo,param_norm,grad_norm,clip_events");
        if let Some(first) = self.steps.first() {
            for (name, _) in &first.terms {
                out.push(',');
                out.push_str(name);
            }
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}",
                s.step, s.elbo, s.param_norm, s.grad_norm, s.clip_events
            ));
            for (_, v) in &s.terms {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.steps.last().map(|s| s.elbo)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximize the bound with Adam. On a non-finite bound or a numerical
/// failure the model is restored to the last finite state and the trace is
/// marked aborted.
pub fn fit(model: &mut AmoGpModel, data: &LabeledDataset, config: &TrainConfig) -> Result<TrainTrace> {
    if !(config.step_size >= 0.0) || !(config.beta1 < 1.0) || !(config.beta2 < 1.0) {
        return Err(Error::InvalidParameter("invalid optimizer settings".into()));
    }
    let n_total = data.total_points();
    if let Some(b) = config.batch_size {
        if b == 0 || b > n_total {
            return Err(Error::InvalidParameter(format!(
                "batch size {b} for {n_total} points"
            )));
        }
    }
    let layout = model.param_layout();
    let mut params = model.params();
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainTrace::default();
    let mut last_finite = params.clone();

    for step in 0..config.max_steps {
        let batch: Option<Vec<usize>> = config.batch_size.filter(|&b| b < n_total).map(|b| {
            rand::seq::index::sample(&mut rng, n_total, b).into_vec()
        });
        let result = model.elbo_with_grad(data, batch.as_deref());
        let (eval, mut grad): (ElboEval, Vec<f64>) = match result {
            Ok(r) => r,
            Err(_) => {
                model.set_params(&last_finite)?;
                trace.aborted_at = Some(step);
                return Ok(trace);
            }
        };
        if !eval.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            model.set_params(&last_finite)?;
            trace.aborted_at = Some(step);
            return Ok(trace);
        }
        last_finite.copy_from_slice(&params);

        if config.prior_strength > 0.0 {
            let (_, pg) = hyperprior_logdensity(model, config.prior_strength);
            for (g, p) in grad.iter_mut().zip(&pg) {
                *g += p;
            }
        }
        if step < config.cp_freeze_steps {
            for seg in &layout.segments {
                if seg.family == ParamFamily::CpLengthscale {
                    grad[seg.offset..seg.offset + seg.len].fill(0.0);
                }
            }
        }

        trace.steps.push(StepRecord {
            step,
            elbo: eval.total,
            terms: eval.terms,
            param_norm: norm(&params),
            grad_norm: norm(&grad),
            clip_events: eval.clip_events,
        });

        let t = (step + 1) as f64;
        let bc1 = 1.0 - config.beta1.powf(t);
        let bc2 = 1.0 - config.beta2.powf(t);
        for i in 0..params.len() {
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * grad[i];
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            params[i] += config.step_size * mhat / (vhat.sqrt() + config.epsilon);
        }
        if params.iter().any(|p| !p.is_finite()) {
            model.set_params(&last_finite)?;
            trace.aborted_at = Some(step);
            return Ok(trace);
        }
        model.set_params(&params)?;

        if let Some(tol) = config.convergence_tol {
            let k = trace.steps.len();
            if k >= 50 {
                let window = &trace.steps[k - 50..];
                let lo = window.iter().map(|s| s.elbo).fold(f64::INFINITY, f64::min);
                let hi = window.iter().map(|s| s.elbo).fold(f64::NEG_INFINITY, f64::max);
                if hi - lo < tol {
                    trace.converged_at = Some(step);
                    break;
                }
            }
        }
    }
    Ok(trace)
}

/// One compared parameter from [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub index: usize,
    pub segment: String,
    pub family: ParamFamily,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Symmetric difference quotient `(f(x+h) - f(x-h)) / 2h`.
/// Fourth-order central difference: the five-point stencil keeps the
/// truncation error at O(h^4), which lets the step stay large enough that
/// rounding in the bound evaluation does not dominate.
pub(crate) fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let d1 = f(x + h) - f(x - h);
    let d2 = f(x + 2.0 * h) - f(x - 2.0 * h);
    (8.0 * d1 - d2) / (12.0 * h)
}

/// Compare the analytic bound gradient against central differences on a
/// random parameter subset that covers every parameter family. The model is
/// restored afterwards.
pub fn gradient_check(
    model: &mut AmoGpModel,
    data: &LabeledDataset,
    count: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!(
            "gradient check epsilon {epsilon:e} outside [1e-7, 1e-3]"
        )));
    }
    let layout = model.param_layout();
    let p0 = model.params();
    let (_, grad) = model.elbo_with_grad(data, None)?;

    // one representative per family first, then random fill
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::new();
    let mut seen_families: Vec<ParamFamily> = Vec::new();
    for seg in &layout.segments {
        if !seen_families.contains(&seg.family) {
            seen_families.push(seg.family);
            chosen.push(seg.offset + rng.gen_range(0..seg.len));
        }
    }
    while chosen.len() < count.min(p0.len()) {
        let i = rng.gen_range(0..p0.len());
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen.sort_unstable();

    let mut entries = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let h = epsilon * p0[i].abs().max(1.0);
        let mut p = p0.clone();
        let numeric = central_difference(
            |x| {
                p[i] = x;
                model.set_params(&p).expect("finite probe");
                model.elbo(data, None).expect("bound evaluation").total
            },
            p0[i],
            h,
        );
        let seg = layout
            .segments
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
            .expect("index inside layout");
        let denom = grad[i].abs().max(numeric.abs()).max(1.0);
        entries.push(GradCheckEntry {
            index: i,
            segment: seg.name.clone(),
            family: seg.family,
            analytic: grad[i],
            numeric,
            rel_error: (grad[i] - numeric).abs() / denom,
        });
    }
    model.set_params(&p0)?;
    Ok(entries)
}

/// Log-normal hyperprior over kernel hyperparameters, up to an additive
/// constant: alignment/warping lengthscales concentrate around a median of
/// 2.0, signal variances around 0.1, both with log-sd 0.5. Noise variances,
/// inducing parameters and the shared-kernel parameters are unpenalized.
/// Returns the (strength-weighted) log-density and its gradient in flat
/// parameter order.
pub fn hyperprior_logdensity(model: &AmoGpModel, strength: f64) -> (f64, Vec<f64>) {
    let layout = model.param_layout();
    let params = model.params();
    let mut grad = vec![0.0; params.len()];
    if strength == 0.0 {
        return (0.0, grad);
    }
    let mut logp = 0.0;
    let log_sd: f64 = 0.5;
    for seg in &layout.segments {
        let log_median = match seg.family {
            ParamFamily::Lengthscale => 2.0f64.ln(),
            ParamFamily::SignalVariance => 0.1f64.ln(),
            _ => continue,
        };
        for i in seg.offset..seg.offset + seg.len {
            let d = params[i] - log_median;
            logp -= strength * 0.5 * d * d / (log_sd * log_sd);
            grad[i] = -strength * d / (log_sd * log_sd);
        }
    }
    (logp, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, Kernel, OutputTaggedPoints, RbfParams};
    use crate::linalg::{robust_cholesky, SymMatrix};
    use crate::model::{ModelSpec, Series, WarpKind};

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

    fn small_model(data: &LabeledDataset) -> AmoGpModel {
        let mut spec = ModelSpec::new(2);
        spec.align_frozen = vec![true, false];
        spec.warpings = vec![WarpKind::Gp, WarpKind::FrozenIdentity];
        spec.inducing_align = 4;
        spec.inducing_middle = 5;
        spec.inducing_warp = 4;
        AmoGpModel::build(&spec, data).unwrap()
    }

    #[test]
    fn zero_step_size_is_a_no_op() {
        let data = toy_data(1, 10, 8);
        let mut model = small_model(&data);
        let before = model.params();
        let config = TrainConfig { step_size: 0.0, max_steps: 5, ..TrainConfig::default() };
        let trace = fit(&mut model, &data, &config).unwrap();
        assert_eq!(trace.steps.len(), 5);
        assert_eq!(model.params(), before);
    }

    #[test]
    fn fit_improves_the_bound_and_is_deterministic() {
        let data = toy_data(2, 12, 10);
        let mut a = small_model(&data);
        let mut b = small_model(&data);
        let start = a.elbo(&data, None).unwrap().total;
        let config = TrainConfig {
            max_steps: 150,
            batch_size: Some(8),
            seed: 11,
            ..TrainConfig::default()
        };
        fit(&mut a, &data, &config).unwrap();
        fit(&mut b, &data, &config).unwrap();
        assert_eq!(a.params(), b.params(), "same seed must give identical runs");
        let end = a.elbo(&data, None).unwrap().total;
        assert!(end > start + 1.0, "bound did not improve: {start} -> {end}");
    }

    #[test]
    fn cp_lengthscales_stay_frozen_during_warmup() {
        let data = toy_data(3, 10, 10);
        let mut model = small_model(&data);
        let layout = model.param_layout();
        let seg = layout.segment("middle.log_lengthscales").unwrap().clone();
        let before = model.params()[seg.offset..seg.offset + seg.len].to_vec();
        let config = TrainConfig { max_steps: 30, cp_freeze_steps: 1000, ..TrainConfig::default() };
        fit(&mut model, &data, &config).unwrap();
        let after = model.params()[seg.offset..seg.offset + seg.len].to_vec();
        assert_eq!(before, after);
        // and they move once the warmup has passed
        let config = TrainConfig { max_steps: 30, cp_freeze_steps: 0, ..TrainConfig::default() };
        fit(&mut model, &data, &config).unwrap();
        let moved = model.params()[seg.offset..seg.offset + seg.len].to_vec();
        assert_ne!(after, moved);
    }

    #[test]
    fn divergence_aborts_and_restores_the_last_finite_state() {
        let data = toy_data(4, 10, 8);
        let mut model = small_model(&data);
        let config = TrainConfig {
            step_size: 1e4,
            max_steps: 400,
            prior_strength: 0.0,
            ..TrainConfig::default()
        };
        let trace = fit(&mut model, &data, &config).unwrap();
        assert!(trace.aborted_at.is_some(), "a 1e4 step size must blow up");
        assert!(model.params().iter().all(|p| p.is_finite()));
        assert!(model.elbo(&data, None).unwrap().total.is_finite());
    }

    #[test]
    fn convergence_window_stops_early() {
        let data = toy_data(5, 10, 8);
        let mut model = small_model(&data);
        let config = TrainConfig {
            step_size: 0.0,
            max_steps: 500,
            convergence_tol: Some(1e-9),
            ..TrainConfig::default()
        };
        let trace = fit(&mut model, &data, &config).unwrap();
        assert_eq!(trace.converged_at, Some(49));
        assert_eq!(trace.steps.len(), 50);
    }

    #[test]
    fn trace_csv_has_header_and_term_columns() {
        let data = toy_data(6, 8, 8);
        let mut model = small_model(&data);
        let config = TrainConfig { max_steps: 3, ..TrainConfig::default() };
        let trace = fit(&mut model, &data, &config).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("step,elbo,param_norm,grad_norm,clip_events"));
        assert!(header.contains("fit[0]"));
        assert!(header.contains("middle_kl"));
        let cols = header.split(',').count();
        for line in lines {
            assert_eq!(line.split(',').count(), cols);
        }
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn central_difference_is_exact_on_quadratics() {
        // no truncation error on a quadratic: only roundoff remains
        let g = central_difference(|x| 3.0 * x * x - 2.0 * x + 7.0, 1.5, 1e-4);
        assert!((g - 7.0).abs() < 1e-10, "{g}");
    }

    #[test]
    fn gradient_check_passes_on_a_small_model() {
        let data = toy_data(7, 8, 7);
        let mut spec = ModelSpec::new(2);
        spec.align_frozen = vec![true, false];
        spec.warpings = vec![WarpKind::Gp, WarpKind::Linear];
        spec.inducing_align = 3;
        spec.inducing_middle = 3;
        spec.inducing_warp = 3;
        let mut model = AmoGpModel::build(&spec, &data).unwrap();
        let p0 = model.params();
        let entries = gradient_check(&mut model, &data, 30, 1e-6, 5).unwrap();
        assert!(entries.len() >= 30);
        let mut families: Vec<ParamFamily> = entries.iter().map(|e| e.family).collect();
        families.dedup();
        for fam in [
            ParamFamily::Lengthscale,
            ParamFamily::Noise,
            ParamFamily::InducingInput,
            ParamFamily::CpLengthscale,
            ParamFamily::MeanCoeff,
        ] {
            assert!(entries.iter().any(|e| e.family == fam), "family {fam:?} not sampled");
        }
        for e in &entries {
            assert!(
                e.rel_error < 1e-4,
                "{} (param {}): analytic {} vs numeric {}",
                e.segment,
                e.index,
                e.analytic,
                e.numeric
            );
        }
        assert_eq!(model.params(), p0, "model must be restored");
        assert!(gradient_check(&mut model, &data, 10, 1e-2, 0).is_err());
        assert!(gradient_check(&mut model, &data, 10, 1e-8, 0).is_err());
    }

    #[test]
    fn hyperprior_shape_and_gradient() {
        let data = toy_data(8, 8, 8);
        let model = small_model(&data);
        let layout = model.param_layout();

        let (zero_logp, zero_grad) = hyperprior_logdensity(&model, 0.0);
        assert_eq!(zero_logp, 0.0);
        assert!(zero_grad.iter().all(|g| *g == 0.0));

        let (logp, grad) = hyperprior_logdensity(&model, 1.0);
        assert!(logp <= 0.0);
        // shared-kernel and noise parameters are unpenalized
        for seg in &layout.segments {
            let penalized = matches!(
                seg.family,
                ParamFamily::Lengthscale | ParamFamily::SignalVariance
            );
            for i in seg.offset..seg.offset + seg.len {
                if !penalized {
                    assert_eq!(grad[i], 0.0, "{} should be unpenalized", seg.name);
                }
            }
        }
        // below the median the gradient pushes the parameter up
        let seg = layout.segment("align1.log_lengthscale").unwrap();
        let mut m = model.clone();
        let mut p = m.params();
        p[seg.offset] = 0.5f64.ln(); // below the median of 2.0
        m.set_params(&p).unwrap();
        let (_, g) = hyperprior_logdensity(&m, 1.0);
        assert!(g[seg.offset] > 0.0);
        // strength scales linearly
        let (l2, g2) = hyperprior_logdensity(&m, 2.0);
        let (l1, _) = hyperprior_logdensity(&m, 1.0);
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        assert!((g2[seg.offset] - 2.0 * g[seg.offset]).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_rbf_hyperparameters() {
        // draw data from a known RBF GP and check the collapsed model finds
        // the generating lengthscale and noise within 25%
        let n = 60;
        let true_len = 0.2;
        let true_noise: f64 = 0.01;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let p = RbfParams::new(1.0, &[true_len]).unwrap();
        let pts = OutputTaggedPoints::new_1d(&xs, &vec![0; n], 1).unwrap();
        let k = gram(&pts, &pts, Kernel::Rbf(&p)).unwrap();
        let sym = SymMatrix::from_fn(n, |i, j| 0.5 * (k[(i, j)] + k[(j, i)]));
        let chol = robust_cholesky(&sym, 1e-10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = 0.0;
                for j in 0..=i {
                    v += chol.l[(i, j)] * eps[j];
                }
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                v + true_noise.sqrt() * e
            })
            .collect();
        let data = LabeledDataset::new(vec![Series { x: xs, y }]).unwrap();

        let mut spec = ModelSpec::new(1);
        spec.align_frozen = vec![true];
        spec.warpings = vec![WarpKind::FrozenIdentity];
        spec.inducing_middle = 20;
        let mut model = AmoGpModel::build(&spec, &data).unwrap();
        let config = TrainConfig {
            max_steps: 800,
            cp_freeze_steps: 100,
            prior_strength: 0.0,
            ..TrainConfig::default()
        };
        fit(&mut model, &data, &config).unwrap();

        let layout = model.param_layout();
        let params = model.params();
        // the CP kernel's same-output covariance is an RBF whose lengthscale
        // is sqrt(2) times the smoothing-filter lengthscale
        let ll = layout.segment("middle.log_lengthscales").unwrap().offset;
        let eff_len = std::f64::consts::SQRT_2 * params[ll].exp();
        assert!(
            (eff_len - true_len).abs() / true_len < 0.25,
            "lengthscale {eff_len} vs true {true_len}"
        );
        let latent = params[layout.segment("middle.log_noise").unwrap().offset].exp();
        let like = params[layout.segment("warp0.log_noise").unwrap().offset].exp();
        let eff_noise = latent + like;
        assert!(
            (eff_noise - true_noise).abs() / true_noise < 0.25,
            "noise {eff_noise} vs true {true_noise}"
        );
    }
}
