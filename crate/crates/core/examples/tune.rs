use amogp::kernels::Kernel;
use amogp::*;
use std::time::Instant;

fn per_gap_ll(model: &AmoGpModel, full: &LabeledDataset, masks: &[Vec<bool>]) -> Vec<f64> {
    (0..full.outputs())
        .map(|d| {
            let mask: Vec<Vec<bool>> = (0..full.outputs())
                .map(|k| if k == d { masks[k].clone() } else { vec![false; masks[k].len()] })
                .collect();
            model.test_log_likelihood(full, &mask).unwrap()
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let which: String = args.get(2).cloned().unwrap_or_else(|| "all".into());

    if which == "fdscan" {
        let spec = SyntheticSpec { n_points: 150, ..SyntheticSpec::default() };
        let data = generate_artificial(&spec).unwrap();
        let train = data.train_data().unwrap();
        let mut mspec = amo_spec(2);
        mspec.inducing_align = 6;
        mspec.inducing_middle = 10;
        mspec.inducing_warp = 6;
        mspec.init_latent_noise = 1e-2;
        mspec.init_middle_lengthscale = 0.08;
        let mut model = AmoGpModel::build(&mspec, &train).unwrap();
        let idx: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(193);
        let p0 = model.params();
        let (e0, g) = model.elbo_with_grad(&train, None).unwrap();
        println!("elbo0 {:.9e} analytic[{idx}] {:.6e}", e0.total, g[idx]);
        model.set_params(&p0).unwrap();
        let base = model.elbo(&train, None).unwrap();
        for k in 2..8 {
            let h = 10f64.powi(-k);
            let mut p = p0.clone();
            p[idx] = p0[idx] + h;
            model.set_params(&p).unwrap();
            let evp = model.elbo(&train, None).unwrap();
            let ep = evp.total;
            p[idx] = p0[idx] - h;
            model.set_params(&p).unwrap();
            let em = model.elbo(&train, None).unwrap().total;
            let deltas: String = evp
                .terms
                .iter()
                .zip(&base.terms)
                .map(|((n, v), (_, v0))| format!("{n}:{:+.2e} ", v - v0))
                .collect();
            println!(
                "h {h:.0e}  e+ {:.9e}  e- {:.9e}  fd {:.6e}\n   d+ {}",
                ep,
                em,
                (ep - em) / (2.0 * h),
                deltas
            );
        }
        return;
    }

    if which == "psicheck" {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut violations = 0usize;
        let mut entries = 0usize;
        for case in 0..50u64 {
            let outputs = rng.gen_range(1..=3);
            let latents = rng.gen_range(1..=2);
            let n = rng.gen_range(1..=8);
            let m = rng.gen_range(1..=6);
            let mut p = SmoothingKernelParams::new(outputs, latents, 1).unwrap();
            for v in p.log_scales.iter_mut() {
                *v = rng.gen_range(-0.7..0.7);
            }
            for v in p.log_lengthscales.iter_mut() {
                *v = rng.gen_range(-2.3..-0.7);
            }
            let q = GaussianMoments::new(
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.gen_range(0.01..0.25)).collect(),
            )
            .unwrap();
            let q_tags: Vec<usize> = (0..n).map(|_| rng.gen_range(0..outputs)).collect();
            let z: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z_tags: Vec<usize> = (0..m).map(|_| rng.gen_range(0..outputs)).collect();
            let zt = OutputTaggedPoints::new_1d(&z, &z_tags, outputs).unwrap();
            let exact = psi_cp(&q, &q_tags, &zt, &p).unwrap();
            let mc = mc_psi_oracle(&q, &q_tags, &zt, Kernel::Cp(&p), 200_000, 900 + case).unwrap();
            let mut check = |kind: &str, i: usize, j: usize, a: f64, b: f64, se: f64| {
                entries += 1;
                if (a - b).abs() > 3.0 * se + 1e-12 {
                    violations += 1;
                    println!(
                        "case {case} D{outputs} R{latents} n{n} m{m} {kind}[{i},{j}] exact {a:+.6e} mc {b:+.6e} se {se:.2e} z {:.2}",
                        (a - b).abs() / se
                    );
                }
            };
            check("psi0", 0, 0, exact.psi0, mc.estimate.psi0, mc.stderr.psi0);
            for i in 0..n {
                for j in 0..m {
                    check("psi1", i, j, exact.psi1[(i, j)], mc.estimate.psi1[(i, j)], mc.stderr.psi1[(i, j)]);
                }
            }
            for i in 0..m {
                for j in 0..m {
                    check("psi2", i, j, exact.psi2[(i, j)], mc.estimate.psi2[(i, j)], mc.stderr.psi2[(i, j)]);
                }
            }
        }
        println!("total {violations}/{entries}");
        return;
    }

    if which == "gradcheck" || which == "gradcheck500" {
        let n: usize = std::env::var("NPTS").ok().and_then(|v| v.parse().ok()).unwrap_or(150);
        let spec = SyntheticSpec { n_points: n, ..SyntheticSpec::default() };
        let data = generate_artificial(&spec).unwrap();
        let train = data.train_data().unwrap();
        let mut mspec = amo_spec(2);
        mspec.inducing_align = std::env::var("MALIGN").ok().and_then(|v| v.parse().ok()).unwrap_or(6);
        mspec.inducing_middle = 8;
        mspec.inducing_warp = 6;
        mspec.init_likelihood_noise = std::env::var("LIKN").ok().and_then(|v| v.parse().ok()).unwrap_or(mspec.init_likelihood_noise);
        mspec.init_latent_noise = std::env::var("LNOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-2);
        mspec.init_middle_lengthscale = std::env::var("MLEN").ok().and_then(|v| v.parse().ok()).unwrap_or(0.08);
        mspec.latent_processes = std::env::var("NLAT").ok().and_then(|v| v.parse().ok()).unwrap_or(2);
        let mut model = AmoGpModel::build(&mspec, &train).unwrap();
        if which == "gradcheck500" {
            let tc = TrainConfig {
                step_size: std::env::var("STEP").ok().and_then(|v| v.parse().ok()).unwrap_or(0.01),
                max_steps: 500,
                batch_size: None,
                seed: 0,
                prior_strength: std::env::var("PSTR").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
                convergence_tol: None,
                cp_freeze_steps: 100,
                ..TrainConfig::default()
            };
            fit(&mut model, &train, &tc).unwrap();
            let ev = model.elbo(&train, None).unwrap();
            println!("clip events at trained point: {}", ev.clip_events);
            if std::env::var("DUMP").is_ok() {
                println!("{}", model_to_toml(&model).unwrap());
            }
        }
        if std::env::var("RANDPT").is_ok() {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let mut p = model.params();
            for v in &mut p {
                *v += rng.gen_range(-0.3..0.3);
            }
            model.set_params(&p).unwrap();
        }
        if let Ok(iv) = std::env::var("FDIDX") {
            let idx: usize = iv.parse().unwrap();
            let p0 = model.params();
            let (e0, g) = model.elbo_with_grad(&train, None).unwrap();
            println!("elbo0 {:.9e} analytic[{idx}] {:.6e}", e0.total, g[idx]);
            model.set_params(&p0).unwrap();
            let base = model.elbo(&train, None).unwrap();
            for k in 2..7 {
                let h = 10f64.powi(-k);
                let mut p = p0.clone();
                p[idx] = p0[idx] + h;
                model.set_params(&p).unwrap();
                let evp = model.elbo(&train, None).unwrap();
                p[idx] = p0[idx] - h;
                model.set_params(&p).unwrap();
                let evm = model.elbo(&train, None).unwrap();
                let em = evm.total;
                let deltas: String = evp
                    .terms
                    .iter()
                    .zip(&evm.terms)
                    .map(|((n, v), (_, vm))| format!("{n}:{:+.6e} ", (v - vm) / (2.0 * h)))
                    .collect();
                println!("h {h:.0e} fd {:.6e}\n   cfd {}", (evp.total - em) / (2.0 * h), deltas);
            }
            model.set_params(&p0).unwrap();
        }
        for eps in [1e-3, 3e-4, 2e-4, 1e-4, 3e-5] {
            let entries = gradient_check(&mut model, &train, 60, eps, 11).unwrap();
            let worst = entries
                .iter()
                .max_by(|a, b| a.rel_error.partial_cmp(&b.rel_error).unwrap())
                .unwrap();
            println!(
                "eps {eps:.0e} max rel {:.3e}  ({} {:?} idx {} analytic {:+.4e} numeric {:+.4e})",
                worst.rel_error, worst.segment, worst.family, worst.index, worst.analytic, worst.numeric
            );
        }
        return;
    }

    let envf = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let envu = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let spec = SyntheticSpec {
        angular_frequency: envf("OMEGA", 6.0) * std::f64::consts::PI,
        decay: envf("DECAY", 2.0),
        ..SyntheticSpec::default()
    };
    let data = generate_artificial(&spec).unwrap();
    let train = data.train_data().unwrap();
    let full = data.full_data().unwrap();
    let masks = data.test_masks();

    let tc = TrainConfig {
        step_size: 0.01,
        max_steps: steps,
        batch_size: None,
        seed: 0,
        prior_strength: 1.0,
        convergence_tol: None,
        cp_freeze_steps: 200,
        ..TrainConfig::default()
    };

    let tweak = |mut s: ModelSpec| {
        s.inducing_middle = envu("MMID", s.inducing_middle);
        s.init_middle_lengthscale = envf("MLEN0", s.init_middle_lengthscale);
        s
    };
    let mut jobs: Vec<(&str, ModelSpec)> = Vec::new();
    if which == "all" || which == "amo" {
        jobs.push(("amo", tweak(amo_spec(2))));
    }
    if which == "all" || which == "shallow" {
        jobs.push(("shallow", tweak(baseline_spec(BaselineKind::ShallowGp, 2))));
    }
    if which == "all" || which == "mo" {
        jobs.push(("mo", tweak(baseline_spec(BaselineKind::MoGp, 2))));
    }
    if which == "all" || which == "dgp" {
        jobs.push(("dgp", tweak(baseline_spec(BaselineKind::Dgp3, 2))));
    }

    for (name, mspec) in jobs {
        let t0 = Instant::now();
        let mut model = AmoGpModel::build(&mspec, &train).unwrap();
        let trace = fit(&mut model, &train, &tc).unwrap();
        if std::env::var("TRACE").is_ok() {
            for s in trace.steps.iter().step_by(50) {
                let terms: String = s
                    .terms
                    .iter()
                    .map(|(n, v)| format!("{n}={v:.1} "))
                    .collect();
                println!(
                    "  step {:5} elbo {:10.2} pnorm {:8.2} gnorm {:10.2} {}",
                    s.step, s.elbo, s.param_norm, s.grad_norm, terms
                );
            }
        }
        let ll = per_gap_ll(&model, &full, &masks);
        println!(
            "{name:8} elbo {:10.2} abort {:?} conv {:?} gap1_ll {:+.4} gap2_ll {:+.4}  [{:.1}s]",
            trace.final_elbo().unwrap_or(f64::NAN),
            trace.aborted_at,
            trace.converged_at,
            ll[0],
            ll[1],
            t0.elapsed().as_secs_f64()
        );
        if name == "amo" {
            // alignment recovery on output 1 training inputs
            let xs = &train.series(1).x;
            let dec = model.decompose(xs, 1).unwrap();
            let a: Vec<f64> = dec.alignment.means.clone();
            let b: Vec<f64> = xs.iter().map(|&t| t * t).collect();
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
            println!("  align corr {:.4}", (cov / (va * vb).sqrt()).abs());
            // variance comparison prep
            let gap_xs: Vec<f64> = full
                .series(1)
                .x
                .iter()
                .zip(&masks[1])
                .filter(|(_, &t)| t)
                .map(|(x, _)| *x)
                .collect();
            let p = model.predict(&gap_xs, 1).unwrap();
            let mean_var: f64 =
                p.noisy.variances.iter().sum::<f64>() / gap_xs.len() as f64;
            println!("  amo gap2 mean predictive var {:.5}", mean_var);
        }
    }
}
