//! Batch frontend: generate synthetic data, train models, export predictions.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 numerical abort.

pub mod config;
pub mod io;

use amogp::{fit, generate_artificial, save_model, AmoGpModel, SyntheticSpec, DOCUMENT_VERSION};
use clap::{Args, Parser, Subcommand};
use io::{fmt_f, write_file};
use std::fmt::Write as _;
use std::path::PathBuf;

/// A command failure carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, bad config, missing or malformed files: exit 2.
    Usage(String),
    /// Training or prediction hit a numerical dead end: exit 3.
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => m,
        }
    }
}

fn numerical(e: amogp::Error) -> Failure {
    match e {
        amogp::Error::NonFinite(_) | amogp::Error::NotPositiveDefinite { .. } => {
            Failure::Numerical(e.to_string())
        }
        other => Failure::Usage(other.to_string()),
    }
}

#[derive(Parser)]
#[command(name = "amogp", version, about = "Aligned multi-output GP toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the artificial two-output dataset with ground truth.
    Generate(GenerateArgs),
    /// Fit a model described by a run configuration.
    Train(TrainArgs),
    /// Export predictions from a saved model document.
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub n_points: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sd: f64,
    /// Test gap on output 0, as LO:HI inside [0,1].
    #[arg(long, default_value = "0.7:0.8", value_name = "LO:HI")]
    pub gap1: String,
    /// Test gap on output 1.
    #[arg(long, default_value = "0.35:0.65", value_name = "LO:HI")]
    pub gap2: String,
    #[arg(long, default_value_t = 2.0)]
    pub decay: f64,
    #[arg(long, default_value_t = 6.0 * std::f64::consts::PI)]
    pub omega: f64,
    #[arg(long, default_value_t = 3.0)]
    pub sigmoid_slope: f64,
    /// Directory receiving dataset.csv and truth.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured step budget.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Saved model document.
    #[arg(long)]
    pub model: PathBuf,
    /// Output index to predict.
    #[arg(long, default_value_t = 0)]
    pub output: usize,
    /// Evaluation grid as LO:HI:COUNT.
    #[arg(long, default_value = "0:1:201", value_name = "LO:HI:COUNT")]
    pub grid: String,
    /// Destination CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Emit per-layer means and variances instead of the final output.
    #[arg(long, conflicts_with = "samples")]
    pub decompose: bool,
    /// Append this many sampled function paths as extra columns.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Seed for sampled paths.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_gap(text: &str, flag: &str) -> Result<(f64, f64), Failure> {
    let err = |why: &str| Failure::Usage(format!("{flag}: {why} (expected LO:HI inside [0,1])"));
    let (lo, hi) = text.split_once(':').ok_or_else(|| err("missing `:`"))?;
    let lo: f64 = lo.parse().map_err(|_| err("bad lower bound"))?;
    let hi: f64 = hi.parse().map_err(|_| err("bad upper bound"))?;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(err("bounds must satisfy 0 <= LO < HI <= 1"));
    }
    Ok((lo, hi))
}

fn parse_grid(text: &str) -> Result<Vec<f64>, Failure> {
    let err = || Failure::Usage(format!("--grid: expected LO:HI:COUNT, got `{text}`"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(err());
    }
    let lo: f64 = parts[0].parse().map_err(|_| err())?;
    let hi: f64 = parts[1].parse().map_err(|_| err())?;
    let count: usize = parts[2].parse().map_err(|_| err())?;
    if !(lo < hi) || count < 2 {
        return Err(err());
    }
    Ok((0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        n_points: args.n_points,
        noise_sd: args.noise_sd,
        gap_1: parse_gap(&args.gap1, "--gap1")?,
        gap_2: parse_gap(&args.gap2, "--gap2")?,
        seed: args.seed,
        decay: args.decay,
        angular_frequency: args.omega,
        sigmoid_slope: args.sigmoid_slope,
    };
    let data = generate_artificial(&spec)
        .map_err(|e| Failure::Usage(format!("invalid generator settings: {e}")))?;
    write_file(&args.out.join("dataset.csv"), &io::dataset_csv(&data))?;
    write_file(&args.out.join("truth.csv"), &io::truth_csv(&data))?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let run = config::load_config(&args.config)?;
    if !run.data.dataset.exists() {
        return Err(Failure::Usage(format!(
            "data file {} does not exist",
            run.data.dataset.display()
        )));
    }
    let loaded = io::read_dataset(&run.data.dataset)?;
    let train_data = loaded.train()?;
    let spec = run.model.to_spec(train_data.outputs())?;
    let mut model = AmoGpModel::build(&spec, &train_data).map_err(numerical)?;
    let mut tc = run.train.to_config();
    if let Some(steps) = args.max_steps {
        tc.max_steps = steps;
    }
    let trace = fit(&mut model, &train_data, &tc).map_err(numerical)?;

    let dir = &run.output.dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    save_model(&model, &dir.join("model.toml"))
        .map_err(|e| Failure::Usage(format!("cannot write model document: {e}")))?;
    write_file(&dir.join("trace.csv"), &format!("# {DOCUMENT_VERSION}\n{}", trace.to_csv()))?;

    let elbo = model.elbo(&train_data, None).map_err(numerical)?;
    let mut metrics = format!("version = \"{DOCUMENT_VERSION}\"\n");
    writeln!(metrics, "train_elbo = {:?}", elbo.total).unwrap();
    writeln!(metrics, "train_points = {}", train_data.total_points()).unwrap();
    if let Some(step) = trace.converged_at {
        writeln!(metrics, "converged_at = {step}").unwrap();
    }
    if let Some(step) = trace.aborted_at {
        writeln!(metrics, "aborted_at = {step}").unwrap();
    }
    metrics.push_str("\n[test_log_likelihood]\n");
    let mut any_test = false;
    for d in 0..loaded.full.outputs() {
        if !loaded.test_mask[d].iter().any(|&t| t) {
            continue;
        }
        any_test = true;
        // score only output d's test points
        let mask: Vec<Vec<bool>> = (0..loaded.full.outputs())
            .map(|k| {
                if k == d {
                    loaded.test_mask[k].clone()
                } else {
                    vec![false; loaded.test_mask[k].len()]
                }
            })
            .collect();
        let ll = model.test_log_likelihood(&loaded.full, &mask).map_err(numerical)?;
        writeln!(metrics, "output_{d} = {ll:?}").unwrap();
    }
    if any_test {
        let ll = model
            .test_log_likelihood(&loaded.full, &loaded.test_mask)
            .map_err(numerical)?;
        writeln!(metrics, "overall = {ll:?}").unwrap();
    }
    write_file(&dir.join("metrics.toml"), &metrics)?;

    if let Some(step) = trace.aborted_at {
        return Err(Failure::Numerical(format!(
            "training aborted at step {step}; last finite state saved"
        )));
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), Failure> {
    let model = amogp::load_model(&args.model)
        .map_err(|e| Failure::Usage(format!("cannot load {}: {e}", args.model.display())))?;
    let xs = parse_grid(&args.grid)?;
    let d = args.output;
    if d >= model.outputs() {
        return Err(Failure::Usage(format!(
            "--output: index {d} out of range for a {}-output model",
            model.outputs()
        )));
    }
    let mut out = format!("# {DOCUMENT_VERSION}\n");
    if args.decompose {
        let dec = model.decompose(&xs, d).map_err(numerical)?;
        out.push_str("x,layer,mean,variance\n");
        for (layer, g) in [
            ("alignment", &dec.alignment),
            ("shared", &dec.shared),
            ("warping", &dec.warping),
        ] {
            for (i, &x) in xs.iter().enumerate() {
                writeln!(
                    out,
                    "{},{layer},{},{}",
                    fmt_f(x),
                    fmt_f(g.means[i]),
                    fmt_f(g.variances[i].max(0.0))
                )
                .unwrap();
            }
        }
    } else {
        let pred = model.predict(&xs, d).map_err(numerical)?;
        let n = args.samples.unwrap_or(0);
        let paths = if n > 0 {
            model.sample_functions(&xs, d, n, args.seed).map_err(numerical)?
        } else {
            Vec::new()
        };
        out.push_str("x,mean,variance");
        for k in 0..n {
            write!(out, ",sample_{k}").unwrap();
        }
        out.push('\n');
        for (i, &x) in xs.iter().enumerate() {
            write!(
                out,
                "{},{},{}",
                fmt_f(x),
                fmt_f(pred.noisy.means[i]),
                fmt_f(pred.noisy.variances[i].max(0.0))
            )
            .unwrap();
            for path in &paths {
                write!(out, ",{}", fmt_f(path[i])).unwrap();
            }
            out.push('\n');
        }
    }
    write_file(&args.out, &out)
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
