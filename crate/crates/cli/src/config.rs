//! The TOML run configuration consumed by `train`.

use crate::Failure;
use amogp::{baseline_spec, BaselineKind, MiddleKind, ModelSpec, TrainConfig, WarpKind, DOCUMENT_VERSION};
use serde::Deserialize;
use std::path::PathBuf;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    pub data: DataSection,
    pub output: OutputSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset CSV with the output_index,x,y,split schema.
    pub dataset: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Directory receiving model.toml, trace.csv and metrics.toml.
    pub dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// amo | shallow_gp | mo_gp | dgp3 | custom
    pub kind: Option<String>,
    pub align_frozen: Option<Vec<bool>>,
    /// shared_cp | independent_rbf (custom layouts)
    pub middle: Option<String>,
    /// gp | frozen_identity | linear, one per output (custom layouts)
    pub warpings: Option<Vec<String>>,
    pub inducing_align: Option<usize>,
    pub inducing_middle: Option<usize>,
    pub inducing_warp: Option<usize>,
    pub latent_processes: Option<usize>,
    pub init_middle_lengthscale: Option<f64>,
    pub init_signal_variance: Option<f64>,
    pub init_latent_noise: Option<f64>,
    pub init_likelihood_noise: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub step_size: Option<f64>,
    pub max_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub prior_strength: Option<f64>,
    pub convergence_tol: Option<f64>,
    pub cp_freeze_steps: Option<usize>,
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if config.version != DOCUMENT_VERSION {
        return Err(Failure::Usage(format!(
            "{}: config version `{}` does not match `{DOCUMENT_VERSION}`",
            path.display(),
            config.version
        )));
    }
    Ok(config)
}

impl ModelSection {
    /// Resolve the section into a full model layout for `outputs` series.
    pub fn to_spec(&self, outputs: usize) -> Result<ModelSpec, Failure> {
        let kind = self.kind.as_deref().unwrap_or("amo");
        let mut spec = match kind {
            "amo" => amogp::amo_spec(outputs),
            "shallow_gp" => baseline_spec(BaselineKind::ShallowGp, outputs),
            "mo_gp" => baseline_spec(BaselineKind::MoGp, outputs),
            "dgp3" => baseline_spec(BaselineKind::Dgp3, outputs),
            "custom" => {
                let mut spec = amogp::amo_spec(outputs);
                spec.align_frozen = self
                    .align_frozen
                    .clone()
                    .ok_or_else(|| Failure::Usage("custom model needs align_frozen".into()))?;
                spec.middle = match self.middle.as_deref() {
                    Some("shared_cp") => MiddleKind::SharedCp,
                    Some("independent_rbf") => MiddleKind::IndependentRbf,
                    Some(other) => {
                        return Err(Failure::Usage(format!("unknown middle kind `{other}`")))
                    }
                    None => return Err(Failure::Usage("custom model needs middle".into())),
                };
                let names = self
                    .warpings
                    .clone()
                    .ok_or_else(|| Failure::Usage("custom model needs warpings".into()))?;
                spec.warpings = names
                    .iter()
                    .map(|w| match w.as_str() {
                        "gp" => Ok(WarpKind::Gp),
                        "frozen_identity" => Ok(WarpKind::FrozenIdentity),
                        "linear" => Ok(WarpKind::Linear),
                        other => Err(Failure::Usage(format!("unknown warping kind `{other}`"))),
                    })
                    .collect::<Result<_, _>>()?;
                spec
            }
            other => return Err(Failure::Usage(format!("unknown model kind `{other}`"))),
        };
        if spec.align_frozen.len() != outputs || spec.warpings.len() != outputs {
            return Err(Failure::Usage(format!(
                "model layout is for {} outputs but the dataset has {outputs}",
                spec.align_frozen.len()
            )));
        }
        if let Some(v) = self.inducing_align {
            spec.inducing_align = v;
        }
        if let Some(v) = self.inducing_middle {
            spec.inducing_middle = v;
        }
        if let Some(v) = self.inducing_warp {
            spec.inducing_warp = v;
        }
        if let Some(v) = self.latent_processes {
            spec.latent_processes = v;
        }
        if let Some(v) = self.init_middle_lengthscale {
            spec.init_middle_lengthscale = v;
        }
        if let Some(v) = self.init_signal_variance {
            spec.init_signal_variance = v;
        }
        if let Some(v) = self.init_latent_noise {
            spec.init_latent_noise = v;
        }
        if let Some(v) = self.init_likelihood_noise {
            spec.init_likelihood_noise = v;
        }
        Ok(spec)
    }
}

impl TrainSection {
    pub fn to_config(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        if let Some(v) = self.step_size {
            c.step_size = v;
        }
        if let Some(v) = self.max_steps {
            c.max_steps = v;
        }
        c.batch_size = self.batch_size;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.prior_strength {
            c.prior_strength = v;
        }
        c.convergence_tol = self.convergence_tol;
        if let Some(v) = self.cp_freeze_steps {
            c.cp_freeze_steps = v;
        }
        c
    }
}
