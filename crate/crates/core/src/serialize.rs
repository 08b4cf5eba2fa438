//! TOML model documents.
//!
//! A trained model serializes to a versioned, human-readable TOML document.
//! Floats are written in shortest round-trip form, so save → load → save is
//! byte-identical and load → save recovers every parameter bit for bit.

use crate::model::{Alignment, AmoGpModel, CpBlock, GpState, Middle, Warping};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Document format identifier; bump on breaking layout changes.
pub const DOCUMENT_VERSION: &str = "amogp-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    version: String,
    outputs: usize,
    alignments: Vec<AlignmentDoc>,
    middle: MiddleDoc,
    warpings: Vec<WarpingDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GpDoc {
    log_variance: f64,
    log_lengthscale: f64,
    log_noise: f64,
    z: Vec<f64>,
    m: Vec<f64>,
    s_packed: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentDoc {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gp: Option<GpDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockDoc {
    z: Vec<f64>,
    m: Vec<f64>,
    s_packed: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MiddleDoc {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    latent_processes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_scales: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_lengthscales: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<BlockDoc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<GpDoc>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WarpingDoc {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intercept: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gp: Option<GpDoc>,
}

fn gp_doc(g: &GpState) -> GpDoc {
    GpDoc {
        log_variance: g.log_variance,
        log_lengthscale: g.log_lengthscale,
        log_noise: g.log_noise,
        z: g.z.clone(),
        m: g.m.clone(),
        s_packed: g.s_packed.clone(),
    }
}

fn gp_state(doc: GpDoc, what: &str) -> Result<GpState> {
    let m = doc.z.len();
    if doc.m.len() != m || doc.s_packed.len() != m * (m + 1) / 2 {
        return Err(Error::Document(format!(
            "{what}: inconsistent inducing block sizes ({} z, {} m, {} packed)",
            m,
            doc.m.len(),
            doc.s_packed.len()
        )));
    }
    Ok(GpState {
        log_variance: doc.log_variance,
        log_lengthscale: doc.log_lengthscale,
        log_noise: doc.log_noise,
        z: doc.z,
        m: doc.m,
        s_packed: doc.s_packed,
    })
}

/// Render a model as a TOML document.
pub fn model_to_toml(model: &AmoGpModel) -> Result<String> {
    let alignments = model
        .alignments
        .iter()
        .map(|a| match a {
            Alignment::Frozen => AlignmentDoc { kind: "frozen_identity".into(), gp: None },
            Alignment::Gp(g) => AlignmentDoc { kind: "gp".into(), gp: Some(gp_doc(g)) },
        })
        .collect();
    let middle = match &model.middle {
        Middle::SharedCp { latent_processes, log_scales, log_lengthscales, log_noise, blocks } => {
            MiddleDoc {
                kind: "shared_cp".into(),
                latent_processes: Some(*latent_processes),
                log_scales: Some(log_scales.clone()),
                log_lengthscales: Some(log_lengthscales.clone()),
                log_noise: Some(*log_noise),
                blocks: Some(
                    blocks
                        .iter()
                        .map(|b| BlockDoc {
                            z: b.z.clone(),
                            m: b.m.clone(),
                            s_packed: b.s_packed.clone(),
                        })
                        .collect(),
                ),
                layers: None,
            }
        }
        Middle::IndependentRbf(layers) => MiddleDoc {
            kind: "independent_rbf".into(),
            latent_processes: None,
            log_scales: None,
            log_lengthscales: None,
            log_noise: None,
            blocks: None,
            layers: Some(layers.iter().map(gp_doc).collect()),
        },
    };
    let warpings = model
        .warpings
        .iter()
        .map(|w| match w {
            Warping::Frozen { log_noise } => WarpingDoc {
                kind: "frozen_identity".into(),
                log_noise: Some(*log_noise),
                slope: None,
                intercept: None,
                gp: None,
            },
            Warping::Linear { slope, intercept, log_noise } => WarpingDoc {
                kind: "linear".into(),
                log_noise: Some(*log_noise),
                slope: Some(*slope),
                intercept: Some(*intercept),
                gp: None,
            },
            Warping::Gp(g) => WarpingDoc {
                kind: "gp".into(),
                log_noise: None,
                slope: None,
                intercept: None,
                gp: Some(gp_doc(g)),
            },
        })
        .collect();
    let doc = ModelDoc {
        version: DOCUMENT_VERSION.into(),
        outputs: model.outputs(),
        alignments,
        middle,
        warpings,
    };
    toml::to_string_pretty(&doc).map_err(|e| Error::Document(e.to_string()))
}

/// Parse a model from a TOML document.
pub fn model_from_toml(text: &str) -> Result<AmoGpModel> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
    if doc.version != DOCUMENT_VERSION {
        return Err(Error::Document(format!(
            "unsupported document version {:?} (expected {DOCUMENT_VERSION:?})",
            doc.version
        )));
    }
    let d_out = doc.outputs;
    if doc.alignments.len() != d_out || doc.warpings.len() != d_out {
        return Err(Error::Document(format!(
            "document declares {d_out} outputs but has {} alignments and {} warpings",
            doc.alignments.len(),
            doc.warpings.len()
        )));
    }
    let mut alignments = Vec::with_capacity(d_out);
    for (d, a) in doc.alignments.into_iter().enumerate() {
        match a.kind.as_str() {
            "frozen_identity" => alignments.push(Alignment::Frozen),
            "gp" => {
                let g = a.gp.ok_or_else(|| {
                    Error::Document(format!("alignment {d}: missing gp table"))
                })?;
                alignments.push(Alignment::Gp(gp_state(g, &format!("alignment {d}"))?));
            }
            other => {
                return Err(Error::Document(format!("alignment {d}: unknown kind {other:?}")))
            }
        }
    }
    let middle = match doc.middle.kind.as_str() {
        "shared_cp" => {
            let missing = |f: &str| Error::Document(format!("shared_cp middle: missing {f}"));
            let latent_processes =
                doc.middle.latent_processes.ok_or_else(|| missing("latent_processes"))?;
            let log_scales = doc.middle.log_scales.ok_or_else(|| missing("log_scales"))?;
            let log_lengthscales =
                doc.middle.log_lengthscales.ok_or_else(|| missing("log_lengthscales"))?;
            let log_noise = doc.middle.log_noise.ok_or_else(|| missing("log_noise"))?;
            let blocks_doc = doc.middle.blocks.ok_or_else(|| missing("blocks"))?;
            if latent_processes == 0
                || log_scales.len() != d_out * latent_processes
                || log_lengthscales.len() != d_out * latent_processes
                || blocks_doc.len() != d_out
            {
                return Err(Error::Document("shared_cp middle: inconsistent sizes".into()));
            }
            let mut blocks = Vec::with_capacity(d_out);
            for (d, b) in blocks_doc.into_iter().enumerate() {
                let m = b.z.len();
                if b.m.len() != m || b.s_packed.len() != m * (m + 1) / 2 {
                    return Err(Error::Document(format!(
                        "shared_cp middle: inconsistent block {d} sizes"
                    )));
                }
                blocks.push(CpBlock { z: b.z, m: b.m, s_packed: b.s_packed });
            }
            Middle::SharedCp { latent_processes, log_scales, log_lengthscales, log_noise, blocks }
        }
        "independent_rbf" => {
            let layers_doc = doc
                .middle
                .layers
                .ok_or_else(|| Error::Document("independent_rbf middle: missing layers".into()))?;
            if layers_doc.len() != d_out {
                return Err(Error::Document(format!(
                    "independent_rbf middle: {} layers for {d_out} outputs",
                    layers_doc.len()
                )));
            }
            let mut layers = Vec::with_capacity(d_out);
            for (d, g) in layers_doc.into_iter().enumerate() {
                layers.push(gp_state(g, &format!("middle layer {d}"))?);
            }
            Middle::IndependentRbf(layers)
        }
        other => return Err(Error::Document(format!("middle: unknown kind {other:?}"))),
    };
    let mut warpings = Vec::with_capacity(d_out);
    for (d, w) in doc.warpings.into_iter().enumerate() {
        let need_noise =
            |v: Option<f64>| v.ok_or_else(|| Error::Document(format!("warping {d}: missing log_noise")));
        match w.kind.as_str() {
            "frozen_identity" => {
                warpings.push(Warping::Frozen { log_noise: need_noise(w.log_noise)? })
            }
            "linear" => warpings.push(Warping::Linear {
                slope: w
                    .slope
                    .ok_or_else(|| Error::Document(format!("warping {d}: missing slope")))?,
                intercept: w
                    .intercept
                    .ok_or_else(|| Error::Document(format!("warping {d}: missing intercept")))?,
                log_noise: need_noise(w.log_noise)?,
            }),
            "gp" => {
                let g = w
                    .gp
                    .ok_or_else(|| Error::Document(format!("warping {d}: missing gp table")))?;
                warpings.push(Warping::Gp(gp_state(g, &format!("warping {d}"))?));
            }
            other => return Err(Error::Document(format!("warping {d}: unknown kind {other:?}"))),
        }
    }
    Ok(AmoGpModel { alignments, middle, warpings })
}

/// Write a model document to disk.
pub fn save_model(model: &AmoGpModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_toml(model)?)?;
    Ok(())
}

/// Read a model document from disk.
pub fn load_model(path: &Path) -> Result<AmoGpModel> {
    model_from_toml(&std::fs::read_to_string(path)?)
}
