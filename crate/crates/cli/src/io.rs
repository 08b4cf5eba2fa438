//! CSV schemas shared by the subcommands.
//!
//! Every file starts with a `# <version>` line naming the producing schema.
//! Floats are written in scientific notation with 13 significant digits.

use crate::Failure;
use amogp::{ArtificialDataset, LabeledDataset, Series, DOCUMENT_VERSION};
use std::fmt::Write as _;
use std::path::Path;

pub fn fmt_f(v: f64) -> String {
    format!("{v:.12e}")
}

/// Write a file, creating parent directories as needed.
pub fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, contents)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Render the dataset CSV: output_index, x, y, split.
pub fn dataset_csv(data: &ArtificialDataset) -> String {
    let mut out = format!("# {DOCUMENT_VERSION}\noutput_index,x,y,split\n");
    for (d, o) in data.outputs.iter().enumerate() {
        for i in 0..o.x.len() {
            let split = if o.is_test[i] { "test" } else { "train" };
            writeln!(out, "{d},{},{},{split}", fmt_f(o.x[i]), fmt_f(o.y[i])).unwrap();
        }
    }
    out
}

/// Render the ground truth CSV: the per-point decomposition of the generator.
pub fn truth_csv(data: &ArtificialDataset) -> String {
    let mut out = format!("# {DOCUMENT_VERSION}\noutput_index,x,aligned,latent,clean\n");
    for (d, o) in data.outputs.iter().enumerate() {
        for i in 0..o.x.len() {
            writeln!(
                out,
                "{d},{},{},{},{}",
                fmt_f(o.x[i]),
                fmt_f(o.aligned[i]),
                fmt_f(o.latent[i]),
                fmt_f(o.clean[i])
            )
            .unwrap();
        }
    }
    out
}

/// A dataset CSV parsed back into series plus its train/test split.
pub struct LoadedDataset {
    /// All points, in file order per output.
    pub full: LabeledDataset,
    /// Per-output test masks aligned with `full`.
    pub test_mask: Vec<Vec<bool>>,
}

impl LoadedDataset {
    /// The training subset.
    pub fn train(&self) -> Result<LabeledDataset, Failure> {
        let series = (0..self.full.outputs())
            .map(|d| {
                let s = self.full.series(d);
                let keep = |v: &[f64]| {
                    v.iter()
                        .zip(&self.test_mask[d])
                        .filter(|(_, &t)| !t)
                        .map(|(x, _)| *x)
                        .collect::<Vec<f64>>()
                };
                Series { x: keep(&s.x), y: keep(&s.y) }
            })
            .collect();
        LabeledDataset::new(series).map_err(|e| Failure::Usage(format!("dataset invalid: {e}")))
    }
}

/// Parse a dataset CSV written by `generate` (or any file with the same
/// schema). Comment lines starting with `#` are skipped.
pub fn read_dataset(path: &Path) -> Result<LoadedDataset, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let bad = |line: usize, msg: String| Failure::Usage(format!("{}:{line}: {msg}", path.display()));
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    let mut saw_header = false;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != "output_index,x,y,split" {
                return Err(bad(idx + 1, format!("unexpected header `{line}`")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(idx + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let d: usize = fields[0]
            .parse()
            .map_err(|_| bad(idx + 1, format!("bad output_index `{}`", fields[0])))?;
        let x: f64 = fields[1]
            .parse()
            .map_err(|_| bad(idx + 1, format!("bad x `{}`", fields[1])))?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|_| bad(idx + 1, format!("bad y `{}`", fields[2])))?;
        let test = match fields[3] {
            "train" => false,
            "test" => true,
            other => return Err(bad(idx + 1, format!("bad split `{other}`"))),
        };
        while xs.len() <= d {
            xs.push(Vec::new());
            ys.push(Vec::new());
            masks.push(Vec::new());
        }
        xs[d].push(x);
        ys[d].push(y);
        masks[d].push(test);
    }
    if !saw_header || xs.is_empty() {
        return Err(Failure::Usage(format!("{}: no data rows", path.display())));
    }
    if xs.iter().any(|v| v.is_empty()) {
        return Err(Failure::Usage(format!(
            "{}: output indices must be contiguous from 0",
            path.display()
        )));
    }
    let series = xs
        .into_iter()
        .zip(ys)
        .map(|(x, y)| Series { x, y })
        .collect();
    let full = LabeledDataset::new(series)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(LoadedDataset { full, test_mask: masks })
}
