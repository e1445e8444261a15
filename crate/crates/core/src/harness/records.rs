//! Training-dynamics files.
//!
//! Record files are CSV with the header `step,accuracy,entropy,length,reward`;
//! floats use 17 significant digits so they read back bit-exactly. The
//! `reward` column carries the training loss for distillation runs.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::objectives::DynamicsRecord;

pub const RECORD_HEADER: &str = "step,accuracy,entropy,length,reward";

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn records_to_csv(records: &[DynamicsRecord]) -> String {
    let mut out = String::from(RECORD_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            fmt_f64(r.accuracy),
            fmt_f64(r.mean_entropy),
            fmt_f64(r.mean_len),
            fmt_f64(r.value)
        ));
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<DynamicsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RECORD_HEADER => {}
        other => return Err(Error::Format(format!("expected header `{RECORD_HEADER}`, got {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("record {i}: expected 5 fields, got {}", fields.len())));
            }
            let num = |j: usize| -> Result<f64> {
                fields[j]
                    .parse()
                    .map_err(|e| Error::Format(format!("record {i} field {j}: {e}")))
            };
            Ok(DynamicsRecord {
                step: fields[0]
                    .parse()
                    .map_err(|e| Error::Format(format!("record {i} step: {e}")))?,
                accuracy: num(1)?,
                mean_entropy: num(2)?,
                mean_len: num(3)?,
                value: num(4)?,
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[DynamicsRecord]) -> Result<()> {
    std::fs::write(path, records_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<DynamicsRecord>> {
    parse_records(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// The three diagnostics plotted over training.
pub const DIAGNOSTICS: [&str; 3] = ["accuracy", "length", "entropy"];

fn diagnostic(r: &DynamicsRecord, name: &str) -> f64 {
    match name {
        "accuracy" => r.accuracy,
        "length" => r.mean_len,
        "entropy" => r.mean_entropy,
        _ => unreachable!("unknown diagnostic {name}"),
    }
}

/// Writes `<run>_<diagnostic>.dat` (two columns: step, value) for each
/// diagnostic into `dir` and returns the paths.
pub fn emit_plot_data(records: &[DynamicsRecord], dir: &Path, run: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    DIAGNOSTICS
        .iter()
        .map(|name| {
            let path = dir.join(format!("{run}_{name}.dat"));
            let mut out = format!("# step {name}\n");
            for r in records {
                out.push_str(&format!("{} {}\n", r.step, fmt_f64(diagnostic(r, name))));
            }
            std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
