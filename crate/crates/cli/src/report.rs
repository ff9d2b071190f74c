//! Report files: JSON summaries, metric traces and tables in text and CSV.

use std::fs;
use std::path::Path;

use serde::Serialize;

use dynaquant::metrics::{fp32_megabytes, model_size, theoretical_speedup};
use dynaquant::model::Model;
use dynaquant::train::{DatasetEval, StepMetrics};

use crate::error::CliError;

/// Bumped whenever a report's JSON layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Headline numbers of a trained model on an image set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub bpp: f64,
    pub psnr_db: f64,
    /// Parameter-weighted bits of the quantized blocks.
    pub avg_bits: f64,
    /// Parameter-weighted bits of every headline parameter.
    pub model_bits: f64,
    pub fp32_size_mb: f64,
    pub model_size_mb: f64,
    pub speedup: f64,
    pub overhead_bytes: usize,
    pub rd_loss: f64,
}

impl FinalMetrics {
    pub fn new(model: &Model<f32>, eval: &DatasetEval) -> Result<Self, CliError> {
        let fp32 = fp32_megabytes(model.headline_params());
        Ok(Self {
            bpp: eval.bpp,
            psnr_db: eval.psnr,
            avg_bits: eval.avg_bits,
            model_bits: eval.model_bits,
            fp32_size_mb: fp32,
            model_size_mb: model_size(fp32, eval.model_bits)?,
            speedup: theoretical_speedup(eval.model_bits)?,
            overhead_bytes: model.overhead_bytes(),
            rd_loss: eval.rd_loss,
        })
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_csv(trace: &[StepMetrics]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "rate_bpp", "distortion", "psnr_db", "bits_loss", "avg_bits"])?;
    for m in trace {
        w.write_record([
            m.step.to_string(),
            m.loss.to_string(),
            m.rate.to_string(),
            m.distortion.to_string(),
            m.psnr.to_string(),
            opt(m.bits_loss),
            m.avg_bits.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

/// A small table rendered as aligned text and as CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| CliError::Other(e.to_string()))
    }

    /// Writes `<stem>.txt` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), CliError> {
        fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        Ok(())
    }
}

pub fn fmt(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}
