use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use dynaquant::data::{read_image_dir, synthetic_dataset, write_png, Image, SyntheticSpec};
use dynaquant::metrics::{bd_rate, RDCurve};
use dynaquant::quant::{dgm_grad, dgm_proxy};
use dynaquant::train::{DatasetEval, StepMetrics, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{fmt, trace_csv, write_json, FinalMetrics, Table, SCHEMA_VERSION};
use crate::load_dataset;

/// Contents of `report.json` for one training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub steps: u64,
    pub initial: FinalMetrics,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    /// Per quantized layer: how many images selected each bit-width.
    pub layer_bits: BTreeMap<String, BTreeMap<u32, usize>>,
    pub trace: Vec<StepMetrics>,
}

fn ensure_finite(what: &str, values: &[f64]) -> Result<(), CliError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{what} contains non-finite values")))
    }
}

fn check_report(r: &TrainReport) -> Result<(), CliError> {
    for m in [&r.initial, &r.final_metrics] {
        ensure_finite(
            "final metrics",
            &[m.bpp, m.psnr_db, m.avg_bits, m.model_bits, m.model_size_mb, m.speedup, m.rd_loss],
        )?;
    }
    for m in &r.trace {
        ensure_finite(
            "metric trace",
            &[m.loss, m.rate, m.distortion, m.psnr, m.avg_bits, m.bits_loss.unwrap_or(0.0)],
        )?;
    }
    Ok(())
}

/// Trains on `images` and writes `checkpoint.dqnt`, `report.json`,
/// `trace.csv` and `config.txt` into `out`.
pub fn run_training(cfg: &RunConfig, images: &[Image], out: &Path) -> Result<(TrainReport, Trainer), CliError> {
    let mut t = Trainer::new(cfg.model.clone(), cfg.train_config(), images)?;
    let initial = t.evaluate(images)?;
    let log_every = cfg.log_every.max(1);
    t.fit(images, cfg.steps, |m| {
        if m.step % log_every == 0 || m.step + 1 == cfg.steps {
            info!(
                "step {:>6}  loss {:.4}  bpp {:.4}  psnr {:.2} dB  bits {:.3}",
                m.step, m.loss, m.rate, m.psnr, m.avg_bits
            );
        }
    })?;
    let last = t.evaluate(images)?;
    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.echo_json(),
        steps: t.step,
        initial: FinalMetrics::new(&t.model, &initial)?,
        final_metrics: FinalMetrics::new(&t.model, &last)?,
        layer_bits: last.histogram.clone(),
        trace: t.trace.clone(),
    };
    check_report(&report)?;
    fs::create_dir_all(out)?;
    t.save(&out.join("checkpoint.dqnt"))?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("trace.csv"), trace_csv(&t.trace)?)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    info!(
        "final: bpp {:.4}  psnr {:.2} dB  avg bits {:.3}  size {:.4} MB",
        report.final_metrics.bpp,
        report.final_metrics.psnr_db,
        report.final_metrics.avg_bits,
        report.final_metrics.model_size_mb
    );
    Ok((report, t))
}

/// `train`: the dataset is loaded before anything is written, so a data
/// error leaves no partial outputs.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport, CliError> {
    let images = load_dataset(cfg)?;
    run_training(cfg, &images, &cfg.output_dir).map(|(r, _)| r)
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageRecord {
    pub path: String,
    pub bpp: f64,
    pub psnr_db: f64,
    /// Eval-mode bit-width chosen for each quantized layer.
    pub bits: BTreeMap<String, u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SkippedImage {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub bpp: f64,
    pub psnr_db: f64,
    pub avg_bits: f64,
    pub model_bits: f64,
    pub rd_loss: f64,
}

/// Contents of `eval.json`.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint: String,
    pub lambda: f64,
    pub layers: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub skipped: Vec<SkippedImage>,
    pub mean: EvalSummary,
    pub layer_bits: BTreeMap<String, BTreeMap<u32, usize>>,
}

/// `eval`: per-image rate, PSNR and layer bits of a trained checkpoint.
/// Writes `eval.json`, `eval.csv` and a one-point `rd.csv`.
pub fn cmd_eval(checkpoint: &Path, image_dir: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let trainer = Trainer::load(checkpoint)?;
    let loaded = read_image_dir(image_dir)?;
    if loaded.images.is_empty() {
        return Err(CliError::Data(format!("no readable images in {}", image_dir.display())));
    }
    let (paths, images): (Vec<PathBuf>, Vec<Image>) = loaded.images.into_iter().unzip();
    let eval: DatasetEval = trainer.evaluate(&images)?;
    let layers: Vec<String> = trainer.model.dq_blocks().map(|b| b.name.clone()).collect();
    let records: Vec<ImageRecord> = paths
        .iter()
        .zip(&eval.images)
        .map(|(p, e)| ImageRecord {
            path: p.display().to_string(),
            bpp: e.bpp,
            psnr_db: e.psnr,
            bits: layers
                .iter()
                .cloned()
                .zip(e.encoder_bits.iter().chain(&e.decoder_bits).copied())
                .collect(),
        })
        .collect();
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        checkpoint: checkpoint.display().to_string(),
        lambda: trainer.config.lambda,
        layers: layers.clone(),
        images: records,
        skipped: loaded
            .skipped
            .into_iter()
            .map(|(p, reason)| SkippedImage {
                path: p.display().to_string(),
                reason,
            })
            .collect(),
        mean: EvalSummary {
            bpp: eval.bpp,
            psnr_db: eval.psnr,
            avg_bits: eval.avg_bits,
            model_bits: eval.model_bits,
            rd_loss: eval.rd_loss,
        },
        layer_bits: eval.histogram.clone(),
    };
    ensure_finite("evaluation", &[eval.bpp, eval.psnr, eval.avg_bits, eval.rd_loss])?;

    fs::create_dir_all(out)?;
    write_json(&out.join("eval.json"), &report)?;
    let mut headers = vec!["image", "bpp", "psnr_db"];
    headers.extend(layers.iter().map(String::as_str));
    let mut table = Table::new(&headers);
    for r in &report.images {
        let mut row = vec![r.path.clone(), r.bpp.to_string(), r.psnr_db.to_string()];
        row.extend(layers.iter().map(|l| r.bits[l].to_string()));
        table.push(row);
    }
    fs::write(out.join("eval.csv"), table.to_csv()?)?;
    let point = RDCurve::new(vec![(eval.bpp, eval.psnr)])?;
    point.write_csv(File::create(out.join("rd.csv"))?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub avg_bits: f64,
}

/// `sweep`: one training per λ under `lambda_<λ>/`, then `sweep.txt`,
/// `sweep.csv` and an `rd.csv` ordered by rate.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepPoint>, CliError> {
    if cfg.sweep_lambdas.is_empty() {
        return Err(CliError::config("sweep.lambdas", "no values given"));
    }
    let images = load_dataset(cfg)?;
    let mut points = Vec::new();
    for &lambda in &cfg.sweep_lambdas {
        info!("sweep: lambda {lambda}");
        let run = RunConfig {
            lambda,
            ..cfg.clone()
        };
        let (report, _) = run_training(&run, &images, &cfg.output_dir.join(format!("lambda_{lambda}")))?;
        points.push(SweepPoint {
            lambda,
            bpp: report.final_metrics.bpp,
            psnr_db: report.final_metrics.psnr_db,
            avg_bits: report.final_metrics.avg_bits,
        });
    }
    let mut table = Table::new(&["lambda", "bpp", "psnr_db", "avg_bits"]);
    for p in &points {
        table.push(vec![p.lambda.to_string(), fmt(p.bpp, 4), fmt(p.psnr_db, 2), fmt(p.avg_bits, 3)]);
    }
    table.write(&cfg.output_dir, "sweep")?;
    let mut sorted: Vec<(f64, f64)> = points.iter().map(|p| (p.bpp, p.psnr_db)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    match RDCurve::new(sorted) {
        Ok(curve) => curve.write_csv(File::create(cfg.output_dir.join("rd.csv"))?)?,
        Err(e) => warn!("rd.csv not written: {e}"),
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProxyRow {
    pub beta: f64,
    pub x: f64,
    pub g: f64,
    pub g_prime: f64,
}

/// The rounding proxy and its derivative on `x ∈ [0, 3]`, evaluated on the
/// fractional part of `x` so the profile repeats every unit.
pub fn proxy_rows(betas: &[f64], samples_per_unit: usize) -> Result<Vec<ProxyRow>, CliError> {
    if betas.is_empty() {
        return Err(CliError::config("beta", "no values given"));
    }
    if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
        return Err(CliError::config("beta", format!("must be positive, got {b}")));
    }
    if samples_per_unit == 0 {
        return Err(CliError::config("samples-per-unit", "must be positive"));
    }
    let n = 3 * samples_per_unit;
    let mut rows = Vec::with_capacity(betas.len() * (n + 1));
    for &beta in betas {
        for i in 0..=n {
            let x = i as f64 / samples_per_unit as f64;
            let t = x - x.floor();
            rows.push(ProxyRow {
                beta,
                x,
                g: dgm_proxy(t, beta),
                g_prime: dgm_grad(t, beta),
            });
        }
    }
    Ok(rows)
}

/// `proxy-dump`: CSV with columns `beta,x,g,g_prime`.
pub fn cmd_proxy_dump(betas: &[f64], samples_per_unit: usize, out: impl Write) -> Result<(), CliError> {
    let rows = proxy_rows(betas, samples_per_unit)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["beta", "x", "g", "g_prime"])?;
    for r in rows {
        w.write_record([r.beta.to_string(), r.x.to_string(), r.g.to_string(), r.g_prime.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_curve(path: &Path) -> Result<RDCurve, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    RDCurve::read_csv(file).map_err(|e| match e {
        dynaquant::Error::Parse { line, detail } => {
            CliError::config(format!("{} line {line}", path.display()), detail)
        }
        other => CliError::config(path.display().to_string(), other.to_string()),
    })
}

/// `bdrate`: BD-rate of `test` against `anchor`, in percent.
pub fn cmd_bdrate(anchor: &Path, test: &Path) -> Result<f64, CliError> {
    let a = read_curve(anchor)?;
    let t = read_curve(test)?;
    Ok(bd_rate(&a, &t)?)
}

/// `synth`: writes the synthetic set as `synth_000.png`, `synth_001.png`, …
pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let images = synthetic_dataset(spec)?;
    fs::create_dir_all(out)?;
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let p = out.join(format!("synth_{i:03}.png"));
        write_png(&p, img)?;
        paths.push(p);
    }
    Ok(paths)
}
