//! Ablation suites: matched grids of short trainings over shared seeds.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use log::{info, warn};
use serde::Serialize;

use crate::commands::run_training;
use crate::config::{ModeName, RunConfig};
use crate::error::CliError;
use crate::load_dataset;
use crate::report::{fmt, write_json, Table, SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Fixed bit-width training with the plain straight-through rule vs
    /// distance-aware modulation.
    DgmVsSte,
    /// Fixed bit-width training with each quantizer component switched off.
    DpaComponents,
    /// Dynamic training over two candidate bit sets.
    Bitset,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::DgmVsSte, Suite::DpaComponents, Suite::Bitset];

    pub fn name(self) -> &'static str {
        match self {
            Suite::DgmVsSte => "dgm-vs-ste",
            Suite::DpaComponents => "dpa-components",
            Suite::Bitset => "bitset",
        }
    }

    /// (label, directory slug, config) for every row of the table.
    fn variants(self, base: &RunConfig) -> Vec<(String, String, RunConfig)> {
        let fixed = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            c.model.dynamic = false;
            f(&mut c);
            c
        };
        match self {
            Suite::DgmVsSte => vec![
                ("ste".into(), "ste".into(), fixed(&|c| c.mode = ModeName::Ste)),
                ("dgm".into(), "dgm".into(), fixed(&|c| c.mode = ModeName::Dgm)),
            ],
            Suite::DpaComponents => vec![
                ("w/o learnable s".into(), "no-scale".into(), fixed(&|c| {
                    c.mode = ModeName::Dgm;
                    c.learn_scale = false;
                })),
                ("w/o learnable z".into(), "no-zero-point".into(), fixed(&|c| {
                    c.mode = ModeName::Dgm;
                    c.learn_zero_point = false;
                })),
                ("w/o g(x)".into(), "no-proxy".into(), fixed(&|c| c.mode = ModeName::Ste)),
                ("full".into(), "full".into(), fixed(&|c| {
                    c.mode = ModeName::Dgm;
                    c.learn_scale = true;
                    c.learn_zero_point = true;
                })),
            ],
            Suite::Bitset => [[4, 6, 8], [6, 8, 10]]
                .into_iter()
                .map(|set| {
                    let mut c = base.clone();
                    c.model.dynamic = true;
                    c.model.bits = set.to_vec();
                    (
                        format!("{{{},{},{}}}", set[0], set[1], set[2]),
                        format!("bits-{}-{}-{}", set[0], set[1], set[2]),
                        c,
                    )
                })
                .collect(),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| CliError::config("suite", format!("unknown suite `{s}` (dgm-vs-ste, dpa-components, bitset)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub bits: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    /// Final eval-mode rate-distortion loss.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: Option<CellResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    /// Per variant means over the seeds that finished.
    pub table: Table,
}

impl AblationReport {
    pub fn cell(&self, variant: &str, seed: u64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.variant == variant && c.seed == seed)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs every (variant, seed) cell of `suite` with `base` as the shared
/// configuration. A failing cell is recorded and the suite carries on.
///
/// Writes `table.txt`, `table.csv`, `cells.csv` and `ablation.json` into
/// `base.output_dir`, one run directory per cell under `cells/`, and for
/// `dgm-vs-ste` a per-seed `comparison.csv`.
pub fn cmd_ablate(suite: Suite, base: &RunConfig) -> Result<AblationReport, CliError> {
    if base.ablate_seeds.is_empty() {
        return Err(CliError::config("ablate.seeds", "no seeds given"));
    }
    let images = load_dataset(base)?;
    let out = &base.output_dir;
    let variants = suite.variants(base);
    let mut cells = Vec::new();
    for (label, slug, cfg) in &variants {
        for &seed in &base.ablate_seeds {
            let dir = out.join("cells").join(slug).join(format!("seed{seed}"));
            let run = RunConfig {
                seed,
                output_dir: dir.clone(),
                ..cfg.clone()
            };
            info!("{suite}: {label}, seed {seed}");
            let outcome = run.validate().and_then(|_| run_training(&run, &images, &dir));
            let (result, error) = match outcome {
                Ok((r, _)) => (
                    Some(CellResult {
                        bits: r.final_metrics.avg_bits,
                        bpp: r.final_metrics.bpp,
                        psnr_db: r.final_metrics.psnr_db,
                        loss: r.final_metrics.rd_loss,
                    }),
                    None,
                ),
                Err(e) => {
                    warn!("{suite}: {label}, seed {seed} failed: {e}");
                    (None, Some(e.to_string()))
                }
            };
            cells.push(Cell {
                variant: label.clone(),
                seed,
                dir,
                result,
                error,
            });
        }
    }

    let mut table = Table::new(&["variant", "bits", "bpp", "psnr_db", "loss", "seeds"]);
    for (label, _, _) in &variants {
        let ok: Vec<&CellResult> = cells
            .iter()
            .filter(|c| &c.variant == label)
            .filter_map(|c| c.result.as_ref())
            .collect();
        let col = |f: fn(&CellResult) -> f64, digits| {
            mean(ok.iter().map(|r| f(r))).map_or("failed".to_string(), |v| fmt(v, digits))
        };
        table.push(vec![
            label.clone(),
            col(|r| r.bits, 2),
            col(|r| r.bpp, 4),
            col(|r| r.psnr_db, 2),
            col(|r| r.loss, 4),
            format!("{}/{}", ok.len(), base.ablate_seeds.len()),
        ]);
    }

    let report = AblationReport {
        schema_version: SCHEMA_VERSION,
        suite,
        seeds: base.ablate_seeds.clone(),
        cells,
        table,
    };
    fs::create_dir_all(out)?;
    report.table.write(out, "table")?;
    write_json(&out.join("ablation.json"), &report)?;

    let mut w = csv::Writer::from_path(out.join("cells.csv"))?;
    w.write_record(["variant", "seed", "status", "bits", "bpp", "psnr_db", "loss", "error"])?;
    for c in &report.cells {
        let nums = c.result.as_ref().map_or(vec![String::new(); 4], |r| {
            vec![r.bits.to_string(), r.bpp.to_string(), r.psnr_db.to_string(), r.loss.to_string()]
        });
        let status = if c.result.is_some() { "ok" } else { "failed" };
        let mut row = vec![c.variant.clone(), c.seed.to_string(), status.into()];
        row.extend(nums);
        row.push(c.error.clone().unwrap_or_default());
        w.write_record(row)?;
    }
    w.flush()?;

    if suite == Suite::DgmVsSte {
        let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
        w.write_record(["seed", "ste_loss", "dgm_loss"])?;
        let loss = |v: &str, s: u64| {
            report
                .cell(v, s)
                .and_then(|c| c.result.as_ref())
                .map_or(String::new(), |r| r.loss.to_string())
        };
        for &s in &report.seeds {
            w.write_record([s.to_string(), loss("ste", s), loss("dgm", s)])?;
        }
        w.flush()?;
    }
    Ok(report)
}
