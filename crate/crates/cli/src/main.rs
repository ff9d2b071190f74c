use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynaquant::data::{SyntheticKind, SyntheticSpec};
use dynaquant_cli::{
    apply_seed_override, cmd_ablate, cmd_bdrate, cmd_eval, cmd_proxy_dump, cmd_sweep, cmd_synth, cmd_train,
    load_config, CliError, RunConfig, Suite, SEED_ENV,
};

#[derive(Parser)]
#[command(name = "dynaquant", version, about = "Quantization-aware training with dynamic bit-widths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, report and metric trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image rate, PSNR and layer bit-widths of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One training per value of sweep.lambdas, then an R-D curve.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation suite: dgm-vs-ste, dpa-components or bitset.
    Ablate {
        #[arg(long)]
        suite: Suite,
        /// Shared settings for every cell; built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the rounding proxy g and its derivative over x in [0, 3] as CSV.
    ProxyDump {
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 5.0, 10.0])]
        beta: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        samples_per_unit: usize,
        /// Standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BD-rate of a test curve against an anchor, both `bpp,psnr_db` CSVs.
    Bdrate { anchor: PathBuf, test: PathBuf },
    /// Write the synthetic image set as PNG files.
    Synth {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_delimiter = ',', default_value = "gradients,gaussian-blobs,band-limited-noise")]
        kinds: Vec<SyntheticKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_with_out(path: &Path, out: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(path)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = config_with_out(&config, out)?;
            let r = cmd_train(&cfg)?;
            println!(
                "bpp {:.4}  psnr {:.2} dB  avg bits {:.3}  model {:.4} MB  speedup {:.2}x  -> {}",
                r.final_metrics.bpp,
                r.final_metrics.psnr_db,
                r.final_metrics.avg_bits,
                r.final_metrics.model_size_mb,
                r.final_metrics.speedup,
                cfg.output_dir.display()
            );
        }
        Command::Eval { checkpoint, images, out } => {
            let r = cmd_eval(&checkpoint, &images, &out)?;
            println!(
                "{} images ({} skipped)  bpp {:.4}  psnr {:.2} dB  avg bits {:.3}",
                r.images.len(),
                r.skipped.len(),
                r.mean.bpp,
                r.mean.psnr_db,
                r.mean.avg_bits
            );
        }
        Command::Sweep { config, out } => {
            let cfg = config_with_out(&config, out)?;
            for p in cmd_sweep(&cfg)? {
                println!("lambda {}  bpp {:.4}  psnr {:.2} dB", p.lambda, p.bpp, p.psnr_db);
            }
        }
        Command::Ablate { suite, config, out } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => {
                    let mut c = RunConfig::default();
                    apply_seed_override(&mut c, std::env::var(SEED_ENV).ok().as_deref())?;
                    c.output_dir = PathBuf::from("runs").join(suite.name());
                    c
                }
            };
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            print!("{}", cmd_ablate(suite, &cfg)?.table.to_text());
        }
        Command::ProxyDump {
            beta,
            samples_per_unit,
            out,
        } => match out {
            Some(p) => {
                let mut w = BufWriter::new(File::create(&p)?);
                cmd_proxy_dump(&beta, samples_per_unit, &mut w)?;
                w.flush()?;
            }
            None => cmd_proxy_dump(&beta, samples_per_unit, io::stdout().lock())?,
        },
        Command::Bdrate { anchor, test } => {
            println!("{:.2}", cmd_bdrate(&anchor, &test)?);
        }
        Command::Synth {
            count,
            size,
            kinds,
            seed,
            out,
        } => {
            let spec = SyntheticSpec { count, size, kinds, seed };
            let n = cmd_synth(&spec, &out)?.len();
            println!("wrote {n} images to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
