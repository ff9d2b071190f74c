//! Command implementations behind the `dynaquant` binary. Every command
//! writes only inside the output directory it is given.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::fs;
use std::path::Path;

use dynaquant::data::{read_image_dir, synthetic_dataset, Image};

pub use ablate::{cmd_ablate, AblationReport, Suite};
pub use commands::{
    cmd_bdrate, cmd_eval, cmd_proxy_dump, cmd_sweep, cmd_synth, cmd_train, proxy_rows, run_training, EvalReport,
    ProxyRow, SweepPoint, TrainReport,
};
pub use config::{DataSource, ModeName, RunConfig};
pub use error::CliError;

/// Environment variable that replaces `train.seed`.
pub const SEED_ENV: &str = "DYNAQUANT_SEED";

/// Replaces the configured seed with `value` when one is given.
pub fn apply_seed_override(cfg: &mut RunConfig, value: Option<&str>) -> Result<(), CliError> {
    if let Some(v) = value {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::config(SEED_ENV, format!("expected an unsigned integer, got `{v}`")))?;
    }
    Ok(())
}

/// Reads, parses and validates a config file, honouring the seed override
/// in the environment.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    apply_seed_override(&mut cfg, std::env::var(SEED_ENV).ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

/// The training images named by the config. An empty set is a data error.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<Image>, CliError> {
    let images = match &cfg.data {
        DataSource::Synthetic => synthetic_dataset(&cfg.synthetic)?,
        // unreadable files are logged and skipped by the reader
        DataSource::Dir(dir) => read_image_dir(dir)?.images.into_iter().map(|(_, img)| img).collect(),
    };
    if images.is_empty() {
        return Err(CliError::Data("the dataset contains no images".into()));
    }
    let crop = cfg.crop_size;
    if let Some(small) = images.iter().find(|i| i.shape()[1] < crop || i.shape()[2] < crop) {
        return Err(CliError::Data(format!(
            "image of size {}x{} is smaller than train.crop_size = {crop}",
            small.shape()[2],
            small.shape()[1]
        )));
    }
    Ok(images)
}
