//! Run configuration files: UTF-8 text, one `dotted.key = value` per line,
//! `#` starts a comment line. Unknown and duplicate keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use dynaquant::data::{SyntheticKind, SyntheticSpec};
use dynaquant::model::ModelConfig;
use dynaquant::quant::GradientMode;
use dynaquant::train::{BetaRamp, TrainConfig};

use crate::error::CliError;

/// Default λ grid for rate-distortion sweeps.
pub const LAMBDA_GRID: [f64; 4] = [0.0018, 0.0067, 0.025, 0.0932];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeName {
    Ste,
    Dgm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: String,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub mode: ModeName,
    pub beta: f64,
    pub beta_ramp_to: Option<f64>,
    pub beta_ramp_steps: u64,
    pub learn_scale: bool,
    pub learn_zero_point: bool,
    pub data: DataSource,
    pub synthetic: SyntheticSpec,
    pub sweep_lambdas: Vec<f64>,
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            experiment: "train".into(),
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig {
                channels: 16,
                latent_channels: 16,
                ..ModelConfig::default()
            },
            lambda: t.lambda,
            gamma: t.gamma,
            lr: t.lr,
            batch_size: t.batch_size,
            crop_size: t.crop_size,
            steps: t.steps,
            seed: t.seed,
            log_every: 100,
            mode: ModeName::Dgm,
            beta: dynaquant::quant::DEFAULT_BETA,
            beta_ramp_to: None,
            beta_ramp_steps: 0,
            learn_scale: true,
            learn_zero_point: true,
            data: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            sweep_lambdas: LAMBDA_GRID.to_vec(),
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn positive<T: PartialOrd + Default + Display>(key: &str, v: T) -> Result<T, CliError> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(CliError::config(key, format!("must be positive, got {v}")))
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("line {}", i + 1), "expected `key = value`")
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::config(key, format!("duplicate key on line {}", i + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "experiment.kind" => match v {
                "train" | "sweep" | "ablate" => self.experiment = v.to_string(),
                _ => return Err(CliError::config(key, format!("unknown experiment `{v}`"))),
            },
            "output.dir" => self.output_dir = PathBuf::from(v),
            "train.lambda" => self.lambda = positive(key, parse(key, v)?)?,
            "train.gamma" => {
                let g: f64 = parse(key, v)?;
                if !(g >= 0.0) {
                    return Err(CliError::config(key, format!("must be non-negative, got {g}")));
                }
                self.gamma = g;
            }
            "train.lr" => self.lr = positive(key, parse(key, v)?)?,
            "train.batch_size" => self.batch_size = positive(key, parse(key, v)?)?,
            "train.crop_size" => self.crop_size = positive(key, parse(key, v)?)?,
            "train.steps" => self.steps = positive(key, parse(key, v)?)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.log_every" => self.log_every = positive(key, parse(key, v)?)?,
            "quant.mode" => {
                self.mode = match v {
                    "ste" => ModeName::Ste,
                    "dgm" => ModeName::Dgm,
                    _ => return Err(CliError::config(key, format!("expected ste or dgm, got `{v}`"))),
                }
            }
            "quant.beta" => self.beta = positive(key, parse(key, v)?)?,
            "quant.beta_ramp_to" => {
                self.beta_ramp_to = if v == "none" { None } else { Some(positive(key, parse(key, v)?)?) }
            }
            "quant.beta_ramp_steps" => self.beta_ramp_steps = parse(key, v)?,
            "quant.learn_scale" => self.learn_scale = parse_bool(key, v)?,
            "quant.learn_zero_point" => self.learn_zero_point = parse_bool(key, v)?,
            "model.channels" => self.model.channels = positive(key, parse(key, v)?)?,
            "model.latent_channels" => self.model.latent_channels = positive(key, parse(key, v)?)?,
            "model.stages" => self.model.stages = parse(key, v)?,
            "model.kernel" => self.model.kernel = parse(key, v)?,
            "model.bits" => {
                let mut bits: Vec<u32> = parse_list(key, v)?;
                bits.sort_unstable();
                dynaquant::selector::validate_bit_set(&bits).map_err(|e| CliError::config(key, e.to_string()))?;
                self.model.bits = bits;
            }
            "model.dynamic" => self.model.dynamic = parse_bool(key, v)?,
            "model.fixed_bits" => {
                let b: u32 = parse(key, v)?;
                dynaquant::quant::check_bits(b).map_err(|e| CliError::config(key, e.to_string()))?;
                self.model.fixed_bits = b;
            }
            "data.source" => match v {
                "synthetic" => self.data = DataSource::Synthetic,
                "dir" => {
                    if !matches!(self.data, DataSource::Dir(_)) {
                        self.data = DataSource::Dir(PathBuf::new());
                    }
                }
                _ => return Err(CliError::config(key, format!("expected synthetic or dir, got `{v}`"))),
            },
            "data.path" => self.data = DataSource::Dir(PathBuf::from(v)),
            "data.count" => self.synthetic.count = parse(key, v)?,
            "data.size" => {
                let s: usize = parse(key, v)?;
                if s == 0 || s % 8 != 0 {
                    return Err(CliError::config(key, format!("must be a positive multiple of 8, got {s}")));
                }
                self.synthetic.size = s;
            }
            "data.kinds" => {
                let kinds: Vec<SyntheticKind> = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|e: dynaquant::Error| CliError::config(key, e.to_string())))
                    .collect::<Result<_, _>>()?;
                if kinds.is_empty() {
                    return Err(CliError::config(key, "needs at least one kind"));
                }
                self.synthetic.kinds = kinds;
            }
            "data.seed" => self.synthetic.seed = parse(key, v)?,
            "sweep.lambdas" => {
                let ls: Vec<f64> = parse_list(key, v)?;
                if ls.is_empty() || ls.iter().any(|&l| !(l > 0.0)) {
                    return Err(CliError::config(key, "needs positive values"));
                }
                self.sweep_lambdas = ls;
            }
            "ablate.seeds" => {
                let s: Vec<u64> = parse_list(key, v)?;
                if s.is_empty() {
                    return Err(CliError::config(key, "needs at least one seed"));
                }
                self.ablate_seeds = s;
            }
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.beta_ramp_to.is_some() && self.mode != ModeName::Dgm {
            return Err(CliError::config("quant.beta_ramp_to", "a beta ramp needs quant.mode = dgm"));
        }
        if self.beta_ramp_to.is_some() && self.beta_ramp_steps == 0 {
            return Err(CliError::config("quant.beta_ramp_steps", "must be positive when a ramp is set"));
        }
        if let DataSource::Dir(p) = &self.data {
            if p.as_os_str().is_empty() {
                return Err(CliError::config("data.path", "required when data.source = dir"));
            }
        }
        if self.model.stages < 2 {
            return Err(CliError::config("model.stages", "must be at least 2"));
        }
        if self.model.kernel % 2 == 0 {
            return Err(CliError::config("model.kernel", "must be odd"));
        }
        self.model
            .validate()
            .map_err(|e| CliError::config("model", e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::config("train", e.to_string()))
    }

    pub fn gradient_mode(&self) -> GradientMode {
        match self.mode {
            ModeName::Ste => GradientMode::Ste,
            ModeName::Dgm => GradientMode::Dgm { beta: self.beta },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            lr: self.lr,
            batch_size: self.batch_size,
            crop_size: self.crop_size,
            steps: self.steps,
            seed: self.seed,
            mode: self.gradient_mode(),
            beta_ramp: self.beta_ramp_to.map(|to| BetaRamp {
                to,
                steps: self.beta_ramp_steps,
            }),
            learn_scale: self.learn_scale,
            learn_zero_point: self.learn_zero_point,
        }
    }

    /// Every key with its effective value, in file order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let (source, path) = match &self.data {
            DataSource::Synthetic => ("synthetic", None),
            DataSource::Dir(p) => ("dir", Some(p.display().to_string())),
        };
        let mut out = vec![
            ("experiment.kind", self.experiment.clone()),
            ("output.dir", self.output_dir.display().to_string()),
            ("train.lambda", self.lambda.to_string()),
            ("train.gamma", self.gamma.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.crop_size", self.crop_size.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.log_every", self.log_every.to_string()),
            ("quant.mode", if self.mode == ModeName::Ste { "ste" } else { "dgm" }.into()),
            ("quant.beta", self.beta.to_string()),
            ("quant.beta_ramp_to", self.beta_ramp_to.map_or("none".into(), |b| b.to_string())),
            ("quant.beta_ramp_steps", self.beta_ramp_steps.to_string()),
            ("quant.learn_scale", self.learn_scale.to_string()),
            ("quant.learn_zero_point", self.learn_zero_point.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.latent_channels", m.latent_channels.to_string()),
            ("model.stages", m.stages.to_string()),
            ("model.kernel", m.kernel.to_string()),
            ("model.bits", join(&m.bits)),
            ("model.dynamic", m.dynamic.to_string()),
            ("model.fixed_bits", m.fixed_bits.to_string()),
            ("data.source", source.into()),
        ];
        if let Some(p) = path {
            out.push(("data.path", p));
        }
        out.extend([
            ("data.count", self.synthetic.count.to_string()),
            ("data.size", self.synthetic.size.to_string()),
            (
                "data.kinds",
                self.synthetic.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            ),
            ("data.seed", self.synthetic.seed.to_string()),
            ("sweep.lambdas", join(&self.sweep_lambdas)),
            ("ablate.seeds", join(&self.ablate_seeds)),
        ]);
        out
    }

    /// The configuration as file text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }
}
