//! Run configuration: flat `key = value` files merged under command-line
//! flags and environment overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;
use zerodp_core::model::ModelSpec;
use zerodp_core::mpadam::AdamHyper;
use zerodp_core::zerodp::EngineConfig;
use zerodp_core::Stage;

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

pub const KEYS: &[&str] = &[
    "stage",
    "ranks",
    "transport",
    "input_dim",
    "hidden_dim",
    "output_dim",
    "layers",
    "steps",
    "seed",
    "batch",
    "bucket",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "loss_scale",
    "roster",
    "output",
];

/// Parsed `key = value` pairs. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigFileError::Syntax {
                    line: i + 1,
                    reason: format!("expected key = value, got {line:?}"),
                })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigFileError::UnknownKey(k.to_owned()));
            }
            values.insert(k.to_owned(), v.to_owned());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigFileError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse().map_err(|_| ConfigFileError::BadValue {
                    key: key.to_owned(),
                    value: v.clone(),
                })
            })
            .transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TransportKind {
    Sim,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(TransportKind::Sim),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

/// Values as given on the command line (or by environment); `None` means
/// not given.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// base, os, os+g or os+g+p.
    #[arg(long)]
    pub stage: Option<String>,
    /// Number of data-parallel ranks.
    #[arg(long)]
    pub ranks: Option<usize>,
    #[arg(long, value_enum)]
    pub transport: Option<TransportKind>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub output_dim: Option<usize>,
    /// Hidden layers.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub steps: Option<u32>,
    #[arg(long, env = "ZERODP_SEED")]
    pub seed: Option<u64>,
    /// Global batch size, split evenly over ranks.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Gradient bucket capacity in elements.
    #[arg(long)]
    pub bucket: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub beta1: Option<f32>,
    #[arg(long)]
    pub beta2: Option<f32>,
    #[arg(long)]
    pub eps: Option<f32>,
    #[arg(long)]
    pub loss_scale: Option<f32>,
    /// host:port per line, one line per rank.
    #[arg(long, env = "ZERODP_ROSTER")]
    pub roster: Option<PathBuf>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub n_ranks: usize,
    pub transport: TransportKind,
    pub spec: ModelSpec,
    pub steps: u32,
    pub seed: u64,
    pub global_batch: usize,
    pub engine: EngineConfig,
    pub hyper: AdamHyper,
    pub roster: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::Baseline,
            n_ranks: 4,
            transport: TransportKind::Sim,
            spec: ModelSpec {
                input_dim: 2,
                hidden_dim: 8,
                output_dim: 1,
                layers: 2,
            },
            steps: 50,
            seed: 7,
            global_batch: 16,
            engine: EngineConfig::default(),
            hyper: AdamHyper::default(),
            roster: None,
            output: None,
        }
    }
}

macro_rules! pick {
    ($flag:expr, $file:expr, $key:literal, $default:expr) => {
        match $flag.clone() {
            Some(v) => v,
            None => $file.get($key)?.unwrap_or($default),
        }
    };
}

impl RunConfig {
    /// Merge flags over the config file over defaults, then validate.
    pub fn resolve(args: &RunArgs) -> Result<Self, ConfigFileError> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let d = RunConfig::default();
        let stage_name: Option<String> = match &args.stage {
            Some(s) => Some(s.clone()),
            None => file.get("stage")?,
        };
        let stage = match stage_name {
            Some(s) => s
                .parse()
                .map_err(|e: zerodp_core::ConfigError| ConfigFileError::Invalid(e.to_string()))?,
            None => d.stage,
        };
        let spec = ModelSpec {
            input_dim: pick!(args.input_dim, file, "input_dim", d.spec.input_dim),
            hidden_dim: pick!(args.hidden_dim, file, "hidden_dim", d.spec.hidden_dim),
            output_dim: pick!(args.output_dim, file, "output_dim", d.spec.output_dim),
            layers: pick!(args.layers, file, "layers", d.spec.layers),
        };
        let hyper = AdamHyper {
            lr: pick!(args.lr, file, "lr", d.hyper.lr),
            beta1: pick!(args.beta1, file, "beta1", d.hyper.beta1),
            beta2: pick!(args.beta2, file, "beta2", d.hyper.beta2),
            eps: pick!(args.eps, file, "eps", d.hyper.eps),
            loss_scale: pick!(args.loss_scale, file, "loss_scale", d.hyper.loss_scale),
        };
        let cfg = RunConfig {
            stage,
            n_ranks: pick!(args.ranks, file, "ranks", d.n_ranks),
            transport: pick!(args.transport, file, "transport", d.transport),
            spec,
            steps: pick!(args.steps, file, "steps", d.steps),
            seed: pick!(args.seed, file, "seed", d.seed),
            global_batch: pick!(args.batch, file, "batch", d.global_batch),
            engine: EngineConfig {
                bucket_capacity: pick!(args.bucket, file, "bucket", d.engine.bucket_capacity),
                fault: None,
            },
            hyper,
            roster: match &args.roster {
                Some(p) => Some(p.clone()),
                None => file.get::<PathBuf>("roster")?,
            },
            output: match &args.output {
                Some(p) => Some(p.clone()),
                None => file.get::<PathBuf>("output")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        let invalid = |m: String| Err(ConfigFileError::Invalid(m));
        if self.n_ranks == 0 {
            return invalid("ranks must be at least 1".into());
        }
        if let Err(e) = self.spec.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.hyper.validate() {
            return invalid(e.to_string());
        }
        if self.engine.bucket_capacity == 0 {
            return invalid("bucket capacity must be at least 1 element".into());
        }
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(self.n_ranks) {
            return invalid(format!(
                "batch of {} samples does not split evenly over {} ranks",
                self.global_batch, self.n_ranks
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parsing() {
        let f = ConfigFile::parse("# run\nstage = os+g\nsteps=3 # short\n\n").unwrap();
        assert_eq!(f.get::<String>("stage").unwrap().as_deref(), Some("os+g"));
        assert_eq!(f.get::<u32>("steps").unwrap(), Some(3));
        assert!(matches!(
            ConfigFile::parse("colour = red"),
            Err(ConfigFileError::UnknownKey(_))
        ));
        assert!(matches!(
            ConfigFile::parse("steps"),
            Err(ConfigFileError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "steps = 9\nseed = 3\nstage = os\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            seed: Some(11),
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.steps, 9);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.stage, Stage::Pos);
        assert_eq!(cfg.n_ranks, RunConfig::default().n_ranks);
    }

    #[test]
    fn uneven_batch_is_rejected() {
        let args = RunArgs {
            ranks: Some(3),
            batch: Some(16),
            ..RunArgs::default()
        };
        assert!(matches!(
            RunConfig::resolve(&args),
            Err(ConfigFileError::Invalid(_))
        ));
    }
}
