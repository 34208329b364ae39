//! Flat key=value run configuration shared by all subcommands.
//!
//! Precedence: command-line flags, then the `--config` file, then
//! `LMLCC_SEED` (seed only), then built-in defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lmlcc::network::config::{parse_kv, parse_value};
use lmlcc::network::{ModelConfig, Scale, TrainConfig};
use lmlcc::semisup::SemisupConfig;

pub const SEED_ENV: &str = "LMLCC_SEED";

const MODEL_KEYS: &[&str] = &[
    "mode",
    "scale",
    "patch_side",
    "conv_channels",
    "pool_after",
    "dropout_after",
    "dense_widths",
    "dropout_rate",
];
const LMLCC_KEYS: &[&str] = &["branches", "include_original", "cuts", "init", "tau"];
const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "min_lr",
    "lr_factor",
    "lr_patience",
    "seed",
    "early_stop",
];
const SEMISUP_KEYS: &[&str] = &["threshold", "max_rounds", "min_new"];
const RUN_KEYS: &[&str] = &[
    "ratings",
    "volumes",
    "manifest",
    "patches",
    "index",
    "checkpoint",
    "out",
    "out_dir",
    "log",
    "split",
    "augment",
    "nodule",
    "benign",
    "malignant",
    "hidden",
];

fn is_known(key: &str) -> bool {
    [MODEL_KEYS, LMLCC_KEYS, TRAIN_KEYS, SEMISUP_KEYS, RUN_KEYS]
        .iter()
        .any(|keys| keys.contains(&key))
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(lmlcc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(lmlcc::Error::NonFinite { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<lmlcc::Error> for CliError {
    fn from(e: lmlcc::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(
        file: Option<&Path>,
        env_seed: Option<String>,
        flags: BTreeMap<String, String>,
    ) -> CliResult<Self> {
        let mut values = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Core(lmlcc::Error::Io {
                        path: path.to_path_buf(),
                        source: e,
                    })
                })?;
                let kv = parse_kv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                if let Some(k) = kv.keys().find(|k| !is_known(k)) {
                    return Err(usage(format!("{}: unknown key {k:?}", path.display())));
                }
                kv
            }
            None => BTreeMap::new(),
        };
        if let Some(seed) = env_seed {
            values.entry("seed".to_string()).or_insert(seed);
        }
        values.extend(flags);

        let lmlcc_mode = values.get("mode").map(String::as_str) == Some("lmlcc");
        if !lmlcc_mode {
            if let Some(k) = LMLCC_KEYS.iter().find(|k| values.contains_key(**k)) {
                return Err(usage(format!("{k} only applies to --mode lmlcc")));
            }
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn value<V: FromStr>(&self, key: &str, default: V) -> CliResult<V>
    where
        V::Err: fmt::Display,
    {
        match self.get(key) {
            Some(v) => parse_value(key, v).map_err(usage),
            None => Ok(default),
        }
    }

    pub fn path(&self, key: &str) -> CliResult<PathBuf> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("missing required {key} (flag --{} or config key)", key.replace('_', "-"))))
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.value("seed", 0)
    }

    pub fn model(&self) -> CliResult<ModelConfig> {
        ModelConfig::from_map(&self.values).map_err(usage)
    }

    /// Desk-scale models start from the short schedule, full-scale ones from
    /// the long one.
    pub fn train(&self, model: &ModelConfig) -> CliResult<TrainConfig> {
        let seed = self.seed()?;
        let base = match model.backbone().scale {
            Scale::Desk => TrainConfig::desk(seed),
            Scale::Full => TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        };
        base.with_overrides(&self.values).map_err(usage)
    }

    pub fn semisup(&self) -> CliResult<SemisupConfig> {
        let d = SemisupConfig::default();
        let cfg = SemisupConfig {
            threshold: self.value("threshold", d.threshold)?,
            max_rounds: self.value("max_rounds", d.max_rounds)?,
            min_new: self.value("min_new", d.min_new)?,
            model_seed: self.seed()?,
        };
        if !(cfg.threshold > 0.5 && cfg.threshold <= 1.0) || cfg.max_rounds == 0 {
            return Err(usage("need 0.5 < threshold <= 1 and max_rounds >= 1"));
        }
        Ok(cfg)
    }

    /// Explicit keys overlaid with fully resolved `key=value` blocks, sorted.
    pub fn echo(&self, command: &str, resolved: &[String]) -> String {
        let mut all = self.values.clone();
        for block in resolved {
            all.extend(parse_kv(block).unwrap_or_default());
        }
        let mut s = format!("command={command}\n");
        for (k, v) in all {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}
