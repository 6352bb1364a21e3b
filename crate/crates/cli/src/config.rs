//! `key=value` configuration shared by every subcommand.
//!
//! Keys are namespaced by the component they tune (`lm.`, `icp.`,
//! `siamese.`) plus a top-level `seed` that seeds all three. Unknown keys
//! are rejected so that typos never fall back to defaults silently.

use std::path::Path;
use std::str::FromStr;

use neuroface::lmtrain::LmConfig;
use neuroface::registration::IcpConfig;
use neuroface::siamese::SiameseConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliConfig {
    pub lm: LmConfig,
    pub icp: IcpConfig,
    pub siamese: SiameseConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "lm.hidden_count",
    "lm.target_mse",
    "lm.max_epochs",
    "lm.mu_initial",
    "lm.beta",
    "lm.mu_max",
    "lm.gradient_min",
    "lm.seed",
    "lm.batch_size",
    "lm.max_retries",
    "icp.max_iterations",
    "icp.residual_tolerance",
    "icp.sample_fraction",
    "icp.rejection_distance",
    "icp.seed",
    "siamese.q",
    "siamese.learning_rate",
    "siamese.epochs",
    "siamese.batch_size",
    "siamese.seed",
    "siamese.layers",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError(format!("bad value {value:?} for {key}")))
}

fn parse_layers(value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|s| parse::<usize>("siamese.layers", s.trim())).collect()
}

impl CliConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => {
                let seed = parse(key, v)?;
                self.lm.seed = seed;
                self.icp.seed = seed;
                self.siamese.seed = seed;
            }
            "lm.hidden_count" => self.lm.hidden_count = parse(key, v)?,
            "lm.target_mse" => self.lm.target_mse = parse(key, v)?,
            "lm.max_epochs" => self.lm.max_epochs = parse(key, v)?,
            "lm.mu_initial" => self.lm.mu_initial = parse(key, v)?,
            "lm.beta" => self.lm.beta = parse(key, v)?,
            "lm.mu_max" => self.lm.mu_max = parse(key, v)?,
            "lm.gradient_min" => self.lm.gradient_min = parse(key, v)?,
            "lm.seed" => self.lm.seed = parse(key, v)?,
            "lm.batch_size" => self.lm.batch_size = parse(key, v)?,
            "lm.max_retries" => self.lm.max_retries = parse(key, v)?,
            "icp.max_iterations" => self.icp.max_iterations = parse(key, v)?,
            "icp.residual_tolerance" => self.icp.residual_tolerance = parse(key, v)?,
            "icp.sample_fraction" => self.icp.sample_fraction = parse(key, v)?,
            "icp.rejection_distance" => {
                self.icp.rejection_distance = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "icp.seed" => self.icp.seed = parse(key, v)?,
            "siamese.q" => self.siamese.q = parse(key, v)?,
            "siamese.learning_rate" => self.siamese.learning_rate = parse(key, v)?,
            "siamese.epochs" => self.siamese.epochs = parse(key, v)?,
            "siamese.batch_size" => self.siamese.batch_size = parse(key, v)?,
            "siamese.seed" => self.siamese.seed = parse(key, v)?,
            "siamese.layers" => self.siamese.layers = parse_layers(v)?,
            _ => return Err(ConfigError(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| ConfigError(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| ConfigError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        Ok(cfg)
    }

    /// Values for every key, in the order of [`KEYS`]; reading the output
    /// back with [`CliConfig::apply_text`] reproduces the configuration.
    pub fn to_text(&self) -> String {
        let layers: Vec<String> = self.siamese.layers.iter().map(|l| l.to_string()).collect();
        let rejection = self.icp.rejection_distance.map_or_else(|| "none".to_string(), |d| d.to_string());
        let values = [
            ("lm.hidden_count", self.lm.hidden_count.to_string()),
            ("lm.target_mse", self.lm.target_mse.to_string()),
            ("lm.max_epochs", self.lm.max_epochs.to_string()),
            ("lm.mu_initial", self.lm.mu_initial.to_string()),
            ("lm.beta", self.lm.beta.to_string()),
            ("lm.mu_max", self.lm.mu_max.to_string()),
            ("lm.gradient_min", self.lm.gradient_min.to_string()),
            ("lm.seed", self.lm.seed.to_string()),
            ("lm.batch_size", self.lm.batch_size.to_string()),
            ("lm.max_retries", self.lm.max_retries.to_string()),
            ("icp.max_iterations", self.icp.max_iterations.to_string()),
            ("icp.residual_tolerance", self.icp.residual_tolerance.to_string()),
            ("icp.sample_fraction", self.icp.sample_fraction.to_string()),
            ("icp.rejection_distance", rejection),
            ("icp.seed", self.icp.seed.to_string()),
            ("siamese.q", self.siamese.q.to_string()),
            ("siamese.learning_rate", self.siamese.learning_rate.to_string()),
            ("siamese.epochs", self.siamese.epochs.to_string()),
            ("siamese.batch_size", self.siamese.batch_size.to_string()),
            ("siamese.seed", self.siamese.seed.to_string()),
            ("siamese.layers", layers.join(",")),
        ];
        values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
