//! Layered run configuration: built-in defaults, then an optional TOML
//! file, then `--set section.key=value` overrides. Unknown keys at any
//! layer are errors.

use std::path::Path;

use forgetir_core::degrade::{CorpusConfig, DegradationParams};
use forgetir_core::train::TrainConfig;
use forgetir_core::{ModelConfig, UnlearnConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Degraded/restored/clean strips written per kind; 0 disables them.
    pub images: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { images: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Share of each kind held out for evaluation.
    pub heldout_fraction: f64,
    pub corpus: CorpusConfig,
    pub degrade: DegradationParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub report: ReportConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.1,
            corpus: CorpusConfig::default(),
            degrade: DegradationParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

fn defaults_table() -> Table {
    Table::try_from(Config::default()).expect("defaults serialize to a table")
}

/// Recursively overlays `top` onto `base`. Keys absent from `base` are
/// rejected, naming the full dotted path.
fn merge(base: &mut Table, top: Table, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in top {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(err(format!("unknown key `{path}`"))),
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t, &path)?,
            (Some(Value::Table(_)), _) => return Err(err(format!("`{path}` is a section, not a value"))),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so `unlearn.loss_kind=l2` works unquoted.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn override_table(assignment: &str) -> Result<Table, ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err(format!("malformed key `{key}`")));
    }
    let mut value = parse_value(raw.trim());
    for part in parts.iter().rev() {
        let mut t = Table::new();
        t.insert((*part).to_string(), value);
        value = Value::Table(t);
    }
    match value {
        Value::Table(t) => Ok(t),
        _ => unreachable!("wrapped in at least one table"),
    }
}

fn finish(table: Table) -> Result<Config, ConfigError> {
    let cfg: Config = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| err(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl Config {
    /// Resolves defaults, the optional file at `path`, then `overrides`.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = defaults_table();
        if let Some(text) = file {
            let parsed: Table = toml::from_str(text).map_err(|e| err(e.to_string()))?;
            merge(&mut table, parsed, "")?;
        }
        for o in overrides {
            merge(&mut table, override_table(o)?, "")?;
        }
        finish(table)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", p.display())))?,
            ),
            None => None,
        };
        Ok(Self::resolve(text.as_deref(), overrides)?)
    }

    /// Sets every component seed at once.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.unlearn.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |r: forgetir_core::Result<()>| r.map_err(|e| err(e.to_string()));
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(err(format!(
                "heldout_fraction must lie in (0, 1), got {}",
                self.heldout_fraction
            )));
        }
        wrap(self.train.validate())?;
        wrap(self.unlearn.validate())?;
        let side = self.corpus.height.min(self.corpus.width);
        for (name, crop) in [("train", self.train.crop), ("unlearn", self.unlearn.crop)] {
            if crop > side {
                return Err(err(format!(
                    "{name}.crop = {crop} exceeds the corpus image side {side}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let back = Config::resolve(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_and_overrides_layer_in_order() {
        let file = "[unlearn]\nw_adv = 0.5\nepochs = 3\n";
        let cfg = Config::resolve(Some(file), &["unlearn.w_adv=1.5".into()]).unwrap();
        assert_eq!(cfg.unlearn.w_adv, 1.5);
        assert_eq!(cfg.unlearn.epochs, 3);
        assert_eq!(cfg.unlearn.w_ins, 1.0);
    }

    #[test]
    fn nested_and_string_overrides() {
        let cfg = Config::resolve(
            None,
            &[
                "train.optimizer.lr=0.01".into(),
                "unlearn.loss_kind=l2".into(),
                "unlearn.flips=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.optimizer.lr, 0.01);
        assert_eq!(cfg.unlearn.loss_kind, forgetir_core::unlearn::LossKind::L2);
        assert!(!cfg.unlearn.flips);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["unlearn.w_advv=1", "modle.width=8", "train.optimizer.momentum=0.9"] {
            let e = Config::resolve(None, &[bad.into()]).unwrap_err();
            assert!(e.0.contains("unknown key"), "{bad}: {e}");
        }
        let e = Config::resolve(Some("[model]\nwidht = 8\n"), &[]).unwrap_err();
        assert!(e.0.contains("model.widht"), "{e}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Config::resolve(None, &["unlearn.w_adv=\"lots\"".into()]).is_err());
        assert!(Config::resolve(None, &["unlearn".into()]).is_err());
        assert!(Config::resolve(None, &["unlearn=3".into()]).is_err());
        assert!(Config::resolve(None, &["train.crop=64".into()]).is_err());
        assert!(Config::resolve(
            None,
            &["unlearn.enable_ins=false".into(), "unlearn.enable_adv=false".into()]
        )
        .is_err());
    }

    #[test]
    fn seed_sets_every_component() {
        let cfg = Config::default().with_seed(42);
        assert_eq!(
            [cfg.corpus.seed, cfg.model.seed, cfg.train.seed, cfg.unlearn.seed],
            [42; 4]
        );
    }
}
