//! Layered configuration: built-in defaults, then the TOML file, then
//! `--set` overrides, then dedicated flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geossl_core::augment::AugPipeline;
use geossl_core::harness::{Axis, RunConfig};
use geossl_core::synthdata::SynthConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SECTIONS: [&str; 5] = ["dataset", "loss", "train", "eval", "ablation"];

/// Keys handled by the CLI itself rather than by a core config struct.
const DATASET_PATH: &str = "path";
const PIPELINE_FILE: &str = "pipeline_file";
const DEFAULT_DATASET_PATH: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axis: Axis,
    /// Empty selects the axis's default grid.
    pub grid: Vec<String>,
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axis: Axis::Cardinality,
            grid: Vec::new(),
            seeds: 5,
        }
    }
}

impl AblationConfig {
    pub fn grid_or_default(&self) -> Vec<String> {
        if self.grid.is_empty() {
            self.axis.default_grid()
        } else {
            self.grid.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dataset: SynthConfig,
    pub dataset_path: PathBuf,
    pub run: RunConfig,
    pub ablation: AblationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: SynthConfig::default(),
            dataset_path: PathBuf::from(DEFAULT_DATASET_PATH),
            run: RunConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Overrides coming from dedicated command-line flags.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
}

impl Config {
    /// Merges the layers and validates the result.
    pub fn load(file: Option<&Path>, sets: &[String], flags: &FlagOverrides) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Table::new(),
        };
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let mut cfg = Self::from_table(table)?;
        if let Some(seed) = flags.seed {
            cfg.dataset.seed = seed;
            cfg.run.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(mut table: Table) -> Result<Self> {
        if let Some(bad) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            bail!(
                "unknown config section `{bad}` (expected one of {})",
                SECTIONS.join(", ")
            );
        }
        let mut section = |name: &str| -> Result<Table> {
            match table.remove(name) {
                None => Ok(Table::new()),
                Some(Value::Table(t)) => Ok(t),
                Some(other) => bail!(
                    "config section `{name}` must be a table, got {}",
                    other.type_str()
                ),
            }
        };
        let mut dataset = section("dataset")?;
        let mut train = section("train")?;
        let loss = section("loss")?;
        let eval = section("eval")?;
        let ablation = section("ablation")?;

        let dataset_path = match dataset.remove(DATASET_PATH) {
            None => PathBuf::from(DEFAULT_DATASET_PATH),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(v) => bail!("dataset.path must be a string, got {}", v.type_str()),
        };
        let pipeline_file = match train.remove(PIPELINE_FILE) {
            None => None,
            Some(Value::String(s)) if s.is_empty() => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(v) => bail!("train.pipeline_file must be a string, got {}", v.type_str()),
        };

        let mut run = RunConfig {
            loss: parse_section("loss", loss)?,
            train: parse_section("train", train)?,
            eval: parse_section("eval", eval)?,
        };
        if let Some(path) = pipeline_file {
            if run.train.pipeline.is_some() {
                bail!("train.pipeline_file and an inline [train.pipeline] are mutually exclusive");
            }
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading pipeline file {}", path.display()))?;
            let pipeline = AugPipeline::from_toml_str(&text)
                .with_context(|| format!("parsing pipeline file {}", path.display()))?;
            run.train.pipeline = Some(pipeline);
        }
        Ok(Self {
            dataset: parse_section("dataset", dataset)?,
            dataset_path,
            run,
            ablation: parse_section("ablation", ablation)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().context("invalid [dataset]")?;
        self.run.validate()?;
        if self.ablation.seeds == 0 {
            bail!("ablation.seeds must be positive");
        }
        Ok(())
    }

    /// The merged configuration as TOML; loading it back reproduces `self`.
    pub fn to_toml(&self) -> Result<String> {
        let mut root = Table::new();
        let mut dataset = to_table(&self.dataset)?;
        dataset.insert(
            DATASET_PATH.into(),
            Value::String(self.dataset_path.to_string_lossy().into_owned()),
        );
        root.insert("dataset".into(), Value::Table(dataset));
        root.insert("loss".into(), Value::Table(to_table(&self.run.loss)?));
        root.insert("train".into(), Value::Table(to_table(&self.run.train)?));
        root.insert("eval".into(), Value::Table(to_table(&self.run.eval)?));
        root.insert("ablation".into(), Value::Table(to_table(&self.ablation)?));
        Ok(toml::to_string(&root)?)
    }
}

fn parse_section<T: serde::de::DeserializeOwned>(name: &str, table: Table) -> Result<T> {
    Value::Table(table)
        .try_into()
        .with_context(|| format!("invalid [{name}] config"))
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    match Value::try_from(v)? {
        Value::Table(t) => Ok(t),
        other => bail!("expected a table, got {}", other.type_str()),
    }
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// literal and falls back to a bare string.
pub fn apply_set(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form section.key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        bail!("override key `{}` must be section.key", key.trim());
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("at least two parts");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `section.key = default` for every addressable key.
pub fn key_listing() -> String {
    let cfg = Config::default();
    let text = cfg.to_toml().expect("defaults serialize");
    let root: Table = text.parse().expect("defaults parse");
    let mut lines = Vec::new();
    for section in SECTIONS {
        if let Some(Value::Table(t)) = root.get(section) {
            for (k, v) in t {
                lines.push(format!("  {section}.{k} = {v}"));
            }
            if section == "train" {
                lines.push(format!("  train.{PIPELINE_FILE} = \"\""));
            }
        }
    }
    format!(
        "Config keys (set in --config FILE or with --set section.key=value):\n{}",
        lines.join("\n")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let back = Config::from_table(cfg.to_toml().unwrap().parse().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_parses_literals_and_strings() {
        let mut t = Table::new();
        apply_set(&mut t, "train.lr=0.5").unwrap();
        apply_set(&mut t, "loss.geo_kind=basic").unwrap();
        apply_set(&mut t, "ablation.grid=[\"on\", \"off\"]").unwrap();
        let cfg = Config::from_table(t).unwrap();
        assert_eq!(cfg.run.train.lr, 0.5);
        assert_eq!(cfg.run.loss.geo_kind, geossl_core::losses::GeoKind::Basic);
        assert_eq!(cfg.ablation.grid, vec!["on", "off"]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut t = Table::new();
        apply_set(&mut t, "train.learning_rate=0.1").unwrap();
        let err = format!("{:#}", Config::from_table(t).unwrap_err());
        assert!(err.contains("learning_rate"), "{err}");

        let mut t = Table::new();
        apply_set(&mut t, "optim.lr=0.1").unwrap();
        let err = format!("{:#}", Config::from_table(t).unwrap_err());
        assert!(err.contains("optim"), "{err}");
    }

    #[test]
    fn flags_win_over_file_values() {
        let sets = vec!["dataset.seed=3".to_string(), "train.seed=4".to_string()];
        let cfg = Config::load(None, &sets, &FlagOverrides { seed: Some(9) }).unwrap();
        assert_eq!((cfg.dataset.seed, cfg.run.train.seed), (9, 9));
    }

    #[test]
    fn listing_covers_every_section() {
        let text = key_listing();
        for key in [
            "dataset.path",
            "dataset.n_locations",
            "loss.alpha",
            "train.lr",
            "eval.k",
            "ablation.seeds",
        ] {
            assert!(text.contains(key), "{key} missing");
        }
    }
}
