//! Resolved run configurations. Each command starts from built-in defaults,
//! overlays the optional JSON config file, then applies command-line flags.

use std::path::{Path, PathBuf};

use dyhgn_core::data::{GeneratorConfig, Preset, SplitPolicy};
use dyhgn_core::error::{Error, Result};
use dyhgn_core::features::{FeatureMode, LinearConfig};
use dyhgn_core::models::ModelConfig;
use dyhgn_core::schema::DatasetKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Train/validation/test fractions.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

pub const DEFAULT_TARGETS: usize = 5000;

/// Overlays `patch` onto `base`: objects merge key by key, anything else is
/// replaced.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// The parsed config file, or an empty document.
#[derive(Debug, Clone)]
pub struct ConfigFile {
    doc: Value,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            doc: Value::Object(serde_json::Map::new()),
        }
    }
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        if !doc.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        Ok(Self { doc })
    }

    fn at(&self, pointer: &str) -> Option<&Value> {
        self.doc.pointer(pointer)
    }

    pub fn str_at(&self, pointer: &str) -> Result<Option<&str>> {
        match self.at(pointer) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(Error::Config(format!("`{pointer}` must be a string, got {other}"))),
        }
    }

    pub fn u64_at(&self, pointer: &str) -> Result<Option<u64>> {
        match self.at(pointer) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("`{pointer}` must be a nonnegative integer, got {v}"))),
        }
    }

    /// `defaults` with the file's values overlaid.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, defaults: &T) -> Result<T> {
        let mut base = serde_json::to_value(defaults)?;
        merge(&mut base, self.doc.clone());
        serde_json::from_value(base).map_err(|e| Error::Config(format!("config file: {e}")))
    }
}

/// First of: flag, config-file value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn dataset_of(flag: Option<&str>, file: &ConfigFile) -> Result<DatasetKind> {
    match flag.map(str::to_owned).or(file.str_at("/dataset")?.map(str::to_owned)) {
        Some(s) => DatasetKind::parse(&s),
        None => Ok(DatasetKind::MassReg),
    }
}

/// Where a command reads its event log from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory written by `generate`; data are drawn from
    /// `generator` when absent.
    pub path: Option<PathBuf>,
    pub preset: Preset,
    pub generator: GeneratorConfig,
}

/// Flags that pick or shape the input data.
#[derive(Debug, Clone, Default)]
pub struct DataFlags {
    pub path: Option<PathBuf>,
    pub preset: Option<String>,
    pub n_targets: Option<usize>,
    pub seed: Option<u64>,
}

impl DataConfig {
    /// Defaults for `dataset`, seeded from the flags and file keys that shape
    /// the generator so that derived fields (pool sizes, schedule) agree.
    pub fn defaults(dataset: DatasetKind, flags: &DataFlags, file: &ConfigFile, prefix: &str) -> Result<Self> {
        let preset = match flags.preset.clone().or(file.str_at(&format!("{prefix}/preset"))?.map(str::to_owned)) {
            Some(s) => Preset::parse(&s)?,
            None => Preset::Uneven,
        };
        let n_targets = pick(
            flags.n_targets,
            file.u64_at(&format!("{prefix}/generator/n_targets"))?.map(|n| n as usize),
            DEFAULT_TARGETS,
        );
        let seed = pick(flags.seed, file.u64_at(&format!("{prefix}/generator/seed"))?, 0);
        Ok(Self {
            path: None,
            preset,
            generator: GeneratorConfig::preset(dataset, preset, n_targets, seed),
        })
    }

    pub fn apply(&mut self, flags: &DataFlags) {
        if let Some(p) = &flags.path {
            self.path = Some(p.clone());
        }
        if let Some(n) = flags.n_targets {
            self.generator.n_targets = n;
        }
        if let Some(s) = flags.seed {
            self.generator.seed = s;
        }
    }

    pub fn validate(&self, dataset: DatasetKind) -> Result<()> {
        if self.generator.dataset != dataset {
            return Err(Error::Config(format!(
                "generator dataset {} differs from dataset {dataset}",
                self.generator.dataset
            )));
        }
        self.generator.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub dataset: DatasetKind,
    pub preset: Preset,
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildGraphConfig {
    pub dataset: DatasetKind,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Number of model seeds, `model.seed`, `model.seed + 1`, ….
    pub seeds: usize,
    pub split: SplitPolicy,
    pub split_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("--seeds must be at least 1".into()));
        }
        self.data.validate(self.dataset)?;
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizeConfig {
    pub dataset: DatasetKind,
    pub data: DataConfig,
    pub modes: Vec<FeatureMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub dataset: DatasetKind,
    pub data: DataConfig,
    pub modes: Vec<FeatureMode>,
    pub splits: Vec<SplitPolicy>,
    pub split_seed: u64,
    pub linear: LinearConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    pub dataset: DatasetKind,
    pub data: DataConfig,
    pub mode: FeatureMode,
    pub split: SplitPolicy,
    pub split_seed: u64,
    pub repeats: usize,
    pub seed: u64,
    pub linear: LinearConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
}

/// Per-dataset model defaults for the variant named by the flag, the file, or DyHGN-DE.
pub fn model_defaults(dataset: DatasetKind, variant_flag: Option<&str>, file: &ConfigFile, pointer: &str) -> Result<ModelConfig> {
    let name = variant_flag
        .map(str::to_owned)
        .or(file.str_at(pointer)?.map(str::to_owned))
        .unwrap_or_else(|| "dyhgn-de".into());
    let variant = dyhgn_core::models::Variant::parse(&name)?;
    Ok(ModelConfig::defaults(dataset, variant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overlays_nested_objects() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"d": 4}, "e": 5}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": 5}));
    }

    #[test]
    fn arrays_are_replaced_whole() {
        let mut base = json!({"a": [1, 2, 3]});
        merge(&mut base, json!({"a": [4]}));
        assert_eq!(base, json!({"a": [4]}));
    }

    #[test]
    fn non_object_file_is_rejected() {
        assert!(ConfigFile::parse("[1]").unwrap_err().is_validation());
        assert!(ConfigFile::parse("{").unwrap_err().is_validation());
    }

    #[test]
    fn missing_file_resolves_to_the_defaults() {
        let file = ConfigFile::load(None).unwrap();
        assert_eq!(file.resolve(&LinearConfig::default()).unwrap(), LinearConfig::default());
    }

    #[test]
    fn pick_order() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }

    #[test]
    fn file_keys_seed_generator_defaults() {
        let file = ConfigFile::parse(r#"{"data": {"preset": "even", "generator": {"n_targets": 40}}}"#).unwrap();
        let d = DataConfig::defaults(DatasetKind::MassReg, &DataFlags::default(), &file, "/data").unwrap();
        assert_eq!(d.preset, Preset::Even);
        assert_eq!(d.generator.n_targets, 40);
        assert_eq!(d.generator, GeneratorConfig::preset(DatasetKind::MassReg, Preset::Even, 40, 0));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let file = ConfigFile::parse(r#"{"dataset": "massreg", "bogus": 1}"#).unwrap();
        let defaults = BuildGraphConfig {
            dataset: DatasetKind::MassReg,
            data: DataConfig::defaults(DatasetKind::MassReg, &DataFlags::default(), &file, "/data").unwrap(),
        };
        assert!(file.resolve(&defaults).unwrap_err().is_validation());
    }
}
