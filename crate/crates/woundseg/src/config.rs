//! Run configuration: one TOML file with nested sections, plus
//! command-line `section.key=value` overrides layered on top.
//!
//! Resolution order for the base file: an explicit path wins, then the
//! `WOUNDSEG_CONFIG` environment variable, then built-in defaults.
//! Every section falls back to its default when absent, and unknown
//! keys anywhere are an error rather than silently ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, ClassPalette};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV_VAR: &str = "WOUNDSEG_CONFIG";

/// Where samples come from and how they are labeled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Label palette name; must match the model's class count when a
    /// manifest is in play.
    pub palette: String,
    /// Single manifest split into train/val/test by `split_fractions`.
    pub manifest: Option<PathBuf>,
    /// Pre-split manifests; when set they take precedence over
    /// `manifest`.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            palette: "six_tissue".into(),
            manifest: None,
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            split_fractions: [0.8, 0.1, 0.1],
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        ClassPalette::by_name(&self.palette)?;
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split_fractions {:?} must lie in [0,1] and sum to 1",
                self.split_fractions
            )));
        }
        Ok(())
    }

    pub fn uses_manifest(&self) -> bool {
        self.manifest.is_some() || self.train_manifest.is_some()
    }
}

/// Everything a run needs, one section per concern.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.uses_manifest() {
            let palette_len = ClassPalette::by_name(&self.data.palette)?.len();
            let classes = self.model.num_classes();
            if palette_len != classes {
                return Err(Error::Config(format!(
                    "palette {:?} defines {palette_len} classes but the model predicts {classes}",
                    self.data.palette
                )));
            }
        }
        Ok(())
    }
}

/// Builds the effective config: base file (explicit path, else
/// `WOUNDSEG_CONFIG`, else defaults), then overrides in order.
pub fn load_run_config(explicit: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from));
    let mut table = match &path {
        Some(p) => std::fs::read_to_string(p)?
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `section.key=value` override to a config tree, creating
/// intermediate sections as needed. The value is parsed as a TOML
/// literal (number, bool, array, quoted string); anything that fails
/// to parse is taken as a bare string, so `loss.kind=focal` works
/// without quotes.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key_path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let segments: Vec<&str> = key_path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {key_path:?} has an empty segment")));
    }

    let mut node = table;
    for segment in &segments[..segments.len() - 1] {
        let entry = node
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override {key_path:?}: {segment:?} is not a section"))
        })?;
    }
    let leaf = segments.last().expect("nonempty split");
    node.insert((*leaf).to_string(), parse_literal(raw_value));
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed assignment"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
