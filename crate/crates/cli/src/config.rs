use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lawin::aspp::PyramidConfig;
use lawin::data::IGNORE_LABEL;
use lawin::segmenter::{ModelConfig, ToyEncoderConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Where the data lives. Relative paths are resolved against the directory
/// of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub num_classes: usize,
    pub ignore_index: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: PathBuf::from("data/train"),
            val: None,
            num_classes: PyramidConfig::default().num_classes,
            ignore_index: IGNORE_LABEL as usize,
        }
    }
}

/// On-disk run description. Omitted sections and keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: ToyEncoderConfig,
    pub pyramid: PyramidConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, resolving data paths against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.train = base.join(&cfg.data.train);
        cfg.data.val = cfg.data.val.map(|v| base.join(v));
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model().validate()?;
        if self.data.num_classes != self.pyramid.num_classes {
            bail!(
                "data.num_classes = {} but pyramid.num_classes = {}",
                self.data.num_classes,
                self.pyramid.num_classes
            );
        }
        if self.data.ignore_index < self.data.num_classes {
            bail!("data.ignore_index {} collides with a class id", self.data.ignore_index);
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be positive");
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            bail!("train.lr must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            pyramid: self.pyramid.clone(),
        }
    }

    /// Training schedule with the dataset's ignore index applied.
    pub fn schedule(&self) -> TrainConfig {
        TrainConfig {
            ignore_index: self.data.ignore_index,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"trainer": {}}"#,
            r#"{"train": {"learning_rate": 0.1}}"#,
            r#"{"data": {"path": "x"}}"#,
            r#"{"pyramid": {"ratio": [2]}}"#,
            r#"{"encoder": {"depth": 3}}"#,
        ] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn class_counts_must_agree() {
        let err = RunConfig::from_json(r#"{"data": {"num_classes": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("num_classes"));
        let ok = r#"{"pyramid": {"num_classes": 3, "patch": 2, "dim": 64}, "data": {"num_classes": 3}}"#;
        RunConfig::from_json(ok).unwrap();
    }

    #[test]
    fn ignore_index_comes_from_data() {
        let cfg = RunConfig::from_json(
            r#"{"pyramid": {"num_classes": 3}, "data": {"num_classes": 3, "ignore_index": 200}}"#,
        )
        .unwrap();
        assert_eq!(cfg.schedule().ignore_index, 200);
        assert!(RunConfig::from_json(r#"{"train": {"ignore_index": 3}}"#).is_err());
    }

    #[test]
    fn data_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"data": {"train": "a", "val": "b"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.data.train, dir.path().join("a"));
        assert_eq!(cfg.data.val, Some(dir.path().join("b")));
    }
}
