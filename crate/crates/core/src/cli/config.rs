use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::train::TrainSettings;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Overrides the dataset manifest's truncation length.
    pub max_len: Option<usize>,
}

/// Everything a run needs, read from one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub data: DataPaths,
    pub synth: Option<SynthConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// All problems in the model, training and synthesis sections.
    pub fn validate(&self) -> Vec<String> {
        let mut p: Vec<String> = self.model.validate();
        p.extend(self.train.validate(&self.model));
        if let Some(s) = &self.synth {
            p.extend(s.validate());
        }
        if self.data.max_len == Some(0) {
            p.push("data.max_len must be positive".into());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_config_is_default_moe() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn full_config_parses() {
        let cfg = parse(
            r#"
seed = 3
[model]
kind = "rnn"
mixtures = 2
[model.encoder]
variant = "hierarchical"
hidden = 16
window = 5
[train]
epochs = 2
batch_size = 32
base_lr = 0.005
[data]
max_len = 50
[synth]
num_classes = 10
num_videos = 100
min_len = 4
max_len = 8
feature_dim = 6
temporal_fraction = 1.0
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(cfg.model.is_recurrent());
        assert_eq!(cfg.train.schedule(&cfg.model).base_lr, 0.005);
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "sede = 1",
            "[train]\nepoch = 3",
            "[model]\nkind = \"moe\"\nmixture = 3",
            "[model]\nkind = \"perceptron\"",
            "[data]\ntrian = \"x\"",
        ] {
            assert!(matches!(parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn all_problems_listed() {
        let cfg = parse("[model]\nkind = \"moe\"\nmixtures = 0\n[train]\nbatch_size = 0\n[data]\nmax_len = 0").unwrap();
        assert_eq!(cfg.validate().len(), 3);
    }
}
