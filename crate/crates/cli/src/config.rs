use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};
use ttt4rec_core::data::Dataset;
use ttt4rec_core::model::ModelConfig;
use ttt4rec_core::training::TrainConfig;
use ttt4rec_core::ttt::TttConfig;

pub const DEFAULT_INITIALIZER_RANGES: [f64; 5] = [0.005, 0.01, 0.02, 0.05, 0.1];
pub const DEFAULT_MINI_BATCH_SIZES: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset cache written by `ingest`.
    pub dataset: PathBuf,
}

/// Model section of the config file. The vocabulary size always comes from
/// the dataset; `max_seq_len` falls back to the dataset's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: Option<usize>,
    pub ttt: TttConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            embed_dim: m.embed_dim,
            mlp_hidden: m.mlp_hidden,
            max_seq_len: None,
            ttt: m.ttt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub initializer_range: Vec<f64>,
    pub mini_batch_size: Vec<usize>,
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes {
            initializer_range: DEFAULT_INITIALIZER_RANGES.to_vec(),
            mini_batch_size: DEFAULT_MINI_BATCH_SIZES.to_vec(),
        }
    }
}

impl GridAxes {
    /// Cells in lexicographic order: initializer range outer, batch size inner.
    pub fn cells(&self) -> anyhow::Result<Vec<(f64, usize)>> {
        if self.initializer_range.is_empty() || self.mini_batch_size.is_empty() {
            bail!("grid axes must be nonempty");
        }
        Ok(self
            .initializer_range
            .iter()
            .flat_map(|&s| self.mini_batch_size.iter().map(move |&b| (s, b)))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Run directory. `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridAxes>,
}

impl RunConfig {
    /// Reads a config file. A relative dataset path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.data.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.dataset = dir.join(&cfg.data.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Fills `max_seq_len` from the dataset and builds the model config.
    pub fn resolve(&mut self, dataset: &Dataset) -> anyhow::Result<ModelConfig> {
        let n = *self.model.max_seq_len.get_or_insert(dataset.max_seq_len);
        let model = ModelConfig {
            vocab_size: dataset.vocab_size,
            embed_dim: self.model.embed_dim,
            mlp_hidden: self.model.mlp_hidden,
            max_seq_len: n,
            ttt: self.model.ttt.clone(),
        };
        model.validate()?;
        self.train.validate()?;
        Ok(model)
    }
}

/// Flags that override config-file values.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Outer (Adam) learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub mini_batch_size: Option<usize>,
    #[arg(long)]
    pub initializer_range: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.inner_lr {
            cfg.model.ttt.inner_lr = v;
        }
        if let Some(v) = self.mini_batch_size {
            cfg.model.ttt.mini_batch_size = v;
        }
        if let Some(v) = self.initializer_range {
            cfg.model.ttt.initializer_range = v;
        }
        if let Some(v) = self.embed_dim {
            cfg.model.embed_dim = v;
        }
        if let Some(v) = self.max_seq_len {
            cfg.model.max_seq_len = Some(v);
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg: RunConfig = toml::from_str("[data]\ndataset = \"d.txt\"\n").unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.model.ttt, TttConfig::default());
        assert!(cfg.grid.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[data]\ndataset = \"d\"\n[train]\nlearning_rate = 0.1\n",
            "[data]\ndataset = \"d\"\n[model.ttt]\neta = 1.0\n",
            "[data]\ndataset = \"d\"\ntypo = 1\n",
        ] {
            assert!(toml::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg: RunConfig = toml::from_str("[data]\ndataset = \"d.txt\"\n").unwrap();
        cfg.model.max_seq_len = Some(20);
        cfg.train.max_grad_norm = Some(5.0);
        cfg.grid = Some(GridAxes::default());
        let text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_win() {
        let mut cfg: RunConfig =
            toml::from_str("[data]\ndataset = \"d\"\n[train]\nepochs = 3\n").unwrap();
        Overrides {
            epochs: Some(1),
            mini_batch_size: Some(10),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.model.ttt.mini_batch_size, 10);
    }

    #[test]
    fn grid_order_and_defaults() {
        let axes = GridAxes {
            initializer_range: vec![0.1, 0.2],
            mini_batch_size: vec![1, 10],
        };
        assert_eq!(
            axes.cells().unwrap(),
            vec![(0.1, 1), (0.1, 10), (0.2, 1), (0.2, 10)]
        );
        assert!(GridAxes::default().mini_batch_size.contains(&1));
        assert!(GridAxes::default().mini_batch_size.contains(&10));
        let empty = GridAxes {
            initializer_range: vec![],
            mini_batch_size: vec![1],
        };
        assert!(empty.cells().is_err());
    }
}
