//! TOML configuration files.
//!
//! ```toml
//! [train]
//! lr = 1e-3
//! batch_size = 256
//! w1 = 0.01
//! w2 = 0.01
//!
//! [model]
//! d_e = 32
//! heads = 8
//!
//! [src]
//! T = 12
//! alpha_start = 0.999
//! alpha_end = 0.98
//! weight_init = 0.5
//!
//! [ablation]
//! no_src = true
//!
//! [data]
//! preset = "synergy-small"
//! seeds = [0, 1, 2]
//! ```
//!
//! Every key is optional. `[train]` and `[model]` fall back to the library
//! defaults; `[data.spec]` overrides individual generator fields on top of
//! `synergy-small`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, SrcConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Generator preset used when no `[data.spec]` table is given.
    pub preset: Option<String>,
    /// Full generator spec; missing fields take the `synergy-small` values.
    pub spec: Option<SyntheticSpec>,
    /// A generated dataset on disk, used instead of generating in memory.
    pub manifest: Option<PathBuf>,
    /// Seeds for multi-seed commands.
    pub seeds: Option<Vec<u64>>,
}

impl DataSection {
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        match (&self.spec, &self.preset) {
            (Some(spec), _) => Ok(spec.clone()),
            (None, Some(name)) => SyntheticSpec::preset(name),
            (None, None) => SyntheticSpec::preset("synergy-small"),
        }
    }
}

/// Model fields that live in the `[model]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_id: usize,
    pub d_im: usize,
    pub d_te: usize,
    pub d_e: usize,
    pub hidden: usize,
    pub attention_hidden: usize,
    pub heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_id: m.d_id,
            d_im: m.d_im,
            d_te: m.d_te,
            d_e: m.d_e,
            hidden: m.hidden,
            attention_hidden: m.attention_hidden,
            heads: m.heads,
        }
    }
}

/// Training fields that live in the `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: crate::training::OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub w1: f64,
    pub w2: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub base_auc: Option<f64>,
    pub rela_impr_mode: crate::metrics::RelaImprMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            optimizer: t.optimizer,
            lr: t.lr,
            batch_size: t.batch_size,
            w1: t.w1,
            w2: t.w2,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            seed: t.seed,
            base_auc: t.base_auc,
            rela_impr_mode: t.rela_impr_mode,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainSection,
    pub model: ModelSection,
    pub src: SrcConfig,
    pub ablation: Ablation,
    pub data: DataSection,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = FileConfig::parse(&text)?;
        // a relative manifest path is taken relative to the config file
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_train_config(c: &TrainConfig) -> Self {
        let m = &c.model;
        FileConfig {
            train: TrainSection {
                optimizer: c.optimizer,
                lr: c.lr,
                batch_size: c.batch_size,
                w1: c.w1,
                w2: c.w2,
                max_epochs: c.max_epochs,
                early_stop_patience: c.early_stop_patience,
                seed: c.seed,
                base_auc: c.base_auc,
                rela_impr_mode: c.rela_impr_mode,
            },
            model: ModelSection {
                d_id: m.d_id,
                d_im: m.d_im,
                d_te: m.d_te,
                d_e: m.d_e,
                hidden: m.hidden,
                attention_hidden: m.attention_hidden,
                heads: m.heads,
            },
            src: m.src.clone(),
            ablation: m.ablation,
            data: DataSection::default(),
        }
    }

    /// The validated training configuration this file describes.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let (t, m) = (&self.train, &self.model);
        let cfg = TrainConfig {
            model: ModelConfig {
                d_id: m.d_id,
                d_im: m.d_im,
                d_te: m.d_te,
                d_e: m.d_e,
                hidden: m.hidden,
                attention_hidden: m.attention_hidden,
                heads: m.heads,
                src: self.src.clone(),
                ablation: self.ablation,
            },
            optimizer: t.optimizer,
            lr: t.lr,
            batch_size: t.batch_size,
            w1: t.w1,
            w2: t.w2,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            seed: t.seed,
            base_auc: t.base_auc,
            rela_impr_mode: t.rela_impr_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = FileConfig::parse("").unwrap();
        assert_eq!(cfg, FileConfig::default());
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
        assert_eq!(cfg.data.synthetic_spec().unwrap(), SyntheticSpec::preset("synergy-small").unwrap());
    }

    #[test]
    fn documented_example_parses() {
        let text = r#"
            [train]
            lr = 1e-3
            batch_size = 256
            w1 = 0.01
            w2 = 0.01

            [model]
            d_e = 32
            heads = 8

            [src]
            T = 12
            alpha_start = 0.999
            alpha_end = 0.98
            weight_init = 0.5

            [ablation]
            no_src = true

            [data]
            preset = "synergy-small"
            seeds = [0, 1, 2]
        "#;
        let cfg = FileConfig::parse(text).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!((t.batch_size, t.model.d_e, t.model.src.steps), (256, 32, 12));
        assert!(t.model.ablation.no_src && !t.model.ablation.no_mfe);
        assert_eq!(cfg.data.seeds, Some(vec![0, 1, 2]));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(FileConfig::parse("[train]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(FileConfig::parse("[bogus]\n"), Err(Error::Config(_))));
        let cfg = FileConfig::parse("[train]\nw1 = 0.5\n").unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::Config(_))));
        let cfg = FileConfig::parse("[model]\nd_e = 30\nheads = 8\n").unwrap();
        assert!(cfg.train_config().is_err());
        let cfg = FileConfig::parse("[data]\npreset = \"giant\"\n").unwrap();
        assert!(cfg.data.synthetic_spec().is_err());
    }

    #[test]
    fn spec_table_overrides_single_fields() {
        let cfg = FileConfig::parse("[data.spec]\nn_users = 50\nbeta = 2.5\n").unwrap();
        let spec = cfg.data.synthetic_spec().unwrap();
        assert_eq!((spec.n_users, spec.beta), (50, 2.5));
        assert_eq!(spec.n_items, SyntheticSpec::preset("synergy-small").unwrap().n_items);
    }

    #[test]
    fn train_config_round_trips_through_toml() {
        let mut t = crate::experiments::bench_train_config();
        t.model.src.negative_margin = Some(0.25);
        t.base_auc = Some(0.6585);
        let text = FileConfig::from_train_config(&t).to_toml().unwrap();
        assert_eq!(FileConfig::parse(&text).unwrap().train_config().unwrap(), t);
    }

    #[test]
    fn relative_manifest_resolves_next_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[data]\nmanifest = \"d/manifest.json\"\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert_eq!(cfg.data.manifest.unwrap(), dir.path().join("d/manifest.json"));
        assert!(matches!(FileConfig::load(&dir.path().join("missing.toml")), Err(Error::Config(_))));
    }
}
