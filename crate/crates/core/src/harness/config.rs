//! Flat `key=value` experiment configuration.

use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::backbone::{CellSpec, NetworkConfig};
use crate::checkpoint::parse_key_values;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nas::{Genotype, SearchConfig, SupernetOptions};
use crate::objectives::{LossConfig, Objective};
use crate::optim::AdamConfig;

pub const SEED_ENV: &str = "AUTOHR_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Search,
    Train,
    Eval,
    Synth,
    Baseline,
    Plot,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Search => "search",
            RunMode::Train => "train",
            RunMode::Eval => "eval",
            RunMode::Synth => "synth",
            RunMode::Baseline => "baseline",
            RunMode::Plot => "plot",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            RunMode::Search,
            RunMode::Train,
            RunMode::Eval,
            RunMode::Synth,
            RunMode::Baseline,
            RunMode::Plot,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub folds: usize,
    pub fold: usize,
    pub clip_len: usize,
    pub search_clip_len: usize,
    pub batch_size: usize,
    pub search_batch_size: usize,
    pub epochs: usize,
    pub search_epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub lambda_time: f64,
    pub objective: Objective,
    pub da1: bool,
    pub da2: bool,
    pub initial_channels: usize,
    pub search_channels: usize,
    /// Preset name or path to a genotype file.
    pub genotype: String,
    pub shared: bool,
    pub partial_channels: usize,
    pub edge_normalization: bool,
    pub eval_clip_secs: f64,
    pub seed: u64,
    pub sequential: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: RunMode::Train,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            folds: 5,
            fold: 0,
            clip_len: 160,
            search_clip_len: 128,
            batch_size: 4,
            search_batch_size: 2,
            epochs: 15,
            search_epochs: 12,
            warmup_epochs: 5,
            lr: 1e-4,
            weight_decay: 5e-5,
            arch_lr: 6e-4,
            arch_weight_decay: 1e-3,
            lambda_time: 0.2,
            objective: Objective::Overall,
            da1: true,
            da2: true,
            initial_channels: 16,
            search_channels: 8,
            genotype: "autohr_v1".into(),
            shared: true,
            partial_channels: 1,
            edge_normalization: false,
            eval_clip_secs: 10.0,
            seed: 0,
            sequential: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse("config", format!("`{key}` cannot take the value `{value}`")))
}

impl ExperimentConfig {
    /// Read a config file, then apply the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_text(&text, &path.display().to_string())?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text, origin)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_value(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => {
                self.mode = RunMode::from_name(v).ok_or_else(|| Error::parse("config", format!("unknown mode `{v}`")))?
            }
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "folds" => self.folds = parse_value(key, v)?,
            "fold" => self.fold = parse_value(key, v)?,
            "clip_len" => self.clip_len = parse_value(key, v)?,
            "search_clip_len" => self.search_clip_len = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "search_batch_size" => self.search_batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "search_epochs" => self.search_epochs = parse_value(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "arch_lr" => self.arch_lr = parse_value(key, v)?,
            "arch_weight_decay" => self.arch_weight_decay = parse_value(key, v)?,
            "lambda" | "lambda_time" => self.lambda_time = parse_value(key, v)?,
            "objective" => {
                self.objective = Objective::from_name(v)
                    .ok_or_else(|| Error::parse("config", format!("unknown objective `{v}`")))?
            }
            "da1" => self.da1 = parse_value(key, v)?,
            "da2" => self.da2 = parse_value(key, v)?,
            "initial_channels" => self.initial_channels = parse_value(key, v)?,
            "search_channels" => self.search_channels = parse_value(key, v)?,
            "genotype" => self.genotype = v.to_string(),
            "shared" => self.shared = parse_value(key, v)?,
            "partial_channels" => self.partial_channels = parse_value(key, v)?,
            "edge_normalization" => self.edge_normalization = parse_value(key, v)?,
            "eval_clip_secs" => self.eval_clip_secs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "sequential" => self.sequential = parse_value(key, v)?,
            _ => return Err(Error::parse("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("folds", self.folds),
            ("clip_len", self.clip_len),
            ("search_clip_len", self.search_clip_len),
            ("batch_size", self.batch_size),
            ("search_batch_size", self.search_batch_size),
            ("initial_channels", self.initial_channels),
            ("search_channels", self.search_channels),
            ("partial_channels", self.partial_channels),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("`{k}` must be positive")));
        }
        if self.fold >= self.folds {
            return Err(Error::InvalidArgument(format!(
                "fold {} out of range for {} folds",
                self.fold, self.folds
            )));
        }
        if !(self.eval_clip_secs > 0.0) {
            return Err(Error::InvalidArgument("eval_clip_secs must be positive".into()));
        }
        self.loss().validate()
    }

    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_time: self.lambda_time,
            objective: self.objective,
            ..LossConfig::default()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            seed: self.seed,
            ..AugmentConfig::default()
        }
    }

    /// Resolve `genotype` as a preset name or a file.
    pub fn resolve_genotype(&self) -> Result<Genotype> {
        match Genotype::preset(&self.genotype) {
            Some(g) => Ok(g),
            None => Genotype::load(Path::new(&self.genotype)),
        }
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        Ok(NetworkConfig::new(self.initial_channels, CellSpec::Discrete(self.resolve_genotype()?)).with_seed(self.seed))
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            initial_channels: self.search_channels,
            shared: self.shared,
            options: SupernetOptions {
                partial_channels: self.partial_channels,
                edge_normalization: self.edge_normalization,
            },
            epochs: self.search_epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.search_batch_size,
            clip_len: self.search_clip_len,
            weights_opt: AdamConfig::new(self.lr, self.weight_decay),
            arch_opt: AdamConfig::new(self.arch_lr, self.arch_weight_decay),
            loss: self.loss(),
            seed: self.seed,
            exec: self.exec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = ExperimentConfig::default();
        assert_eq!((c.clip_len, c.batch_size, c.epochs), (160, 4, 15));
        assert_eq!((c.search_clip_len, c.search_batch_size, c.search_epochs, c.warmup_epochs), (128, 2, 12, 5));
        assert_eq!((c.lr, c.weight_decay, c.arch_lr, c.arch_weight_decay), (1e-4, 5e-5, 6e-4, 1e-3));
        assert_eq!(c.lambda_time, 0.2);
    }

    #[test]
    fn parses_and_rejects() {
        let c = ExperimentConfig::from_text("epochs = 3\nobjective=time\n# c\nda2=false\nlambda=0.5\n", "t").unwrap();
        assert_eq!((c.epochs, c.objective, c.da2, c.lambda_time), (3, Objective::TimeOnly, false, 0.5));
        assert!(ExperimentConfig::from_text("bogus=1", "t").is_err());
        assert!(ExperimentConfig::from_text("epochs=many", "t").is_err());
        assert!(ExperimentConfig::from_text("folds=2\nfold=2", "t").is_err());
        assert!(ExperimentConfig::from_text("batch_size=0", "t").is_err());
    }

    #[test]
    fn genotype_resolution() {
        let c = ExperimentConfig::default();
        assert_eq!(c.resolve_genotype().unwrap(), Genotype::preset("autohr_v1").unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.txt");
        Genotype::preset("autohr_v1").unwrap().save(&p).unwrap();
        let c2 = ExperimentConfig {
            genotype: p.display().to_string(),
            ..c
        };
        assert!(c2.resolve_genotype().is_ok());
    }
}
