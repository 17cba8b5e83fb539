//! Flag and config-file resolution. Every option is optional on both sides;
//! a flag given on the command line wins over the same key in the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use catx_core::data::{DatasetName, DatasetSpec};
use catx_core::train::{Pipeline, TrainConfig};
use catx_core::vit::ModelConfig;
use clap::Args;
use serde::Deserialize;

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunOpts {
    /// mnist, fmnist or cifar
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    /// Source class pair as "a,b" (label 0, label 1)
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    #[serde(alias = "learning-rate")]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Train on only the first N training instances
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub seed_init: Option<u64>,
    #[arg(long)]
    pub seed_shuffle: Option<u64>,
    #[arg(long)]
    pub seed_gumbel: Option<u64>,
    #[arg(long)]
    pub seed_eval: Option<u64>,
    /// Seed of the train/validation partition
    #[arg(long)]
    pub seed_split: Option<u64>,
}

macro_rules! overlay {
    ($a:expr, $b:expr, $($f:ident),*) => {
        RunOpts { $($f: $a.$f.clone().or($b.$f.clone()),)* }
    };
}

impl RunOpts {
    /// Fields set here win; the rest come from `file`.
    pub fn over(&self, file: &RunOpts) -> RunOpts {
        overlay!(
            self,
            file,
            dataset,
            classes,
            dim,
            depth,
            heads,
            epochs,
            lr,
            batch_size,
            temperature,
            val_fraction,
            train_limit,
            seed_init,
            seed_shuffle,
            seed_gumbel,
            seed_eval,
            seed_split
        )
    }

    pub fn dataset(&self) -> Result<DatasetName> {
        self.dataset
            .context("--dataset is required (or set `dataset` in the config file)")
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let name = self.dataset()?;
        let mut spec = DatasetSpec::new(name);
        if let Some(pair) = &self.classes {
            spec.class_pair = parse_pair(pair)?;
        }
        if let Some(v) = self.val_fraction {
            spec.val_fraction = v;
        }
        if let Some(s) = self.seed_split {
            spec.seed = s;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Reference width/depth for the dataset unless overridden.
    pub fn model(&self, pipeline: Pipeline) -> Result<ModelConfig> {
        let name = self.dataset()?;
        let reference = ModelConfig::reference(name, pipeline.head_kind());
        let dim = self.dim.unwrap_or(reference.dim);
        let depth = self.depth.unwrap_or(reference.depth);
        let mut m = ModelConfig::for_dataset(name, pipeline.head_kind(), dim, depth);
        if let Some(h) = self.heads {
            m.heads = h;
        }
        m.validate()?;
        Ok(m)
    }

    /// Full training configuration for one cell.
    pub fn train_config(
        &self,
        pipeline: Pipeline,
        frac: Option<f64>,
        lambda: Option<f64>,
        blackbox: Option<PathBuf>,
    ) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.dataset_spec()?, self.model(pipeline)?, pipeline);
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        cfg.train_limit = self.train_limit;
        cfg.seeds.init = self.seed_init.unwrap_or(cfg.seeds.init);
        cfg.seeds.shuffle = self.seed_shuffle.unwrap_or(cfg.seeds.shuffle);
        cfg.seeds.gumbel = self.seed_gumbel.unwrap_or(cfg.seeds.gumbel);
        cfg.seeds.eval = self.seed_eval.unwrap_or(cfg.seeds.eval);
        cfg.frac = frac;
        cfg.lambda = lambda;
        cfg.blackbox_checkpoint = blackbox;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_pair(s: &str) -> Result<(u8, u8)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        bail!("expected a class pair like 3,8, got '{s}'");
    }
    Ok((parts[0].parse()?, parts[1].parse()?))
}

/// Config file: a `[run]` table with the same keys as the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunOpts,
    #[serde(default)]
    pub sweep: SweepFile,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub fracs: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Per-frac λ used when a sweep is not given an explicit λ list.
pub fn default_lambda(dataset: DatasetName, frac: f64) -> Option<f64> {
    let table: &[(f64, f64)] = match dataset {
        DatasetName::Mnist => &[(0.05, 0.9), (0.1, 0.7), (0.25, 0.6), (0.5, 0.7)],
        DatasetName::Fmnist => &[(0.05, 0.7), (0.1, 0.9), (0.25, 0.5), (0.5, 0.6)],
        DatasetName::Cifar => &[(0.05, 0.9), (0.1, 0.9), (0.25, 0.9), (0.5, 0.9)],
    };
    table.iter().find(|(f, _)| (f - frac).abs() < 1e-9).map(|&(_, l)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: FileConfig =
            toml::from_str("[run]\ndataset = \"mnist\"\ndim = 64\nepochs = 3\n[sweep]\nfracs = [0.1]\n").unwrap();
        let flags = RunOpts {
            epochs: Some(5),
            ..Default::default()
        };
        let r = flags.over(&file.run);
        assert_eq!(r.dataset, Some(DatasetName::Mnist));
        assert_eq!(r.dim, Some(64));
        assert_eq!(r.epochs, Some(5));
        let cfg = r.train_config(Pipeline::Expvit, Some(0.1), Some(0.7), None).unwrap();
        assert_eq!(cfg.model.depth, 6);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.k(), Some(5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[run]\nlearning_rat = 1.0\n").is_err());
    }

    #[test]
    fn lambda_defaults_cover_the_standard_fracs() {
        for d in DatasetName::ALL {
            for f in [0.05, 0.1, 0.25, 0.5] {
                assert!(default_lambda(d, f).is_some());
            }
        }
        assert_eq!(default_lambda(DatasetName::Mnist, 0.3), None);
    }
}
