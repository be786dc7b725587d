//! JSON run configurations for the `tas` binary. Unknown keys are rejected
//! and every document is validated before any computation starts.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::NetworkSpec;
use crate::pipeline::PipelineConfig;
use crate::rng::{derive_seed, stream};
use crate::tasks::{family_split, load_csv, make_synthetic, Dataset, SyntheticConfig};
use crate::theorem::ConvergenceExperiment;

pub trait RunConfig: DeserializeOwned {
    fn validate(&self) -> Result<()>;

    /// Replaces every embedded seed with one derived from `master`.
    fn reseed(&mut self, master: u64);

    fn out_dir(&self) -> Option<&Path>;

    /// Makes relative paths inside the document relative to `base`.
    fn resolve_paths(&mut self, _base: &Path) {}
}

/// Reads, resolves and validates a config file.
pub fn load<T: RunConfig>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let mut cfg: T = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySplit {
    pub test_family: usize,
    pub train_per_family: usize,
}

impl FamilySplit {
    fn validate(&self, synth: &SyntheticConfig) -> Result<()> {
        if self.test_family >= synth.n_families
            || self.train_per_family == 0
            || self.train_per_family >= synth.classes_per_family
        {
            return Err(Error::InvalidConfig("family split out of range".into()));
        }
        Ok(())
    }

    pub fn n_train_classes(&self, synth: &SyntheticConfig) -> usize {
        synth.n_families * self.train_per_family
    }

    pub fn n_test_classes(&self, synth: &SyntheticConfig) -> usize {
        synth.classes_per_family - self.train_per_family
    }
}

fn synth_seed(master: u64) -> u64 {
    derive_seed(master, stream::SYNTH)
}

/// `tas synth`: one generated dataset, optionally also split by family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRunConfig {
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub split: Option<FamilySplit>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig for SynthRunConfig {
    fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.split.map_or(Ok(()), |s| s.validate(&self.synthetic))
    }

    fn reseed(&mut self, master: u64) {
        self.synthetic.seed = synth_seed(master);
    }

    fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { train: PathBuf, test: PathBuf },
    Synthetic { synthetic: SyntheticConfig, split: FamilySplit },
}

impl DataSource {
    /// Training and test datasets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Csv { train, test } => Ok((load_csv(train)?, load_csv(test)?)),
            DataSource::Synthetic { synthetic, split } => {
                let data = make_synthetic(synthetic)?;
                family_split(&data, synthetic, split.test_family, split.train_per_family)
            }
        }
    }
}

/// `tas tas` and `tas fewshot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineRunConfig {
    pub data: DataSource,
    pub network: NetworkSpec,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig for PipelineRunConfig {
    fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.pipeline.validate()?;
        if let DataSource::Synthetic { synthetic, split } = &self.data {
            synthetic.validate()?;
            split.validate(synthetic)?;
            if self.network.input_dim() != synthetic.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "network input is {} but data has dimension {}",
                    self.network.input_dim(),
                    synthetic.input_dim
                )));
            }
            if self.network.head_classes != split.n_train_classes(synthetic) {
                return Err(Error::InvalidConfig(format!(
                    "head has {} classes but the split trains {}",
                    self.network.head_classes,
                    split.n_train_classes(synthetic)
                )));
            }
            if self.pipeline.n_test != split.n_test_classes(synthetic) {
                return Err(Error::InvalidConfig(format!(
                    "n_test is {} but the split leaves {} test classes",
                    self.pipeline.n_test,
                    split.n_test_classes(synthetic)
                )));
            }
        }
        Ok(())
    }

    fn reseed(&mut self, master: u64) {
        self.pipeline.reseed(master);
        if let DataSource::Synthetic { synthetic, .. } = &mut self.data {
            synthetic.seed = synth_seed(master);
        }
    }

    fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Csv { train, test } = &mut self.data {
            *train = base.join(&*train);
            *test = base.join(&*test);
        }
    }
}

/// `tas theorem1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremRunConfig {
    #[serde(default)]
    pub experiment: ConvergenceExperiment,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig for TheoremRunConfig {
    fn validate(&self) -> Result<()> {
        self.experiment.validate()
    }

    fn reseed(&mut self, master: u64) {
        self.experiment.seed = master;
    }

    fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }
}
