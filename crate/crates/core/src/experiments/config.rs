use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_toy_dataset, load_dataset, AugmentationPolicy, Dataset, Recipe, RecipeParams,
};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::losses::LossConfig;
use crate::models::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        recipe: Recipe,
        n: usize,
        seed: u64,
        #[serde(default)]
        params: RecipeParams,
    },
    File {
        path: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            recipe: Recipe::Gratings,
            n: 2048,
            seed: 0,
            params: RecipeParams::default(),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                recipe,
                n,
                seed,
                params,
            } => generate_toy_dataset(*recipe, *n, *seed, params),
            DatasetSpec::File { path } => load_dataset(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Images (from the start of the training split) in the fixed
    /// diagnostic batch.
    pub batch: usize,
    /// Probe every this many epochs, and always after the final epoch.
    /// Zero disables probing.
    pub probe_every: usize,
    /// Conditional log-determinant cadence; zero disables it.
    pub conditional_every: usize,
    pub conditional_views: usize,
    pub conditional_images: usize,
    /// Record elapsed seconds per epoch. Off by default so metrics files
    /// stay byte-for-byte reproducible.
    pub wall_clock: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            batch: 512,
            probe_every: 10,
            conditional_every: 10,
            conditional_views: 8,
            conditional_images: 32,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Fraction of the dataset held out for probe evaluation.
    pub test_fraction: f64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augmentation: AugmentationPolicy,
    pub probe: ProbeConfig,
    pub diagnostics: DiagnosticsConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            test_fraction: 0.25,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augmentation: AugmentationPolicy::default(),
            probe: ProbeConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            epochs: 30,
            batch_size: 64,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.diagnostics.batch < 2 {
            return Err(Error::Config("diagnostics.batch must be >= 2".into()));
        }
        if self.diagnostics.conditional_every > 0 && self.diagnostics.conditional_views < 2 {
            return Err(Error::Config(
                "diagnostics.conditional_views must be >= 2".into(),
            ));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augmentation.validate()?;
        self.optim
            .schedule(self.batch_size, self.epochs)
            .validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }
}
