//! Run configuration file (TOML with `[grid]`, `[model]`, `[train]`,
//! `[ensemble]` and `[paths]` sections). Unknown keys are rejected and every
//! key falls back to the desk preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{PerturbKind, PerturbStrategy, IC_AMPLITUDE};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, SynthConfig, VariableCatalog};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogPreset {
    /// t2m and wind10 at the surface, z and t at 500/850 hPa.
    Desk,
    /// Geopotential at two levels plus the desk surface set.
    Small,
    /// Five upper-air variables on 13 levels and four surface variables.
    Paper,
}

impl CatalogPreset {
    pub fn catalog(self) -> VariableCatalog {
        match self {
            CatalogPreset::Desk => VariableCatalog::desk(),
            CatalogPreset::Small => VariableCatalog::small(),
            CatalogPreset::Paper => VariableCatalog::paper(),
        }
    }
}

/// Grid, variable set and synthetic data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub catalog: CatalogPreset,
    pub start_year: i32,
    pub years: usize,
    pub noise_amplitude: f64,
    pub noise_memory: f64,
    pub slow_period: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        GridSection {
            h: 16,
            w: 32,
            patch: 4,
            catalog: CatalogPreset::Desk,
            start_year: s.start_year,
            years: s.years,
            noise_amplitude: s.noise_amplitude,
            noise_memory: s.noise_memory,
            slow_period: s.slow_period,
        }
    }
}

impl GridSection {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::uniform(self.h, self.w, self.patch)
    }

    pub fn synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            start_year: self.start_year,
            years: self.years,
            seed,
            noise_amplitude: self.noise_amplitude,
            noise_memory: self.noise_memory,
            slow_period: self.slow_period,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub members: usize,
    pub strategy: PerturbKind,
    pub sigma: f64,
    pub enabled_layers: Option<Vec<usize>>,
    pub ic_amplitude: f64,
    pub base_seed: u64,
    pub quantiles: Vec<f64>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            members: 51,
            strategy: PerturbKind::LayerNoise,
            sigma: 1.0,
            enabled_layers: None,
            ic_amplitude: IC_AMPLITUDE,
            base_seed: 1000,
            quantiles: vec![0.1, 0.5, 0.9],
        }
    }
}

impl EnsembleSection {
    pub fn strategy(&self) -> PerturbStrategy {
        PerturbStrategy {
            kind: self.strategy,
            sigma: self.sigma,
            enabled_layers: self.enabled_layers.clone(),
            ic_amplitude: self.ic_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Synthetic dataset directory.
    pub data: PathBuf,
    /// One `pm_KK.tqck` per lead.
    pub checkpoints: PathBuf,
    /// Forecasts and reports.
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { data: "run/data".into(), checkpoints: "run/checkpoints".into(), out: "run/out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            grid: GridSection::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            ensemble: EnsembleSection::default(),
            paths: PathsSection::default(),
        }
    }

    /// Full-size hyperparameters on the coarse global grid. Far too slow for
    /// CPU training; kept for reference runs.
    pub fn paper() -> Self {
        RunConfig {
            grid: GridSection { h: 32, w: 64, patch: 4, catalog: CatalogPreset::Paper, ..GridSection::default() },
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.grid()?;
        self.model.validate()?;
        self.train.validate()?;
        self.strategy().validate()?;
        if self.model.history != self.train.history || self.model.segment != self.train.segment {
            return Err(Error::Config("[model] and [train] history/segment lengths differ".into()));
        }
        if self.grid.years < 4 {
            return Err(Error::Config("[grid] years must be at least 4 for train/val/test splits".into()));
        }
        if self.ensemble.members == 0 {
            return Err(Error::Config("[ensemble] members must be at least 1".into()));
        }
        if let Some(layers) = &self.ensemble.enabled_layers {
            if layers.iter().any(|&l| l == 0 || l > self.model.depth) {
                return Err(Error::Config(format!("[ensemble] enabled_layers must lie in 1..={}", self.model.depth)));
            }
        }
        if self.ensemble.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::Config("[ensemble] quantiles must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn strategy(&self) -> PerturbStrategy {
        self.ensemble.strategy()
    }
}
