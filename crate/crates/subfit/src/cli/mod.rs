//! Experiment orchestration: run configs, phase commands, and the run
//! manifest. Each phase writes its artifacts under `<out>/<phase>/` and
//! appends to `<out>/manifest.json`; identical configs reproduce identical
//! metric files byte for byte.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::Structure;
use crate::net::{Activation, TrainConfig};
use crate::projections::ProjectionSpec;

/// Complete description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub swag: SwagConfig,
    #[serde(default)]
    pub laplace: LaplaceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.projection.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.swag.validate()?;
        self.laplace.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub csv: Option<CsvPaths>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match (&self.generator, &self.csv) {
            (Some(g), None) => g.validate(),
            (None, Some(_)) => Ok(()),
            _ => Err(Error::config(
                "dataset must specify exactly one of `generator` or `csv`",
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    TwoMoons,
    Blobs,
}

/// Synthetic task family: a fine-tuning task, a rotated variant of it for
/// pretraining, and shifted-blob OOD sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Gaussian jitter for two-moons.
    pub noise: f64,
    /// Blob standard deviation (blobs generator and OOD sets).
    pub blob_std: f64,
    pub blob_means: [[f64; 2]; 2],
    /// Rotation of the pretraining variant, degrees.
    pub pretrain_rotation_degrees: f64,
    pub pretrain_n_train: usize,
    pub pretrain_n_val: usize,
    /// Append quadratic monomials to the 2-D features of every emitted set.
    pub quadratic_features: bool,
    /// Centers of the shifted-blob OOD sets; the first is the standard shift.
    pub ood_shifts: Vec<[f64; 2]>,
    pub ood_n: usize,
    pub ood_std: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::TwoMoons,
            n_train: 256,
            n_val: 128,
            n_test: 512,
            noise: 0.25,
            blob_std: 0.5,
            blob_means: [[3.0, 3.0], [-3.0, -3.0]],
            pretrain_rotation_degrees: 40.0,
            pretrain_n_train: 512,
            pretrain_n_val: 128,
            quadratic_features: false,
            ood_shifts: vec![[4.0, 4.0], [8.0, 8.0]],
            ood_n: 512,
            ood_std: 0.5,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.pretrain_n_train == 0 {
            return Err(Error::config("generator sample counts must be positive"));
        }
        if self.ood_shifts.is_empty() || self.ood_n == 0 {
            return Err(Error::config("at least one OOD shift is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvPaths {
    pub pretrain_train: PathBuf,
    #[serde(default)]
    pub pretrain_val: Option<PathBuf>,
    pub train: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub ood: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden-layer widths; input and class counts come from the data.
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("model.hidden must be nonempty positive widths"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwagConfig {
    /// Deviation window (covariance rank).
    pub k: usize,
    /// Posterior samples used at prediction time.
    pub samples: usize,
    /// SWAG-phase epochs; one snapshot is collected per epoch after burn-in.
    pub epochs: usize,
    pub burn_in_epochs: usize,
    /// SWAG-phase constant learning rate = MAP learning rate * lr_factor.
    pub lr_factor: f64,
}

impl Default for SwagConfig {
    fn default() -> Self {
        Self {
            k: 10,
            samples: 15,
            epochs: 20,
            burn_in_epochs: 0,
            lr_factor: 0.1,
        }
    }
}

impl SwagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs <= self.burn_in_epochs + 1 {
            return Err(Error::config(
                "swag.epochs must exceed burn_in_epochs by at least 2 snapshots",
            ));
        }
        if self.samples == 0 {
            return Err(Error::config("swag.samples must be positive"));
        }
        if self.lr_factor <= 0.0 {
            return Err(Error::config("swag.lr_factor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointChoice {
    /// Early-stopping checkpoint recorded during `train-map`.
    Early,
    /// Final MAP checkpoint.
    Final,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaplaceConfig {
    pub structure: Structure,
    /// Which MAP checkpoint the expansion is taken around.
    pub checkpoint: CheckpointChoice,
    /// Early checkpoint epoch; defaults to train.epochs / 2.
    pub checkpoint_epoch: Option<usize>,
    /// Prior-precision grid; defaults to 15 points log-uniform on [1e-3, 1e3].
    pub grid: Option<Vec<f64>>,
    pub samples: usize,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            structure: Structure::Kron,
            checkpoint: CheckpointChoice::Early,
            checkpoint_epoch: None,
            grid: None,
            samples: 15,
        }
    }
}

impl LaplaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("laplace.samples must be positive"));
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() || grid.iter().any(|&l| l <= 0.0) {
                return Err(Error::config("laplace.grid must be positive and nonempty"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ece_bins: usize,
    /// OOD score: total predictive entropy or its epistemic part.
    pub ood_score: OodScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodScore {
    Total,
    Epistemic,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ece_bins: 15,
            ood_score: OodScore::Total,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ece_bins == 0 {
            return Err(Error::config("eval.ece_bins must be positive"));
        }
        Ok(())
    }
}

/// Posterior artifact targeted by `evaluate` and `ood`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    #[default]
    Map,
    Swag,
    Laplace,
}

impl std::str::FromStr for PosteriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(PosteriorKind::Map),
            "swag" => Ok(PosteriorKind::Swag),
            "laplace" => Ok(PosteriorKind::Laplace),
            other => Err(Error::config(format!(
                "unknown posterior `{other}` (expected map, swag, or laplace)"
            ))),
        }
    }
}
