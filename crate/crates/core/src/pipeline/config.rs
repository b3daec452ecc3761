//! Experiment configuration, read from JSON.
//!
//! ```json
//! {
//!   "model": "mini_vgg8",
//!   "dataset": { "kind": "idx", "images": "data/mnist-10k/images-idx3-ubyte.gz",
//!                "labels": "data/mnist-10k/labels-idx1-ubyte.gz", "test_fraction": 0.2 },
//!   "granularities": ["filter", "layer"],
//!   "sparsity": { "lambda_filter": 1.0, "lambda_layer": 1.0, "lambda_branch": 1.0, "lambda_block": 1.0 },
//!   "epochs": 15,
//!   "seed": 7
//! }
//! ```
//!
//! Every other field has a default; see [`ExperimentConfig`]. Relative paths
//! are resolved against the directory holding the config file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{GateNoise, Granularity, SparsityConfig, Thresholds};
use crate::spec::catalog;
use crate::spec::shortcuts::MismatchPolicy;
use crate::spec::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// IDX image/label files, optionally gzip-compressed. Without test
    /// files the training pair is split by `test_fraction`.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
    /// CIFAR-10 binary batches.
    Cifar {
        train: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        test: Vec<PathBuf>,
    },
    /// Two-class planted data at the model's input shape (see
    /// [`crate::data::synthetic_planted`]), generated from the run seed.
    Synthetic { n_per_class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Overrides the name derived from the files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Stratified subsample applied before splitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_per_class: Option<usize>,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    /// Share of the training split held out for threshold search and
    /// per-epoch evaluation; 0 uses the test split instead.
    #[serde(default = "defaults::validation_fraction")]
    pub validation_fraction: f64,
    /// Apply the fixed per-dataset mean/std when the dataset is known.
    #[serde(default = "defaults::yes")]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPolicy {
    #[serde(default)]
    pub grid_min: f64,
    #[serde(default = "defaults::grid_max")]
    pub grid_max: f64,
    #[serde(default = "defaults::grid_step")]
    pub grid_step: f64,
    /// Largest tolerated accuracy drop, in percentage points.
    #[serde(default = "defaults::max_drop")]
    pub max_drop: f64,
    /// Skip the search and use these thresholds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced: Option<Thresholds>,
}

impl Default for SearchPolicy {
    fn default() -> Self {
        Self { grid_min: 0.0, grid_max: 0.5, grid_step: 0.01, max_drop: 1.0, forced: None }
    }
}

impl SearchPolicy {
    /// Candidate thresholds in ascending order.
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.grid_max - self.grid_min) / self.grid_step + 1e-9).floor() as usize;
        (0..=n).map(|i| ((self.grid_min + i as f64 * self.grid_step) * 1e9).round() / 1e9).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Catalog name or path to a spec JSON file.
    pub model: String,
    /// Input shape override for catalog models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub dataset: DatasetConfig,
    pub granularities: BTreeSet<Granularity>,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub gate_noise: GateNoise,
    pub epochs: usize,
    /// Training with binarized gates still in place, before surgery.
    #[serde(default = "defaults::binarized_epochs")]
    pub binarized_fine_tune_epochs: usize,
    /// Training of the pruned network.
    #[serde(default = "defaults::fine_tune_epochs")]
    pub fine_tune_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Fractions of a phase after which the rate is multiplied by `lr_decay`.
    #[serde(default = "defaults::milestones")]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::l2")]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threshold_search: SearchPolicy,
    #[serde(default)]
    pub keep_scaffold: bool,
    /// Fine-tune only batchnorm and dense parameters.
    #[serde(default)]
    pub freeze_except_bn_dense: bool,
    /// Train the unpruned model with the same phases for the baseline
    /// accuracy; otherwise the gated model before binarization is used.
    #[serde(default = "defaults::yes")]
    pub train_baseline: bool,
    #[serde(default)]
    pub mismatch_policy: MismatchPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

mod defaults {
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn validation_fraction() -> f64 {
        0.1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn grid_max() -> f64 {
        0.5
    }
    pub fn grid_step() -> f64 {
        0.01
    }
    pub fn max_drop() -> f64 {
        1.0
    }
    pub fn binarized_epochs() -> usize {
        10
    }
    pub fn fine_tune_epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn milestones() -> Vec<f64> {
        vec![0.5, 0.75]
    }
    pub fn lr_decay() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn l2() -> f64 {
        5e-4
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the required fields.
    pub fn new(model: &str, source: DataSource, granularities: BTreeSet<Granularity>, epochs: usize) -> Self {
        let json = serde_json::json!({ "model": model, "dataset": source, "granularities": granularities, "epochs": epochs });
        serde_json::from_value(json).expect("defaults fill every optional field")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.dataset.source {
            DataSource::Idx { images, labels, test_images, test_labels } => {
                for p in [Some(images), Some(labels), test_images.as_mut(), test_labels.as_mut()].into_iter().flatten() {
                    resolve(base, p);
                }
            }
            DataSource::Cifar { train, test } => train.iter_mut().chain(test.iter_mut()).for_each(|p| resolve(base, p)),
            DataSource::Synthetic { .. } => {}
        }
        if !catalog::BUILTIN_NAMES.contains(&cfg.model.as_str()) && Path::new(&cfg.model).is_relative() {
            cfg.model = base.join(&cfg.model).to_string_lossy().into_owned();
        }
        if let Some(out) = &mut cfg.out_dir {
            resolve(base, out);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.granularities.is_empty() {
            return bad("at least one granularity must be enabled".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.momentum >= 0.0) || !(self.l2 >= 0.0) || !(self.lr_decay >= 0.0) {
            return bad("learning_rate, momentum, l2 and lr_decay must be nonnegative".into());
        }
        self.sparsity.validate()?;
        let s = &self.threshold_search;
        if !(s.grid_step > 0.0) || !(0.0..=1.0).contains(&s.grid_min) || !(s.grid_min..=1.0).contains(&s.grid_max) {
            return bad(format!("threshold grid {}..{} step {} is not inside [0, 1]", s.grid_min, s.grid_max, s.grid_step));
        }
        if let Some(forced) = &s.forced {
            if let Some((g, t)) = forced.iter().find(|(_, t)| !(0.0..=1.0).contains(*t)) {
                return bad(format!("forced threshold {t} for {g} outside [0, 1]"));
            }
        }
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.test_fraction) || !(0.0..1.0).contains(&d.validation_fraction) {
            return bad("test_fraction and validation_fraction must lie in [0, 1)".into());
        }
        if d.subset_per_class == Some(0) {
            return bad("subset_per_class must be at least 1".into());
        }
        if let DataSource::Synthetic { n_per_class } = d.source {
            if n_per_class < 2 {
                return bad(format!("synthetic n_per_class must be at least 2, got {n_per_class}"));
            }
        }
        Ok(())
    }

    /// The model spec named by `model`, before any shortcut insertion.
    pub fn resolve_spec(&self) -> Result<ModelSpec> {
        if catalog::BUILTIN_NAMES.contains(&self.model.as_str()) {
            let (shape, classes) = catalog::default_input(&self.model).expect("catalog name");
            let shape = self.input_shape.clone().unwrap_or(shape);
            catalog::builtin_with(&self.model, &shape, self.classes.unwrap_or(classes))
        } else if Path::new(&self.model).exists() {
            ModelSpec::load(&self.model)
        } else {
            catalog::builtin(&self.model)
        }
    }
}
