//! Stream configuration: a TOML document describing the task sequence,
//! rehearsal mode, data sources and every training hyper-parameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::colorstats::DEFAULT_CROP_FRACTION;
use crate::dataset::{Naming, SynthSpec};
use crate::embed::{DEFAULT_ALPHA, DEFAULT_EPS, DEFAULT_MIN_SAMPLES, DEFAULT_TAU};
use crate::nn::DEFAULT_LR;
use crate::{Error, Result};

/// How earlier tasks are rehearsed while training a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rehearsal {
    /// No rehearsal.
    Baseline,
    /// Transferred twins guided by a prompter drawn from the pool.
    #[default]
    Prompter,
    /// Transferred twins guided by stored per-camera summary statistics.
    CameraSummary,
    /// Reservoir buffer of stored training images (comparison only; reads
    /// earlier tasks' pixels).
    Replay,
}

impl std::str::FromStr for Rehearsal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Rehearsal::Baseline),
            "prompter" => Ok(Rehearsal::Prompter),
            "camera_summary" | "cas" => Ok(Rehearsal::CameraSummary),
            "replay" => Ok(Rehearsal::Replay),
            _ => Err(Error::InvalidArgument(format!("unknown rehearsal mode {s:?}"))),
        }
    }
}

/// Where a task's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic identities. The held-out split uses `test_identities` fresh
    /// identities numbered after the training ones.
    Synth {
        #[serde(flatten)]
        spec: SynthSpec,
        #[serde(default = "default_test_identities")]
        test_identities: usize,
    },
    /// Image directories; `query` and `gallery` form the held-out split.
    Directory {
        train: PathBuf,
        query: PathBuf,
        gallery: PathBuf,
        #[serde(default = "default_naming")]
        naming: Naming,
    },
}

/// A held-out set evaluated after every task but never trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenConfig {
    pub id: String,
    #[serde(flatten)]
    pub data: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub id: String,
    pub data: DataSource,
    /// Ground-truth identities are used (first task only).
    #[serde(default)]
    pub supervised: bool,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Defaults to 64 for the supervised task and 128 otherwise.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Embedding learning rate; defaults to 3.5e-4 supervised, 2e-4 otherwise.
    #[serde(default)]
    pub lr: Option<f64>,
    /// Weight of the transferred twins; originals get `1 − lambda`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Add color-shuffled copies to each supervised batch.
    #[serde(default)]
    pub shuffle_pretrain: bool,
    /// Train this task's prompter on color re-sampled batches.
    #[serde(default = "default_true")]
    pub resample: bool,
    /// Crop fraction for frame-only source statistics on summary-guided
    /// transfers; absent means plain transfer.
    #[serde(default)]
    pub object_agnostic: Option<f64>,
}

impl TaskConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.supervised { 64 } else { 128 })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.supervised { 3.5e-4 } else { DEFAULT_LR })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task {:?}: {m}", self.id)));
        if self.id.is_empty() {
            return bad("empty task id".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size() < 2 {
            return bad("batch size must be ≥ 2".into());
        }
        if !(self.lr() >= 0.0 && self.lr().is_finite()) {
            return bad(format!("learning rate {}", self.lr()));
        }
        if let Some(f) = self.object_agnostic {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("crop fraction {f} outside [0, 1)"));
            }
        }
        if let DataSource::Synth { spec, .. } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Hyper-parameters shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub tau: f64,
    pub alpha: f64,
    pub eps: f64,
    pub min_samples: usize,
    /// Times `eps` is multiplied by 1.5 when clustering finds nothing.
    pub eps_retries: usize,
    pub prompter_lr: f64,
    /// Prompter epochs over the task's images after the embedding epochs.
    pub prompter_epochs: usize,
    pub prompter_batch_size: usize,
    pub replay_capacity: usize,
    pub flip_prob: f64,
    /// Maximum random translation as a fraction of each side.
    pub crop_shift: f64,
    pub erase_prob: f64,
    /// Default crop fraction reported for object-agnostic transfers.
    pub crop_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
            min_samples: DEFAULT_MIN_SAMPLES,
            eps_retries: 3,
            prompter_lr: DEFAULT_LR,
            prompter_epochs: 0,
            prompter_batch_size: 32,
            replay_capacity: 512,
            flip_prob: 0.5,
            crop_shift: 0.0,
            erase_prob: 0.0,
            crop_fraction: DEFAULT_CROP_FRACTION,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps <= 2.0) || self.min_samples == 0 {
            return Err(Error::Config("clustering needs eps in (0, 2] and min_samples ≥ 1".into()));
        }
        if !(self.prompter_lr >= 0.0 && self.prompter_lr.is_finite()) || self.prompter_batch_size < 2 {
            return Err(Error::Config("prompter needs a finite lr and batch size ≥ 2".into()));
        }
        if !prob(self.flip_prob) || !prob(self.erase_prob) || !(0.0..0.5).contains(&self.crop_shift) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1], crop shift in [0, 0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.crop_fraction) {
            return Err(Error::Config(format!("crop fraction {} outside [0, 1)", self.crop_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default)]
    pub seed: u64,
    /// Report directory; relative paths resolve against the config file.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub rehearsal: Rehearsal,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(rename = "task")]
    pub tasks: Vec<TaskConfig>,
    #[serde(default, rename = "unseen")]
    pub unseen: Vec<UnseenConfig>,
}

impl StreamConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: StreamConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file, resolving relative data and output paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path).map_err(crate::error::at(path))?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(o) = cfg.output.as_mut() {
            fix(o);
        }
        let sources = cfg.tasks.iter_mut().map(|t| &mut t.data).chain(cfg.unseen.iter_mut().map(|u| &mut u.data));
        for d in sources {
            if let DataSource::Directory { train, query, gallery, .. } = d {
                fix(train);
                fix(query);
                fix(gallery);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let first = self.tasks.first().ok_or_else(|| Error::Config("stream has no tasks".into()))?;
        if !first.supervised {
            return Err(Error::Config("the first task must be supervised".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if i > 0 && t.supervised {
                return Err(Error::Config(format!("task {:?}: only the first task may be supervised", t.id)));
            }
            if !ids.insert(t.id.as_str()) {
                return Err(Error::Config(format!("duplicate task id {:?}", t.id)));
            }
        }
        for u in &self.unseen {
            if !ids.insert(u.id.as_str()) {
                return Err(Error::Config(format!("duplicate data set id {:?}", u.id)));
            }
        }
        Ok(())
    }
}

fn default_test_identities() -> usize {
    8
}
fn default_naming() -> Naming {
    Naming::MarketStyle
}
fn default_epochs() -> usize {
    10
}
fn default_lambda() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
