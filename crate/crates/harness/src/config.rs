//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use drd_core::adversarial::{DiscriminatorSpec, GP_WEIGHT};
use drd_core::data::{PadMode, SyntheticSpec, TileSpec, DEFAULT_IGNORE_INDEX};
use drd_core::distill::{LossToggles, LossWeights};
use drd_core::models::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Folder-pairs layout with `train/` and `val/` subdirectories.
    Folder {
        root: PathBuf,
        num_classes: usize,
        #[serde(default = "default_ignore")]
        ignore_index: u8,
    },
}

fn default_ignore() -> u8 {
    DEFAULT_IGNORE_INDEX
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Student iterations in `distill`.
    pub iters: usize,
    /// Iterations in `train-teacher`.
    pub teacher_iters: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    /// Validation snapshot period in steps; 0 keeps only the final snapshot.
    pub eval_every: usize,
    /// Random horizontal and vertical flips.
    pub augment: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            teacher_iters: 500,
            poly_power: 0.9,
            batch_size: 8,
            eval_every: 250,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub conv_widths: Vec<usize>,
    pub gp_weight: f64,
    pub lr: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            conv_widths: DiscriminatorSpec::desk().conv_widths,
            gp_weight: GP_WEIGHT,
            lr: 1e-4,
        }
    }
}

impl AdversarialConfig {
    pub fn spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            conv_widths: self.conv_widths.clone(),
            ..DiscriminatorSpec::default()
        }
    }
}

fn default_relation_side() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub toggles: LossToggles,
    pub dataset: DatasetSource,
    /// Tiling used by evaluation.
    pub tile: TileSpec,
    /// Student optimizer, and the teacher's unless `teacher_optimizer` is set.
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adversarial: AdversarialConfig,
    /// Taps larger than this per side are pooled before the relation losses.
    #[serde(default = "default_relation_side")]
    pub relation_max_side: usize,
}

impl ExperimentConfig {
    /// Tiny teacher (width 1) and student (width 1/3) on 64x64 synthetic data.
    pub fn desk(seed: u64) -> Self {
        Self {
            name: "desk".into(),
            seed,
            teacher: ModelSpec::from_name("tiny_cnn", 6).expect("known name"),
            student: ModelSpec::from_name("tiny_student", 6).expect("known name"),
            weights: LossWeights::default(),
            toggles: LossToggles::ALL,
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                num_images: 200,
                size: (64, 64),
                num_classes: 6,
                shape_family: drd_core::data::ShapeFamily::Rects,
                seed,
            }),
            tile: TileSpec::square(64, 64, PadMode::Reflect).expect("valid tile"),
            optimizer: OptimizerConfig::default(),
            teacher_optimizer: Some(OptimizerConfig {
                lr: 0.1,
                ..OptimizerConfig::default()
            }),
            schedule: ScheduleConfig::default(),
            adversarial: AdversarialConfig::default(),
            relation_max_side: default_relation_side(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn teacher_optimizer(&self) -> &OptimizerConfig {
        self.teacher_optimizer.as_ref().unwrap_or(&self.optimizer)
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.num_classes,
            DatasetSource::Folder { num_classes, .. } => *num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.weights.validate()?;
        self.tile.validate()?;
        self.adversarial.spec().validate()?;
        let k = self.num_classes();
        if self.teacher.num_classes != k || self.student.num_classes != k {
            bail!(
                "class counts disagree: dataset {k}, teacher {}, student {}",
                self.teacher.num_classes,
                self.student.num_classes
            );
        }
        if self.schedule.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        for o in std::iter::once(&self.optimizer).chain(&self.teacher_optimizer) {
            if o.lr.is_nan() || o.lr <= 0.0 || o.momentum < 0.0 || o.weight_decay < 0.0 {
                bail!("optimizer settings out of range: {o:?}");
            }
        }
        if self.relation_max_side == 0 {
            bail!("relation_max_side must be positive");
        }
        Ok(())
    }
}
