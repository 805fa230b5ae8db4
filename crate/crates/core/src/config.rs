//! Configuration of a whole pipeline run.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterArch, AdapterBudget, IdentityBudget, TaskWeighting};
use crate::classifier::ClassifierConfig;
use crate::gan::{GanArch, GanHyper};
use crate::tasks::TaskConfig;
use crate::world::{conditions, ConditionSpec, SplitPlan, WorldConfig, REFERENCE_ID};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TauPolicy {
    /// Mean plus three standard deviations of the distances between
    /// averaged validation windows of the same condition.
    Calibrated,
    Fixed { tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// Frame buffer length; novelty is tested once it is full.
    pub buffer: usize,
    /// Step between validation windows used for calibration.
    pub window_stride: usize,
    pub tau: TauPolicy,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            buffer: 16,
            window_stride: 4,
            tau: TauPolicy::Calibrated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: String,
    pub world: WorldConfig,
    pub splits: SplitPlan,
    /// Initial conditions learned offline; one more is held out for online
    /// learning.
    pub initial_conditions: usize,
    pub tasks: TaskConfig,
    pub gan_arch: GanArch,
    pub gan: GanHyper,
    pub adapter_arch: AdapterArch,
    pub identity: IdentityBudget,
    pub adapter: AdapterBudget,
    pub online_adapter: AdapterBudget,
    pub weighting: TaskWeighting,
    pub classifier: ClassifierConfig,
    pub online: OnlineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            output_dir: "out".into(),
            world: WorldConfig::default(),
            splits: SplitPlan::default(),
            initial_conditions: 4,
            tasks: TaskConfig::default(),
            gan_arch: GanArch::default(),
            gan: GanHyper::default(),
            adapter_arch: AdapterArch::default(),
            identity: IdentityBudget::default(),
            adapter: AdapterBudget::default(),
            online_adapter: AdapterBudget {
                epochs: 4,
                ..AdapterBudget::default()
            },
            weighting: TaskWeighting::default(),
            classifier: ClassifierConfig::default(),
            online: OnlineConfig::default(),
        }
    }
}

/// Fixed stream labels for [`PipelineConfig::stage_seed`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Segmentation,
    Retrieval,
    Identity,
    Gan(u32),
    Adapter(u32),
    Classifier,
    Online,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world.height", self.world.height),
            ("world.width", self.world.width),
            ("world.places", self.world.places as usize),
            ("initial_conditions", self.initial_conditions),
            ("tasks.seg_epochs", self.tasks.seg_epochs),
            ("tasks.ret_epochs", self.tasks.ret_epochs),
            ("tasks.batch", self.tasks.batch),
            ("gan.steps", self.gan.steps),
            ("gan.finetune_steps", self.gan.finetune_steps),
            ("gan.batch", self.gan.batch),
            ("identity.steps", self.identity.steps),
            ("identity.batch", self.identity.batch),
            ("adapter.epochs", self.adapter.epochs),
            ("adapter.batch", self.adapter.batch),
            ("adapter.patience", self.adapter.patience),
            ("online_adapter.epochs", self.online_adapter.epochs),
            ("online_adapter.batch", self.online_adapter.batch),
            ("online_adapter.patience", self.online_adapter.patience),
            ("classifier.epochs", self.classifier.epochs),
            ("classifier.batch", self.classifier.batch),
            ("online.buffer", self.online.buffer),
            ("online.window_stride", self.online.window_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if !self.world.height.is_multiple_of(16) || !self.world.width.is_multiple_of(16) {
            return Err(Error::Config("image height and width must be multiples of 16".into()));
        }
        if !(self.gan.lambda_rec >= 0.0 && self.gan.lambda_adv >= 0.0) {
            return Err(Error::Config("GAN loss weights must be non-negative".into()));
        }
        if let TauPolicy::Fixed { tau } = self.online.tau {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::Config(format!("fixed novelty threshold must be positive, got {tau}")));
            }
        }
        self.weighting.validate()?;
        let (initial, held) = self.conditions()?;
        let ids: Vec<u32> = core::iter::once(REFERENCE_ID)
            .chain(initial.iter().map(|c| c.id))
            .chain([held.id])
            .collect();
        self.splits.validate(&ids)?;
        let test_frames = self.splits.test_per_place as usize * self.world.places as usize;
        if self.online.buffer > test_frames {
            return Err(Error::Config("frame buffer longer than a test stream".into()));
        }
        Ok(())
    }

    pub fn conditions(&self) -> Result<(Vec<ConditionSpec>, ConditionSpec)> {
        conditions(self.initial_conditions)
    }

    pub fn route(&self) -> Vec<u32> {
        (0..self.world.places).collect()
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let label = match stage {
            Stage::Segmentation => 1,
            Stage::Retrieval => 2,
            Stage::Identity => 3,
            Stage::Gan(c) => 0x100 + u64::from(c),
            Stage::Adapter(c) => 0x200 + u64::from(c),
            Stage::Classifier => 4,
            Stage::Online => 5,
        };
        Rng::new(self.seed).split(label).seed()
    }
}
