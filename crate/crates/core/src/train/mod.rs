//! Staged training: CTC pretraining of the A2P network, text-only P2T
//! pretraining, joint fine-tuning with online N-best candidates, and the
//! baseline recipe. All stages share one loop: length-bucketed batches,
//! Adam on a Noam schedule, global-norm clipping, and averaging of the last
//! epoch snapshots.

mod average;
mod log;
mod optim;
mod specaug;
mod stages;


use serde::{Deserialize, Serialize};

pub use average::{average_checkpoints, average_stores};
pub use log::{EpochRow, MetricsLog, StepRow};
pub use optim::{clip_global_norm, noam_lr, Adam};
pub use specaug::{spec_augment, SpecAugment};
pub use stages::{
    candidates_from_log_probs, generate_candidates, joint_finetune, pretrain_a2p, pretrain_p2t, train_baseline, DevSet, StageReport, TrainState,
};

use crate::error::{Error, Result};
use crate::eval::Scoring;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    A2pPretrain,
    P2tPretrain,
    Joint,
    Baseline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::A2pPretrain => "a2p_pretrain",
            Stage::P2tPretrain => "p2t_pretrain",
            Stage::Joint => "joint",
            Stage::Baseline => "baseline",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimisation settings. Dropout, label smoothing and the candidate beam
/// live in [`crate::model::ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub seed: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Multiplies the Noam learning rate.
    pub lr_scale: f64,
    pub epochs_a2p: usize,
    pub epochs_p2t: usize,
    pub epochs_joint: usize,
    pub epochs_baseline: usize,
    pub clip_norm: f64,
    /// Number of final epoch snapshots averaged into the result.
    pub avg_last: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
    /// Train the A2P network during joint fine-tuning.
    pub unfreeze_a2p: bool,
    /// Beam width of the end-of-epoch dev decode.
    pub dev_beam: usize,
    /// Score the dev set every this many epochs (and after the last one);
    /// 0 scores it only after the last epoch.
    pub dev_every: usize,
    /// Beam width for final decoding.
    pub decode_beam: usize,
    pub scoring: Scoring,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            seed: 1,
            batch_size: 16,
            warmup_steps: 150,
            lr_scale: 0.5,
            epochs_a2p: 20,
            epochs_p2t: 30,
            epochs_joint: 10,
            epochs_baseline: 30,
            clip_norm: 5.0,
            avg_last: 5,
            time_masks: 2,
            max_time_width: 10,
            freq_masks: 1,
            max_freq_width: 3,
            unfreeze_a2p: false,
            dev_beam: 1,
            dev_every: 1,
            decode_beam: 10,
            scoring: Scoring::LengthNormalized,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("warmup_steps", self.warmup_steps as usize),
            ("avg_last", self.avg_last),
            ("dev_beam", self.dev_beam),
            ("decode_beam", self.decode_beam),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }

    pub fn spec_augment(&self) -> SpecAugment {
        SpecAugment {
            time_masks: self.time_masks,
            max_time_width: self.max_time_width,
            freq_masks: self.freq_masks,
            max_freq_width: self.max_freq_width,
        }
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::A2pPretrain => self.epochs_a2p,
            Stage::P2tPretrain => self.epochs_p2t,
            Stage::Joint => self.epochs_joint,
            Stage::Baseline => self.epochs_baseline,
        }
    }
}
