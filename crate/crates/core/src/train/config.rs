use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{MNetConfig, THead, TNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainT,
    PretrainM,
    E2e,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainT => "pretrain_t",
            Stage::PretrainM => "pretrain_m",
            Stage::E2e => "e2e",
        }
    }

    pub(crate) fn stream(self) -> u64 {
        match self {
            Stage::PretrainT => 11,
            Stage::PretrainM => 12,
            Stage::E2e => 13,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings of one training stage.
///
/// `crop_size` is the network input side for the pre-training stages and
/// the outer (native scale) crop side for end-to-end training. `scales` are
/// the candidate window sides that get resized to `crop_size` when
/// pre-training, or to `inner_size` for the matting branch end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub crop_size: usize,
    pub scales: Vec<usize>,
    pub inner_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub flip_prob: f64,
    pub rotation_degrees: f64,
    /// Inclusive range the per-sample trimap radius is drawn from (matting pre-training).
    pub radius_range: [i64; 2],
    /// When false the matting pre-training uses the midpoint of `radius_range`.
    pub radius_augmentation: bool,
    /// Radius of the ground-truth trimaps the segmentation branch learns.
    pub target_radius: i64,
    /// Reject windows missing the unknown band (up to ten draws).
    pub unknown_centering: bool,
    /// What the segmentation network predicts (trimap, or a baseline head).
    pub head: THead,
    /// End to end only: false returns the matting output directly.
    pub fusion: bool,
    /// Train on this many fixed samples with fixed windows and no augmentation; 0 disables.
    pub overfit_samples: usize,
    pub val_every: u64,
    pub val_samples: usize,
    pub checkpoint_every: u64,
}

impl StageConfig {
    /// Settings from the paper's implementation details.
    pub fn paper(stage: Stage) -> Self {
        let base = Self {
            stage,
            crop_size: 320,
            scales: vec![320, 480, 640],
            inner_size: 320,
            batch_size: 10,
            learning_rate: 1e-4,
            max_steps: 10_000,
            seed: 0,
            flip_prob: 0.5,
            rotation_degrees: 0.0,
            radius_range: [2, 10],
            radius_augmentation: true,
            target_radius: 6,
            unknown_centering: true,
            head: THead::Trimap,
            fusion: true,
            overfit_samples: 0,
            val_every: 200,
            val_samples: 8,
            checkpoint_every: 1000,
        };
        match stage {
            Stage::PretrainT => Self {
                crop_size: 400,
                scales: vec![400, 600, 800],
                rotation_degrees: 10.0,
                unknown_centering: false,
                ..base
            },
            Stage::PretrainM => base,
            Stage::E2e => Self {
                crop_size: 800,
                learning_rate: 1e-5,
                ..base
            },
        }
    }

    /// Settings for 320x320 synthetic images on one CPU core. The trimap
    /// network sees windows close to native scale, since it runs on whole
    /// images unscaled at test time.
    pub fn desk(stage: Stage) -> Self {
        let paper = Self::paper(stage);
        let base = Self {
            scales: vec![64, 96, 128],
            inner_size: 64,
            crop_size: 64,
            val_samples: 4,
            checkpoint_every: 500,
            ..paper
        };
        match stage {
            Stage::PretrainT => Self {
                crop_size: 96,
                scales: vec![96, 112, 128],
                learning_rate: 1e-3,
                max_steps: 800,
                ..base
            },
            Stage::PretrainM => Self {
                learning_rate: 1e-3,
                max_steps: 800,
                ..base
            },
            Stage::E2e => Self {
                crop_size: 160,
                learning_rate: 1e-4,
                max_steps: 200,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("{}: {m}", self.stage)));
        if self.crop_size < 8 || self.batch_size == 0 {
            return fail("crop_size must be >= 8 and batch_size positive".into());
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s < 4) {
            return fail("scales must be non-empty and at least 4".into());
        }
        if self.stage == Stage::E2e && self.scales.iter().any(|&s| s > self.crop_size) {
            return fail("inner scales must fit inside the outer crop".into());
        }
        if self.stage == Stage::E2e && self.inner_size < 4 {
            return fail("inner_size must be at least 4".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob must be in [0, 1], got {}", self.flip_prob));
        }
        if !(0.0..=crate::imaging::MAX_ROTATION_DEGREES).contains(&self.rotation_degrees) {
            return fail(format!("rotation_degrees must be in [0, 45], got {}", self.rotation_degrees));
        }
        let [lo, hi] = self.radius_range;
        if lo < 1 || hi < lo || self.target_radius < 1 {
            return fail("radii must be >= 1 and radius_range ordered".into());
        }
        if self.stage != Stage::PretrainT && self.head != THead::Trimap {
            return fail("baseline heads are trained in the pretrain_t stage only".into());
        }
        Ok(())
    }

    pub fn mid_radius(&self) -> i64 {
        (self.radius_range[0] + self.radius_range[1]) / 2
    }
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: StageConfig,
    pub tnet: TNetConfig,
    pub mnet: MNetConfig,
    pub loss: LossWeights,
}

impl TrainConfig {
    pub fn desk(stage: Stage) -> Self {
        Self {
            stage: StageConfig::desk(stage),
            tnet: TNetConfig::default(),
            mnet: MNetConfig::default(),
            loss: LossWeights::default(),
        }
    }

    /// Published hyper-parameters with a full-width matting network and a
    /// wide, deep segmentation network.
    pub fn paper(stage: Stage) -> Self {
        Self {
            stage: StageConfig::paper(stage),
            tnet: TNetConfig {
                base_channels: 64,
                depth: 4,
                ..TNetConfig::default()
            },
            mnet: MNetConfig {
                width_multiplier: 1.0,
                ..MNetConfig::default()
            },
            loss: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        self.tnet.validate()?;
        self.mnet.validate()?;
        self.loss.validate()?;
        if self.tnet.head != self.stage.head {
            return Err(Error::Config(format!(
                "tnet head {:?} differs from stage head {:?}",
                self.tnet.head, self.stage.head
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_presets_match_published_numbers() {
        let t = StageConfig::paper(Stage::PretrainT);
        assert_eq!(t.crop_size, 400);
        let m = StageConfig::paper(Stage::PretrainM);
        assert_eq!(m.crop_size, 320);
        let e = StageConfig::paper(Stage::E2e);
        assert_eq!(e.crop_size, 800);
        assert_eq!(e.scales, vec![320, 480, 640]);
        assert_eq!(e.inner_size, 320);
        assert_eq!(e.learning_rate, 1e-5);
        assert_eq!(e.batch_size, 10);
        for s in [t, m, e] {
            assert_eq!(s.flip_prob, 0.5);
            s.validate().unwrap();
        }
    }

    #[test]
    fn desk_presets_validate() {
        for stage in [Stage::PretrainT, Stage::PretrainM, Stage::E2e] {
            TrainConfig::desk(stage).validate().unwrap();
        }
        assert_eq!(StageConfig::desk(Stage::E2e).crop_size, 160);
    }
}
