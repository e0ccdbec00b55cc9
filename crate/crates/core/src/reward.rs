//! Human reward: thresholded mimicry distance in SOM space, or a direct scalar.

use serde::{Deserialize, Serialize};

use crate::cnn::CnnModel;
use crate::error::{Error, Result};
use crate::face::FaceImage;
use crate::learner::{REWARD_MAX, REWARD_MIN};
use crate::som::{normalized_bmu_distance, BmuPosition, SomModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    #[default]
    Mimicry,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Distance cut points for +2, +1, 0 and -1; anything beyond the last is -2.
    pub thresholds: [f64; 4],
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            thresholds: [0.10, 0.30, 0.55, 0.80],
            mode: RewardMode::Mimicry,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        let inside = t.iter().all(|&v| v > 0.0 && v < 1.0);
        let increasing = t.windows(2).all(|w| w[0] < w[1]);
        if !(inside && increasing) {
            return Err(Error::InvalidArgument(format!(
                "thresholds {t:?} must be strictly increasing inside (0, 1)"
            )));
        }
        Ok(())
    }
}

pub fn threshold_distance(d: f64, cfg: &RewardConfig) -> Result<i8> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidArgument(format!("distance {d} outside [0, 1]")));
    }
    let level = cfg.thresholds.iter().take_while(|&&t| d >= t).count();
    Ok(2 - level as i8)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MimicryOutcome {
    pub reward: i8,
    pub mimic_bmu: BmuPosition,
    pub distance: f64,
}

/// Rewards the robot by how close the user's mimic lands to their original
/// expression on the SOM.
pub fn mimicry_reward(
    som: &SomModel,
    cnn: &CnnModel,
    stimulus_bmu: &BmuPosition,
    mimic_image: &FaceImage,
    cfg: &RewardConfig,
) -> Result<MimicryOutcome> {
    let features = cnn.forward_features(mimic_image)?;
    let mimic_bmu = som.best_matching_unit(&features)?;
    let distance = normalized_bmu_distance(stimulus_bmu, &mimic_bmu)?;
    Ok(MimicryOutcome {
        reward: threshold_distance(distance, cfg)?,
        mimic_bmu,
        distance,
    })
}

/// Passes a trainer-supplied value through, clamped to [-2, 2].
pub fn direct_reward(value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("reward {value} is not finite")));
    }
    Ok(value.clamp(REWARD_MIN, REWARD_MAX))
}
