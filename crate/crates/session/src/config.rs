//! Session configuration file (TOML).

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xtamer_core::learner::LearnerConfig;
use xtamer_core::reward::RewardConfig;
use xtamer_core::som::SomConfig;
use xtamer_core::user::UserProfile;

use crate::error::{Result, SessionError};

/// Where stimuli and rewards come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum UserSource {
    /// A simulated trainer. Without a profile path, a perfect mimic with
    /// identity 1, noise 0.05 and the session seed is used.
    Simulated {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        profile: Option<PathBuf>,
    },
    /// A human driving the HTTP API. Calibration uses synthetic renders of
    /// this identity.
    Interactive {
        #[serde(default = "default_identity")]
        identity_seed: u64,
        #[serde(default = "default_noise")]
        expression_noise: f64,
    },
}

fn default_identity() -> u64 {
    1
}

fn default_noise() -> f64 {
    0.05
}

impl Default for UserSource {
    fn default() -> Self {
        UserSource::Simulated { profile: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    /// Pretrained CNN checkpoint.
    pub cnn: PathBuf,
    /// Calibration presentations per emotion.
    pub calibration_samples: usize,
    pub interactions_per_epoch: usize,
    pub epochs: usize,
    /// Held-out stimuli per emotion for the final evaluation.
    pub eval_per_class: usize,
    /// Greedy accuracy that counts as converged.
    pub convergence_accuracy: f64,
    /// Interactive mode only: how long a presented action waits for its reward.
    pub reward_timeout_secs: f64,
    pub reward: RewardConfig,
    pub learner: LearnerConfig,
    pub som: SomConfig,
    pub user: UserSource,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            cnn: PathBuf::from("cnn.xt"),
            calibration_samples: 10,
            interactions_per_epoch: 100,
            epochs: 10,
            eval_per_class: 50,
            convergence_accuracy: 0.85,
            reward_timeout_secs: 120.0,
            reward: RewardConfig::default(),
            learner: LearnerConfig::default(),
            som: SomConfig::default(),
            user: UserSource::default(),
        }
    }
}

/// Independent sub-streams of the session seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Som = 1,
    Learner = 2,
    Schedule = 3,
    Exploration = 4,
    Evaluation = 5,
    Presenter = 6,
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SessionError::Config(m));
        if self.interactions_per_epoch == 0 {
            return bad("interactions_per_epoch must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.calibration_samples == 0 {
            return bad("calibration_samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.convergence_accuracy) {
            return bad(format!("convergence_accuracy {} outside [0, 1]", self.convergence_accuracy));
        }
        if !(self.reward_timeout_secs >= 0.0) {
            return bad(format!("reward_timeout_secs {} must be non-negative", self.reward_timeout_secs));
        }
        self.reward.validate()?;
        self.learner.validate()?;
        if self.som.iterations == 0 || self.som.rows == 0 || self.som.cols == 0 {
            return bad("som needs iterations, rows and cols of at least 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| SessionError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn som_config(&self) -> SomConfig {
        SomConfig {
            seed: derive_seed(self.seed, Stream::Som, 0),
            ..self.som.clone()
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            seed: derive_seed(self.seed, Stream::Learner, 0),
            ..self.learner.clone()
        }
    }

    /// The simulated trainer's profile, loaded from disk when a path is set.
    pub fn simulated_profile(&self) -> Result<UserProfile> {
        match &self.user {
            UserSource::Simulated { profile: Some(p) } => Ok(UserProfile::load(p)?),
            UserSource::Simulated { profile: None } => Ok(UserProfile::perfect_mimic(1, 0.05, self.seed)?),
            UserSource::Interactive { .. } => Err(SessionError::Config("user source is interactive".into())),
        }
    }

    /// Fingerprint of everything that shapes a run except its length, used
    /// to refuse resuming a checkpoint from a different setup.
    pub fn fingerprint(&self) -> u32 {
        let mut c = self.clone();
        c.epochs = 0;
        crc32fast::hash(c.to_toml().as_bytes())
    }
}
