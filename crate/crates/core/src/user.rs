//! Simulated trainer: shows emotions and mimics robot expressions with a
//! configurable fidelity.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::expression::ExpressionAction;
use crate::face::{render_face, Emotion, FaceImage, IdentityParams, MAX_NOISE};

pub const PROFILE_VERSION: u32 = 1;
const N: usize = Emotion::COUNT;

pub type Confusion = [[f64; N]; N];

pub fn uniform_confusion() -> Confusion {
    [[1.0 / N as f64; N]; N]
}

/// Profile file contents (TOML). `identity` may be given as a bare integer
/// seed or as a full parameter table; it is always written as a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub version: u32,
    #[serde(deserialize_with = "identity_or_seed")]
    pub identity: IdentityParams,
    pub mimic_accuracy: f64,
    pub expression_noise: f64,
    pub seed: u64,
    /// Row i: probabilities of mimicking emotion j when the robot displayed
    /// the expression for emotion i and the user got it wrong.
    #[serde(default = "uniform_confusion")]
    pub confusion: Confusion,
}

fn identity_or_seed<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<IdentityParams, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Seed(u64),
        Full(IdentityParams),
    }
    Ok(match Repr::deserialize(d)? {
        Repr::Seed(s) => IdentityParams::from_seed(s),
        Repr::Full(p) => p,
    })
}

impl UserProfile {
    pub fn new(identity_seed: u64, mimic_accuracy: f64, expression_noise: f64, seed: u64) -> Result<Self> {
        let p = Self {
            version: PROFILE_VERSION,
            identity: IdentityParams::from_seed(identity_seed),
            mimic_accuracy,
            expression_noise,
            seed,
            confusion: uniform_confusion(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn perfect_mimic(identity_seed: u64, expression_noise: f64, seed: u64) -> Result<Self> {
        Self::new(identity_seed, 1.0, expression_noise, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PROFILE_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported profile version {} (expected {PROFILE_VERSION})",
                self.version
            )));
        }
        if !(0.0..=1.0).contains(&self.mimic_accuracy) {
            return Err(Error::InvalidArgument(format!("mimic_accuracy {} outside [0, 1]", self.mimic_accuracy)));
        }
        if !(0.0..=MAX_NOISE).contains(&self.expression_noise) {
            return Err(Error::InvalidArgument(format!(
                "expression_noise {} outside [0, {MAX_NOISE}]",
                self.expression_noise
            )));
        }
        self.identity.validate()?;
        for (i, row) in self.confusion.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("confusion row {i} is not a probability distribution")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Parse {
            field: "profile",
            reason: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_toml())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mimic {
    pub emotion: Emotion,
    pub image: FaceImage,
}

/// A profile plus its private random stream.
#[derive(Clone, Debug)]
pub struct SimulatedUser {
    profile: UserProfile,
    rng: ChaCha8Rng,
}

impl SimulatedUser {
    pub fn new(profile: UserProfile) -> Result<Self> {
        profile.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(profile.seed);
        Ok(Self { profile, rng })
    }

    pub fn profile(&self) -> &UserProfile {
        &self.profile
    }

    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restores the stream position saved by [`SimulatedUser::rng_word_pos`].
    pub fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    pub fn present_emotion(&mut self, emotion: Emotion) -> Result<FaceImage> {
        let seed = self.rng.random::<u64>();
        render_face(emotion, &self.profile.identity, self.profile.expression_noise, seed)
    }

    pub fn mimic_action(&mut self, robot_action: &ExpressionAction) -> Result<Mimic> {
        let shown = robot_action
            .emotion()
            .ok_or_else(|| Error::InvalidArgument(format!("{robot_action} is not a catalog action")))?;
        let emotion = if self.rng.random::<f64>() < self.profile.mimic_accuracy {
            shown
        } else {
            self.sample_confusion(shown)
        };
        Ok(Mimic {
            emotion,
            image: self.present_emotion(emotion)?,
        })
    }

    fn sample_confusion(&mut self, shown: Emotion) -> Emotion {
        let row = &self.profile.confusion[shown.code()];
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Emotion::ALL[j];
            }
        }
        let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(N - 1);
        Emotion::ALL[last]
    }
}
