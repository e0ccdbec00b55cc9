//! The interaction loop shared by offline simulation and the HTTP service.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xtamer_core::checkpoint::{Section, SESSION_TAG};
use xtamer_core::cnn::CnnModel;
use xtamer_core::expression::{ExpressionAction, ACTION_COUNT};
use xtamer_core::face::{Emotion, FaceImage};
use xtamer_core::learner::{epoch_cost, RewardModel, RewardSample, Selection};
use xtamer_core::reward::{mimicry_reward, MimicryOutcome};
use xtamer_core::som::{train_som, BmuPosition, LabelMap, SomModel};

use crate::config::{derive_seed, SessionConfig, Stream};
use crate::error::{Result, SessionError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Calibrating,
    Training,
    Idle,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Calibrating => "calibrating",
            Phase::Training => "training",
            Phase::Idle => "idle",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Phase::Calibrating, Phase::Training, Phase::Idle]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub samples: usize,
    pub purity: f64,
    pub quantization_error: f64,
    pub visited_units: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_map: Option<LabelMap>,
}

/// A stimulus that has been perceived and answered, awaiting its reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Presentation {
    pub index: u64,
    pub emotion: Option<Emotion>,
    pub stimulus_bmu: BmuPosition,
    pub action: ExpressionAction,
    pub predicted: [f64; ACTION_COUNT],
    pub explored: bool,
}

/// How the observed reward was obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feedback {
    Mimic {
        outcome: MimicryOutcome,
        mimic_emotion: Option<Emotion>,
    },
    Direct {
        value: f64,
    },
}

impl Feedback {
    pub fn reward(&self) -> f64 {
        match self {
            Feedback::Mimic { outcome, .. } => f64::from(outcome.reward),
            Feedback::Direct { value } => *value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub index: u64,
    pub epoch: usize,
    pub emotion: Option<Emotion>,
    pub stimulus_bmu: BmuPosition,
    pub action: ExpressionAction,
    pub predicted: [f64; ACTION_COUNT],
    pub explored: bool,
    pub reward: f64,
    pub mimic_emotion: Option<Emotion>,
    pub mimic_bmu: Option<BmuPosition>,
    pub distance: Option<f64>,
    pub cost: f64,
    /// Interaction counter in simulation, Unix milliseconds when interactive.
    pub timestamp: u64,
}

impl InteractionRecord {
    /// `None` when the presented emotion is unknown.
    pub fn correct(&self) -> Option<bool> {
        self.emotion.map(|e| self.action.emotion() == Some(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub interactions: usize,
    pub first_index: u64,
    pub avg_cost: f64,
    /// Greedy accuracy over interactions whose emotion is known.
    pub accuracy: Option<f64>,
}

impl EpochSummary {
    pub fn from_records(epoch: usize, records: &[InteractionRecord]) -> xtamer_core::Result<Self> {
        let costs: Vec<f64> = records.iter().map(|r| r.cost).collect();
        let judged: Vec<bool> = records.iter().filter_map(InteractionRecord::correct).collect();
        Ok(Self {
            epoch,
            interactions: records.len(),
            first_index: records.first().map_or(0, |r| r.index),
            avg_cost: epoch_cost(&costs)?,
            accuracy: (!judged.is_empty())
                .then(|| judged.iter().filter(|&&c| c).count() as f64 / judged.len() as f64),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_class: usize,
    /// Stimuli answered with the matching expression, by emotion code.
    pub correct: [usize; Emotion::COUNT],
    /// Emotions answered correctly for a strict majority of their stimuli.
    pub mapped: usize,
    pub accuracy: f64,
}

/// Emotion presented at `index` (0-based): a fresh shuffled round of all
/// seven emotions every seven interactions, restarting at each epoch.
pub fn scheduled_emotion(seed: u64, interactions_per_epoch: usize, index: u64) -> Emotion {
    let ipe = interactions_per_epoch as u64;
    let (epoch, within) = (index / ipe, index % ipe);
    let n = Emotion::COUNT as u64;
    let cycle = within / n;
    let mut order = Emotion::ALL;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Schedule, epoch << 32 | cycle));
    order.shuffle(&mut rng);
    order[(within % n) as usize]
}

pub struct Session {
    config: SessionConfig,
    cnn: Arc<CnnModel>,
    som: Option<SomModel>,
    learner: RewardModel,
    phase: Phase,
    calibration: Option<CalibrationReport>,
    next_index: u64,
    discarded: u64,
    current: Vec<InteractionRecord>,
    epochs: Vec<EpochSummary>,
    last_record: Option<InteractionRecord>,
}

impl Session {
    pub fn new(config: SessionConfig, cnn: Arc<CnnModel>) -> Result<Self> {
        config.validate()?;
        let learner = RewardModel::new(config.learner_config())?;
        Ok(Self {
            config,
            cnn,
            som: None,
            learner,
            phase: Phase::Calibrating,
            calibration: None,
            next_index: 0,
            discarded: 0,
            current: Vec::new(),
            epochs: Vec::new(),
            last_record: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn cnn(&self) -> &CnnModel {
        &self.cnn
    }

    pub fn som(&self) -> Option<&SomModel> {
        self.som.as_ref()
    }

    pub fn learner(&self) -> &RewardModel {
        &self.learner
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn calibration(&self) -> Option<&CalibrationReport> {
        self.calibration.as_ref()
    }

    pub fn interactions(&self) -> u64 {
        self.next_index
    }

    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    pub fn epochs(&self) -> &[EpochSummary] {
        &self.epochs
    }

    pub fn last_record(&self) -> Option<&InteractionRecord> {
        self.last_record.as_ref()
    }

    /// Trains the per-user SOM on labeled presentations.
    pub fn calibrate(&mut self, samples: &[(Emotion, FaceImage)]) -> Result<&CalibrationReport> {
        if samples.is_empty() {
            return Err(SessionError::Config("calibration needs at least one sample".into()));
        }
        let images: Vec<FaceImage> = samples.iter().map(|(_, img)| img.clone()).collect();
        let labels: Vec<Emotion> = samples.iter().map(|(e, _)| *e).collect();
        let features = self.cnn.features_batch(&images)?;
        let som = train_som(&features, &self.config.som_config())?;
        let map = som.label_map(&features, &labels)?;
        self.calibration = Some(CalibrationReport {
            samples: samples.len(),
            purity: map.purity,
            quantization_error: som.quantization_error(&features)?,
            visited_units: map.visited,
            label_map: Some(map),
        });
        self.som = Some(som);
        self.phase = Phase::Training;
        Ok(self.calibration.as_ref().expect("just set"))
    }

    fn calibrated_som(&self) -> Result<&SomModel> {
        self.som.as_ref().ok_or(SessionError::NotCalibrated)
    }

    pub fn stimulus_bmu(&self, image: &FaceImage) -> Result<BmuPosition> {
        let features = self.cnn.forward_features(image)?;
        Ok(self.calibrated_som()?.best_matching_unit(&features)?)
    }

    /// Perceives a stimulus and picks the robot's expression. Does not
    /// change the session.
    pub fn present(&self, image: &FaceImage, emotion: Option<Emotion>) -> Result<Presentation> {
        let bmu = self.stimulus_bmu(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, Stream::Exploration, self.next_index));
        let Selection { action, predictions, explored } = self.learner.select_action_with(&bmu, &mut rng)?;
        Ok(Presentation {
            index: self.next_index,
            emotion,
            stimulus_bmu: bmu,
            action,
            predicted: predictions,
            explored,
        })
    }

    pub fn mimicry(&self, p: &Presentation, mimic_image: &FaceImage) -> Result<MimicryOutcome> {
        Ok(mimicry_reward(
            self.calibrated_som()?,
            &self.cnn,
            &p.stimulus_bmu,
            mimic_image,
            &self.config.reward,
        )?)
    }

    /// Applies the reward for `p`: one learner update, one record. Returns
    /// the record and, when it closes an epoch, the epoch summary.
    pub fn complete(
        &mut self,
        p: &Presentation,
        feedback: Feedback,
        timestamp: u64,
    ) -> Result<(InteractionRecord, Option<EpochSummary>)> {
        if p.index != self.next_index {
            return Err(SessionError::Conflict(format!(
                "presentation {} is stale; next interaction is {}",
                p.index, self.next_index
            )));
        }
        let reward = feedback.reward();
        let sample = RewardSample::new(p.stimulus_bmu, p.action, reward)?;
        let cost = self.learner.update(&sample)?;
        let (mimic_emotion, mimic_bmu, distance) = match feedback {
            Feedback::Mimic { outcome, mimic_emotion } => {
                (mimic_emotion, Some(outcome.mimic_bmu), Some(outcome.distance))
            }
            Feedback::Direct { .. } => (None, None, None),
        };
        let record = InteractionRecord {
            index: p.index,
            epoch: self.epochs.len() + 1,
            emotion: p.emotion,
            stimulus_bmu: p.stimulus_bmu,
            action: p.action,
            predicted: p.predicted,
            explored: p.explored,
            reward,
            mimic_emotion,
            mimic_bmu,
            distance,
            cost,
            timestamp,
        };
        self.next_index += 1;
        self.current.push(record.clone());
        self.last_record = Some(record.clone());
        let mut closed = None;
        if self.current.len() == self.config.interactions_per_epoch {
            let summary = EpochSummary::from_records(self.epochs.len() + 1, &self.current)?;
            self.current.clear();
            self.epochs.push(summary.clone());
            closed = Some(summary);
        }
        Ok((record, closed))
    }

    /// Drops a presentation without touching the learner.
    pub fn discard(&mut self, p: &Presentation) {
        if p.index == self.next_index {
            self.discarded += 1;
        }
    }

    pub fn set_idle(&mut self) {
        self.phase = Phase::Idle;
    }

    /// Greedy answers (no exploration) to labeled held-out stimuli.
    pub fn evaluate(&self, stimuli: &[(Emotion, FaceImage)]) -> Result<Evaluation> {
        let mut correct = [0usize; Emotion::COUNT];
        let mut totals = [0usize; Emotion::COUNT];
        for (e, img) in stimuli {
            let bmu = self.stimulus_bmu(img)?;
            let chosen = self.learner.select_action(&bmu)?.action;
            totals[e.code()] += 1;
            if chosen.emotion() == Some(*e) {
                correct[e.code()] += 1;
            }
        }
        let n: usize = totals.iter().sum();
        Ok(Evaluation {
            per_class: totals.iter().copied().max().unwrap_or(0),
            correct,
            mapped: (0..Emotion::COUNT)
                .filter(|&c| totals[c] > 0 && 2 * correct[c] > totals[c])
                .count(),
            accuracy: correct.iter().sum::<usize>() as f64 / n.max(1) as f64,
        })
    }

    /// Session bookkeeping for a checkpoint taken at an epoch boundary.
    pub fn to_section(&self, user_rng_word_pos: u128, log_bytes: u64) -> Section {
        let cal = self.calibration.clone().unwrap_or(CalibrationReport {
            samples: 0,
            purity: f64::NAN,
            quantization_error: f64::NAN,
            visited_units: 0,
            label_map: None,
        });
        let values = self
            .epochs
            .iter()
            .flat_map(|e| {
                [
                    e.interactions as f64,
                    e.first_index as f64,
                    e.avg_cost,
                    e.accuracy.unwrap_or(f64::NAN),
                ]
            })
            .collect();
        Section::new(SESSION_TAG)
            .with("fingerprint", self.config.fingerprint())
            .with("phase", self.phase.name())
            .with("next_index", self.next_index)
            .with("discarded", self.discarded)
            .with("epochs_done", self.epochs.len())
            .with("user_rng_word_pos", user_rng_word_pos)
            .with("log_bytes", log_bytes)
            .with("calibration_samples", cal.samples)
            .with("purity", cal.purity)
            .with("quantization_error", cal.quantization_error)
            .with("visited_units", cal.visited_units)
            .with_values(values)
    }

    /// Rebuilds a session from its checkpoint sections. Returns the session,
    /// the saved user stream position and the log length to truncate to.
    pub fn restore(
        config: SessionConfig,
        cnn: Arc<CnnModel>,
        section: &Section,
        som: SomModel,
        learner: RewardModel,
    ) -> Result<(Self, u128, u64)> {
        let fingerprint: u32 = section.get("fingerprint")?;
        if fingerprint != config.fingerprint() {
            return Err(SessionError::ResumeMismatch("config differs from the checkpointed run".into()));
        }
        let epochs_done: usize = section.get("epochs_done")?;
        if section.values.len() != 4 * epochs_done {
            return Err(SessionError::ResumeMismatch("epoch table has the wrong length".into()));
        }
        let epochs = section
            .values
            .chunks(4)
            .enumerate()
            .map(|(i, v)| EpochSummary {
                epoch: i + 1,
                interactions: v[0] as usize,
                first_index: v[1] as u64,
                avg_cost: v[2],
                accuracy: (!v[3].is_nan()).then_some(v[3]),
            })
            .collect();
        let phase_name: String = section.get("phase")?;
        let phase = Phase::parse(&phase_name)
            .ok_or_else(|| SessionError::ResumeMismatch(format!("unknown phase {phase_name:?}")))?;
        let purity: f64 = section.get("purity")?;
        let calibration = (!purity.is_nan())
            .then(|| -> Result<CalibrationReport> {
                Ok(CalibrationReport {
                    samples: section.get("calibration_samples")?,
                    purity,
                    quantization_error: section.get("quantization_error")?,
                    visited_units: section.get("visited_units")?,
                    label_map: None,
                })
            })
            .transpose()?;
        let session = Self {
            config,
            cnn,
            som: Some(som),
            learner,
            phase,
            calibration,
            next_index: section.get("next_index")?,
            discarded: section.get("discarded")?,
            current: Vec::new(),
            epochs,
            last_record: None,
        };
        Ok((session, section.get("user_rng_word_pos")?, section.get("log_bytes")?))
    }
}
