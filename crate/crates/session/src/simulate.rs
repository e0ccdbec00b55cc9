//! Offline closed-loop sessions against a simulated trainer.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use xtamer_core::checkpoint::{Checkpoint, REWARD_TAG, SESSION_TAG, SOM_TAG};
use xtamer_core::cnn::CnnModel;
use xtamer_core::face::{Emotion, FaceImage};
use xtamer_core::learner::RewardModel;
use xtamer_core::reward::RewardMode;
use xtamer_core::som::SomModel;
use xtamer_core::user::{SimulatedUser, UserProfile};

use crate::config::{derive_seed, SessionConfig, Stream};
use crate::engine::{scheduled_emotion, CalibrationReport, EpochSummary, Evaluation, Feedback, Session};
use crate::error::{Result, SessionError};
use crate::report::{
    converged_epoch, converged_interaction, read_log, summarize, write_reports, LogWriter, CHECKPOINT_FILE, LOG_FILE,
    SOM_MAP_FILE, SUMMARY_FILE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub threshold: f64,
    /// First epoch whose accuracy reaches the threshold.
    pub epoch: Option<usize>,
    /// Interactions completed before that epoch began.
    pub epoch_start: Option<u64>,
    /// Interactions until the trailing epoch-sized window first reaches it.
    pub interaction: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub mimic_accuracy: f64,
    pub calibration: Option<CalibrationReport>,
    pub epochs: Vec<EpochSummary>,
    pub evaluation: Evaluation,
    pub convergence: Convergence,
    pub updates: u64,
}

/// Labeled presentations `per_class` deep, cycling through the emotions.
pub fn collect_presentations(user: &mut SimulatedUser, per_class: usize) -> Result<Vec<(Emotion, FaceImage)>> {
    let mut out = Vec::with_capacity(per_class * Emotion::COUNT);
    for _ in 0..per_class {
        for e in Emotion::ALL {
            out.push((e, user.present_emotion(e)?));
        }
    }
    Ok(out)
}

fn save_checkpoint(dir: &Path, session: &Session, user: &SimulatedUser, log: &LogWriter) -> Result<()> {
    let som = session.som().ok_or(SessionError::NotCalibrated)?;
    let cp = Checkpoint::new(vec![
        som.to_section(),
        session.learner().to_section(),
        session.to_section(user.rng_word_pos(), log.bytes()),
    ]);
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    cp.save(&tmp)?;
    std::fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn resume_state(
    dir: &Path,
    config: &SessionConfig,
    cnn: &Arc<CnnModel>,
    user: &mut SimulatedUser,
) -> Result<Option<(Session, LogWriter)>> {
    let path = dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let cp = Checkpoint::load(&path)?;
    let som = SomModel::from_section(cp.section(SOM_TAG)?)?;
    let learner = RewardModel::from_section(cp.section(REWARD_TAG)?)?;
    let (session, word_pos, log_bytes) =
        Session::restore(config.clone(), cnn.clone(), cp.section(SESSION_TAG)?, som, learner)?;
    user.set_rng_word_pos(word_pos);
    let log = LogWriter::resume(&dir.join(LOG_FILE), log_bytes)?;
    Ok(Some((session, log)))
}

/// Runs (or resumes) a full session, writing the log, per-epoch checkpoint,
/// report table, plot data and summary into `dir`.
pub fn run_simulation(
    config: &SessionConfig,
    cnn: Arc<CnnModel>,
    profile: &UserProfile,
    dir: &Path,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<SimulationSummary> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut user = SimulatedUser::new(profile.clone())?;
    let resumed = if resume {
        resume_state(dir, config, &cnn, &mut user)?
    } else {
        None
    };
    let (mut session, mut log) = match resumed {
        Some(s) => s,
        None => {
            let mut session = Session::new(config.clone(), cnn.clone())?;
            let samples = collect_presentations(&mut user, config.calibration_samples)?;
            let report = session.calibrate(&samples)?;
            if let Some(map) = &report.label_map {
                std::fs::write(dir.join(SOM_MAP_FILE), map.render_ascii())?;
            }
            let log = LogWriter::create(&dir.join(LOG_FILE))?;
            save_checkpoint(dir, &session, &user, &log)?;
            (session, log)
        }
    };

    let ipe = config.interactions_per_epoch;
    while session.epochs().len() < config.epochs {
        let index = session.interactions();
        let emotion = scheduled_emotion(config.seed, ipe, index);
        let stimulus = user.present_emotion(emotion)?;
        let p = session.present(&stimulus, Some(emotion))?;
        let feedback = match config.reward.mode {
            RewardMode::Mimicry => {
                let mimic = user.mimic_action(&p.action)?;
                Feedback::Mimic {
                    outcome: session.mimicry(&p, &mimic.image)?,
                    mimic_emotion: Some(mimic.emotion),
                }
            }
            RewardMode::Direct => Feedback::Direct {
                value: if p.action.emotion() == Some(emotion) { 2.0 } else { -2.0 },
            },
        };
        let (record, closed) = session.complete(&p, feedback, index)?;
        log.append(&record)?;
        if let Some(summary) = closed {
            save_checkpoint(dir, &session, &user, &log)?;
            write_reports(dir, session.epochs())?;
            on_epoch(&summary);
        }
    }
    session.set_idle();
    write_reports(dir, session.epochs())?;

    let mut eval_profile = profile.clone();
    eval_profile.seed = derive_seed(profile.seed, Stream::Evaluation, 0);
    let mut eval_user = SimulatedUser::new(eval_profile)?;
    let held_out = collect_presentations(&mut eval_user, config.eval_per_class)?;
    let evaluation = session.evaluate(&held_out)?;

    let records = read_log(&dir.join(LOG_FILE))?;
    let epochs = summarize(&records, ipe)?;
    let epoch = converged_epoch(&epochs, config.convergence_accuracy);
    let summary = SimulationSummary {
        seed: config.seed,
        mimic_accuracy: profile.mimic_accuracy,
        calibration: session.calibration().map(|c| CalibrationReport {
            label_map: None,
            ..c.clone()
        }),
        epochs,
        evaluation,
        convergence: Convergence {
            threshold: config.convergence_accuracy,
            epoch,
            epoch_start: epoch.map(|e| ((e - 1) * ipe) as u64),
            interaction: converged_interaction(&records, ipe, config.convergence_accuracy),
        },
        updates: session.learner().update_count(),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    std::fs::write(dir.join(SUMMARY_FILE), json)?;
    Ok(summary)
}
