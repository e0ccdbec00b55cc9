//! Reward-model MLP and greedy action selection.
//!
//! Input is the stimulus BMU's normalized grid position followed by the
//! one-hot action; output is a predicted human reward in (-2, 2).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section, REWARD_TAG};
use crate::error::{Error, Result};
use crate::expression::{action_catalog, ExpressionAction, ACTION_COUNT};
use crate::numerics::{Activation, Dense, Layer, Network, Tensor};
use crate::som::BmuPosition;

pub const REWARD_MIN: f64 = -2.0;
pub const REWARD_MAX: f64 = 2.0;
pub const INPUT_DIM: usize = 2 + ACTION_COUNT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    /// Exploration probability; 0 is purely greedy.
    pub epsilon: f64,
    /// Initial weight scale for the two state inputs.
    pub state_init_std: f64,
    /// Initial weight scale for the seven action inputs.
    pub action_init_std: f64,
    /// Prediction of the untrained model for every input; values above the
    /// typical reward make greedy selection try untested actions.
    pub initial_prediction: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            learning_rate: 0.00234375,
            epsilon: 0.0,
            state_init_std: 10.0,
            action_init_std: 6.0,
            initial_prediction: 1.5,
            seed: 11,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("hidden layer must have at least one unit".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        for (name, v) in [("state_init_std", self.state_init_std), ("action_init_std", self.action_init_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad {name} {v}")));
            }
        }
        if !(self.initial_prediction.abs() < REWARD_MAX) {
            return Err(Error::InvalidArgument(format!(
                "initial prediction {} outside (-2, 2)",
                self.initial_prediction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub state: BmuPosition,
    pub action: ExpressionAction,
    pub reward: f64,
}

impl RewardSample {
    pub fn new(state: BmuPosition, action: ExpressionAction, reward: f64) -> Result<Self> {
        if !(REWARD_MIN..=REWARD_MAX).contains(&reward) {
            return Err(Error::InvalidArgument(format!("reward {reward} outside [-2, 2]")));
        }
        Ok(Self { state, action, reward })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub action: ExpressionAction,
    /// Predicted reward for every catalog action, by action id.
    pub predictions: [f64; ACTION_COUNT],
    pub explored: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    net: Network,
    config: LearnerConfig,
    updates: u64,
}

impl RewardModel {
    /// Hidden weights are Gaussian with separate scales for state and action
    /// inputs. Hidden biases center every unit on the mean input (map centre,
    /// uniform action), output weights start at zero and the output bias is
    /// atanh(initial_prediction / 2), so every prediction starts at
    /// `initial_prediction`.
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mean_input: Vec<f64> = [0.5, 0.5]
            .into_iter()
            .chain(std::iter::repeat_n(1.0 / ACTION_COUNT as f64, ACTION_COUNT))
            .collect();
        let mut weights = Vec::with_capacity(config.hidden * INPUT_DIM);
        let mut bias = Vec::with_capacity(config.hidden);
        for _ in 0..config.hidden {
            let row: Vec<f64> = (0..INPUT_DIM)
                .map(|i| {
                    let std = if i < 2 { config.state_init_std } else { config.action_init_std };
                    std * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            bias.push(-row.iter().zip(&mean_input).map(|(w, x)| w * x).sum::<f64>());
            weights.extend(row);
        }
        let net = Network::new(vec![
            Layer::Dense(Dense {
                weights: Tensor::new(vec![config.hidden, INPUT_DIM], weights)?,
                bias: Tensor::from_vec(bias),
            }),
            Layer::Act(Activation::Tanh),
            Layer::Dense(Dense {
                weights: Tensor::zeros(vec![1, config.hidden]),
                bias: Tensor::from_vec(vec![(config.initial_prediction / REWARD_MAX).atanh()]),
            }),
            Layer::Act(Activation::ScaledTanh(REWARD_MAX)),
        ]);
        Ok(Self { net, config, updates: 0 })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn update_count(&self) -> u64 {
        self.updates
    }

    pub fn params_finite(&self) -> bool {
        self.net.params_finite()
    }

    pub fn input(state: &BmuPosition, action: &ExpressionAction) -> Result<Tensor> {
        let mut v = state.normalized().to_vec();
        v.extend_from_slice(&action.features()?);
        Ok(Tensor::from_vec(v))
    }

    pub fn predict_reward(&self, state: &BmuPosition, action: &ExpressionAction) -> Result<f64> {
        Ok(self.net.forward(&Self::input(state, action)?)?.data()[0])
    }

    pub fn predict_all(&self, state: &BmuPosition) -> Result<[f64; ACTION_COUNT]> {
        let mut out = [0.0; ACTION_COUNT];
        for (o, a) in out.iter_mut().zip(action_catalog().iter()) {
            *o = self.predict_reward(state, a)?;
        }
        Ok(out)
    }

    /// Greedy choice; ties go to the lowest action id.
    pub fn select_action(&self, state: &BmuPosition) -> Result<Selection> {
        let predictions = self.predict_all(state)?;
        Ok(Selection {
            action: action_catalog().actions()[greedy(&predictions)],
            predictions,
            explored: false,
        })
    }

    /// Greedy choice, replaced by a uniformly random action with probability
    /// `epsilon`. Draws from `rng` only when `epsilon > 0`.
    pub fn select_action_with<R: Rng + ?Sized>(&self, state: &BmuPosition, rng: &mut R) -> Result<Selection> {
        let mut s = self.select_action(state)?;
        if self.config.epsilon > 0.0 && rng.random::<f64>() < self.config.epsilon {
            s.action = action_catalog().actions()[rng.random_range(0..ACTION_COUNT)];
            s.explored = true;
        }
        Ok(s)
    }

    /// One SGD step on `(prediction - reward)²`. Returns the cost measured
    /// before the step.
    pub fn update(&mut self, sample: &RewardSample) -> Result<f64> {
        if !(REWARD_MIN..=REWARD_MAX).contains(&sample.reward) {
            return Err(Error::InvalidArgument(format!("reward {} outside [-2, 2]", sample.reward)));
        }
        let trace = self.net.forward_trace(&Self::input(&sample.state, &sample.action)?)?;
        let y = trace.output().expect("non-empty network").data()[0];
        let err = y - sample.reward;
        let grads = self.net.backward(&trace, &Tensor::from_vec(vec![2.0 * err]))?;
        self.net.sgd_step(&grads, self.config.learning_rate)?;
        self.updates += 1;
        Ok(err * err)
    }

    pub fn to_section(&self) -> Section {
        Section::new(REWARD_TAG)
            .with("arch", format!("dense{INPUT_DIM}x{}-tanh-dense1-scaled_tanh2", self.config.hidden))
            .with("hidden", self.config.hidden)
            .with("learning_rate", self.config.learning_rate)
            .with("epsilon", self.config.epsilon)
            .with("state_init_std", self.config.state_init_std)
            .with("action_init_std", self.config.action_init_std)
            .with("initial_prediction", self.config.initial_prediction)
            .with("seed", self.config.seed)
            .with("updates", self.updates)
            .with_values(self.net.flat_params())
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let config = LearnerConfig {
            hidden: s.get("hidden")?,
            learning_rate: s.get("learning_rate")?,
            epsilon: s.get("epsilon")?,
            state_init_std: s.get("state_init_std")?,
            action_init_std: s.get("action_init_std")?,
            initial_prediction: s.get("initial_prediction")?,
            seed: s.get("seed")?,
        };
        let mut model = Self::new(config)?;
        if s.values.len() != model.net.param_count() {
            return Err(s
                .malformed(format!("expected {} parameters, found {}", model.net.param_count(), s.values.len()))
                .into());
        }
        model.net.set_flat_params(&s.values)?;
        model.updates = s.get("updates")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(vec![self.to_section()]).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_section(Checkpoint::load(path)?.section(REWARD_TAG)?)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy(predictions: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in predictions.iter().enumerate() {
        if p > predictions[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of per-interaction costs.
pub fn epoch_cost(costs: &[f64]) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::InvalidArgument("no costs to average".into()));
    }
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::Emotion;
    use proptest::prelude::*;

    fn pos(r: usize, c: usize) -> BmuPosition {
        BmuPosition::new(r, c, 20, 20).unwrap()
    }

    fn act(e: Emotion) -> ExpressionAction {
        action_catalog().for_emotion(e)
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let m = RewardModel::new(LearnerConfig { initial_prediction: 0.0, ..LearnerConfig::default() }).unwrap();
        for a in action_catalog().iter() {
            assert_eq!(m.predict_reward(&pos(3, 17), a).unwrap(), 0.0);
        }
        assert_eq!(m.select_action(&pos(0, 0)).unwrap().action.action_id(), Some(0));
    }

    #[test]
    fn fresh_model_predicts_initial_value() {
        let m = RewardModel::new(LearnerConfig::default()).unwrap();
        for a in action_catalog().iter() {
            let p = m.predict_reward(&pos(11, 4), a).unwrap();
            assert!((p - 1.5).abs() < 1e-12, "{p}");
        }
        let mid = RewardModel::new(LearnerConfig { initial_prediction: -0.7, ..LearnerConfig::default() }).unwrap();
        assert!((mid.predict_reward(&pos(0, 19), &act(Emotion::Fear)).unwrap() + 0.7).abs() < 1e-12);
        assert!(RewardModel::new(LearnerConfig { initial_prediction: 2.0, ..LearnerConfig::default() }).is_err());
    }

    #[test]
    fn rejects_non_catalog_actions_and_bad_rewards() {
        let mut m = RewardModel::new(LearnerConfig::default()).unwrap();
        let off = ExpressionAction::decode("00000").unwrap();
        assert!(m.predict_reward(&pos(0, 0), &off).is_err());
        assert!(RewardSample::new(pos(0, 0), act(Emotion::Fear), 2.5).is_err());
        let bad = RewardSample { state: pos(0, 0), action: act(Emotion::Fear), reward: f64::NAN };
        assert!(m.update(&bad).is_err());
        assert_eq!(m.update_count(), 0);
    }

    #[test]
    fn greedy_argmax_examples() {
        assert_eq!(greedy(&[0.5, 1.7, -1.0, 0.0, 0.2, 0.1, -0.5]), 1);
        assert_eq!(greedy(&[0.3; 7]), 0);
    }

    #[test]
    fn learns_a_fixed_target() {
        let mut m = RewardModel::new(LearnerConfig::default()).unwrap();
        let s = RewardSample::new(pos(4, 9), act(Emotion::Surprise), 2.0).unwrap();
        for _ in 0..200 {
            m.update(&s).unwrap();
        }
        assert!(m.predict_reward(&s.state, &s.action).unwrap() > 1.5);
        assert_eq!(m.update_count(), 200);
    }

    #[test]
    fn repeated_small_steps_never_raise_cost() {
        let mut m = RewardModel::new(LearnerConfig { learning_rate: 0.01, ..LearnerConfig::default() }).unwrap();
        let s = RewardSample::new(pos(12, 2), act(Emotion::Anger), -1.0).unwrap();
        // Below this the error is a single ulp of the prediction.
        let floor = 4.0 * f64::EPSILON * f64::EPSILON;
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let c = m.update(&s).unwrap();
            assert!(c <= prev || c <= floor, "{c} after {prev}");
            prev = c;
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = RewardModel::new(LearnerConfig { learning_rate: 0.0, ..LearnerConfig::default() }).unwrap();
        let before = m.network().flat_params();
        let c = m.update(&RewardSample::new(pos(1, 1), act(Emotion::Fear), -0.5).unwrap()).unwrap();
        assert!((c - 4.0).abs() < 1e-12);
        assert_eq!(m.network().flat_params(), before);
    }

    #[test]
    fn rewarded_action_wins_after_interleaved_updates() {
        let mut m = RewardModel::new(LearnerConfig::default()).unwrap();
        let state = pos(6, 13);
        let target = act(Emotion::Sadness);
        for i in 0..500 {
            let a = action_catalog().actions()[i % ACTION_COUNT];
            let r = if a == target { 2.0 } else { -2.0 };
            m.update(&RewardSample::new(state, a, r).unwrap()).unwrap();
        }
        assert_eq!(m.select_action(&state).unwrap().action, target);
    }

    #[test]
    fn epsilon_explores_sometimes() {
        let m = RewardModel::new(LearnerConfig { epsilon: 0.5, ..LearnerConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let explored = (0..1000)
            .filter(|_| m.select_action_with(&pos(0, 0), &mut rng).unwrap().explored)
            .count();
        assert!((400..600).contains(&explored), "{explored}");
        let greedy_model = RewardModel::new(LearnerConfig::default()).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        greedy_model.select_action_with(&pos(0, 0), &mut a).unwrap();
        assert_eq!(a.get_word_pos(), ChaCha8Rng::seed_from_u64(1).get_word_pos());
    }

    #[test]
    fn epoch_cost_is_the_mean() {
        assert_eq!(epoch_cost(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(epoch_cost(&[0.0; 100]).unwrap(), 0.0);
        assert!(epoch_cost(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = RewardModel::new(LearnerConfig::default()).unwrap();
        for i in 0..30 {
            let a = action_catalog().actions()[i % 7];
            m.update(&RewardSample::new(pos(i % 20, (3 * i) % 20), a, (i % 5) as f64 - 2.0).unwrap()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rm.ckpt");
        m.save(&p).unwrap();
        let back = RewardModel::load(&p).unwrap();
        assert_eq!(back, m);
        let bits = |m: &RewardModel| m.network().flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn config_validation() {
        assert!(RewardModel::new(LearnerConfig { hidden: 0, ..LearnerConfig::default() }).is_err());
        assert!(RewardModel::new(LearnerConfig { epsilon: 1.5, ..LearnerConfig::default() }).is_err());
        assert!(RewardModel::new(LearnerConfig { learning_rate: -1.0, ..LearnerConfig::default() }).is_err());
    }

    fn sample() -> impl Strategy<Value = RewardSample> {
        (0usize..20, 0usize..20, 0usize..7, -2.0f64..=2.0).prop_map(|(r, c, a, rew)| {
            RewardSample::new(pos(r, c), action_catalog().actions()[a], rew).unwrap()
        })
    }

    proptest! {
        #[test]
        fn predictions_stay_in_range(seed in any::<u64>(), lr in 0.0f64..0.5, samples in prop::collection::vec(sample(), 1..40)) {
            let mut m = RewardModel::new(LearnerConfig { seed, learning_rate: lr, ..LearnerConfig::default() }).unwrap();
            for s in &samples {
                let c = m.update(s).unwrap();
                prop_assert!(c >= 0.0);
                prop_assert!(m.params_finite());
                for a in action_catalog().iter() {
                    let y = m.predict_reward(&s.state, a).unwrap();
                    prop_assert!(y > -2.0 && y < 2.0);
                }
            }
        }

        #[test]
        fn argmax_invariant_under_monotone_maps(p in prop::array::uniform7(-2.0f64..2.0), k in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mapped: Vec<f64> = p.iter().map(|x| (k * x + b).exp()).collect();
            let cubed: Vec<f64> = p.iter().map(|x| x * x * x).collect();
            prop_assert_eq!(greedy(&p), greedy(&mapped));
            prop_assert_eq!(greedy(&p), greedy(&cubed));
        }

        #[test]
        fn selection_is_pure(seed in any::<u64>(), r in 0usize..20, c in 0usize..20) {
            let m = RewardModel::new(LearnerConfig { seed, ..LearnerConfig::default() }).unwrap();
            prop_assert_eq!(m.select_action(&pos(r, c)).unwrap(), m.select_action(&pos(r, c)).unwrap());
        }
    }
}
