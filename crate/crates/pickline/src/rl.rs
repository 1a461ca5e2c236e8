//! The deep Q-learning agent bank: one network per stage combination,
//! epsilon-greedy action selection over discrete speed deltas, reward
//! assembly over combination windows and the Bellman update applied once per
//! combination switch.
//!
//! Two variants exist. The partly cooperative agent defers entirely to the
//! conservative agent during weld/cut combinations and accumulates rewards by
//! sum; the fully cooperative agent acts everywhere (plus every 30 s inside a
//! combination), adds a boundary-proximity penalty and averages its rewards.

use crate::line::{LineConfig, LineState, StageCombination};
use crate::nn::{
    loss_and_grad, read_container, sgd_update, write_container, Activation, LayerSpec, Loss, LossTarget, Mat, NetInput,
    Network, NetworkSpec, OptimizerState,
};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FCoop,
    PCoop,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::FCoop => write!(f, "f-coop"),
            Variant::PCoop => write!(f, "p-coop"),
        }
    }
}

/// Line-state symbols a Q-network may take as input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateField {
    Looper1Volume,
    Looper2Volume,
    FtuSpeed,
    StuSpeed,
    TtuSpeed,
    WeldTimePred,
    FtuResidual,
    TtuResidual,
}

/// Physical ranges mapping each field into [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRanges {
    pub v1: (f64, f64),
    pub v2: (f64, f64),
    pub speed: (f64, f64),
    pub t_pred: (f64, f64),
    pub residual: (f64, f64),
}

impl NormalizationRanges {
    pub fn from_line(cfg: &LineConfig) -> Self {
        NormalizationRanges {
            v1: cfg.looper1_bounds,
            v2: cfg.looper2_bounds,
            speed: (0.0, cfg.unit_max_speed),
            t_pred: (0.0, 400.0),
            residual: (0.0, 2000.0),
        }
    }
}

/// Reward assembly parameters. The death penalty must dominate the largest
/// per-step action reward by at least two orders of magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub action_weight: f64,
    pub death_penalty: f64,
    pub proximity_weight: f64,
    pub proximity_margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Sum,
    Mean,
}

/// Full per-variant configuration (Table-style settings).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentVariantConfig {
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub state_fields: Vec<StateField>,
    /// Discrete speed deltas in m/min, ascending. Must contain 0.
    pub actions: Vec<i64>,
    pub reward: RewardSpec,
    pub aggregation: Aggregation,
    /// Re-select every this many seconds inside a combination (fully
    /// cooperative only).
    pub intra_interval: Option<u64>,
    /// Whether the agent acts in combinations containing a weld/cut stage.
    pub act_in_stop_combinations: bool,
    pub l1_coefficient: f64,
}

impl AgentVariantConfig {
    pub fn p_coop() -> Self {
        AgentVariantConfig {
            variant: Variant::PCoop,
            hidden: vec![8, 8],
            state_fields: vec![
                StateField::Looper1Volume,
                StateField::Looper2Volume,
                StateField::FtuSpeed,
                StateField::TtuSpeed,
                StateField::WeldTimePred,
                StateField::FtuResidual,
                StateField::TtuResidual,
            ],
            actions: (0..=9).collect(),
            reward: RewardSpec { action_weight: 1.0, death_penalty: -1000.0, proximity_weight: 0.0, proximity_margin: 30.0 },
            aggregation: Aggregation::Sum,
            intra_interval: None,
            act_in_stop_combinations: false,
            l1_coefficient: 1e-5,
        }
    }

    pub fn f_coop() -> Self {
        AgentVariantConfig {
            variant: Variant::FCoop,
            hidden: vec![32, 64, 16],
            state_fields: vec![
                StateField::Looper1Volume,
                StateField::Looper2Volume,
                StateField::WeldTimePred,
                StateField::FtuResidual,
                StateField::TtuResidual,
            ],
            actions: (-5..=5).collect(),
            reward: RewardSpec { action_weight: 1.0, death_penalty: -1000.0, proximity_weight: 2.0, proximity_margin: 30.0 },
            aggregation: Aggregation::Mean,
            intra_interval: Some(30),
            act_in_stop_combinations: true,
            l1_coefficient: 1e-5,
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::PCoop => Self::p_coop(),
            Variant::FCoop => Self::f_coop(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.actions.contains(&0) {
            return Err(Error::Config("action set must contain the no-op delta 0".into()));
        }
        if self.actions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("action set must be strictly ascending".into()));
        }
        let max_step = self.actions.iter().map(|a| a.unsigned_abs()).max().unwrap_or(0) as f64 * self.action_weight_abs();
        if self.reward.death_penalty.abs() < 100.0 * max_step {
            return Err(Error::Config(format!(
                "death penalty {} must be at least 100x the largest per-step action reward {max_step}",
                self.reward.death_penalty
            )));
        }
        if self.state_fields.is_empty() || self.hidden.is_empty() {
            return Err(Error::Config("state fields and hidden layers must be non-empty".into()));
        }
        Ok(())
    }

    fn action_weight_abs(&self) -> f64 {
        self.reward.action_weight.abs()
    }
}

/// Maps the selected state fields into [0, 1] by their physical ranges.
/// Returns the row and the number of clamped components.
pub fn normalize_state(state: &LineState, fields: &[StateField], ranges: &NormalizationRanges) -> (Vec<f64>, usize) {
    let mut clamped = 0usize;
    let row = fields
        .iter()
        .map(|f| {
            let (value, (lo, hi)) = match f {
                StateField::Looper1Volume => (state.looper1.volume, ranges.v1),
                StateField::Looper2Volume => (state.looper2.volume, ranges.v2),
                StateField::FtuSpeed => (state.ftu.speed, ranges.speed),
                StateField::StuSpeed => (state.stu_speed, ranges.speed),
                StateField::TtuSpeed => (state.ttu.speed, ranges.speed),
                StateField::WeldTimePred => (state.t_w_pred(), ranges.t_pred),
                StateField::FtuResidual => (state.ftu.residual_length, ranges.residual),
                StateField::TtuResidual => (state.ttu.residual_length, ranges.residual),
            };
            let z = (value - lo) / (hi - lo);
            if !(0.0..=1.0).contains(&z) {
                clamped += 1;
            }
            z.clamp(0.0, 1.0)
        })
        .collect();
    (row, clamped)
}

/// One SMDP transition of a stage combination: the state and action at the
/// combination's previous activation, the reward accumulated over that
/// window and the state at its current activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub combination: StageCombination,
    pub state: Vec<f64>,
    pub action_index: usize,
    pub reward: f64,
    pub successor: Vec<f64>,
    pub terminal: bool,
}

/// Per-step reward: weighted applied speed delta minus the optional
/// boundary-proximity penalty.
pub fn step_reward(spec: &RewardSpec, applied_delta: f64, state: &LineState) -> f64 {
    let mut r = spec.action_weight * applied_delta;
    if spec.proximity_weight > 0.0 {
        let d1 = (state.looper1.volume - state.looper1.lower) / spec.proximity_margin;
        let d2 = (state.looper2.upper - state.looper2.volume) / spec.proximity_margin;
        r -= spec.proximity_weight * ((1.0 - d1).max(0.0) + (1.0 - d2).max(0.0));
    }
    r
}

/// Aggregates a reward window by sum or mean, then adds the death penalty
/// once if the window ended in a constraint violation.
pub fn accumulate_reward(steps: &[f64], spec: &RewardSpec, aggregation: Aggregation, died: bool) -> f64 {
    let base = match aggregation {
        Aggregation::Sum => steps.iter().sum::<f64>(),
        Aggregation::Mean => {
            if steps.is_empty() {
                0.0
            } else {
                steps.iter().sum::<f64>() / steps.len() as f64
            }
        }
    };
    base + if died { spec.death_penalty } else { 0.0 }
}

/// Cumulative command: the conservative base plus the agent delta. The
/// partly cooperative variant passes a zero delta in weld/cut combinations,
/// so its command collapses to the held conservative recommendation.
pub fn compose_action(variant: Variant, combination: StageCombination, delta: i64, c_agent_speed: f64) -> f64 {
    let delta = if variant == Variant::PCoop && combination.has_stop() { 0 } else { delta };
    c_agent_speed + delta as f64
}

/// Anything that can approximate Q-values and take one squared-error step on
/// a single action's output.
pub trait QFunction {
    fn q_values(&self, state: &[f64]) -> Result<Vec<f64>>;
    /// One update toward `target` on `action`; returns the pre-update squared
    /// error.
    fn train_step(&mut self, state: &[f64], action: usize, target: f64) -> Result<f64>;
}

/// Bellman update: `z = r + gamma * max_a Q(s', a)` (plain `r` on terminal
/// transitions), one squared-error step on the taken action only.
pub fn q_update<Q: QFunction>(q: &mut Q, transition: &Transition, gamma: f64) -> Result<f64> {
    let target = if transition.terminal {
        transition.reward
    } else {
        let next = q.q_values(&transition.successor)?;
        transition.reward + gamma * next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    };
    q.train_step(&transition.state, transition.action_index, target)
}

/// Lookup-table Q-function keyed by the exact state bits; used by the
/// Bellman fixed-point checks.
#[derive(Clone, Debug, Default)]
pub struct TabularQ {
    pub table: BTreeMap<Vec<u64>, Vec<f64>>,
    pub actions: usize,
    pub alpha: f64,
}

impl TabularQ {
    pub fn new(actions: usize, alpha: f64) -> Self {
        TabularQ { table: BTreeMap::new(), actions, alpha }
    }

    fn key(state: &[f64]) -> Vec<u64> {
        state.iter().map(|v| v.to_bits()).collect()
    }
}

impl QFunction for TabularQ {
    fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.table.get(&Self::key(state)).cloned().unwrap_or_else(|| vec![0.0; self.actions]))
    }

    fn train_step(&mut self, state: &[f64], action: usize, target: f64) -> Result<f64> {
        if action >= self.actions {
            return Err(Error::Protocol(format!("action {action} out of range")));
        }
        let row = self.table.entry(Self::key(state)).or_insert_with(|| vec![0.0; self.actions]);
        let err = target - row[action];
        row[action] += self.alpha * err;
        Ok(err * err)
    }
}

/// One stage combination's function approximator, optimizer state, pending
/// transition and active-time accumulator.
#[derive(Clone, Debug)]
pub struct QEntry {
    pub net: Network,
    pub optimizer: OptimizerState,
    pub active_time: f64,
    pub pending: Option<Pending>,
}

/// An open reward window awaiting the combination's next activation.
#[derive(Clone, Debug)]
pub struct Pending {
    pub state: Vec<f64>,
    pub action_index: usize,
    pub rewards: Vec<f64>,
}

impl QFunction for QEntry {
    fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = Mat::row_vec(state.to_vec());
        Ok(self.net.forward(NetInput::dense(&x))?.data)
    }

    fn train_step(&mut self, state: &[f64], action: usize, target: f64) -> Result<f64> {
        let x = Mat::row_vec(state.to_vec());
        let mut throwaway = rand::rngs::mock::StepRng::new(0, 1);
        let (out, cache) = self.net.forward_train(NetInput::dense(&x), &mut throwaway)?;
        if action >= out.cols {
            return Err(Error::Protocol(format!("action {action} out of range")));
        }
        let predicted = out.data[action];
        // squared error on the taken action's output only
        let mut dldy = Mat::zeros(1, out.cols);
        dldy.data[action] = 2.0 * (predicted - target);
        let (grads, _) = self.net.backward(&cache, &dldy)?;
        sgd_update(&mut self.net, &grads, &mut self.optimizer)?;
        crate::nn::decay_step_size(&mut self.optimizer)?;
        let err = target - predicted;
        Ok(err * err)
    }
}

/// Learning constants for the Q-bank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub alpha_floor: f64,
    pub alpha_decay: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig { gamma: 0.95, alpha: 0.01, alpha_floor: 1e-4, alpha_decay: 0.003, epsilon_start: 0.9, epsilon_end: 0.05 }
    }
}

/// Sixteen independent Q-networks keyed by stage combination.
#[derive(Clone, Debug)]
pub struct QNetworkBank {
    pub config: AgentVariantConfig,
    pub learning: LearningConfig,
    entries: Vec<QEntry>,
}

impl QNetworkBank {
    pub fn init<R: Rng>(config: AgentVariantConfig, learning: LearningConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let input_dim = config.state_fields.len();
        let outputs = config.actions.len();
        let mut layers = Vec::with_capacity(config.hidden.len() + 1);
        let mut prev = input_dim;
        for &h in &config.hidden {
            layers.push(LayerSpec::dense_l1(prev, h, Activation::Relu, config.l1_coefficient));
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, outputs, Activation::Identity));
        let spec = NetworkSpec::new(layers, Loss::Mse)?;
        let entries = (0..16)
            .map(|_| {
                Ok(QEntry {
                    net: Network::init(spec.clone(), rng)?,
                    optimizer: OptimizerState::sgd_decaying(learning.alpha, learning.alpha_decay, learning.alpha_floor),
                    active_time: 0.0,
                    pending: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QNetworkBank { config, learning, entries })
    }

    pub fn entry(&self, combination: StageCombination) -> &QEntry {
        &self.entries[combination.index()]
    }

    pub fn entry_mut(&mut self, combination: StageCombination) -> &mut QEntry {
        &mut self.entries[combination.index()]
    }

    pub fn entries(&self) -> &[QEntry] {
        &self.entries
    }

    pub fn add_active_time(&mut self, combination: StageCombination, seconds: f64) {
        self.entries[combination.index()].active_time += seconds;
    }

    pub fn total_active_time(&self) -> f64 {
        self.entries.iter().map(|e| e.active_time).sum()
    }

    pub fn reset_episode_state(&mut self) {
        for e in &mut self.entries {
            e.pending = None;
        }
    }

    /// Epsilon-greedy action index for the given combination; ties break to
    /// the smallest delta.
    pub fn select_action<R: Rng>(&self, state: &[f64], combination: StageCombination, epsilon: f64, rng: &mut R) -> Result<usize> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::RejectedInput(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            return Ok(rng.gen_range(0..self.config.actions.len()));
        }
        let q = self.entry(combination).q_values(state)?;
        let mut best = 0;
        for (i, &v) in q.iter().enumerate() {
            if v > q[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Applies the Bellman update to the transition's combination network and
    /// returns the pre-update squared error. The other fifteen networks are
    /// untouched.
    pub fn q_update(&mut self, transition: &Transition) -> Result<f64> {
        if transition.state.len() != self.config.state_fields.len() {
            return Err(Error::Protocol(format!(
                "transition state has {} fields, bank expects {}",
                transition.state.len(),
                self.config.state_fields.len()
            )));
        }
        let gamma = self.learning.gamma;
        q_update(&mut self.entries[transition.combination.index()], transition, gamma)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "learning": self.learning,
            "alphas": self.entries.iter().map(|e| e.optimizer.alpha).collect::<Vec<_>>(),
            "steps": self.entries.iter().map(|e| e.optimizer.step).collect::<Vec<_>>(),
            "active_time": self.entries.iter().map(|e| e.active_time).collect::<Vec<_>>(),
        });
        let nets: Vec<&Network> = self.entries.iter().map(|e| &e.net).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_container(&mut f, "qbank", &meta, &nets)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (kind, meta, nets) = read_container(&mut f)?;
        if kind != "qbank" || nets.len() != 16 {
            return Err(Error::Parse("checkpoint is not a Q-network bank".into()));
        }
        let config: AgentVariantConfig =
            serde_json::from_value(meta.get("config").cloned().unwrap_or_default()).map_err(|e| Error::Parse(format!("config: {e}")))?;
        let learning: LearningConfig =
            serde_json::from_value(meta.get("learning").cloned().unwrap_or_default()).map_err(|e| Error::Parse(format!("learning: {e}")))?;
        let alphas: Vec<f64> = serde_json::from_value(meta.get("alphas").cloned().unwrap_or_default()).unwrap_or_default();
        let steps: Vec<u64> = serde_json::from_value(meta.get("steps").cloned().unwrap_or_default()).unwrap_or_default();
        let active: Vec<f64> = serde_json::from_value(meta.get("active_time").cloned().unwrap_or_default()).unwrap_or_default();
        let entries = nets
            .into_iter()
            .enumerate()
            .map(|(i, net)| {
                let mut optimizer = OptimizerState::sgd_decaying(learning.alpha, learning.alpha_decay, learning.alpha_floor);
                if let Some(&a) = alphas.get(i) {
                    optimizer.alpha = a;
                }
                if let Some(&s) = steps.get(i) {
                    optimizer.step = s;
                }
                QEntry { net, optimizer, active_time: active.get(i).copied().unwrap_or(0.0), pending: None }
            })
            .collect();
        Ok(QNetworkBank { config, learning, entries })
    }
}

/// Linear epsilon schedule over the exploration phase, forced to zero after.
pub fn epsilon_for_episode(learning: &LearningConfig, episode: usize, exploration_episodes: usize) -> f64 {
    if exploration_episodes == 0 || episode >= exploration_episodes {
        return 0.0;
    }
    let frac = episode as f64 / (exploration_episodes.saturating_sub(1)).max(1) as f64;
    learning.epsilon_start + (learning.epsilon_end - learning.epsilon_start) * frac
}
