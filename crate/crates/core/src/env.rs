//! Goal-conditioned rotation environments.
//!
//! [`RotationEnv`] is a deterministic desk-scale stand-in for a dexterous
//! in-hand rotation task: `n_fingers` agents each drive a grip/torque pair,
//! an optional wrist agent contributes a bias torque, and the object is a
//! single free rotational degree of freedom. The reward is sparse and
//! binary: 0 when the object angle is within `success_threshold` of the
//! goal, -1 otherwise. Letting the total grip fall below `grip_threshold`
//! for `drop_patience` consecutive steps drops the object and ends the
//! episode, which is what forces the fingers to cooperate.
//!
//! [`ReachEnv`] is a one-agent angular point-reach task with the same
//! observation contract, used for training smoke tests.
//!
//! Dynamics are pure functions over explicit state: identical
//! `(state, action)` pairs produce bitwise-identical successors.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentPartition, Role};
use crate::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Sparse binary reward: 0 iff the angular distance between the achieved
/// and desired goal is strictly below `threshold`, else -1. Pure, so replay
/// relabeling can recompute it.
pub fn compute_reward(achieved_goal: f64, desired_goal: f64, threshold: f64) -> f64 {
    if wrap_angle(achieved_goal - desired_goal).abs() < threshold {
        0.0
    } else {
        -1.0
    }
}

/// Uniform goal strictly inside `(-pi, pi)`.
pub fn sample_goal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let g = rng.random_range(-PI..PI);
        if g > -PI {
            return g;
        }
    }
}

fn sample_angle<R: Rng>(rng: &mut R) -> f64 {
    sample_goal(rng)
}

/// One frozen evaluation trial: the reset seed and the goal angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub seed: u64,
    pub goal: f64,
}

/// Generates `n` trials from the rng: fresh reset seed, goal uniform in
/// `(-pi, pi)`.
pub fn generate_trials<R: Rng>(n: usize, rng: &mut R) -> Vec<Trial> {
    (0..n)
        .map(|_| Trial {
            seed: rng.random::<u64>(),
            goal: sample_goal(rng),
        })
        .collect()
}

/// Serializes trials in the line format `trial_seed,goal_radians`.
pub fn trials_to_string(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        let _ = writeln!(out, "{},{}", t.seed, t.goal);
    }
    out
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    std::fs::write(path, trials_to_string(trials))?;
    Ok(())
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (seed, goal) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("trial line {}: missing comma", i + 1)))?;
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("trial line {}: bad seed: {e}", i + 1)))?;
        let goal: f64 = goal
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("trial line {}: bad goal: {e}", i + 1)))?;
        if !goal.is_finite() {
            return Err(Error::Parse(format!("trial line {}: non-finite goal", i + 1)));
        }
        trials.push(Trial { seed, goal });
    }
    Ok(trials)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&std::fs::read_to_string(path)?)
}

/// Configuration of the rotation environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub n_fingers: usize,
    pub has_wrist: bool,
    /// Simulation timestep in seconds.
    pub dt: f64,
    /// Goal attainment threshold in radians.
    pub success_threshold: f64,
    /// Episode length T in steps.
    pub episode_length: usize,
    pub torque_gain: f64,
    pub drag_gain: f64,
    pub wrist_gain: f64,
    /// Minimum total grip required to keep holding the object.
    pub grip_threshold: f64,
    /// First-order lag of grip and wrist servos, in (0, 1].
    pub joint_lag: f64,
    /// Angular speed clamp in rad/s.
    pub max_speed: f64,
    /// Consecutive low-grip steps tolerated before the object drops.
    pub drop_patience: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_fingers: 3,
            has_wrist: true,
            dt: 0.04,
            success_threshold: 0.1,
            episode_length: 50,
            torque_gain: 2.0,
            drag_gain: 0.5,
            wrist_gain: 0.3,
            grip_threshold: 1.0,
            joint_lag: 0.5,
            max_speed: 4.0,
            drop_patience: 3,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fingers == 0 {
            return Err(Error::InvalidConfig("n_fingers must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be > 0".into()));
        }
        if !(self.success_threshold > 0.0 && self.success_threshold < PI) {
            return Err(Error::InvalidConfig(
                "success_threshold must be in (0, pi)".into(),
            ));
        }
        if self.episode_length == 0 {
            return Err(Error::InvalidConfig("episode_length must be >= 1".into()));
        }
        if !(self.joint_lag > 0.0 && self.joint_lag <= 1.0) {
            return Err(Error::InvalidConfig("joint_lag must be in (0, 1]".into()));
        }
        if !(self.max_speed > 0.0) {
            return Err(Error::InvalidConfig("max_speed must be > 0".into()));
        }
        Ok(())
    }

    /// Joint action dimension: `(grip, torque)` per finger plus the wrist.
    pub fn action_dim(&self) -> usize {
        2 * self.n_fingers + usize::from(self.has_wrist)
    }

    /// Length of the normalized state vector
    /// `[grips..., wrist_tilt, sin theta, cos theta, omega/max_speed]`.
    pub fn x_dim(&self) -> usize {
        self.n_fingers + usize::from(self.has_wrist) + 3
    }
}

/// Full simulator state of the rotation environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// Object angle in `(-pi, pi]`.
    pub theta: f64,
    /// Angular velocity, `|omega| <= max_speed`.
    pub omega: f64,
    /// Per-finger grip positions in `[0, 1]`.
    pub grip_positions: Vec<f64>,
    /// Wrist tilt in `[-1, 1]` (0 when the wrist is absent).
    pub wrist_tilt: f64,
    /// Joint action executed on the previous step (zeros at reset).
    pub prev_actions: Vec<f64>,
    pub steps_below_grip: usize,
    pub step_index: usize,
    pub dropped: bool,
    pub desired_goal: f64,
}

/// What a policy sees: the normalized state vector plus the goal pair and
/// the previous joint action (lagged actions feed neighbor observations).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state_vec: Vec<f64>,
    pub achieved_goal: f64,
    pub desired_goal: f64,
    pub prev_actions: Vec<f64>,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    TimeLimit,
    Dropped,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome<S> {
    pub state: S,
    pub observation: Observation,
    pub reward: f64,
    pub terminal: Option<TerminalReason>,
}

/// Evaluation-time fault injection: at most one agent is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MalfunctionMask {
    pub disabled_agent: Option<usize>,
}

impl MalfunctionMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn disable(agent_id: usize) -> Self {
        Self {
            disabled_agent: Some(agent_id),
        }
    }
}

/// Common interface of the goal-conditioned environments.
pub trait Environment {
    type State: Clone;

    fn action_dim(&self) -> usize;
    fn x_dim(&self) -> usize;
    /// Episode length T.
    fn horizon(&self) -> usize;
    fn success_threshold(&self) -> f64;
    /// Simulated seconds per step (used for simulated-time accounting).
    fn dt(&self) -> f64 {
        0.04
    }
    /// The physical agent layout of this environment's action vector.
    fn partition(&self) -> Vec<AgentPartition>;
    fn reset(&self, trial: Trial) -> Result<(Self::State, Observation)>;
    fn step(&self, state: &Self::State, action: &[f64]) -> Result<StepOutcome<Self::State>>;

    /// Overwrites the disabled agent's action slice with its fault value.
    /// Environments without disableable agents reject every mask.
    fn apply_malfunction(&self, action: &[f64], mask: MalfunctionMask) -> Result<Vec<f64>> {
        match mask.disabled_agent {
            None => Ok(action.to_vec()),
            Some(id) => Err(Error::UnknownAgent(id)),
        }
    }
}

/// The cooperative in-hand rotation stand-in.
#[derive(Debug, Clone)]
pub struct RotationEnv {
    config: EnvConfig,
}

impl RotationEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn observe(&self, state: &SimState) -> Observation {
        let cfg = &self.config;
        let mut x = Vec::with_capacity(cfg.x_dim());
        x.extend_from_slice(&state.grip_positions);
        if cfg.has_wrist {
            x.push(state.wrist_tilt);
        }
        x.push(state.theta.sin());
        x.push(state.theta.cos());
        x.push(state.omega / cfg.max_speed);
        Observation {
            state_vec: x,
            achieved_goal: state.theta,
            desired_goal: state.desired_goal,
            prev_actions: state.prev_actions.clone(),
        }
    }
}

impl Environment for RotationEnv {
    type State = SimState;

    fn action_dim(&self) -> usize {
        self.config.action_dim()
    }

    fn x_dim(&self) -> usize {
        self.config.x_dim()
    }

    fn horizon(&self) -> usize {
        self.config.episode_length
    }

    fn success_threshold(&self) -> f64 {
        self.config.success_threshold
    }

    fn dt(&self) -> f64 {
        self.config.dt
    }

    fn partition(&self) -> Vec<AgentPartition> {
        crate::agents::rotation_partition(self.config.n_fingers, self.config.has_wrist)
    }

    fn reset(&self, trial: Trial) -> Result<(SimState, Observation)> {
        if !(trial.goal > -PI && trial.goal < PI) {
            return Err(Error::InvalidConfig(format!(
                "goal {} outside (-pi, pi)",
                trial.goal
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(trial.seed);
        let state = SimState {
            theta: sample_angle(&mut rng),
            omega: 0.0,
            grip_positions: vec![0.5; self.config.n_fingers],
            wrist_tilt: 0.0,
            prev_actions: vec![0.0; self.config.action_dim()],
            steps_below_grip: 0,
            step_index: 0,
            dropped: false,
            desired_goal: trial.goal,
        };
        let obs = self.observe(&state);
        Ok((state, obs))
    }

    fn step(&self, state: &SimState, action: &[f64]) -> Result<StepOutcome<SimState>> {
        let cfg = &self.config;
        if action.len() != cfg.action_dim() {
            return Err(Error::DimMismatch(format!(
                "joint action has length {}, expected {}",
                action.len(),
                cfg.action_dim()
            )));
        }
        if state.dropped || state.step_index >= cfg.episode_length {
            return Err(Error::TerminalState);
        }
        let action: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();

        let mut next = state.clone();
        let mut finger_torque = 0.0;
        for i in 0..cfg.n_fingers {
            let u_g = action[2 * i];
            let u_t = action[2 * i + 1];
            let target = (u_g + 1.0) / 2.0;
            let g = next.grip_positions[i];
            next.grip_positions[i] = (g + cfg.joint_lag * (target - g)).clamp(0.0, 1.0);
            finger_torque += u_t * next.grip_positions[i];
        }
        let mut wrist_torque = 0.0;
        if cfg.has_wrist {
            let u_w = action[2 * cfg.n_fingers];
            next.wrist_tilt =
                (next.wrist_tilt + cfg.joint_lag * (u_w - next.wrist_tilt)).clamp(-1.0, 1.0);
            wrist_torque = cfg.wrist_gain * next.wrist_tilt;
        }
        let grip_total: f64 = next.grip_positions.iter().sum();
        next.omega = (state.omega + cfg.dt * (cfg.torque_gain * finger_torque + wrist_torque)
            - cfg.dt * cfg.drag_gain * grip_total * state.omega)
            .clamp(-cfg.max_speed, cfg.max_speed);
        next.theta = wrap_angle(state.theta + cfg.dt * next.omega);
        next.prev_actions = action;
        next.step_index += 1;

        if grip_total < cfg.grip_threshold {
            next.steps_below_grip += 1;
        } else {
            next.steps_below_grip = 0;
        }
        let terminal = if next.steps_below_grip >= cfg.drop_patience {
            next.dropped = true;
            Some(TerminalReason::Dropped)
        } else if next.step_index >= cfg.episode_length {
            Some(TerminalReason::TimeLimit)
        } else {
            None
        };
        let reward = compute_reward(next.theta, next.desired_goal, cfg.success_threshold);
        let observation = self.observe(&next);
        Ok(StepOutcome {
            state: next,
            observation,
            reward,
            terminal,
        })
    }

    fn apply_malfunction(&self, action: &[f64], mask: MalfunctionMask) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if action.len() != cfg.action_dim() {
            return Err(Error::DimMismatch("malfunction action length".into()));
        }
        let mut out = action.to_vec();
        match mask.disabled_agent {
            None => {}
            Some(id) if id < cfg.n_fingers => {
                // Fully open: zero grip target, zero torque.
                out[2 * id] = -1.0;
                out[2 * id + 1] = 0.0;
            }
            Some(id) if cfg.has_wrist && id == cfg.n_fingers => {
                // Neutral wrist.
                out[2 * cfg.n_fingers] = 0.0;
            }
            Some(id) => return Err(Error::UnknownAgent(id)),
        }
        Ok(out)
    }
}

/// Configuration of the single-agent angular reach task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachConfig {
    /// Radians turned per step at full action.
    pub turn_rate: f64,
    pub success_threshold: f64,
    pub episode_length: usize,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            turn_rate: 0.25,
            success_threshold: 0.1,
            episode_length: 20,
        }
    }
}

/// State of the reach task.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachState {
    pub theta: f64,
    pub prev_actions: Vec<f64>,
    pub step_index: usize,
    pub desired_goal: f64,
}

/// One agent steers a point around the circle to a goal angle and must sit
/// on it at the final step. Smoke-test companion to [`RotationEnv`].
#[derive(Debug, Clone)]
pub struct ReachEnv {
    config: ReachConfig,
}

impl ReachEnv {
    pub fn new(config: ReachConfig) -> Result<Self> {
        if !(config.turn_rate > 0.0) || config.episode_length == 0 {
            return Err(Error::InvalidConfig("bad reach config".into()));
        }
        if !(config.success_threshold > 0.0 && config.success_threshold < PI) {
            return Err(Error::InvalidConfig(
                "success_threshold must be in (0, pi)".into(),
            ));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &ReachConfig {
        &self.config
    }

    fn observe(&self, state: &ReachState) -> Observation {
        Observation {
            state_vec: vec![state.theta.sin(), state.theta.cos()],
            achieved_goal: state.theta,
            desired_goal: state.desired_goal,
            prev_actions: state.prev_actions.clone(),
        }
    }
}

impl Environment for ReachEnv {
    type State = ReachState;

    fn action_dim(&self) -> usize {
        1
    }

    fn x_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.config.episode_length
    }

    fn success_threshold(&self) -> f64 {
        self.config.success_threshold
    }

    fn partition(&self) -> Vec<AgentPartition> {
        vec![AgentPartition {
            agent_id: 0,
            action_slice: 0..1,
            neighbor_ids: vec![0],
            role: Role::Full,
        }]
    }

    fn reset(&self, trial: Trial) -> Result<(ReachState, Observation)> {
        if !(trial.goal > -PI && trial.goal < PI) {
            return Err(Error::InvalidConfig(format!(
                "goal {} outside (-pi, pi)",
                trial.goal
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(trial.seed);
        let state = ReachState {
            theta: sample_angle(&mut rng),
            prev_actions: vec![0.0],
            step_index: 0,
            desired_goal: trial.goal,
        };
        let obs = self.observe(&state);
        Ok((state, obs))
    }

    fn step(&self, state: &ReachState, action: &[f64]) -> Result<StepOutcome<ReachState>> {
        if action.len() != 1 {
            return Err(Error::DimMismatch("reach action must have length 1".into()));
        }
        if state.step_index >= self.config.episode_length {
            return Err(Error::TerminalState);
        }
        let u = action[0].clamp(-1.0, 1.0);
        let mut next = state.clone();
        next.theta = wrap_angle(state.theta + self.config.turn_rate * u);
        next.prev_actions = vec![u];
        next.step_index += 1;
        let terminal = (next.step_index >= self.config.episode_length)
            .then_some(TerminalReason::TimeLimit);
        let reward = compute_reward(next.theta, next.desired_goal, self.config.success_threshold);
        let observation = self.observe(&next);
        Ok(StepOutcome {
            state: next,
            observation,
            reward,
            terminal,
        })
    }
}
