//! Agent partitions, observation assembly and the actor/critic update rules.
//!
//! Every learning agent owns a contiguous slice of the joint action vector.
//! Critics are centralized: their observation is the state, the goal
//! encoding and *all* agents' actions, identically laid out for every agent.
//! Actor observations depend on the algorithm:
//!
//! - `magcla`: state, goal, and the lagged actions of the agent's neighbors
//!   (fingers see left/self/right, the wrist sees everyone),
//! - `maddpg`: state and goal only,
//! - `ddpg`: one agent over the full action vector, state and goal only.
//!
//! Lagged means the previous step's executed joint action: observing the
//! current step's actions would be circular, so actors condition on what was
//! actually executed one step earlier (zeros at t = 0), both during rollouts
//! and when replaying stored transitions.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::nn::{
    adam_step, AdamState, Gradients, MlpCheckpoint, MlpParams, OutputActivation,
};
use crate::replay::BatchRow;
use crate::{Error, Result};

/// What part of the hand an agent drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Finger,
    Wrist,
    /// Single agent covering the whole joint action (ddpg).
    Full,
}

/// An agent's identity: its slice of the joint action vector and the agents
/// whose lagged actions its actor observes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPartition {
    pub agent_id: usize,
    pub action_slice: Range<usize>,
    /// Ordered by agent id; includes the agent itself.
    pub neighbor_ids: Vec<usize>,
    pub role: Role,
}

/// The physical layout of the rotation hand: one agent per finger (slices
/// of two: grip and torque), then the wrist. Fingers neighbor left/self/
/// right with end fingers missing one side; the wrist observes everyone.
pub fn rotation_partition(n_fingers: usize, has_wrist: bool) -> Vec<AgentPartition> {
    let n_agents = n_fingers + usize::from(has_wrist);
    let mut partition = Vec::with_capacity(n_agents);
    for i in 0..n_fingers {
        let mut neighbors = Vec::new();
        if i > 0 {
            neighbors.push(i - 1);
        }
        neighbors.push(i);
        if i + 1 < n_fingers {
            neighbors.push(i + 1);
        }
        partition.push(AgentPartition {
            agent_id: i,
            action_slice: 2 * i..2 * i + 2,
            neighbor_ids: neighbors,
            role: Role::Finger,
        });
    }
    if has_wrist {
        partition.push(AgentPartition {
            agent_id: n_fingers,
            action_slice: 2 * n_fingers..2 * n_fingers + 1,
            neighbor_ids: (0..n_agents).collect(),
            role: Role::Wrist,
        });
    }
    partition
}

/// Checks that agent ids are 0..n in order and the slices are disjoint and
/// cover the joint action vector.
pub fn validate_partition(partition: &[AgentPartition], action_dim: usize) -> Result<()> {
    if partition.is_empty() {
        return Err(Error::InvalidConfig("empty partition".into()));
    }
    let mut covered = 0usize;
    for (i, p) in partition.iter().enumerate() {
        if p.agent_id != i {
            return Err(Error::InvalidConfig(format!(
                "agent ids must be 0..n in order, found {} at {}",
                p.agent_id, i
            )));
        }
        if p.action_slice.start != covered || p.action_slice.end <= p.action_slice.start {
            return Err(Error::InvalidConfig(format!(
                "agent {} slice {:?} does not tile the action vector",
                i, p.action_slice
            )));
        }
        covered = p.action_slice.end;
        if p.neighbor_ids.iter().any(|&j| j >= partition.len()) {
            return Err(Error::UnknownAgent(
                *p.neighbor_ids.iter().find(|&&j| j >= partition.len()).unwrap(),
            ));
        }
    }
    if covered != action_dim {
        return Err(Error::InvalidConfig(format!(
            "partition covers {covered} dims, action vector has {action_dim}"
        )));
    }
    Ok(())
}

/// Algorithm family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Magcla,
    Maddpg,
    /// Single agent over the full joint action.
    Ddpg,
}

/// Replay synchronization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Her,
    Sher,
}

/// Algorithm plus replay mode, e.g. `magcla+sher`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmVariant {
    pub algo: Algo,
    pub replay: ReplayMode,
}

impl AlgorithmVariant {
    pub const fn new(algo: Algo, replay: ReplayMode) -> Self {
        Self { algo, replay }
    }
}

impl fmt::Display for AlgorithmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let algo = match self.algo {
            Algo::Magcla => "magcla",
            Algo::Maddpg => "maddpg",
            Algo::Ddpg => "ddpg",
        };
        let replay = match self.replay {
            ReplayMode::Her => "her",
            ReplayMode::Sher => "sher",
        };
        write!(f, "{algo}+{replay}")
    }
}

impl FromStr for AlgorithmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (algo, replay) = s
            .split_once('+')
            .ok_or_else(|| Error::Parse(format!("variant `{s}` is not `<algo>+<replay>`")))?;
        let algo = match algo.trim().to_ascii_lowercase().as_str() {
            "magcla" => Algo::Magcla,
            "maddpg" => Algo::Maddpg,
            "ddpg" => Algo::Ddpg,
            other => return Err(Error::Parse(format!("unknown algorithm `{other}`"))),
        };
        let replay = match replay.trim().to_ascii_lowercase().as_str() {
            "her" => ReplayMode::Her,
            "sher" => ReplayMode::Sher,
            other => return Err(Error::Parse(format!("unknown replay mode `{other}`"))),
        };
        Ok(Self { algo, replay })
    }
}

/// Goal angle encoded the same way the state encodes the object angle.
pub fn encode_goal(goal: f64) -> [f64; 2] {
    [goal.sin(), goal.cos()]
}

/// Centralized critic observation: `[x, goal encoding, a_1..a_N]`. The
/// layout is identical for every agent.
pub fn build_critic_obs(x: &[f64], desired_goal: f64, joint_actions: &[f64]) -> Vec<f64> {
    let g = encode_goal(desired_goal);
    let mut obs = Vec::with_capacity(x.len() + 2 + joint_actions.len());
    obs.extend_from_slice(x);
    obs.extend_from_slice(&g);
    obs.extend_from_slice(joint_actions);
    obs
}

/// Actor observation: `[x, goal encoding]` followed by the observed agents'
/// slices of `reference_actions` (the lagged joint action), in id order.
/// Agents with no observed neighbors simply get the shorter input.
pub fn build_actor_obs(
    observed_slices: &[Range<usize>],
    x: &[f64],
    desired_goal: f64,
    reference_actions: &[f64],
) -> Vec<f64> {
    let g = encode_goal(desired_goal);
    let extra: usize = observed_slices.iter().map(Range::len).sum();
    let mut obs = Vec::with_capacity(x.len() + 2 + extra);
    obs.extend_from_slice(x);
    obs.extend_from_slice(&g);
    for s in observed_slices {
        obs.extend_from_slice(&reference_actions[s.clone()]);
    }
    obs
}

/// Online and target networks of one learning agent.
#[derive(Debug, Clone)]
pub struct AgentNets {
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub target_actor: MlpParams,
    pub target_critic: MlpParams,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
}

/// Network and update hyperparameters shared by all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub hidden_layers: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Global gradient-norm clip applied before each Adam step.
    pub grad_clip: f64,
    /// Coefficient of the mean-squared-action regularizer in the actor loss.
    pub action_l2: f64,
    /// Bootstrap TD targets through drop terminals (the hindsight-benchmark
    /// convention). Setting this false caps a dropped episode's target at
    /// its final reward, which values the persistent failure state at 0 and
    /// teaches policies to drop the object early to escape negative
    /// returns; it exists for ablation only.
    pub bootstrap_through_drops: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            grad_clip: 10.0,
            action_l2: 1.0,
            bootstrap_through_drops: true,
        }
    }
}

/// Exploration noise: Gaussian perturbation plus epsilon-random slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Exploration {
    pub sigma: f64,
    pub random_eps: f64,
}

impl Default for Exploration {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            random_eps: 0.3,
        }
    }
}

/// All learning agents of one training run.
#[derive(Debug, Clone)]
pub struct Ensemble {
    variant: AlgorithmVariant,
    partition: Vec<AgentPartition>,
    agents: Vec<AgentNets>,
    /// Per learning agent: its slice of the joint action.
    slices: Vec<Range<usize>>,
    /// Per learning agent: the slices whose lagged actions its actor sees.
    observed: Vec<Vec<Range<usize>>>,
    x_dim: usize,
    action_dim: usize,
    cfg: EnsembleConfig,
}

fn learning_layout(
    algo: Algo,
    partition: &[AgentPartition],
    action_dim: usize,
) -> Result<(Vec<Range<usize>>, Vec<Vec<Range<usize>>>)> {
    validate_partition(partition, action_dim)?;
    match algo {
        Algo::Magcla => {
            let slices = partition.iter().map(|p| p.action_slice.clone()).collect();
            let observed = partition
                .iter()
                .map(|p| {
                    p.neighbor_ids
                        .iter()
                        .map(|&j| partition[j].action_slice.clone())
                        .collect()
                })
                .collect();
            Ok((slices, observed))
        }
        Algo::Maddpg => {
            let slices = partition.iter().map(|p| p.action_slice.clone()).collect();
            let observed = vec![Vec::new(); partition.len()];
            Ok((slices, observed))
        }
        Algo::Ddpg => {
            let mut slices = Vec::with_capacity(1);
            slices.push(0..action_dim);
            Ok((slices, vec![Vec::new()]))
        }
    }
}

impl Ensemble {
    /// Builds the per-agent networks for `variant` over the given physical
    /// partition. Target networks start as exact copies of the online nets.
    pub fn new(
        variant: AlgorithmVariant,
        partition: Vec<AgentPartition>,
        x_dim: usize,
        action_dim: usize,
        cfg: EnsembleConfig,
        seed: u64,
    ) -> Result<Self> {
        let (slices, observed) = learning_layout(variant.algo, &partition, action_dim)?;
        let critic_in = x_dim + 2 + action_dim;
        let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agents = Vec::with_capacity(slices.len());
        for (slice, obs) in slices.iter().zip(observed.iter()) {
            let actor_in = x_dim + 2 + obs.iter().map(Range::len).sum::<usize>();
            let mut actor_dims = vec![actor_in];
            actor_dims.extend_from_slice(&cfg.hidden_layers);
            actor_dims.push(slice.len());
            let mut critic_dims = vec![critic_in];
            critic_dims.extend_from_slice(&cfg.hidden_layers);
            critic_dims.push(1);
            let actor = MlpParams::init(
                &actor_dims,
                OutputActivation::Tanh,
                seed_rng.random::<u64>(),
            )?;
            let critic = MlpParams::init(
                &critic_dims,
                OutputActivation::Identity,
                seed_rng.random::<u64>(),
            )?;
            let actor_adam = AdamState::new(&actor, cfg.actor_lr);
            let critic_adam = AdamState::new(&critic, cfg.critic_lr);
            agents.push(AgentNets {
                target_actor: actor.clone(),
                target_critic: critic.clone(),
                actor,
                critic,
                actor_adam,
                critic_adam,
            });
        }
        Ok(Self {
            variant,
            partition,
            agents,
            slices,
            observed,
            x_dim,
            action_dim,
            cfg,
        })
    }

    pub fn variant(&self) -> AlgorithmVariant {
        self.variant
    }

    pub fn partition(&self) -> &[AgentPartition] {
        &self.partition
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.cfg
    }

    pub fn action_slice(&self, agent: usize) -> Range<usize> {
        self.slices[agent].clone()
    }

    pub fn observed_slices(&self, agent: usize) -> &[Range<usize>] {
        &self.observed[agent]
    }

    pub fn nets(&self, agent: usize) -> &AgentNets {
        &self.agents[agent]
    }

    pub fn nets_mut(&mut self, agent: usize) -> &mut AgentNets {
        &mut self.agents[agent]
    }

    /// Actor observation of one learning agent.
    pub fn actor_obs(
        &self,
        agent: usize,
        x: &[f64],
        desired_goal: f64,
        reference_actions: &[f64],
    ) -> Vec<f64> {
        assert_eq!(x.len(), self.x_dim, "state vector length");
        assert_eq!(
            reference_actions.len(),
            self.action_dim,
            "reference action length"
        );
        build_actor_obs(&self.observed[agent], x, desired_goal, reference_actions)
    }

    /// Joint action of all actors for `obs`; optionally with exploration
    /// noise. The evaluation path (`exploration = None`) is deterministic.
    pub fn select_action<R: Rng>(
        &self,
        obs: &Observation,
        exploration: Option<&Exploration>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut joint = vec![0.0; self.action_dim];
        for (i, nets) in self.agents.iter().enumerate() {
            let o = self.actor_obs(i, &obs.state_vec, obs.desired_goal, &obs.prev_actions);
            let (a, _) = nets.actor.forward(&o)?;
            joint[self.slices[i].clone()].copy_from_slice(&a);
        }
        if let Some(noise) = exploration {
            for slice in &self.slices {
                for idx in slice.clone() {
                    let n: f64 = rng.sample(StandardNormal);
                    joint[idx] += noise.sigma * n;
                }
                if rng.random::<f64>() < noise.random_eps {
                    for idx in slice.clone() {
                        joint[idx] = rng.random_range(-1.0..1.0);
                    }
                }
            }
            for a in &mut joint {
                *a = a.clamp(-1.0, 1.0);
            }
        }
        Ok(joint)
    }

    /// TD targets for one agent: the next joint action is assembled from
    /// every agent's *target* actor on its next actor observation (lagged
    /// actions = this row's executed actions), then bootstrapped through the
    /// agent's target critic. Time-limit truncation always bootstraps; drop
    /// terminals bootstrap too unless `bootstrap_through_drops` is off.
    pub fn compute_td_targets(
        &self,
        agent: usize,
        batch: &[BatchRow],
        gamma: f64,
    ) -> Result<Vec<f64>> {
        let mut targets = Vec::with_capacity(batch.len());
        for row in batch {
            let y = if row.dropped_terminal && !self.cfg.bootstrap_through_drops {
                row.reward
            } else {
                let mut joint_next = vec![0.0; self.action_dim];
                for (j, nets) in self.agents.iter().enumerate() {
                    let o =
                        self.actor_obs(j, &row.x_next, row.desired_goal, &row.actions);
                    let (a, _) = nets.target_actor.forward(&o)?;
                    joint_next[self.slices[j].clone()].copy_from_slice(&a);
                }
                let o_critic = build_critic_obs(&row.x_next, row.desired_goal, &joint_next);
                let (q, _) = self.agents[agent].target_critic.forward(&o_critic)?;
                row.reward + gamma * q[0]
            };
            targets.push(y);
        }
        Ok(targets)
    }

    /// Mean-squared TD error of one agent's critic and its exact gradient.
    pub fn critic_loss_and_grads(
        &self,
        agent: usize,
        batch: &[BatchRow],
        targets: &[f64],
    ) -> Result<(f64, Gradients)> {
        if batch.len() != targets.len() || batch.is_empty() {
            return Err(Error::DimMismatch("batch/target length".into()));
        }
        let nets = &self.agents[agent];
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Gradients::zeros_like(&nets.critic);
        for (row, &y) in batch.iter().zip(targets.iter()) {
            let o = build_critic_obs(&row.x, row.desired_goal, &row.actions);
            let (q, cache) = nets.critic.forward(&o)?;
            let err = q[0] - y;
            loss += err * err * inv_b;
            let g = nets.critic.backward(&cache, &[2.0 * err * inv_b], false)?;
            grads.add_assign(&g);
        }
        Ok((loss, grads))
    }

    /// One Adam step on the critic TD loss. Returns the pre-step loss.
    pub fn critic_update(
        &mut self,
        agent: usize,
        batch: &[BatchRow],
        targets: &[f64],
    ) -> Result<f64> {
        let (loss, mut grads) = self.critic_loss_and_grads(agent, batch, targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        grads.clip_global_norm(self.cfg.grad_clip);
        let nets = &mut self.agents[agent];
        adam_step(&mut nets.critic, &grads, &mut nets.critic_adam)?;
        Ok(loss)
    }

    /// The scalar the actor gradient descends: `-mean(Q)` with the agent's
    /// recomputed action substituted into the critic input, plus the
    /// mean-squared-action regularizer.
    pub fn actor_loss(&self, agent: usize, batch: &[BatchRow]) -> Result<f64> {
        let (mean_q, penalty) = self.actor_forward_stats(agent, batch)?;
        Ok(-mean_q + self.cfg.action_l2 * penalty)
    }

    fn actor_forward_stats(&self, agent: usize, batch: &[BatchRow]) -> Result<(f64, f64)> {
        let nets = &self.agents[agent];
        let slice = self.slices[agent].clone();
        let inv_b = 1.0 / batch.len() as f64;
        let inv_d = 1.0 / slice.len() as f64;
        let mut mean_q = 0.0;
        let mut penalty = 0.0;
        for row in batch {
            let o_actor = self.actor_obs(agent, &row.x, row.desired_goal, &row.prev_actions);
            let (a, _) = nets.actor.forward(&o_actor)?;
            let mut joint = row.actions.clone();
            joint[slice.clone()].copy_from_slice(&a);
            let o_critic = build_critic_obs(&row.x, row.desired_goal, &joint);
            let (q, _) = nets.critic.forward(&o_critic)?;
            mean_q += q[0] * inv_b;
            penalty += a.iter().map(|v| v * v).sum::<f64>() * inv_b * inv_d;
        }
        Ok((mean_q, penalty))
    }

    /// Deterministic policy gradient of one agent: recompute `a_i`, push the
    /// critic's action gradient through the input-gradient path and chain it
    /// into the actor. Other agents' actions stay at their stored batch
    /// values. Returns `(mean Q, gradient of actor_loss)`.
    pub fn actor_objective_and_grads(
        &self,
        agent: usize,
        batch: &[BatchRow],
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::DimMismatch("empty batch".into()));
        }
        let nets = &self.agents[agent];
        let slice = self.slices[agent].clone();
        let inv_b = 1.0 / batch.len() as f64;
        let inv_d = 1.0 / slice.len() as f64;
        let offset = self.x_dim + 2 + slice.start;
        let mut mean_q = 0.0;
        let mut grads = Gradients::zeros_like(&nets.actor);
        for row in batch {
            let o_actor = self.actor_obs(agent, &row.x, row.desired_goal, &row.prev_actions);
            let (a, actor_cache) = nets.actor.forward(&o_actor)?;
            let mut joint = row.actions.clone();
            joint[slice.clone()].copy_from_slice(&a);
            let o_critic = build_critic_obs(&row.x, row.desired_goal, &joint);
            let (q, critic_cache) = nets.critic.forward(&o_critic)?;
            mean_q += q[0] * inv_b;
            let critic_grads = nets.critic.backward(&critic_cache, &[1.0], true)?;
            let dq_dinput = critic_grads.input_gradient.expect("input gradient requested");
            let upstream: Vec<f64> = a
                .iter()
                .enumerate()
                .map(|(c, &a_c)| {
                    -dq_dinput[offset + c] * inv_b
                        + 2.0 * self.cfg.action_l2 * a_c * inv_b * inv_d
                })
                .collect();
            let g = nets.actor.backward(&actor_cache, &upstream, false)?;
            grads.add_assign(&g);
        }
        Ok((mean_q, grads))
    }

    /// One Adam step ascending the agent's Q. Returns mean Q before the step.
    pub fn actor_update(&mut self, agent: usize, batch: &[BatchRow]) -> Result<f64> {
        let (mean_q, mut grads) = self.actor_objective_and_grads(agent, batch)?;
        if !mean_q.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite("actor objective".into()));
        }
        grads.clip_global_norm(self.cfg.grad_clip);
        let nets = &mut self.agents[agent];
        adam_step(&mut nets.actor, &grads, &mut nets.actor_adam)?;
        Ok(mean_q)
    }

    /// Soft target update `target <- tau * online + (1 - tau) * target` for
    /// every agent's actor and critic targets.
    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
        }
        for nets in &mut self.agents {
            nets.target_actor.mix_from(&nets.actor, tau)?;
            nets.target_critic.mix_from(&nets.critic, tau)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> EnsembleCheckpoint {
        EnsembleCheckpoint {
            format_version: crate::nn::CHECKPOINT_FORMAT_VERSION,
            variant: self.variant,
            x_dim: self.x_dim,
            action_dim: self.action_dim,
            partition: self.partition.clone(),
            agents: self
                .agents
                .iter()
                .map(|n| AgentNetsCheckpoint {
                    actor: n.actor.to_checkpoint(),
                    critic: n.critic.to_checkpoint(),
                    target_actor: n.target_actor.to_checkpoint(),
                    target_critic: n.target_critic.to_checkpoint(),
                })
                .collect(),
        }
    }

    /// Rebuilds an ensemble from a checkpoint. Adam states start fresh.
    pub fn from_checkpoint(ckpt: &EnsembleCheckpoint, cfg: EnsembleConfig) -> Result<Self> {
        let (slices, observed) =
            learning_layout(ckpt.variant.algo, &ckpt.partition, ckpt.action_dim)?;
        if ckpt.agents.len() != slices.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} agents, variant {} expects {}",
                ckpt.agents.len(),
                ckpt.variant,
                slices.len()
            )));
        }
        let mut agents = Vec::with_capacity(ckpt.agents.len());
        for (i, a) in ckpt.agents.iter().enumerate() {
            let actor = MlpParams::from_checkpoint(&a.actor)?;
            let critic = MlpParams::from_checkpoint(&a.critic)?;
            let target_actor = MlpParams::from_checkpoint(&a.target_actor)?;
            let target_critic = MlpParams::from_checkpoint(&a.target_critic)?;
            let expected_actor_in =
                ckpt.x_dim + 2 + observed[i].iter().map(Range::len).sum::<usize>();
            if actor.input_dim() != expected_actor_in
                || actor.output_dim() != slices[i].len()
                || critic.input_dim() != ckpt.x_dim + 2 + ckpt.action_dim
                || critic.output_dim() != 1
            {
                return Err(Error::Parse(format!("agent {i} net dims do not match layout")));
            }
            let actor_adam = AdamState::new(&actor, cfg.actor_lr);
            let critic_adam = AdamState::new(&critic, cfg.critic_lr);
            agents.push(AgentNets {
                actor,
                critic,
                target_actor,
                target_critic,
                actor_adam,
                critic_adam,
            });
        }
        Ok(Self {
            variant: ckpt.variant,
            partition: ckpt.partition.clone(),
            agents,
            slices,
            observed,
            x_dim: ckpt.x_dim,
            action_dim: ckpt.action_dim,
            cfg,
        })
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path, cfg: EnsembleConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: EnsembleCheckpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt, cfg)
    }
}

/// Versioned bundle of every agent's four networks plus the partition and
/// variant descriptors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleCheckpoint {
    pub format_version: u32,
    pub variant: AlgorithmVariant,
    pub x_dim: usize,
    pub action_dim: usize,
    pub partition: Vec<AgentPartition>,
    pub agents: Vec<AgentNetsCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentNetsCheckpoint {
    pub actor: MlpCheckpoint,
    pub critic: MlpCheckpoint,
    pub target_actor: MlpCheckpoint,
    pub target_critic: MlpCheckpoint,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, Environment, RotationEnv, Trial};
    use crate::nn::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn magcla() -> AlgorithmVariant {
        AlgorithmVariant::new(Algo::Magcla, ReplayMode::Sher)
    }

    fn small_ensemble(algo: Algo, seed: u64) -> Ensemble {
        let cfg = EnvConfig::default();
        let ens_cfg = EnsembleConfig {
            hidden_layers: vec![8, 8],
            ..EnsembleConfig::default()
        };
        Ensemble::new(
            AlgorithmVariant::new(algo, ReplayMode::Sher),
            rotation_partition(cfg.n_fingers, cfg.has_wrist),
            cfg.x_dim(),
            cfg.action_dim(),
            ens_cfg,
            seed,
        )
        .unwrap()
    }

    /// A little batch over the rotation env's dimensions.
    fn toy_batch(ens: &Ensemble, n: usize, seed: u64) -> Vec<BatchRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let rand_vec = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> {
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
                };
                let x = (0..ens.x_dim())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let x_next = (0..ens.x_dim())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                BatchRow {
                    x,
                    prev_actions: rand_vec(&mut rng, ens.action_dim()),
                    actions: rand_vec(&mut rng, ens.action_dim()),
                    reward: if rng.random::<f64>() < 0.5 { 0.0 } else { -1.0 },
                    x_next,
                    achieved_goal_next: rng.random_range(-3.0..3.0),
                    desired_goal: rng.random_range(-3.0..3.0),
                    dropped_terminal: false,
                }
            })
            .collect()
    }

    #[test]
    fn rotation_partition_neighbor_topology() {
        let p = rotation_partition(3, true);
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].neighbor_ids, vec![0, 1]); // end finger: one side missing
        assert_eq!(p[1].neighbor_ids, vec![0, 1, 2]);
        assert_eq!(p[2].neighbor_ids, vec![1, 2]);
        assert_eq!(p[3].neighbor_ids, vec![0, 1, 2, 3]); // wrist sees everyone
        assert_eq!(p[3].role, Role::Wrist);
        validate_partition(&p, 7).unwrap();

        let five = rotation_partition(5, true);
        assert_eq!(five[0].neighbor_ids, vec![0, 1]); // thumb observes only the index
        assert_eq!(five[4].neighbor_ids, vec![3, 4]); // little observes only the ring
        validate_partition(&five, 11).unwrap();
    }

    #[test]
    fn critic_obs_is_agent_independent_concatenation() {
        let x = vec![0.0; 8];
        let joint = vec![0.0; 7];
        let obs = build_critic_obs(&x, 0.7, &joint);
        assert_eq!(obs.len(), 8 + 2 + 7);
        assert!(obs[10..].iter().all(|&v| v == 0.0));
        // Same inputs, same layout, regardless of which agent asks.
        let again = build_critic_obs(&x, 0.7, &joint);
        assert_eq!(obs, again);
    }

    #[test]
    fn actor_obs_dimensions_per_variant() {
        let cfg = EnvConfig::default();
        let (x_dim, a_dim) = (cfg.x_dim(), cfg.action_dim());
        let magcla = small_ensemble(Algo::Magcla, 0);
        assert_eq!(magcla.n_agents(), 4);
        // Wrist observes all 7 action dims.
        assert_eq!(
            magcla.nets(3).actor.input_dim(),
            x_dim + 2 + a_dim
        );
        // End finger observes self + one neighbor (2 + 2 dims).
        assert_eq!(magcla.nets(0).actor.input_dim(), x_dim + 2 + 4);
        // Middle finger observes three fingers.
        assert_eq!(magcla.nets(1).actor.input_dim(), x_dim + 2 + 6);

        let maddpg = small_ensemble(Algo::Maddpg, 0);
        for i in 0..maddpg.n_agents() {
            assert_eq!(maddpg.nets(i).actor.input_dim(), x_dim + 2);
        }

        let ddpg = small_ensemble(Algo::Ddpg, 0);
        assert_eq!(ddpg.n_agents(), 1);
        assert_eq!(ddpg.nets(0).actor.output_dim(), a_dim);
        assert_eq!(ddpg.nets(0).critic.input_dim(), x_dim + 2 + a_dim);
    }

    #[test]
    fn actor_obs_slices_follow_neighbor_order() {
        let ens = small_ensemble(Algo::Magcla, 1);
        let x = vec![0.0; ens.x_dim()];
        let reference: Vec<f64> = (0..7).map(|i| i as f64 / 10.0).collect();
        // Middle finger (agent 1) sees fingers 0, 1, 2 -> dims 0..6.
        let obs = ens.actor_obs(1, &x, 0.0, &reference);
        assert_eq!(&obs[ens.x_dim() + 2..], &reference[0..6]);
        // Wrist (agent 3) sees the whole joint action.
        let obs = ens.actor_obs(3, &x, 0.0, &reference);
        assert_eq!(&obs[ens.x_dim() + 2..], &reference[..]);
    }

    #[test]
    fn finger_actor_ignores_non_neighbor_actions() {
        let ens = small_ensemble(Algo::Magcla, 5);
        let x: Vec<f64> = (0..ens.x_dim()).map(|i| 0.1 * i as f64).collect();
        let mut reference = vec![0.2; 7];
        let obs_a = ens.actor_obs(0, &x, 0.5, &reference);
        let (out_a, _) = ens.nets(0).actor.forward(&obs_a).unwrap();
        // Perturb finger 2 and the wrist: not neighbors of finger 0.
        reference[4] = -0.9;
        reference[5] = 0.7;
        reference[6] = -0.3;
        let obs_b = ens.actor_obs(0, &x, 0.5, &reference);
        let (out_b, _) = ens.nets(0).actor.forward(&obs_b).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn targets_equal_online_nets_after_construction() {
        let ens = small_ensemble(Algo::Magcla, 3);
        for i in 0..ens.n_agents() {
            assert_eq!(ens.nets(i).actor, ens.nets(i).target_actor);
            assert_eq!(ens.nets(i).critic, ens.nets(i).target_critic);
        }
    }

    #[test]
    fn select_action_eval_is_deterministic_and_bounded() {
        let env = RotationEnv::new(EnvConfig::default()).unwrap();
        let ens = small_ensemble(Algo::Magcla, 7);
        let (_, obs) = env.reset(Trial { seed: 2, goal: 1.1 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a1 = ens.select_action(&obs, None, &mut rng).unwrap();
        let a2 = ens.select_action(&obs, None, &mut rng).unwrap();
        assert_eq!(a1, a2);
        assert!(a1.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn degenerate_noise_equals_evaluation_action() {
        let env = RotationEnv::new(EnvConfig::default()).unwrap();
        let ens = small_ensemble(Algo::Magcla, 7);
        let (_, obs) = env.reset(Trial { seed: 2, goal: 1.1 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Exploration {
            sigma: 0.0,
            random_eps: 0.0,
        };
        let noisy = ens.select_action(&obs, Some(&noise), &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let eval = ens.select_action(&obs, None, &mut rng2).unwrap();
        assert_eq!(noisy, eval);
    }

    #[test]
    fn noisy_actions_are_reproducible_per_rng() {
        let env = RotationEnv::new(EnvConfig::default()).unwrap();
        let ens = small_ensemble(Algo::Magcla, 7);
        let (_, obs) = env.reset(Trial { seed: 4, goal: -0.4 }).unwrap();
        let noise = Exploration::default();
        let mut rng_a = ChaCha8Rng::seed_from_u64(31);
        let mut rng_b = ChaCha8Rng::seed_from_u64(31);
        let a = ens.select_action(&obs, Some(&noise), &mut rng_a).unwrap();
        let b = ens.select_action(&obs, Some(&noise), &mut rng_b).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn td_target_gamma_zero_is_the_reward() {
        let ens = small_ensemble(Algo::Magcla, 11);
        let batch = toy_batch(&ens, 6, 1);
        let y = ens.compute_td_targets(0, &batch, 0.0).unwrap();
        for (row, y) in batch.iter().zip(y.iter()) {
            assert_eq!(*y, row.reward);
        }
    }

    #[test]
    fn td_target_zero_critic_is_the_reward() {
        let mut ens = small_ensemble(Algo::Magcla, 11);
        // Zero out agent 0's target critic.
        let n = ens.nets(0).target_critic.num_params();
        for idx in 0..n {
            ens.nets_mut(0).target_critic.set_param(idx, 0.0);
        }
        let batch = toy_batch(&ens, 5, 2);
        let y = ens.compute_td_targets(0, &batch, 0.98).unwrap();
        for (row, y) in batch.iter().zip(y.iter()) {
            assert_eq!(*y, row.reward);
        }
    }

    #[test]
    fn drop_terminals_bootstrap_by_default_and_suppress_on_request() {
        let mut ens = small_ensemble(Algo::Magcla, 13);
        let mut batch = toy_batch(&ens, 4, 3);
        for row in &mut batch {
            row.dropped_terminal = true;
        }
        // Default: a drop transition is bootstrapped like any other.
        let mut plain = batch.clone();
        for row in &mut plain {
            row.dropped_terminal = false;
        }
        let y_drop = ens.compute_td_targets(2, &batch, 0.98).unwrap();
        let y_plain = ens.compute_td_targets(2, &plain, 0.98).unwrap();
        assert_eq!(y_drop, y_plain);
        // Ablation flag: target capped at the final reward.
        ens.cfg.bootstrap_through_drops = false;
        let y = ens.compute_td_targets(2, &batch, 0.98).unwrap();
        for (row, y) in batch.iter().zip(y.iter()) {
            assert_eq!(*y, row.reward);
        }
    }

    #[test]
    fn td_target_matches_hand_arithmetic_on_tiny_nets() {
        // Two agents with one action dim each over a 1-dim state; one-layer
        // target actors (tanh) and a one-layer identity target critic with
        // hand-picked weights. The expected value is recomputed here with
        // scalar ops only.
        let partition = vec![
            AgentPartition {
                agent_id: 0,
                action_slice: 0..1,
                neighbor_ids: vec![0, 1],
                role: Role::Finger,
            },
            AgentPartition {
                agent_id: 1,
                action_slice: 1..2,
                neighbor_ids: vec![0, 1],
                role: Role::Finger,
            },
        ];
        let mut ens = Ensemble::new(
            magcla(),
            partition,
            1,
            2,
            EnsembleConfig {
                hidden_layers: vec![],
                ..EnsembleConfig::default()
            },
            0,
        )
        .unwrap();
        // actor obs: [x, sin g, cos g, a0, a1] (5 dims) -> 1 output
        let wa0 = [0.3, -0.2, 0.1, 0.4, -0.5];
        let wa1 = [-0.6, 0.2, 0.05, -0.1, 0.3];
        // critic obs: [x, sin g, cos g, a0, a1] (5 dims) -> 1 output
        let wc = [1.0, 2.0, -1.5, 0.7, -0.4];
        for (i, w) in [wa0, wa1].iter().enumerate() {
            for (k, &v) in w.iter().enumerate() {
                ens.nets_mut(i).target_actor.set_param(k, v);
            }
        }
        for (k, &v) in wc.iter().enumerate() {
            ens.nets_mut(1).target_critic.set_param(k, v);
        }
        let row = BatchRow {
            x: vec![0.4],
            prev_actions: vec![0.0, 0.0],
            actions: vec![0.25, -0.75],
            reward: -1.0,
            x_next: vec![-0.3],
            achieved_goal_next: 0.2,
            desired_goal: 0.9,
            dropped_terminal: false,
        };
        let gamma = 0.5;
        let y = ens.compute_td_targets(1, std::slice::from_ref(&row), gamma).unwrap()[0];

        let (sg, cg) = (0.9f64.sin(), 0.9f64.cos());
        let o_next = [-0.3, sg, cg, 0.25, -0.75];
        let dot = |w: &[f64; 5], o: &[f64; 5]| w.iter().zip(o.iter()).map(|(a, b)| a * b).sum::<f64>();
        let a0 = dot(&wa0, &o_next).tanh();
        let a1 = dot(&wa1, &o_next).tanh();
        let o_critic = [-0.3, sg, cg, a0, a1];
        let expected = -1.0 + gamma * dot(&wc, &o_critic);
        assert!((y - expected).abs() < 1e-12, "y={y} expected={expected}");
    }

    #[test]
    fn critic_fit_means_zero_loss_and_no_update() {
        let mut ens = small_ensemble(Algo::Magcla, 17);
        let batch = toy_batch(&ens, 4, 5);
        // Targets chosen as the critic's own predictions.
        let targets: Vec<f64> = batch
            .iter()
            .map(|row| {
                let o = build_critic_obs(&row.x, row.desired_goal, &row.actions);
                ens.nets(0).critic.forward(&o).unwrap().0[0]
            })
            .collect();
        let before = ens.nets(0).critic.clone();
        let loss = ens.critic_update(0, &batch, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(*ens.nets(0).critic.weights(), *before.weights());
    }

    #[test]
    fn duplicated_rows_leave_the_loss_unchanged() {
        let ens = small_ensemble(Algo::Magcla, 19);
        let batch = toy_batch(&ens, 1, 6);
        let targets = vec![0.3];
        let (single, _) = ens.critic_loss_and_grads(0, &batch, &targets).unwrap();
        let doubled: Vec<BatchRow> = vec![batch[0].clone(), batch[0].clone()];
        let (double, _) = ens
            .critic_loss_and_grads(0, &doubled, &[0.3, 0.3])
            .unwrap();
        assert!((single - double).abs() < 1e-15);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let ens = small_ensemble(Algo::Magcla, 23);
        let batch = toy_batch(&ens, 3, 7);
        let targets = ens.compute_td_targets(1, &batch, 0.9).unwrap();
        let (_, analytic) = ens.critic_loss_and_grads(1, &batch, &targets).unwrap();
        let report = finite_difference_check(
            &ens.nets(1).critic,
            |p| {
                let mut probe = ens.clone();
                probe.nets_mut(1).critic = p.clone();
                probe.critic_loss_and_grads(1, &batch, &targets).unwrap().0
            },
            &analytic,
            1e-4,
        );
        assert!(
            report.within_tolerance,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn constant_critic_and_zero_penalty_freeze_the_actor() {
        let mut ens = small_ensemble(Algo::Magcla, 29);
        ens.cfg.action_l2 = 0.0;
        // Constant critic: zero all weights, bias 0.7 on the output layer.
        let n = ens.nets(0).critic.num_params();
        for idx in 0..n {
            ens.nets_mut(0).critic.set_param(idx, 0.0);
        }
        let last_bias = n - 1;
        ens.nets_mut(0).critic.set_param(last_bias, 0.7);
        let batch = toy_batch(&ens, 4, 8);
        let before = ens.nets(0).actor.clone();
        let mean_q = ens.actor_update(0, &batch).unwrap();
        assert!((mean_q - 0.7).abs() < 1e-12);
        assert_eq!(*ens.nets(0).actor.weights(), *before.weights());
        assert_eq!(*ens.nets(0).actor.biases(), *before.biases());
    }

    #[test]
    fn linear_sum_critic_gives_all_ones_action_gradient() {
        // Critic Q = sum of the action components: dQ/da_i is all ones, and
        // the actor gradient must match finite differences of mean Q.
        let mut ens = small_ensemble(Algo::Magcla, 31);
        ens.cfg.action_l2 = 0.0;
        let agent = 1;
        let critic_in = ens.nets(agent).critic.input_dim();
        let x_dim = ens.x_dim();
        let flat: Vec<f64> = (0..critic_in)
            .map(|i| if i >= x_dim + 2 { 1.0 } else { 0.0 })
            .collect();
        let ckpt = MlpCheckpoint {
            format_version: 1,
            layer_dims: vec![critic_in, 1],
            output_activation: OutputActivation::Identity,
            weights: vec![vec![flat]],
            biases: vec![vec![0.0]],
        };
        ens.nets_mut(agent).critic = MlpParams::from_checkpoint(&ckpt).unwrap();
        let batch = toy_batch(&ens, 4, 9);
        let (_, analytic) = ens.actor_objective_and_grads(agent, &batch).unwrap();
        let report = finite_difference_check(
            &ens.nets(agent).actor,
            |p| {
                let mut probe = ens.clone();
                probe.nets_mut(agent).actor = p.clone();
                probe.actor_loss(agent, &batch).unwrap()
            },
            &analytic,
            1e-4,
        );
        assert!(
            report.within_tolerance,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn actor_gradient_matches_finite_differences_with_regularizer() {
        let ens = small_ensemble(Algo::Magcla, 37);
        let batch = toy_batch(&ens, 3, 10);
        for agent in 0..ens.n_agents() {
            let (_, analytic) = ens.actor_objective_and_grads(agent, &batch).unwrap();
            let report = finite_difference_check(
                &ens.nets(agent).actor,
                |p| {
                    let mut probe = ens.clone();
                    probe.nets_mut(agent).actor = p.clone();
                    probe.actor_loss(agent, &batch).unwrap()
                },
                &analytic,
                1e-4,
            );
            assert!(
                report.within_tolerance,
                "agent {agent}: max rel error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn soft_update_endpoints_and_halving() {
        let mut ens = small_ensemble(Algo::Magcla, 41);
        // Desynchronize targets first.
        let batch = toy_batch(&ens, 4, 11);
        let targets = ens.compute_td_targets(0, &batch, 0.9).unwrap();
        ens.critic_update(0, &batch, &targets).unwrap();
        ens.actor_update(0, &batch).unwrap();

        let mut tau0 = ens.clone();
        tau0.soft_update(0.0).unwrap();
        assert_eq!(tau0.nets(0).target_critic, ens.nets(0).target_critic);

        let mut tau1 = ens.clone();
        tau1.soft_update(1.0).unwrap();
        assert_eq!(tau1.nets(0).target_critic, tau1.nets(0).critic);
        assert_eq!(tau1.nets(0).target_actor, tau1.nets(0).actor);

        // Contraction: the gap shrinks by exactly (1 - tau) per update.
        let mut mixed = ens.clone();
        mixed.soft_update(0.25).unwrap();
        let n = ens.nets(0).critic.num_params();
        for idx in 0..n {
            let online = ens.nets(0).critic.param(idx);
            let old_gap = ens.nets(0).target_critic.param(idx) - online;
            let new_gap = mixed.nets(0).target_critic.param(idx) - online;
            assert!((new_gap - 0.75 * old_gap).abs() <= 1e-15 * old_gap.abs().max(1.0));
        }

        assert!(ens.soft_update(1.5).is_err());
        assert!(ens.soft_update(-0.1).is_err());
    }

    #[test]
    fn variant_strings_round_trip() {
        for s in ["magcla+sher", "magcla+her", "maddpg+sher", "ddpg+her"] {
            let v: AlgorithmVariant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert!("magcla".parse::<AlgorithmVariant>().is_err());
        assert!("qmix+her".parse::<AlgorithmVariant>().is_err());
    }

    #[test]
    fn ensemble_checkpoint_round_trip() {
        let mut ens = small_ensemble(Algo::Magcla, 43);
        let batch = toy_batch(&ens, 4, 12);
        let targets = ens.compute_td_targets(0, &batch, 0.9).unwrap();
        ens.critic_update(0, &batch, &targets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.json");
        ens.save_checkpoint(&path).unwrap();
        let restored = Ensemble::load_checkpoint(&path, ens.config().clone()).unwrap();
        assert_eq!(restored.n_agents(), ens.n_agents());
        for i in 0..ens.n_agents() {
            assert_eq!(restored.nets(i).actor, ens.nets(i).actor);
            assert_eq!(restored.nets(i).critic, ens.nets(i).critic);
            assert_eq!(restored.nets(i).target_critic, ens.nets(i).target_critic);
        }
        assert_eq!(restored.variant(), ens.variant());
        assert_eq!(restored.partition(), ens.partition());
    }

    #[test]
    fn critic_input_accounts_for_every_action_slice() {
        let ens = small_ensemble(Algo::Magcla, 47);
        let slice_total: usize = ens.partition().iter().map(|p| p.action_slice.len()).sum();
        assert_eq!(slice_total, ens.action_dim());
        for i in 0..ens.n_agents() {
            assert_eq!(
                ens.nets(i).critic.input_dim(),
                ens.x_dim() + 2 + slice_total
            );
        }
    }
}
