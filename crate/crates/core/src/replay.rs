//! Episode-structured replay with hindsight relabeling.
//!
//! Episodes are stored whole so the "future" relabeling strategy can pick a
//! goal from any later timestep of the same episode. Sampling is split into
//! two phases: drawing a [`MinibatchSpec`] (which episodes, timesteps and
//! relabel points form the batch) and materializing it into training rows.
//! The split is what makes synchronized replay trivial: `sample_sher` draws
//! one spec and hands every agent the identical materialized batch, while
//! `sample_her` draws an independent spec per agent.
//!
//! Materialization copies; stored episodes are never mutated.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;

use crate::env::{compute_reward, TerminalReason};
use crate::{Error, Result};

/// One joint environment step as stored in the buffer.
///
/// `prev_actions` are the actions executed on the step before this one
/// (zeros at t = 0); they are what the actors observed when producing
/// `actions`. The lagged actions at the *next* step equal `actions`, so no
/// separate field is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransition {
    pub x: Vec<f64>,
    pub prev_actions: Vec<f64>,
    pub actions: Vec<f64>,
    pub reward: f64,
    pub x_next: Vec<f64>,
    pub achieved_goal: f64,
    pub achieved_goal_next: f64,
    pub desired_goal: f64,
    /// True only on the final transition of an episode that ended in a drop;
    /// TD targets skip bootstrapping through it.
    pub dropped_terminal: bool,
}

/// A complete episode plus why it ended.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<JointTransition>,
    pub terminal_reason: TerminalReason,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::InconsistentEpisode("episode is empty".into()));
        }
        let last = self.transitions.len() - 1;
        for (t, tr) in self.transitions.iter().enumerate() {
            if tr.reward != 0.0 && tr.reward != -1.0 {
                return Err(Error::InconsistentEpisode(format!(
                    "reward {} at step {t} is not binary",
                    tr.reward
                )));
            }
            if tr.actions.iter().any(|a| a.abs() > 1.0)
                || tr.prev_actions.iter().any(|a| a.abs() > 1.0)
            {
                return Err(Error::InconsistentEpisode(format!(
                    "action outside [-1, 1] at step {t}"
                )));
            }
            if tr.dropped_terminal
                && !(t == last && self.terminal_reason == TerminalReason::Dropped)
            {
                return Err(Error::InconsistentEpisode(format!(
                    "dropped_terminal set on non-final step {t}"
                )));
            }
            if t < last {
                let next = &self.transitions[t + 1];
                if tr.x_next != next.x
                    || tr.achieved_goal_next != next.achieved_goal
                    || tr.actions != next.prev_actions
                    || tr.desired_goal != next.desired_goal
                {
                    return Err(Error::InconsistentEpisode(format!(
                        "chain broken between steps {t} and {}",
                        t + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One sampled batch entry: which stored transition, and the future
/// timestep supplying the hindsight goal (if relabeled).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecEntry {
    /// Absolute episode id (monotonic across the buffer's lifetime), so a
    /// spec can detect that its episode has been evicted.
    pub episode: u64,
    pub t: usize,
    pub relabel: Option<usize>,
}

/// The sampling decisions defining one update minibatch. Under SHER a
/// single spec is shared by every agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinibatchSpec {
    pub entries: Vec<SpecEntry>,
}

/// One materialized training row. The lagged actions at the next step are
/// `actions`, so target-side actor observations reference them directly.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub x: Vec<f64>,
    pub prev_actions: Vec<f64>,
    pub actions: Vec<f64>,
    pub reward: f64,
    pub x_next: Vec<f64>,
    pub achieved_goal_next: f64,
    pub desired_goal: f64,
    pub dropped_terminal: bool,
}

/// How minibatch specs are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub batch_size: usize,
    /// Relabel ratio: each entry carries a hindsight goal with probability
    /// `her_k / (her_k + 1)`.
    pub her_k: usize,
    /// Threshold for recomputing rewards of relabeled rows.
    pub success_threshold: f64,
    /// When set, entries are drawn as shared-start windows of this length
    /// (consecutive timesteps within one episode) instead of independent
    /// (episode, t) picks.
    pub contiguous_window: Option<usize>,
}

/// Ring of episodes with strictly oldest-first eviction.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
    /// Number of episodes evicted so far; the absolute id of
    /// `episodes[0]` is exactly this value.
    evicted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be >= 1");
        Self {
            episodes: VecDeque::new(),
            capacity,
            evicted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Absolute id of the oldest episode still stored.
    pub fn oldest_id(&self) -> u64 {
        self.evicted
    }

    pub fn episode(&self, absolute_id: u64) -> Option<&Episode> {
        let idx = absolute_id.checked_sub(self.evicted)?;
        self.episodes.get(idx as usize)
    }

    /// Validates and stores an episode, evicting the oldest at capacity.
    pub fn store_episode(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        self.episodes.push_back(episode);
        while self.episodes.len() > self.capacity {
            self.episodes.pop_front();
            self.evicted += 1;
        }
        Ok(())
    }

    /// Draws the sampling decisions for one minibatch: uniform episode,
    /// uniform timestep, and with probability `k/(k+1)` a hindsight goal
    /// from a uniform future timestep of the same episode.
    pub fn draw_minibatch_spec<R: Rng>(
        &self,
        cfg: &SampleConfig,
        rng: &mut R,
    ) -> Result<MinibatchSpec> {
        if self.episodes.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut entries = Vec::with_capacity(cfg.batch_size);
        match cfg.contiguous_window {
            None => {
                for _ in 0..cfg.batch_size {
                    let idx = rng.random_range(0..self.episodes.len());
                    let ep = &self.episodes[idx];
                    let t = rng.random_range(0..ep.len());
                    entries.push(self.draw_entry(idx, t, ep.len(), cfg.her_k, rng));
                }
            }
            Some(window) => {
                let window = window.max(1);
                // Shared-start reading: fill the batch with runs of
                // consecutive timesteps from a common start per window.
                while entries.len() < cfg.batch_size {
                    let idx = rng.random_range(0..self.episodes.len());
                    let ep = &self.episodes[idx];
                    let start = rng.random_range(0..ep.len());
                    let end = (start + window).min(ep.len());
                    for t in start..end {
                        if entries.len() == cfg.batch_size {
                            break;
                        }
                        entries.push(self.draw_entry(idx, t, ep.len(), cfg.her_k, rng));
                    }
                }
            }
        }
        Ok(MinibatchSpec { entries })
    }

    fn draw_entry<R: Rng>(
        &self,
        idx: usize,
        t: usize,
        ep_len: usize,
        her_k: usize,
        rng: &mut R,
    ) -> SpecEntry {
        let relabel = if her_k > 0 {
            let p = her_k as f64 / (her_k as f64 + 1.0);
            if rng.random::<f64>() < p {
                Some(rng.random_range(t..ep_len))
            } else {
                None
            }
        } else {
            None
        };
        SpecEntry {
            episode: self.evicted + idx as u64,
            t,
            relabel,
        }
    }

    /// Copies the referenced transitions into training rows, substituting
    /// the hindsight goal and recomputing the reward for relabeled entries.
    pub fn materialize(&self, spec: &MinibatchSpec, success_threshold: f64) -> Result<Vec<BatchRow>> {
        let mut rows = Vec::with_capacity(spec.entries.len());
        for entry in &spec.entries {
            let ep = self
                .episode(entry.episode)
                .ok_or(Error::StaleSpec(entry.episode))?;
            let tr = ep.transitions.get(entry.t).ok_or_else(|| {
                Error::InconsistentEpisode(format!(
                    "spec timestep {} out of range for episode {}",
                    entry.t, entry.episode
                ))
            })?;
            let (desired_goal, reward) = match entry.relabel {
                None => (tr.desired_goal, tr.reward),
                Some(f) => {
                    let future = ep.transitions.get(f).ok_or_else(|| {
                        Error::InconsistentEpisode(format!(
                            "relabel timestep {f} out of range for episode {}",
                            entry.episode
                        ))
                    })?;
                    if f < entry.t {
                        return Err(Error::InconsistentEpisode(format!(
                            "relabel timestep {f} precedes sampled timestep {}",
                            entry.t
                        )));
                    }
                    let new_goal = future.achieved_goal_next;
                    let reward = compute_reward(tr.achieved_goal_next, new_goal, success_threshold);
                    (new_goal, reward)
                }
            };
            rows.push(BatchRow {
                x: tr.x.clone(),
                prev_actions: tr.prev_actions.clone(),
                actions: tr.actions.clone(),
                reward,
                x_next: tr.x_next.clone(),
                achieved_goal_next: tr.achieved_goal_next,
                desired_goal,
                dropped_terminal: tr.dropped_terminal,
            });
        }
        Ok(rows)
    }

    /// Independent replay: every agent gets its own spec and batch, with the
    /// rng advanced between draws.
    pub fn sample_her<R: Rng>(
        &self,
        cfg: &SampleConfig,
        n_agents: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<BatchRow>>> {
        (0..n_agents)
            .map(|_| {
                let spec = self.draw_minibatch_spec(cfg, rng)?;
                self.materialize(&spec, cfg.success_threshold)
            })
            .collect()
    }

    /// Synchronized replay: one spec is drawn and materialized once, and all
    /// agents receive the identical batch (same episodes, timesteps,
    /// relabeled goals and rewards).
    pub fn sample_sher<R: Rng>(
        &self,
        cfg: &SampleConfig,
        n_agents: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<BatchRow>>> {
        let spec = self.draw_minibatch_spec(cfg, rng)?;
        let batch = self.materialize(&spec, cfg.success_threshold)?;
        Ok(vec![batch; n_agents])
    }

    /// Debug dump, one transition per line:
    /// `episode|t|reward|desired|achieved|achieved_next|x|prev_actions|actions|x_next`
    /// with vector fields as space-separated decimals.
    pub fn dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for (i, ep) in self.episodes.iter().enumerate() {
            let id = self.evicted + i as u64;
            for (t, tr) in ep.transitions.iter().enumerate() {
                writeln!(
                    w,
                    "{id}|{t}|{}|{}|{}|{}|{}|{}|{}|{}",
                    tr.reward,
                    tr.desired_goal,
                    tr.achieved_goal,
                    tr.achieved_goal_next,
                    join(&tr.x),
                    join(&tr.prev_actions),
                    join(&tr.actions),
                    join(&tr.x_next),
                )?;
            }
        }
        Ok(())
    }
}
