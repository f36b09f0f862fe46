//! The end-to-end training loop: rollouts, storage, replay updates, target
//! updates, periodic validation and checkpointing.
//!
//! The loop follows the epoch/cycle/batch regime: each cycle collects
//! `episodes_per_cycle` exploration episodes into the replay buffer, runs
//! `batches_per_cycle` update iterations (every agent's critic then actor,
//! in agent-id order, from synchronized or independent hindsight batches),
//! and soft-updates the targets once at the cycle end. A strict per-step
//! mode (`per_step_updates`) instead runs one update iteration plus a
//! target update per collected environment step.
//!
//! A run is single-threaded and fully reproducible: all randomness flows
//! from `TrainConfig::seed` through fixed-order ChaCha streams.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    Algo, AlgorithmVariant, Ensemble, EnsembleConfig, Exploration, ReplayMode,
};
use crate::env::{generate_trials, sample_goal, Environment, MalfunctionMask, TerminalReason, Trial};
use crate::replay::{Episode, JointTransition, ReplayBuffer, SampleConfig};
use crate::{Error, Result};

/// Everything a training run needs besides the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub cycles_per_epoch: usize,
    pub batches_per_cycle: usize,
    pub episodes_per_cycle: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub noise_sigma: f64,
    /// Probability of replacing an agent's slice with a uniform random
    /// action during exploration.
    pub random_eps: f64,
    pub her_k: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    pub eval_every_epochs: usize,
    /// Size of the generated validation set when none is supplied.
    pub validation_trials: usize,
    pub seed: u64,
    pub variant: AlgorithmVariant,
    pub hidden_layers: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub action_l2: f64,
    /// See [`EnsembleConfig::bootstrap_through_drops`].
    pub bootstrap_through_drops: bool,
    /// Literal shared-window replay reading; `None` uses independent
    /// (episode, timestep) picks.
    pub contiguous_window: Option<usize>,
    /// Strict mode: one update iteration and one target update per
    /// collected environment step instead of the cycle/batch regime.
    pub per_step_updates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            cycles_per_epoch: 25,
            batches_per_cycle: 25,
            episodes_per_cycle: 2,
            batch_size: 128,
            gamma: 0.98,
            tau: 0.05,
            noise_sigma: 0.2,
            random_eps: 0.3,
            her_k: 4,
            buffer_capacity: 1000,
            eval_every_epochs: 20,
            validation_trials: 50,
            seed: 0,
            variant: AlgorithmVariant::new(Algo::Magcla, ReplayMode::Sher),
            hidden_layers: vec![64, 64],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            grad_clip: 10.0,
            action_l2: 1.0,
            bootstrap_through_drops: true,
            contiguous_window: None,
            per_step_updates: false,
        }
    }
}

impl TrainConfig {
    /// CI-speed budget: 100 epochs of 10 cycles x 10 batches, validated
    /// every 5 epochs.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 100,
            cycles_per_epoch: 10,
            batches_per_cycle: 10,
            eval_every_epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("cycles_per_epoch", self.cycles_per_epoch),
            ("batches_per_cycle", self.batches_per_cycle),
            ("episodes_per_cycle", self.episodes_per_cycle),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("eval_every_epochs", self.eval_every_epochs),
            ("validation_trials", self.validation_trials),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig("tau must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.random_eps) {
            return Err(Error::InvalidConfig("random_eps must be in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            hidden_layers: self.hidden_layers.clone(),
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            grad_clip: self.grad_clip,
            action_l2: self.action_l2,
            bootstrap_through_drops: self.bootstrap_through_drops,
        }
    }

    pub fn exploration(&self) -> Exploration {
        Exploration {
            sigma: self.noise_sigma,
            random_eps: self.random_eps,
        }
    }

    fn sample_config(&self, success_threshold: f64) -> SampleConfig {
        SampleConfig {
            batch_size: self.batch_size,
            her_k: self.her_k,
            success_threshold,
            contiguous_window: self.contiguous_window,
        }
    }
}

/// One logged row. `seconds` is cumulative *simulated* time (environment
/// steps times the step length), so logs of identical runs are
/// byte-identical; wall-clock time belongs in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub critic_loss: f64,
    pub actor_obj: f64,
    pub seconds: f64,
    pub rng_fp: String,
}

/// Validation-point rows of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,success_rate,mean_return,critic_loss,actor_obj,seconds,rng_fp";

    fn row_to_csv(row: &TrainLogRow) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            row.epoch,
            row.success_rate,
            row.mean_return,
            row.critic_loss,
            row.actor_obj,
            row.seconds,
            row.rng_fp
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&Self::row_to_csv(row));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == Self::CSV_HEADER => {}
            _ => return Err(Error::Parse("bad train log header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 7 {
                return Err(Error::Parse(format!("train log line {}: bad field count", i + 2)));
            }
            let field = |j: usize| -> Result<f64> {
                parts[j]
                    .parse()
                    .map_err(|e| Error::Parse(format!("train log line {}: {e}", i + 2)))
            };
            rows.push(TrainLogRow {
                epoch: parts[0]
                    .parse()
                    .map_err(|e| Error::Parse(format!("train log line {}: {e}", i + 2)))?,
                success_rate: field(1)?,
                mean_return: field(2)?,
                critic_loss: field(3)?,
                actor_obj: field(4)?,
                seconds: field(5)?,
                rng_fp: parts[6].to_string(),
            });
        }
        Ok(Self { rows })
    }
}

/// Rolls out one episode on a fixed trial. `exploration = None` is the
/// deterministic evaluation policy.
pub fn rollout_trial<E: Environment, R: Rng>(
    env: &E,
    ensemble: &Ensemble,
    trial: Trial,
    exploration: Option<&Exploration>,
    rng: &mut R,
) -> Result<Episode> {
    let (mut state, mut obs) = env.reset(trial)?;
    let mut transitions = Vec::with_capacity(env.horizon());
    let reason = loop {
        let action = ensemble.select_action(&obs, exploration, rng)?;
        let out = env.step(&state, &action)?;
        // The next observation's lagged action is the executed (clipped)
        // joint action, which keeps the stored chain bitwise consistent.
        transitions.push(JointTransition {
            x: obs.state_vec.clone(),
            prev_actions: obs.prev_actions.clone(),
            actions: out.observation.prev_actions.clone(),
            reward: out.reward,
            x_next: out.observation.state_vec.clone(),
            achieved_goal: obs.achieved_goal,
            achieved_goal_next: out.observation.achieved_goal,
            desired_goal: obs.desired_goal,
            dropped_terminal: out.terminal == Some(TerminalReason::Dropped),
        });
        if let Some(r) = out.terminal {
            break r;
        }
        state = out.state;
        obs = out.observation;
    };
    Ok(Episode {
        transitions,
        terminal_reason: reason,
    })
}

/// Rolls out one exploration episode on a freshly sampled trial.
pub fn rollout_episode<E: Environment, R: Rng>(
    env: &E,
    ensemble: &Ensemble,
    exploration: Option<&Exploration>,
    rng: &mut R,
) -> Result<Episode> {
    let trial = Trial {
        seed: rng.random::<u64>(),
        goal: sample_goal(rng),
    };
    rollout_trial(env, ensemble, trial, exploration, rng)
}

/// Noise-free success rate over a frozen trial set: a trial succeeds iff
/// the final step's reward is 0 (the goal is held at episode end).
pub fn validate<E: Environment>(
    ensemble: &Ensemble,
    env: &E,
    trials: &[Trial],
) -> Result<f64> {
    let outcome = crate::eval::success_rate(ensemble, env, trials, MalfunctionMask::none())?;
    Ok(outcome.success_rate)
}

fn update_iteration<R: Rng>(
    ensemble: &mut Ensemble,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    sample_cfg: &SampleConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let n = ensemble.n_agents();
    let batches = match cfg.variant.replay {
        ReplayMode::Sher => buffer.sample_sher(sample_cfg, n, rng)?,
        ReplayMode::Her => buffer.sample_her(sample_cfg, n, rng)?,
    };
    let mut critic_loss = 0.0;
    let mut actor_obj = 0.0;
    for agent in 0..n {
        let targets = ensemble.compute_td_targets(agent, &batches[agent], cfg.gamma)?;
        critic_loss += ensemble.critic_update(agent, &batches[agent], &targets)?;
        actor_obj += ensemble.actor_update(agent, &batches[agent])?;
    }
    Ok((critic_loss / n as f64, actor_obj / n as f64))
}

/// Runs `batches_per_cycle` update iterations and one target soft update.
/// Returns the mean critic loss and mean actor objective over the cycle.
pub fn update_cycle<R: Rng>(
    ensemble: &mut Ensemble,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    success_threshold: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let sample_cfg = cfg.sample_config(success_threshold);
    let mut cl = 0.0;
    let mut ao = 0.0;
    for _ in 0..cfg.batches_per_cycle {
        let (c, a) = update_iteration(ensemble, buffer, cfg, &sample_cfg, rng)?;
        cl += c;
        ao += a;
    }
    ensemble.soft_update(cfg.tau)?;
    Ok((
        cl / cfg.batches_per_cycle as f64,
        ao / cfg.batches_per_cycle as f64,
    ))
}

/// Result of a full training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub ensemble: Ensemble,
    /// The validation set the run used (generated from the seed unless one
    /// was supplied).
    pub validation: Vec<Trial>,
}

/// Trains from scratch. When `out_dir` is set, `train_log.csv` is written
/// incrementally (rows flushed as they are produced), one ensemble
/// checkpoint is saved per validation point, and `checkpoint_final.json`
/// at the end.
pub fn train<E: Environment>(
    cfg: &TrainConfig,
    env: &E,
    validation: Option<Vec<Trial>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Fixed stream order: nets, rollouts, sampling, validation trials.
    let net_seed: u64 = master.random();
    let mut rollout_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut trial_rng = ChaCha8Rng::seed_from_u64(master.random());
    let validation = validation
        .unwrap_or_else(|| generate_trials(cfg.validation_trials, &mut trial_rng));

    let mut ensemble = Ensemble::new(
        cfg.variant,
        env.partition(),
        env.x_dim(),
        env.action_dim(),
        cfg.ensemble_config(),
        net_seed,
    )?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let exploration = cfg.exploration();
    let threshold = env.success_threshold();
    let sample_cfg = cfg.sample_config(threshold);

    let mut log = TrainLog::default();
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join("train_log.csv"))?;
            writeln!(f, "{}", TrainLog::CSV_HEADER)?;
            f.flush()?;
            Some(f)
        }
        None => None,
    };

    let mut env_steps: u64 = 0;
    // Accumulators since the last logged row.
    let mut returns_sum = 0.0;
    let mut returns_count = 0usize;
    let mut cl_sum = 0.0;
    let mut ao_sum = 0.0;
    let mut update_count = 0usize;

    for epoch in 1..=cfg.epochs {
        for _cycle in 0..cfg.cycles_per_epoch {
            for _ in 0..cfg.episodes_per_cycle {
                let episode =
                    rollout_episode(env, &ensemble, Some(&exploration), &mut rollout_rng)?;
                env_steps += episode.len() as u64;
                returns_sum += episode.total_return();
                returns_count += 1;
                let steps = episode.len();
                buffer.store_episode(episode)?;
                if cfg.per_step_updates {
                    for _ in 0..steps {
                        let (c, a) = update_iteration(
                            &mut ensemble,
                            &buffer,
                            cfg,
                            &sample_cfg,
                            &mut sample_rng,
                        )?;
                        ensemble.soft_update(cfg.tau)?;
                        cl_sum += c;
                        ao_sum += a;
                        update_count += 1;
                    }
                }
            }
            if !cfg.per_step_updates {
                let (c, a) =
                    update_cycle(&mut ensemble, &buffer, cfg, threshold, &mut sample_rng)?;
                cl_sum += c;
                ao_sum += a;
                update_count += 1;
            }
        }

        if epoch % cfg.eval_every_epochs == 0 || epoch == cfg.epochs {
            let success = validate(&ensemble, env, &validation)?;
            let row = TrainLogRow {
                epoch,
                success_rate: success,
                mean_return: if returns_count > 0 {
                    returns_sum / returns_count as f64
                } else {
                    0.0
                },
                critic_loss: if update_count > 0 {
                    cl_sum / update_count as f64
                } else {
                    0.0
                },
                actor_obj: if update_count > 0 {
                    ao_sum / update_count as f64
                } else {
                    0.0
                },
                seconds: env_steps as f64 * env.dt(),
                rng_fp: format!("{:016x}", sample_rng.clone().random::<u64>()),
            };
            returns_sum = 0.0;
            returns_count = 0;
            cl_sum = 0.0;
            ao_sum = 0.0;
            update_count = 0;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", TrainLog::row_to_csv(&row))?;
                f.flush()?;
            }
            if let Some(dir) = out_dir {
                ensemble.save_checkpoint(&dir.join(format!("checkpoint_epoch_{epoch}.json")))?;
            }
            log.rows.push(row);
        }
    }

    if let Some(dir) = out_dir {
        ensemble.save_checkpoint(&dir.join("checkpoint_final.json"))?;
    }
    Ok(TrainOutcome {
        log,
        ensemble,
        validation,
    })
}
