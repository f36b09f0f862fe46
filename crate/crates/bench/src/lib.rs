//! Shared fixtures for the criterion benches.

use magcla::env::{EnvConfig, Environment, RotationEnv, Trial};
use magcla::replay::{Episode, JointTransition, ReplayBuffer};
use magcla::{Algo, AlgorithmVariant, Ensemble, ReplayMode};

pub fn bench_env() -> RotationEnv {
    RotationEnv::new(EnvConfig::default()).unwrap()
}

pub fn bench_ensemble(algo: Algo, seed: u64) -> Ensemble {
    let env = bench_env();
    Ensemble::new(
        AlgorithmVariant::new(algo, ReplayMode::Sher),
        env.partition(),
        env.x_dim(),
        env.action_dim(),
        Default::default(),
        seed,
    )
    .unwrap()
}

/// Fills a buffer with zero-action rollout episodes.
pub fn filled_buffer(episodes: usize) -> ReplayBuffer {
    let env = bench_env();
    let mut buffer = ReplayBuffer::new(episodes.max(1));
    for i in 0..episodes {
        let trial = Trial {
            seed: i as u64,
            goal: 0.5,
        };
        let (mut state, mut obs) = env.reset(trial).unwrap();
        let action = vec![0.0; env.action_dim()];
        let mut transitions = Vec::new();
        let reason = loop {
            let out = env.step(&state, &action).unwrap();
            transitions.push(JointTransition {
                x: obs.state_vec.clone(),
                prev_actions: obs.prev_actions.clone(),
                actions: out.observation.prev_actions.clone(),
                reward: out.reward,
                x_next: out.observation.state_vec.clone(),
                achieved_goal: obs.achieved_goal,
                achieved_goal_next: out.observation.achieved_goal,
                desired_goal: obs.desired_goal,
                dropped_terminal: false,
            });
            if let Some(r) = out.terminal {
                break r;
            }
            state = out.state;
            obs = out.observation;
        };
        buffer
            .store_episode(Episode {
                transitions,
                terminal_reason: reason,
            })
            .unwrap();
    }
    buffer
}
