use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::loss::discounted_returns;
use super::TrainError;
use crate::agent::{sample_action, Agent, NUM_ACTIONS};
use crate::env::{Action, EnvState, LevelSampler, Outcome};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamSet, Tensor};

/// A finished episode, reported by the trajectory in which it ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub total_return: f32,
    pub length: u32,
    pub solved: bool,
}

/// A fixed-length slice of experience from one environment. Episodes that
/// end inside the unroll are followed by fresh ones; `dones[t]` marks the
/// last step of each.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actor_id: u32,
    /// Per-actor production counter, one per trajectory.
    pub seq: u64,
    /// `T` observations, row-major HWC each.
    pub obs: Vec<f32>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// `T x 4`.
    pub behavior_logits: Vec<f32>,
    pub values: Vec<f32>,
    /// Value estimate of the observation after the last step.
    pub bootstrap_value: f32,
    pub episodes: Vec<EpisodeSummary>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn returns(&self, discount: f32) -> Vec<f32> {
        discounted_returns(&self.rewards, &self.dones, self.bootstrap_value, discount)
    }
}

/// Steps a group of environments in lockstep with one batched forward pass
/// per step.
pub struct Actor {
    id: u32,
    agent: Arc<Agent>,
    sampler: LevelSampler,
    envs: Vec<EnvState>,
    returns: Vec<f32>,
    action_rng: Rng,
    level_rng: Rng,
    unroll_length: usize,
    seq: u64,
}

impl Actor {
    pub fn new(
        id: u32,
        agent: Arc<Agent>,
        sampler: LevelSampler,
        num_envs: usize,
        unroll_length: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let (size, channels) = agent.input_shape();
        let cfg = sampler.config();
        if cfg.room_size != size || cfg.channels() != channels {
            return Err(TrainError::InvalidConfig(format!(
                "levels render {0}x{0}x{1}, agent expects {2}x{2}x{3}",
                cfg.room_size,
                cfg.channels(),
                size,
                channels
            )));
        }
        let mut level_rng = Rng::stream(seed, 2 * id as u64 + 1);
        let mut envs = Vec::with_capacity(num_envs);
        for _ in 0..num_envs {
            envs.push(EnvState::new(Arc::new(sampler.sample(&mut level_rng)?)));
        }
        Ok(Actor {
            id,
            agent,
            sampler,
            envs,
            returns: vec![0.0; num_envs],
            action_rng: Rng::stream(seed, 2 * id as u64),
            level_rng,
            unroll_length,
            seq: 0,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    fn observe(&self) -> Tensor<f32> {
        let (size, channels) = self.agent.input_shape();
        let per = size * size * channels;
        let mut data = vec![0.0; self.envs.len() * per];
        for (env, chunk) in self.envs.iter().zip(data.chunks_exact_mut(per)) {
            env.render_into(chunk);
        }
        Tensor::new(&[self.envs.len(), size, size, channels], data).expect("sized above")
    }

    fn evaluate(&self, params: &ParamSet<f32>, obs: Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>), TrainError> {
        let mut g = Graph::new();
        let x = g.input(obs);
        let out = self.agent.forward(&mut g, params, x, None)?;
        g.check_finite()?;
        Ok((g.value(out.logits).data().to_vec(), g.value(out.value).data().to_vec()))
    }

    /// Produces one trajectory per environment, each exactly
    /// `unroll_length` steps long.
    pub fn unroll(&mut self, params: &ParamSet<f32>) -> Result<Vec<Trajectory>, TrainError> {
        let n = self.envs.len();
        let t_len = self.unroll_length;
        let per = {
            let (s, c) = self.agent.input_shape();
            s * s * c
        };
        let mut trajs: Vec<Trajectory> = (0..n)
            .map(|_| Trajectory {
                actor_id: self.id,
                seq: 0,
                obs: Vec::with_capacity(t_len * per),
                actions: Vec::with_capacity(t_len),
                rewards: Vec::with_capacity(t_len),
                dones: Vec::with_capacity(t_len),
                behavior_logits: Vec::with_capacity(t_len * NUM_ACTIONS),
                values: Vec::with_capacity(t_len),
                bootstrap_value: 0.0,
                episodes: Vec::new(),
            })
            .collect();
        for _ in 0..t_len {
            let obs = self.observe();
            let (logits, values) = self.evaluate(params, obs.clone())?;
            for (e, traj) in trajs.iter_mut().enumerate() {
                let l = &logits[e * NUM_ACTIONS..(e + 1) * NUM_ACTIONS];
                let a = sample_action(l, &mut self.action_rng, false)?;
                let tr = self.envs[e].advance(Action::from_index(a).expect("4 actions"))?;
                traj.obs.extend_from_slice(&obs.data()[e * per..(e + 1) * per]);
                traj.actions.push(a as u8);
                traj.rewards.push(tr.reward);
                traj.dones.push(tr.done);
                traj.behavior_logits.extend_from_slice(l);
                traj.values.push(values[e]);
                self.returns[e] += tr.reward;
                if tr.done {
                    traj.episodes.push(EpisodeSummary {
                        total_return: self.returns[e],
                        length: self.envs[e].steps_taken(),
                        solved: tr.outcome == Outcome::GemCollected,
                    });
                    self.returns[e] = 0.0;
                    self.envs[e] = EnvState::new(Arc::new(self.sampler.sample(&mut self.level_rng)?));
                }
            }
        }
        let (_, bootstrap) = self.evaluate(params, self.observe())?;
        for (e, traj) in trajs.iter_mut().enumerate() {
            traj.bootstrap_value = bootstrap[e];
            traj.seq = self.seq;
            self.seq += 1;
        }
        Ok(trajs)
    }
}
