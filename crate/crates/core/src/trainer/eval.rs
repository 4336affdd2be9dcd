use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::agent::{sample_action, Agent, NUM_ACTIONS};
use crate::env::{solve_from, Action, EnvState, LevelSampler, Outcome};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamSet, Tensor};

/// Chooses actions for a batch of concurrently running episodes.
pub trait Policy {
    /// Called when a new episode starts in `slot`.
    fn reset(&mut self, _slot: usize, _state: &EnvState) {}

    /// One action per entry of `slots`, for the states in the same order.
    fn act(&mut self, slots: &[usize], states: &[&EnvState]) -> Result<Vec<Action>, TrainError>;
}

/// Uniform over the four moves.
pub struct RandomPolicy {
    rng: Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy { rng: Rng::new(seed) }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, slots: &[usize], _states: &[&EnvState]) -> Result<Vec<Action>, TrainError> {
        Ok(slots.iter().map(|_| Action::ALL[self.rng.index(NUM_ACTIONS)]).collect())
    }
}

/// Replays a shortest solution computed when each episode starts.
#[derive(Default)]
pub struct OraclePolicy {
    plans: Vec<std::vec::IntoIter<Action>>,
}

impl OraclePolicy {
    pub fn new() -> Self {
        OraclePolicy::default()
    }
}

impl Policy for OraclePolicy {
    fn reset(&mut self, slot: usize, state: &EnvState) {
        if self.plans.len() <= slot {
            self.plans.resize_with(slot + 1, || Vec::new().into_iter());
        }
        self.plans[slot] = solve_from(state).unwrap_or_default().into_iter();
    }

    fn act(&mut self, slots: &[usize], _states: &[&EnvState]) -> Result<Vec<Action>, TrainError> {
        Ok(slots
            .iter()
            .map(|&s| self.plans[s].next().unwrap_or(Action::Up))
            .collect())
    }
}

/// Acts with a parameter set, greedily or by sampling.
pub struct AgentPolicy<'a> {
    agent: &'a Agent,
    params: &'a ParamSet<f32>,
    greedy: bool,
    rng: Rng,
}

impl<'a> AgentPolicy<'a> {
    pub fn new(agent: &'a Agent, params: &'a ParamSet<f32>, greedy: bool, seed: u64) -> Self {
        AgentPolicy {
            agent,
            params,
            greedy,
            rng: Rng::new(seed),
        }
    }
}

impl Policy for AgentPolicy<'_> {
    fn act(&mut self, _slots: &[usize], states: &[&EnvState]) -> Result<Vec<Action>, TrainError> {
        let (size, channels) = self.agent.input_shape();
        let per = size * size * channels;
        let mut data = vec![0.0; states.len() * per];
        for (s, chunk) in states.iter().zip(data.chunks_exact_mut(per)) {
            s.render_into(chunk);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[states.len(), size, size, channels], data)?);
        let out = self.agent.forward(&mut g, self.params, x, None)?;
        g.value(out.logits)
            .data()
            .chunks(NUM_ACTIONS)
            .map(|l| {
                let a = sample_action(l, &mut self.rng, self.greedy)?;
                Ok(Action::from_index(a).expect("4 actions"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub episodes: usize,
    pub solved: usize,
    pub total_return: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub solved: usize,
    pub solve_rate: f64,
    pub mean_return: f64,
    /// Keyed by solution length.
    pub by_length: BTreeMap<usize, LengthStats>,
}

/// Runs `episodes` episodes, `parallel` at a time. Episode `i` plays the
/// level `sampler.sample_seeded(seed + i)`, so two calls with the same
/// seed see the same levels.
pub fn evaluate(
    policy: &mut dyn Policy,
    sampler: &LevelSampler,
    episodes: usize,
    seed: u64,
    parallel: usize,
) -> Result<EvalResult, TrainError> {
    if episodes == 0 {
        return Err(TrainError::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let parallel = parallel.clamp(1, episodes);
    let mut result = EvalResult::default();
    let mut total_return = 0.0f64;
    let mut next = 0usize;
    let mut running: Vec<Option<(EnvState, f64)>> = Vec::with_capacity(parallel);
    let start = |slot: usize, next: &mut usize, policy: &mut dyn Policy| -> Result<Option<(EnvState, f64)>, TrainError> {
        if *next >= episodes {
            return Ok(None);
        }
        let level = sampler.sample_seeded(seed.wrapping_add(*next as u64))?;
        *next += 1;
        let state = EnvState::new(Arc::new(level));
        policy.reset(slot, &state);
        Ok(Some((state, 0.0)))
    };
    for slot in 0..parallel {
        let s = start(slot, &mut next, policy)?;
        running.push(s);
    }
    loop {
        let slots: Vec<usize> = (0..parallel).filter(|&s| running[s].is_some()).collect();
        if slots.is_empty() {
            break;
        }
        let actions = {
            let states: Vec<&EnvState> = slots.iter().map(|&s| &running[s].as_ref().expect("active").0).collect();
            policy.act(&slots, &states)?
        };
        for (&slot, action) in slots.iter().zip(actions) {
            let (state, ret) = running[slot].as_mut().expect("active");
            let tr = state.advance(action)?;
            *ret += tr.reward as f64;
            if tr.done {
                let solved = tr.outcome == Outcome::GemCollected;
                let stats = result.by_length.entry(state.level().solution_length()).or_default();
                stats.episodes += 1;
                result.episodes += 1;
                if solved {
                    stats.solved += 1;
                    result.solved += 1;
                }
                stats.total_return += *ret;
                total_return += *ret;
                running[slot] = start(slot, &mut next, policy)?;
            }
        }
    }
    result.solve_rate = result.solved as f64 / result.episodes as f64;
    result.mean_return = total_return / result.episodes as f64;
    Ok(result)
}
