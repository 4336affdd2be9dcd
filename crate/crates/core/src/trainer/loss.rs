use serde::{Deserialize, Serialize};

use super::{TrainError, TrainerConfig, Trajectory};
use crate::agent::{Agent, NUM_ACTIONS};
use crate::tensor::{Graph, ParamSet, Scalar, Tensor, TensorError, Var};

/// `G_t = r_t + discount * (1 - done_t) * G_{t+1}`, seeded with
/// `G_T = bootstrap`.
pub fn discounted_returns(rewards: &[f32], dones: &[bool], bootstrap: f32, discount: f32) -> Vec<f32> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        let carry = if dones[t] { 0.0 } else { discount * next };
        next = rewards[t] + carry;
        out[t] = next;
    }
    out
}

/// Loss components, already divided by batch x unroll. `entropy` is the
/// mean per-step policy entropy (not weighted by its cost).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMetrics {
    pub loss: f64,
    pub pg_loss: f64,
    pub baseline_loss: f64,
    pub entropy: f64,
}

impl LossMetrics {
    fn add(&mut self, o: &LossMetrics) {
        self.loss += o.loss;
        self.pg_loss += o.pg_loss;
        self.baseline_loss += o.baseline_loss;
        self.entropy += o.entropy;
    }
}

/// Records the actor-critic loss for `trajs` on `g`:
///
/// `[-sum log pi(a) A + c_v sum (G - V)^2 - c_H sum H(pi)] / norm`
///
/// with `A = G - V` held constant. `norm` is batch x unroll of the whole
/// batch, so per-chunk losses add up to the batch loss.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    agent: &Agent,
    params: &ParamSet<T>,
    trajs: &[&Trajectory],
    cfg: &TrainerConfig,
    norm: f64,
) -> Result<(Var, LossMetrics), TrainError> {
    loss_graph_with_baseline(g, agent, params, trajs, cfg, norm, None)
}

/// As [`loss_graph`], but the advantage uses the given value estimates
/// (one per step) instead of the ones computed on `g`. With the values of
/// the current parameters the gradient is the same; with any fixed values
/// the recorded loss is an ordinary differentiable function of the
/// parameters, which is what a finite-difference check needs.
pub fn loss_graph_with_baseline<T: Scalar>(
    g: &mut Graph<T>,
    agent: &Agent,
    params: &ParamSet<T>,
    trajs: &[&Trajectory],
    cfg: &TrainerConfig,
    norm: f64,
    baseline: Option<&[T]>,
) -> Result<(Var, LossMetrics), TrainError> {
    let (size, channels) = agent.input_shape();
    let steps: usize = trajs.iter().map(|t| t.len()).sum();
    let mut obs = Vec::with_capacity(steps * size * size * channels);
    let mut returns = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    for t in trajs {
        obs.extend(t.obs.iter().map(|&v| T::from_f64_lossy(v as f64)));
        returns.extend(t.returns(cfg.discount as f32));
        actions.extend(t.actions.iter().map(|&a| a as usize));
    }
    let x = g.input(Tensor::new(&[steps, size, size, channels], obs)?);
    let out = agent.forward(g, params, x, None)?;
    let logp = g.log_softmax_rows(out.logits);
    let probs = g.softmax_rows(out.logits);

    let values = match baseline {
        Some(v) if v.len() != steps => {
            return Err(TensorError::ShapeMismatch {
                op: "loss",
                detail: format!("{} baseline values for {steps} steps", v.len()),
            }
            .into())
        }
        Some(v) => v.to_vec(),
        None => g.value(out.value).data().to_vec(),
    };
    let scale = T::from_f64_lossy(1.0 / norm);
    let mask = Tensor::from_fn(&[steps, NUM_ACTIONS], |i| {
        let (s, a) = (i / NUM_ACTIONS, i % NUM_ACTIONS);
        if a == actions[s] {
            let adv = T::from_f64_lossy(returns[s] as f64) - values[s];
            -adv * scale
        } else {
            T::zero()
        }
    });
    let mask = g.input(mask);
    let pg = g.mul(logp, mask)?;
    let pg = g.sum(pg);

    let target = g.input(Tensor::new(&[steps, 1], returns.iter().map(|&r| T::from_f64_lossy(r as f64)).collect())?);
    let diff = g.sub(target, out.value)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.sum(sq);
    let baseline = g.scale(sq, cfg.baseline_cost / norm);

    let plogp = g.mul(probs, logp)?;
    let neg_entropy = g.sum(plogp);
    let entropy_term = g.scale(neg_entropy, cfg.entropy_cost / norm);

    let partial = g.add(pg, baseline)?;
    let loss = g.add(partial, entropy_term)?;
    let metrics = LossMetrics {
        loss: g.value(loss).item().as_f64(),
        pg_loss: g.value(pg).item().as_f64(),
        baseline_loss: g.value(baseline).item().as_f64(),
        entropy: -g.value(neg_entropy).item().as_f64() / norm,
    };
    Ok((loss, metrics))
}

/// Gradient of the batch loss, accumulated over chunks of
/// `cfg.learner_chunk` trajectories in a fixed order.
pub fn compute_loss(
    agent: &Agent,
    params: &ParamSet<f32>,
    batch: &[Trajectory],
    cfg: &TrainerConfig,
) -> Result<(Vec<Tensor<f32>>, LossMetrics), TrainError> {
    let norm = batch.iter().map(|t| t.len()).sum::<usize>() as f64;
    let mut grads = params.zeros_like();
    let mut metrics = LossMetrics::default();
    let refs: Vec<&Trajectory> = batch.iter().collect();
    for chunk in refs.chunks(cfg.learner_chunk.max(1)) {
        let mut g = Graph::new();
        let (loss, m) = loss_graph(&mut g, agent, params, chunk, cfg, norm)?;
        let chunk_grads = g.backward(loss, params)?;
        for (acc, cg) in grads.iter_mut().zip(chunk_grads) {
            for (a, c) in acc.data_mut().iter_mut().zip(cg.data()) {
                *a += c;
            }
        }
        metrics.add(&m);
    }
    Ok((grads, metrics))
}
