//! The Box-World agent: a small convolutional front end, coordinate
//! tagging, a relational (or residual-convolutional) middle, feature-wise
//! max pooling, an MLP, and linear policy and value heads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Observation;
use crate::relational::{extract_entities, push_dense, push_glorot, relational_stack, RelationalConfig, RelationalSlots};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamSet, Scalar, Tensor, TensorError, Var};

pub const NUM_ACTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("non-finite policy logits {0:?}")]
    NonFiniteLogits(Vec<f32>),
    #[error("parameters do not match the agent: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Relational,
    Control,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Relational => "relational",
            Variant::Control => "control",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relational" => Ok(Variant::Relational),
            "control" => Ok(Variant::Control),
            other => Err(format!("unknown variant {other:?} (relational|control)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub variant: Variant,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    /// Residual blocks in the control agent.
    pub control_blocks: usize,
    pub mlp_widths: Vec<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::Relational,
            conv_channels: vec![12, 24],
            conv_kernel: 2,
            heads: 2,
            head_dim: 64,
            blocks: 2,
            control_blocks: 3,
            mlp_widths: vec![256; 4],
        }
    }
}

impl AgentConfig {
    pub fn relational(&self) -> RelationalConfig {
        RelationalConfig {
            heads: self.heads,
            head_dim: self.head_dim,
            blocks: self.blocks,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::InvalidConfig(m));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad(format!("conv_channels must be non-empty and positive, got {:?}", self.conv_channels));
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be positive".into());
        }
        if self.mlp_widths.contains(&0) {
            return bad(format!("mlp_widths must be positive, got {:?}", self.mlp_widths));
        }
        match self.variant {
            Variant::Relational => self.relational().validate().map_err(AgentError::InvalidConfig),
            Variant::Control if self.control_blocks == 0 => bad("control_blocks must be positive".into()),
            Variant::Control => Ok(()),
        }
    }

    /// Side of the entity grid for a `size x size` observation.
    pub fn entity_side(&self, size: usize) -> Option<usize> {
        let shrink = self.conv_channels.len() * (self.conv_kernel - 1);
        size.checked_sub(shrink).filter(|&n| n > 0)
    }

    /// Entity width: last conv channel count plus two coordinates.
    pub fn entity_width(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) + 2
    }
}

#[derive(Debug, Clone)]
enum Middle {
    Relational(RelationalSlots),
    /// Two `(kernel, bias)` convolutions per residual block.
    Control(Vec<[(usize, usize); 2]>),
}

/// Parameter layout of an agent for one observation shape.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    size: usize,
    channels: usize,
    convs: Vec<(usize, usize)>,
    middle: Middle,
    mlp: Vec<(usize, usize)>,
    policy: (usize, usize),
    value: (usize, usize),
    shapes: Vec<(String, Vec<usize>)>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, 4]`.
    pub logits: Var,
    /// `[B, 1]`.
    pub value: Var,
    /// Attention weights `[B, N, N]`, block-major; empty for the control
    /// agent.
    pub attention: Vec<Var>,
    /// Entity matrix fed to the middle section, `[B, N, k]`.
    pub entities: Var,
}

impl Agent {
    /// Builds the layout and freshly initialised parameters. Deterministic
    /// in `seed`.
    pub fn init<T: Scalar>(
        config: &AgentConfig,
        size: usize,
        channels: usize,
        seed: u64,
    ) -> Result<(Agent, ParamSet<T>), AgentError> {
        config.validate()?;
        if config.entity_side(size).is_none() || channels == 0 {
            return Err(AgentError::InvalidConfig(format!(
                "{size}x{size}x{channels} observation is too small for {} convolutions of size {}",
                config.conv_channels.len(),
                config.conv_kernel
            )));
        }
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::new();
        let kk = config.conv_kernel;
        let mut convs = Vec::new();
        let mut c_in = channels;
        for (i, &c_out) in config.conv_channels.iter().enumerate() {
            let w = push_glorot(&mut p, format!("conv{i}.w"), &[kk, kk, c_in, c_out], &mut rng)?;
            let b = p.push(format!("conv{i}.b"), Tensor::zeros(&[c_out]))?;
            convs.push((w, b));
            c_in = c_out;
        }
        let k = config.entity_width();
        let middle = match config.variant {
            Variant::Relational => Middle::Relational(RelationalSlots::init(&mut p, "rel", k, config.relational(), &mut rng)?),
            Variant::Control => {
                let mut blocks = Vec::new();
                for i in 0..config.control_blocks {
                    let mut conv = |name: &str| -> Result<(usize, usize), TensorError> {
                        let w = push_glorot(&mut p, format!("ctl.block{i}.{name}.w"), &[3, 3, k, k], &mut rng)?;
                        let b = p.push(format!("ctl.block{i}.{name}.b"), Tensor::zeros(&[k]))?;
                        Ok((w, b))
                    };
                    blocks.push([conv("conv_a")?, conv("conv_b")?]);
                }
                Middle::Control(blocks)
            }
        };
        let mut mlp = Vec::new();
        let mut width = k;
        for (i, &w) in config.mlp_widths.iter().enumerate() {
            mlp.push(push_dense(&mut p, &format!("mlp.fc{i}"), width, w, &mut rng)?);
            width = w;
        }
        let policy = push_dense(&mut p, "policy", width, NUM_ACTIONS, &mut rng)?;
        let value = push_dense(&mut p, "value", width, 1, &mut rng)?;
        let shapes = p.iter().map(|(n, t)| (n.to_owned(), t.shape().to_vec())).collect();
        let agent = Agent {
            config: config.clone(),
            size,
            channels,
            convs,
            middle,
            mlp,
            policy,
            value,
            shapes,
        };
        Ok((agent, p))
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// `(size, channels)` of the observations this agent accepts.
    pub fn input_shape(&self) -> (usize, usize) {
        (self.size, self.channels)
    }

    /// Number of entities the middle section sees.
    pub fn num_entities(&self) -> usize {
        let n = self.config.entity_side(self.size).expect("validated");
        n * n
    }

    /// Fails unless `params` has exactly this agent's names and shapes, in
    /// order.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<(), AgentError> {
        if params.len() != self.shapes.len() {
            return Err(AgentError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in self.shapes.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(AgentError::ParamMismatch(format!(
                    "expected {name} {shape:?}, got {pn} {:?}",
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Stacks observations into a `[B, n, n, C]` tensor.
    pub fn batch_observations<T: Scalar>(&self, obs: &[&Observation]) -> Result<Tensor<T>, AgentError> {
        let mut data = Vec::with_capacity(obs.len() * self.size * self.size * self.channels);
        for o in obs {
            if o.size != self.size || o.channels != self.channels {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_observations",
                    detail: format!(
                        "observation {}x{}x{}, agent expects {}x{}x{}",
                        o.size, o.size, o.channels, self.size, self.size, self.channels
                    ),
                }
                .into());
            }
            data.extend(o.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(Tensor::new(&[obs.len(), self.size, self.size, self.channels], data)?)
    }

    /// Runs the network on `obs: [B, n, n, C]`.
    ///
    /// `permute` reorders the entities right after coordinate tagging; the
    /// relational agent's outputs must not depend on it.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        obs: Var,
        permute: Option<&[usize]>,
    ) -> Result<ForwardOutput, AgentError> {
        let s = g.shape(obs);
        if s.len() != 4 || s[1] != self.size || s[2] != self.size || s[3] != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "agent forward",
                detail: format!("got {s:?}, expected [B, {0}, {0}, {1}]", self.size, self.channels),
            }
            .into());
        }
        let batch = s[0];
        let mut x = obs;
        for &(w, b) in &self.convs {
            let (w, b) = (g.param(params, w), g.param(params, b));
            x = g.conv2d(x, w, b, 1, 0)?;
            x = g.relu(x);
        }
        let mut entities = extract_entities(g, x)?;
        if let Some(perm) = permute {
            entities = g.permute_rows(entities, perm)?;
        }
        let side = self.config.entity_side(self.size).expect("validated");
        let k = self.config.entity_width();
        let (features, attention) = match &self.middle {
            Middle::Relational(slots) => {
                let vars = slots.bind(g, params);
                relational_stack(g, entities, &vars)?
            }
            Middle::Control(blocks) => {
                let mut h = g.reshape(entities, &[batch, side, side, k])?;
                for block in blocks {
                    let [(wa, ba), (wb, bb)] = *block;
                    let (wa, ba, wb, bb) = (g.param(params, wa), g.param(params, ba), g.param(params, wb), g.param(params, bb));
                    let y = g.conv2d(h, wa, ba, 1, 1)?;
                    let y = g.relu(y);
                    let y = g.conv2d(y, wb, bb, 1, 1)?;
                    let sum = g.add(h, y)?;
                    h = g.relu(sum);
                }
                (g.reshape(h, &[batch, side * side, k])?, Vec::new())
            }
        };
        let mut h = g.max_pool_space(features)?;
        for &(w, b) in &self.mlp {
            let (w, b) = (g.param(params, w), g.param(params, b));
            h = g.linear(h, w, Some(b))?;
            h = g.relu(h);
        }
        let (pw, pb) = (g.param(params, self.policy.0), g.param(params, self.policy.1));
        let logits = g.linear(h, pw, Some(pb))?;
        let (vw, vb) = (g.param(params, self.value.0), g.param(params, self.value.1));
        let value = g.linear(h, vw, Some(vb))?;
        Ok(ForwardOutput {
            logits,
            value,
            attention,
            entities,
        })
    }
}

fn check_logits(logits: &[f32]) -> Result<(), AgentError> {
    if logits.len() != NUM_ACTIONS || logits.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::NonFiniteLogits(logits.to_vec()));
    }
    Ok(())
}

/// Softmax of `logits` in double precision.
pub fn action_probabilities(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Entropy of the policy in nats.
pub fn policy_entropy(logits: &[f32]) -> f64 {
    action_probabilities(logits)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Draws an action from `softmax(logits)`, or takes the first maximum when
/// `greedy`. Consumes exactly one draw from `rng` when sampling.
pub fn sample_action(logits: &[f32], rng: &mut Rng, greedy: bool) -> Result<usize, AgentError> {
    check_logits(logits)?;
    if greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let u = rng.next_f64();
    let mut acc = 0.0;
    let probs = action_probabilities(logits);
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left `acc` just below 1; fall back to the last likely action.
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(NUM_ACTIONS - 1))
}
