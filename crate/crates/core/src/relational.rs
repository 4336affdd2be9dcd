//! Entity extraction and multi-head dot-product attention over entities.
//!
//! A feature map `[B, n, n, c]` becomes an entity matrix `[B, n*n, c + 2]`
//! by appending each cell's x and y coordinate. An attention block lets
//! every entity attend to every other one, runs the concatenated head
//! outputs through a shared two-layer MLP, adds the result back to the input
//! and layer-normalises. Blocks are stacked with one set of weights.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Cell, Content, EnvState, Object};
use crate::rng::Rng;
use crate::tensor::{glorot_uniform, Graph, ParamSet, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum RelationalError {
    #[error("cannot map {entities}x{entities} entities onto a {cells}x{cells} observation")]
    ResolutionMismatch { cells: usize, entities: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalConfig {
    pub heads: usize,
    /// Per-head query/key/value width.
    pub head_dim: usize,
    /// Number of times the shared block is applied.
    pub blocks: usize,
}

impl Default for RelationalConfig {
    fn default() -> Self {
        RelationalConfig {
            heads: 2,
            head_dim: 64,
            blocks: 2,
        }
    }
}

impl RelationalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0 || self.head_dim == 0 || self.blocks == 0 {
            return Err(format!("heads, head_dim and blocks must be positive, got {self:?}"));
        }
        Ok(())
    }
}

pub(crate) fn push_glorot<T: Scalar>(
    params: &mut ParamSet<T>,
    name: String,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<usize, TensorError> {
    params.push(name, glorot_uniform(shape, rng))
}

/// Weight and zero bias for a dense layer.
pub(crate) fn push_dense<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<(usize, usize), TensorError> {
    let w = push_glorot(params, format!("{prefix}.w"), &[fan_in, fan_out], rng)?;
    let b = params.push(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok((w, b))
}

/// Unit gain and zero bias for a layer norm.
pub(crate) fn push_norm<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    width: usize,
) -> Result<(usize, usize), TensorError> {
    let g = params.push(format!("{prefix}.gain"), Tensor::full(&[width], T::one()))?;
    let b = params.push(format!("{prefix}.bias"), Tensor::zeros(&[width]))?;
    Ok((g, b))
}

#[derive(Debug, Clone)]
pub struct HeadSlots {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub norm_q: (usize, usize),
    pub norm_k: (usize, usize),
    pub norm_v: (usize, usize),
}

/// Where the relational module's tensors live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct RelationalSlots {
    pub config: RelationalConfig,
    pub width: usize,
    pub heads: Vec<HeadSlots>,
    pub mlp: [(usize, usize); 2],
    pub norm_out: (usize, usize),
}

impl RelationalSlots {
    /// Appends freshly initialised parameters for entities of width `width`.
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        width: usize,
        config: RelationalConfig,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let d = config.head_dim;
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let p = format!("{prefix}.head{h}");
            heads.push(HeadSlots {
                wq: push_glorot(params, format!("{p}.wq"), &[width, d], rng)?,
                wk: push_glorot(params, format!("{p}.wk"), &[width, d], rng)?,
                wv: push_glorot(params, format!("{p}.wv"), &[width, d], rng)?,
                norm_q: push_norm(params, &format!("{p}.ln_q"), d)?,
                norm_k: push_norm(params, &format!("{p}.ln_k"), d)?,
                norm_v: push_norm(params, &format!("{p}.ln_v"), d)?,
            });
        }
        let mlp = [
            push_dense(params, &format!("{prefix}.mlp0"), config.heads * d, width, rng)?,
            push_dense(params, &format!("{prefix}.mlp1"), width, width, rng)?,
        ];
        let norm_out = push_norm(params, &format!("{prefix}.ln_out"), width)?;
        Ok(RelationalSlots {
            config,
            width,
            heads,
            mlp,
            norm_out,
        })
    }

    /// Puts every parameter on the tape once. Blocks reuse these nodes, so
    /// gradients from all blocks accumulate into the same tensors.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> RelationalVars {
        let mut p = |slot: usize| g.param(params, slot);
        let heads = self
            .heads
            .iter()
            .map(|h| HeadVars {
                wq: p(h.wq),
                wk: p(h.wk),
                wv: p(h.wv),
                norm_q: (p(h.norm_q.0), p(h.norm_q.1)),
                norm_k: (p(h.norm_k.0), p(h.norm_k.1)),
                norm_v: (p(h.norm_v.0), p(h.norm_v.1)),
            })
            .collect();
        let mlp = [
            (p(self.mlp[0].0), p(self.mlp[0].1)),
            (p(self.mlp[1].0), p(self.mlp[1].1)),
        ];
        let norm_out = (p(self.norm_out.0), p(self.norm_out.1));
        RelationalVars {
            config: self.config,
            heads,
            mlp,
            norm_out,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub norm_q: (Var, Var),
    pub norm_k: (Var, Var),
    pub norm_v: (Var, Var),
}

#[derive(Debug, Clone)]
pub struct RelationalVars {
    pub config: RelationalConfig,
    pub heads: Vec<HeadVars>,
    pub mlp: [(Var, Var); 2],
    pub norm_out: (Var, Var),
}

/// Evenly spaced values in `[-1, 1]`; a single point sits at 0.
pub fn coordinate_axis(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `[B, n, n, c] -> [B, n*n, c + 2]`; row `i*n + j` is cell `(i, j)`'s
/// features followed by `x_j` and `y_i`.
pub fn extract_entities<T: Scalar>(g: &mut Graph<T>, maps: Var) -> Result<Var, TensorError> {
    let (b, n, c) = match g.shape(maps) {
        [b, h, w, c] if h == w => (*b, *h, *c),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "extract_entities",
                detail: format!("expected square [B, n, n, c], got {s:?}"),
            })
        }
    };
    let axis = coordinate_axis(n);
    let coords = Tensor::from_fn(&[b, n * n, 2], |i| {
        let cell = (i / 2) % (n * n);
        let v = if i % 2 == 0 { axis[cell % n] } else { axis[cell / n] };
        T::from_f64_lossy(v)
    });
    let coords = g.input(coords);
    let flat = g.reshape(maps, &[b, n * n, c])?;
    g.concat_last(&[flat, coords])
}

/// One attention head over `e: [B, N, k]`. Returns the attended values
/// `[B, N, d]` and the attention weights `[B, N, N]`.
pub fn mhdpa_head<T: Scalar>(g: &mut Graph<T>, e: Var, head: &HeadVars) -> Result<(Var, Var), TensorError> {
    let project = |g: &mut Graph<T>, w: Var, (gain, bias): (Var, Var)| -> Result<Var, TensorError> {
        let x = g.linear(e, w, None)?;
        g.layer_norm(x, gain, bias)
    };
    let q = project(g, head.wq, head.norm_q)?;
    let k = project(g, head.wk, head.norm_k)?;
    let v = project(g, head.wv, head.norm_v)?;
    let d = *g.shape(q).last().expect("rank 3");
    let scores = g.bmm_scaled(q, k, true, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax_rows(scores);
    let attended = g.bmm(weights, v, false)?;
    Ok((attended, weights))
}

/// `LN(E + f(concat_h A_h))`, shape preserving. Also returns each head's
/// attention weights.
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    e: Var,
    vars: &RelationalVars,
) -> Result<(Var, Vec<Var>), TensorError> {
    let mut outs = Vec::with_capacity(vars.heads.len());
    let mut weights = Vec::with_capacity(vars.heads.len());
    for head in &vars.heads {
        let (a, w) = mhdpa_head(g, e, head)?;
        outs.push(a);
        weights.push(w);
    }
    let cat = g.concat_last(&outs)?;
    let hidden = g.linear(cat, vars.mlp[0].0, Some(vars.mlp[0].1))?;
    let hidden = g.relu(hidden);
    let update = g.linear(hidden, vars.mlp[1].0, Some(vars.mlp[1].1))?;
    let sum = g.add(e, update)?;
    let out = g.layer_norm(sum, vars.norm_out.0, vars.norm_out.1)?;
    Ok((out, weights))
}

/// Applies the shared block `config.blocks` times. Weights come back
/// block-major: `[block0 head0, block0 head1, ..., block1 head0, ...]`.
pub fn relational_stack<T: Scalar>(
    g: &mut Graph<T>,
    e: Var,
    vars: &RelationalVars,
) -> Result<(Var, Vec<Var>), TensorError> {
    let mut x = e;
    let mut all = Vec::with_capacity(vars.config.blocks * vars.heads.len());
    for _ in 0..vars.config.blocks {
        let (y, w) = attention_block(g, x, vars)?;
        all.extend(w);
        x = y;
    }
    Ok((x, all))
}

/// Attention weights of one head in one block, for a single observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub block: usize,
    pub head: usize,
    /// `N x N`; row `i` is how entity `i` distributes its attention.
    pub weights: Tensor<f32>,
}

/// Copies the weights of batch element `index` out of the tape.
pub fn collect_traces<T: Scalar>(g: &Graph<T>, weights: &[Var], heads: usize, index: usize) -> Vec<AttentionTrace> {
    weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let t = g.value(w);
            let n = t.shape()[1];
            let data = &t.data()[index * n * n..(index + 1) * n * n];
            AttentionTrace {
                block: i / heads,
                head: i % heads,
                weights: Tensor::new(&[n, n], data.iter().map(|v| v.as_f64() as f32).collect())
                    .expect("square slice"),
            }
        })
        .collect()
}

/// One entry of an attention probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub block: usize,
    pub head: usize,
    pub source_cell: String,
    pub source_object: String,
    pub target_cell: String,
    pub target_object: String,
    pub weight: f64,
}

fn object_label(object: &Object) -> Option<String> {
    match object {
        Object::LooseKey { color } => Some(format!("key{}", color.0)),
        Object::Lock { color, .. } => Some(format!("lock{}", color.0)),
        Object::BoxContent {
            content: Content::Key(color),
            ..
        } => Some(format!("key{}", color.0)),
        Object::BoxContent {
            content: Content::Gem, ..
        } => Some("gem".into()),
        Object::AgentStart => None,
    }
}

/// Labels of the objects currently visible in `state`, keyed by entity.
/// Observation cell `(r, c)` maps to entity `(r - off, c - off)` with
/// `off = (cells - entities) / 2`, clamped onto the entity grid.
fn entity_labels(state: &EnvState, entities: usize) -> Result<Vec<Vec<(Cell, String)>>, RelationalError> {
    let cells = state.level().room_size();
    if entities == 0 || entities > cells || !(cells - entities).is_multiple_of(2) {
        return Err(RelationalError::ResolutionMismatch { cells, entities });
    }
    let off = (cells - entities) / 2;
    let to_entity = |cell: Cell| {
        let r = (cell.row as usize).saturating_sub(off).min(entities - 1);
        let c = (cell.col as usize).saturating_sub(off).min(entities - 1);
        r * entities + c
    };
    let mut labels = vec![Vec::new(); entities * entities];
    for (i, p) in state.level().placements().iter().enumerate() {
        if state.is_removed(i) {
            continue;
        }
        if let Some(label) = object_label(&p.object) {
            labels[to_entity(p.cell)].push((p.cell, label));
        }
    }
    let agent = state.agent_pos();
    labels[to_entity(agent)].push((agent, "agent".into()));
    if let Some(k) = state.inventory() {
        let slot = Cell::new(0, 0);
        labels[to_entity(slot)].push((slot, format!("held_key{}", k.0)));
    }
    Ok(labels)
}

/// Restricts a trace to entities that hold an object in `state` and returns
/// one row per (source, target) pair of such entities.
pub fn probe_attention(trace: &AttentionTrace, state: &EnvState) -> Result<Vec<ProbeRow>, RelationalError> {
    let n_ent = trace.weights.shape()[0];
    let side = (n_ent as f64).sqrt().round() as usize;
    if side * side != n_ent {
        return Err(RelationalError::ResolutionMismatch {
            cells: state.level().room_size(),
            entities: side,
        });
    }
    let labels = entity_labels(state, side)?;
    let join = |items: &[(Cell, String)]| {
        let cells: Vec<String> = items.iter().map(|(c, _)| c.to_string()).collect();
        let names: Vec<&str> = items.iter().map(|(_, l)| l.as_str()).collect();
        (cells.join("+"), names.join("+"))
    };
    let occupied: Vec<usize> = (0..n_ent).filter(|&i| !labels[i].is_empty()).collect();
    let mut rows = Vec::with_capacity(occupied.len() * occupied.len());
    for &s in &occupied {
        let (source_cell, source_object) = join(&labels[s]);
        for &t in &occupied {
            let (target_cell, target_object) = join(&labels[t]);
            rows.push(ProbeRow {
                block: trace.block,
                head: trace.head,
                source_cell: source_cell.clone(),
                source_object: source_object.clone(),
                target_cell,
                target_object,
                weight: trace.weights.data()[s * n_ent + t] as f64,
            });
        }
    }
    Ok(rows)
}

pub const PROBE_COLUMNS: [&str; 7] = [
    "block",
    "head",
    "source_cell",
    "source_object",
    "target_cell",
    "target_object",
    "weight",
];

pub fn write_probe_csv<W: Write>(rows: &[ProbeRow], out: W) -> Result<(), RelationalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(PROBE_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
