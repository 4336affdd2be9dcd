//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! `BOXWORLD_SKIP_TRAINING=1` skips the training criterion (reported as
//! SKIP, not PASS).

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use boxworld::agent::{Agent, AgentConfig, AgentError, Variant};
use boxworld::env::{
    generate_level, make_split, oracle_solve, Action, BranchingMode, Cell, Color, Content, EnvState, IntRange, Level,
    LevelConfig, LevelSampler, Object, Outcome, SplitSpec,
};
use boxworld::harness::{self, ExperimentSpec};
use boxworld::relational::{attention_block, relational_stack, RelationalConfig, RelationalSlots};
use boxworld::rng::Rng;
use boxworld::tensor::{
    grad_check_filtered, read_checkpoint, write_checkpoint, Graph, GradCheckReport, ParamSet, Tensor, TensorError,
    Var,
};
use boxworld::trainer::{
    evaluate, loss_graph_with_baseline, AgentPolicy, StopReason, TrainError, Trainer, TrainerConfig, Trajectory,
};

const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// 1. Gradients

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.next_f64() * 2.0 - 1.0)
}

fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = 0.2 + rng.next_f64();
        if rng.next_u64() & 1 == 0 {
            m
        } else {
            -m
        }
    })
}

fn params_of(entries: Vec<Tensor<f64>>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (i, t) in entries.into_iter().enumerate() {
        p.push(format!("p{i}"), t).unwrap();
    }
    p
}

type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

fn primitive_cases(rng: &mut Rng) -> Vec<(&'static str, ParamSet<f64>, Op)> {
    let mut cases: Vec<(&'static str, ParamSet<f64>, Op)> = Vec::new();
    let mut add = |name, p, op: Op| cases.push((name, p, op));
    add("matmul", params_of(vec![rand(&[3, 4], rng), rand(&[4, 2], rng)]), Box::new(|g, v| g.matmul(v[0], v[1])));
    add("bmm", params_of(vec![rand(&[2, 3, 4], rng), rand(&[2, 4, 3], rng)]), Box::new(|g, v| g.bmm(v[0], v[1], false)));
    add(
        "bmm_scaled",
        params_of(vec![rand(&[2, 3, 4], rng), rand(&[2, 5, 4], rng)]),
        Box::new(|g, v| g.bmm_scaled(v[0], v[1], true, 0.5)),
    );
    add(
        "linear",
        params_of(vec![rand(&[2, 3, 4], rng), rand(&[4, 5], rng), rand(&[5], rng)]),
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
    );
    add(
        "conv2d",
        params_of(vec![rand(&[2, 4, 4, 3], rng), rand(&[2, 2, 3, 2], rng), rand(&[2], rng)]),
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0)),
    );
    add(
        "conv2d_pad",
        params_of(vec![rand(&[1, 4, 3, 2], rng), rand(&[3, 3, 2, 2], rng), rand(&[2], rng)]),
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
    );
    add("relu", params_of(vec![away_from_zero(&[3, 4], rng)]), Box::new(|g, v| Ok(g.relu(v[0]))));
    add("softmax_rows", params_of(vec![rand(&[3, 4], rng)]), Box::new(|g, v| Ok(g.softmax_rows(v[0]))));
    add("log_softmax_rows", params_of(vec![rand(&[3, 4], rng)]), Box::new(|g, v| Ok(g.log_softmax_rows(v[0]))));
    add(
        "layer_norm",
        params_of(vec![rand(&[3, 5], rng), rand(&[5], rng), rand(&[5], rng)]),
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
    );
    add("max_pool_space", params_of(vec![rand(&[2, 6, 3], rng)]), Box::new(|g, v| g.max_pool_space(v[0])));
    add(
        "concat_last",
        params_of(vec![rand(&[2, 3], rng), rand(&[2, 4], rng)]),
        Box::new(|g, v| g.concat_last(&[v[0], v[1]])),
    );
    add(
        "permute_rows",
        params_of(vec![rand(&[1, 4, 3], rng)]),
        Box::new(|g, v| g.permute_rows(v[0], &[2, 0, 3, 1])),
    );
    add(
        "add_sub_mul",
        params_of(vec![rand(&[3, 3], rng), rand(&[3, 3], rng)]),
        Box::new(|g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            g.mul(s, d)
        }),
    );
    add("scale", params_of(vec![rand(&[4], rng)]), Box::new(|g, v| Ok(g.scale(v[0], 2.5))));
    add("reshape", params_of(vec![rand(&[2, 6], rng)]), Box::new(|g, v| g.reshape(v[0], &[3, 4])));
    add(
        "sum",
        params_of(vec![rand(&[2, 3], rng)]),
        Box::new(|g, v| {
            let s = g.sum(v[0]);
            g.mul(s, s)
        }),
    );
    cases
}

fn tensor_err(e: AgentError) -> TensorError {
    match e {
        AgentError::Tensor(t) => t,
        other => TensorError::Checkpoint(other.to_string()),
    }
}

fn key_bias(name: &str) -> bool {
    name.ends_with("ln_k.bias")
}

/// Grad check that also confirms the excluded key-norm bias has an exactly
/// zero analytic gradient (softmax is shift invariant).
fn check_with_key_bias(
    f: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
    p: &ParamSet<f64>,
) -> Result<GradCheckReport, String> {
    let report = grad_check_filtered(&f, p, FD_EPS, |n| !key_bias(n)).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let l = f(&mut g, p).map_err(|e| e.to_string())?;
    let grads = g.backward(l, p).map_err(|e| e.to_string())?;
    for (name, grad) in p.names().iter().zip(&grads) {
        if key_bias(name) && grad.data().iter().any(|v| v.abs() >= 1e-12) {
            return Err(format!("{name} has a non-zero gradient"));
        }
    }
    Ok(report)
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut report: Option<(String, GradCheckReport)> = None;
    let mut record = |what: String, r: GradCheckReport| {
        let replace = report.as_ref().is_none_or(|(_, cur)| r.max_error > cur.max_error);
        if replace {
            report = Some((what, r));
        }
    };
    let cases = primitive_cases(&mut rng);
    let n_prims = cases.len();
    for (name, p, op) in cases {
        let proj_seed = rng.next_u64();
        let r = grad_check_filtered(
            |g, p| {
                let vars: Vec<Var> = (0..p.len()).map(|i| g.param(p, i)).collect();
                let y = op(g, &vars)?;
                let w = g.input(rand(g.shape(y), &mut Rng::new(proj_seed)));
                let prod = g.mul(y, w)?;
                Ok(g.sum(prod))
            },
            &p,
            FD_EPS,
            |_| true,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        record(name.to_string(), r);
    }

    // Attention block, two stacked blocks with shared weights.
    let cfg = RelationalConfig {
        heads: 2,
        head_dim: 3,
        blocks: 2,
    };
    let mut p = ParamSet::<f64>::new();
    let slots = RelationalSlots::init(&mut p, "rel", 4, cfg, &mut Rng::new(2)).map_err(|e| e.to_string())?;
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += (rng.next_f64() - 0.5) * 0.2;
        }
    }
    let x = rand(&[2, 5, 4], &mut rng);
    let proj = rand(&[2, 5, 4], &mut rng);
    let r = check_with_key_bias(
        |g, p| {
            let vars = slots.bind(g, p);
            let e = g.input(x.clone());
            let (y, _) = relational_stack(g, e, &vars)?;
            let w = g.input(proj.clone());
            let prod = g.mul(y, w)?;
            Ok(g.sum(prod))
        },
        &p,
    )?;
    record("attention block".into(), r);

    // Both agents, and the full actor-critic loss on the relational one.
    for variant in [Variant::Control, Variant::Relational] {
        let cfg = AgentConfig {
            variant,
            conv_channels: vec![3, 4],
            heads: 2,
            head_dim: 3,
            blocks: 1,
            control_blocks: 1,
            mlp_widths: vec![6; 4],
            ..AgentConfig::default()
        };
        let (agent, mut p) = Agent::init::<f64>(&cfg, 6, 3, 3).map_err(|e| e.to_string())?;
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += (rng.next_f64() - 0.5) * 0.1;
            }
        }
        let obs = Tensor::from_fn(&[2, 6, 6, 3], |_| rng.next_f64());
        let proj = rand(&[2, 5], &mut rng);
        let r = check_with_key_bias(
            |g, p| {
                let x = g.input(obs.clone());
                let out = agent.forward(g, p, x, None).map_err(tensor_err)?;
                let both = g.concat_last(&[out.logits, out.value])?;
                let w = g.input(proj.clone());
                let prod = g.mul(both, w)?;
                Ok(g.sum(prod))
            },
            &p,
        )?;
        record(format!("{variant} agent"), r);

        if variant == Variant::Relational {
            let traj = |rewards: Vec<f32>, dones: Vec<bool>, rng: &mut Rng| Trajectory {
                actor_id: 0,
                seq: 0,
                obs: (0..3 * 108).map(|_| rng.next_f64() as f32).collect(),
                actions: (0..3).map(|_| rng.index(4) as u8).collect(),
                rewards,
                dones,
                behavior_logits: vec![0.0; 12],
                values: vec![0.0; 3],
                bootstrap_value: 0.3,
                episodes: Vec::new(),
            };
            let batch = [
                traj(vec![0.0, 1.0, 0.0], vec![false, false, false], &mut rng),
                traj(vec![0.0, -1.0, 1.0], vec![false, true, false], &mut rng),
            ];
            let refs: Vec<&Trajectory> = batch.iter().collect();
            let tcfg = TrainerConfig {
                entropy_cost: 0.05,
                ..TrainerConfig::default()
            };
            let values: Vec<f64> = (0..6).map(|_| rng.next_f64() - 0.5).collect();
            let r = check_with_key_bias(
                |g, p| {
                    loss_graph_with_baseline(g, &agent, p, &refs, &tcfg, 6.0, Some(&values))
                        .map(|(l, _)| l)
                        .map_err(|e| match e {
                            TrainError::Tensor(t) => t,
                            other => TensorError::Checkpoint(other.to_string()),
                        })
                },
                &p,
            )?;
            record("actor-critic loss".into(), r);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (what, r) = report.expect("at least one check");
    let detail = format!(
        "{n_prims} primitives + block + 2 agents + loss; worst {:.2e} ({what}, {}[{}]); {secs:.1}s",
        r.max_error, r.param, r.index
    );
    ensure(r.max_error < GRAD_TOL, format!("{detail}: above {GRAD_TOL:e}"))?;
    ensure(secs < 120.0, format!("{detail}: slower than 2 minutes"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 2. Attention invariants

fn criterion_attention() -> Check {
    let mut rng = Rng::new(7);
    let draws = 100;
    let (mut worst_row, mut worst_perm) = (0.0f64, 0.0f64);
    for trial in 0..draws {
        let cfg = RelationalConfig {
            heads: 1 + trial % 3,
            head_dim: 2 + trial % 6,
            blocks: 1,
        };
        let width = 3 + trial % 4;
        let n = 2 + rng.index(10);
        let mut p = ParamSet::<f64>::new();
        let slots = RelationalSlots::init(&mut p, "rel", width, cfg, &mut Rng::new(trial as u64))
            .map_err(|e| e.to_string())?;
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.next_f64() - 0.5;
            }
        }
        let mut g = Graph::new();
        let vars = slots.bind(&mut g, &p);
        let x = Tensor::from_fn(&[2, n, width], |_| (rng.next_f64() - 0.5) * 6.0);
        let e = g.input(x);
        let (y, weights) = attention_block(&mut g, e, &vars).map_err(|e| e.to_string())?;
        for w in &weights {
            for row in g.value(*w).data().chunks(n) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pe = g.permute_rows(e, &perm).map_err(|e| e.to_string())?;
        let (py, _) = attention_block(&mut g, pe, &vars).map_err(|e| e.to_string())?;
        // Oracle: permute the unpermuted output row by row.
        let out = g.value(y).data().to_vec();
        let pout = g.value(py).data();
        for b in 0..2 {
            for (i, &src) in perm.iter().enumerate() {
                for k in 0..width {
                    let expect = out[(b * n + src) * width + k];
                    let got = pout[(b * n + i) * width + k];
                    worst_perm = worst_perm.max((expect - got).abs());
                }
            }
        }
    }
    let detail = format!("{draws} draws; max |row sum - 1| {worst_row:.1e}; max equivariance gap {worst_perm:.1e}");
    ensure(worst_row < 1e-6 && worst_perm < 1e-5, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 3. Environment oracle

/// Shortest walk to `goal` over free floor; every other object blocks.
fn walk_to(state: &EnvState, goal: Cell) -> Option<Vec<Action>> {
    let level = state.level();
    let n = level.room_size();
    let free = |c: Cell| {
        c != Cell::new(0, 0)
            && level
                .object_index_at(c)
                .is_none_or(|i| state.is_removed(i))
    };
    let start = state.agent_pos();
    let mut prev: BTreeMap<Cell, (Cell, Action)> = BTreeMap::new();
    let mut queue = VecDeque::from([start]);
    while let Some(cur) = queue.pop_front() {
        for a in Action::ALL {
            let (dr, dc) = match a {
                Action::Up => (-1, 0),
                Action::Down => (1, 0),
                Action::Left => (0, -1),
                Action::Right => (0, 1),
            };
            let (r, c) = (cur.row as i32 + dr, cur.col as i32 + dc);
            if r < 0 || c < 0 || r >= n as i32 || c >= n as i32 {
                continue;
            }
            let next = Cell::new(r as u8, c as u8);
            if next == start || prev.contains_key(&next) {
                continue;
            }
            if next == goal {
                let mut path = vec![a];
                let mut at = cur;
                while at != start {
                    let (p, pa) = prev[&at];
                    path.push(pa);
                    at = p;
                }
                path.reverse();
                return Some(path);
            }
            if free(next) {
                prev.insert(next, (cur, a));
                queue.push_back(next);
            }
        }
    }
    None
}

/// Follows the oracle plan until the agent holds `key`, then walks into the
/// distractor lock at `lock_cell`. Returns the final transition, or `None`
/// if the lock cannot be reached by plain walking.
fn open_distractor(level: &Arc<Level>, key: Color, lock_cell: Cell) -> Option<(f32, bool, Outcome)> {
    let mut state = EnvState::new(level.clone());
    let plan = oracle_solve(level)?;
    let mut steps = plan.into_iter();
    while state.inventory() != Some(key) {
        let a = steps.next()?;
        state.advance(a).ok()?;
    }
    let path = walk_to(&state, lock_cell)?;
    let mut last = None;
    for a in path {
        let t = state.advance(a).ok()?;
        last = Some((t.reward, t.done, t.outcome));
        if t.done {
            break;
        }
    }
    last
}

fn criterion_env_oracle() -> Check {
    let start = Instant::now();
    let cfg = LevelConfig::default();
    let (mut distractors_tried, mut distractors_opened, mut unreachable) = (0, 0, 0);
    for seed in 0..1000u64 {
        let level = Arc::new(generate_level(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?);
        let plan = oracle_solve(&level).ok_or(format!("seed {seed}: oracle found no solution"))?;
        let mut state = EnvState::new(level.clone());
        let mut ret = 0.0;
        for a in plan {
            ret += state.advance(a).map_err(|e| e.to_string())?.reward;
        }
        let optimal = level.solution_length() as f32 + 10.0;
        ensure(
            state.outcome() == Outcome::GemCollected && ret == optimal,
            format!("seed {seed}: return {ret}, expected {optimal}"),
        )?;

        let graph = level.graph();
        for p in level.placements() {
            let Object::Lock { color, box_id } = p.object else {
                continue;
            };
            if graph.is_solution_box(box_id) {
                continue;
            }
            distractors_tried += 1;
            match open_distractor(&level, color, p.cell) {
                Some((reward, done, outcome)) => {
                    ensure(
                        reward == -1.0 && done && outcome == Outcome::DistractorOpened,
                        format!("seed {seed}: distractor box {box_id} gave {reward}, done {done}, {outcome:?}"),
                    )?;
                    distractors_opened += 1;
                }
                None => unreachable += 1,
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "1000 levels solved at optimal return; {distractors_opened}/{distractors_tried} distractor boxes opened (all -1, terminal; {unreachable} not reachable by plain walking); {secs:.1}s"
    );
    ensure(distractors_opened > 0, format!("{detail}: no distractor box was opened"))?;
    ensure(secs < 60.0, format!("{detail}: slower than 1 minute"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 4. Random-policy calibration

fn criterion_random_baseline() -> Check {
    let start = Instant::now();
    let rows = harness::random_baseline(&ExperimentSpec::default(), 10_000, 2024, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let rate = |len: usize| rows.iter().find(|r| r.solution_length == len).map(|r| r.solve_rate).unwrap();
    let (r1, r4) = (rate(1), rate(4));
    let detail = format!(
        "length 1: {:.2}%, length 4: {:.2}% (10000 episodes each); {secs:.1}s",
        r1 * 100.0,
        r4 * 100.0
    );
    ensure((0.005..=0.08).contains(&r1), format!("{detail}: length 1 outside [0.5%, 8%]"))?;
    ensure(r4 < 0.002, format!("{detail}: length 4 not below 0.2%"))?;
    ensure(secs < 300.0, format!("{detail}: slower than 5 minutes"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 5. Determinism

fn checkpoint_bytes(p: &ParamSet<f32>) -> Vec<u8> {
    let mut v = Vec::new();
    write_checkpoint(p, &mut v).unwrap();
    v
}

fn criterion_determinism() -> Check {
    let cfg = LevelConfig::default();
    for seed in 0..200u64 {
        let a = generate_level(&cfg, seed).unwrap().to_json().unwrap();
        let b = generate_level(&cfg, seed).unwrap().to_json().unwrap();
        ensure(a == b, format!("level {seed} differs between runs"))?;
    }

    let mut spec = ExperimentSpec::default();
    spec.env.solution_length = IntRange::exactly(1);
    spec.env.num_distractors = IntRange::new(0, 1);
    spec.agent = AgentConfig {
        heads: 2,
        head_dim: 8,
        blocks: 1,
        mlp_widths: vec![32; 4],
        ..AgentConfig::default()
    };
    spec.trainer = TrainerConfig {
        batch_size: 8,
        unroll_length: 10,
        total_env_steps: 800,
        eval_interval: 0,
        learning_rate: 1e-3,
        ..TrainerConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let report = harness::train(&spec, 5, &out, false, false).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(out.join("params.ckpt")).map_err(|e| e.to_string())?;
        runs.push((report.consumed, report.metrics.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>(), ckpt));
    }
    ensure(runs[0] == runs[1], "synchronous training runs differ")?;

    // Trajectories from two fresh actors with the same seed and snapshot.
    let trainer = Trainer::new(spec.setup(5), None).map_err(|e| e.to_string())?;
    let sampler = trainer.train_sampler().clone();
    let mut actors: Vec<_> = (0..2)
        .map(|_| boxworld::trainer::Actor::new(0, trainer.agent().clone(), sampler.clone(), 4, 30, 9).unwrap())
        .collect();
    for _ in 0..3 {
        let a = actors[0].unroll(trainer.params()).map_err(|e| e.to_string())?;
        let b = actors[1].unroll(trainer.params()).map_err(|e| e.to_string())?;
        ensure(a == b, "trajectories differ")?;
    }

    let bytes = &runs[0].2;
    let loaded: ParamSet<f32> = read_checkpoint(bytes.as_slice()).map_err(|e| e.to_string())?;
    ensure(&checkpoint_bytes(&loaded) == bytes, "checkpoint re-encodes differently")?;
    let (_, fresh) = Agent::init::<f32>(&spec.agent, 12, 3, 1).map_err(|e| e.to_string())?;
    let back: ParamSet<f32> = read_checkpoint(checkpoint_bytes(&fresh).as_slice()).map_err(|e| e.to_string())?;
    let bit_exact = fresh
        .tensors()
        .iter()
        .zip(back.tensors())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(bit_exact && fresh.names() == back.names(), "checkpoint round trip is not bit-exact")?;
    Ok(format!(
        "200 levels, 2 training runs ({} trajectories, {} checkpoint bytes), 3 actor unrolls identical; round trip bit-exact",
        runs[0].0.len(),
        bytes.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Split correctness

fn criterion_split() -> Check {
    let cfg = LevelConfig::default();
    let pairs = vec![[1u8, 2], [5, 6], [11, 12]];
    let withheld: Vec<(Color, Color)> = pairs.iter().map(|p| (Color(p[0]), Color(p[1]))).collect();
    let (train, test) = make_split(&cfg, &SplitSpec::WithheldPairs { pairs }).map_err(|e| e.to_string())?;
    let on_path = |level: &Level| {
        // Independent scan: consecutive solution boxes, lock colour -> key inside.
        level.graph().solution_path.iter().any(|b| match b.content {
            Content::Key(k) => withheld.contains(&(b.lock, k)),
            Content::Gem => false,
        })
    };
    let mut rng = Rng::new(31);
    let mut hits = 0;
    for _ in 0..10_000 {
        if on_path(&train.sample(&mut rng).map_err(|e| e.to_string())?) {
            hits += 1;
        }
    }
    let mut misses = 0;
    for _ in 0..1000 {
        if !on_path(&test.sample(&mut rng).map_err(|e| e.to_string())?) {
            misses += 1;
        }
    }
    let detail = format!("10000 train levels: {hits} with a withheld pair; 1000 test levels: {misses} without one");
    ensure(hits == 0 && misses == 0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. Training smoke test

fn criterion_training() -> Check {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let spec = ExperimentSpec::load(path.as_ref()).map_err(|e| e.to_string())?;
    ensure(spec.agent.variant == Variant::Relational, "smoke spec must use the relational agent")?;
    ensure(
        spec.env.solution_length == IntRange::exactly(1)
            && spec.env.num_distractors == IntRange::new(0, 1)
            && spec.env.room_size == 12,
        "smoke spec must use length-1 levels with 0-1 distractors in a 12x12 room",
    )?;
    let mut setup = spec.setup(spec.seeds[0]);
    setup.trainer.total_env_steps = setup.trainer.total_env_steps.min(2_000_000);
    setup.trainer.max_cpu_minutes = Some(setup.trainer.max_cpu_minutes.unwrap_or(60.0).min(60.0));
    setup.trainer.target_solve_rate = Some(0.8);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(setup, Some(dir.path().to_owned())).map_err(|e| e.to_string())?;
    let report = trainer.run().map_err(|e| e.to_string())?;
    // Confirm on levels the periodic evaluation never saw.
    let agent = trainer.agent().clone();
    let mut policy = AgentPolicy::new(&agent, trainer.params(), true, 0);
    let sampler: &LevelSampler = trainer.train_sampler();
    let confirm = evaluate(&mut policy, sampler, 1000, 0xacce_0000, 32).map_err(|e| e.to_string())?;
    let last = report.evals.last().map_or(0.0, |e| e.solve_rate);
    let detail = format!(
        "stopped by {:?} after {} env steps, {:.1} CPU min; periodic greedy solve {:.1}%, held-out greedy solve {:.1}% (1000 levels)",
        report.stop,
        report.state.env_steps,
        report.state.cpu_seconds / 60.0,
        last * 100.0,
        confirm.solve_rate * 100.0
    );
    ensure(
        report.stop == StopReason::TargetReached && confirm.solve_rate >= 0.8,
        format!("{detail}: 80% not reached within budget"),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. Backward branching

fn criterion_backward() -> Check {
    let cfg = LevelConfig {
        branching: BranchingMode::Backward,
        ..LevelConfig::default()
    };
    let mut with_distractors = 0;
    for seed in 0..1000u64 {
        let level = generate_level(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        let mut locks: BTreeMap<Color, usize> = BTreeMap::new();
        let mut keys = Vec::new();
        for p in level.placements() {
            match p.object {
                Object::Lock { color, .. } => *locks.entry(color).or_default() += 1,
                Object::LooseKey { color } => keys.push(color),
                Object::BoxContent {
                    content: Content::Key(color),
                    ..
                } => keys.push(color),
                _ => {}
            }
        }
        for k in &keys {
            let n = locks.get(k).copied().unwrap_or(0);
            ensure(n <= 1, format!("seed {seed}: key {} opens {n} boxes", k.0))?;
        }
        if level.graph().num_boxes() > level.solution_length() {
            with_distractors += 1;
        }
        ensure(oracle_solve(&level).is_some(), format!("seed {seed}: not solvable"))?;
    }
    Ok(format!(
        "1000 levels ({with_distractors} with distractors): every key matches at most one lock; all oracle-solvable"
    ))
}

fn main() {
    let skip_training = std::env::var("BOXWORLD_SKIP_TRAINING").is_ok_and(|v| v == "1");
    let criteria: Vec<(&str, fn() -> Check)> = vec![
        ("1 gradient suite", criterion_gradients),
        ("2 attention invariants", criterion_attention),
        ("3 environment oracle", criterion_env_oracle),
        ("4 random-policy calibration", criterion_random_baseline),
        ("5 determinism", criterion_determinism),
        ("6 split correctness", criterion_split),
        ("7 training smoke test", criterion_training),
        ("8 backward branching", criterion_backward),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if skip_training && name.starts_with('7') {
            println!("SKIP criterion {name}: BOXWORLD_SKIP_TRAINING=1");
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
