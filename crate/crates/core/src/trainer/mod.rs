//! Actor-critic training: actors unroll fixed-length trajectories with a
//! parameter snapshot, a single learner consumes batches of them and applies
//! RMSprop.

mod eval;
mod loss;
mod rollout;

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use eval::{evaluate, AgentPolicy, EvalResult, LengthStats, OraclePolicy, Policy, RandomPolicy};
pub use loss::{compute_loss, discounted_returns, loss_graph, loss_graph_with_baseline, LossMetrics};
pub use rollout::{Actor, EpisodeSummary, Trajectory};

use crate::agent::{Agent, AgentConfig, AgentError};
use crate::env::{make_split, EnvError, LevelConfig, LevelSampler, SplitSpec};
use crate::rng::Rng;
use crate::tensor::{
    clip_global_norm, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ParamSet, RmsProp,
    RmsPropConfig, Tensor, TensorError,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const PARAMS_FILE: &str = "params.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const STATE_FILE: &str = "train_state.json";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

pub const METRICS_COLUMNS: [&str; 9] = [
    "wall_time_s",
    "env_steps",
    "episodes",
    "solve_rate",
    "mean_return",
    "loss",
    "pg_loss",
    "baseline_loss",
    "entropy",
];
pub const EVAL_COLUMNS: [&str; 5] = ["wall_time_s", "env_steps", "episodes", "solve_rate", "mean_return"];

/// Training-episode window behind the logged solve rate and mean return.
const EPISODE_WINDOW: usize = 200;
/// Base of the fixed level seeds used by periodic evaluation.
const EVAL_SEED: u64 = 0x00e7_a100;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value after {env_steps} env steps ({detail}); last good parameters in {last_good:?}")]
    NonFinite {
        env_steps: u64,
        detail: String,
        last_good: Option<PathBuf>,
    },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("actor thread panicked")]
    ActorPanicked,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One actor stepping `batch_size` environments on the learner thread.
    /// Bit-reproducible.
    #[default]
    Sync,
    /// `num_actors` threads feeding a bounded queue.
    Async,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            other => Err(format!("unknown mode {other:?} (expected sync or async)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub discount: f64,
    pub unroll_length: usize,
    pub batch_size: usize,
    pub entropy_cost: f64,
    pub baseline_cost: f64,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub rms_momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub mode: Mode,
    pub num_actors: usize,
    pub envs_per_actor: usize,
    /// Trajectories the queue holds before actors block.
    pub queue_capacity: usize,
    pub total_env_steps: u64,
    pub max_cpu_minutes: Option<f64>,
    /// Stop once a periodic greedy evaluation reaches this solve rate.
    pub target_solve_rate: Option<f64>,
    /// Env steps between greedy evaluations; 0 disables them.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Learner steps between metrics rows.
    pub log_interval: u64,
    /// Learner steps between checkpoints; the final state is always saved.
    pub checkpoint_interval: u64,
    /// Trajectories per forward/backward pass in the learner.
    pub learner_chunk: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            discount: 0.99,
            unroll_length: 40,
            batch_size: 32,
            entropy_cost: 0.005,
            baseline_cost: 0.5,
            learning_rate: 2e-4,
            rms_decay: 0.99,
            rms_epsilon: 0.1,
            rms_momentum: 0.0,
            max_grad_norm: Some(100.0),
            mode: Mode::Sync,
            num_actors: 8,
            envs_per_actor: 4,
            queue_capacity: 64,
            total_env_steps: 2_000_000,
            max_cpu_minutes: None,
            target_solve_rate: None,
            eval_interval: 50_000,
            eval_episodes: 200,
            log_interval: 10,
            checkpoint_interval: 200,
            learner_chunk: 8,
        }
    }
}

impl TrainerConfig {
    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.learning_rate,
            decay: self.rms_decay,
            epsilon: self.rms_epsilon,
            momentum: self.rms_momentum,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} outside (0, 1)", self.discount));
        }
        if !(self.entropy_cost >= 0.0 && self.baseline_cost >= 0.0) {
            return bad("costs must be >= 0".into());
        }
        if self.unroll_length == 0 || self.batch_size == 0 || self.learner_chunk == 0 {
            return bad("unroll_length, batch_size and learner_chunk must be >= 1".into());
        }
        if self.mode == Mode::Async && (self.num_actors == 0 || self.envs_per_actor == 0 || self.queue_capacity == 0) {
            return bad("async mode needs num_actors, envs_per_actor and queue_capacity >= 1".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return bad(format!("max_grad_norm {c} must be > 0"));
            }
        }
        if let Some(t) = self.target_solve_rate {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("target_solve_rate {t} outside [0, 1]"));
            }
        }
        if self.eval_interval > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes must be >= 1 when evaluation is enabled".into());
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return bad("log_interval and checkpoint_interval must be >= 1".into());
        }
        self.rmsprop().validate().map_err(TrainError::InvalidConfig)
    }

    /// Env steps consumed by one learner step.
    pub fn steps_per_update(&self) -> u64 {
        (self.batch_size * self.unroll_length) as u64
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub level: LevelConfig,
    pub split: SplitSpec,
    pub agent: AgentConfig,
    pub trainer: TrainerConfig,
    pub seed: u64,
}

/// Counters persisted alongside checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub env_steps: u64,
    pub episodes: u64,
    pub learner_steps: u64,
    pub wall_time_s: f64,
    pub cpu_seconds: f64,
    pub last_eval_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub wall_time_s: f64,
    pub env_steps: u64,
    pub episodes: u64,
    pub solve_rate: f64,
    pub mean_return: f64,
    pub loss: f64,
    pub pg_loss: f64,
    pub baseline_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub wall_time_s: f64,
    pub env_steps: u64,
    pub episodes: u64,
    pub solve_rate: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EnvSteps,
    CpuBudget,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: TrainState,
    pub stop: StopReason,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    /// `(actor_id, seq)` of every trajectory the learner used, in order.
    pub consumed: Vec<(u32, u64)>,
    /// Trajectories still queued at shutdown.
    pub discarded: usize,
}

/// Process CPU time (user + system, all threads) in seconds.
pub fn cpu_seconds() -> f64 {
    // SAFETY: getrusage only writes into the struct we pass.
    let usage = unsafe {
        let mut u: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut u) != 0 {
            return 0.0;
        }
        u
    };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(usage.ru_utime) + tv(usage.ru_stime)
}

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel; the forward/backward passes allocate and free the same large
/// sizes every step.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}

#[derive(Default)]
struct Window {
    episodes: VecDeque<EpisodeSummary>,
    loss: LossMetrics,
    updates: u64,
}

impl Window {
    fn push_episode(&mut self, e: EpisodeSummary) {
        if self.episodes.len() == EPISODE_WINDOW {
            self.episodes.pop_front();
        }
        self.episodes.push_back(e);
    }

    fn rates(&self) -> (f64, f64) {
        if self.episodes.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.episodes.len() as f64;
        let solved = self.episodes.iter().filter(|e| e.solved).count() as f64;
        let ret: f64 = self.episodes.iter().map(|e| e.total_return as f64).sum();
        (solved / n, ret / n)
    }
}

pub struct Trainer {
    setup: TrainSetup,
    agent: Arc<Agent>,
    train_sampler: LevelSampler,
    test_sampler: LevelSampler,
    params: ParamSet<f32>,
    optimizer: RmsProp<f32>,
    state: TrainState,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    /// Fresh run. With an output directory, metrics, evaluations and
    /// checkpoints are written there.
    pub fn new(setup: TrainSetup, out_dir: Option<PathBuf>) -> Result<Self, TrainError> {
        setup.trainer.validate()?;
        let (train_sampler, test_sampler) = make_split(&setup.level, &setup.split)?;
        let (agent, params) = Agent::init::<f32>(&setup.agent, setup.level.room_size, setup.level.channels(), setup.seed)?;
        let optimizer = RmsProp::new(setup.trainer.rmsprop(), &params);
        if let Some(dir) = &out_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(Trainer {
            setup,
            agent: Arc::new(agent),
            train_sampler,
            test_sampler,
            params,
            optimizer,
            state: TrainState::default(),
            out_dir,
        })
    }

    /// Continues a run from the checkpoints in `out_dir`.
    pub fn resume(setup: TrainSetup, out_dir: PathBuf) -> Result<Self, TrainError> {
        let mut t = Trainer::new(setup, Some(out_dir.clone()))?;
        let params: ParamSet<f32> = load_checkpoint(&out_dir.join(PARAMS_FILE))?;
        t.agent.check_params(&params)?;
        let opt_path = out_dir.join(OPTIMIZER_FILE);
        let opt: ParamSet<f32> = read_checkpoint(File::open(&opt_path).map_err(io_err(&opt_path))?)?;
        let pick = |prefix: &str| -> Option<Vec<Tensor<f32>>> {
            let v: Vec<_> = params
                .names()
                .iter()
                .map(|n| opt.by_name(&format!("{prefix}/{n}")).cloned())
                .collect::<Option<_>>()?;
            Some(v)
        };
        let ms = pick("mean_square").ok_or_else(|| TrainError::InvalidConfig("optimizer checkpoint lacks mean_square".into()))?;
        let vel = pick("velocity");
        t.optimizer.restore(&params, ms, vel)?;
        let state_path = out_dir.join(STATE_FILE);
        let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
        t.state = serde_json::from_str(&text)?;
        t.params = params;
        Ok(t)
    }

    pub fn agent(&self) -> &Arc<Agent> {
        &self.agent
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    /// Raises or lowers the env-step budget, e.g. to extend a resumed run.
    pub fn set_total_env_steps(&mut self, steps: u64) {
        self.setup.trainer.total_env_steps = steps;
    }

    pub fn train_sampler(&self) -> &LevelSampler {
        &self.train_sampler
    }

    pub fn test_sampler(&self) -> &LevelSampler {
        &self.test_sampler
    }

    /// Greedy evaluation on fixed training-distribution seeds.
    pub fn evaluate_greedy(&self, episodes: usize) -> Result<EvalResult, TrainError> {
        let mut policy = AgentPolicy::new(&self.agent, &self.params, true, 0);
        evaluate(&mut policy, &self.train_sampler, episodes, EVAL_SEED, 32)
    }

    /// Seed for actors started after `learner_steps` updates, so a resumed
    /// run does not replay the levels of the original one.
    fn actor_seed(&self) -> u64 {
        if self.state.learner_steps == 0 {
            self.setup.seed
        } else {
            Rng::stream(self.setup.seed, 1 << 40 | self.state.learner_steps).next_u64()
        }
    }

    pub fn run(&mut self) -> Result<TrainReport, TrainError> {
        tune_allocator();
        match self.setup.trainer.mode {
            Mode::Sync => {
                let mut actor = Actor::new(
                    0,
                    self.agent.clone(),
                    self.train_sampler.clone(),
                    self.setup.trainer.batch_size,
                    self.setup.trainer.unroll_length,
                    self.actor_seed(),
                )?;
                let mut source = |params: &Arc<ParamSet<f32>>, _n: usize| actor.unroll(params);
                self.learn(&mut source, None)
            }
            Mode::Async => self.run_async(),
        }
    }

    fn run_async(&mut self) -> Result<TrainReport, TrainError> {
        let cfg = self.setup.trainer.clone();
        let seed = self.actor_seed();
        let mut actors = Vec::with_capacity(cfg.num_actors);
        for id in 0..cfg.num_actors {
            actors.push(Actor::new(
                id as u32,
                self.agent.clone(),
                self.train_sampler.clone(),
                cfg.envs_per_actor,
                cfg.unroll_length,
                seed,
            )?);
        }
        let snapshot = Arc::new(RwLock::new(Arc::new(self.params.clone())));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = crossbeam_channel::bounded::<Result<Trajectory, TrainError>>(cfg.queue_capacity);
        std::thread::scope(|scope| {
            let handles: Vec<_> = actors
                .into_iter()
                .map(|mut actor| {
                    let (tx, snapshot, stop) = (tx.clone(), snapshot.clone(), stop.clone());
                    scope.spawn(move || {
                        while !stop.load(Ordering::Relaxed) {
                            let params = snapshot.read().expect("snapshot lock").clone();
                            match actor.unroll(&params) {
                                Ok(trajs) => {
                                    for t in trajs {
                                        if tx.send(Ok(t)).is_err() {
                                            return;
                                        }
                                    }
                                }
                                Err(e) => {
                                    let _ = tx.send(Err(e));
                                    return;
                                }
                            }
                        }
                    })
                })
                .collect();
            drop(tx);

            let mut pending: VecDeque<Trajectory> = VecDeque::new();
            let mut source = |params: &Arc<ParamSet<f32>>, n: usize| -> Result<Vec<Trajectory>, TrainError> {
                *snapshot.write().expect("snapshot lock") = params.clone();
                while pending.len() < n {
                    match rx.recv() {
                        Ok(t) => pending.push_back(t?),
                        Err(_) => return Err(TrainError::ActorPanicked),
                    }
                }
                Ok(pending.drain(..n).collect())
            };
            let result = self.learn(&mut source, Some(&stop));
            stop.store(true, Ordering::Relaxed);
            let mut discarded = 0;
            while rx.recv().is_ok() {
                discarded += 1;
            }
            let mut panicked = false;
            for h in handles {
                panicked |= h.join().is_err();
            }
            let mut report = result?;
            if panicked {
                return Err(TrainError::ActorPanicked);
            }
            report.discarded = discarded;
            Ok(report)
        })
    }

    /// The learner loop. `source(snapshot, n)` yields `n` trajectories
    /// generated with (roughly) the given parameters.
    fn learn(
        &mut self,
        source: &mut dyn FnMut(&Arc<ParamSet<f32>>, usize) -> Result<Vec<Trajectory>, TrainError>,
        stop_flag: Option<&AtomicBool>,
    ) -> Result<TrainReport, TrainError> {
        let cfg = self.setup.trainer.clone();
        let start_wall = Instant::now();
        let start_cpu = cpu_seconds();
        let base = self.state.clone();
        let mut window = Window::default();
        let mut report = TrainReport {
            state: self.state.clone(),
            stop: StopReason::EnvSteps,
            metrics: Vec::new(),
            evals: Vec::new(),
            consumed: Vec::new(),
            discarded: 0,
        };
        let mut writers = self.open_logs()?;
        let mut snapshot = Arc::new(self.params.clone());

        let stop = loop {
            if self.state.env_steps >= cfg.total_env_steps {
                break StopReason::EnvSteps;
            }
            if let Some(max) = cfg.max_cpu_minutes {
                if self.state.cpu_seconds >= max * 60.0 {
                    break StopReason::CpuBudget;
                }
            }
            let batch = source(&snapshot, cfg.batch_size).map_err(|e| self.non_finite(e, &snapshot))?;
            let (mut grads, m) =
                compute_loss(&self.agent, &self.params, &batch, &cfg).map_err(|e| self.non_finite(e, &snapshot))?;
            if let Some(max) = cfg.max_grad_norm {
                let norm = clip_global_norm(&mut grads, max);
                if !norm.is_finite() {
                    return Err(self.non_finite_detail("gradient norm".into(), &snapshot));
                }
            }
            self.optimizer.update(&mut self.params, &grads)?;
            if !self.params.tensors().iter().all(|t| t.all_finite()) {
                let err = self.non_finite_detail("parameters after update".into(), &snapshot);
                self.params = (*snapshot).clone();
                return Err(err);
            }
            snapshot = Arc::new(self.params.clone());

            for t in &batch {
                report.consumed.push((t.actor_id, t.seq));
                self.state.env_steps += t.len() as u64;
                for e in &t.episodes {
                    self.state.episodes += 1;
                    window.push_episode(*e);
                }
            }
            self.state.learner_steps += 1;
            self.state.wall_time_s = base.wall_time_s + start_wall.elapsed().as_secs_f64();
            self.state.cpu_seconds = base.cpu_seconds + (cpu_seconds() - start_cpu);
            window.loss.loss += m.loss;
            window.loss.pg_loss += m.pg_loss;
            window.loss.baseline_loss += m.baseline_loss;
            window.loss.entropy += m.entropy;
            window.updates += 1;

            if self.state.learner_steps.is_multiple_of(cfg.log_interval) {
                let row = self.metrics_row(&mut window);
                if let Some(w) = writers.as_mut() {
                    w.0.serialize(row)?;
                    w.0.flush().map_err(|e| TrainError::Csv(e.into()))?;
                }
                log::info!(
                    "steps {} episodes {} solve {:.3} return {:.3} loss {:.4} entropy {:.3}",
                    row.env_steps,
                    row.episodes,
                    row.solve_rate,
                    row.mean_return,
                    row.loss,
                    row.entropy
                );
                report.metrics.push(row);
            }
            if self.state.learner_steps.is_multiple_of(cfg.checkpoint_interval) {
                self.save()?;
            }
            if cfg.eval_interval > 0 && self.state.env_steps - self.state.last_eval_steps >= cfg.eval_interval {
                self.state.last_eval_steps = self.state.env_steps;
                let r = self.evaluate_greedy(cfg.eval_episodes)?;
                let row = EvalRow {
                    wall_time_s: self.state.wall_time_s,
                    env_steps: self.state.env_steps,
                    episodes: r.episodes as u64,
                    solve_rate: r.solve_rate,
                    mean_return: r.mean_return,
                };
                if let Some(w) = writers.as_mut() {
                    w.1.serialize(row)?;
                    w.1.flush().map_err(|e| TrainError::Csv(e.into()))?;
                }
                log::info!("eval at {} steps: solve {:.3}", row.env_steps, row.solve_rate);
                report.evals.push(row);
                if cfg.target_solve_rate.is_some_and(|t| r.solve_rate >= t) {
                    break StopReason::TargetReached;
                }
            }
        };
        if let Some(flag) = stop_flag {
            flag.store(true, Ordering::Relaxed);
        }
        if window.updates > 0 {
            let row = self.metrics_row(&mut window);
            if let Some(w) = writers.as_mut() {
                w.0.serialize(row)?;
                w.0.flush().map_err(|e| TrainError::Csv(e.into()))?;
            }
            report.metrics.push(row);
        }
        self.save()?;
        report.state = self.state.clone();
        report.stop = stop;
        Ok(report)
    }

    fn metrics_row(&self, window: &mut Window) -> MetricsRow {
        let (solve_rate, mean_return) = window.rates();
        let n = window.updates.max(1) as f64;
        let row = MetricsRow {
            wall_time_s: self.state.wall_time_s,
            env_steps: self.state.env_steps,
            episodes: self.state.episodes,
            solve_rate,
            mean_return,
            loss: window.loss.loss / n,
            pg_loss: window.loss.pg_loss / n,
            baseline_loss: window.loss.baseline_loss / n,
            entropy: window.loss.entropy / n,
        };
        window.loss = LossMetrics::default();
        window.updates = 0;
        row
    }

    #[allow(clippy::type_complexity)]
    fn open_logs(&self) -> Result<Option<(csv::Writer<File>, csv::Writer<File>)>, TrainError> {
        let Some(dir) = &self.out_dir else {
            return Ok(None);
        };
        let open = |name: &str| -> Result<csv::Writer<File>, TrainError> {
            let path = dir.join(name);
            let fresh = !path.exists() || fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
            let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
        };
        Ok(Some((open(METRICS_FILE)?, open(EVAL_FILE)?)))
    }

    /// Writes parameters, optimizer state and counters to the output
    /// directory, if there is one.
    pub fn save(&self) -> Result<(), TrainError> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        save_checkpoint(&self.params, &dir.join(PARAMS_FILE))?;
        let mut opt = ParamSet::new();
        for (n, t) in self.params.names().iter().zip(self.optimizer.mean_square()) {
            opt.push(format!("mean_square/{n}"), t.clone())?;
        }
        if let Some(v) = self.optimizer.velocity() {
            for (n, t) in self.params.names().iter().zip(v) {
                opt.push(format!("velocity/{n}"), t.clone())?;
            }
        }
        let mut bytes = Vec::new();
        write_checkpoint(&opt, &mut bytes)?;
        write_atomic(&dir.join(OPTIMIZER_FILE), &bytes)?;
        write_atomic(&dir.join(STATE_FILE), serde_json::to_string_pretty(&self.state)?.as_bytes())?;
        Ok(())
    }

    fn non_finite(&self, e: TrainError, good: &ParamSet<f32>) -> TrainError {
        let detail = match &e {
            TrainError::Tensor(t @ TensorError::NonFiniteValue { .. }) => t.to_string(),
            TrainError::Agent(a @ AgentError::NonFiniteLogits(_)) => a.to_string(),
            TrainError::Agent(AgentError::Tensor(t @ TensorError::NonFiniteValue { .. })) => t.to_string(),
            _ => return e,
        };
        self.non_finite_detail(detail, good)
    }

    fn non_finite_detail(&self, detail: String, good: &ParamSet<f32>) -> TrainError {
        let last_good = self.out_dir.as_ref().and_then(|dir| {
            let path = dir.join(LAST_GOOD_FILE);
            let finite = good.tensors().iter().all(|t| t.all_finite());
            (finite && save_checkpoint(good, &path).is_ok()).then_some(path)
        });
        log::error!("aborting: non-finite {detail}");
        TrainError::NonFinite {
            env_steps: self.state.env_steps,
            detail,
            last_good,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
