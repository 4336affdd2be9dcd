use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{io_err, prepare_output, write_manifest, ExperimentSpec, HarnessError};
use crate::agent::{Agent, Variant};
use crate::env::{generate_level, EnvState, IntRange, Level, LevelConfig, LevelSampler, SplitSpec};
use crate::relational::{collect_traces, probe_attention as probe_trace, write_probe_csv, ProbeRow};
use crate::rng::Rng;
use crate::tensor::{load_checkpoint, Graph, ParamSet};
use crate::trainer::{evaluate, AgentPolicy, EvalResult, Policy, RandomPolicy, TrainReport, Trainer};

pub const DEFAULT_TEST_LENGTHS: [usize; 3] = [6, 8, 10];
pub const DEFAULT_WITHHELD_PAIRS: [[u8; 2]; 3] = [[1, 2], [5, 6], [11, 12]];

/// Base of the level seeds used by evaluation commands.
const EVAL_SEED: u64 = 0x0e7a_1000;

/// Writes `count` levels as `level_00000.json`, ... Level `i` depends only
/// on `(config, seed, i)`. Every level is generated before the first file
/// is written.
pub fn generate(
    spec: &ExperimentSpec,
    seed: u64,
    count: usize,
    out: &Path,
    force: bool,
) -> Result<Vec<PathBuf>, HarnessError> {
    spec.env.validate()?;
    let levels: Vec<Level> = (0..count)
        .map(|i| generate_level(&spec.env, Rng::stream(seed, i as u64).next_u64()))
        .collect::<Result<_, _>>()?;
    prepare_output(out, force)?;
    write_manifest(out, spec, "generate", Some(seed))?;
    let mut paths = Vec::with_capacity(count);
    for (i, level) in levels.iter().enumerate() {
        let path = out.join(format!("level_{i:05}.json"));
        fs::write(&path, level.to_json()?).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Trains with `seed` into `out`. With `resume`, continues the run already
/// in `out` instead of starting a new one.
pub fn train(
    spec: &ExperimentSpec,
    seed: u64,
    out: &Path,
    force: bool,
    resume: bool,
) -> Result<TrainReport, HarnessError> {
    spec.validate()?;
    let setup = spec.setup(seed);
    let mut trainer = if resume {
        if !out.join(crate::trainer::PARAMS_FILE).exists() {
            return Err(HarnessError::MissingCheckpoint(out.join(crate::trainer::PARAMS_FILE)));
        }
        let mut t = Trainer::resume(setup, out.to_owned())?;
        t.set_total_env_steps(spec.trainer.total_env_steps);
        t
    } else {
        prepare_output(out, force)?;
        write_manifest(out, spec, "train", Some(seed))?;
        Trainer::new(setup, Some(out.to_owned()))?
    };
    Ok(trainer.run()?)
}

/// Agent layout for `spec` with the parameters stored at `checkpoint`.
pub fn load_agent(spec: &ExperimentSpec, checkpoint: &Path) -> Result<(Agent, ParamSet<f32>), HarnessError> {
    if !checkpoint.is_file() {
        return Err(HarnessError::MissingCheckpoint(checkpoint.to_owned()));
    }
    let (agent, _) = Agent::init::<f32>(&spec.agent, spec.env.room_size, spec.env.channels(), 0)?;
    let params = load_checkpoint(checkpoint)?;
    agent.check_params(&params)?;
    Ok((agent, params))
}

/// Evaluates a checkpoint on the training distribution of `spec`.
pub fn eval_checkpoint(
    spec: &ExperimentSpec,
    checkpoint: &Path,
    episodes: usize,
    greedy: bool,
    seed: u64,
) -> Result<EvalResult, HarnessError> {
    let (agent, params) = load_agent(spec, checkpoint)?;
    let (train, _) = crate::env::make_split(&spec.env, &spec.split)?;
    let mut policy = AgentPolicy::new(&agent, &params, greedy, seed);
    Ok(evaluate(&mut policy, &train, episodes, EVAL_SEED ^ seed, 32)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    LongerSolutions,
    WithheldPairs,
}

impl std::fmt::Display for GenMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GenMode::LongerSolutions => "longer_solutions",
            GenMode::WithheldPairs => "withheld_pairs",
        })
    }
}

impl std::str::FromStr for GenMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "longer_solutions" | "longer-solutions" => Ok(GenMode::LongerSolutions),
            "withheld_pairs" | "withheld-pairs" => Ok(GenMode::WithheldPairs),
            other => Err(format!("unknown generalization mode {other:?}")),
        }
    }
}

/// One bar of a generalization chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub condition: String,
    /// `train` or `test`.
    pub split: String,
    /// A single length, or `all`.
    pub solution_length: String,
    pub episodes: usize,
    pub solved: usize,
    pub solve_rate: f64,
    pub mean_return: f64,
}

/// The split a generalization mode evaluates. The spec's own split is used
/// when it is of the requested kind.
fn split_for(spec: &ExperimentSpec, mode: GenMode) -> (LevelConfig, SplitSpec) {
    match (mode, &spec.split) {
        (GenMode::LongerSolutions, s @ SplitSpec::LongerSolutions { .. }) => (spec.env.clone(), s.clone()),
        (GenMode::WithheldPairs, s @ SplitSpec::WithheldPairs { .. }) => (spec.env.clone(), s.clone()),
        (GenMode::LongerSolutions, _) => {
            let longest = DEFAULT_TEST_LENGTHS.iter().copied().max().unwrap_or(1);
            let env = LevelConfig {
                num_colors: spec.env.num_colors.max(longest + spec.env.num_distractors.hi * spec.env.distractor_length),
                ..spec.env.clone()
            };
            (
                env,
                SplitSpec::LongerSolutions {
                    lengths: DEFAULT_TEST_LENGTHS.to_vec(),
                },
            )
        }
        (GenMode::WithheldPairs, _) => (
            spec.env.clone(),
            SplitSpec::WithheldPairs {
                pairs: DEFAULT_WITHHELD_PAIRS.to_vec(),
            },
        ),
    }
}

fn rows_for(condition: &str, split: &str, r: &EvalResult) -> Vec<GenRow> {
    let mut rows = vec![GenRow {
        condition: condition.into(),
        split: split.into(),
        solution_length: "all".into(),
        episodes: r.episodes,
        solved: r.solved,
        solve_rate: r.solve_rate,
        mean_return: r.mean_return,
    }];
    for (len, s) in &r.by_length {
        rows.push(GenRow {
            condition: condition.into(),
            split: split.into(),
            solution_length: len.to_string(),
            episodes: s.episodes,
            solved: s.solved,
            solve_rate: s.solved as f64 / s.episodes as f64,
            mean_return: s.total_return / s.episodes as f64,
        });
    }
    rows
}

/// Solve rates of `policy` on the train and test sides of a generalization
/// split, overall and per solution length.
pub fn generalization_report(
    policy: &mut dyn Policy,
    spec: &ExperimentSpec,
    mode: GenMode,
    episodes: usize,
    seed: u64,
) -> Result<Vec<GenRow>, HarnessError> {
    let (env, split) = split_for(spec, mode);
    let (train, test) = crate::env::make_split(&env, &split)?;
    let condition = mode.to_string();
    let mut rows = Vec::new();
    for (name, sampler) in [("train", &train), ("test", &test)] {
        let r = evaluate(policy, sampler, episodes, EVAL_SEED ^ seed, 32)?;
        rows.extend(rows_for(&condition, name, &r));
    }
    Ok(rows)
}

/// Evaluates a checkpoint without further training and writes
/// `generalization.csv` into `out`.
pub fn eval_generalization(
    spec: &ExperimentSpec,
    checkpoint: &Path,
    mode: GenMode,
    episodes: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<Vec<GenRow>, HarnessError> {
    let (agent, params) = load_agent(spec, checkpoint)?;
    if episodes == 0 {
        return Err(HarnessError::InvalidArgument("episodes must be >= 1".into()));
    }
    let mut policy = AgentPolicy::new(&agent, &params, true, seed);
    let rows = generalization_report(&mut policy, spec, mode, episodes, seed)?;
    prepare_output(out, force)?;
    write_manifest(out, spec, &format!("eval-gen {mode}"), Some(seed))?;
    write_rows(&out.join("generalization.csv"), &rows)?;
    let test = rows.iter().find(|r| r.split == "test" && r.solution_length == "all");
    let train = rows.iter().find(|r| r.split == "train" && r.solution_length == "all");
    if let (Some(tr), Some(te)) = (train, test) {
        log::info!(
            "{} agent, {mode}: train {:.3}, test {:.3}",
            spec.agent.variant,
            tr.solve_rate,
            te.solve_rate
        );
    }
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// For one key entity in one head: where its attention goes most.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub block: usize,
    pub head: usize,
    pub source_cell: String,
    pub source_object: String,
    pub top_target_cell: String,
    pub top_target_object: String,
    pub weight: f64,
}

/// Picks, for every source entity holding a key, its highest-weighted
/// target among the occupied entities.
pub fn summarize_probe(rows: &[ProbeRow]) -> Vec<ProbeSummary> {
    let mut best: BTreeMap<(usize, usize, &str), &ProbeRow> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.source_object.contains("key")) {
        let slot = best.entry((r.block, r.head, r.source_cell.as_str())).or_insert(r);
        if r.weight > slot.weight {
            *slot = r;
        }
    }
    best.values()
        .map(|r| ProbeSummary {
            block: r.block,
            head: r.head,
            source_cell: r.source_cell.clone(),
            source_object: r.source_object.clone(),
            top_target_cell: r.target_cell.clone(),
            top_target_object: r.target_object.clone(),
            weight: r.weight,
        })
        .collect()
}

/// Runs a relational checkpoint on one level and writes `attention.csv`
/// and `attention_summary.json` into `out`.
pub fn probe_attention(
    spec: &ExperimentSpec,
    checkpoint: &Path,
    level_seed: u64,
    out: &Path,
    force: bool,
) -> Result<Vec<ProbeSummary>, HarnessError> {
    if spec.agent.variant == Variant::Control {
        return Err(HarnessError::InvalidArgument(
            "the control agent has no attention weights to probe".into(),
        ));
    }
    let (agent, params) = load_agent(spec, checkpoint)?;
    let state = EnvState::new(Arc::new(generate_level(&spec.env, level_seed)?));
    let obs = state.render();
    let mut g = Graph::new();
    let x = g.input(agent.batch_observations(&[&obs])?);
    let fwd = agent.forward(&mut g, &params, x, None)?;
    let mut rows = Vec::new();
    for trace in collect_traces(&g, &fwd.attention, spec.agent.heads, 0) {
        rows.extend(probe_trace(&trace, &state)?);
    }
    prepare_output(out, force)?;
    write_manifest(out, spec, "probe-attention", Some(level_seed))?;
    let csv_path = out.join("attention.csv");
    write_probe_csv(&rows, fs::File::create(&csv_path).map_err(io_err(&csv_path))?)?;
    let summary = summarize_probe(&rows);
    let json_path = out.join("attention_summary.json");
    fs::write(&json_path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&json_path))?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub solution_length: usize,
    pub episodes: usize,
    pub solved: usize,
    pub solve_rate: f64,
}

/// Uniform-random policy solve rates for solution lengths 1 to 4 under the
/// spec's level config. Writes `random_baseline.csv` when `out` is given.
pub fn random_baseline(
    spec: &ExperimentSpec,
    episodes: usize,
    seed: u64,
    out: Option<(&Path, bool)>,
) -> Result<Vec<BaselineRow>, HarnessError> {
    if episodes == 0 {
        return Err(HarnessError::InvalidArgument("episodes must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for len in 1..=4 {
        let cfg = LevelConfig {
            solution_length: IntRange::exactly(len),
            num_colors: spec.env.num_colors.max(len + spec.env.num_distractors.hi * spec.env.distractor_length),
            ..spec.env.clone()
        };
        let sampler = LevelSampler::new(cfg)?;
        let mut policy = RandomPolicy::new(Rng::stream(seed, len as u64).next_u64());
        let r = evaluate(&mut policy, &sampler, episodes, EVAL_SEED ^ seed ^ (len as u64) << 32, 256)?;
        rows.push(BaselineRow {
            solution_length: len,
            episodes: r.episodes,
            solved: r.solved,
            solve_rate: r.solve_rate,
        });
    }
    if let Some((dir, force)) = out {
        prepare_output(dir, force)?;
        write_manifest(dir, spec, "random-baseline", Some(seed))?;
        write_rows(&dir.join("random_baseline.csv"), &rows)?;
    }
    Ok(rows)
}
