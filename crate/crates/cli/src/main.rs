use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use boxworld::agent::Variant;
use boxworld::harness::{self, ExperimentSpec, GenMode};
use boxworld::trainer::{tune_allocator, Mode};

#[derive(Parser)]
#[command(name = "boxworld", version, about = "Box-World levels, agents and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML with [env], [agent], [trainer], [split]).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Write serialized levels.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Train an agent.
    Train {
        #[command(flatten)]
        common: Common,
        /// sync or async.
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue the run already in the output directory.
        #[arg(long)]
        resume: bool,
        /// Override the env-step budget.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, env = "BOXWORLD_THREADS")]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on the training distribution.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Sample actions instead of taking the most likely one.
        #[arg(long)]
        sample: bool,
    },
    /// Zero-shot evaluation on withheld levels.
    EvalGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// longer_solutions or withheld_pairs.
        #[arg(long)]
        mode: GenMode,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
    /// Export attention weights of a relational checkpoint on one level.
    ProbeAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Solve rates of a uniform-random policy for solution lengths 1 to 4.
    RandomBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
    },
    /// Check every CSV file in a directory against its schema.
    CheckCsv { dir: PathBuf },
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    spec.apply_overrides(common.seed, common.variant, None, None);
    Ok(spec)
}

fn out_dir(common: &Common, spec: &ExperimentSpec, default: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&spec.name).join(default))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { common, count } => {
            let spec = load_spec(&common)?;
            let out = out_dir(&common, &spec, "levels");
            let paths = harness::generate(&spec, spec.seeds[0], count, &out, common.force)?;
            println!("wrote {} levels to {}", paths.len(), out.display());
        }
        Command::Train {
            common,
            mode,
            resume,
            steps,
            threads,
        } => {
            tune_allocator();
            let mut spec = load_spec(&common)?;
            spec.apply_overrides(None, None, mode, threads);
            if let Some(s) = steps {
                spec.trainer.total_env_steps = s;
            }
            let base = out_dir(&common, &spec, "train");
            let multi = spec.seeds.len() > 1;
            for &seed in &spec.seeds {
                let out = if multi { base.join(format!("seed_{seed}")) } else { base.clone() };
                let report = harness::train(&spec, seed, &out, common.force, resume)
                    .with_context(|| format!("training seed {seed}"))?;
                let last = report.evals.last().map(|e| e.solve_rate);
                println!(
                    "seed {seed}: {} env steps, {:.1} CPU min, stop {:?}, last greedy solve rate {}",
                    report.state.env_steps,
                    report.state.cpu_seconds / 60.0,
                    report.stop,
                    last.map_or("n/a".into(), |r| format!("{r:.3}"))
                );
            }
        }
        Command::Eval {
            common,
            checkpoint,
            episodes,
            sample,
        } => {
            let spec = load_spec(&common)?;
            let r = harness::eval_checkpoint(&spec, &checkpoint, episodes, !sample, spec.seeds[0])?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::EvalGen {
            common,
            checkpoint,
            mode,
            episodes,
        } => {
            let spec = load_spec(&common)?;
            let out = out_dir(&common, &spec, &format!("eval_{mode}"));
            let rows =
                harness::eval_generalization(&spec, &checkpoint, mode, episodes, spec.seeds[0], &out, common.force)?;
            for r in rows {
                println!("{:<8} {:>4} {:.3} ({}/{})", r.split, r.solution_length, r.solve_rate, r.solved, r.episodes);
            }
        }
        Command::ProbeAttention { common, checkpoint } => {
            let spec = load_spec(&common)?;
            let out = out_dir(&common, &spec, "attention");
            let summary = harness::probe_attention(&spec, &checkpoint, spec.seeds[0], &out, common.force)?;
            for s in summary {
                println!(
                    "block {} head {}: {} at {} -> {} at {} ({:.3})",
                    s.block, s.head, s.source_object, s.source_cell, s.top_target_object, s.top_target_cell, s.weight
                );
            }
        }
        Command::RandomBaseline { common, episodes } => {
            let spec = load_spec(&common)?;
            let out = out_dir(&common, &spec, "random_baseline");
            let rows = harness::random_baseline(&spec, episodes, spec.seeds[0], Some((&out, common.force)))?;
            println!("length  episodes  solved  rate");
            for r in rows {
                println!("{:>6}  {:>8}  {:>6}  {:.4}", r.solution_length, r.episodes, r.solved, r.solve_rate);
            }
        }
        Command::CheckCsv { dir } => {
            let found = harness::check_dir(&dir)?;
            if found.is_empty() {
                bail!("no known CSV files in {}", dir.display());
            }
            for (file, rows) in found {
                println!("{file}: {rows} rows ok");
            }
        }
    }
    Ok(())
}
