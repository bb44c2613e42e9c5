use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use splagger_core::envs::{describe, env_optimal_return, EnvConfig, EnvKind};
use splagger_core::oracle::{bandit_suite, gridworld_suite, run_suite, SuiteReport};
use splagger_core::probes::{mean_series, probe_rows, run_probe, Metric, Probe, ProbeConfig, ProbeRow};
use splagger_core::trainer::{
    lr_sweep, parallel_map, train, Agent, ModelSection, RunResult, TrainConfig, LR_GRID,
};
use splagger_core::aggregators::AggKind;
use splagger_core::seqmodel::{SequenceModelSpec, Variant};
use splagger_core::{Error, Scalar};

use crate::io::{self, Checkpoint};
use crate::CliError;

pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "splagger", version, about = "Train, probe and check split-aggregation meta-RL agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every configured seed, one run directory each.
    Train(TrainArgs),
    /// Gradient and permutation probes at initialization or from a checkpoint.
    Probe(ProbeArgs),
    /// Train over a learning-rate grid and report the best rate.
    Sweep(SweepArgs),
    /// Check the exact posterior against every ordering of sampled trajectories.
    OracleCheck(OracleArgs),
    /// Print an environment's observation layout, actions and rewards.
    DescribeEnv(DescribeArgs),
}

#[derive(Debug, Args)]
pub struct RunOpts {
    #[arg(long)]
    pub config: PathBuf,
    /// Override the frame budget.
    #[arg(long)]
    pub frames: Option<u64>,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Train in single precision.
    #[arg(long)]
    pub f32: bool,
    /// Output root; defaults to $SPLAG_RUN_DIR, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOpts,
    /// Train only these seeds (repeatable).
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunOpts,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// init_input, params, all_inputs, perm_diff or pearl_var.
    #[arg(long)]
    pub metric: String,
    /// Model labels such as `rnn` or `splagger-max` (repeatable).
    #[arg(long = "model")]
    pub models: Vec<String>,
    /// Probe a trained checkpoint instead of fresh models.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(short = 'T', long = "len", default_value_t = splagger_core::probes::DEFAULT_T)]
    pub t_len: usize,
    /// Initialization and input seeds.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = splagger_core::probes::DEFAULT_IN_DIM)]
    pub in_dim: usize,
    #[arg(long, default_value_t = splagger_core::probes::DEFAULT_PERMS)]
    pub perms: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 20)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 5)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    pub kind: String,
    #[arg(long)]
    pub corridor: Option<usize>,
    #[arg(long)]
    pub rooms: Option<usize>,
    #[arg(long)]
    pub plan_steps: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Start from the full-size layouts instead of the desk defaults.
    #[arg(long)]
    pub full: bool,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train_cmd(&a).map(|_| ()),
        Command::Probe(a) => probe_cmd(&a).map(|_| ()),
        Command::Sweep(a) => sweep_cmd(&a).map(|_| ()),
        Command::OracleCheck(a) => oracle_cmd(&a).map(|_| ()),
        Command::DescribeEnv(a) => describe_cmd(&a),
    }
}

fn load_run_config(opts: &RunOpts) -> Result<TrainConfig, CliError> {
    let mut cfg = io::read_config(&opts.config)?;
    if let Some(f) = opts.frames {
        cfg.train.frames = f;
    }
    if opts.jobs == 0 {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    Ok(cfg)
}

/// Trains one seed into a fresh run directory and returns the directory.
pub fn train_into<T>(cfg: &TrainConfig, seed: u64, root: &Path) -> Result<(PathBuf, RunResult<T>), CliError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    let mut cfg = cfg.clone();
    cfg.train.seeds = vec![seed];
    cfg.validate()?;
    let dir = io::create_run_dir(root, &cfg, seed)?;
    io::write_config(&dir.join("config.toml"), &cfg)?;
    let curves = dir.join("curves.csv");
    let mut points = Vec::new();
    let result = train::<T>(&cfg, seed, |p, agent| {
        points.push(p.clone());
        io::write_curves(&curves, &points).map_err(into_core)?;
        if cfg.train.checkpoint_all {
            Checkpoint::new(&cfg, seed, p.frames, agent)
                .save(&dir.join(format!("checkpoint_{}.json", p.frames)))
                .map_err(into_core)?;
        }
        Ok(())
    })?;
    Checkpoint::new(&cfg, seed, result.frames, &result.agent).save(&dir.join("checkpoint_final.json"))?;
    Ok((dir, result))
}

fn into_core(e: CliError) -> Error {
    match e {
        CliError::Core(e) => e,
        CliError::Io(e) => Error::Io(e),
        other => Error::Parse(other.to_string()),
    }
}

fn train_all<T>(cfg: &TrainConfig, seeds: &[u64], jobs: usize, root: &Path) -> Result<Vec<PathBuf>, CliError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    let runs = parallel_map(seeds, jobs, |&seed| train_into::<T>(cfg, seed, root));
    let mut dirs = Vec::new();
    for run in runs {
        let (dir, result) = run?;
        println!(
            "seed {} frames {} final return {:.3} -> {}",
            result.seed,
            result.frames,
            result.final_return(),
            dir.display()
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn train_cmd(args: &TrainArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_run_config(&args.run)?;
    let seeds = if args.seeds.is_empty() {
        cfg.train.seeds.clone()
    } else {
        args.seeds.clone()
    };
    let root = args.run.out.clone().unwrap_or_else(io::output_root);
    if args.run.f32 {
        train_all::<f32>(&cfg, &seeds, args.run.jobs, &root)
    } else {
        train_all::<f64>(&cfg, &seeds, args.run.jobs, &root)
    }
}

pub fn sweep_cmd(args: &SweepArgs) -> Result<PathBuf, CliError> {
    let cfg = load_run_config(&args.run)?;
    cfg.validate()?;
    let grid = if args.grid.is_empty() {
        LR_GRID.to_vec()
    } else {
        args.grid.clone()
    };
    let root = args.run.out.clone().unwrap_or_else(io::output_root);
    let dir = io::unique_dir(
        &root,
        &format!("{}_{}_sweep_{}", cfg.env.kind, cfg.model_label(), io::timestamp()),
    )?;
    io::write_config(&dir.join("config.toml"), &cfg)?;
    let (best, entries) = if args.run.f32 {
        sweep_curves::<f32>(&cfg, &grid, args.run.jobs, &dir)?
    } else {
        sweep_curves::<f64>(&cfg, &grid, args.run.jobs, &dir)?
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lr", "score", "selected"])?;
    for (lr, score) in &entries {
        println!("lr {lr:e} score {score:.4}{}", if *lr == best { "  <- best" } else { "" });
        w.write_record(&[lr.to_string(), score.to_string(), (*lr == best).to_string()])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Format(e.to_string()))?)
        .map_err(|e| CliError::Format(e.to_string()))?;
    std::fs::write(dir.join("sweep.csv"), format!("# schema={}\n{body}", io::SCHEMA))?;
    Ok(dir)
}

fn sweep_curves<T: Scalar + Send + Sync>(
    cfg: &TrainConfig,
    grid: &[f64],
    jobs: usize,
    dir: &Path,
) -> Result<(f64, Vec<(f64, f64)>), CliError> {
    let sweep = lr_sweep::<T>(cfg, grid, jobs)?;
    for e in &sweep.entries {
        let points: Vec<_> = e.runs.iter().flat_map(|r| r.curve.iter().cloned()).collect();
        let sub = dir.join(format!("lr_{:e}", e.lr));
        std::fs::create_dir_all(&sub)?;
        io::write_curves(&sub.join("curves.csv"), &points)?;
    }
    Ok((sweep.best_lr, sweep.entries.iter().map(|e| (e.lr, e.score)).collect()))
}

/// Loads any checkpoint as a double-precision probe subject.
pub fn load_probe(path: &Path) -> Result<(Probe, String), CliError> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let scalar = raw.get("scalar").and_then(|s| s.as_str()).unwrap_or_default();
    let agent: Agent<f64> = if scalar == "f32" {
        let a = Checkpoint::<f32>::load(path)?.agent;
        Agent {
            store: a.store.cast(),
            model: a.model,
            head: a.head,
        }
    } else {
        Checkpoint::<f64>::load(path)?.agent
    };
    let label = splagger_core::trainer::model_label(&agent.model.spec);
    Ok((
        Probe {
            model: agent.model,
            store: agent.store,
        },
        label,
    ))
}

pub fn probe_cmd(args: &ProbeArgs) -> Result<PathBuf, CliError> {
    let metric: Metric = args.metric.parse()?;
    let cfg = ProbeConfig {
        t_len: args.t_len,
        in_dim: args.in_dim,
        seeds: if args.seeds.is_empty() {
            ProbeConfig::default().seeds
        } else {
            args.seeds.clone()
        },
        n_perms: args.perms,
    };
    let mut rows: Vec<ProbeRow> = Vec::new();
    if let Some(path) = &args.checkpoint {
        let (probe, label) = load_probe(path)?;
        for &seed in &cfg.seeds {
            rows.extend(probe_rows(metric, &probe, &label, seed, &cfg)?);
        }
    } else if metric == Metric::PearlVar {
        rows = run_probe(metric, &SequenceModelSpec::new(Variant::Pearl, AggKind::Pearl), &cfg)?;
    } else {
        if args.models.is_empty() {
            return Err(CliError::Usage("give at least one --model or a --checkpoint".into()));
        }
        for m in &args.models {
            let spec = m.parse::<ModelSection>()?.spec();
            rows.extend(run_probe(metric, &spec, &cfg)?);
        }
    }
    let root = args.out.clone().unwrap_or_else(io::output_root);
    std::fs::create_dir_all(&root)?;
    let path = root.join(format!("probe_{metric}.csv"));
    io::write_probe(&path, &rows)?;

    let mut labels: Vec<&str> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.model.as_str()) {
            labels.push(&r.model);
        }
    }
    for label in labels {
        let mine: Vec<ProbeRow> = rows.iter().filter(|r| r.model == label).cloned().collect();
        let series = mean_series(&mine);
        match (metric, series.first(), series.last()) {
            (Metric::PermDiff, _, Some(v)) => println!("{label}\t{v:.6e}"),
            (_, Some(first), Some(last)) => println!("{label}\tt=1 {first:.6e}\tt={} {last:.6e}", series.len()),
            _ => {}
        }
    }
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn oracle_cmd(args: &OracleArgs) -> Result<Vec<SuiteReport>, CliError> {
    let mut rng = splagger_core::envs::task_rng(args.seed, 0);
    let reports = vec![
        run_suite("bandit", &bandit_suite(), args.trajectories, args.len, &mut rng)?,
        run_suite("gridworld", &gridworld_suite(), args.trajectories, args.len, &mut rng)?,
    ];
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(ORACLE_TOL);
        println!(
            "{}\tpermutation {:.3e}\tfilter {:.3e}\t{}",
            r.name,
            r.permutation_deviation,
            r.filter_deviation,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Failed(format!("deviation above {ORACLE_TOL:e} on {}", failed.join(", "))))
    }
}

pub fn describe_cmd(args: &DescribeArgs) -> Result<(), CliError> {
    let kind: EnvKind = args.kind.parse()?;
    let mut cfg = if args.full { EnvConfig::full() } else { EnvConfig::desk() };
    cfg.corridor = args.corridor.unwrap_or(cfg.corridor);
    cfg.rooms = args.rooms.unwrap_or(cfg.rooms);
    cfg.plan_steps = args.plan_steps.unwrap_or(cfg.plan_steps);
    cfg.episodes = args.episodes.or(cfg.episodes);
    cfg.validate(kind)?;
    print!("{}", describe(kind, &cfg));
    match env_optimal_return(kind, &cfg) {
        Ok(v) => println!("optimal_return: {v}"),
        Err(Error::NoOptimum(_)) => println!("optimal_return: n/a"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}
