use std::sync::Mutex;

use rand_chacha::ChaCha8Rng;

use crate::envs::{env_sample_task, task_rng, TaskInstance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::{TrainConfig, LR_GRID};
use super::ppo::{ppo_update, Adam, LossConfig, LossStats, ReturnScaler, UpdateConfig};
use super::rollout::{collect_meta_episodes, Agent};
use super::stats::{bootstrap_ci, mean, BOOTSTRAP_ITERS, CI_LEVEL};

// Stream layout under one seed: training tasks count up from 0, held-out
// tasks from EVAL_TASKS, and the remaining generators sit above.
const EVAL_TASKS: u64 = 1 << 62;
const INIT_STREAM: u64 = 1 << 63;
const ACTION_STREAM: u64 = INIT_STREAM + 1;
const EVAL_ACTION_STREAM: u64 = INIT_STREAM + 2;

/// One evaluation checkpoint of a single run.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub frames: u64,
    pub seed: u64,
    pub eval_return_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean loss terms over the updates since the previous checkpoint.
    pub loss: LossStats,
}

#[derive(Clone, Debug)]
pub struct RunResult<T> {
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub agent: Agent<T>,
    pub frames: u64,
    pub updates: usize,
}

impl<T> RunResult<T> {
    /// Frames at the first checkpoint whose mean return reaches `threshold`.
    pub fn frames_to(&self, threshold: f64) -> Option<u64> {
        self.curve
            .iter()
            .find(|p| p.eval_return_mean >= threshold)
            .map(|p| p.frames)
    }

    pub fn final_return(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.eval_return_mean)
    }
}

pub fn init_agent<T: Scalar>(cfg: &TrainConfig, seed: u64) -> Result<Agent<T>> {
    let env = cfg.env.cfg();
    let mut rng = task_rng(seed, INIT_STREAM);
    Agent::new(
        cfg.model.spec(),
        env.obs_dim(cfg.env.kind),
        env.n_actions(cfg.env.kind),
        &mut rng,
    )
}

/// Held-out tasks, identical at every checkpoint of a run.
pub fn eval_tasks(cfg: &TrainConfig, seed: u64) -> Result<Vec<TaskInstance>> {
    let env = cfg.env.cfg();
    (0..cfg.train.eval_tasks as u64)
        .map(|i| env_sample_task(cfg.env.kind, &env, seed, EVAL_TASKS + i))
        .collect()
}

/// Undiscounted return of one meta-episode per held-out task.
pub fn evaluate<T: Scalar>(agent: &Agent<T>, cfg: &TrainConfig, seed: u64, checkpoint: u64) -> Result<Vec<f64>> {
    let mut tasks = eval_tasks(cfg, seed)?;
    let mut rng = task_rng(seed ^ checkpoint.rotate_left(17), EVAL_ACTION_STREAM);
    let (batch, _) = collect_meta_episodes(agent, &mut tasks, &mut rng)?;
    Ok(batch.returns())
}

impl UpdateConfig {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let t = &cfg.train;
        UpdateConfig {
            loss: LossConfig {
                clip: t.clip,
                value_coef: t.value_coef,
                entropy_coef: cfg.entropy_coef(),
                kl_weight: t.kl_weight,
            },
            gamma: t.gamma,
            lambda: t.lambda,
            epochs: t.epochs,
            grad_clip: t.grad_clip,
            reward_scale: 1.0,
        }
    }
}

fn mean_stats(stats: &[LossStats]) -> LossStats {
    if stats.is_empty() {
        return LossStats::default();
    }
    let n = stats.len() as f64;
    let avg = |f: fn(&LossStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    LossStats {
        total: avg(|s| s.total),
        policy: avg(|s| s.policy),
        value: avg(|s| s.value),
        entropy: avg(|s| s.entropy),
        kl: avg(|s| s.kl),
        grad_norm: avg(|s| s.grad_norm),
    }
}

/// Trains one seed. `on_checkpoint` sees every curve point as it is produced.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(&CurvePoint, &Agent<T>) -> Result<()>,
) -> Result<RunResult<T>> {
    cfg.validate()?;
    let env = cfg.env.cfg();
    let t = &cfg.train;
    let mut agent = init_agent::<T>(cfg, seed)?;
    let mut adam = Adam::new(t.lr, &agent.store);
    let mut update_cfg = UpdateConfig::from_config(cfg);
    let mut scaler = t.scale_rewards.then(|| ReturnScaler::new(t.gamma));
    let mut act_rng: ChaCha8Rng = task_rng(seed, ACTION_STREAM);
    let mut curve = Vec::new();
    let mut pending = Vec::new();
    let (mut frames, mut next_eval, mut next_task, mut updates) = (0u64, 0u64, 0u64, 0usize);
    loop {
        let due = frames >= next_eval || frames >= t.frames;
        if due {
            let returns = evaluate(&agent, cfg, seed, curve.len() as u64)?;
            let ci = bootstrap_ci(&returns, BOOTSTRAP_ITERS, CI_LEVEL, seed)?;
            let point = CurvePoint {
                frames,
                seed,
                eval_return_mean: mean(&returns),
                ci_low: ci.low,
                ci_high: ci.high,
                loss: mean_stats(&pending),
            };
            pending.clear();
            on_checkpoint(&point, &agent)?;
            let reached = t.stop_at.is_some_and(|s| point.eval_return_mean >= s);
            curve.push(point);
            while next_eval <= frames {
                next_eval += t.eval_every;
            }
            if reached || frames >= t.frames {
                break;
            }
        }
        let mut tasks = (0..t.batch as u64)
            .map(|i| env_sample_task(cfg.env.kind, &env, seed, next_task + i))
            .collect::<Result<Vec<_>>>()?;
        next_task += t.batch as u64;
        let (batch, graph) = collect_meta_episodes(&agent, &mut tasks, &mut act_rng)?;
        frames += batch.frames();
        if let Some(s) = scaler.as_mut() {
            update_cfg.reward_scale = s.observe(&batch.rewards, &batch.meta_done);
        }
        pending.push(ppo_update(&mut agent.store, &mut adam, &batch, graph, &update_cfg, updates)?);
        updates += 1;
    }
    Ok(RunResult {
        seed,
        curve,
        agent,
        frames,
        updates,
    })
}

/// Runs `jobs` at a time on scoped threads, keeping input order in the output.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().expect("slot lock") = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item ran"))
        .collect()
}

/// Trains every configured seed.
pub fn train_seeds<T: Scalar + Send + Sync>(cfg: &TrainConfig, jobs: usize) -> Result<Vec<RunResult<T>>> {
    parallel_map(&cfg.train.seeds, jobs, |&seed| train::<T>(cfg, seed, |_, _| Ok(())))
        .into_iter()
        .collect()
}

/// Mean over seeds at one checkpoint, with a bootstrap interval over seed means.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub frames: u64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seeds: usize,
}

/// Summaries at every checkpoint reached by all runs.
pub fn summarize<T>(runs: &[RunResult<T>]) -> Result<Vec<SeedSummary>> {
    let shortest = runs.iter().map(|r| r.curve.len()).min().unwrap_or(0);
    (0..shortest)
        .map(|i| {
            let values: Vec<f64> = runs.iter().map(|r| r.curve[i].eval_return_mean).collect();
            let ci = bootstrap_ci(&values, BOOTSTRAP_ITERS, CI_LEVEL, i as u64)?;
            Ok(SeedSummary {
                frames: runs[0].curve[i].frames,
                mean: mean(&values),
                ci_low: ci.low,
                ci_high: ci.high,
                seeds: values.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepEntry<T> {
    pub lr: f64,
    /// Mean return over all checkpoints and seeds.
    pub score: f64,
    pub runs: Vec<RunResult<T>>,
}

#[derive(Clone, Debug)]
pub struct SweepResult<T> {
    pub best_lr: f64,
    pub entries: Vec<SweepEntry<T>>,
}

/// Picks the highest-scoring learning rate; exact ties go to the smaller rate.
pub fn best_lr(scores: &[(f64, f64)]) -> Option<f64> {
    scores
        .iter()
        .copied()
        .reduce(|best, cand| {
            if cand.1 > best.1 || (cand.1 == best.1 && cand.0 < best.0) {
                cand
            } else {
                best
            }
        })
        .map(|(lr, _)| lr)
}

/// Trains every (learning rate, seed) pair of `grid`.
pub fn lr_sweep<T: Scalar + Send + Sync>(base: &TrainConfig, grid: &[f64], jobs: usize) -> Result<SweepResult<T>> {
    if grid.is_empty() {
        return Err(Error::config("grid", "needs at least one learning rate"));
    }
    let pairs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&lr| base.train.seeds.iter().map(move |&s| (lr, s)))
        .collect();
    let results = parallel_map(&pairs, jobs, |&(lr, seed)| {
        let mut cfg = base.clone();
        cfg.train.lr = lr;
        train::<T>(&cfg, seed, |_, _| Ok(()))
    });
    let mut runs = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let entries: Vec<SweepEntry<T>> = grid
        .iter()
        .map(|&lr| {
            let runs: Vec<_> = runs.by_ref().take(base.train.seeds.len()).collect();
            let score = mean(
                &runs
                    .iter()
                    .flat_map(|r| r.curve.iter().map(|p| p.eval_return_mean))
                    .collect::<Vec<_>>(),
            );
            SweepEntry { lr, score, runs }
        })
        .collect();
    let scores: Vec<(f64, f64)> = entries.iter().map(|e| (e.lr, e.score)).collect();
    Ok(SweepResult {
        best_lr: best_lr(&scores).expect("non-empty grid"),
        entries,
    })
}

/// The learning-rate grid used when none is given.
pub fn default_grid() -> Vec<f64> {
    LR_GRID.to_vec()
}
