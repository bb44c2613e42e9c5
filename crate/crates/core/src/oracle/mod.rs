//! Exact task posteriors over finite sets of tabular MDPs.
//!
//! The posterior after a trajectory is the prior times the product of
//! per-transition likelihoods; policy terms are shared by every task and
//! cancel. Products are taken as sums of logs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permute::{all_permutations, apply, sample_permutations};

const SUM_TOL: f64 = 1e-12;

/// One observed step of a tabular task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabTransition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// Finite MDP with a finite reward support per state-action pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    /// `trans[s][a][s']`.
    pub trans: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`: `(value, probability)` pairs.
    pub rewards: Vec<Vec<Vec<(f64, f64)>>>,
}

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.trans.len()
    }

    pub fn n_actions(&self) -> usize {
        self.trans.first().map_or(0, Vec::len)
    }

    /// `ln P(r, s' | s, a)`; `-inf` when impossible.
    pub fn log_likelihood(&self, t: &TabTransition) -> f64 {
        let p_next = self
            .trans
            .get(t.s)
            .and_then(|row| row.get(t.a))
            .and_then(|row| row.get(t.s_next))
            .copied()
            .unwrap_or(0.0);
        let p_r: f64 = self
            .rewards
            .get(t.s)
            .and_then(|row| row.get(t.a))
            .map_or(0.0, |support| {
                support.iter().filter(|(v, _)| *v == t.r).map(|(_, p)| p).sum()
            });
        (p_next * p_r).ln()
    }

    /// Draws `(r, s')` for `(s, a)`.
    pub fn sample<R: Rng>(&self, s: usize, a: usize, rng: &mut R) -> TabTransition {
        let pick = |probs: &mut dyn Iterator<Item = f64>, rng: &mut R| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, p) in probs.enumerate() {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
            last
        };
        let s_next = pick(&mut self.trans[s][a].iter().copied(), rng);
        let support = &self.rewards[s][a];
        let k = pick(&mut support.iter().map(|&(_, p)| p), rng);
        TabTransition {
            s,
            a,
            r: support[k].0,
            s_next,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularTaskSet {
    pub tasks: Vec<TabularMdp>,
    pub prior: Vec<f64>,
}

impl TabularTaskSet {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTaskSet(msg));
        if self.tasks.is_empty() || self.tasks.len() != self.prior.len() {
            return bad(format!(
                "{} tasks with {} prior entries",
                self.tasks.len(),
                self.prior.len()
            ));
        }
        if self.prior.iter().any(|&p| !(p >= 0.0)) || (self.prior.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
            return bad("prior must be a distribution".into());
        }
        let (ns, na) = (self.tasks[0].n_states(), self.tasks[0].n_actions());
        for (m, task) in self.tasks.iter().enumerate() {
            if task.n_states() != ns || task.n_actions() != na || task.rewards.len() != ns {
                return bad(format!("task {m} has a different shape"));
            }
            for s in 0..ns {
                if task.trans[s].len() != na || task.rewards[s].len() != na {
                    return bad(format!("task {m}, state {s}: wrong action count"));
                }
                for a in 0..na {
                    let row = &task.trans[s][a];
                    if row.len() != ns || row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
                        return bad(format!("task {m}: transition row ({s}, {a}) is not a distribution"));
                    }
                    let rw = &task.rewards[s][a];
                    if rw.iter().any(|&(_, p)| !(p >= 0.0)) || (rw.iter().map(|&(_, p)| p).sum::<f64>() - 1.0).abs() > SUM_TOL {
                        return bad(format!("task {m}: reward distribution ({s}, {a}) is not a distribution"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Unnormalized log posterior of every task.
    fn log_joint(&self, traj: &[TabTransition]) -> Vec<f64> {
        self.tasks
            .iter()
            .zip(&self.prior)
            .map(|(task, &p)| p.ln() + traj.iter().map(|t| task.log_likelihood(t)).sum::<f64>())
            .collect()
    }
}

fn normalize_logs(logs: &[f64]) -> Result<Vec<f64>> {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::UndefinedPosterior);
    }
    let w: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// `P(M | τ)` for every task in the set.
pub fn exact_posterior(tasks: &TabularTaskSet, traj: &[TabTransition]) -> Result<Vec<f64>> {
    normalize_logs(&tasks.log_joint(traj))
}

/// Bayesian filtering one transition at a time.
pub fn posterior_filter(tasks: &TabularTaskSet, traj: &[TabTransition]) -> Result<Vec<f64>> {
    let mut belief = tasks.prior.clone();
    for t in traj {
        let logs: Vec<f64> = belief
            .iter()
            .zip(&tasks.tasks)
            .map(|(&b, task)| b.ln() + task.log_likelihood(t))
            .collect();
        belief = normalize_logs(&logs)?;
    }
    Ok(belief)
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest L∞ distance between the posterior of `traj` and that of a
/// reordering. Every ordering is tried when there are at most `n_perms`,
/// otherwise `n_perms` random ones.
pub fn posterior_permutation_check<R: Rng>(
    tasks: &TabularTaskSet,
    traj: &[TabTransition],
    n_perms: usize,
    rng: &mut R,
) -> Result<f64> {
    let base = exact_posterior(tasks, traj)?;
    let n = traj.len();
    let total: usize = (1..=n).product();
    let perms = if n <= 8 && total <= n_perms {
        all_permutations(n)
    } else {
        sample_permutations(n, n_perms, rng)
    };
    perms.iter().try_fold(0.0, |worst: f64, p| {
        let post = exact_posterior(tasks, &apply(traj, p))?;
        Ok(worst.max(linf(&post, &base)))
    })
}

/// Two Bernoulli bandits with success probabilities 0.5 and 0.7.
pub fn bandit_suite() -> TabularTaskSet {
    let arm = |p: f64| TabularMdp {
        trans: vec![vec![vec![1.0]]],
        rewards: vec![vec![vec![(0.0, 1.0 - p), (1.0, p)]]],
    };
    TabularTaskSet {
        tasks: vec![arm(0.5), arm(0.7)],
        prior: vec![0.5, 0.5],
    }
}

/// Four-state ring with two actions; the tasks differ in slip probability
/// and in which state pays out.
pub fn gridworld_suite() -> TabularTaskSet {
    let ring = |slip: f64, goal: usize| {
        let n = 4;
        let trans = (0..n)
            .map(|s| {
                (0..2)
                    .map(|a| {
                        let mut row = vec![0.0; n];
                        let fwd = if a == 0 { (s + 1) % n } else { (s + n - 1) % n };
                        row[fwd] += 1.0 - slip;
                        row[s] += slip;
                        row
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n)
            .map(|s| {
                (0..2)
                    .map(|_| {
                        if s == goal {
                            vec![(1.0, 0.8), (0.0, 0.2)]
                        } else {
                            vec![(0.0, 0.9), (1.0, 0.1)]
                        }
                    })
                    .collect()
            })
            .collect();
        TabularMdp { trans, rewards }
    };
    TabularTaskSet {
        tasks: vec![ring(0.1, 0), ring(0.3, 2)],
        prior: vec![0.4, 0.6],
    }
}

/// Trajectory of `len` steps in task `task` under a uniform random policy.
pub fn sample_trajectory<R: Rng>(
    tasks: &TabularTaskSet,
    task: usize,
    len: usize,
    rng: &mut R,
) -> Vec<TabTransition> {
    let m = &tasks.tasks[task];
    let mut s = 0;
    (0..len)
        .map(|_| {
            let a = rng.gen_range(0..m.n_actions());
            let t = m.sample(s, a, rng);
            s = t.s_next;
            t
        })
        .collect()
}

/// Outcome of one built-in suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub permutation_deviation: f64,
    pub filter_deviation: f64,
}

impl SuiteReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.permutation_deviation <= tol && self.filter_deviation <= tol
    }
}

/// Runs a suite on `trajectories` random trajectories of length `len`,
/// enumerating every permutation of each.
pub fn run_suite<R: Rng>(
    name: &'static str,
    tasks: &TabularTaskSet,
    trajectories: usize,
    len: usize,
    rng: &mut R,
) -> Result<SuiteReport> {
    tasks.validate()?;
    let mut report = SuiteReport {
        name,
        permutation_deviation: 0.0,
        filter_deviation: 0.0,
    };
    let all: usize = (1..=len).product();
    for i in 0..trajectories {
        let traj = sample_trajectory(tasks, i % tasks.tasks.len(), len, rng);
        let dev = posterior_permutation_check(tasks, &traj, all, rng)?;
        let batch = exact_posterior(tasks, &traj)?;
        let rec = posterior_filter(tasks, &traj)?;
        report.permutation_deviation = report.permutation_deviation.max(dev);
        report.filter_deviation = report.filter_deviation.max(linf(&batch, &rec));
    }
    Ok(report)
}
