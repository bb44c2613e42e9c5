use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::TaskInstance;
use crate::error::{Error, Result};
use crate::gradcore::{NodeId, Tape};
use crate::policy::{policy_act, PolicyHead, PolicySpec};
use crate::scalar::Scalar;
use crate::seqmodel::{Bound, ParamStore, SequenceModel, SequenceModelSpec, Transition};
use crate::tensor::Matrix;

/// Sequence model and policy head sharing one parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent<T> {
    pub model: SequenceModel,
    pub head: PolicyHead,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Agent<T> {
    pub fn new<R: Rng>(spec: SequenceModelSpec, obs_dim: usize, n_actions: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let in_dim = Transition::<T>::width(obs_dim, n_actions);
        let model = SequenceModel::new(spec, in_dim, &mut store, rng)?;
        let head = PolicyHead::new(
            PolicySpec::new(obs_dim, n_actions),
            model.output_width(),
            &mut store,
            rng,
        );
        Ok(Agent { model, head, store })
    }

    pub fn obs_dim(&self) -> usize {
        self.head.spec.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.head.spec.n_actions
    }
}

/// Per-step records of `rows` meta-episodes run in lockstep; every vector is
/// indexed `[t][row]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch<T> {
    pub rows: usize,
    pub obs: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<usize>>,
    pub logprobs: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    pub entropies: Vec<Vec<T>>,
    pub rewards: Vec<Vec<f64>>,
    pub episode_done: Vec<Vec<bool>>,
    pub meta_done: Vec<Vec<bool>>,
    /// Embedding `f_t` of every row.
    pub embeddings: Vec<Matrix<T>>,
}

impl<T: Scalar> RolloutBatch<T> {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn frames(&self) -> u64 {
        (self.steps() * self.rows) as u64
    }

    /// Undiscounted return of every meta-episode.
    pub fn returns(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.rewards.iter().map(|step| step[r]).sum())
            .collect()
    }
}

/// The differentiable record of a rollout: parameters bound on `tape` and
/// the per-step heads.
pub struct RolloutGraph<T: Scalar> {
    pub tape: Tape<T>,
    pub bound: Bound,
    pub logits: Vec<NodeId>,
    pub values: Vec<NodeId>,
    /// Aggregator read-outs, kept for the latent penalty of sampling models.
    pub reads: Vec<NodeId>,
}

/// Runs one meta-episode in each task, all in lockstep on a single tape.
///
/// `rng` supplies the action uniforms and latent draws; tasks carry their own
/// dynamics streams.
pub fn collect_meta_episodes<T: Scalar, R: Rng>(
    agent: &Agent<T>,
    tasks: &mut [TaskInstance],
    rng: &mut R,
) -> Result<(RolloutBatch<T>, RolloutGraph<T>)> {
    let rows = tasks.len();
    let Some(first) = tasks.first() else {
        return Err(Error::config("batch", "needs at least one meta-episode"));
    };
    let steps = first.meta_len();
    if tasks.iter().any(|t| t.meta_len() != steps) {
        return Err(Error::Dims("meta-episodes in a batch must share a length".into()));
    }
    let (d, na) = (agent.obs_dim(), agent.n_actions());
    let width = Transition::<T>::width(d, na);

    let mut tape = Tape::new();
    let bound = agent.store.bind(&mut tape);
    let mut state = agent.model.start(rows);
    let noise_width = agent.model.spec.noise_width();

    let mut obs: Vec<Vec<f64>> = tasks.iter_mut().map(TaskInstance::reset).collect();
    let mut trans: Vec<Transition<T>> = obs
        .iter()
        .map(|o| Transition::opening(o.iter().map(|&x| T::of(x)).collect()))
        .collect();

    let mut batch = RolloutBatch {
        rows,
        obs: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        logprobs: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps),
        entropies: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        episode_done: Vec::with_capacity(steps),
        meta_done: Vec::with_capacity(steps),
        embeddings: Vec::with_capacity(steps),
    };
    let mut graph_logits = Vec::with_capacity(steps);
    let mut graph_values = Vec::with_capacity(steps);
    let mut reads = Vec::new();

    for _ in 0..steps {
        let mut x = Matrix::zeros(rows, width);
        for (r, tr) in trans.iter().enumerate() {
            tr.write_features(na, x.row_mut(r));
        }
        let x = tape.constant(x);
        let noise = noise_width.map(|w| {
            let draws = (0..rows * w).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
            tape.constant(Matrix::from_vec(rows, w, draws).expect("sized"))
        });
        let out = agent.model.step(&mut tape, &bound, &mut state, x, noise)?;
        if noise.is_some() {
            reads.extend(out.agg_read);
        }
        let s = Matrix::from_vec(rows, d, obs.iter().flatten().map(|&v| T::of(v)).collect())?;
        let s = tape.constant(s);
        let (logits, value) = agent.head.heads(&mut tape, &bound, out.f, s)?;

        let mut acts = Vec::with_capacity(rows);
        let (mut lps, mut ents, mut rews, mut eps, mut metas) = (
            Vec::with_capacity(rows),
            Vec::with_capacity(rows),
            Vec::with_capacity(rows),
            Vec::with_capacity(rows),
            Vec::with_capacity(rows),
        );
        for r in 0..rows {
            let act = policy_act(tape.value(logits).row(r), rng.gen::<f64>());
            let res = tasks[r].env_step(act.action)?;
            trans[r] = Transition {
                s: obs[r].iter().map(|&v| T::of(v)).collect(),
                a: act.action,
                r: T::of(res.reward),
                s_next: res.obs.iter().map(|&v| T::of(v)).collect(),
                done: res.episode_done,
            };
            acts.push(act.action);
            lps.push(act.logprob);
            ents.push(act.entropy);
            rews.push(res.reward);
            eps.push(res.episode_done);
            metas.push(res.meta_episode_done);
            obs[r] = res.obs;
        }
        batch.obs.push(
            trans
                .iter()
                .map(|t| t.s.iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
        );
        batch.actions.push(acts);
        batch.logprobs.push(lps);
        batch.values.push(tape.value(value).data().to_vec());
        batch.entropies.push(ents);
        batch.rewards.push(rews);
        batch.episode_done.push(eps);
        batch.meta_done.push(metas);
        batch.embeddings.push(tape.value(out.f).clone());
        graph_logits.push(logits);
        graph_values.push(value);
    }
    Ok((
        batch,
        RolloutGraph {
            tape,
            bound,
            logits: graph_logits,
            values: graph_values,
            reads,
        },
    ))
}
