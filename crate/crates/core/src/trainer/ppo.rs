use crate::error::{Error, Result};
use crate::gradcore::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::seqmodel::{pearl_kl_node, ParamStore};
use crate::tensor::Matrix;

use super::rollout::{RolloutBatch, RolloutGraph};

/// GAE output, indexed `[t][row]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub raw: Vec<Vec<f64>>,
    /// `raw` shifted and scaled to mean 0, std 1 over the whole batch.
    pub normalized: Vec<Vec<f64>>,
    /// Value targets `raw + V`.
    pub returns: Vec<Vec<f64>>,
}

/// Generalized advantage estimation. A meta-episode is one trajectory: only
/// `meta_done` cuts the recursion, inner episode ends do not.
pub fn compute_advantages(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    meta_done: &[Vec<bool>],
    gamma: f64,
    lambda: f64,
) -> Advantages {
    let steps = rewards.len();
    let rows = rewards.first().map_or(0, Vec::len);
    let mut raw = vec![vec![0.0; rows]; steps];
    for r in 0..rows {
        let mut next_adv = 0.0;
        let mut next_value = 0.0;
        for t in (0..steps).rev() {
            let live = if meta_done[t][r] { 0.0 } else { 1.0 };
            let delta = rewards[t][r] + gamma * live * next_value - values[t][r];
            next_adv = delta + gamma * lambda * live * next_adv;
            raw[t][r] = next_adv;
            next_value = values[t][r];
        }
    }
    let returns = raw
        .iter()
        .zip(values)
        .map(|(a, v)| a.iter().zip(v).map(|(a, v)| a + v).collect())
        .collect();
    let n = (steps * rows) as f64;
    let mean = raw.iter().flatten().sum::<f64>() / n;
    let var = raw.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    let normalized = raw
        .iter()
        .map(|row| row.iter().map(|a| (a - mean) / sd).collect())
        .collect();
    Advantages {
        raw,
        normalized,
        returns,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Ratio clip; infinite disables clipping.
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub kl_weight: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub policy: NodeId,
    pub value: NodeId,
    pub entropy: NodeId,
    pub kl: Option<NodeId>,
}

/// Loss terms of one update, recorded before the first parameter step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

fn column<T: Scalar>(tape: &mut Tape<T>, xs: impl Iterator<Item = f64>, rows: usize) -> NodeId {
    let m = Matrix::from_vec(rows, 1, xs.map(T::of).collect()).expect("one value per row");
    tape.constant(m)
}

fn accumulate<T: Scalar>(tape: &mut Tape<T>, acc: Option<NodeId>, x: NodeId) -> Result<NodeId> {
    match acc {
        Some(a) => tape.add(a, x),
        None => Ok(x),
    }
}

/// Appends the clipped-surrogate objective over the whole rollout to its tape.
pub fn build_loss<T: Scalar>(
    graph: &mut RolloutGraph<T>,
    batch: &RolloutBatch<T>,
    adv: &Advantages,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let tape = &mut graph.tape;
    let rows = batch.rows;
    let n_actions = tape.shape(graph.logits[0]).1;
    let (mut pol, mut val, mut ent) = (None, None, None);
    for t in 0..batch.steps() {
        let lsm = tape.log_softmax(graph.logits[t])?;
        let mut onehot = Matrix::zeros(rows, n_actions);
        for (r, &a) in batch.actions[t].iter().enumerate() {
            onehot.set(r, a, T::one());
        }
        let onehot = tape.constant(onehot);
        let picked = tape.mul(lsm, onehot)?;
        let logp = tape.sum_cols(picked)?;
        let old = tape.constant(Matrix::from_vec(rows, 1, batch.logprobs[t].clone())?);
        let diff = tape.sub(logp, old)?;
        let ratio = tape.exp(diff)?;
        let a = column(tape, adv.normalized[t].iter().copied(), rows);
        let s1 = tape.mul(ratio, a)?;
        let surr = if cfg.clip.is_finite() {
            let c = tape.clamp(ratio, T::of(1.0 - cfg.clip), T::of(1.0 + cfg.clip))?;
            let s2 = tape.mul(c, a)?;
            tape.min(s1, s2)?
        } else {
            s1
        };
        let s = tape.sum(surr)?;
        pol = Some(accumulate(tape, pol, s)?);

        let p = tape.exp(lsm)?;
        let plogp = tape.mul(p, lsm)?;
        let s = tape.sum(plogp)?;
        ent = Some(accumulate(tape, ent, s)?);

        let target = column(tape, adv.returns[t].iter().copied(), rows);
        let err = tape.sub(graph.values[t], target)?;
        let sq = tape.square(err)?;
        let s = tape.sum(sq)?;
        val = Some(accumulate(tape, val, s)?);
    }
    let n = (rows * batch.steps()) as f64;
    let (pol, val, ent) = (
        pol.ok_or(Error::EmptyAggregate)?,
        val.ok_or(Error::EmptyAggregate)?,
        ent.ok_or(Error::EmptyAggregate)?,
    );
    let policy = tape.scale(pol, T::of(-1.0 / n))?;
    let value = tape.scale(val, T::of(1.0 / n))?;
    let entropy = tape.scale(ent, T::of(-1.0 / n))?;

    let a = tape.scale(value, T::of(cfg.value_coef))?;
    let b = tape.scale(entropy, T::of(-cfg.entropy_coef))?;
    let mut total = tape.add(policy, a)?;
    total = tape.add(total, b)?;

    let mut kl = None;
    for &read in &graph.reads {
        let k = pearl_kl_node(tape, read)?;
        kl = Some(accumulate(tape, kl, k)?);
    }
    let kl = match kl {
        Some(k) => {
            let k = tape.scale(k, T::of(1.0 / graph.reads.len() as f64))?;
            let w = tape.scale(k, T::of(cfg.kl_weight))?;
            total = tape.add(total, w)?;
            Some(k)
        }
        None => None,
    };
    Ok(LossNodes {
        total,
        policy,
        value,
        entropy,
        kl,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, store: &ParamStore<T>) -> Self {
        let zeros = || store.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Matrix<T>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step = T::of(self.lr / c1);
        let (c2, eps) = (T::of(c2), T::of(self.eps));
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the norm before.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_assign(k));
    }
    norm
}

/// Gradient of `output` with respect to every stored parameter.
pub fn param_grads<T: Scalar>(graph: &RolloutGraph<T>, store: &ParamStore<T>, output: NodeId) -> Result<Vec<Matrix<T>>> {
    let g = graph.tape.backward(output, None)?;
    Ok(store
        .ids()
        .map(|id| g.wrt(graph.bound.at(id), store.get(id).shape()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateConfig {
    pub loss: LossConfig,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Rewards are divided by this before advantages and value targets.
    pub reward_scale: f64,
}

/// Running spread of discounted returns, used to scale rewards for the
/// learner only.
#[derive(Clone, Debug)]
pub struct ReturnScaler {
    gamma: f64,
    count: f64,
    mean: f64,
    m2: f64,
}

impl ReturnScaler {
    pub fn new(gamma: f64) -> Self {
        ReturnScaler {
            gamma,
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    /// Folds in the batch's running discounted returns and gives the current
    /// standard deviation.
    pub fn observe(&mut self, rewards: &[Vec<f64>], meta_done: &[Vec<bool>]) -> f64 {
        let rows = rewards.first().map_or(0, Vec::len);
        for r in 0..rows {
            let mut g = 0.0;
            for (rew, done) in rewards.iter().zip(meta_done) {
                g = g * self.gamma + rew[r];
                self.count += 1.0;
                let d = g - self.mean;
                self.mean += d / self.count;
                self.m2 += d * (g - self.mean);
                if done[r] {
                    g = 0.0;
                }
            }
        }
        self.scale()
    }

    pub fn scale(&self) -> f64 {
        if self.count < 2.0 {
            return 1.0;
        }
        (self.m2 / self.count + 1e-8).sqrt()
    }
}

/// Several full-batch clipped-surrogate steps on one rollout. Later epochs
/// re-evaluate the recorded graph under the updated parameters.
pub fn ppo_update<T: Scalar>(
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &RolloutBatch<T>,
    mut graph: RolloutGraph<T>,
    cfg: &UpdateConfig,
    update: usize,
) -> Result<LossStats> {
    let values: Vec<Vec<f64>> = batch
        .values
        .iter()
        .map(|v| v.iter().map(|x| x.to_f64_lossy()).collect())
        .collect();
    let rewards: Vec<Vec<f64>> = batch
        .rewards
        .iter()
        .map(|r| r.iter().map(|x| x / cfg.reward_scale).collect())
        .collect();
    let adv = compute_advantages(&rewards, &values, &batch.meta_done, cfg.gamma, cfg.lambda);
    let nodes = build_loss(&mut graph, batch, &adv, &cfg.loss)?;
    let read = |tape: &Tape<T>, id: NodeId| tape.value(id).item().to_f64_lossy();
    let mut stats = LossStats::default();
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            graph.tape.update(&store.bindings(&graph.bound))?;
        }
        let total = read(&graph.tape, nodes.total);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss (epoch {epoch})"),
                update,
            });
        }
        let mut grads = param_grads(&graph, store, nodes.total)?;
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient (epoch {epoch})"),
                update,
            });
        }
        if epoch == 0 {
            stats = LossStats {
                total,
                policy: read(&graph.tape, nodes.policy),
                value: read(&graph.tape, nodes.value),
                entropy: read(&graph.tape, nodes.entropy),
                kl: nodes.kl.map_or(0.0, |k| read(&graph.tape, k)),
                grad_norm: norm,
            };
        }
        adam.step(store, &grads);
    }
    if !store.is_finite() {
        return Err(Error::NonFinite {
            what: "parameters".into(),
            update,
        });
    }
    Ok(stats)
}
