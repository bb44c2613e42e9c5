//! Hypernetwork policy head and critic.
//!
//! The embedding `f_t` is projected to `z_t`, from which a linear
//! hypernetwork emits every weight of a one-hidden-layer tanh policy over the
//! current observation. The critic is a plain MLP on `(z_t, s_t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcore::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::seqmodel::{fan_in_uniform, Bound, Linear, ParamStore};

/// Widths of the two successive projections of the embedding.
pub const PROJECTION: [usize; 2] = [24, 25];
pub const POLICY_HIDDEN: usize = 32;
pub const CRITIC_HIDDEN: usize = 64;
/// Scale of the hypernetwork's initial weights.
pub const HYPER_INIT_SCALE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub critic_hidden: usize,
}

impl PolicySpec {
    pub fn new(obs_dim: usize, n_actions: usize) -> Self {
        PolicySpec {
            obs_dim,
            n_actions,
            hidden: POLICY_HIDDEN,
            critic_hidden: CRITIC_HIDDEN,
        }
    }

    /// Number of generated scalars: `W1, b1, W2, b2` of the policy network.
    pub fn generated(&self) -> usize {
        let (d, h, a) = (self.obs_dim, self.hidden, self.n_actions);
        d * h + h + h * a + a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyHead {
    pub spec: PolicySpec,
    pub proj: [Linear; 2],
    pub hyper: Linear,
    pub critic: [Linear; 2],
}

/// Per-row weights of the generated policy network.
#[derive(Clone, Copy, Debug)]
pub struct PolicyParams {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl PolicyHead {
    pub fn new<T: Scalar, R: Rng>(
        spec: PolicySpec,
        embed_width: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let p1 = Linear::new(store, "proj1", embed_width, PROJECTION[0], rng);
        let p2 = Linear::new(store, "proj2", PROJECTION[0], PROJECTION[1], rng);
        let hyper = Linear::new(store, "hyper", PROJECTION[1], spec.generated(), rng);
        store.get_mut(hyper.w).scale_assign(T::of(HYPER_INIT_SCALE));
        // generated first layer starts as an ordinary fan-in init; the output
        // layer starts at zero so the initial policy is uniform
        let w1 = fan_in_uniform::<T, R>(spec.obs_dim, spec.hidden, rng);
        let b = store.get_mut(hyper.b);
        b.row_mut(0)[..w1.len()].copy_from_slice(w1.data());
        let c1 = Linear::new(
            store,
            "critic1",
            PROJECTION[1] + spec.obs_dim,
            spec.critic_hidden,
            rng,
        );
        let c2 = Linear::new(store, "critic2", spec.critic_hidden, 1, rng);
        PolicyHead {
            spec,
            proj: [p1, p2],
            hyper,
            critic: [c1, c2],
        }
    }

    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, f: NodeId) -> Result<NodeId> {
        let a = self.proj[0].apply(tape, bound, f)?;
        self.proj[1].apply(tape, bound, a)
    }

    pub fn generate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        z: NodeId,
    ) -> Result<PolicyParams> {
        let (d, h, a) = (self.spec.obs_dim, self.spec.hidden, self.spec.n_actions);
        let flat = self.hyper.apply(tape, bound, z)?;
        let w1 = tape.slice(flat, 0, d * h)?;
        let b1 = tape.slice(flat, d * h, h)?;
        let w2 = tape.slice(flat, d * h + h, h * a)?;
        let b2 = tape.slice(flat, d * h + h + h * a, a)?;
        Ok(PolicyParams { w1, b1, w2, b2 })
    }

    /// Action logits of the generated network at observations `s`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &PolicyParams, s: NodeId) -> Result<NodeId> {
        let a = tape.row_matvec(s, p.w1)?;
        let a = tape.add(a, p.b1)?;
        let hid = tape.tanh(a)?;
        let out = tape.row_matvec(hid, p.w2)?;
        tape.add(out, p.b2)
    }

    pub fn value<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        z: NodeId,
        s: NodeId,
    ) -> Result<NodeId> {
        let x = tape.concat(&[z, s])?;
        let a = self.critic[0].apply(tape, bound, x)?;
        let hid = tape.tanh(a)?;
        self.critic[1].apply(tape, bound, hid)
    }

    /// Logits and value for embedding `f` at observations `s`.
    pub fn heads<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        f: NodeId,
        s: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let z = self.project(tape, bound, f)?;
        let p = self.generate(tape, bound, z)?;
        let logits = self.logits(tape, &p, s)?;
        let v = self.value(tape, bound, z, s)?;
        Ok((logits, v))
    }
}

/// Sample of a categorical policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Act<T> {
    pub action: usize,
    pub logprob: T,
    pub entropy: T,
}

/// Softmax probabilities of one logit row.
pub fn probabilities<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Draws an action by inverting the CDF at `u ∈ [0, 1)`.
pub fn policy_act<T: Scalar>(logits: &[T], u: f64) -> Act<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<T>().ln();
    let logp: Vec<T> = logits.iter().map(|&l| l - lse).collect();
    let mut acc = 0.0;
    let mut action = logits.len() - 1;
    for (k, lp) in logp.iter().enumerate() {
        acc += lp.to_f64_lossy().exp();
        if u < acc {
            action = k;
            break;
        }
    }
    let entropy = -logp.iter().map(|&lp| lp.exp() * lp).sum::<T>();
    Act {
        action,
        logprob: logp[action],
        entropy,
    }
}
