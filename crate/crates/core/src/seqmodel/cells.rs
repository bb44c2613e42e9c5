use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::gradcore::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Gated recurrent unit. Gate blocks are laid out `[update | reset | candidate]`.
///
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + bn + r ⊙ (h Un))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub wx: ParamId,
    pub bx: ParamId,
    pub uh: ParamId,
    pub n_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wx = store.push(format!("{name}.wx"), fan_in_uniform(n_in, 3 * hidden, rng));
        let bx = store.push(format!("{name}.bx"), Matrix::zeros(1, 3 * hidden));
        let uh = store.push(format!("{name}.uh"), fan_in_uniform(hidden, 3 * hidden, rng));
        Gru {
            wx,
            bx,
            uh,
            n_in,
            hidden,
        }
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        h: NodeId,
        x: NodeId,
    ) -> Result<NodeId> {
        let hw = self.hidden;
        let gx = tape.affine(x, bound.at(self.wx), bound.at(self.bx))?;
        let gh = tape.matmul(h, bound.at(self.uh))?;
        let gate = |tape: &mut Tape<T>, k: usize| -> Result<NodeId> {
            let a = tape.slice(gx, k * hw, hw)?;
            let b = tape.slice(gh, k * hw, hw)?;
            let s = tape.add(a, b)?;
            tape.sigmoid(s)
        };
        let z = gate(tape, 0)?;
        let r = gate(tape, 1)?;
        let nx = tape.slice(gx, 2 * hw, hw)?;
        let nh = tape.slice(gh, 2 * hw, hw)?;
        let rn = tape.mul(r, nh)?;
        let pre = tape.add(nx, rn)?;
        let n = tape.tanh(pre)?;
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }
}

/// Long short-term memory cell with gate blocks `[input | forget | cell | output]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: ParamId,
    pub bx: ParamId,
    pub uh: ParamId,
    pub n_in: usize,
    pub hidden: usize,
}

/// Hidden and cell state node pair.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Bias that makes a sigmoid gate output `1 - eps`.
pub fn open_gate_bias(eps: f64) -> f64 {
    ((1.0 - eps) / eps).ln()
}

impl Lstm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wx = store.push(format!("{name}.wx"), fan_in_uniform(n_in, 4 * hidden, rng));
        let bx = store.push(format!("{name}.bx"), Matrix::zeros(1, 4 * hidden));
        let uh = store.push(format!("{name}.uh"), fan_in_uniform(hidden, 4 * hidden, rng));
        Lstm {
            wx,
            bx,
            uh,
            n_in,
            hidden,
        }
    }

    /// Initialization under which the cell is a running sum of candidate
    /// inputs, independent of input order.
    ///
    /// Input and forget gates get zero weights and a bias opening them to
    /// `1 - eps`. Recurrent weights into the cell and output gates are zeroed,
    /// and so are the output gate's input weights, which leaves the output a
    /// fixed squashing of the cell state.
    pub fn invariant_init<T: Scalar>(&self, store: &mut ParamStore<T>, eps: f64) {
        let hw = self.hidden;
        let bias = T::of(open_gate_bias(eps));
        let zero_cols = |m: &mut Matrix<T>, blocks: &[usize]| {
            for r in 0..m.rows() {
                for &k in blocks {
                    m.row_mut(r)[k * hw..(k + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v = T::zero());
                }
            }
        };
        zero_cols(store.get_mut(self.wx), &[0, 1, 3]);
        zero_cols(store.get_mut(self.uh), &[0, 1, 2, 3]);
        let b = store.get_mut(self.bx);
        for j in 0..4 * hw {
            b.set(0, j, if j < 2 * hw { bias } else { T::zero() });
        }
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        state: LstmState,
        x: NodeId,
    ) -> Result<LstmState> {
        let hw = self.hidden;
        let gx = tape.affine(x, bound.at(self.wx), bound.at(self.bx))?;
        let gh = tape.matmul(state.h, bound.at(self.uh))?;
        let pre = tape.add(gx, gh)?;
        let block = |tape: &mut Tape<T>, k: usize| tape.slice(pre, k * hw, hw);
        let (i, f, g, o) = (block(tape, 0)?, block(tape, 1)?, block(tape, 2)?, block(tape, 3)?);
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c)?;
        let h = tape.mul(o, squashed)?;
        Ok(LstmState { h, c })
    }
}
