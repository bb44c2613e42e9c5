use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cells::{Gru, Lstm, LstmState};
use super::params::{Bound, Linear, ParamId, ParamStore};
use super::{SequenceModelSpec, Variant};
use crate::aggregators::{aggregate_step, AggKind, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::gradcore::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parameter layout of one sequence model inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub spec: SequenceModelSpec,
    pub in_dim: usize,
    gru: Option<Gru>,
    lstm: Option<Lstm>,
    /// Linear encoder: over the GRU output, or over raw transitions without one.
    enc: Option<Linear>,
    eta: Option<ParamId>,
}

/// Recurrent and aggregator nodes carried between steps of one batch.
#[derive(Clone, Debug)]
pub struct ModelState {
    h: Option<NodeId>,
    c: Option<NodeId>,
    agg: Option<NodeId>,
    rows: usize,
    pub t: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOut {
    /// Embedding `f_t`.
    pub f: NodeId,
    /// Aggregator input `e_t` (the aggregated half for split models).
    pub agg_input: Option<NodeId>,
    /// Aggregator read-out; for `pearl` this holds mean then variance.
    pub agg_read: Option<NodeId>,
    /// Recurrent input `x_t`.
    pub input: NodeId,
}

impl SequenceModel {
    pub fn new<T: Scalar, R: Rng>(
        spec: SequenceModelSpec,
        in_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if in_dim == 0 {
            return Err(Error::config("in_dim", "must be positive"));
        }
        let v = spec.variant;
        let gru = v
            .has_gru()
            .then(|| Gru::new(store, "gru", in_dim, spec.hidden, rng));
        let lstm = (v == Variant::LstmInvinit).then(|| {
            let cell = Lstm::new(store, "lstm", in_dim, spec.hidden, rng);
            cell.invariant_init(store, 1e-4);
            cell
        });
        let enc = match v {
            Variant::Rnn | Variant::LstmInvinit => None,
            _ if v.has_gru() => Some(Linear::new(store, "enc", spec.hidden, spec.embed, rng)),
            _ => Some(Linear::new(store, "enc", in_dim, spec.embed, rng)),
        };
        let eta = spec
            .aggregator()
            .filter(|k| k.has_temperature())
            .map(|_| store.push("eta", Matrix::scalar(T::of(DEFAULT_TEMPERATURE))));
        Ok(SequenceModel {
            spec,
            in_dim,
            gru,
            lstm,
            enc,
            eta,
        })
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn gru(&self) -> Option<&Gru> {
        self.gru.as_ref()
    }

    pub fn lstm(&self) -> Option<&Lstm> {
        self.lstm.as_ref()
    }

    pub fn encoder(&self) -> Option<&Linear> {
        self.enc.as_ref()
    }

    pub fn eta(&self) -> Option<ParamId> {
        self.eta
    }

    pub fn start(&self, rows: usize) -> ModelState {
        ModelState {
            h: None,
            c: None,
            agg: None,
            rows,
            t: 0,
        }
    }

    /// Consumes `x` (`rows x in_dim`) and returns the embedding for this step.
    /// `noise` is the unit-normal draw for sampling models, `rows x noise_width`.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        state: &mut ModelState,
        x: NodeId,
        noise: Option<NodeId>,
    ) -> Result<StepOut> {
        let (rows, w) = tape.shape(x);
        if w != self.in_dim || rows != state.rows {
            return Err(Error::Dims(format!(
                "model input {rows}x{w}, expected {}x{}",
                state.rows, self.in_dim
            )));
        }
        let hidden = self.spec.hidden;
        let zeros = |tape: &mut Tape<T>| tape.constant(Matrix::zeros(rows, hidden));

        let rec = if let Some(gru) = &self.gru {
            let h = match state.h {
                Some(h) => h,
                None => zeros(tape),
            };
            let h = gru.step(tape, bound, h, x)?;
            state.h = Some(h);
            Some(h)
        } else if let Some(lstm) = &self.lstm {
            let prev = match (state.h, state.c) {
                (Some(h), Some(c)) => LstmState { h, c },
                _ => LstmState {
                    h: zeros(tape),
                    c: zeros(tape),
                },
            };
            let next = lstm.step(tape, bound, prev, x)?;
            state.h = Some(next.h);
            state.c = Some(next.c);
            Some(next.h)
        } else {
            None
        };
        state.t += 1;

        let Some(enc) = &self.enc else {
            let f = rec.expect("recurrent variant");
            return Ok(StepOut {
                f,
                agg_input: None,
                agg_read: None,
                input: x,
            });
        };
        let e = enc.apply(tape, bound, rec.unwrap_or(x))?;
        let kind = self.spec.aggregator().expect("encoder implies aggregator");
        let half = self.spec.embed / 2;
        let (skip, agg_in) = if self.spec.variant.splits() {
            (Some(tape.slice(e, 0, half)?), tape.slice(e, half, half)?)
        } else {
            (None, e)
        };
        let eta = self.eta.map(|id| bound.at(id));
        let read = aggregate_step(tape, kind, eta, state.agg, agg_in, self.spec.st_gradient)?;
        state.agg = Some(read);
        let g = readout(tape, kind, read, noise)?;
        let f = match skip {
            Some(s) => tape.concat(&[s, g])?,
            None => g,
        };
        Ok(StepOut {
            f,
            agg_input: Some(agg_in),
            agg_read: Some(read),
            input: x,
        })
    }

    /// Embeddings for a whole sequence of inputs.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        xs: &[NodeId],
        noise: &[NodeId],
    ) -> Result<Vec<StepOut>> {
        let rows = xs.first().map_or(0, |&x| tape.shape(x).0);
        let mut state = self.start(rows);
        xs.iter()
            .enumerate()
            .map(|(t, &x)| self.step(tape, bound, &mut state, x, noise.get(t).copied()))
            .collect()
    }
}

/// Aggregate handed downstream: the read-out itself, or a reparameterized
/// sample for `pearl`.
fn readout<T: Scalar>(
    tape: &mut Tape<T>,
    kind: AggKind,
    read: NodeId,
    noise: Option<NodeId>,
) -> Result<NodeId> {
    if kind != AggKind::Pearl {
        return Ok(read);
    }
    let u = noise.ok_or_else(|| Error::config("noise", "pearl needs a unit-normal draw per step"))?;
    let h = tape.shape(read).1 / 2;
    let mean = tape.slice(read, 0, h)?;
    let var = tape.slice(read, h, h)?;
    let sd = tape.sqrt(var)?;
    let spread = tape.mul(sd, u)?;
    tape.add(mean, spread)
}

/// `KL(N(mean, var) || N(0, 1))` summed over latent dims and averaged over rows.
pub fn pearl_kl_node<T: Scalar>(tape: &mut Tape<T>, read: NodeId) -> Result<NodeId> {
    let (rows, w) = tape.shape(read);
    let h = w / 2;
    let mean = tape.slice(read, 0, h)?;
    let var = tape.slice(read, h, h)?;
    let m2 = tape.square(mean)?;
    let lv = tape.log(var)?;
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, lv)?;
    let c = tape.shift(b, -T::one())?;
    let s = tape.sum(c)?;
    tape.scale(s, T::of(0.5 / rows as f64))
}
