use std::sync::Arc;

use super::online::{agg_init, Accum, AggState};
use super::{AggKind, POSITIVE_FLOOR};
use crate::error::{Error, Result};
use crate::gradcore::{
    Aux, FusedBackward, FusedGrads, FusedInput, FusedOp, JacobianMode, NodeId, Tape,
};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Matrix;

/// One online fold step on the tape, batched over rows.
///
/// Inputs are `[prev?, e, eta?]`: the previous step's node (absent on the
/// first step), the `rows x width` encodings, and a `1 x 1` temperature for
/// the softmax kinds. The node value is the read-out; per-row [`AggState`]s
/// live in the node's aux so the next step can continue the fold.
#[derive(Debug)]
pub struct AggregatorOp {
    pub kind: AggKind,
    pub width: usize,
    pub has_prev: bool,
}

struct States<T>(Vec<AggState<T>>);

impl AggregatorOp {
    fn e_index(&self) -> usize {
        usize::from(self.has_prev)
    }

    fn eta_index(&self) -> Option<usize> {
        self.kind.has_temperature().then(|| self.e_index() + 1)
    }

    fn arity(&self) -> usize {
        1 + usize::from(self.has_prev) + usize::from(self.kind.has_temperature())
    }
}

fn states<T: Scalar>(aux: Option<&Aux>) -> &[AggState<T>] {
    &aux.and_then(|a| a.downcast_ref::<States<T>>())
        .expect("aggregator aux")
        .0
}

impl<T: Scalar> FusedOp<T> for AggregatorOp {
    fn name(&self) -> &'static str {
        "aggregate"
    }

    fn output_shape(&self, inputs: &[(usize, usize)]) -> Result<(usize, usize), String> {
        if inputs.len() != self.arity() {
            return Err(format!("expected {} inputs, got {}", self.arity(), inputs.len()));
        }
        self.kind.check_width(self.width).map_err(|e| e.to_string())?;
        let (rows, w) = inputs[self.e_index()];
        if w != self.width {
            return Err(format!("encoding width {w}, aggregator width {}", self.width));
        }
        let out = (rows, self.kind.read_width(self.width));
        if self.has_prev && inputs[0] != out {
            return Err(format!("previous step {:?}, expected {out:?}", inputs[0]));
        }
        if let Some(k) = self.eta_index() {
            if inputs[k] != (1, 1) {
                return Err("temperature must be 1x1".into());
            }
        }
        Ok(out)
    }

    fn forward(&self, inputs: &[FusedInput<'_, T>]) -> (Matrix<T>, Option<Aux>) {
        let e = inputs[self.e_index()].value;
        let eta = self.eta_index().map_or(T::one(), |k| inputs[k].value.item());
        let mut rows: Vec<AggState<T>> = if self.has_prev {
            states::<T>(inputs[0].aux).to_vec()
        } else {
            (0..e.rows())
                .map(|_| agg_init(self.kind, self.width, eta).expect("width checked"))
                .collect()
        };
        let mut out = Matrix::zeros(e.rows(), self.kind.read_width(self.width));
        for (r, st) in rows.iter_mut().enumerate() {
            st.step(e.row(r)).expect("width checked");
            out.row_mut(r).copy_from_slice(&st.read().expect("non-empty"));
        }
        (out, Some(Box::new(States(rows))))
    }

    fn backward(&self, ctx: FusedBackward<'_, T>) -> FusedGrads<T> {
        let e = ctx.inputs[self.e_index()].value;
        let own = states::<T>(ctx.aux);
        let prev = self.has_prev.then(|| states::<T>(ctx.inputs[0].aux));
        let eta = self.eta_index().map_or(T::one(), |k| ctx.inputs[k].value.item());
        let (rows, width) = e.shape();
        let h = width / 2;
        let c = ctx.cotangent;
        let y = ctx.output;
        let carry_w = carry_width(self.kind, width);
        let carry_in = |r: usize, j: usize| ctx.carry.map_or(T::zero(), |m| m.get(r, j));

        let mut de = Matrix::zeros(rows, width);
        let mut carry_out = Matrix::zeros(rows, carry_w);
        let mut deta = T::zero();

        for r in 0..rows {
            let st = &own[r];
            let pv = prev.map(|p| &p[r]);
            let er = e.row(r);
            match &st.acc {
                Accum::Sum { .. } | Accum::Avg { .. } => {
                    let n = if self.kind == AggKind::Avg {
                        T::of(st.count() as f64)
                    } else {
                        T::one()
                    };
                    for j in 0..width {
                        let ds = c.get(r, j) / n + carry_in(r, j);
                        de.set(r, j, ds);
                        carry_out.set(r, j, ds);
                    }
                }
                Accum::Max { .. } | Accum::AvgMax { .. } => {
                    let (avg_w, n) = if self.kind == AggKind::AvgMax {
                        (h, T::of(st.count() as f64))
                    } else {
                        (0, T::one())
                    };
                    for j in 0..avg_w {
                        let ds = c.get(r, j) / n + carry_in(r, j);
                        de.set(r, j, ds);
                        carry_out.set(r, j, ds);
                    }
                    let prev_max = pv.and_then(AggState::running_max);
                    for j in avg_w..width {
                        let dm = c.get(r, j) + carry_in(r, j);
                        let won = prev_max.map_or(true, |m| er[j] > m[j - avg_w]);
                        if won {
                            de.set(r, j, dm);
                        } else {
                            carry_out.set(r, j, dm);
                        }
                    }
                }
                Accum::Softmax { den, shift, .. } => {
                    let shift = shift.as_ref().expect("folded");
                    let (vals, logits, hw) = if self.kind == AggKind::Softmax {
                        (0, 0, width)
                    } else {
                        (0, h, h)
                    };
                    let prev_shift = pv.and_then(AggState::shift);
                    for j in 0..hw {
                        let v = er[vals + j];
                        let l = er[logits + j];
                        let cj = c.get(r, j);
                        let g = cj / den[j] + carry_in(r, j);
                        let hh = cj * y.get(r, j) / den[j] + carry_in(r, hw + j);
                        let w = ((l - shift[j]) / eta).exp();
                        let dv = w * g;
                        let resid = v * g - hh;
                        let dl = w * resid / eta;
                        deta -= w * l * resid / (eta * eta);
                        de.set(r, vals + j, de.get(r, vals + j) + dv);
                        de.set(r, logits + j, de.get(r, logits + j) + dl);
                        if let Some(ps) = prev_shift {
                            let k = ((ps[j] - shift[j]) / eta).exp();
                            carry_out.set(r, j, g * k);
                            carry_out.set(r, hw + j, hh * k);
                        }
                    }
                }
                Accum::WAvg { den, .. } => {
                    for j in 0..h {
                        let cj = c.get(r, j);
                        let g = cj / den[j] + carry_in(r, j);
                        let hh = cj * y.get(r, j) / den[j] + carry_in(r, h + j);
                        let l = er[h + j];
                        let w = softplus(l) + T::of(POSITIVE_FLOOR);
                        de.set(r, j, w * g);
                        de.set(r, h + j, sigmoid(l) * (er[j] * g - hh));
                        carry_out.set(r, j, g);
                        carry_out.set(r, h + j, hh);
                    }
                }
                Accum::Pearl {
                    precision,
                    weighted,
                } => {
                    for j in 0..h {
                        let p = precision[j];
                        let q = weighted[j];
                        let (cm, cv) = (c.get(r, j), c.get(r, h + j));
                        let gq = cm / p + carry_in(r, j);
                        let gp = -cm * q / (p * p) - cv / (p * p) + carry_in(r, h + j);
                        let raw = er[h + j];
                        let lambda = T::one() / (softplus(raw) + T::of(POSITIVE_FLOOR));
                        let dlambda = er[j] * gq + gp;
                        de.set(r, j, lambda * gq);
                        de.set(r, h + j, -dlambda * lambda * lambda * sigmoid(raw));
                        carry_out.set(r, j, gq);
                        carry_out.set(r, h + j, gp);
                    }
                }
            }
        }

        let mut grads: Vec<Option<Matrix<T>>> = (0..self.arity()).map(|_| None).collect();
        grads[self.e_index()] = Some(de);
        if let Some(k) = self.eta_index() {
            grads[k] = Some(Matrix::scalar(deta));
        }
        FusedGrads {
            inputs: grads,
            carry: self.has_prev.then_some((0, carry_out)),
        }
    }
}

fn carry_width(kind: AggKind, width: usize) -> usize {
    match kind {
        AggKind::Softmax => 2 * width,
        _ => width,
    }
}

/// Folds `encodings` in order, returning the read-out node after each step.
///
/// With `straight_through` each step's Jacobian is overridden by the
/// identity, so the cotangent reaching every folded encoding equals the sum
/// of the cotangents of the read-outs that followed it. Only kinds whose
/// read-out has the input's width admit the override.
pub fn aggregate_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    kind: AggKind,
    eta: Option<NodeId>,
    encodings: &[NodeId],
    straight_through: bool,
) -> Result<Vec<NodeId>> {
    let mut reads = Vec::with_capacity(encodings.len());
    let mut prev: Option<NodeId> = None;
    for &e in encodings {
        let node = aggregate_step(tape, kind, eta, prev, e, straight_through)?;
        reads.push(node);
        prev = Some(node);
    }
    Ok(reads)
}

/// One fold step; see [`aggregate_sequence`].
pub fn aggregate_step<T: Scalar>(
    tape: &mut Tape<T>,
    kind: AggKind,
    eta: Option<NodeId>,
    prev: Option<NodeId>,
    e: NodeId,
    straight_through: bool,
) -> Result<NodeId> {
    let width = tape.shape(e).1;
    let op = Arc::new(AggregatorOp {
        kind,
        width,
        has_prev: prev.is_some(),
    });
    let mut inputs: Vec<NodeId> = prev.into_iter().collect();
    inputs.push(e);
    if kind.has_temperature() {
        inputs.push(eta.ok_or_else(|| Error::config("eta", format!("{kind} needs a temperature")))?);
    }
    let node = tape.fused(op, &inputs)?;
    if straight_through {
        tape.set_override(node, JacobianMode::Identity)?;
    }
    Ok(node)
}
