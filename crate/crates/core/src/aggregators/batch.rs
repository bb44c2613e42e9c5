use super::{pearl_posterior, AggKind, POSITIVE_FLOOR};
use crate::error::{Error, Result};
use crate::scalar::{softplus, Scalar};

fn column_max<T: Scalar>(es: &[Vec<T>], range: std::ops::Range<usize>) -> Vec<T> {
    range
        .map(|j| es.iter().map(|e| e[j]).fold(T::neg_infinity(), T::max))
        .collect()
}

fn column_mean<T: Scalar>(es: &[Vec<T>], range: std::ops::Range<usize>) -> Vec<T> {
    let n = T::of(es.len() as f64);
    range
        .map(|j| es.iter().map(|e| e[j]).sum::<T>() / n)
        .collect()
}

/// `sum_i v_i w_i / sum_i w_i` per column, with `w_i = exp((l_i - max l) / eta)`.
fn softmax_weighted<T: Scalar>(es: &[Vec<T>], values: usize, logits: usize, h: usize, eta: T) -> Vec<T> {
    (0..h)
        .map(|j| {
            let m = es
                .iter()
                .map(|e| e[logits + j])
                .fold(T::neg_infinity(), T::max);
            let (mut num, mut den) = (T::zero(), T::zero());
            for e in es {
                let w = ((e[logits + j] - m) / eta).exp();
                num += e[values + j] * w;
                den += w;
            }
            num / den
        })
        .collect()
}

/// Aggregate of the whole sequence at once; the reference dual of the online fold.
pub fn agg_batch<T: Scalar>(kind: AggKind, eta: T, es: &[Vec<T>]) -> Result<Vec<T>> {
    let width = es.first().ok_or(Error::EmptyAggregate)?.len();
    kind.check_width(width)?;
    if es.iter().any(|e| e.len() != width) {
        return Err(Error::Dims("ragged aggregator inputs".into()));
    }
    let h = width / 2;
    Ok(match kind {
        AggKind::Sum => (0..width).map(|j| es.iter().map(|e| e[j]).sum()).collect(),
        AggKind::Avg => column_mean(es, 0..width),
        AggKind::Max => column_max(es, 0..width),
        AggKind::AvgMax => {
            let mut out = column_mean(es, 0..h);
            out.extend(column_max(es, h..width));
            out
        }
        AggKind::Softmax => softmax_weighted(es, 0, 0, width, eta),
        AggKind::WSoftmax => softmax_weighted(es, 0, h, h, eta),
        AggKind::WAvg => (0..h)
            .map(|j| {
                let w: Vec<T> = es
                    .iter()
                    .map(|e| softplus(e[h + j]) + T::of(POSITIVE_FLOOR))
                    .collect();
                let num: T = es.iter().zip(&w).map(|(e, &wi)| e[j] * wi).sum();
                num / w.iter().copied().sum()
            })
            .collect(),
        AggKind::Pearl => {
            let mus: Vec<Vec<T>> = es.iter().map(|e| e[..h].to_vec()).collect();
            let vars: Vec<Vec<T>> = es
                .iter()
                .map(|e| {
                    e[h..]
                        .iter()
                        .map(|&r| softplus(r) + T::of(POSITIVE_FLOOR))
                        .collect()
                })
                .collect();
            let (mean, var) = pearl_posterior(&mus, &vars)?;
            mean.into_iter().chain(var).collect()
        }
    })
}
