use super::{AggKind, POSITIVE_FLOOR};
use crate::error::{Error, Result};
use crate::scalar::{softplus, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub(super) enum Accum<T> {
    Sum { sum: Vec<T> },
    Avg { sum: Vec<T> },
    /// `None` until the first step: the max has no finite identity.
    Max { max: Option<Vec<T>> },
    AvgMax { sum: Vec<T>, max: Option<Vec<T>> },
    /// Numerator and denominator scaled by `exp(-shift / eta)`, where `shift`
    /// is the running max of the logits.
    Softmax { num: Vec<T>, den: Vec<T>, shift: Option<Vec<T>> },
    WAvg { num: Vec<T>, den: Vec<T> },
    /// Running precision and precision-weighted mean sum.
    Pearl { precision: Vec<T>, weighted: Vec<T> },
}

/// Online aggregate of the steps folded so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AggState<T> {
    kind: AggKind,
    width: usize,
    count: usize,
    eta: T,
    pub(super) acc: Accum<T>,
}

/// Empty state for `width`-wide inputs. `eta` is only used by the softmax kinds.
pub fn agg_init<T: Scalar>(kind: AggKind, width: usize, eta: T) -> Result<AggState<T>> {
    kind.check_width(width)?;
    let h = width / 2;
    let z = |n: usize| vec![T::zero(); n];
    let acc = match kind {
        AggKind::Sum => Accum::Sum { sum: z(width) },
        AggKind::Avg => Accum::Avg { sum: z(width) },
        AggKind::Max => Accum::Max { max: None },
        AggKind::AvgMax => Accum::AvgMax { sum: z(h), max: None },
        AggKind::Softmax => Accum::Softmax {
            num: z(width),
            den: z(width),
            shift: None,
        },
        AggKind::WSoftmax => Accum::Softmax {
            num: z(h),
            den: z(h),
            shift: None,
        },
        AggKind::WAvg => Accum::WAvg { num: z(h), den: z(h) },
        AggKind::Pearl => Accum::Pearl {
            precision: z(h),
            weighted: z(h),
        },
    };
    Ok(AggState {
        kind,
        width,
        count: 0,
        eta,
        acc,
    })
}

/// Folds `values` weighted by `exp(logits / eta)` into a shifted accumulator.
fn fold_softmax<T: Scalar>(
    num: &mut [T],
    den: &mut [T],
    shift: &mut Option<Vec<T>>,
    values: &[T],
    logits: &[T],
    eta: T,
) {
    match shift {
        None => {
            num.copy_from_slice(values);
            den.iter_mut().for_each(|d| *d = T::one());
            *shift = Some(logits.to_vec());
        }
        Some(m) => {
            for j in 0..num.len() {
                let l = logits[j];
                if l > m[j] {
                    let rescale = ((m[j] - l) / eta).exp();
                    num[j] = num[j] * rescale + values[j];
                    den[j] = den[j] * rescale + T::one();
                    m[j] = l;
                } else {
                    let w = ((l - m[j]) / eta).exp();
                    num[j] += values[j] * w;
                    den[j] += w;
                }
            }
        }
    }
}

fn fold_max<T: Scalar>(max: &mut Option<Vec<T>>, e: &[T]) {
    match max {
        None => *max = Some(e.to_vec()),
        Some(m) => {
            for (a, &b) in m.iter_mut().zip(e) {
                if b > *a {
                    *a = b;
                }
            }
        }
    }
}

impl<T: Scalar> AggState<T> {
    pub fn kind(&self) -> AggKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    /// Folds one encoded vector.
    pub fn step(&mut self, e: &[T]) -> Result<()> {
        if e.len() != self.width {
            return Err(Error::Dims(format!(
                "aggregator step of width {} into state of width {}",
                e.len(),
                self.width
            )));
        }
        let h = self.width / 2;
        let eta = self.eta;
        match &mut self.acc {
            Accum::Sum { sum } | Accum::Avg { sum } => {
                sum.iter_mut().zip(e).for_each(|(s, &x)| *s += x);
            }
            Accum::Max { max } => fold_max(max, e),
            Accum::AvgMax { sum, max } => {
                sum.iter_mut().zip(&e[..h]).for_each(|(s, &x)| *s += x);
                fold_max(max, &e[h..]);
            }
            Accum::Softmax { num, den, shift } => {
                if self.kind == AggKind::Softmax {
                    fold_softmax(num, den, shift, e, e, eta);
                } else {
                    fold_softmax(num, den, shift, &e[..h], &e[h..], eta);
                }
            }
            Accum::WAvg { num, den } => {
                for j in 0..h {
                    let w = softplus(e[h + j]) + T::of(POSITIVE_FLOOR);
                    num[j] += e[j] * w;
                    den[j] += w;
                }
            }
            Accum::Pearl {
                precision,
                weighted,
            } => {
                for j in 0..h {
                    let var = softplus(e[h + j]) + T::of(POSITIVE_FLOOR);
                    precision[j] += T::one() / var;
                    weighted[j] += e[j] / var;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Current aggregate. For `pearl`: posterior mean followed by posterior variance.
    pub fn read(&self) -> Result<Vec<T>> {
        if self.count == 0 {
            return Err(Error::EmptyAggregate);
        }
        let n = T::of(self.count as f64);
        Ok(match &self.acc {
            Accum::Sum { sum } => sum.clone(),
            Accum::Avg { sum } => sum.iter().map(|&s| s / n).collect(),
            Accum::Max { max } => max.clone().expect("count > 0"),
            Accum::AvgMax { sum, max } => sum
                .iter()
                .map(|&s| s / n)
                .chain(max.iter().flatten().copied())
                .collect(),
            Accum::Softmax { num, den, .. } | Accum::WAvg { num, den } => {
                num.iter().zip(den).map(|(&a, &b)| a / b).collect()
            }
            Accum::Pearl {
                precision,
                weighted,
            } => {
                let mean = weighted.iter().zip(precision).map(|(&q, &p)| q / p);
                let var = precision.iter().map(|&p| T::one() / p);
                mean.chain(var).collect()
            }
        })
    }

    /// Heap bytes held by the accumulators.
    pub fn byte_size(&self) -> usize {
        let v = |x: &Vec<T>| x.len();
        let o = |x: &Option<Vec<T>>| x.as_ref().map_or(0, Vec::len);
        let n = match &self.acc {
            Accum::Sum { sum } | Accum::Avg { sum } => v(sum),
            Accum::Max { max } => o(max),
            Accum::AvgMax { sum, max } => v(sum) + o(max),
            Accum::Softmax { num, den, shift } => v(num) + v(den) + o(shift),
            Accum::WAvg { num, den } => v(num) + v(den),
            Accum::Pearl {
                precision,
                weighted,
            } => v(precision) + v(weighted),
        };
        n * std::mem::size_of::<T>()
    }

    /// Running max-shift for the softmax kinds.
    pub(super) fn shift(&self) -> Option<&[T]> {
        match &self.acc {
            Accum::Softmax { shift, .. } => shift.as_deref(),
            _ => None,
        }
    }

    /// Running max for `max` and the max half of `avgmax`.
    pub(super) fn running_max(&self) -> Option<&[T]> {
        match &self.acc {
            Accum::Max { max } | Accum::AvgMax { max, .. } => max.as_deref(),
            _ => None,
        }
    }
}
