//! Gradient and permutation probes of sequence models at initialization,
//! and the variance trace of the Gaussian product aggregator.
//!
//! Gradient norms are Frobenius norms of full Jacobians, one backward pass
//! per output coordinate.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregators::pearl_posterior;
use crate::error::{Error, Result};
use crate::gradcore::{NodeId, Tape};
use crate::permute::{apply, sample_permutations};
use crate::seqmodel::{Bound, ParamStore, SequenceModel, SequenceModelSpec, StepOut};
use crate::tensor::Matrix;
use crate::trainer::model_label;

/// Width of a T-LS transition, used as the default probe input width.
pub const DEFAULT_IN_DIM: usize = 14;
pub const DEFAULT_T: usize = 100;
pub const DEFAULT_PERMS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    InitInput,
    Params,
    AllInputs,
    PermDiff,
    PearlVar,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::InitInput,
        Metric::Params,
        Metric::AllInputs,
        Metric::PermDiff,
        Metric::PearlVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::InitInput => "init_input",
            Metric::Params => "params",
            Metric::AllInputs => "all_inputs",
            Metric::PermDiff => "perm_diff",
            Metric::PearlVar => "pearl_var",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "metric",
                name: s.to_string(),
            })
    }
}

/// A freshly initialized model with its parameters.
pub struct Probe {
    pub model: SequenceModel,
    pub store: ParamStore<f64>,
}

impl Probe {
    pub fn new(spec: SequenceModelSpec, in_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = SequenceModel::new(spec, in_dim, &mut store, &mut rng)?;
        Ok(Probe { model, store })
    }
}

/// I.i.d. uniform[-1, 1] transitions.
pub fn uniform_inputs(t_len: usize, in_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..t_len)
        .map(|_| (0..in_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect()
}

/// One uniform[-1, 1] draw per step, repeated across every input dimension.
pub fn replicated_inputs(t_len: usize, in_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..t_len)
        .map(|_| vec![rng.gen_range(-1.0..=1.0); in_dim])
        .collect()
}

struct Unrolled {
    tape: Tape<f64>,
    bound: Bound,
    xs: Vec<NodeId>,
    outs: Vec<StepOut>,
}

/// Runs the model over `xs` as one row with every input a leaf. Sampling
/// models read out their posterior mean (zero noise).
fn unroll(probe: &Probe, xs: &[Vec<f64>]) -> Result<Unrolled> {
    let mut tape = Tape::new();
    let bound = probe.store.bind(&mut tape);
    let xs: Vec<NodeId> = xs
        .iter()
        .map(|x| tape.leaf(Matrix::row_vector(x.clone())))
        .collect();
    let noise: Vec<NodeId> = match probe.model.spec.noise_width() {
        Some(w) => (0..xs.len()).map(|_| tape.constant(Matrix::zeros(1, w))).collect(),
        None => Vec::new(),
    };
    let outs = probe.model.forward(&mut tape, &bound, &xs, &noise)?;
    Ok(Unrolled {
        tape,
        bound,
        xs,
        outs,
    })
}

/// Squared Frobenius norm of `d out / d w` for every `w` in `wrt`.
fn jacobian_sq_norms(tape: &Tape<f64>, out: NodeId, wrt: &[NodeId]) -> Result<Vec<f64>> {
    let width = tape.shape(out).1;
    let mut acc = vec![0.0; wrt.len()];
    for i in 0..width {
        let mut seed = Matrix::zeros(1, width);
        seed.set(0, i, 1.0);
        let g = tape.backward(out, Some(seed))?;
        for (a, &w) in acc.iter_mut().zip(wrt) {
            if let Some(m) = g.get(w) {
                *a += m.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
    }
    Ok(acc)
}

/// Rows of `d out / d wrt` for a single-row `out`.
fn jacobian_rows(tape: &Tape<f64>, out: NodeId, wrt: NodeId) -> Result<Vec<Vec<f64>>> {
    let width = tape.shape(out).1;
    let cols = tape.shape(wrt).1;
    (0..width)
        .map(|i| {
            let mut seed = Matrix::zeros(1, width);
            seed.set(0, i, 1.0);
            Ok(tape.backward(out, Some(seed))?.wrt(wrt, (1, cols)).into_vec())
        })
        .collect()
}

/// `||d m_t / d tau_0||` for t = 1..T. For aggregating models `m_t` is the
/// aggregator read-out and only the path through the first aggregator input
/// counts; otherwise `m_t` is the embedding and every path counts.
pub fn grad_wrt_initial_input(probe: &Probe, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let u = unroll(probe, xs)?;
    let first = u.outs.first().ok_or(Error::EmptyAggregate)?;
    let Some(e0) = first.agg_input else {
        return u
            .outs
            .iter()
            .map(|o| Ok(jacobian_sq_norms(&u.tape, o.f, &u.xs[..1])?[0].sqrt()))
            .collect();
    };
    // d e_0 / d tau_0, then chain each read-out row through it.
    let inner = jacobian_rows(&u.tape, e0, u.xs[0])?;
    u.outs
        .iter()
        .map(|o| {
            let read = o.agg_read.expect("aggregating model");
            let outer = jacobian_rows(&u.tape, read, e0)?;
            let sq: f64 = outer
                .iter()
                .flat_map(|g| {
                    (0..xs[0].len()).map(|c| {
                        let v: f64 = g.iter().zip(&inner).map(|(a, row)| a * row[c]).sum();
                        v * v
                    })
                })
                .sum();
            Ok(sq.sqrt())
        })
        .collect()
}

/// `||d f_t / d theta||` for t = 1..T.
pub fn grad_wrt_params(probe: &Probe, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let u = unroll(probe, xs)?;
    let params = u.bound.nodes().to_vec();
    u.outs
        .iter()
        .map(|o| Ok(jacobian_sq_norms(&u.tape, o.f, &params)?.iter().sum::<f64>().sqrt()))
        .collect()
}

/// `||d f_T / d tau_t||` for t = 1..T with the output time fixed at T.
pub fn grad_wrt_all_inputs(probe: &Probe, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let u = unroll(probe, xs)?;
    let last = u.outs.last().ok_or(Error::EmptyAggregate)?;
    Ok(jacobian_sq_norms(&u.tape, last.f, &u.xs)?
        .into_iter()
        .map(f64::sqrt)
        .collect())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Mean L2 distance between the unit-normalized final embedding of `xs` and
/// those of `n_perms` random reorderings of it.
pub fn permutation_difference(probe: &Probe, xs: &[Vec<f64>], n_perms: usize, seed: u64) -> Result<f64> {
    if n_perms == 0 {
        return Err(Error::config("n_perms", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut seqs = vec![xs.to_vec()];
    seqs.extend(sample_permutations(xs.len(), n_perms, &mut rng).iter().map(|p| apply(xs, p)));
    let rows = seqs.len();
    let in_dim = xs.first().ok_or(Error::EmptyAggregate)?.len();

    let mut tape = Tape::new();
    let bound = probe.store.bind(&mut tape);
    let inputs: Vec<NodeId> = (0..xs.len())
        .map(|t| {
            let data = seqs.iter().flat_map(|s| s[t].iter().copied()).collect();
            Ok(tape.constant(Matrix::from_vec(rows, in_dim, data)?))
        })
        .collect::<Result<_>>()?;
    let noise: Vec<NodeId> = match probe.model.spec.noise_width() {
        Some(w) => (0..xs.len()).map(|_| tape.constant(Matrix::zeros(rows, w))).collect(),
        None => Vec::new(),
    };
    let outs = probe.model.forward(&mut tape, &bound, &inputs, &noise)?;
    let f = tape.value(outs.last().expect("non-empty").f);
    let base = unit(f.row(0));
    let total: f64 = (1..rows)
        .map(|r| {
            unit(f.row(r))
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n_perms as f64)
}

/// Posterior variance after each step of a product of Gaussians with the
/// given per-step variances.
pub fn pearl_variance_trace(vars: &[f64]) -> Result<Vec<f64>> {
    let mut precision = 0.0;
    vars.iter()
        .map(|&v| {
            if !(v > 0.0) {
                return Err(Error::NonPositiveVariance(v));
            }
            precision += 1.0 / v;
            Ok(1.0 / precision)
        })
        .collect()
}

/// The same trace through the aggregator's batch posterior, one prefix at a time.
pub fn pearl_variance_oracle(vars: &[f64]) -> Result<Vec<f64>> {
    (1..=vars.len())
        .map(|t| {
            let mus = vec![vec![0.0]; t];
            let vs: Vec<Vec<f64>> = vars[..t].iter().map(|&v| vec![v]).collect();
            Ok(pearl_posterior(&mus, &vs)?.1[0])
        })
        .collect()
}

/// One CSV row of a probe series.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub t: usize,
    pub model: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub t_len: usize,
    pub in_dim: usize,
    pub seeds: Vec<u64>,
    pub n_perms: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            t_len: DEFAULT_T,
            in_dim: DEFAULT_IN_DIM,
            seeds: vec![0, 1, 2],
            n_perms: DEFAULT_PERMS,
        }
    }
}

/// Series of `metric` for one model and input seed, labelled for CSV output.
pub fn probe_rows(metric: Metric, probe: &Probe, label: &str, seed: u64, cfg: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if cfg.t_len == 0 {
        return Err(Error::config("T", "must be positive"));
    }
    let row = |t: usize, value: f64| ProbeRow {
        t,
        model: label.to_string(),
        seed,
        value,
    };
    let in_dim = probe.model.in_dim;
    let values = match metric {
        Metric::InitInput => grad_wrt_initial_input(probe, &uniform_inputs(cfg.t_len, in_dim, seed))?,
        Metric::Params => grad_wrt_params(probe, &replicated_inputs(cfg.t_len, in_dim, seed))?,
        Metric::AllInputs => grad_wrt_all_inputs(probe, &uniform_inputs(cfg.t_len, in_dim, seed))?,
        Metric::PermDiff => {
            let xs = uniform_inputs(cfg.t_len, in_dim, seed);
            let d = permutation_difference(probe, &xs, cfg.n_perms, seed)?;
            return Ok(vec![row(cfg.t_len, d)]);
        }
        Metric::PearlVar => pearl_variance_trace(&vec![1.0; cfg.t_len])?,
    };
    Ok(values.into_iter().enumerate().map(|(i, v)| row(i + 1, v)).collect())
}

/// Per-seed series of `metric` for a model freshly initialized under each
/// seed. `pearl_var` ignores the model and traces unit per-step variances.
pub fn run_probe(metric: Metric, spec: &SequenceModelSpec, cfg: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if cfg.t_len == 0 {
        return Err(Error::config("T", "must be positive"));
    }
    if metric == Metric::PearlVar {
        let trace = pearl_variance_trace(&vec![1.0; cfg.t_len])?;
        return Ok(trace
            .into_iter()
            .enumerate()
            .map(|(i, value)| ProbeRow {
                t: i + 1,
                model: "pearl".into(),
                seed: 0,
                value,
            })
            .collect());
    }
    let label = model_label(spec);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let probe = Probe::new(spec.clone(), cfg.in_dim, seed)?;
        rows.extend(probe_rows(metric, &probe, &label, seed, cfg)?);
    }
    Ok(rows)
}

/// Mean over seeds of each t, in t order.
pub fn mean_series(rows: &[ProbeRow]) -> Vec<f64> {
    let t_max = rows.iter().map(|r| r.t).max().unwrap_or(0);
    (1..=t_max)
        .map(|t| {
            let vs: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.value).collect();
            vs.iter().sum::<f64>() / vs.len() as f64
        })
        .filter(|v| v.is_finite())
        .collect()
}

#[cfg(test)]
mod tests;
