use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Leaves whose gradient path to `output` crosses a Jacobian override.
pub fn overridden_inputs<T: Scalar>(tape: &Tape<T>, output: NodeId) -> HashSet<NodeId> {
    let mut in_cone = vec![false; output + 1];
    in_cone[output] = true;
    let mut tainted = vec![false; output + 1];
    let overridden: HashSet<NodeId> = tape.overrides().iter().map(|o| o.node).collect();
    for id in (0..=output).rev() {
        if !in_cone[id] {
            continue;
        }
        let is_override = overridden.contains(&id);
        for i in tape.op(id).inputs() {
            in_cone[i] = true;
            if is_override || tainted[id] {
                tainted[i] = true;
            }
        }
    }
    (0..=output)
        .filter(|&i| tainted[i] && tape.is_leaf(i))
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Max relative error between reverse-mode gradients and central differences
/// over every input coordinate not affected by an override. `output` must be scalar.
pub fn finite_diff_check<T: Scalar>(
    tape: &Tape<T>,
    output: NodeId,
    bindings: &HashMap<NodeId, Matrix<T>>,
    h: T,
) -> Result<f64> {
    finite_diff_impl(tape, output, bindings, h, None::<(&mut rand::rngs::ThreadRng, usize)>)
}

/// As [`finite_diff_check`] but probing at most `max_coords` random coordinates.
pub fn finite_diff_check_sampled<T: Scalar, R: Rng>(
    tape: &Tape<T>,
    output: NodeId,
    bindings: &HashMap<NodeId, Matrix<T>>,
    h: T,
    rng: &mut R,
    max_coords: usize,
) -> Result<f64> {
    finite_diff_impl(tape, output, bindings, h, Some((rng, max_coords)))
}

fn finite_diff_impl<T: Scalar, R: Rng>(
    tape: &Tape<T>,
    output: NodeId,
    bindings: &HashMap<NodeId, Matrix<T>>,
    h: T,
    sample: Option<(&mut R, usize)>,
) -> Result<f64> {
    if tape.shape(output) != (1, 1) {
        return Err(Error::NonScalarOutput(output));
    }
    let grads = tape.grad(output, bindings, None)?;
    let skip = overridden_inputs(tape, output);
    let mut coords: Vec<(NodeId, usize)> = grads
        .iter()
        .filter(|(id, _)| !skip.contains(id))
        .flat_map(|(&id, g)| (0..g.len()).map(move |k| (id, k)))
        .collect();
    coords.sort_unstable();
    if let Some((rng, max)) = sample {
        coords.shuffle(rng);
        coords.truncate(max);
    }
    let base = |id: NodeId| bindings.get(&id).cloned().unwrap_or_else(|| tape.value(id).clone());
    let mut worst = 0.0f64;
    for (id, k) in coords {
        let mut b = bindings.clone();
        let x0 = base(id);
        let mut plus = x0.clone();
        plus.data_mut()[k] += h;
        b.insert(id, plus);
        let fp = tape.eval(&b)?[output].item();
        let mut minus = x0;
        minus.data_mut()[k] -= h;
        b.insert(id, minus);
        let fm = tape.eval(&b)?[output].item();
        let fd = ((fp - fm) / (h + h)).to_f64_lossy();
        let g = grads[&id].data()[k].to_f64_lossy();
        worst = worst.max(rel_err(g, fd));
    }
    Ok(worst)
}
