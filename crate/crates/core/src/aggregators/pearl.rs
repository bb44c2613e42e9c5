use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Product of diagonal Gaussians: the precision-weighted mean and the
/// harmonic variance `1 / sum_i 1/var_i`.
pub fn pearl_posterior<T: Scalar>(mus: &[Vec<T>], vars: &[Vec<T>]) -> Result<(Vec<T>, Vec<T>)> {
    let width = mus.first().ok_or(Error::EmptyAggregate)?.len();
    if mus.len() != vars.len() || mus.iter().chain(vars).any(|v| v.len() != width) {
        return Err(Error::Dims("mean/variance sequences disagree".into()));
    }
    let mut precision = vec![T::zero(); width];
    let mut weighted = vec![T::zero(); width];
    for (mu, var) in mus.iter().zip(vars) {
        for j in 0..width {
            if var[j] <= T::zero() || var[j].is_nan() {
                return Err(Error::NonPositiveVariance(var[j].to_f64_lossy()));
            }
            precision[j] += T::one() / var[j];
            weighted[j] += mu[j] / var[j];
        }
    }
    let mean = weighted.iter().zip(&precision).map(|(&q, &p)| q / p).collect();
    let var = precision.iter().map(|&p| T::one() / p).collect();
    Ok((mean, var))
}

/// Reparameterised draw `mean + sqrt(var) * u`.
pub fn pearl_sample<T: Scalar>(mean: &[T], var: &[T], u: &[T]) -> Vec<T> {
    mean.iter()
        .zip(var)
        .zip(u)
        .map(|((&m, &v), &n)| m + v.sqrt() * n)
        .collect()
}

/// `KL(N(mean, var) || N(0, 1))` summed over dimensions.
pub fn pearl_kl_to_prior<T: Scalar>(mean: &[T], var: &[T]) -> T {
    let half = T::of(0.5);
    mean.iter()
        .zip(var)
        .map(|(&m, &v)| half * (m * m + v - T::one() - v.ln()))
        .sum()
}
