//! Permutation enumeration (Heap's algorithm) and sampling.

use rand::seq::SliceRandom;
use rand::Rng;

/// All `n!` orderings of `0..n`.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = vec![items.clone()];
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            out.push(items.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// `count` uniformly random orderings of `0..n`.
pub fn sample_permutations<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..count)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        })
        .collect()
}

pub fn apply<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| items[i].clone()).collect()
}
