use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named flat list of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    #[inline]
    pub fn at(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.values.iter().map(|m| tape.leaf(m.clone())).collect())
    }

    /// Bindings that overwrite the leaves of `bound` with the current values.
    pub fn bindings(&self, bound: &Bound) -> std::collections::HashMap<NodeId, Matrix<T>> {
        bound.0.iter().copied().zip(self.values.iter().cloned()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
        }
    }

    /// Fails unless `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore<T>) -> Result<()> {
        let same = self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Parse("parameter layout does not match the model".into()))
        }
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
pub fn fan_in_uniform<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// `x W + b` with `W: n_in x n_out`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.push(format!("{name}.w"), fan_in_uniform(n_in, n_out, rng));
        let b = store.push(format!("{name}.b"), Matrix::zeros(1, n_out));
        Linear { w, b, n_in, n_out }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        tape.affine(x, bound.at(self.w), bound.at(self.b))
    }

    /// Plain evaluation of one input row, for oracles and tests.
    pub fn eval_row<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = store.get(self.w);
        let b = store.get(self.b);
        (0..self.n_out)
            .map(|j| {
                x.iter()
                    .enumerate()
                    .fold(b.get(0, j), |acc, (i, &xi)| acc + xi * w.get(i, j))
            })
            .collect()
    }
}
