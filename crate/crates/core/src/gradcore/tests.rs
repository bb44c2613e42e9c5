use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Matrix;

fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

#[test]
fn eval_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::scalar(2.0));
    let y = t.add(x, x).unwrap();
    assert_eq!(t.value(y).item(), 4.0);

    let z = t.leaf(Matrix::scalar(0.0));
    let th = t.tanh(z).unwrap();
    assert_eq!(t.value(th).item(), 0.0);

    let a = t.leaf(m(1, 2, &[1.0, -2.0]));
    let b = t.leaf(m(1, 2, &[0.0, 3.0]));
    let mx = t.max(a, b).unwrap();
    assert_eq!(t.value(mx).data(), &[1.0, 3.0]);
}

#[test]
fn eval_rebinds_and_rejects_unbound_placeholders() {
    let mut t = Tape::new();
    let p = t.placeholder(1, 1);
    let y = t.scale(p, 3.0).unwrap();
    assert!(matches!(t.eval(&HashMap::new()), Err(Error::Unbound(id)) if id == p));
    let vals = t.eval(&HashMap::from([(p, Matrix::scalar(2.0))])).unwrap();
    assert_eq!(vals[y].item(), 6.0);
    let bad = t.eval(&HashMap::from([(p, Matrix::zeros(1, 2))]));
    assert!(matches!(bad, Err(Error::Shape { node, .. }) if node == p));
}

#[test]
fn shape_mismatch_names_node() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Matrix::zeros(1, 2));
    let b = t.leaf(Matrix::zeros(1, 3));
    match t.add(a, b) {
        Err(Error::Shape { node, .. }) => assert_eq!(node, 2),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn linear_slope() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::scalar(5.0));
    let y = t.scale(x, 3.0).unwrap();
    let g = t.grad(y, &HashMap::new(), None).unwrap();
    assert_eq!(g[&x].item(), 3.0);
}

#[test]
fn tanh_slope_matches_central_difference() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::scalar(0.3));
    let y = t.tanh(x).unwrap();
    let g = t.grad(y, &HashMap::new(), None).unwrap()[&x].item();
    let h = 1e-5;
    let fd = ((0.3f64 + h).tanh() - (0.3f64 - h).tanh()) / (2.0 * h);
    assert!((g - fd).abs() <= 1e-6);
}

#[test]
fn identity_override_passes_seed_unchanged() {
    let mut t = Tape::new();
    let e = t.leaf(m(1, 3, &[0.2, -1.0, 4.0]));
    let g = t.tanh(e).unwrap();
    t.set_override(g, JacobianMode::Identity).unwrap();
    let seed = m(1, 3, &[1.5, -2.0, 0.25]);
    let grads = t.backward(g, Some(seed.clone())).unwrap();
    assert_eq!(grads.get(e).unwrap(), &seed);
}

#[test]
fn override_on_non_square_node_is_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Matrix::zeros(1, 4));
    let s = t.slice(x, 0, 2).unwrap();
    assert!(matches!(
        t.set_override(s, JacobianMode::Identity),
        Err(Error::Override { .. })
    ));
    assert!(t.set_override(x, JacobianMode::Identity).is_err());
}

#[test]
fn constant_graph_has_zero_error() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(Matrix::scalar(7.0));
    let y = t.tanh(c).unwrap();
    assert_eq!(finite_diff_check(&t, y, &HashMap::new(), 1e-5).unwrap(), 0.0);
}

#[test]
fn two_layer_tanh_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let x = t.leaf(random(&mut rng, 3, 4, 1.0));
    let w1 = t.leaf(random(&mut rng, 4, 5, 1.0));
    let b1 = t.leaf(random(&mut rng, 1, 5, 1.0));
    let w2 = t.leaf(random(&mut rng, 5, 2, 1.0));
    let b2 = t.leaf(random(&mut rng, 1, 2, 1.0));
    let h = t.affine(x, w1, b1).unwrap();
    let h = t.tanh(h).unwrap();
    let o = t.affine(h, w2, b2).unwrap();
    let o = t.tanh(o).unwrap();
    let y = t.sum(o).unwrap();
    assert!(finite_diff_check(&t, y, &HashMap::new(), 1e-5).unwrap() <= 1e-4);
}

#[test]
fn override_subgraph_excluded_from_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new();
    let a = t.leaf(random(&mut rng, 1, 3, 1.0));
    let w = t.leaf(random(&mut rng, 3, 3, 1.0));
    let e = t.matmul(a, w).unwrap();
    let g = t.tanh(e).unwrap();
    t.set_override(g, JacobianMode::Identity).unwrap();
    let v = t.leaf(random(&mut rng, 1, 3, 1.0));
    let s = t.mul(g, v).unwrap();
    let y = t.sum(s).unwrap();
    let skipped = overridden_inputs(&t, y);
    assert!(skipped.contains(&a) && skipped.contains(&w) && !skipped.contains(&v));
    assert!(finite_diff_check(&t, y, &HashMap::new(), 1e-5).unwrap() <= 1e-4);
}

#[test]
fn gradient_of_sum_is_one_per_input() {
    let mut t = Tape::new();
    let xs: Vec<_> = (0..6).map(|i| t.leaf(Matrix::scalar(i as f64))).collect();
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = t.add(acc, x).unwrap();
    }
    let g = t.grad(acc, &HashMap::new(), None).unwrap();
    for x in xs {
        assert_eq!(g[&x].item(), 1.0);
    }
}

#[test]
fn evaluation_is_referentially_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    let x = t.placeholder(2, 3);
    let w = t.leaf(random(&mut rng, 3, 3, 1.0));
    let y = t.matmul(x, w).unwrap();
    let y = t.softmax(y).unwrap();
    let b = HashMap::from([(x, random(&mut rng, 2, 3, 1.0))]);
    let first = t.eval(&b).unwrap();
    let second = t.eval(&b).unwrap();
    for (p, q) in first.iter().zip(&second) {
        assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(first[y].rows(), 2);
}

#[test]
fn max_ties_route_to_first_operand() {
    let mut t = Tape::new();
    let a = t.leaf(Matrix::scalar(1.0));
    let b = t.leaf(Matrix::scalar(1.0));
    let y = t.max(a, b).unwrap();
    let g = t.grad(y, &HashMap::new(), None).unwrap();
    assert_eq!((g[&a].item(), g[&b].item()), (1.0, 0.0));
}

type Builder = fn(&mut Tape<f64>, &Operands) -> usize;

/// Leaves available to every case: two `2x3` matrices, a `3x3`, a `1x3` row, a `2x1` column.
struct Operands {
    a: usize,
    b: usize,
    sq: usize,
    row: usize,
    col: usize,
}

fn primitive_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |t, o| t.add(o.a, o.b).unwrap()),
        ("sub", |t, o| t.sub(o.a, o.b).unwrap()),
        ("mul", |t, o| t.mul(o.a, o.b).unwrap()),
        ("div", |t, o| {
            let d = t.exp(o.b).unwrap();
            t.div(o.a, d).unwrap()
        }),
        ("scale", |t, o| t.scale(o.a, -2.5).unwrap()),
        ("matmul", |t, o| t.matmul(o.a, o.sq).unwrap()),
        ("add_row", |t, o| t.add_row(o.a, o.row).unwrap()),
        ("mul_col", |t, o| t.mul_col(o.a, o.col).unwrap()),
        ("row_matvec", |t, o| {
            let w = t.concat(&[o.a, o.b, o.a]).unwrap();
            t.row_matvec(o.b, w).unwrap()
        }),
        ("tanh", |t, o| t.tanh(o.a).unwrap()),
        ("sigmoid", |t, o| t.sigmoid(o.a).unwrap()),
        ("exp", |t, o| t.exp(o.a).unwrap()),
        ("log", |t, o| {
            let p = t.exp(o.a).unwrap();
            let p = t.shift(p, 0.5).unwrap();
            t.log(p).unwrap()
        }),
        ("softplus", |t, o| t.softplus(o.a).unwrap()),
        ("sqrt", |t, o| {
            let p = t.square(o.a).unwrap();
            let p = t.shift(p, 0.5).unwrap();
            t.sqrt(p).unwrap()
        }),
        ("max", |t, o| t.max(o.a, o.b).unwrap()),
        ("min", |t, o| t.min(o.a, o.b).unwrap()),
        ("clamp", |t, o| t.clamp(o.a, -0.5, 0.5).unwrap()),
        ("concat", |t, o| t.concat(&[o.a, o.b]).unwrap()),
        ("slice", |t, o| t.slice(o.a, 1, 2).unwrap()),
        ("softmax", |t, o| t.softmax(o.a).unwrap()),
        ("log_softmax", |t, o| t.log_softmax(o.a).unwrap()),
        ("sum_cols", |t, o| t.sum_cols(o.a).unwrap()),
        ("sum", |t, o| t.sum(o.a).unwrap()),
        ("mean", |t, o| t.mean(o.a).unwrap()),
    ]
}

#[test]
fn every_primitive_passes_finite_differences_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, build) in primitive_cases() {
        for _ in 0..100 {
            let mut t = Tape::new();
            let o = Operands {
                a: t.leaf(random(&mut rng, 2, 3, 1.5)),
                b: t.leaf(random(&mut rng, 2, 3, 1.5)),
                sq: t.leaf(random(&mut rng, 3, 3, 1.0)),
                row: t.leaf(random(&mut rng, 1, 3, 1.0)),
                col: t.leaf(random(&mut rng, 2, 1, 1.0)),
            };
            let out = build(&mut t, &o);
            let (r, c) = t.shape(out);
            let wgt = t.constant(random(&mut rng, r, c, 1.0));
            let prod = t.mul(out, wgt).unwrap();
            let y = t.sum(prod).unwrap();
            let err = finite_diff_check(&t, y, &HashMap::new(), 1e-5).unwrap();
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }
}
