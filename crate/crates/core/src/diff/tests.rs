use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(rows, cols, data.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

#[test]
fn gelu_at_origin_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.gelu(x).unwrap();
    assert_eq!(g.value(y).item(), 0.0);
}

#[test]
fn tanh_d1_at_origin_is_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.tanh_d1(x).unwrap();
    assert_eq!(g.value(y).item(), 1.0);
}

#[test]
fn logsumexp_of_identical_entries() {
    let n = 7;
    let v = 3.25;
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(2, n, v));
    let y = g.logsumexp_rows(x).unwrap();
    for r in 0..2 {
        assert!((g.value(y).get(r, 0) - (v + (n as f64).ln())).abs() < 1e-14);
    }
}

#[test]
fn logsumexp_is_overflow_safe() {
    let mut g = Graph::new();
    let x = g.constant(t(1, 3, &[1000.0, 1000.0, 1000.0]));
    let y = g.logsumexp_rows(x).unwrap();
    assert!((g.value(y).item() - (1000.0 + 3f64.ln())).abs() < 1e-10);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let w = g.param(t(1, 2, &[1.0, 2.0]));
    let sq = g.square(w).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn logsumexp_gradient_is_softmax() {
    let v = [0.3, -1.2, 2.0, 0.5];
    let mut g = Graph::new();
    let x = g.param(t(1, 4, &v));
    let y = g.logsumexp_rows(x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let z: f64 = v.iter().map(|a| a.exp()).sum();
    for (k, a) in v.iter().enumerate() {
        assert!((grads.get(x).unwrap().data()[k] - a.exp() / z).abs() < 1e-14);
    }
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(t(1, 2, &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(DiffError::NotScalar([1, 2]))));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    assert!(matches!(g.matmul(a, b), Err(DiffError::Shape(_))));
    let c = g.constant(Tensor::zeros(3, 2));
    assert!(matches!(g.add(a, c), Err(DiffError::Shape(_))));
}

#[test]
fn non_finite_output_aborts() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(-1.0));
    assert_eq!(g.log(x), Err(DiffError::NonFinite("log")));
    let big = g.constant(Tensor::scalar(1e6));
    assert_eq!(g.exp(big), Err(DiffError::NonFinite("exp")));
}

#[test]
fn grad_check_square_at_three() {
    let report = grad_check(
        |g, x| {
            let y = g.square(x)?;
            g.sum(y)
        },
        &Tensor::scalar(3.0),
        1e-4,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.checked, 1);
    assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
}

#[test]
fn grad_check_flags_abs_kink() {
    let report = grad_check(
        |g, x| {
            let y = g.abs(x)?;
            g.sum(y)
        },
        &t(1, 3, &[0.0, 0.5, -2.0]),
        1e-4,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.non_differentiable, vec![0]);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error < 1e-8);
}

fn unary_loss(op: Op) -> impl Fn(&mut Graph, NodeId) -> Result<NodeId, DiffError> {
    // Weighting by fixed coefficients makes every output element matter.
    move |g, x| {
        let y = g.apply(op, &[x])?;
        let rows = g.value(y).rows();
        let cols = g.value(y).cols();
        let w = g.constant(Tensor::from_fn(rows, cols, |i, j| 0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64));
        let p = g.hadamard(y, w)?;
        g.sum(p)
    }
}

/// Every primitive agrees with central differences at 1000 random points.
#[test]
fn primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let unary = [
        Op::Gelu,
        Op::GeluD1,
        Op::Tanh,
        Op::TanhD1,
        Op::Exp,
        Op::Square,
        Op::Abs,
        Op::Scale(-1.7),
        Op::Sum,
        Op::LogSumExpRows,
        Op::Slice { axis: Axis::Cols, start: 1, len: 2 },
        Op::Slice { axis: Axis::Rows, start: 1, len: 1 },
    ];
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let point = random_tensor(&mut rng, 2, 3, 2.5);
        let op = unary[trial % unary.len()];
        let r = grad_check(unary_loss(op), &point, 1e-5, 1e-4).unwrap();
        worst = worst.max(r.max_rel_error);
        assert!(r.passes(1e-4), "{op:?} at {point:?}: {}", r.max_rel_error);

        // log needs a positive domain.
        let pos = point.map(|v| v.abs() + 0.2);
        let r = grad_check(unary_loss(Op::Log), &pos, 1e-6, 1e-4).unwrap();
        assert!(r.passes(1e-4), "log: {}", r.max_rel_error);
    }
    assert!(worst < 1e-4);
}

#[test]
fn binary_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..200 {
        let other = random_tensor(&mut rng, 3, 3, 1.5);
        let point = random_tensor(&mut rng, 3, 3, 1.5);
        let kind = trial % 8;
        let build = |g: &mut Graph, x: NodeId| -> Result<NodeId, DiffError> {
            let o = g.constant(other.clone());
            let y = match kind {
                0 => g.matmul(x, o)?,
                1 => g.matmul(o, x)?,
                2 => g.apply(Op::MatMul { trans_a: true, trans_b: false }, &[x, o])?,
                3 => g.apply(Op::MatMul { trans_a: false, trans_b: true }, &[o, x])?,
                4 => g.apply(Op::MatMul { trans_a: true, trans_b: true }, &[x, x])?,
                5 => g.sub(o, x)?,
                6 => g.hadamard(x, x)?,
                _ => g.concat(&[x, o, x], if trial % 2 == 0 { Axis::Rows } else { Axis::Cols })?,
            };
            let y = g.tanh(y)?;
            g.sum(y)
        };
        let r = grad_check(build, &point, 1e-5, 1e-4).unwrap();
        assert!(r.passes(1e-5), "kind {kind}: {}", r.max_rel_error);
    }
}

/// A random three-layer composition of the primitives, including the
/// derivative primitives, matches central differences.
#[test]
fn random_three_layer_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let w1 = random_tensor(&mut rng, 4, 5, 1.0);
        let w2 = random_tensor(&mut rng, 5, 5, 1.0);
        let w3 = random_tensor(&mut rng, 5, 2, 1.0);
        let x = random_tensor(&mut rng, 3, 4, 1.0);
        let build = |g: &mut Graph, p: NodeId| -> Result<NodeId, DiffError> {
            let (a, b, c) = (g.constant(w1.clone()), g.constant(w2.clone()), g.constant(w3.clone()));
            let h = g.matmul(p, a)?;
            let h1 = g.gelu(h)?;
            let d1 = g.gelu_d1(h)?;
            let h = g.hadamard(h1, d1)?;
            let h = g.matmul(h, b)?;
            let h = g.tanh(h)?;
            let h = g.matmul(h, c)?;
            let t = g.tanh_d1(h)?;
            let l = g.logsumexp_rows(t)?;
            g.sum(l)
        };
        let r = grad_check(build, &x, 1e-4, 1e-5).unwrap();
        assert!(r.passes(1e-5), "{}", r.max_rel_error);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, 8, 8, 1.0);
        let mut g = Graph::new();
        let x = g.param(a);
        let y = g.matmul(x, x).unwrap();
        let y = g.gelu(y).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(s).item().to_bits(), grads.get(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::filled(2, 2, 1.0));
    let p = g.param(Tensor::filled(2, 2, 2.0));
    let y = g.hadamard(c, p).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
}
