//! Every differentiable primitive against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strtr::autodiff::{finite_difference_gradient, gradient, max_relative_error, NormMode};
use strtr::{Precision, Result, Tape, Tensor, Var};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero, for divisors and ReLU inputs.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.3 + v.abs());
    }
    t
}

/// Reduces an op output to a scalar via a fixed random weighting.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, t.shape(y));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let ad = gradient(&f, inputs, Precision::F64).unwrap();
    let fd = finite_difference_gradient(&f, inputs, EPS).unwrap();
    for (i, (a, b)) in ad.iter().zip(&fd).enumerate() {
        let err = max_relative_error(a, b);
        assert!(err <= TOL, "{name}: input {i} relative error {err:.3e}\nad={a:?}\nfd={b:?}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random_away_from_zero(&mut rng, &[3, 4]);
    check("add", &[a.clone(), b.clone()], |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, 9) });
    check("sub", &[a.clone(), b.clone()], |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 9) });
    check("mul", &[a.clone(), b.clone()], |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 9) });
    check("div", &[a.clone(), b.clone()], |t, v| { let y = t.div(v[0], v[1])?; weighted_sum(t, y, 9) });
    check("add_scalar", &[a.clone()], |t, v| { let y = t.add_scalar(v[0], 0.7)?; let y = t.mul(y, y)?; weighted_sum(t, y, 9) });
    check("mul_scalar", &[a.clone()], |t, v| { let y = t.mul_scalar(v[0], -1.3)?; weighted_sum(t, y, 9) });
}

#[test]
fn broadcast_row_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 4]);
    let r = random(&mut rng, &[4]);
    check("add_row", &[x.clone(), r.clone()], |t, v| { let y = t.add_row(v[0], v[1])?; let y = t.mul(y, y)?; weighted_sum(t, y, 3) });
    check("mul_row", &[x, r], |t, v| { let y = t.mul_row(v[0], v[1])?; weighted_sum(t, y, 3) });
}

#[test]
fn matrix_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 5]);
    let b = random(&mut rng, &[5, 2]);
    check("matmul", &[a, b], |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, 4) });
    let a = random(&mut rng, &[4, 2, 3]);
    let b = random(&mut rng, &[4, 3, 5]);
    check("bmm", &[a, b], |t, v| { let y = t.bmm(v[0], v[1])?; weighted_sum(t, y, 4) });
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 4]);
    let y = random(&mut rng, &[2, 5, 4]);
    check("reshape", &[x.clone()], |t, v| { let y = t.reshape(v[0], &[6, 4])?; weighted_sum(t, y, 5) });
    check("permute", &[x.clone()], |t, v| { let y = t.permute(v[0], &[2, 0, 1])?; weighted_sum(t, y, 5) });
    check("transpose", &[random(&mut rng, &[3, 7])], |t, v| { let y = t.transpose(v[0])?; weighted_sum(t, y, 5) });
    check("concat", &[x.clone(), y], |t, v| { let y = t.concat(&[v[0], v[1]], 1)?; weighted_sum(t, y, 5) });
    check("split", &[x.clone()], |t, v| {
        let parts = t.split(v[0], 2, &[1, 3])?;
        let a = weighted_sum(t, parts[0], 5)?;
        let b = weighted_sum(t, parts[1], 6)?;
        t.mul(a, b)
    });
    let m = random(&mut rng, &[4, 3]);
    check("gather_rows", &[m], |t, v| {
        let y = t.gather_rows(v[0], &[Some(2), None, Some(0), Some(2), Some(3)])?;
        weighted_sum(t, y, 5)
    });
}

#[test]
fn softmax_and_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 5]);
    check("softmax", &[x.clone()], |t, v| { let y = t.softmax(v[0])?; weighted_sum(t, y, 6) });
    let mask: Vec<bool> = (0..15).map(|i| i % 4 == 1).collect();
    check("masked_fill+softmax", &[x], |t, v| {
        let y = t.masked_fill(v[0], &mask)?;
        let y = t.softmax(y)?;
        weighted_sum(t, y, 6)
    });
}

#[test]
fn relu_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_away_from_zero(&mut rng, &[2, 3, 4]);
    check("relu", &[x.clone()], |t, v| { let y = t.relu(v[0])?; weighted_sum(t, y, 7) });
    for axis in 0..3 {
        check("sum_axis", &[x.clone()], |t, v| { let y = t.sum_axis(v[0], axis)?; let y = t.mul(y, y)?; weighted_sum(t, y, 7) });
        check("mean_axis", &[x.clone()], |t, v| { let y = t.mean_axis(v[0], axis)?; let y = t.mul(y, y)?; weighted_sum(t, y, 7) });
    }
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[6, 4]);
    let g = random_away_from_zero(&mut rng, &[4]);
    let b = random(&mut rng, &[4]);
    check("batch_norm(train)", &[x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Batch, None, 1e-5)?;
        weighted_sum(t, y, 8)
    });
    let mean = [0.1, -0.2, 0.3, 0.0];
    let var = [1.0, 0.5, 2.0, 0.8];
    check("batch_norm(eval)", &[x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Fixed, Some((&mean, &var)), 1e-5)?;
        weighted_sum(t, y, 8)
    });
    check("layer_norm", &[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 8)
    });
}

#[test]
fn cross_entropy_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[4, 3]);
    check("cross_entropy", &[logits], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1]));
}

#[test]
fn masked_positions_receive_zero_gradient() {
    let x = Tensor::matrix(&[&[0.3, 1.2, -0.5], &[2.0, 0.1, 0.7]]);
    let mask = [false, true, false, true, false, false];
    let g = gradient(
        |t, v| {
            let y = t.masked_fill(v[0], &mask)?;
            let y = t.softmax(y)?;
            weighted_sum(t, y, 11)
        },
        &[x],
        Precision::F64,
    )
    .unwrap();
    assert_eq!(g[0].data()[1], 0.0);
    assert_eq!(g[0].data()[3], 0.0);
    assert!(g[0].data()[0] != 0.0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new(Precision::F64);
        let x = t.constant(Tensor::new(&[3, 4], values).unwrap());
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn reshape_and_permute_round_trip_exactly(values in proptest::collection::vec(-1e6f64..1e6, 24), perm in Just([2usize, 0, 1]).prop_shuffle()) {
        let x = Tensor::new(&[2, 3, 4], values).unwrap();
        let inverse: Vec<usize> = (0..3).map(|i| perm.iter().position(|&p| p == i).unwrap()).collect();
        let back = x.permute(&perm).unwrap().permute(&inverse).unwrap();
        prop_assert_eq!(&back, &x);
        let back = x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        prop_assert_eq!(&back, &x);
    }
}
