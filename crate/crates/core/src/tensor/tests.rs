use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn eval1(shape: &[usize], data: &[f64], f: impl Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let a = g.constant(t(shape, data));
    let out = f(&mut g, a);
    g.value(out).data().to_vec()
}

fn eval2(a: Tensor, b: Tensor, f: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).clone())
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![0], vec![]).is_err());
}

#[test]
fn elementwise_examples() {
    let a = t(&[2], &[1.0, 2.0]);
    let r = eval2(a.clone(), a.clone(), |g, x, y| g.sub(x, y)).unwrap();
    assert_eq!(r.data(), &[0.0, 0.0]);
    let r = eval2(a, t(&[2], &[3.0, 4.0]), |g, x, y| g.mul(x, y)).unwrap();
    assert_eq!(r.data(), &[3.0, 8.0]);
    let r = eval2(t(&[2], &[0.0, 0.0]), t(&[2], &[5.0, -5.0]), |g, x, y| g.add(x, y)).unwrap();
    assert_eq!(r.data(), &[5.0, -5.0]);
}

#[test]
fn elementwise_shape_mismatch_names_both_shapes() {
    let err = eval2(t(&[2], &[1.0, 2.0]), t(&[3], &[1.0, 2.0, 3.0]), |g, x, y| g.add(x, y)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let r = eval2(a.clone(), t(&[2, 1], &[5.0, 6.0]), |g, x, y| g.matmul(x, y)).unwrap();
    assert_eq!(r.shape(), &[2, 1]);
    assert_eq!(r.data(), &[17.0, 39.0]);
    let r = eval2(a.clone(), Tensor::eye(2), |g, x, y| g.matmul(x, y)).unwrap();
    assert_eq!(r, a);
    let r = eval2(Tensor::zeros(&[3, 2]), a.clone(), |g, x, y| g.matmul(x, y)).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
    assert!(matches!(
        eval2(a, Tensor::zeros(&[3, 1]), |g, x, y| g.matmul(x, y)),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 1], &[1.0]));
    let b = g.constant(t(&[1, 1], &[2.0]));
    let single = g.concat_last(&[a]).unwrap();
    assert_eq!(g.value(single), g.value(a));
    let ab = g.concat_last(&[a, b]).unwrap();
    assert_eq!(g.value(ab), &t(&[1, 2], &[1.0, 2.0]));

    let d = 3;
    let parts: Vec<Var> = (0..4).map(|_| g.constant(Tensor::zeros(&[1, 2 * d]))).collect();
    let all = g.concat_last(&parts).unwrap();
    assert_eq!(g.shape(all), &[1, 8 * d]);

    assert!(matches!(g.concat_last(&[]), Err(TensorError::Empty { .. })));
    let tall = g.constant(Tensor::zeros(&[2, 1]));
    assert!(g.concat_last(&[a, tall]).is_err());
}

#[test]
fn activation_examples() {
    assert_eq!(eval1(&[2], &[-3.0, 3.0], |g, a| g.relu(a)), vec![0.0, 3.0]);
    assert_eq!(eval1(&[1], &[0.0], |g, a| g.sigmoid(a)), vec![0.5]);
    assert_eq!(eval1(&[1], &[0.0], |g, a| g.tanh(a)), vec![0.0]);
    let s = eval1(&[1], &[3f64.ln()], |g, a| g.sigmoid(a));
    assert_abs_diff_eq!(s[0], 0.75, epsilon = 1e-15);
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, 0.0, 1.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn softmax_masked_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let s = g.softmax_masked(a, &[true; 3]).unwrap();
    for v in g.value(s).data() {
        assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
    }

    let a = g.constant(t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let s = g.softmax_masked(a, &[true; 3]).unwrap();
    for (v, e) in g.value(s).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert_abs_diff_eq!(*v, e, epsilon = 1e-15);
    }

    let a = g.constant(t(&[1, 2], &[5.0, 100.0]));
    let s = g.softmax_masked(a, &[true, false]).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);

    assert!(matches!(
        g.softmax_masked(a, &[false, false]),
        Err(TensorError::DegenerateMask { .. })
    ));
}

#[test]
fn max_over_time_examples() {
    let mut g = Graph::new();
    let one = g.constant(t(&[1, 3], &[4.0, -1.0, 2.0]));
    let m = g.max_over_time(one, &[true]).unwrap();
    assert_eq!(g.value(m).data(), &[4.0, -1.0, 2.0]);

    let a = g.constant(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
    let m = g.max_over_time(a, &[true, true]).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);

    let b = g.constant(t(&[2, 2], &[1.0, 5.0, 9.0, 9.0]));
    let m = g.max_over_time(b, &[true, false]).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 5.0]);

    assert!(matches!(
        g.max_over_time(b, &[false, false]),
        Err(TensorError::DegenerateMask { .. })
    ));
}

#[test]
fn max_over_time_routes_gradient_to_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mut g = Graph::new();
        let x = g.param(Tensor::uniform(&[6, 4], 1.0, &mut rng));
        let w = g.constant(Tensor::uniform(&[4], 1.0, &mut rng));
        let m = g.max_over_time(x, &[true, true, true, true, false, false]).unwrap();
        let p = g.mul(m, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..6).map(|i| gx.data()[i * 4 + j]).collect();
            let nonzero = col.iter().filter(|v| **v != 0.0).count();
            assert_eq!(nonzero, 1);
            assert_eq!(col.iter().sum::<f64>(), g.value(w).data()[j]);
            assert_eq!(col[4], 0.0);
            assert_eq!(col[5], 0.0);
        }
    }
}

#[test]
fn max_over_time_ties_break_to_earliest() {
    let mut g = Graph::new();
    let x = g.param(t(&[3, 1], &[2.0, 2.0, 2.0]));
    let m = g.max_over_time(x, &[true; 3]).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let d = g.dropout(a, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(d), g.value(a));
    let d = g.dropout(a, 0.5, false, &mut rng).unwrap();
    assert_eq!(g.value(d), g.value(a));
    assert!(g.dropout(a, 1.0, true, &mut rng).is_err());
    assert!(g.dropout(a, -0.1, true, &mut rng).is_err());
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut g = Graph::new();
    let n = 100_000;
    let a = g.constant(Tensor::filled(&[n], 1.0));
    let d = g.dropout(a, 0.5, true, &mut rng).unwrap();
    let vals = g.value(d).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = vals.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(w).is_none_or(|gw| gw.data().iter().all(|&v| v == 0.0)));

    assert!(matches!(g.backward(c), Err(TensorError::NonScalar(_))));
}

#[test]
fn constants_never_accumulate_gradient() {
    let mut g = Graph::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let p = g.mul(w, c).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn gradient_shapes_match_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let a = g.param(Tensor::uniform(&[3, 4], 1.0, &mut rng));
    let b = g.param(Tensor::uniform(&[4, 2], 1.0, &mut rng));
    let bias = g.param(Tensor::uniform(&[2], 1.0, &mut rng));
    let m = g.matmul(a, b).unwrap();
    let e = g.expand_rows(bias, 3).unwrap();
    let s = g.add(m, e).unwrap();
    let s = g.tanh(s);
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    for v in [a, b, bias] {
        assert_eq!(grads.get(v).unwrap().shape(), g.shape(v));
    }
}

#[test]
fn grad_check_examples() {
    let r = grad_check(|g, x| g.mul(x[0], x[0]).map(|y| g.sum(y)), &[Tensor::scalar(3.0)], 1e-5, 1e-4).unwrap();
    assert!(r.passed);
    assert_abs_diff_eq!(r.coordinates[0].analytic, 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.coordinates[0].numeric, 6.0, epsilon = 1e-6);

    let r = grad_check(
        |g, _x| {
            let c = g.constant(Tensor::scalar(4.0));
            Ok(g.sum(c))
        },
        &[Tensor::scalar(3.0)],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed);
    assert_eq!(r.coordinates[0].analytic, 0.0);
    assert_eq!(r.coordinates[0].numeric, 0.0);

    // x * detach(x) has value x² but records a gradient of x only.
    let r = grad_check(
        |g, x| {
            let d = g.detach(x[0]);
            g.mul(x[0], d).map(|y| g.sum(y))
        },
        &[Tensor::scalar(3.0)],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(!r.passed);
}

// Finite-difference sweeps: 100 seeded random instances per operation with
// inputs drawn from [-1, 1].

const TRIALS: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn sweep(seed: u64, shapes: &[&[usize]], mut f: impl FnMut(&mut Graph, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, 1.0, &mut rng)).collect();
        // Random weights turn vector outputs into a scalar that exercises
        // every output coordinate.
        let mut weights: Option<Tensor> = None;
        let report = grad_check(
            |g, x| {
                let out = f(g, x)?;
                let w = weights
                    .get_or_insert_with(|| Tensor::uniform(g.shape(out), 1.0, &mut rng))
                    .clone();
                let w = g.constant(w);
                let p = g.mul(out, w)?;
                Ok(g.sum(p))
            },
            &inputs,
            H,
            TOL,
        )
        .unwrap();
        assert!(report.passed, "trial {trial}: worst {:?}", report.worst());
    }
}

#[test]
fn fd_elementwise() {
    sweep(10, &[&[3, 2], &[3, 2]], |g, x| g.add(x[0], x[1]));
    sweep(11, &[&[3, 2], &[3, 2]], |g, x| g.sub(x[0], x[1]));
    sweep(12, &[&[3, 2], &[3, 2]], |g, x| g.mul(x[0], x[1]));
    sweep(13, &[&[4]], |g, x| Ok(g.scale(x[0], -2.5)));
    sweep(14, &[&[1], &[2, 3]], |g, x| g.scale_by(x[0], x[1]));
}

#[test]
fn fd_matmul_and_layout() {
    sweep(20, &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]));
    sweep(21, &[&[3, 4]], |g, x| g.transpose(x[0]));
    sweep(22, &[&[3, 4]], |g, x| g.reshape(x[0], &[2, 6]));
    sweep(23, &[&[4]], |g, x| g.expand_rows(x[0], 3));
    sweep(24, &[&[2, 3], &[2, 1], &[2, 2]], |g, x| g.concat_last(x));
    sweep(25, &[&[2, 3], &[1, 3]], |g, x| g.concat_rows(x));
    sweep(26, &[&[5, 3]], |g, x| g.slice_rows(x[0], 1, 3));
    sweep(27, &[&[2, 3]], |g, x| g.pad_rows(x[0], 4));
    sweep(28, &[&[2, 8]], |g, x| g.slice_last(x[0], 2, 4));
    sweep(29, &[&[6, 3]], |g, x| g.gather_rows(x[0], &[1, 3, 3, 5]));
    sweep(30, &[&[2, 3]], |g, x| g.pick(x[0], 4));
}

#[test]
fn fd_nonlinearities() {
    sweep(40, &[&[3, 3]], |g, x| Ok(g.sigmoid(x[0])));
    sweep(41, &[&[3, 3]], |g, x| Ok(g.tanh(x[0])));
    sweep(42, &[&[3, 3]], |g, x| Ok(g.relu(x[0])));
    sweep(43, &[&[4]], |g, x| {
        // Shifted into the positive range so the floor never binds.
        let s = g.sigmoid(x[0]);
        Ok(g.log_floor(s, 1e-12))
    });
    sweep(44, &[&[3]], |g, x| Ok(g.sum(x[0])));
}

#[test]
fn fd_softmax_and_pooling() {
    let mask = [true, false, true, true, true, true, false, true, true, true, true, false];
    sweep(50, &[&[3, 4]], |g, x| g.softmax_masked(x[0], &mask));
    sweep(51, &[&[2, 5]], |g, x| g.softmax(x[0]));
    sweep(52, &[&[5, 3]], |g, x| g.max_over_time(x[0], &[true, true, true, false, true]));
}

#[test]
fn fd_dropout_training_mask() {
    // Reseeding on every call keeps one mask across the recorded and
    // perturbed evaluations.
    sweep(61, &[&[3, 3]], |g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        g.dropout(x[0], 0.5, true, &mut rng)
    });
}

#[test]
fn fd_composed_graph() {
    sweep(70, &[&[2, 3], &[3, 4], &[4]], |g, x| {
        let m = g.matmul(x[0], x[1])?;
        let b = g.expand_rows(x[2], 2)?;
        let z = g.add(m, b)?;
        let h = g.tanh(z);
        let s = g.softmax(h)?;
        let p = g.max_over_time(s, &[true, true])?;
        let q = g.relu(p);
        g.mul(q, p)
    });
}

#[test]
fn identical_seeds_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let a = g.param(Tensor::uniform(&[4, 5], 1.0, &mut rng));
        let b = g.param(Tensor::uniform(&[5, 3], 1.0, &mut rng));
        let m = g.matmul(a, b).unwrap();
        let d = g.dropout(m, 0.5, true, &mut rng).unwrap();
        let s = g.softmax(d).unwrap();
        let l = g.log_floor(s, 1e-12);
        let loss = g.sum(l);
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[rows, cols], scale, &mut rng);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..rows {
            mask[r * cols + rng.gen_range(0..cols)] = true;
        }
        let mut g = Graph::new();
        let a = g.constant(x);
        let s = g.softmax_masked(a, &mask).unwrap();
        let y = g.value(s);
        for r in 0..rows {
            let row = y.row(r);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }
}

#[test]
fn probes_straddling_a_kink_are_flagged() {
    let sum_relu = |g: &mut Graph, x: &[Var]| {
        let r = g.relu(x[0]);
        Ok(g.sum(r))
    };
    let near = Tensor::vector(vec![2e-6, 0.5]);
    let report = grad_check(sum_relu, &[near], 1e-5, 1e-4).unwrap();
    assert_eq!(report.kink_crossings(), 1);
    assert!(report.coordinates[0].crossed_kink);
    assert!(!report.coordinates[1].crossed_kink);

    let clear = Tensor::vector(vec![0.3, -0.5]);
    assert_eq!(grad_check(sum_relu, &[clear], 1e-5, 1e-4).unwrap().kink_crossings(), 0);

    let pool = |g: &mut Graph, x: &[Var]| {
        let m = g.max_over_time(x[0], &[true, true])?;
        Ok(g.sum(m))
    };
    let tied = Tensor::from_rows(&[vec![1.0], vec![1.0 + 1e-7]]);
    assert_eq!(grad_check(pool, &[tied], 1e-5, 1e-4).unwrap().kink_crossings(), 2);
}

#[test]
fn constants_do_not_enter_the_kink_pattern() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(vec![1.0, -1.0]));
    g.relu(c);
    assert!(g.kink_pattern().is_empty());
    let p = g.param(Tensor::vector(vec![1.0, -1.0]));
    g.relu(p);
    assert_eq!(g.kink_pattern(), vec![1, 0]);
}
