use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, grad_check_with_fault, DEFAULT_EPS, DEFAULT_TOLERANCE};
use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Scalarizes a tensor with fixed pseudo-random weights so every output
/// coordinate reaches the loss with a distinct coefficient.
fn probe(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let shape = tape.shape(x).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7309).sin() + 0.1).collect();
    let w = tape.constant(Tensor::from_f64(&shape, &w)?);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let y = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let any = tape.constant(t(&[3, 4], &[1., -2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]));
    let y = tape.matmul(z, any).unwrap();
    assert_eq!(tape.shape(y), &[2, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let y = tape.matmul(m, b).unwrap();
    assert_eq!(tape.value(y).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2x3]") && msg.contains("[4x5]"), "{msg}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let a = rand_t(&[5, 7], &mut rng);
        let b = rand_t(&[7, 3], &mut rng);
        let mut expect = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..7 {
                    expect[i * 3 + j] += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let y = tape.matmul(av, bv).unwrap();
        for (g, e) in tape.value(y).data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}

#[test]
fn transposed_products_agree_with_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(rand_t(&[4, 6], &mut rng));
    let b = tape.constant(rand_t(&[5, 6], &mut rng));
    let c = tape.constant(rand_t(&[4, 5], &mut rng));
    let nt = tape.matmul_nt(a, b).unwrap();
    let bt = tape.transpose(b).unwrap();
    let nt2 = tape.matmul(a, bt).unwrap();
    assert!(tape.value(nt).max_abs_diff(tape.value(nt2)) < 1e-14);
    let tn = tape.matmul_tn(a, c).unwrap();
    let at = tape.transpose(a).unwrap();
    let tn2 = tape.matmul(at, c).unwrap();
    assert!(tape.value(tn).max_abs_diff(tape.value(tn2)) < 1e-14);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[2.5, 2.5, 2.5]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    // Oracle: direct exp / sum without max subtraction.
    let (e0, e1) = (0f64.exp(), 3f64.ln().exp());
    assert!((tape.value(y).data()[0] - e0 / (e0 + e1)).abs() < 1e-15);
    assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_is_stable_for_large_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..50 {
        let offset = if trial % 2 == 0 { 1e4 } else { -1e4 };
        let data: Vec<f64> = (0..24).map(|_| offset + rng.random_range(-5.0..5.0)).collect();
        for axis in 0..2 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(t(&[4, 6], &data));
            let y = tape.softmax(x, axis).unwrap();
            let y = tape.value(y);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let sums: Vec<f64> = if axis == 1 {
                y.data().chunks(6).map(|r| r.iter().sum()).collect()
            } else {
                (0..6).map(|j| (0..4).map(|i| y.data()[i * 6 + j]).sum()).collect()
            };
            for s in sums {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 2], &[0.3, -1.2, 4.0, 0.5]));
    let eye = tape.constant(Tensor::eye(2));
    let zero_b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.linear(x, eye, Some(zero_b)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let x0 = tape.constant(Tensor::zeros(&[3, 2]));
    let w = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2], &[10., 10.]));
    let y = tape.linear(x0, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[10., 10., 10., 10., 10., 10.]);

    let x1 = tape.constant(t(&[1, 2], &[1., 1.]));
    let y = tape.linear(x1, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[14., 16.]);

    let bad = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.linear(bad, w, None), Err(Error::Dimension { .. })));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1., 0., 2.]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
    let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.5);
    assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn non_finite_forward_is_an_error_naming_the_op() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1], &[1e300]));
    let err = tape.scale(x, 1e300).unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref op } if op == "scale"));
}

#[test]
fn grad_check_examples() {
    let square_sum = |tape: &mut Tape<f64>, v: &[Var]| {
        let sq = tape.mul(v[0], v[0])?;
        tape.sum(sq)
    };
    let x = t(&[2], &[1.0, 2.0]);
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let out = square_sum(&mut tape, &[xv]).unwrap();
    let g = tape.backward(out).unwrap();
    assert_eq!(g.get(xv).unwrap(), &[2.0, 4.0]);
    let r = grad_check(square_sum, &[x], DEFAULT_EPS).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");

    let constant = |tape: &mut Tape<f64>, v: &[Var]| {
        let z = tape.scale(v[0], 0.0)?;
        let s = tape.sum(z)?;
        let c = tape.constant(Tensor::scalar(3.0));
        tape.add(s, c)
    };
    let r = grad_check(constant, &[t(&[3], &[1., 2., 3.])], DEFAULT_EPS).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    assert_eq!(r.analytic, 0.0);
    assert_eq!(r.numeric, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let composite = |tape: &mut Tape<f64>, v: &[Var]| {
        let y = tape.linear(v[0], v[1], Some(v[2]))?;
        let s = tape.softmax(y, 1)?;
        probe(tape, s)
    };
    let inputs = [rand_t(&[3, 4], &mut rng), rand_t(&[4, 5], &mut rng), rand_t(&[5], &mut rng)];
    let r = grad_check(composite, &inputs, DEFAULT_EPS).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    // The unperturbed value is finite; x + eps overflows.
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let y = tape.scale(v[0], 1e305)?;
        tape.sum(y)
    };
    let err = grad_check(f, &[t(&[1], &[1.7976931348e3])], DEFAULT_EPS).unwrap_err();
    assert!(matches!(err, Error::CheckFailure { .. }), "{err}");
}

#[test]
fn corrupted_backward_is_caught() {
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let y = tape.sigmoid(v[0])?;
        probe(tape, y)
    };
    let x = t(&[4], &[0.1, -0.4, 0.8, 1.3]);
    let good = grad_check_with_fault(f, &[x.clone()], DEFAULT_EPS, None).unwrap();
    assert!(good.passed(DEFAULT_TOLERANCE));
    let bad = grad_check_with_fault(f, &[x], DEFAULT_EPS, Some("sigmoid")).unwrap();
    assert!(!bad.passed(DEFAULT_TOLERANCE));
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Tape<f64>, &[Var]) -> Result<Var>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let m = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let n = rng.random_range(2..5);
    let b = rng.random_range(1..4);
    vec![
        ("matmul", vec![vec![m, k], vec![k, n]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y)
        }),
        ("matmul_nt", vec![vec![m, k], vec![n, k]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            probe(t, y)
        }),
        ("matmul_tn", vec![vec![k, m], vec![k, n]], |t, v| {
            let y = t.matmul_tn(v[0], v[1])?;
            probe(t, y)
        }),
        ("add_sub_mul", vec![vec![m, n], vec![m, n]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let p = t.mul(s, v[1])?;
            probe(t, p)
        }),
        ("linear", vec![vec![b, m, k], vec![k, n], vec![n]], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            probe(t, y)
        }),
        ("scale", vec![vec![m, n]], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            probe(t, y)
        }),
        ("relu", vec![vec![m, n]], |t, v| {
            let y = t.relu(v[0])?;
            probe(t, y)
        }),
        ("sigmoid", vec![vec![m, n]], |t, v| {
            let y = t.sigmoid(v[0])?;
            probe(t, y)
        }),
        ("tanh", vec![vec![m, n]], |t, v| {
            let y = t.tanh(v[0])?;
            probe(t, y)
        }),
        ("softmax_last", vec![vec![b, m, n]], |t, v| {
            let y = t.softmax(v[0], 2)?;
            probe(t, y)
        }),
        ("softmax_mid", vec![vec![b, n, m]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            probe(t, y)
        }),
        ("layer_norm", vec![vec![m, n], vec![n], vec![n]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y)
        }),
        ("group_norm", vec![vec![b, m, n]], |t, v| {
            let shape = t.shape(v[0]).to_vec();
            let y = t.group_norm(v[0], shape[1] * shape[2], 1e-5)?;
            probe(t, y)
        }),
        ("transpose", vec![vec![b, m, n]], |t, v| {
            let y = t.transpose(v[0])?;
            probe(t, y)
        }),
        ("slice_concat", vec![vec![m, n], vec![m, 2]], |t, v| {
            let s = t.slice_cols(v[0], 1, t.shape(v[0])[1] - 1)?;
            let c = t.concat_cols(&[v[1], s, v[0]])?;
            probe(t, c)
        }),
        ("concat_rows_gather", vec![vec![m, n], vec![2, n]], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            let rows = t.value(c).rows();
            let idx: Vec<usize> = (0..rows + 3).map(|i| (i * 7) % rows).collect();
            let g = t.gather_rows(c, &idx)?;
            probe(t, g)
        }),
        ("row_scale", vec![vec![m, n]], |t, v| {
            let rows = t.value(v[0]).rows();
            let s: Vec<f64> = (0..rows).map(|r| r as f64 - 0.5).collect();
            let y = t.row_scale(v[0], &s)?;
            probe(t, y)
        }),
        ("mean_axis", vec![vec![b, m, n]], |t, v| {
            let y = t.mean_axis(v[0], 1)?;
            probe(t, y)
        }),
        ("mean", vec![vec![m, n]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.mean(sq)
        }),
        ("im2col3", vec![vec![m + 1, n, 2]], |t, v| {
            let y = t.im2col3(v[0])?;
            probe(t, y)
        }),
    ]
}

#[test]
fn every_op_passes_grad_check_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        for (name, shapes, f) in op_cases(&mut rng) {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(s, &mut rng)).collect();
            let r = grad_check(f, &inputs, DEFAULT_EPS).unwrap();
            assert!(r.max_rel_error < DEFAULT_TOLERANCE, "{name} (seed {seed}): {r:?}");
            worst = worst.max(r.max_rel_error);
        }
    }
    assert!(worst < DEFAULT_TOLERANCE);
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_t(&[3, 4], &mut rng);
    let w = rand_t(&[4, 5], &mut rng);
    let build = |tape: &mut Tape<f64>, which: u8| {
        let xv = tape.var(x.clone());
        let wv = tape.var(w.clone());
        let y = tape.matmul(xv, wv).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let l1 = probe(tape, s).unwrap();
        let t2 = tape.tanh(y).unwrap();
        let l2 = tape.mean(t2).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        (tape.backward(loss).unwrap(), xv, wv)
    };
    let (g1, x1, w1) = build(&mut Tape::new(), 0);
    let (g2, x2, w2) = build(&mut Tape::new(), 1);
    let (g12, x12, w12) = build(&mut Tape::new(), 2);
    for (a, b, c) in [(x1, x2, x12), (w1, w2, w12)] {
        let (ga, gb, gc) = (g1.get(a).unwrap(), g2.get(b).unwrap(), g12.get(c).unwrap());
        for i in 0..gc.len() {
            assert!((ga[i] + gb[i] - gc[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.var(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn param_names_are_unique_and_checkpoint_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    store.add("a.weight", &[3, 4], Init::fan_in(3), &mut rng).unwrap();
    store.add("a.bias", &[4], Init::Zeros, &mut rng).unwrap();
    store.add("q", &[2, 4], Init::query(), &mut rng).unwrap();
    assert!(store.add("q", &[1], Init::Zeros, &mut rng).is_err());

    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = Checkpoint::new();
    ckpt.meta.insert("step".into(), "12".into());
    ckpt.push_params(&store);
    ckpt.save(dir.path()).unwrap();
    let loaded = Checkpoint::<f32>::load(dir.path()).unwrap();
    assert_eq!(loaded, ckpt);
    let restored = loaded.to_param_store().unwrap();
    for (a, b) in store.iter().zip(restored.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.init, b.init);
        let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    let blob1 = std::fs::read(dir.path().join(checkpoint::BLOB_FILE)).unwrap();
    loaded.save(dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join(checkpoint::BLOB_FILE)).unwrap(), blob1);

    // dtype mismatch and truncation are reported.
    assert!(Checkpoint::<f64>::load(dir.path()).is_err());
    std::fs::write(dir.path().join(checkpoint::BLOB_FILE), &blob1[..blob1.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn mac_counter_tracks_products() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[3, 5]));
    let b = tape.constant(Tensor::zeros(&[5, 7]));
    reset_mac_count();
    tape.matmul(a, b).unwrap();
    assert_eq!(mac_count(), 105);
}
