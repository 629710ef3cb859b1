use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;

fn eval(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).data()[0]
}

fn check_with_params(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
    let np = inputs.len();
    inputs.extend(extra);
    let report = grad_check(
        |tape, v| {
            tape.bind(v[..np].to_vec());
            f(tape, &v[np..])
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    report.max_rel_error
}

fn set(store: &mut ParamStore<f64>, id: crate::numerics::ParamId, data: &[f64]) {
    let shape = store.get(id).tensor.shape().to_vec();
    store.get_mut(id).tensor = Tensor::from_f64(&shape, data).unwrap();
}

/// Lovász extension by summing the set function over every level set.
fn brute_force_extension(errors: &[f64], fg: &[bool]) -> f64 {
    let n = errors.len();
    let gts = fg.iter().filter(|&&f| f).count();
    let mut total = 0.0;
    for mask in 1u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let lo = (0..n).filter(|&i| inside(i)).map(|i| errors[i]).fold(f64::INFINITY, f64::min);
        let hi = (0..n).filter(|&i| !inside(i)).map(|i| errors[i]).fold(0.0, f64::max);
        let width = (lo.min(1.0) - hi).max(0.0);
        if width == 0.0 {
            continue;
        }
        let size = mask.count_ones() as usize;
        let extra = (0..n).filter(|&i| inside(i) && !fg[i]).count();
        total += size as f64 / (gts + extra) as f64 * width;
    }
    total
}

#[test]
fn grid_indexing_and_validation() {
    let g = GridGeometry::cubic([4, 3, 2], 0.5, [-1.0, -0.75, 0.0]).unwrap();
    assert_eq!(g.index(1, 2, 1), (3 + 2) * 2 + 1);
    assert_eq!(g.coords(g.index(3, 1, 0)), [3, 1, 0]);
    assert_eq!(g.locate([-1.0, -0.75, 0.0]), Some([0, 0, 0]));
    assert_eq!(g.locate([1.0, 0.0, 0.0]), None);
    assert_eq!(g.voxel_center(0, 0, 0), [-0.75, -0.5, 0.25]);
    assert!(OccupancyGrid::new(g, 3, vec![3; 24]).is_err());
    assert!(OccupancyGrid::new(g, 3, vec![0; 23]).is_err());
    assert!(GridGeometry::cubic([0, 1, 1], 1.0, [0.0; 3]).is_err());
}

#[test]
fn majority_vote_downsampling() {
    let g = GridGeometry::cubic([1, 1, 8], 1.0, [0.0; 3]).unwrap();
    let grid = OccupancyGrid::new(g, 4, vec![0, 0, 0, 2, 3, 1, 2, 2]).unwrap();
    let half = grid.downsample_z(2).unwrap();
    assert_eq!(half.labels, vec![0, 2, 1, 2]);
    assert_eq!(half.geometry.voxel_size, [1.0, 1.0, 2.0]);
    let quarter = grid.downsample_z(4).unwrap();
    assert_eq!(quarter.labels, vec![0, 2]);
    assert!(grid.downsample_z(3).is_err());
}

#[test]
fn class_weight_examples() {
    let w = compute_class_weights(&[0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
    assert!(w.weights.iter().all(|&v| (v - 1.0).abs() < 1e-12));

    let labels: Vec<u8> = [vec![0u8; 70], vec![1; 25], vec![2; 5]].concat();
    let w = compute_class_weights(&labels, 4).unwrap();
    assert!(w.weights[2] > w.weights[1] && w.weights[1] > w.weights[0]);
    assert_eq!(w.weights[3], w.weights[2]);
    assert!((w.weights.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    assert!(w.weights.iter().all(|&v| v > 0.0));

    let labels: Vec<u8> = [vec![0u8; 90], vec![1; 10]].concat();
    let w = compute_class_weights(&labels, 2).unwrap();
    let expected = 1.92f64.ln() / 1.12f64.ln();
    assert!((w.weights[1] / w.weights[0] - expected).abs() < 1e-12);
    assert!(compute_class_weights(&[], 2).is_err());
}

#[test]
fn cross_entropy_examples() {
    let unit = ClassWeights { weights: vec![1.0; 5] };
    let logits = Tensor::<f64>::zeros(&[3, 5]);
    let loss = eval(|t| {
        let x = t.constant(logits.clone());
        t.balanced_cross_entropy(x, &[0, 3, 4], &unit)
    });
    assert!((loss - 5f64.ln()).abs() < 1e-9);

    let confident = Tensor::<f64>::from_f64(&[2, 5], &[20.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 20.0, 0.0]).unwrap();
    let loss = eval(|t| {
        let x = t.constant(confident.clone());
        t.balanced_cross_entropy(x, &[0, 3], &unit)
    });
    assert!(loss < 1e-3);

    let w = ClassWeights { weights: vec![1.0, 3.0] };
    let toy = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
    let loss = eval(|t| {
        let x = t.constant(toy.clone());
        t.balanced_cross_entropy(x, &[0, 1], &w)
    });
    let hand = (2f64.ln() + 3.0 * (4.0f64 / 3.0).ln()) / 2.0;
    assert!((loss - hand).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(toy);
    assert!(matches!(tape.balanced_cross_entropy(x, &[0, 2], &w), Err(Error::Data(_))));
}

#[test]
fn lovasz_examples() {
    let probs = Tensor::<f64>::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let loss = eval(|t| {
        let p = t.constant(probs.clone());
        t.lovasz_softmax(p, &[0, 2, 1])
    });
    assert_eq!(loss, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let errors: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut fg: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        fg[0] = true;
        let v = lovasz_extension(&errors, &fg);
        assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{v}");
    }
}

#[test]
fn lovasz_matches_brute_force_extension() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=4usize {
        for pattern in 1u32..(1 << n) {
            let fg: Vec<bool> = (0..n).map(|i| pattern & (1 << i) != 0).collect();
            for _ in 0..10 {
                let errors: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let fast = lovasz_extension(&errors, &fg);
                let slow = brute_force_extension(&errors, &fg);
                assert!((fast - slow).abs() < 1e-9, "n={n} fg={fg:?} e={errors:?}: {fast} vs {slow}");
            }
        }
    }

    // Through the op on a binary problem: both classes see the same errors.
    let q = [0.9, 0.2, 0.65];
    let labels = [1u8, 0, 0];
    let probs: Vec<f64> = q.iter().flat_map(|&p| [1.0 - p, p]).collect();
    let loss = eval(|t| {
        let p = t.constant(Tensor::from_f64(&[3, 2], &probs).unwrap());
        t.lovasz_softmax(p, &labels)
    });
    let errors: Vec<f64> = q.iter().zip(&labels).map(|(&p, &l)| if l == 1 { 1.0 - p } else { p }).collect();
    let fg1: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let fg0: Vec<bool> = fg1.iter().map(|f| !f).collect();
    let oracle = (brute_force_extension(&errors, &fg0) + brute_force_extension(&errors, &fg1)) / 2.0;
    assert!((loss - oracle).abs() < 1e-9);
}

#[test]
fn lovasz_non_increasing_as_true_class_gains() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (n, c) = (rng.random_range(2..7), rng.random_range(2..5));
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..c) as u8).collect();
        let mut probs: Vec<f64> = (0..n * c).map(|_| rng.random::<f64>() + 0.05).collect();
        for row in probs.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let loss = |p: &[f64]| {
            eval(|t| {
                let x = t.constant(Tensor::from_f64(&[n, c], p).unwrap());
                t.lovasz_softmax(x, &labels)
            })
        };
        let before = loss(&probs);
        let i = rng.random_range(0..n);
        let y = labels[i] as usize;
        let row = &mut probs[i * c..(i + 1) * c];
        let target = row[y] + (1.0 - row[y]) * rng.random::<f64>();
        let rest = (1.0 - target) / (1.0 - row[y]);
        for (k, v) in row.iter_mut().enumerate() {
            *v = if k == y { target } else { *v * rest };
        }
        assert!(loss(&probs) <= before + 1e-12);
    }
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = [0u8, 2, 1, 2, 0, 1];
    let w = ClassWeights { weights: vec![0.5, 1.2, 1.3] };
    let logits = Tensor::<f64>::normal(&[6, 3], 1.0, &mut rng);
    let ce = grad_check(|t, v| t.balanced_cross_entropy(v[0], &labels, &w), &[logits.clone()], 1e-5).unwrap();
    assert!(ce.max_rel_error < 1e-4, "{ce:?}");

    let lov = grad_check(
        |t, v| {
            let p = t.softmax(v[0], 1)?;
            t.lovasz_softmax(p, &labels)
        },
        &[logits],
        1e-5,
    )
    .unwrap();
    assert!(lov.max_rel_error < 1e-4, "{lov:?}");

    let g = GridGeometry::cubic([2, 1, 4], 1.0, [0.0; 3]).unwrap();
    let gt = OccupancyGrid::new(g, 3, vec![0, 1, 1, 2, 2, 0, 0, 1]).unwrap();
    let gts = [gt.clone(), gt.downsample_z(2).unwrap()];
    let logits = Tensor::<f64>::normal(&[2, 1, 4, 3], 1.0, &mut rng);
    let total = grad_check(
        |t, v| {
            let half = t.pool_logits_z(v[0], 2)?;
            Ok(total_loss(t, &[v[0], half], &gts)?.total)
        },
        &[logits],
        1e-5,
    )
    .unwrap();
    assert!(total.max_rel_error < 1e-4, "{total:?}");
}

#[test]
fn total_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = GridGeometry::cubic([2, 2, 4], 1.0, [0.0; 3]).unwrap();
    let labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
    let gt = OccupancyGrid::new(g, 3, labels).unwrap();
    let logits = Tensor::<f64>::normal(&[2, 2, 4, 3], 1.0, &mut rng);

    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let parts = total_loss(&mut tape, &[x], std::slice::from_ref(&gt)).unwrap();
    let sum = tape.value(parts.scales[0].cross_entropy).data()[0] + tape.value(parts.scales[0].lovasz).data()[0];
    assert_eq!(tape.value(parts.total).data()[0], sum);

    let half_gt = gt.downsample_z(2).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let half = tape.pool_logits_z(x, 2).unwrap();
    let both = total_loss(&mut tape, &[x, half], &[gt.clone(), half_gt.clone()]).unwrap();
    let total = tape.value(both.total).data()[0];

    let pooled: Vec<f64> = logits.data().chunks(6).flat_map(|pair| (0..3).map(move |k| (pair[k] + pair[3 + k]) / 2.0)).collect();
    let mut independent = 0.0;
    for (data, grid, rows) in [(logits.data().to_vec(), &gt, 16), (pooled, &half_gt, 8)] {
        let w = compute_class_weights(&grid.labels, 3).unwrap();
        independent += eval(|t| {
            let x = t.constant(Tensor::from_f64(&[rows, 3], &data).unwrap());
            t.balanced_cross_entropy(x, &grid.labels, &w)
        });
        independent += eval(|t| {
            let x = t.constant(Tensor::from_f64(&[rows, 3], &data).unwrap());
            let p = t.softmax(x, 1)?;
            t.lovasz_softmax(p, &grid.labels)
        });
    }
    assert!((total - independent).abs() < 1e-12);

    let perfect: Vec<f64> = gt.labels.iter().flat_map(|&l| (0..3).map(move |k| if k == l { 20.0 } else { 0.0 })).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 2, 4, 3], &perfect).unwrap());
    let half = tape.pool_logits_z(x, 2).unwrap();
    let parts = total_loss(&mut tape, &[x], std::slice::from_ref(&gt)).unwrap();
    assert!(tape.value(parts.total).data()[0] < 1e-3);
    assert!(total_loss(&mut tape, &[x, half], std::slice::from_ref(&gt)).is_err());
}

fn height_aware(layout: HeadLayout, blocks: usize, cond: bool, seed: u64) -> (ParamStore<f64>, HeightAwareHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = HeightAwareHead::new(&mut store, "head", layout, blocks, 2, 3, cond, &mut rng).unwrap();
    (store, head)
}

#[test]
fn layout_requires_integral_upsampling() {
    assert!(HeadLayout::for_grid((4, 4), [8, 8, 2], 3, 4).is_ok());
    assert!(matches!(HeadLayout::for_grid((4, 4), [6, 8, 2], 3, 4), Err(Error::Config(_))));
    assert!(matches!(HeadLayout::for_grid((4, 4), [8, 4, 2], 3, 4), Err(Error::Config(_))));
    let l = HeadLayout::for_grid((2, 3), [4, 6, 2], 3, 4).unwrap();
    let rows = l.voxel_rows().unwrap();
    let mut sorted = rows.clone();
    sorted.sort();
    assert_eq!(sorted, (0..l.voxels()).collect::<Vec<_>>());
    let pillars = l.pillar_of_voxel();
    for (v, &r) in rows.iter().enumerate() {
        assert_eq!(r / l.per_pillar(), pillars[v]);
    }
}

#[test]
fn zero_residual_broadcasts_pillars() {
    let layout = HeadLayout::for_grid((2, 3), [4, 6, 3], 4, 5).unwrap();
    let (mut store, head) = height_aware(layout, 1, false, 2);
    let zeros = vec![0.0; store.get(head.lift.weight).tensor.numel()];
    set(&mut store, head.lift.weight, &zeros);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = Tensor::<f64>::normal(&[6, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    tape.bind_params(&store);
    let pv = tape.constant(p.clone());
    let out = head.forward(&mut tape, pv, None).unwrap();
    let feats = tape.value(out.features.unwrap());
    let pillars = layout.pillar_of_voxel();
    for (v, row) in feats.data().chunks(5).enumerate() {
        assert_eq!(row, &p.data()[pillars[v] * 5..pillars[v] * 5 + 5]);
    }
}

#[test]
fn height_aware_decomposition() {
    let layout = HeadLayout::for_grid((2, 2), [4, 4, 2], 3, 4).unwrap();
    let (store, head) = height_aware(layout, 2, false, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = Tensor::<f64>::normal(&[4, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    tape.bind_params(&store);
    let pv = tape.constant(p.clone());
    let out = head.forward(&mut tape, pv, None).unwrap();

    let mut fresh = Tape::new();
    fresh.bind_params(&store);
    let pv2 = fresh.constant(p);
    let r = head.residual(&mut fresh, pv2).unwrap();
    let recomputed = fresh.value(r).data();

    let feats = tape.value(out.features.unwrap()).data();
    let broadcast = tape.value(out.broadcast.unwrap()).data();
    assert_eq!(tape.value(out.residual.unwrap()).data(), recomputed);
    for ((&v, &b), &r) in feats.iter().zip(broadcast).zip(recomputed) {
        assert_eq!(v, b + r);
        // Subtraction is exact up to the rounding of the sum itself.
        assert!((v - b - r).abs() <= f64::EPSILON * v.abs());
    }
}

#[test]
fn height_aware_hand_example() {
    let layout = HeadLayout::for_grid((2, 2), [2, 2, 2], 2, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let head = HeightAwareHead::new(&mut store, "h", layout, 0, 1, 1, false, &mut rng).unwrap();
    set(&mut store, head.expand.weight, &[1.0, -1.0]);
    set(&mut store, head.expand.bias.unwrap(), &[0.0, 0.5]);
    set(&mut store, head.lift.weight, &[2.0]);
    set(&mut store, head.lift.bias.unwrap(), &[0.1]);
    set(&mut store, head.classifier.weight, &[1.0, -1.0]);
    set(&mut store, head.classifier.bias.unwrap(), &[0.0, 1.0]);
    let mut tape = Tape::new();
    tape.bind_params(&store);
    let p = tape.constant(Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = head.forward(&mut tape, p, None).unwrap();
    assert_eq!(tape.shape(out.logits), [2, 2, 2, 2]);
    // Pillar value q: upper slice code relu(0.5 - q) = 0, so features are (3q + 0.1, q + 0.1).
    let mut expected = Vec::new();
    for q in [1.0, 2.0, 3.0, 4.0] {
        for f in [3.0 * q + 0.1, q + 0.1] {
            expected.extend([f, 1.0 - f]);
        }
    }
    let got = tape.value(out.logits).data();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
    }
}

#[test]
fn channel_to_height_identity_arrangement() {
    let (nz, classes) = (3, 2);
    let layout = HeadLayout::for_grid((2, 2), [2, 2, nz], classes, nz * classes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let head = ChannelToHeightHead::new(&mut store, "c2h", layout, 0, 1, None, &mut rng).unwrap();
    let eye = Tensor::<f64>::eye(6);
    store.get_mut(head.proj.weight).tensor = eye;
    let p = Tensor::<f64>::normal(&[4, 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    tape.bind_params(&store);
    let pv = tape.constant(p.clone());
    let out = head.forward(&mut tape, pv).unwrap();
    assert_eq!(tape.shape(out.logits), [2, 2, nz, classes]);
    let logits = tape.value(out.logits).data();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..nz {
                for cl in 0..classes {
                    let voxel = ((i * 2 + j) * nz + k) * classes + cl;
                    assert_eq!(logits[voxel], p.data()[(i * 2 + j) * 6 + k * classes + cl]);
                }
            }
        }
    }
}

#[test]
fn heads_share_output_shape() {
    let layout = HeadLayout::for_grid((2, 3), [4, 6, 2], 3, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let ha = HeightAwareHead::new(&mut store, "a", layout, 1, 2, 4, false, &mut rng).unwrap();
    let budget = height_aware_param_count(&layout, 1, 2, 4);
    assert_eq!(store.numel(), budget);
    let hidden = matched_channel_to_height_hidden(&layout, 1, 2, budget);
    let mut store2 = ParamStore::new();
    let c2h = ChannelToHeightHead::new(&mut store2, "b", layout, 1, 2, Some(hidden), &mut rng).unwrap();
    assert_eq!(store2.numel(), channel_to_height_param_count(&layout, 1, 2, Some(hidden)));
    let per_unit = channel_to_height_param_count(&layout, 1, 2, Some(2)) - channel_to_height_param_count(&layout, 1, 2, Some(1));
    assert!(store2.numel().abs_diff(budget) <= per_unit);

    let p = Tensor::<f64>::normal(&[6, 4], 1.0, &mut rng);
    let mut t1 = Tape::new();
    t1.bind_params(&store);
    let pv = t1.constant(p.clone());
    let a = ha.forward(&mut t1, pv, None).unwrap();
    let mut t2 = Tape::new();
    t2.bind_params(&store2);
    let pv = t2.constant(p);
    let b = c2h.forward(&mut t2, pv).unwrap();
    assert_eq!(t1.shape(a.logits), t2.shape(b.logits));
    assert_eq!(t1.shape(a.logits), layout.logits_shape());
}

#[test]
fn head_gradients() {
    let layout = HeadLayout::for_grid((2, 2), [4, 4, 2], 3, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<u8> = (0..layout.voxels()).map(|_| rng.random_range(0..3)).collect();
    let w = compute_class_weights(&labels, 3).unwrap();
    let p = Tensor::<f64>::normal(&[4, 4], 1.0, &mut rng);
    let inst = Tensor::<f64>::normal(&[3, 4], 1.0, &mut rng);

    let (store, head) = height_aware(layout, 1, true, 13);
    let err = check_with_params(&store, vec![p.clone(), inst], |t, v| {
        let out = head.forward(t, v[0], Some(v[1]))?;
        let flat = t.reshape(out.logits, &[layout.voxels(), 3])?;
        t.balanced_cross_entropy(flat, &labels, &w)
    });
    assert!(err < 1e-4, "height-aware {err}");

    let mut store = ParamStore::new();
    let head = ChannelToHeightHead::new(&mut store, "c", layout, 1, 2, Some(5), &mut rng).unwrap();
    let err = check_with_params(&store, vec![p], |t, v| {
        let out = head.forward(t, v[0])?;
        let flat = t.reshape(out.logits, &[layout.voxels(), 3])?;
        t.balanced_cross_entropy(flat, &labels, &w)
    });
    assert!(err < 1e-4, "channel-to-height {err}");
}

#[test]
fn conditioning_requires_instances() {
    let layout = HeadLayout::for_grid((2, 2), [2, 2, 2], 3, 4).unwrap();
    let (store, head) = height_aware(layout, 0, true, 1);
    let mut tape = Tape::new();
    tape.bind_params(&store);
    let p = tape.constant(Tensor::zeros(&[4, 4]));
    assert!(matches!(head.forward(&mut tape, p, None), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn uniform_logits_give_log_c(c in 2usize..12, n in 1usize..20, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..c) as u8).collect();
        let level = rng.random_range(-50.0..50.0);
        let unit = ClassWeights { weights: vec![1.0; c] };
        let loss = eval(|t| {
            let x = t.constant(Tensor::full(&[n, c], level));
            t.balanced_cross_entropy(x, &labels, &unit)
        });
        prop_assert!((loss - (c as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn argmax_roundtrip(labels in proptest::collection::vec(0u8..4, 12)) {
        let g = GridGeometry::cubic([2, 3, 2], 1.0, [0.0; 3]).unwrap();
        let logits: Vec<f64> = labels.iter().flat_map(|&l| (0..4).map(move |k| if k == l { 1.0 } else { 0.0 })).collect();
        let grid = OccupancyGrid::from_logits(g, &Tensor::<f64>::from_f64(&[12, 4], &logits).unwrap()).unwrap();
        prop_assert_eq!(grid.labels, labels);
    }
}
