use keyvol::autodiff::gradcheck::{check_at, random_tensor, weighted_sum};
use keyvol::autodiff::Tape;
use keyvol::structure::*;
use keyvol::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weights_of(logits: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let w = adjacency_weights(&mut tape, l).unwrap();
    tape.value(w).clone()
}

#[test]
fn adjacency_examples() {
    let w = weights_of(&Tensor::zeros([4, 4]));
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(w.data()[i * 4 + j], if i == j { 0.0 } else { 0.5 });
        }
    }
    let mut l = Tensor::zeros([3, 3]);
    l.data_mut()[1] = 20.0;
    l.data_mut()[3] = 20.0;
    let w = weights_of(&l);
    assert!((w.data()[1] - w.data()[3]).abs() < 1e-9);
    assert!(w.data()[1] > 0.9999);
}

#[test]
fn adjacency_is_symmetrized() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let l = random_tensor(&mut r, &[5, 5]);
    let mut lt = Tensor::zeros([5, 5]);
    for i in 0..5 {
        for j in 0..5 {
            lt.data_mut()[j * 5 + i] = l.data()[i * 5 + j];
        }
    }
    assert_eq!(weights_of(&l), weights_of(&lt));
    assert_eq!(adjacency_values(&l), weights_of(&l));
    let mut tape = Tape::new();
    let bad = tape.leaf(Tensor::zeros([2, 3]));
    assert!(adjacency_weights(&mut tape, bad).is_err());
}

#[test]
fn adjacency_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random_tensor(&mut r, &[4, 4])];
    let proj = random_tensor(&mut r, &[4, 4]);
    let coords: Vec<_> = (0..16).map(|j| (0, j)).collect();
    let report = check_at(
        &inputs,
        |tape, v| {
            let w = adjacency_weights(tape, v[0]).unwrap();
            weighted_sum(tape, w, &proj)
        },
        1e-5,
        &coords,
    );
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

/// Point-to-segment distance, written independently of the renderer.
fn seg_dist(u: [f64; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((u[0] - p[0]) * dx + (u[1] - p[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    ((u[0] - p[0] - t * dx).powi(2) + (u[1] - p[1] - t * dy).powi(2)).sqrt()
}

#[test]
fn gaussian_line_examples() {
    let sigma = 1.5;
    let line = render_gaussian_line([2.0, 3.0], [12.0, 3.0], (8, 16), sigma).unwrap();
    assert_eq!(line.data()[3 * 16 + 7], 1.0);
    // Perpendicular offset of exactly sigma from the interior: pixel row 3
    // is on the line, so shift the line instead.
    let shifted = render_gaussian_line([2.0, 3.0 - sigma], [12.0, 3.0 - sigma], (8, 16), sigma).unwrap();
    assert!((shifted.data()[3 * 16 + 7] - (-0.5f64).exp()).abs() < 1e-12);
    let blob = render_gaussian_line([4.0, 5.0], [4.0, 5.0], (10, 10), 2.0).unwrap();
    for r in 0..10 {
        for c in 0..10 {
            let d2 = (c as f64 - 4.0).powi(2) + (r as f64 - 5.0).powi(2);
            assert!((blob.data()[r * 10 + c] - (-d2 / 8.0).exp()).abs() < 1e-12);
        }
    }
    assert!(render_gaussian_line([0.0, 0.0], [1.0, 1.0], (4, 4), 0.0).is_err());
}

fn edge_map(kps: &Tensor, weights: &Tensor, valid: &[bool], size: (usize, usize), sigma: f64) -> Tensor {
    let mut tape = Tape::new();
    let k = tape.leaf(kps.clone());
    let w = tape.leaf(weights.clone());
    let e = render_edge_map(&mut tape, k, w, valid, size, sigma);
    tape.value(e).clone()
}

/// Per pixel, the two largest `a_ij · line_ij` values over valid pairs.
fn brute_force(kps: &Tensor, weights: &Tensor, valid: &[bool], size: (usize, usize), sigma: f64) -> Vec<(f64, f64)> {
    let n = kps.dim(0);
    let p = |i: usize| [kps.data()[2 * i], kps.data()[2 * i + 1]];
    let mut out = vec![(0.0f64, 0.0f64); size.0 * size.1];
    for (idx, best) in out.iter_mut().enumerate() {
        let u = [(idx % size.1) as f64, (idx / size.1) as f64];
        for i in 0..n {
            for j in i + 1..n {
                if !(valid[i] && valid[j]) {
                    continue;
                }
                let d = seg_dist(u, p(i), p(j));
                let v = weights.data()[i * n + j] * (-d * d / (2.0 * sigma * sigma)).exp();
                if v > best.0 {
                    *best = (v, best.0);
                } else if v > best.1 {
                    best.1 = v;
                }
            }
        }
    }
    out
}

fn random_scene(r: &mut ChaCha8Rng, n: usize, size: (usize, usize)) -> (Tensor, Tensor) {
    let kps = Tensor::new(
        [n, 2],
        (0..n).flat_map(|_| [r.random_range(0.0..size.1 as f64), r.random_range(0.0..size.0 as f64)]).collect(),
    );
    (kps, adjacency_values(&random_tensor(r, &[n, n]).map(|v| 2.0 * v)))
}

#[test]
fn single_pair_is_the_line() {
    let kps = Tensor::new([2, 2], vec![3.2, 4.1, 11.7, 9.0]);
    let w = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]);
    let e = edge_map(&kps, &w, &[true, true], (16, 16), 1.5);
    let line = render_gaussian_line([3.2, 4.1], [11.7, 9.0], (16, 16), 1.5).unwrap();
    assert_eq!(e, line);
}

#[test]
fn zero_weights_and_too_few_valid_keypoints_give_empty_maps() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (kps, _) = random_scene(&mut r, 4, (16, 16));
    assert!(edge_map(&kps, &Tensor::zeros([4, 4]), &[true; 4], (16, 16), 1.5).data().iter().all(|&v| v == 0.0));
    let w = Tensor::ones([4, 4]);
    let one_valid = [false, true, false, false];
    assert!(edge_map(&kps, &w, &one_valid, (16, 16), 1.5).data().iter().all(|&v| v == 0.0));
}

#[test]
fn edge_map_matches_brute_force_max() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..10 {
        let n = 3 + trial % 4;
        let (kps, w) = random_scene(&mut r, n, (16, 16));
        let valid: Vec<bool> = (0..n).map(|i| i != 1 || trial % 2 == 0).collect();
        let e = edge_map(&kps, &w, &valid, (16, 16), 1.5);
        let oracle = brute_force(&kps, &w, &valid, (16, 16), 1.5);
        let max_w = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| valid[i] && valid[j])
            .map(|(i, j)| w.data()[i * n + j])
            .fold(0.0, f64::max);
        for (got, (want, _)) in e.data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12);
            assert!(*got <= max_w + 1e-15);
            assert!((0.0..=1.0).contains(got));
        }
    }
}

#[test]
fn raising_a_weight_never_lowers_a_pixel() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (kps, w) = random_scene(&mut r, 5, (16, 16));
    let base = edge_map(&kps, &w, &[true; 5], (16, 16), 1.5);
    for (i, j) in [(0, 1), (2, 4), (1, 3)] {
        let mut raised = w.clone();
        raised.data_mut()[i * 5 + j] = (w.data()[i * 5 + j] + 0.3).min(1.0);
        raised.data_mut()[j * 5 + i] = raised.data()[i * 5 + j];
        let e = edge_map(&kps, &raised, &[true; 5], (16, 16), 1.5);
        assert!(e.data().iter().zip(base.data()).all(|(a, b)| a >= b));
    }
}

#[test]
fn relabeling_keypoints_leaves_the_map_unchanged() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let n = 5;
    let (kps, w) = random_scene(&mut r, n, (16, 16));
    let perm = [3, 0, 4, 1, 2];
    let kp2 = Tensor::new([n, 2], perm.iter().flat_map(|&i| [kps.data()[2 * i], kps.data()[2 * i + 1]]).collect());
    let mut w2 = Tensor::zeros([n, n]);
    for a in 0..n {
        for b in 0..n {
            w2.data_mut()[a * n + b] = w.data()[perm[a] * n + perm[b]];
        }
    }
    let e1 = edge_map(&kps, &w, &[true; 5], (16, 16), 1.5);
    let e2 = edge_map(&kp2, &w2, &[true; 5], (16, 16), 1.5);
    assert!(e1.data().iter().zip(e2.data()).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn invalid_keypoints_are_dropped() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let (kps, w) = random_scene(&mut r, 4, (16, 16));
    let with_invalid = edge_map(&kps, &w, &[true, false, true, true], (16, 16), 1.5);
    let keep = [0, 2, 3];
    let kp3 = Tensor::new([3, 2], keep.iter().flat_map(|&i| [kps.data()[2 * i], kps.data()[2 * i + 1]]).collect());
    let mut w3 = Tensor::zeros([3, 3]);
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            w3.data_mut()[a * 3 + b] = w.data()[i * 4 + j];
        }
    }
    assert_eq!(with_invalid, edge_map(&kp3, &w3, &[true; 3], (16, 16), 1.5));
}

#[test]
fn margin_screened_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let n = 4;
    let size = (16, 16);
    let (kps, w) = random_scene(&mut r, n, size);
    let oracle = brute_force(&kps, &w, &[true; 4], size, 1.5);
    // Only pixels whose winning pair leads the runner-up by more than the
    // margin contribute, so small perturbations cannot switch the max.
    let proj = Tensor::new(
        [size.0, size.1],
        oracle
            .iter()
            .map(|&(a, b)| if a - b > 1e-3 { r.random_range(-1.0..1.0) } else { 0.0 })
            .collect(),
    );
    let inputs = vec![kps, w];
    let mut coords: Vec<(usize, usize)> = (0..2 * n).map(|j| (0, j)).collect();
    coords.extend((0..n).flat_map(|i| (i + 1..n).map(move |j| (1, i * n + j))));
    let report = check_at(
        &inputs,
        |tape, v| {
            let e = render_edge_map(tape, v[0], v[1], &[true; 4], size, 1.5);
            weighted_sum(tape, e, &proj)
        },
        1e-5,
        &coords,
    );
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
