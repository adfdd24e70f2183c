//! CTC loss and prefix counts against brute-force path enumeration.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simulstream::ctc::{collapse, ctc_nll, CtcDistribution};
use simulstream::numerics::Tensor;
use simulstream::vocab::BLANK;

/// Probability tables over ids `{0, 1, 2}` where 2 is the blank.
const V: usize = 3;

fn random_probs(rng: &mut impl Rng, t: usize, v: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|x| x / s));
    }
    Tensor::new(vec![t, v], data).unwrap()
}

fn log_of(p: &Tensor) -> Tensor {
    Tensor::new(p.shape().to_vec(), p.data().iter().map(|x| x.ln()).collect()).unwrap()
}

/// Every length-`t` path over `v` symbols.
fn all_paths(t: usize, v: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![Vec::new()];
    for _ in 0..t {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..v).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    paths
}

/// Every target of length `0..=max_len` over the non-blank ids `{0, 1}`.
fn all_targets(max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                [0usize, 1].into_iter().map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn brute_force_nll(p: &Tensor, target: &[usize]) -> f64 {
    let (t, v) = (p.rows(), p.cols());
    let total: f64 = all_paths(t, v)
        .iter()
        .filter(|z| collapse(z, BLANK) == target)
        .map(|z| z.iter().enumerate().map(|(i, &s)| p.row(i)[s]).product::<f64>())
        .sum();
    if total == 0.0 {
        f64::INFINITY
    } else {
        -total.ln()
    }
}

#[test]
fn forward_algorithm_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let targets = all_targets(3);
    for table in 0..500 {
        let t = 1 + table % 6;
        let p = random_probs(&mut rng, t, V);
        let lp = log_of(&p);
        let mut mass = 0.0;
        for y in &targets {
            let fast = ctc_nll(&lp, y, BLANK);
            let slow = brute_force_nll(&p, y);
            if slow.is_infinite() {
                assert!(fast.is_infinite(), "T={t} y={y:?}: expected infeasible, got {fast}");
            } else {
                assert!((fast - slow).abs() <= 1e-9, "T={t} y={y:?}: {fast} vs {slow}");
                mass += (-slow).exp();
            }
        }
        if t <= 3 {
            // Every path collapses to some target of length at most 3.
            assert!((mass - 1.0).abs() < 1e-9, "T={t}: target mass {mass}");
        }
    }
}

#[test]
fn uniform_two_frame_example() {
    let p = Tensor::new(vec![2, 3], vec![0.0, 0.5, 0.5, 0.0, 0.5, 0.5]).unwrap();
    let lp = log_of(&p);
    assert!((ctc_nll(&lp, &[1], BLANK) - (-(0.75f64).ln())).abs() < 1e-12);
}

fn one_hot(path: &[usize], v: usize) -> Tensor {
    let mut data = vec![0.0; path.len() * v];
    for (i, &s) in path.iter().enumerate() {
        data[i * v + s] = 1.0;
    }
    Tensor::new(vec![path.len(), v], data).unwrap()
}

#[test]
fn expected_counts_on_one_hot_equal_collapse_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let t = rng.random_range(1..=12);
        let v = rng.random_range(3..=6);
        let path: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
        let dist = CtcDistribution::new(one_hot(&path, v), BLANK).unwrap();
        let counts = dist.expected_prefix_counts();
        for j in 1..=t {
            assert_eq!(counts.at(j), collapse(&path[..j], BLANK).len() as f64, "path {path:?} j {j}");
        }
        assert_eq!(counts, dist.discrete_prefix_counts());
    }
}

#[test]
fn expected_counts_are_bounded_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let t = rng.random_range(1..=20);
        let v = rng.random_range(3..=8);
        let dist = CtcDistribution::new(random_probs(&mut rng, t, v), BLANK).unwrap();
        let n = dist.expected_prefix_counts();
        for j in 1..=t {
            assert!(n.at(j) >= 0.0 && n.at(j) <= j as f64);
            assert!(n.at(j) >= n.at(j - 1));
        }
    }
}

#[test]
fn spelled_example_counts() {
    // Rows spelling [a, blank, a, a, b] contribute 1, 0, 1, 0, 1.
    let dist = CtcDistribution::new(one_hot(&[3, BLANK, 3, 3, 4], 5), BLANK).unwrap();
    assert_eq!(dist.expected_prefix_counts().0, vec![1.0, 1.0, 2.0, 2.0, 3.0]);
    let blanks = CtcDistribution::new(one_hot(&[BLANK; 4], 5), BLANK).unwrap();
    assert!(blanks.expected_prefix_counts().0.iter().all(|&n| n == 0.0));
}

proptest! {
    #[test]
    fn greedy_is_collapsed_argmax(seed in any::<u64>(), t in 1usize..15, v in 3usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = CtcDistribution::new(random_probs(&mut rng, t, v), BLANK).unwrap();
        prop_assert_eq!(dist.greedy_decode(), collapse(&dist.argmax_path(), BLANK));
        let discrete = dist.discrete_prefix_counts();
        prop_assert_eq!(discrete.last() as usize, dist.greedy_decode().len());
    }

    #[test]
    fn collapse_is_idempotent_and_blank_free(z in proptest::collection::vec(0usize..5, 0..20)) {
        let once = collapse(&z, BLANK);
        prop_assert!(!once.contains(&BLANK));
        prop_assert!(once.len() <= z.len());
        // Adjacent repeats survive a second collapse only if already separated.
        let mut spaced = Vec::new();
        for &s in &once {
            spaced.push(s);
            spaced.push(BLANK);
        }
        prop_assert_eq!(collapse(&spaced, BLANK), once);
    }
}
