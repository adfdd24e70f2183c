//! Finite-difference checks for every differentiable op on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simulstream::numerics::{Graph, ParamStore, Tensor, Var};
use simulstream::vocab::BLANK;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const TRIALS: usize = 100;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero, for kinked ops.
fn random_off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

/// Builds `sum(f(inputs) ⊙ w)` for a fixed random `w`, then compares the tape
/// gradient with central differences. Returns the relative error
/// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, 1e-8)`.
fn rel_error<F>(rng: &mut impl Rng, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor], w: Option<&Tensor>| -> (f64, Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let loss = match w {
            Some(w) if !g.value(out).is_scalar() => {
                let wv = g.constant(w.clone());
                let p = g.mul(out, wv).unwrap();
                g.sum(p)
            }
            _ => out,
        };
        (g.value(loss).item(), g, vars, loss)
    };
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let w = random(rng, &out_shape);
    let (_, g, vars, loss) = eval(inputs, Some(&w));
    let grads = g.backward(loss).unwrap();

    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let tape = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let fd = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * H);
            let a = tape.data()[i];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nn += fd * fd;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8)
}

fn run<G, F>(name: &str, seed: u64, mut gen: G, f: F)
where
    G: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var]) -> Var + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let inputs = gen(&mut rng);
        assert!(inputs.iter().map(Tensor::len).sum::<usize>() <= 64);
        worst = worst.max(rel_error(&mut rng, &inputs, f));
    }
    assert!(worst <= TOL, "{name}: worst relative error {worst:e}");
}

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=5))
}

#[test]
fn matmul_and_transposed() {
    run("matmul", 1, |r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..=4);
        vec![random(r, &[m, k]), random(r, &[k, n])]
    }, |g, v| g.matmul(v[0], v[1]).unwrap());
    run("matmul_t", 2, |r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..=4);
        vec![random(r, &[m, k]), random(r, &[n, k])]
    }, |g, v| g.matmul_t(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_binary() {
    let pair = |r: &mut ChaCha8Rng| {
        let (m, n) = dims(r);
        vec![random(r, &[m, n]), random(r, &[m, n])]
    };
    run("add", 3, pair, |g, v| g.add(v[0], v[1]).unwrap());
    run("sub", 4, pair, |g, v| g.sub(v[0], v[1]).unwrap());
    run("mul", 5, pair, |g, v| g.mul(v[0], v[1]).unwrap());
    let row = |r: &mut ChaCha8Rng| {
        let (m, n) = dims(r);
        vec![random(r, &[m, n]), random(r, &[n])]
    };
    run("add_row", 6, row, |g, v| g.add_row(v[0], v[1]).unwrap());
    run("mul_row", 7, row, |g, v| g.mul_row(v[0], v[1]).unwrap());
    run("scale", 8, |r| {
        let (m, n) = dims(r);
        vec![random(r, &[m, n])]
    }, |g, v| g.scale(v[0], -1.7));
}

#[test]
fn unary_nonlinearities() {
    let one = |r: &mut ChaCha8Rng| {
        let (m, n) = dims(r);
        vec![random_off_zero(r, &[m, n])]
    };
    run("relu", 9, one, |g, v| g.relu(v[0]));
    run("sigmoid", 10, one, |g, v| g.sigmoid(v[0]));
    run("silu", 11, one, |g, v| g.silu(v[0]));
    run("softmax", 12, one, |g, v| g.softmax(v[0]));
    run("log_softmax", 13, one, |g, v| g.log_softmax(v[0]));
    run("sum", 14, one, |g, v| g.sum(v[0]));
    run("mean", 15, one, |g, v| g.mean(v[0]));
}

#[test]
fn layer_norm() {
    run("layer_norm", 16, |r| {
        let m = r.random_range(1..=4);
        let n = r.random_range(2..=6);
        vec![random(r, &[m, n]), random(r, &[n]), random(r, &[n])]
    }, |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn depthwise_conv_with_chunk_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let t = rng.random_range(1..=6);
        let d = rng.random_range(1..=3);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let c = rng.random_range(1..=4);
        let start = rng.random_range(0..t);
        let limits: Vec<usize> = (start..t).map(|i| (i / c + 1) * c - 1).collect();
        let inputs = vec![random(&mut rng, &[t, d]), random(&mut rng, &[k, d]), random(&mut rng, &[d])];
        let limits2 = limits.clone();
        let err = rel_error(&mut rng, &inputs, move |g, v| {
            g.depthwise_conv(v[0], v[1], v[2], start, limits2.clone()).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "depthwise_conv: {worst:e}");
}

#[test]
fn indexing_ops() {
    run("slice_cols", 18, |r| vec![random(r, &[3, 5])], |g, v| g.slice_cols(v[0], 1, 3).unwrap());
    run("slice_rows", 19, |r| vec![random(r, &[4, 3])], |g, v| g.slice_rows(v[0], 1, 2).unwrap());
    run("concat_cols", 20, |r| vec![random(r, &[3, 2]), random(r, &[3, 4])], |g, v| {
        g.concat_cols(&[v[0], v[1], v[0]]).unwrap()
    });
    run("concat_rows", 21, |r| vec![random(r, &[2, 3]), random(r, &[4, 3])], |g, v| {
        g.concat_rows(&[v[1], v[0]]).unwrap()
    });
    run("gather_rows", 22, |r| vec![random(r, &[4, 3])], |g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 3]).unwrap());
    run("embedding", 23, |r| vec![random(r, &[5, 3])], |g, v| g.embedding(v[0], &[4, 1, 4]).unwrap());
    run("reshape", 24, |r| vec![random(r, &[2, 6])], |g, v| g.reshape(v[0], vec![3, 4]).unwrap());
    run("masked_fill", 25, |r| vec![random(r, &[3, 4])], |g, v| {
        let mask = Tensor::from_rows(&[vec![0., 1., 0., 0.], vec![1., 1., 0., 1.], vec![0., 0., 0., 0.]]);
        g.masked_fill(v[0], &mask, -3.0).unwrap()
    });
}

#[test]
fn losses() {
    run("cross_entropy", 26, |r| {
        let (m, n) = dims(r);
        vec![random(r, &[m, n.max(2)])]
    }, |g, v| {
        let rows = g.value(v[0]).rows();
        let cols = g.value(v[0]).cols();
        let targets: Vec<usize> = (0..rows).map(|i| (i * 7 + 1) % cols).collect();
        g.cross_entropy(v[0], &targets).unwrap()
    });
    run("ctc_loss", 27, |r| {
        let t = r.random_range(3..=5);
        vec![random(r, &[t, 5])]
    }, |g, v| {
        let lp = g.log_softmax(v[0]);
        g.ctc_loss(lp, &[3, 4, 4], BLANK).unwrap()
    });
}

#[test]
fn composite_attention_block() {
    run("attention", 28, |r| {
        vec![random(r, &[3, 4]), random(r, &[4, 4]), random(r, &[4, 4]), random(r, &[4]), random(r, &[4])]
    }, |g, v| {
        let x = g.layer_norm(v[0], v[3], v[4]).unwrap();
        let q = g.matmul(x, v[1]).unwrap();
        let k = g.matmul(x, v[2]).unwrap();
        let s = g.matmul_t(q, k).unwrap();
        let mask = Tensor::from_rows(&[vec![0., 1., 1.], vec![0., 0., 1.], vec![0., 0., 0.]]);
        let s = g.masked_fill(s, &mask, f64::NEG_INFINITY).unwrap();
        let p = g.softmax(s);
        let o = g.matmul(p, x).unwrap();
        g.silu(o)
    });
}

#[test]
fn backward_examples() {
    // loss = sum(x ∘ x) at x = [1, 2] → grad [2, 4]
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);

    // non-scalar loss rejected
    assert!(g.backward(sq).is_err());

    // constant loss → zero parameter gradients
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![2], vec![0.3, -0.1]).unwrap()).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let zero = g.scale(w, 0.0);
    let loss = g.sum(zero);
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap().data(), &[0.0, 0.0]);

    // accumulation across two backward calls
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let loss = g.sum(w);
    g.backward_into(loss, &mut store).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn forward_examples_and_errors() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = Tensor::from_rows(&[vec![3.0, -1.0], vec![0.5, 2.0]]);
    let mv = g.constant(m.clone());
    let p = g.matmul(eye, mv).unwrap();
    assert_eq!(g.value(p), &m);

    let z = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]));
    let s = g.softmax(z);
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let c = g.constant(Tensor::from_rows(&[vec![2.5; 4]]));
    let gamma = g.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
    let beta = g.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
    let ln = g.layer_norm(c, gamma, beta).unwrap();
    assert!(g.value(ln).data().iter().all(|&v| v == 0.0));

    let bad = g.constant(Tensor::zeros(&[3, 3]));
    let err = g.matmul(mv, bad).unwrap_err().to_string();
    assert!(err.contains("[2, 2]") && err.contains("[3, 3]"), "{err}");
    assert!(g.masked_fill(mv, &Tensor::full(&[2, 2], 0.5), 0.0).is_err());
}

#[test]
fn softmax_rows_are_distributions_and_masks_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(2..8));
        let x = random(&mut rng, &[m, n]).data().iter().map(|v| v * 10.0).collect();
        let mut mask = Tensor::zeros(&[m, n]);
        for r in 0..m {
            for c in 1..n {
                if rng.random_bool(0.4) {
                    mask.row_mut(r)[c] = 1.0;
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![m, n], x).unwrap());
        let filled = g.masked_fill(xv, &mask, f64::NEG_INFINITY).unwrap();
        let unmasked = g.softmax(xv);
        let s = g.softmax(filled);
        for r in 0..m {
            let row = g.value(unmasked).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            for c in 0..n {
                if mask.get2(r, c) == 1.0 {
                    assert_eq!(g.value(s).get2(r, c), 0.0);
                }
            }
        }
    }
}
