// The oracles below index on purpose to mirror the scalar formulas.
#![allow(clippy::needless_range_loop)]

use atc_core::conditionnet::{condition_backward, condition_forward, init_condition_net, ConditionNetParams, NetShape};
use atc_core::numerics::{numeric_gradient, Rng};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line LSTM over the chunked input, written coordinate by
/// coordinate from the gate formulas.
fn oracle(p: &ConditionNetParams, f: &[f64]) -> Vec<f64> {
    let (h_sz, chunk) = (p.shape.hidden, p.shape.chunk_size());
    let mut h = vec![0.0; h_sz];
    let mut c = vec![0.0; h_sz];
    for t in 0..p.shape.chunks {
        let x = &f[t * chunk..(t + 1) * chunk];
        let pre = |g: &atc_core::conditionnet::Gate, j: usize, h: &[f64]| {
            let mut z = g.b[j];
            for k in 0..chunk {
                z += g.w.get(j, k) * x[k];
            }
            for k in 0..h_sz {
                z += g.u.get(j, k) * h[k];
            }
            z
        };
        let mut h_next = vec![0.0; h_sz];
        for j in 0..h_sz {
            let i = sigmoid(pre(&p.input, j, &h));
            let fg = sigmoid(pre(&p.forget, j, &h));
            let o = sigmoid(pre(&p.output, j, &h));
            let g = pre(&p.cell, j, &h).tanh();
            c[j] = fg * c[j] + i * g;
            h_next[j] = o * c[j].tanh();
        }
        h = h_next;
    }
    (0..p.shape.dim)
        .map(|r| p.out_b[r] + (0..h_sz).map(|k| p.out_w.get(r, k) * h[k]).sum::<f64>())
        .collect()
}

fn random_net(seed: u64, shape: NetShape) -> (ConditionNetParams, Rng) {
    let mut rng = Rng::new(seed);
    let mut p = init_condition_net(shape, 1.0, &mut rng);
    for v in p.out_w.as_mut_slice().iter_mut().chain(p.out_b.iter_mut()) {
        *v = rng.uniform(-0.5, 0.5);
    }
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.uniform(-0.1, 0.1);
        }
    }
    (p, rng)
}

#[test]
fn parameter_count_for_default_shape() {
    let shape = NetShape::new(64, 8, 64).unwrap();
    assert_eq!(shape.parameter_count(), 4 * 64 * (8 + 64 + 1) + 64 * (64 + 1));
    assert_eq!(shape.parameter_count(), 22848);
    assert_eq!(ConditionNetParams::zeros(shape).parameter_count(), 22848);
}

#[test]
fn indivisible_dimension_is_a_config_error() {
    assert!(matches!(NetShape::new(10, 3, 4), Err(atc_core::Error::Config(_))));
}

#[test]
fn forward_matches_scalar_oracle() {
    for seed in 0..5 {
        let shape = NetShape::new(12, 3, 5).unwrap();
        let (p, mut rng) = random_net(seed, shape);
        let f: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (s, _) = condition_forward(&p, &f).unwrap();
        for (a, b) in s.iter().zip(oracle(&p, &f)) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_output_head_gives_zero_bias() {
    let shape = NetShape::new(16, 4, 8).unwrap();
    let p = init_condition_net(shape, 1.0, &mut Rng::new(1));
    let f: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
    let (s, _) = condition_forward(&p, &f).unwrap();
    assert!(s.iter().all(|&v| v == 0.0));
}

fn check_gradients(p: &ConditionNetParams, f: &[f64], d_s: &[f64]) {
    let loss = |p: &ConditionNetParams, f: &[f64]| -> f64 {
        let (s, _) = condition_forward(p, f).unwrap();
        s.iter().zip(d_s).map(|(a, b)| a * b).sum()
    };
    let (_, tape) = condition_forward(p, f).unwrap();
    let (grads, d_input) = condition_backward(p, tape, d_s).unwrap();

    let numeric_input = numeric_gradient(|x| loss(p, x), f, 1e-5).unwrap();
    for (a, n) in d_input.iter().zip(&numeric_input) {
        assert!((a - n).abs() <= 1e-8, "input: {a} vs {n}");
    }

    let analytic = grads.tensors();
    for (ti, (name, _, values)) in p.tensors().into_iter().enumerate() {
        let numeric = numeric_gradient(
            |theta| {
                let mut q = p.clone();
                q.tensors_mut()[ti].1.copy_from_slice(theta);
                loss(&q, f)
            },
            values,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic[ti].2.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-8 * (1.0 + n.abs()), "{name}: {a} vs {n}");
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..5 {
        let shape = NetShape::new(8, 2, 4).unwrap();
        let (p, mut rng) = random_net(seed, shape);
        let f: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let d_s: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        check_gradients(&p, &f, &d_s);
    }
}

#[test]
fn zero_output_head_blocks_recurrent_gradients() {
    let shape = NetShape::new(8, 4, 3).unwrap();
    let mut rng = Rng::new(9);
    let p = init_condition_net(shape, 1.0, &mut rng);
    let f: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let d_s: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    check_gradients(&p, &f, &d_s);

    let (_, tape) = condition_forward(&p, &f).unwrap();
    let (grads, d_input) = condition_backward(&p, tape, &d_s).unwrap();
    assert!(d_input.iter().all(|&v| v == 0.0));
    for (name, _, g) in grads.tensors() {
        let expect_zero = !matches!(name, "net.out.w" | "net.out.b");
        assert_eq!(g.iter().all(|&v| v == 0.0), expect_zero, "{name}");
    }
}

#[test]
fn mismatched_tape_is_a_contract_error() {
    let small = init_condition_net(NetShape::new(8, 2, 4).unwrap(), 1.0, &mut Rng::new(0));
    let large = init_condition_net(NetShape::new(8, 2, 5).unwrap(), 1.0, &mut Rng::new(0));
    let (_, tape) = condition_forward(&small, &[0.1; 8]).unwrap();
    assert!(matches!(
        condition_backward(&large, tape, &[1.0; 8]),
        Err(atc_core::Error::Contract(_))
    ));
}
