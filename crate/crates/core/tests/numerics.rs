use b3d_core::numerics::{matmul_into, softmax_row, Adam, AdamConfig, Parameter, Tape, Tensor};
use proptest::prelude::*;

fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_agrees_with_the_triple_loop(
        m in 1usize..9, k in 0usize..9, n in 1usize..9,
        seed in proptest::collection::vec(-3.0f64..3.0, 162),
    ) {
        let a = &seed[..m * k];
        let b = &seed[81..81 + k * n];
        let mut out = vec![f64::NAN; m * n];
        matmul_into(a, b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(naive(a, b, m, k, n)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_returns_lse(row in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut p = vec![0.0; row.len()];
        let lse = softmax_row(&row, &mut p);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let direct = row.iter().map(|x| (x - lse).exp()).sum::<f64>();
        prop_assert!((direct - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_and_entropy_match_closed_forms() {
    let rows = [[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [-4.0, 10.0, 0.5]];
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3, 3], data).unwrap());
    let ce = tape.cross_entropy_rows(x, &[2, 1, 0]).unwrap();
    let h = tape.entropy_rows(x).unwrap();
    for (r, row) in rows.iter().enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = row.iter().map(|v| v.exp() / z).collect();
        let target = [2, 1, 0][r];
        let want_ce = -p[target].ln();
        let want_h = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        assert!((tape.value(ce).data()[r] - want_ce).abs() < 1e-12);
        assert!((tape.value(h).data()[r] - want_h).abs() < 1e-12);
    }
    assert!((tape.value(h).data()[1] - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn adam_matches_a_scalar_reference() {
    let cfg = AdamConfig {
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
        clip_norm: 1e9,
    };
    let mut params = vec![Parameter::new("x", Tensor::scalar(1.5f64))];
    let mut adam = Adam::new(cfg, &params);
    let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        // gradient of x² + sin(3x)
        let g = 2.0 * x + 3.0 * (3.0 * x).cos();
        params[0].grad = Tensor::scalar(g);
        adam.step(&mut params, 0.01).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.99 * v + 0.01 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.99f64.powi(t));
        x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((params[0].value.data()[0] - x).abs() < 1e-12, "step {t}");
    }
    assert_eq!(adam.step, 100);
}

#[test]
fn clipping_scales_the_gradient_to_the_norm() {
    let cfg = AdamConfig {
        clip_norm: 0.5,
        ..AdamConfig::default()
    };
    let mut a = Parameter::new("a", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let mut b = Parameter::new("b", Tensor::scalar(0.0));
    a.grad = Tensor::new(&[2], vec![3.0, 0.0]).unwrap();
    b.grad = Tensor::scalar(4.0);
    let mut params = vec![a, b];
    let mut adam = Adam::new(cfg, &params);
    let stats = adam.step(&mut params, 1e-3).unwrap();
    assert_eq!(stats.grad_norm, 5.0);
    assert!((stats.clip_scale - 0.1).abs() < 1e-15);
    // the stored first moment is (1-β1) times the clipped gradient
    let m0 = adam.m[0].data()[0];
    assert!((m0 - (1.0 - cfg.beta1) * 0.3).abs() < 1e-15);
}

#[test]
fn backward_through_a_small_graph() {
    // f(a, b) = Σ (a·b)², checked against the closed form 2(a·b)·bᵀ
    let a = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(&[3, 2], vec![0.2, 1.0, -1.0, 0.5, 2.0, -0.3]).unwrap();
    let mut tape = Tape::new();
    let va = tape.input(a.clone());
    let vb = tape.input(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    let sq = tape.square(c).unwrap();
    let root = tape.sum(sq).unwrap();
    let cv = tape.value(c).clone();
    let grads = tape.backward(root).unwrap();
    let ga = grads.wrt(va).unwrap();
    for i in 0..2 {
        for p in 0..3 {
            let want: f64 = (0..2).map(|j| 2.0 * cv.data()[i * 2 + j] * b.data()[p * 2 + j]).sum();
            assert!((ga.data()[i * 3 + p] - want).abs() < 1e-12);
        }
    }
}
