//! Analytic gradients against central finite differences, and the forward
//! pass against scalar recomputation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robex::model::{
    cross_entropy, forward, grad_params, init_model, loss, loss_and_grad_input, Architecture,
    ModelConfig, ModelParams,
};

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_model(rng: &mut ChaCha8Rng, i: usize) -> ModelParams {
    let seed = rng.random();
    let cfg = match i % 3 {
        0 => ModelConfig {
            conv1_channels: 2,
            conv2_channels: 3,
            hidden_units: 5,
            ..ModelConfig::small_cnn(8, 8, 3, seed)
        },
        1 => ModelConfig::mlp(3, 4, 6, 3, seed),
        _ => ModelConfig::linear(4, 3, 2, seed),
    };
    let params = init_model(&cfg).unwrap();
    // non-zero biases so every parameter has a generic gradient
    let mut p = params.clone();
    for t in params.tensors() {
        let data = t
            .data
            .iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        p = p.with_tensor(&t.name, data).unwrap();
    }
    p
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Array2<f64> {
    Array2::from_shape_fn((cfg.input_height, cfg.input_width), |_| {
        rng.random_range(0.05..0.95)
    })
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10 {
        let params = random_model(&mut rng, i);
        let cfg = params.config().clone();
        let x = random_image(&mut rng, &cfg);
        let y = rng.random_range(0..cfg.num_classes);
        let (_, _, g) = loss_and_grad_input(&params, &x, y).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (r, c) = (
                rng.random_range(0..cfg.input_height),
                rng.random_range(0..cfg.input_width),
            );
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[r, c]] += H;
            xm[[r, c]] -= H;
            let lp = loss(&params, &[xp], &[y]).unwrap();
            let lm = loss(&params, &[xm], &[y]).unwrap();
            worst = worst.max(rel_err(g[[r, c]], (lp - lm) / (2.0 * H)));
        }
        assert!(
            worst <= 1e-4,
            "model {i} ({:?}): relative error {worst}",
            cfg.architecture
        );
    }
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..10 {
        let params = random_model(&mut rng, i);
        let cfg = params.config().clone();
        let images: Vec<_> = (0..3).map(|_| random_image(&mut rng, &cfg)).collect();
        let labels: Vec<usize> = (0..3)
            .map(|_| rng.random_range(0..cfg.num_classes))
            .collect();
        let grads = grad_params(&params, &images, &labels).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let t = &params.tensors()[rng.random_range(0..params.tensors().len())];
            let j = rng.random_range(0..t.data.len());
            let shifted = |d: f64| {
                let mut data = t.data.clone();
                data[j] += d;
                let p = params.with_tensor(&t.name, data).unwrap();
                loss(&p, &images, &labels).unwrap()
            };
            let fd = (shifted(H) - shifted(-H)) / (2.0 * H);
            let analytic = grads.tensor(&t.name).unwrap().data[j];
            worst = worst.max(rel_err(analytic, fd));
        }
        assert!(
            worst <= 1e-4,
            "model {i} ({:?}): relative error {worst}",
            cfg.architecture
        );
    }
}

#[test]
fn mlp_logits_match_scalar_recomputation() {
    let params = init_model(&ModelConfig::mlp(2, 3, 4, 3, 5)).unwrap();
    let x = Array2::from_shape_fn((2, 3), |(r, c)| 0.1 * (r * 3 + c) as f64 + 0.05);
    let w1 = &params.tensor("fc1.weight").unwrap().data;
    let b1 = &params.tensor("fc1.bias").unwrap().data;
    let w2 = &params.tensor("head.weight").unwrap().data;
    let b2 = &params.tensor("head.bias").unwrap().data;
    let flat: Vec<f64> = x.iter().copied().collect();
    let hidden: Vec<f64> = (0..4)
        .map(|j| {
            let s: f64 = (0..6).map(|i| w1[j * 6 + i] * flat[i]).sum::<f64>() + b1[j];
            s.max(0.0)
        })
        .collect();
    let logits: Vec<f64> = (0..3)
        .map(|k| (0..4).map(|j| w2[k * 4 + j] * hidden[j]).sum::<f64>() + b2[k])
        .collect();
    let got = &forward(&params, std::slice::from_ref(&x)).unwrap()[0];
    for (a, b) in got.logits.iter().zip(&logits) {
        assert!((a - b).abs() <= 1e-12);
    }
    for y in 0..3 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let by_hand = -(logits[y] - m) + z.ln();
        assert!((loss(&params, std::slice::from_ref(&x), &[y]).unwrap() - by_hand).abs() <= 1e-10);
        assert!((cross_entropy(&got.logits, y) - by_hand).abs() <= 1e-10);
    }
}

/// Parameter count from layer shapes, written out independently of the crate.
fn enumerate_small_cnn(h: usize, w: usize, c1: usize, c2: usize, hidden: usize, k: usize) -> usize {
    let conv1 = c1 * 3 * 3 + c1;
    let conv2 = c2 * c1 * 3 * 3 + c2;
    let flat = c2 * (h / 4) * (w / 4);
    let fc1 = flat * hidden + hidden;
    let head = hidden * k + k;
    conv1 + conv2 + fc1 + head
}

#[test]
fn parameter_count_matches_enumeration() {
    for (h, w, c1, c2, hid) in [(32, 32, 4, 8, 32), (8, 8, 2, 3, 5), (20, 12, 6, 5, 7)] {
        let cfg = ModelConfig {
            conv1_channels: c1,
            conv2_channels: c2,
            hidden_units: hid,
            ..ModelConfig::small_cnn(h, w, 3, 0)
        };
        let expected = enumerate_small_cnn(h, w, c1, c2, hid, 3);
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(init_model(&cfg).unwrap().num_parameters(), expected);
    }
    let mlp = ModelConfig::mlp(2, 1, 4, 3, 0);
    assert_eq!(mlp.architecture, Architecture::Mlp);
    assert_eq!(mlp.param_count(), 2 * 4 + 4 + 4 * 3 + 3);
}
