//! Test-only oracles: central finite differences and brute-force metrics.
#![allow(dead_code)]

use floodtile::convnet::{Mode, UNet};
use floodtile::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

/// Whole-network step: 1e-3 crosses ReLU / max-pool kinks in a width-2 net.
pub const NET_FD_STEP: f64 = 1e-6;
/// Gradient magnitude below which errors are judged absolutely; analytically
/// zero gradients (conv biases feeding batch-norm) read ~1e-9 of rounding
/// noise at `NET_FD_STEP`.
pub const NET_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps gradients that are
/// analytically zero (conv biases feeding batch-norm) from dividing by noise.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

/// Full-network check of every parameter for the loss `sum(weights * output)`
/// in training mode. Returns (max relative error, parameter count).
pub fn unet_gradient_check(model: &mut UNet<f64>, input: &Tensor<f64>, weights: &Tensor<f64>, h: f64, floor: f64) -> (f64, usize) {
    model.set_mode(Mode::Training);
    model.zero_grad();
    let out = model.forward(input).unwrap();
    assert_eq!(out.shape(), weights.shape());
    model.backward(weights).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let n_params = analytic.len();
    for pi in 0..n_params {
        let len = analytic[pi].len();
        for i in 0..len {
            let orig = model.params()[pi].value[i];
            model.params_mut()[pi].value[i] = orig + h;
            let up = dot(&model.forward(input).unwrap(), weights);
            model.params_mut()[pi].value[i] = orig - h;
            let down = dot(&model.forward(input).unwrap(), weights);
            model.params_mut()[pi].value[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi][i], numeric, floor));
            count += 1;
        }
    }
    (worst, count)
}
