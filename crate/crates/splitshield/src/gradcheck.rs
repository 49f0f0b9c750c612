//! Central finite-difference gradient checking.
//!
//! Used throughout the test suites to validate analytic gradients of layers
//! and loss terms. Checks run at 64-bit with step `1e-5` and are expected to
//! agree with reverse-mode gradients to relative error below `1e-4`.

use crate::nn::Sequential;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default acceptance threshold on [`relative_error`].
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Symmetric relative error with an absolute floor for near-zero pairs.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite-difference gradient of `loss` with respect to every
/// parameter of `net`, flattened in parameter order.
pub fn numeric_param_gradient(
    net: &mut Sequential<f64>,
    step: f64,
    mut loss: impl FnMut(&Sequential<f64>) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    let n_tensors = net.params().len();
    for t in 0..n_tensors {
        let len = net.params()[t].len();
        for i in 0..len {
            let orig = net.params()[t].data()[i];
            net.params_mut()[t].data_mut()[i] = orig + step;
            let plus = loss(net);
            net.params_mut()[t].data_mut()[i] = orig - step;
            let minus = loss(net);
            net.params_mut()[t].data_mut()[i] = orig;
            out.push((plus - minus) / (2.0 * step));
        }
    }
    out
}

/// Central finite-difference gradient of `loss` with respect to `input`.
pub fn numeric_input_gradient(
    input: &Tensor<f64>,
    step: f64,
    mut loss: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut grad = Tensor::zeros(input.shape());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = input.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = loss(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = loss(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest relative error between an analytic gradient (flattened in
/// parameter order) and its numeric counterpart.
pub fn max_param_error(analytic: &[Tensor<f64>], numeric: &[f64]) -> f64 {
    let flat: Vec<f64> = analytic
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect();
    assert_eq!(flat.len(), numeric.len(), "gradient length mismatch");
    flat.iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Largest relative error between analytic and numeric input gradients.
pub fn max_input_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AvgPool2d, Conv2d, ConvTranspose2d, Flatten, Layer, Linear, Relu, Residual};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_of_squares(t: &Tensor<f64>) -> f64 {
        t.squared_norm()
    }

    /// d/dy of sum(y^2) = 2y, used to seed the backward pass.
    fn seed(t: &Tensor<f64>) -> crate::error::Result<Tensor<f64>> {
        Ok(t.scale(2.0))
    }

    fn check_net(net: &mut Sequential<f64>, input: &Tensor<f64>) {
        let (_, analytic, analytic_in) = net.forward_backward(input, seed).unwrap();
        let numeric = numeric_param_gradient(net, DEFAULT_STEP, |n| {
            sum_of_squares(&n.forward(input).unwrap())
        });
        let perr = max_param_error(&analytic, &numeric);
        assert!(perr < DEFAULT_TOLERANCE, "param gradient error {}", perr);

        let numeric_in = numeric_input_gradient(input, DEFAULT_STEP, |x| {
            sum_of_squares(&net.forward(x).unwrap())
        });
        let ierr = max_input_error(&analytic_in, &numeric_in);
        assert!(ierr < DEFAULT_TOLERANCE, "input gradient error {}", ierr);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net =
            Sequential::empty().push(Conv2d::<f64>::new(2, 3, 3, 1, 1, &mut rng));
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f64 * 0.13).sin());
        check_net(&mut net, &x);
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut net =
            Sequential::empty().push(Conv2d::<f64>::new(2, 2, 3, 2, 1, &mut rng));
        let x = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f64 * 0.29).cos());
        check_net(&mut net, &x);
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut net =
            Sequential::empty().push(ConvTranspose2d::<f64>::new(2, 2, 3, 2, 1, &mut rng));
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.31).sin());
        check_net(&mut net, &x);
    }

    #[test]
    fn composite_net_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut net = Sequential::empty()
            .push(Conv2d::<f64>::new(1, 2, 3, 1, 1, &mut rng))
            .push(Relu)
            .push(Residual::new(
                Sequential::empty()
                    .push(Conv2d::new(2, 2, 3, 1, 1, &mut rng))
                    .push(Relu)
                    .push(Conv2d::new(2, 2, 3, 1, 1, &mut rng)),
            ))
            .push(AvgPool2d { k: 2 })
            .push(Flatten)
            .push(Linear::new(2 * 2 * 2, 3, &mut rng));
        assert!(net.param_count() < 1000);
        let x = Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64 * 0.17).sin() * 0.9);
        check_net(&mut net, &x);
    }

    #[test]
    fn relu_subgradient_is_zero_on_negative_side() {
        let relu = Relu;
        let x = Tensor::new(vec![1, 3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        let g = relu
            .backward(&x, &Tensor::full(&[1, 3], 1.0), &mut [])
            .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
