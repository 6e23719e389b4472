use super::Matrix;

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub fn relu_in_place(x: &mut Matrix) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

/// Gradient through relu given its output.
pub fn relu_backward(y: &Matrix, grad: &Matrix) -> Matrix {
    y.zip_map(grad, |y, g| if y > 0.0 { g } else { 0.0 })
}

pub fn relu_backward_in_place(y: &Matrix, grad: &mut Matrix) {
    for (g, &y) in grad.data_mut().iter_mut().zip(y.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

/// Gradient through sigmoid given its output.
pub fn sigmoid_backward(y: &Matrix, grad: &Matrix) -> Matrix {
    y.zip_map(grad, |y, g| g * y * (1.0 - y))
}

pub fn tanh(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// Gradient through tanh given its output.
pub fn tanh_backward(y: &Matrix, grad: &Matrix) -> Matrix {
    y.zip_map(grad, |y, g| g * (1.0 - y * y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_input_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_values() {
        let x = Matrix::row_vector(&[-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(&Matrix::row_vector(&[0.0])).data(), &[0.5]);
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let x = Matrix::row_vector(&[-1e3, 1e3, -745.0, 800.0]);
        assert!(sigmoid(&x).is_finite());
        assert!(tanh(&x).is_finite());
        assert!(relu(&x).is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = Matrix::from_vec(3, 4, data).unwrap();
            let proj = x.map(|v| (v * 1.3).cos());
            let weighted = |y: Matrix| y.zip_map(&proj, |a, b| a * b).sum();

            let y = tanh(&x);
            let g = tanh_backward(&y, &proj);
            assert!(check_input_grad(&x, &g, |x| weighted(tanh(x))) <= 1e-7);

            let y = sigmoid(&x);
            let g = sigmoid_backward(&y, &proj);
            assert!(check_input_grad(&x, &g, |x| weighted(sigmoid(x))) <= 1e-5);

            let y = relu(&x);
            let g = relu_backward(&y, &proj);
            assert!(check_input_grad(&x, &g, |x| weighted(relu(x))) <= 1e-5);
        }
    }
}
