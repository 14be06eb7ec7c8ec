use ndarray::{ArrayViewMut2, ArrayView2, Zip};

pub fn relu_inplace(mut x: ArrayViewMut2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` wherever the ReLU output `y` was not positive.
pub fn relu_backward_inplace(y: ArrayView2<f64>, mut dy: ArrayViewMut2<f64>) {
    Zip::from(&mut dy).and(&y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
