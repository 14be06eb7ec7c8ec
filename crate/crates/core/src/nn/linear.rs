use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{fan_in_uniform, ParamRef, ParamStore};

/// Dense layer applied column-wise: `Y = W X + b`, `X` is `in × n`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), &[out_dim, in_dim], fan_in_uniform(rng, in_dim));
        let bias = store.add(format!("{name}.bias"), &[out_dim], fan_in_uniform(rng, in_dim));
        Self { in_dim, out_dim, weight, bias }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len + self.bias.len
    }

    fn w<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), self.weight.of(p)).expect("weight shape")
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((self.out_dim, x.ncols()));
        general_mat_mul(1.0, &self.w(p), &x, 0.0, &mut y);
        let b = self.bias.of(p);
        for (mut row, &bi) in y.axis_iter_mut(Axis(0)).zip(b) {
            row += bi;
        }
        y
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        {
            let mut gw = ArrayViewMut2::from_shape((self.out_dim, self.in_dim), self.weight.of_mut(g)).expect("grad shape");
            general_mat_mul(1.0, &dy, &x.t(), 1.0, &mut gw);
        }
        let gb = self.bias.of_mut(g);
        for (gbi, row) in gb.iter_mut().zip(dy.axis_iter(Axis(0))) {
            *gbi += row.sum();
        }
        let mut dx = Array2::zeros((self.in_dim, dy.ncols()));
        general_mat_mul(1.0, &self.w(p).t(), &dy, 0.0, &mut dx);
        dx
    }
}
