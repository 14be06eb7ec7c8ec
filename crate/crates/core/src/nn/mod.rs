//! Minimal layer library with hand-written backward passes.
//!
//! All parameters of a model live in one flat [`ParamStore`]; layers keep
//! [`ParamRef`] offsets into it. Forward passes read `&[f64]` parameter
//! values, backward passes accumulate into a gradient buffer of the same
//! length, which lets per-sample gradients be computed independently and
//! summed in a fixed order.

mod act;
mod adam;
pub mod checkpoint;
mod conv;
mod linear;
mod norm;
mod params;

pub use act::{gelu, gelu_grad, relu_backward_inplace, relu_inplace};
pub use adam::{Adam, AdamConfig};
pub use conv::{Conv1d, PartialConv1d, PartialConvOutput};
pub use linear::Linear;
pub use norm::{GroupNorm, GroupNormCache, InstanceNorm, LayerNorm};
pub use params::{ParamRef, ParamSpec, ParamStore};

use rand::Rng;

/// Uniform `[-bound, bound]` initializer with `bound = 1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    move || rng.random_range(-bound..=bound)
}
