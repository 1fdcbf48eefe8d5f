//! Minimal dense tensor arithmetic with reverse-mode autodiff and Adam.

mod adam;
mod check;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::finite_diff_check;
pub use tape::{CustomGrad, Gradients, Mat64, NodeId, Tape, LAYERNORM_EPS};
pub(crate) use tape::ops;
pub use tensor::Tensor;

use rand::Rng;

/// Seeded Gaussian init helper (Box-Muller on a uniform RNG).
pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        data.push((r * th.cos()) as f32 * std);
        if data.len() < n {
            data.push((r * th.sin()) as f32 * std);
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}
