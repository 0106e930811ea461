use rand::Rng;

use super::Tensor;

/// Gain for ReLU layers.
pub const GAIN_RELU: f32 = std::f32::consts::SQRT_2;
/// Gain of the leaky-ReLU rule with slope `sqrt(5)`, the usual default for
/// layers without a rectifier. Gives `b = 1 / sqrt(fan_in)`.
pub const GAIN_LINEAR: f32 = 0.577_350_26;

/// Variance-preserving gain; for square layers this is Glorot-uniform.
pub const GAIN_UNIT: f32 = 1.0;

/// Kaiming-uniform initialisation: `U(-b, b)` with
/// `b = gain * sqrt(3 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f32,
    rng: &mut R,
) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}
