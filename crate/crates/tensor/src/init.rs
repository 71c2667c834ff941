use crate::rng::SeedRng;
use crate::{ConvParams, Scalar, KERNEL_TAPS};

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))` for a 3x3x3
/// kernel, where `fan = channels * 27`.
pub fn xavier_bound(c_in: usize, c_out: usize) -> f64 {
    let fan_in = (c_in * KERNEL_TAPS) as f64;
    let fan_out = (c_out * KERNEL_TAPS) as f64;
    (6.0 / (fan_in + fan_out)).sqrt()
}

/// Xavier-uniform weights, zero bias.
pub fn xavier_init<T: Scalar>(c_in: usize, c_out: usize, rng: &mut SeedRng) -> ConvParams<T> {
    let bound = xavier_bound(c_in, c_out);
    let mut p = ConvParams::zeros(c_in, c_out);
    for w in &mut p.weight {
        *w = T::from_f64(rng.uniform_range(-bound, bound));
    }
    p
}

/// Zero-mean Gaussian weights with the given standard deviation, zero bias.
pub fn normal_init<T: Scalar>(
    c_in: usize,
    c_out: usize,
    std: f64,
    rng: &mut SeedRng,
) -> ConvParams<T> {
    let mut p = ConvParams::zeros(c_in, c_out);
    for w in &mut p.weight {
        *w = T::from_f64(std * rng.normal());
    }
    p
}
