//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::{BNParams, Cbs, ConvParams};
use crate::tensor::{Shape, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for a named sub-component, so each layer draws from its own
/// stream and adding a layer never shifts the weights of another.
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    // FNV-1a over the role, mixed with the parent through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn conv_weight<R: Rng + ?Sized>(shape: impl Into<Shape>, rng: &mut R) -> Tensor {
    let shape = shape.into();
    let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
    let bound = fan_in.sqrt().recip();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Statistics perturbed around the identity, as a trained layer would carry.
pub fn batch_norm<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> BNParams {
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..channels).map(|_| rng.random_range(lo..hi)).collect() };
    BNParams {
        gamma: draw(0.8, 1.2),
        beta: draw(-0.1, 0.1),
        running_mean: draw(-0.1, 0.1),
        running_var: draw(0.8, 1.2),
        eps: 1e-5,
    }
}

pub fn cbs<R: Rng + ?Sized>(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    groups: usize,
    rng: &mut R,
) -> Result<Cbs> {
    let weight = conv_weight([out_channels, in_channels / groups.max(1), kernel, kernel], rng);
    let conv = ConvParams::new(weight, None, 1, kernel / 2, groups)?;
    Ok(Cbs {
        conv,
        bn: batch_norm(out_channels, rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_role_and_parent() {
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
    }

    #[test]
    fn conv_weight_within_bound() {
        let w = conv_weight([4, 9, 1, 1], &mut rng(1));
        assert!(w.data().iter().all(|v| v.abs() <= 1.0 / 3.0));
    }
}
