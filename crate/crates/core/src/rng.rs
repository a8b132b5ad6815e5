//! Seeded randomness. Every stochastic choice in the crate goes through here.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::{Scalar, Tensor};

pub type CapsRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> CapsRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Independent stream derived from `seed` and a label, so adding a parameter
/// does not shift the draws of every parameter after it.
pub fn stream(seed: u64, label: &str) -> CapsRng {
    // FNV-1a over the label, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

/// Normal(0, std) draws rejected outside two standard deviations.
pub fn truncated_normal<T: Scalar>(rng: &mut CapsRng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

pub fn uniform<T: Scalar>(rng: &mut CapsRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}

pub fn normal<T: Scalar>(rng: &mut CapsRng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut CapsRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
