use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives an independent seed for one call site of one run.
///
/// SplitMix64 finalizer over the (seed, stream) pair, so neighbouring streams
/// do not share prefixes.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<f64> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect()
}
