//! Small numerical kernels shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PAIRWISE_BASE: usize = 16;

/// Pairwise (cascade) summation of `term(i)` over `start..end`.
///
/// Rounding error grows as O(log n) instead of O(n) for the naive loop,
/// which keeps block identities testable at tight relative tolerance.
pub fn pairwise_sum_by<F>(start: usize, end: usize, term: &F) -> f64
where
    F: Fn(usize) -> f64,
{
    let len = end - start;
    if len <= PAIRWISE_BASE {
        let mut acc = 0.0;
        for i in start..end {
            acc += term(i);
        }
        acc
    } else {
        let mid = start + len / 2;
        pairwise_sum_by(start, mid, term) + pairwise_sum_by(mid, end, term)
    }
}

pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_by(0, values.len(), &|i| values[i])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Element-wise `a - b`.
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Linear-interpolated quantile of an unsorted sample, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// SplitMix64 finalizer; turns `(seed, stream)` into an independent child seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
