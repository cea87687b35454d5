#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotbell_core::Bit;

/// LZ76 phrase count straight from the definition: a phrase starting at `i`
/// is extended while the extension still occurs somewhere starting before
/// `i` (overlap allowed). Surviving copy sources are filtered one symbol at
/// a time.
pub fn naive_lz76(s: &[Bit]) -> usize {
    let n = s.len();
    let mut count = 0;
    let mut i = 0;
    let mut sources: Vec<usize> = Vec::with_capacity(n);
    while i < n {
        count += 1;
        sources.clear();
        sources.extend(0..i);
        let mut k = 0;
        loop {
            if i + k == n {
                break;
            }
            let c = s[i + k];
            sources.retain(|&j| s[j + k] == c);
            k += 1;
            if sources.is_empty() {
                break;
            }
        }
        i += k;
    }
    count
}

pub fn coin_flips(len: usize, seed: u64) -> Vec<Bit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..2)).collect()
}

pub fn bits(text: &str) -> Vec<Bit> {
    text.bytes().map(|b| b - b'0').collect()
}

/// Correlation of the sign-of-cosine local model with a uniform hidden
/// polarization: a triangle wave in the angle difference.
pub fn local_model_correlation(delta_deg: f64) -> f64 {
    let d = delta_deg.rem_euclid(180.0);
    let d = d.min(180.0 - d);
    1.0 - 4.0 * d / 180.0
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
