//! Randomness estimators for binary outcome series.
//!
//! * minimum entropy `Hm = −log2 max_r P(r)`,
//! * the Lempel-Ziv (1976) production complexity `c(N)` and its normalized
//!   form `Kc = c(N) · log2(N) / N`,
//! * string census: occurrence counts of every length-`n` word.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Bit, SlotSeries, Station};

fn check_bits(series: &[Bit]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::InsufficientData("empty series".into()));
    }
    if let Some(pos) = series.iter().position(|&b| b > 1) {
        return Err(Error::Domain(format!("series value {} at position {pos} is not a bit", series[pos])));
    }
    Ok(())
}

pub fn min_entropy(series: &[Bit]) -> Result<f64> {
    check_bits(series)?;
    let ones = series.iter().filter(|&&b| b == 1).count();
    let max = ones.max(series.len() - ones) as f64 / series.len() as f64;
    // -log2(1) is -0.0
    Ok((-max.log2()).max(0.0))
}

/// Number of phrases in the Lempel-Ziv 1976 production parsing of `series`.
///
/// Each phrase is the shortest prefix of the unparsed remainder that cannot
/// be copied from earlier positions (the copy may run into the phrase
/// itself). An unfinished last phrase is counted.
///
/// This is the Kaspar-Schuster scan: `l` is where the current phrase starts,
/// `i` the candidate copy source, and `k` the current match length.
pub fn lz76_phrase_count(series: &[Bit]) -> Result<usize> {
    check_bits(series)?;
    Ok(lz76_unchecked(series))
}

pub(crate) fn lz76_unchecked(s: &[Bit]) -> usize {
    let n = s.len();
    if n == 1 {
        return 1;
    }
    let (mut c, mut l, mut i, mut k, mut k_max) = (1usize, 1usize, 0usize, 1usize, 1usize);
    loop {
        if s[i + k - 1] == s[l + k - 1] {
            k += 1;
            if l + k > n {
                c += 1;
                break;
            }
        } else {
            k_max = k_max.max(k);
            i += 1;
            if i == l {
                c += 1;
                l += k_max;
                if l + 1 > n {
                    break;
                }
                i = 0;
                k = 1;
                k_max = 1;
            } else {
                k = 1;
            }
        }
    }
    c
}

/// `Kc = c(N) · log2(N) / N`: near 0 for periodic series, near 1 for coin flips.
pub fn kc_normalized(series: &[Bit]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "Kc needs at least 2 bits, got {}",
            series.len()
        )));
    }
    let c = lz76_phrase_count(series)?;
    let n = series.len() as f64;
    Ok(c as f64 * n.log2() / n)
}

pub const MAX_CENSUS_WORD: usize = 16;

/// Overlapping-window counts of all `2^n` words of length `n`; index `w`
/// holds the count of the word whose bits, most significant first, spell `w`.
pub fn string_census(series: &[Bit], n: usize) -> Result<Vec<u64>> {
    check_bits(series)?;
    if n == 0 || n > MAX_CENSUS_WORD {
        return Err(Error::Domain(format!("word length {n} outside 1..={MAX_CENSUS_WORD}")));
    }
    if series.len() < n {
        return Err(Error::InsufficientData(format!(
            "series of {} bits is shorter than the word length {n}",
            series.len()
        )));
    }
    let mask = (1usize << n) - 1;
    let mut counts = vec![0u64; 1 << n];
    let mut word = 0usize;
    for (pos, &b) in series.iter().enumerate() {
        word = ((word << 1) | b as usize) & mask;
        if pos + 1 >= n {
            counts[word] += 1;
        }
    }
    Ok(counts)
}

/// Parses a word such as `"1010"` into its census index.
pub fn word_index(word: &str) -> Result<usize> {
    if word.is_empty() || word.len() > MAX_CENSUS_WORD {
        return Err(Error::Domain(format!("word `{word}` has unsupported length")));
    }
    word.chars().try_fold(0usize, |acc, ch| match ch {
        '0' => Ok(acc << 1),
        '1' => Ok((acc << 1) | 1),
        _ => Err(Error::Domain(format!("word `{word}` is not binary"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomnessReport {
    pub hm: f64,
    pub kc: f64,
    pub n_bits: usize,
    pub phrase_count: usize,
    /// `(n, number of length-n words that never occur)`.
    pub missing_strings: Vec<(usize, usize)>,
}

pub fn randomness_report(series: &[Bit], max_word: usize) -> Result<RandomnessReport> {
    let kc = kc_normalized(series)?;
    let hm = min_entropy(series)?;
    let phrase_count = lz76_unchecked(series);
    let missing_strings = (1..=max_word.min(MAX_CENSUS_WORD).min(series.len()))
        .map(|n| {
            let counts = string_census(series, n)?;
            Ok((n, counts.iter().filter(|&&c| c == 0).count()))
        })
        .collect::<Result<_>>()?;
    Ok(RandomnessReport {
        hm,
        kc,
        n_bits: series.len(),
        phrase_count,
        missing_strings,
    })
}

/// Estimator values for one slot series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesEstimate {
    pub station: Station,
    pub run_id: String,
    pub slot_index: usize,
    pub n_bits: usize,
    pub hm: f64,
    pub kc: f64,
}

/// Evaluates Hm and Kc for every series with at least `min_bits` bits, in
/// input order.
pub fn estimate_all(series: &[SlotSeries], min_bits: usize) -> Result<Vec<SeriesEstimate>> {
    let min_bits = min_bits.max(2);
    series
        .par_iter()
        .filter(|s| s.bits.len() >= min_bits)
        .map(|s| {
            Ok(SeriesEstimate {
                station: s.station,
                run_id: s.run_id.clone(),
                slot_index: s.slot_index,
                n_bits: s.bits.len(),
                hm: min_entropy(&s.bits)?,
                kc: kc_normalized(&s.bits)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn bits(s: &str) -> Vec<Bit> {
        s.bytes().map(|b| b - b'0').collect()
    }

    #[test]
    fn min_entropy_values() {
        assert_eq!(min_entropy(&[0; 50]).unwrap(), 0.0);
        assert_eq!(min_entropy(&bits("0110")).unwrap(), 1.0);
        let three_quarters = bits("1110".repeat(25).as_str());
        assert!((min_entropy(&three_quarters).unwrap() - 0.415).abs() < 5e-4);
        assert!((min_entropy(&three_quarters).unwrap() + 0.75f64.log2()).abs() < 1e-15);
        assert!(min_entropy(&[]).is_err());
        assert!(min_entropy(&[0, 2]).is_err());
    }

    #[test]
    fn lz76_hand_parses() {
        assert_eq!(lz76_phrase_count(&bits("0")).unwrap(), 1);
        // 0 | 1 | 01010101
        assert_eq!(lz76_phrase_count(&bits("0101010101")).unwrap(), 3);
        assert_eq!(lz76_phrase_count(&bits("0000")).unwrap(), 2);
        // the classic Kaspar-Schuster example: 0 | 001 | 10 | 100 | 1000 | 101
        assert_eq!(lz76_phrase_count(&bits("0001101001000101")).unwrap(), 6);
        assert!(lz76_phrase_count(&[]).is_err());
    }

    #[test]
    fn kc_of_regular_series() {
        let alt: Vec<Bit> = (0..3000).map(|i| (i % 2) as Bit).collect();
        let kc = kc_normalized(&alt).unwrap();
        assert!((kc - 3.0 * 3000f64.log2() / 3000.0).abs() < 1e-15);
        assert!((kc - 0.0116).abs() < 1e-4);
        for p in 1..=8usize {
            let pattern: Vec<Bit> = (0..p).map(|i| ((i * 5 + 1) % 3 == 0) as Bit).collect();
            let s: Vec<Bit> = (0..3000).map(|i| pattern[i % p]).collect();
            assert!(kc_normalized(&s).unwrap() < 0.05, "period {p}");
        }
        assert!(kc_normalized(&[1]).is_err());
    }

    #[test]
    fn repetition_does_not_raise_kc() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let s: Vec<Bit> = (0..1500).map(|_| rng.random_range(0..2)).collect();
            let doubled: Vec<Bit> = s.iter().chain(s.iter()).copied().collect();
            assert!(kc_normalized(&doubled).unwrap() <= kc_normalized(&s).unwrap() * 1.1);
        }
    }

    #[test]
    fn census_examples() {
        let c = string_census(&[0; 20], 2).unwrap();
        assert_eq!(c, vec![19, 0, 0, 0]);
        let c = string_census(&bits("0110"), 2).unwrap();
        assert_eq!(c[word_index("01").unwrap()], 1);
        assert_eq!(c[word_index("11").unwrap()], 1);
        assert_eq!(c[word_index("10").unwrap()], 1);
        assert_eq!(c[word_index("00").unwrap()], 0);
        assert!(string_census(&bits("01"), 3).is_err());
        assert!(string_census(&bits("01"), 17).is_err());
        assert!(word_index("012").is_err());
    }

    #[test]
    fn report_fields() {
        let r = randomness_report(&bits("0101010101"), 3).unwrap();
        assert_eq!(r.phrase_count, 3);
        assert_eq!(r.n_bits, 10);
        assert_eq!(r.hm, 1.0);
        // "00" and "11" never occur; of length 3 only 010 and 101 do
        assert_eq!(r.missing_strings, vec![(1, 0), (2, 2), (3, 6)]);
    }

    proptest::proptest! {
        #[test]
        fn complement_preserves_min_entropy(v in proptest::collection::vec(0u8..2, 1..300)) {
            let flipped: Vec<Bit> = v.iter().map(|b| 1 - b).collect();
            proptest::prop_assert_eq!(min_entropy(&v).unwrap(), min_entropy(&flipped).unwrap());
        }

        #[test]
        fn census_total(v in proptest::collection::vec(0u8..2, 1..300), n in 1usize..10) {
            proptest::prop_assume!(v.len() >= n);
            let total: u64 = string_census(&v, n).unwrap().iter().sum();
            proptest::prop_assert_eq!(total as usize, v.len() - n + 1);
        }

        #[test]
        fn phrase_count_at_least_one(v in proptest::collection::vec(0u8..2, 1..300)) {
            let c = lz76_phrase_count(&v).unwrap();
            proptest::prop_assert!(c >= 1 && c <= v.len());
        }
    }
}
