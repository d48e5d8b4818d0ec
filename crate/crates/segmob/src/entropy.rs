//! Per-user spatial and SES mobility entropies and their period summaries.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 50;

/// Shannon entropy in bits of an empirical count distribution. 0 log 0 = 0.
fn shannon_bits<I: IntoIterator<Item = u64>>(counts: I) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Normalized spatial entropy of one user's visited region ids within a
/// period. Ceiling is the user's own distinct-region count; a single
/// location gives 0.
pub fn spatial_entropy<'a, I>(region_ids: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for id in region_ids {
        *counts.entry(id).or_insert(0) += 1;
    }
    if counts.is_empty() {
        return Err(Error::Stats("spatial entropy of zero visits".into()));
    }
    let k = counts.len();
    if k == 1 {
        return Ok(0.0);
    }
    Ok(shannon_bits(counts.into_values()) / (k as f64).log2())
}

/// Spatial entropy normalized by a fixed global alphabet size instead of the
/// user's own one (config-selectable alternative reading).
pub fn spatial_entropy_global<'a, I>(region_ids: I, alphabet_size: usize) -> Result<f64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for id in region_ids {
        *counts.entry(id).or_insert(0) += 1;
    }
    if counts.is_empty() {
        return Err(Error::Stats("spatial entropy of zero visits".into()));
    }
    if alphabet_size < 2 {
        return Ok(0.0);
    }
    Ok(shannon_bits(counts.into_values()) / (alphabet_size as f64).log2())
}

/// Normalized SES entropy over place classes, ceiling fixed at
/// log2(n_classes).
pub fn ses_entropy<I>(classes: I, n_classes: usize) -> Result<f64>
where
    I: IntoIterator<Item = u8>,
{
    let mut counts = vec![0u64; n_classes];
    let mut any = false;
    for c in classes {
        let idx = c as usize;
        if idx >= 1 && idx <= n_classes {
            counts[idx - 1] += 1;
            any = true;
        }
    }
    if !any {
        return Err(Error::Stats("ses entropy of zero visits".into()));
    }
    Ok(shannon_bits(counts) / (n_classes as f64).log2())
}

/// Mean, population standard deviation and a fixed 50-bin histogram over
/// [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<u64>,
}

pub fn summarize(values: &[f64]) -> Result<EntropySummary> {
    if values.is_empty() {
        return Err(Error::Stats("empty entropy population".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for &v in values {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    Ok(EntropySummary {
        n: values.len(),
        mean,
        std: var.sqrt(),
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_over_two_is_one() {
        assert!((spatial_entropy(["A", "A", "B", "B"]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_location_is_zero() {
        assert_eq!(spatial_entropy(["A", "A", "A"]).unwrap(), 0.0);
    }

    #[test]
    fn three_one_split() {
        // direct formula evaluation: -(3/4)log2(3/4) - (1/4)log2(1/4) = 0.8113 bits
        let h = spatial_entropy(["A", "A", "A", "B"]).unwrap();
        assert!((h - 0.8112781244591328).abs() < 1e-12);
    }

    #[test]
    fn zero_visits_is_error() {
        assert!(spatial_entropy([]).is_err());
        assert!(ses_entropy([], 10).is_err());
    }

    #[test]
    fn ses_uniform_over_ten_is_one() {
        assert!((ses_entropy(1..=10u8, 10).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ses_single_class_is_zero() {
        assert_eq!(ses_entropy([4, 4, 4], 10).unwrap(), 0.0);
    }

    #[test]
    fn ses_hand_case() {
        // direct formula evaluation: H({1,1,2}) = 0.9183 bits, /log2(10)
        let h = ses_entropy([1, 1, 2], 10).unwrap();
        assert!((h - 0.9182958340544896 / 10f64.log2()).abs() < 1e-12);
        assert!((h - 0.2764).abs() < 1e-4);
    }

    #[test]
    fn label_renaming_invariance() {
        let a = spatial_entropy(["x", "y", "y", "z"]).unwrap();
        let b = spatial_entropy(["q", "w", "w", "e"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multiplicative_duplication_invariance() {
        let base = ["A", "A", "B", "C"];
        let tripled: Vec<&str> = base.iter().cycle().take(12).copied().collect();
        let a = spatial_entropy(base).unwrap();
        let b = spatial_entropy(tripled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn entropy_always_finite_in_unit_interval() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let ids: Vec<String> = (0..n)
                .map(|_| format!("r{}", rng.gen_range(0..8)))
                .collect();
            let h = spatial_entropy(ids.iter().map(String::as_str)).unwrap();
            assert!(h.is_finite() && (0.0..=1.0 + 1e-12).contains(&h));
            let classes: Vec<u8> = (0..n).map(|_| rng.gen_range(1..=10)).collect();
            let hs = ses_entropy(classes, 10).unwrap();
            assert!(hs.is_finite() && (0.0..=1.0 + 1e-12).contains(&hs));
        }
    }

    #[test]
    fn summary_hand_cases() {
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!((s.std - 0.5).abs() < 1e-12);
        assert_eq!(s.histogram[0], 1);
        assert_eq!(s.histogram[HISTOGRAM_BINS - 1], 1);

        let c = summarize(&[0.3; 7]).unwrap();
        assert_eq!(c.std, 0.0);
        assert_eq!(c.n, 7);
        assert!(summarize(&[]).is_err());
    }
}
