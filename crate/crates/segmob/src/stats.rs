//! Restriction-impact regression and Kruskal-Wallis period tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Multivariate OLS fit of an entropy series on stringency levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionResult {
    /// Coefficient per predictor name; zero-variance predictors are dropped
    /// from the fit and reported with coefficient 0.
    pub coefficients: Vec<(String, f64)>,
    pub intercept: f64,
    pub r_squared: f64,
    pub residual_variance: f64,
    /// Condition number of the fitted design (intercept + kept columns).
    pub condition_number: f64,
    /// Coefficients rescaled by predictor/response standard deviations.
    pub standardized: Vec<(String, f64)>,
    /// Predictors excluded for having zero variance.
    pub dropped: Vec<String>,
    pub n_obs: usize,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| *b)
    }
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Ordinary least squares via QR orthogonalization (never normal equations).
/// `columns` are the predictor series, one per name, date-aligned with `y`.
pub fn ols_fit(y: &[f64], columns: &[Vec<f64>], names: &[String]) -> Result<RegressionResult> {
    let n = y.len();
    let p = columns.len();
    if p != names.len() {
        return Err(Error::Regression("column/name count mismatch".into()));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Regression("misaligned series lengths".into()));
    }
    if n < p + 2 {
        return Err(Error::Regression(format!(
            "need at least {} observations for {p} predictors, got {n}",
            p + 2
        )));
    }
    if y.iter().chain(columns.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Regression("non-finite value in design".into()));
    }

    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for (k, col) in columns.iter().enumerate() {
        if variance(col) > 0.0 {
            kept.push(k);
        } else {
            dropped.push(names[k].clone());
        }
    }

    let m = kept.len() + 1;
    let mut design = DMatrix::zeros(n, m);
    for row in 0..n {
        design[(row, 0)] = 1.0;
        for (c, &k) in kept.iter().enumerate() {
            design[(row, c + 1)] = columns[k][row];
        }
    }

    let svd = design.clone().svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if s_min <= s_max * 1e-10 {
        let culprits = dependent_columns(&design, &kept, names);
        return Err(Error::Regression(format!(
            "rank-deficient design, dependent columns: {}",
            culprits.join(", ")
        )));
    }
    let condition_number = s_max / s_min;

    let yv = DVector::from_column_slice(y);
    let qr = design.clone().qr();
    let qty = qr.q().transpose() * &yv;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Regression("singular R factor".into()))?;

    let fitted = design * &beta;
    let residuals = &yv - &fitted;
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let dof = n.saturating_sub(m);
    let residual_variance = if dof > 0 { ssr / dof as f64 } else { 0.0 };

    let y_std = variance(y).sqrt();
    let mut coefficients = Vec::with_capacity(p);
    let mut standardized = Vec::with_capacity(p);
    for (k, name) in names.iter().enumerate() {
        let b = kept
            .iter()
            .position(|&kk| kk == k)
            .map(|c| beta[c + 1])
            .unwrap_or(0.0);
        coefficients.push((name.clone(), b));
        let x_std = variance(&columns[k]).sqrt();
        let std_b = if y_std > 0.0 { b * x_std / y_std } else { 0.0 };
        standardized.push((name.clone(), std_b));
    }

    Ok(RegressionResult {
        coefficients,
        intercept: beta[0],
        r_squared,
        residual_variance,
        condition_number,
        standardized,
        dropped,
        n_obs: n,
    })
}

/// Names of predictor columns whose removal restores full rank.
fn dependent_columns(design: &DMatrix<f64>, kept: &[usize], names: &[String]) -> Vec<String> {
    let rank_of = |m: &DMatrix<f64>| {
        let svd = m.clone().svd(false, false);
        let s_max = svd.singular_values.max();
        svd.singular_values
            .iter()
            .filter(|&&s| s > s_max * 1e-10)
            .count()
    };
    let full = rank_of(design);
    let mut out = Vec::new();
    for (c, &k) in kept.iter().enumerate() {
        let reduced = design.clone().remove_column(c + 1);
        if rank_of(&reduced) == full {
            out.push(names[k].clone());
        }
    }
    if out.is_empty() {
        out.push("<unidentified>".into());
    }
    out
}

/// Ratio of one predictor's coefficient between two fits sharing a design.
pub fn covariate_ratio(fit_m: &RegressionResult, fit_s: &RegressionResult, k: &str) -> Result<f64> {
    let bm = fit_m
        .coefficient(k)
        .ok_or_else(|| Error::Regression(format!("no coefficient {k}")))?;
    let bs = fit_s
        .coefficient(k)
        .ok_or_else(|| Error::Regression(format!("no coefficient {k}")))?;
    if bs == 0.0 {
        return Err(Error::Regression(format!("zero denominator for {k}")));
    }
    Ok(bm / bs)
}

pub fn r2_ratio(fit_m: &RegressionResult, fit_s: &RegressionResult) -> Result<f64> {
    if fit_s.r_squared <= 0.0 {
        return Err(Error::Regression("non-positive denominator R^2".into()));
    }
    Ok(fit_m.r_squared / fit_s.r_squared)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KruskalResult {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
    pub group_sizes: Vec<usize>,
    pub tie_correction: f64,
    /// True when every pooled value was identical (H := 0, p := 1).
    pub degenerate: bool,
}

/// Midranks of the pooled sample, in input order.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Kruskal-Wallis H test with midrank ties and tie-corrected H; p-value from
/// the chi-square approximation with df = groups - 1.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalResult> {
    if groups.len() < 2 {
        return Err(Error::Stats("need at least 2 groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Stats("empty group".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len();
    if n < 3 {
        return Err(Error::Stats("need at least 3 values in total".into()));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite value".into()));
    }
    let group_sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let df = groups.len() - 1;

    let ranks = midranks(&pooled);
    let mut h = 0.0;
    let mut offset = 0;
    for g in groups {
        let r_sum: f64 = ranks[offset..offset + g.len()].iter().sum();
        h += r_sum * r_sum / g.len() as f64;
        offset += g.len();
    }
    let nf = n as f64;
    h = 12.0 / (nf * (nf + 1.0)) * h - 3.0 * (nf + 1.0);

    // tie correction: 1 - sum(t^3 - t) / (N^3 - N)
    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let tie_correction = 1.0 - tie_sum / (nf * nf * nf - nf);

    if tie_correction <= 0.0 {
        // every value identical
        return Ok(KruskalResult {
            h: 0.0,
            df,
            p_value: 1.0,
            group_sizes,
            tie_correction,
            degenerate: true,
        });
    }
    let h = (h / tie_correction).max(0.0);
    let chi = ChiSquared::new(df as f64)
        .map_err(|e| Error::Stats(format!("chi-square df {df}: {e}")))?;
    let p_value = (1.0 - chi.cdf(h)).clamp(0.0, 1.0);
    Ok(KruskalResult {
        h,
        df,
        p_value,
        group_sizes,
        tie_correction,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn restriction_names() -> Vec<String> {
        crate::ingest::RESTRICTION_CODES
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn exact_planted_fit() {
        let names = restriction_names();
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cols = vec![vec![0.0; n]; 9];
        for v in cols[0].iter_mut() {
            *v = rng.gen_range(0.0..3.0);
        }
        // other eight columns constant -> dropped
        for col in cols.iter_mut().skip(1) {
            col.iter_mut().for_each(|v| *v = 1.5);
        }
        let y: Vec<f64> = cols[0].iter().map(|c1| 2.0 * c1 + 1.0).collect();
        let fit = ols_fit(&y, &cols, &names).unwrap();
        assert!((fit.coefficient("C1").unwrap() - 2.0).abs() < 1e-10);
        assert!((fit.intercept - 1.0).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-10);
        assert_eq!(fit.dropped.len(), 8);
        assert_eq!(fit.coefficient("C5").unwrap(), 0.0);
    }

    #[test]
    fn noise_gives_small_r2() {
        // Monte-Carlo oracle: independent y and X => R^2 near 0 at n = 1000
        let names = restriction_names();
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cols: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..4.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fit = ols_fit(&y, &cols, &names).unwrap();
        assert!(fit.r_squared.abs() < 0.05, "R^2 = {}", fit.r_squared);
    }

    #[test]
    fn duplicated_column_is_rank_deficiency_error() {
        let names = restriction_names();
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cols: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..4.0)).collect())
            .collect();
        cols[3] = cols[2].clone();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        match ols_fit(&y, &cols, &names) {
            Err(Error::Regression(msg)) => {
                assert!(msg.contains("C3") && msg.contains("C4"), "{msg}");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let names = restriction_names();
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..4.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                cols.iter().enumerate().map(|(k, c)| (k as f64 + 1.0) * c[i]).sum::<f64>()
                    + rng.gen_range(-0.5..0.5)
            })
            .collect();
        let fit = ols_fit(&y, &cols, &names).unwrap();
        // recompute residuals and standardized dot products
        let resid: Vec<f64> = (0..n)
            .map(|i| {
                let pred: f64 = fit.intercept
                    + cols
                        .iter()
                        .zip(&fit.coefficients)
                        .map(|(c, (_, b))| b * c[i])
                        .sum::<f64>();
                y[i] - pred
            })
            .collect();
        for col in &cols {
            let mean = col.iter().sum::<f64>() / n as f64;
            let std = variance(col).sqrt();
            let dot: f64 = resid
                .iter()
                .zip(col)
                .map(|(r, x)| r * (x - mean) / std)
                .sum::<f64>()
                / n as f64;
            assert!(dot.abs() < 1e-8, "dot = {dot}");
        }
    }

    #[test]
    fn row_permutation_invariance() {
        let names = restriction_names();
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cols: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..4.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fit_a = ols_fit(&y, &cols, &names).unwrap();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let y_p: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let cols_p: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| perm.iter().map(|&i| c[i]).collect())
            .collect();
        let fit_b = ols_fit(&y_p, &cols_p, &names).unwrap();
        for ((_, a), (_, b)) in fit_a.coefficients.iter().zip(&fit_b.coefficients) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn qr_matches_normal_equations_r2() {
        // brute-force normal-equation oracle on a small well-conditioned design
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let cols = vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![2.0, 1.0, 4.0, 3.0, 7.0, 5.0],
        ];
        let y = vec![3.1, 4.0, 9.8, 10.1, 17.3, 16.2];
        let fit = ols_fit(&y, &cols, &names).unwrap();

        let n = y.len();
        let mut x = DMatrix::zeros(n, 3);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = cols[0][i];
            x[(i, 2)] = cols[1][i];
        }
        let yv = DVector::from_column_slice(&y);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &yv;
        let beta = xtx.try_inverse().unwrap() * xty;
        let resid = &yv - &x * &beta;
        let ssr: f64 = resid.iter().map(|r| r * r).sum();
        let mean = y.iter().sum::<f64>() / n as f64;
        let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let r2_ne = 1.0 - ssr / sst;
        assert!((fit.r_squared - r2_ne).abs() < 1e-8);
    }

    #[test]
    fn ratio_hand_values() {
        let mk = |b: f64, r2: f64| RegressionResult {
            coefficients: vec![("H1".into(), b)],
            intercept: 0.0,
            r_squared: r2,
            residual_variance: 0.0,
            condition_number: 1.0,
            standardized: vec![],
            dropped: vec![],
            n_obs: 100,
        };
        let m = mk(3.33 * 0.21, 0.70);
        let s = mk(0.21, 0.40);
        assert!((covariate_ratio(&m, &s, "H1").unwrap() - 3.33).abs() < 1e-12);
        assert!((r2_ratio(&m, &s).unwrap() - 1.75).abs() < 1e-12);
        assert!((covariate_ratio(&m, &m, "H1").unwrap() - 1.0).abs() < 1e-12);
        assert!((r2_ratio(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let zero = mk(0.0, 0.0);
        assert!(covariate_ratio(&m, &zero, "H1").is_err());
        assert!(r2_ratio(&m, &zero).is_err());
    }

    #[test]
    fn kruskal_hand_case() {
        // hand rank computation: ranks 1..6, H = 3.857, chi-square df=1
        let res = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert!((res.h - 3.857142857).abs() < 1e-6);
        assert!((res.p_value - 0.0495).abs() < 1e-3);
        assert_eq!(res.df, 1);
        assert_eq!(res.tie_correction, 1.0);
    }

    #[test]
    fn identical_groups_degenerate() {
        let res = kruskal_wallis(&[vec![2.0, 2.0], vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(res.h, 0.0);
        assert_eq!(res.p_value, 1.0);
        assert!(res.degenerate);
    }

    #[test]
    fn tie_correction_below_one() {
        // brute-force rank oracle: midranks 2,2,2,5,5,5; correction 1 - 48/210
        let res = kruskal_wallis(&[vec![1.0, 1.0, 2.0], vec![1.0, 2.0, 2.0]]).unwrap();
        assert!((res.tie_correction - (1.0 - 48.0 / 210.0)).abs() < 1e-12);
        assert!(res.tie_correction < 1.0);
        let ranks = midranks(&[1.0, 1.0, 2.0, 1.0, 2.0, 2.0]);
        assert_eq!(ranks, vec![2.0, 2.0, 5.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g1: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..5.0)).collect();
        let g2: Vec<f64> = (0..12).map(|_| rng.gen_range(1.0..6.0)).collect();
        let base = kruskal_wallis(&[g1.clone(), g2.clone()]).unwrap();
        let f = |v: f64| (v * 3.0 + 1.0).exp().ln().powi(1) + 2.0; // strictly increasing
        let t1: Vec<f64> = g1.iter().map(|&v| f(v)).collect();
        let t2: Vec<f64> = g2.iter().map(|&v| f(v)).collect();
        let trans = kruskal_wallis(&[t1, t2]).unwrap();
        assert!((base.h - trans.h).abs() < 1e-9);
    }
}
