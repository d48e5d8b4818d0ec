//! Visit networks and the stratification math: column-normalized matrix M,
//! assortativity r, adjustment matrix S and residual isolation.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterContext, VisitFilter};
use crate::inference::Visit;
use crate::segmentation::{Period, Window};

/// Weighted bipartite user -> place visit network for one period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisitNetwork {
    pub period: String,
    pub filter: String,
    pub n_classes: usize,
    /// (user_id, region_id) -> visit count
    pub edges: BTreeMap<(String, String), u64>,
    pub user_classes: BTreeMap<String, u8>,
    pub place_classes: BTreeMap<String, u8>,
}

impl VisitNetwork {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn total_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    /// Raw class-pair visit counts, `[place_class - 1][people_class - 1]`.
    pub fn class_counts(&self) -> Vec<Vec<f64>> {
        let n = self.n_classes;
        let mut counts = vec![vec![0f64; n]; n];
        for ((user, place), w) in &self.edges {
            let i = self.user_classes[user] as usize - 1;
            let j = self.place_classes[place] as usize - 1;
            counts[j][i] += *w as f64;
        }
        counts
    }
}

/// Aggregate visits falling inside `period` and passing `filter` into a
/// network.
pub fn build_network(
    visits: &[Visit],
    period: &Period,
    filter: &dyn VisitFilter,
    ctx: &FilterContext,
    n_classes: usize,
) -> VisitNetwork {
    let mut edges: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut user_classes = BTreeMap::new();
    let mut place_classes = BTreeMap::new();
    for v in visits {
        if !period.contains(v.date) || !filter.keep(v, ctx) {
            continue;
        }
        *edges
            .entry((v.user_id.clone(), v.region_id.clone()))
            .or_insert(0) += 1;
        user_classes.insert(v.user_id.clone(), v.class_user);
        place_classes.insert(v.region_id.clone(), v.class_place);
    }
    VisitNetwork {
        period: period.label.clone(),
        filter: filter.name(),
        n_classes,
        edges,
        user_classes,
        place_classes,
    }
}

/// Column-normalized visit-probability matrix. Rows index place class j,
/// columns index people class i.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratificationMatrix {
    pub period: String,
    pub filter: String,
    /// `values[j][i]`, each active column sums to 1.
    pub values: Vec<Vec<f64>>,
    /// Columns with any underlying visits.
    pub active_columns: Vec<bool>,
}

impl StratificationMatrix {
    pub fn n_classes(&self) -> usize {
        self.values.len()
    }

    pub fn from_counts(counts: &[Vec<f64>], period: &str, filter: &str) -> Result<Self> {
        let n = counts.len();
        let total: f64 = counts.iter().flatten().sum();
        if total <= 0.0 {
            return Err(Error::EmptyNetwork);
        }
        let mut col_sums = vec![0f64; n];
        for row in counts {
            for (i, v) in row.iter().enumerate() {
                col_sums[i] += v;
            }
        }
        let mut values = vec![vec![0f64; n]; n];
        for j in 0..n {
            for i in 0..n {
                if col_sums[i] > 0.0 {
                    values[j][i] = counts[j][i] / col_sums[i];
                }
            }
        }
        Ok(StratificationMatrix {
            period: period.to_string(),
            filter: filter.to_string(),
            values,
            active_columns: col_sums.iter().map(|&s| s > 0.0).collect(),
        })
    }
}

/// Column-wise normalization of the network's class-pair counts.
pub fn stratification_matrix(net: &VisitNetwork) -> Result<StratificationMatrix> {
    if net.is_empty() {
        return Err(Error::EmptyNetwork);
    }
    StratificationMatrix::from_counts(&net.class_counts(), &net.period, &net.filter)
}

/// Pearson correlation of class indices under the matrix rescaled to total
/// mass 1, with scores 1..=n on both axes.
pub fn assortativity(m: &StratificationMatrix) -> Result<f64> {
    assortativity_of(&m.values)
}

/// Same computation on raw nonnegative cell masses (any total).
#[allow(clippy::needless_range_loop)] // dual-index sums read clearest as written
pub fn assortativity_of(cells: &[Vec<f64>]) -> Result<f64> {
    let n = cells.len();
    let total: f64 = cells.iter().flatten().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateMatrix("zero total mass".into()));
    }
    let mut e_i = 0.0;
    let mut e_j = 0.0;
    let mut e_ii = 0.0;
    let mut e_jj = 0.0;
    let mut e_ij = 0.0;
    for j in 0..n {
        for i in 0..n {
            let p = cells[j][i] / total;
            let si = (i + 1) as f64;
            let sj = (j + 1) as f64;
            e_i += si * p;
            e_j += sj * p;
            e_ii += si * si * p;
            e_jj += sj * sj * p;
            e_ij += si * sj * p;
        }
    }
    let var_i = e_ii - e_i * e_i;
    let var_j = e_jj - e_j * e_j;
    if var_i <= 0.0 || var_j <= 0.0 {
        return Err(Error::DegenerateMatrix(
            "zero marginal variance: all mass in one row or column".into(),
        ));
    }
    Ok((e_ij - e_i * e_j) / (var_i * var_j).sqrt())
}

/// Elementwise period difference of two stratification matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjustmentMatrix {
    pub period_from: String,
    pub period_to: String,
    pub filter: String,
    /// `values[j][i] = M^{t1}[j][i] - M^{t2}[j][i]`
    pub values: Vec<Vec<f64>>,
}

pub fn adjustment_matrix(
    m1: &StratificationMatrix,
    m2: &StratificationMatrix,
) -> Result<AdjustmentMatrix> {
    if m1.n_classes() != m2.n_classes() {
        return Err(Error::DimensionMismatch(m1.n_classes(), m2.n_classes()));
    }
    let values = m1
        .values
        .iter()
        .zip(&m2.values)
        .map(|(r1, r2)| r1.iter().zip(r2).map(|(a, b)| a - b).collect())
        .collect();
    Ok(AdjustmentMatrix {
        period_from: m1.period.clone(),
        period_to: m2.period.clone(),
        filter: m1.filter.clone(),
        values,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualIsolation {
    /// -trace(S) / n_classes. Positive on S^{BL-X} means more in-class
    /// visiting in period X than at baseline.
    pub mu_re: f64,
    /// Raw signed diagonal sum of S.
    pub trace: f64,
}

pub fn residual_isolation(s: &AdjustmentMatrix) -> ResidualIsolation {
    let n = s.values.len();
    let trace: f64 = (0..n).map(|k| s.values[k][k]).sum();
    ResidualIsolation {
        mu_re: -trace / n as f64,
        trace,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub anchor: NaiveDate,
    /// `None` marks a gap: an empty or degenerate window.
    pub r: Option<f64>,
}

/// Assortativity per sliding window. Degenerate windows yield explicit gaps.
pub fn assortativity_series(
    visits: &[Visit],
    windows: &[Window],
    filter: &dyn VisitFilter,
    ctx: &FilterContext,
    n_classes: usize,
) -> Vec<SeriesPoint> {
    // pre-bucket filtered class counts per date so each window is a cheap sum
    let mut daily: BTreeMap<NaiveDate, Vec<Vec<f64>>> = BTreeMap::new();
    for v in visits {
        if !filter.keep(v, ctx) {
            continue;
        }
        let counts = daily
            .entry(v.date)
            .or_insert_with(|| vec![vec![0f64; n_classes]; n_classes]);
        counts[v.class_place as usize - 1][v.class_user as usize - 1] += 1.0;
    }
    windows
        .par_iter()
        .map(|w| {
            let mut counts = vec![vec![0f64; n_classes]; n_classes];
            for (_, day) in daily.range(w.start..=w.end) {
                for j in 0..n_classes {
                    for i in 0..n_classes {
                        counts[j][i] += day[j][i];
                    }
                }
            }
            SeriesPoint {
                anchor: w.anchor,
                r: assortativity_of(&counts).ok(),
            }
        })
        .collect()
}
