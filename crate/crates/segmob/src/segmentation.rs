//! Intervention periods and sliding windows.

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{StringencyRecord, RESTRICTION_CODES};

/// One intervention period (BL, L1, R1, ...), end date inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Period {
    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start && date <= self.end
    }
}

/// One sliding window; `anchor` is the window end date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub anchor: NaiveDate,
}

/// Validate and return the config's ordered periods.
pub fn segment(config: &RunConfig) -> Result<Vec<Period>> {
    if config.periods.is_empty() {
        return Err(Error::Segmentation("no periods configured".into()));
    }
    config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Segmentation(msg),
        other => other,
    })?;
    Ok(config
        .periods
        .iter()
        .map(|p| Period {
            label: p.label.clone(),
            start: p.start,
            end: p.end,
        })
        .collect())
}

pub fn period_of(periods: &[Period], date: NaiveDate) -> Option<&Period> {
    periods.iter().find(|p| p.contains(date))
}

/// Maximal set of fully contained windows over `[start, end]`, anchored at
/// each window end, stepping by `slide_days`.
pub fn windows(
    start: NaiveDate,
    end: NaiveDate,
    window_days: u32,
    slide_days: u32,
) -> Result<Vec<Window>> {
    if window_days < 1 || slide_days < 1 {
        return Err(Error::Segmentation(
            "window_days and slide_days must be >= 1".into(),
        ));
    }
    let range_len = (end - start).num_days() + 1;
    if range_len < window_days as i64 {
        return Err(Error::Segmentation(format!(
            "range of {range_len} days shorter than window of {window_days}"
        )));
    }
    let mut out = Vec::new();
    let mut w_end = start + Duration::days(window_days as i64 - 1);
    while w_end <= end {
        out.push(Window {
            start: w_end - Duration::days(window_days as i64 - 1),
            end: w_end,
            anchor: w_end,
        });
        w_end += Duration::days(slide_days as i64);
    }
    Ok(out)
}

/// Dates where any restriction level changes by at least `min_jump` relative
/// to the previous record. Advisory aid for choosing period bounds.
pub fn suggest_breakpoints(stringency: &[StringencyRecord], min_jump: f64) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    for pair in stringency.windows(2) {
        let jumped = (0..RESTRICTION_CODES.len())
            .any(|k| (pair[1].levels[k] - pair[0].levels[k]).abs() >= min_jump);
        if jumped {
            out.push(pair[1].date);
        }
    }
    out
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::config::PeriodSpec;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn two_periods_validate() {
        let mut cfg = RunConfig::default();
        cfg.periods = vec![
            PeriodSpec {
                label: "BL".into(),
                start: d(2020, 1, 1),
                end: d(2020, 3, 15),
            },
            PeriodSpec {
                label: "L1".into(),
                start: d(2020, 3, 16),
                end: d(2020, 5, 31),
            },
        ];
        let periods = segment(&cfg).unwrap();
        assert_eq!(periods.len(), 2);
        assert_eq!(period_of(&periods, d(2020, 2, 1)).unwrap().label, "BL");
        assert_eq!(period_of(&periods, d(2020, 4, 1)).unwrap().label, "L1");
        assert!(period_of(&periods, d(2020, 6, 1)).is_none());
    }

    #[test]
    fn overlapping_periods_error() {
        let mut cfg = RunConfig::default();
        cfg.periods = vec![
            PeriodSpec {
                label: "BL".into(),
                start: d(2020, 1, 1),
                end: d(2020, 3, 20),
            },
            PeriodSpec {
                label: "L1".into(),
                start: d(2020, 3, 16),
                end: d(2020, 5, 31),
            },
        ];
        assert!(segment(&cfg).is_err());
    }

    #[test]
    fn window_enumeration_oracle() {
        // enumeration oracle: every fully contained 7-day span of Jan 1-10
        let ws = windows(d(2020, 1, 1), d(2020, 1, 10), 7, 1).unwrap();
        let expected_anchors: Vec<NaiveDate> =
            (7..=10).map(|day| d(2020, 1, day)).collect();
        assert_eq!(ws.len(), 4);
        assert_eq!(
            ws.iter().map(|w| w.anchor).collect::<Vec<_>>(),
            expected_anchors
        );
        for w in &ws {
            assert_eq!((w.end - w.start).num_days() + 1, 7);
            assert!(w.start >= d(2020, 1, 1) && w.end <= d(2020, 1, 10));
        }
    }

    #[test]
    fn window_longer_than_range_errors() {
        assert!(windows(d(2020, 1, 1), d(2020, 1, 5), 7, 1).is_err());
    }

    #[test]
    fn slide_equals_window_tiles() {
        let ws = windows(d(2020, 1, 1), d(2020, 1, 14), 7, 7).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].start, d(2020, 1, 1));
        assert_eq!(ws[0].end, d(2020, 1, 7));
        assert_eq!(ws[1].start, d(2020, 1, 8));
        assert_eq!(ws[1].end, d(2020, 1, 14));
    }

    #[test]
    fn window_count_formula() {
        for (len, win, slide) in [(30i64, 14u32, 1u32), (30, 7, 3), (20, 5, 5), (15, 15, 2)] {
            let start = d(2020, 1, 1);
            let end = start + Duration::days(len - 1);
            let ws = windows(start, end, win, slide).unwrap();
            let expected = (len - win as i64) / slide as i64 + 1;
            assert_eq!(ws.len() as i64, expected);
        }
    }

    fn sr(date: NaiveDate, c6: f64) -> StringencyRecord {
        let mut levels = [0f64; 9];
        levels[5] = c6;
        StringencyRecord { date, levels }
    }

    #[test]
    fn constant_series_no_breakpoints() {
        let recs: Vec<_> = (1..=5).map(|day| sr(d(2020, 3, day), 1.0)).collect();
        assert!(suggest_breakpoints(&recs, 1.0).is_empty());
    }

    #[test]
    fn c6_jump_detected_once() {
        let mut recs: Vec<_> = (20..=25).map(|day| sr(d(2020, 3, day), 0.0)).collect();
        for r in recs.iter_mut().filter(|r| r.date >= d(2020, 3, 23)) {
            r.levels[5] = 3.0;
            r.levels[0] = 3.0; // simultaneous C1 jump on the same date
        }
        assert_eq!(suggest_breakpoints(&recs, 2.0), vec![d(2020, 3, 23)]);
    }
}
