//! Seeded synthetic cities with planted segregation structure, plus the
//! analytic expected-matrix oracle used across the test suites.
//!
//! Regions tile a square grid with income equal to the region index, so the
//! class of region `idx` is known in closed form and class populations are
//! exactly equal. Each non-home visit targets the visitor's own class with
//! probability `p + (1 - p)/k` and any other class with `(1 - p)/k`,
//! uniformly over regions within the class; under equal class masses the
//! induced assortativity is exactly `r = p`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Visit, VisitKind};
use crate::ingest::{
    write_ses_map, write_stringency, write_trajectories, SesRegion, StringencyRecord,
    TrajectoryRecord,
};
use crate::stratify::StratificationMatrix;

const SECS_PER_DAY: i64 = 86_400;
const REGION_SIDE_DEG: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_regions: usize,
    pub n_classes: usize,
    /// Mixing schedule: (effective-from date, p). The first entry must be at
    /// or before `start`.
    pub mixing: Vec<(NaiveDate, f64)>,
    /// Mean non-home visits per user per day (Poisson).
    pub visits_per_day: f64,
    /// Fraction of nights spent at the planted home.
    pub home_fidelity: f64,
    pub start: NaiveDate,
    pub n_days: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Synth("need at least 2 classes".into()));
        }
        if self.n_regions < self.n_classes {
            return Err(Error::Synth(format!(
                "fewer regions ({}) than classes ({})",
                self.n_regions, self.n_classes
            )));
        }
        if !self.n_regions.is_multiple_of(self.n_classes) {
            return Err(Error::Synth(
                "n_regions must be a multiple of n_classes for equal class balance".into(),
            ));
        }
        if self.n_users == 0 || self.n_days == 0 {
            return Err(Error::Synth("need users and days".into()));
        }
        if self.visits_per_day <= 0.0 {
            return Err(Error::Synth("visits_per_day must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.home_fidelity) {
            return Err(Error::Synth("home_fidelity must be in [0, 1]".into()));
        }
        if self.mixing.is_empty() {
            return Err(Error::Synth("empty mixing schedule".into()));
        }
        if self.mixing[0].0 > self.start {
            return Err(Error::Synth("mixing schedule starts after first day".into()));
        }
        for (d, p) in &self.mixing {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Synth(format!("mixing p {p} at {d} outside [0, 1]")));
            }
        }
        if self.mixing.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Synth("mixing schedule not strictly ascending".into()));
        }
        Ok(())
    }

    pub fn mixing_at(&self, date: NaiveDate) -> f64 {
        self.mixing
            .iter()
            .rev()
            .find(|(from, _)| *from <= date)
            .map(|(_, p)| *p)
            .unwrap_or(self.mixing[0].1)
    }

    fn grid_side(&self) -> usize {
        (self.n_regions as f64).sqrt().ceil() as usize
    }

    pub fn region_id(idx: usize) -> String {
        format!("r{idx:05}")
    }

    pub fn user_id(idx: usize) -> String {
        format!("u{idx:06}")
    }

    /// 1-based class of a region index; class populations are exactly equal.
    pub fn region_class(&self, idx: usize) -> u8 {
        (idx * self.n_classes / self.n_regions) as u8 + 1
    }

    fn region_center(&self, idx: usize) -> (f64, f64) {
        let side = self.grid_side();
        let gx = idx % side;
        let gy = idx / side;
        (
            gx as f64 * REGION_SIDE_DEG + REGION_SIDE_DEG / 2.0,
            gy as f64 * REGION_SIDE_DEG + REGION_SIDE_DEG / 2.0,
        )
    }

    pub fn regions(&self) -> Vec<SesRegion> {
        let side = self.grid_side();
        (0..self.n_regions)
            .map(|idx| {
                let gx = (idx % side) as f64 * REGION_SIDE_DEG;
                let gy = (idx / side) as f64 * REGION_SIDE_DEG;
                SesRegion {
                    region_id: Self::region_id(idx),
                    rings: vec![vec![
                        (gx, gy),
                        (gx + REGION_SIDE_DEG, gy),
                        (gx + REGION_SIDE_DEG, gy + REGION_SIDE_DEG),
                        (gx, gy + REGION_SIDE_DEG),
                        (gx, gy),
                    ]],
                    income: idx as f64,
                    group: Self::region_id(idx),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub n_users: usize,
    pub n_regions: usize,
    pub n_classes: usize,
    pub home_fidelity: f64,
    /// user_id -> planted home region id
    pub homes: BTreeMap<String, String>,
    /// user_id -> planted class (1-based)
    pub user_classes: BTreeMap<String, u8>,
    /// region_id -> class (1-based)
    pub region_classes: BTreeMap<String, u8>,
    /// (effective-from date, mixing p)
    pub schedule: Vec<(NaiveDate, f64)>,
}

struct UserEvent {
    region: usize,
    start_ts: i64,
    end_ts: i64,
    is_night: bool,
}

fn day_epoch(date: NaiveDate) -> i64 {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
    (date - epoch).num_days() * SECS_PER_DAY
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn user_events(spec: &SynthSpec, user: usize) -> Vec<UserEvent> {
    let mut rng = user_rng(spec.seed, user);
    let home = user % spec.n_regions;
    let own_class0 = (spec.region_class(home) - 1) as usize;
    let per_class = spec.n_regions / spec.n_classes;
    let poisson = Poisson::new(spec.visits_per_day).unwrap();
    let mut events = Vec::new();
    for d in 0..spec.n_days {
        let date = spec.start + Duration::days(d as i64);
        let day0 = day_epoch(date);
        // night stay 21:30 -> 05:30, at home on a fidelity fraction of nights
        let night_region = if rng.gen::<f64>() < spec.home_fidelity {
            home
        } else {
            let mut r = rng.gen_range(0..spec.n_regions - 1);
            if r >= home {
                r += 1;
            }
            r
        };
        events.push(UserEvent {
            region: night_region,
            start_ts: day0 + 21 * 3600 + 1800,
            end_ts: day0 + SECS_PER_DAY + 5 * 3600 + 1800,
            is_night: true,
        });
        let p = spec.mixing_at(date);
        let n_visits = poisson.sample(&mut rng) as usize;
        for _ in 0..n_visits {
            let class0 = if rng.gen::<f64>() < p {
                own_class0
            } else {
                rng.gen_range(0..spec.n_classes)
            };
            let region = class0 * per_class + rng.gen_range(0..per_class);
            let start = day0 + 10 * 3600 + rng.gen_range(0..4 * 3600);
            events.push(UserEvent {
                region,
                start_ts: start,
                end_ts: start + 1800,
                is_night: false,
            });
        }
    }
    events.sort_by_key(|e| e.start_ts);
    events
}

/// Labeled visits straight from the generative model, bypassing file I/O and
/// inference. Used by the oracle tests; classes and kinds come from ground
/// truth.
pub fn generate_visits(spec: &SynthSpec) -> Result<Vec<Visit>> {
    spec.validate()?;
    let mut visits = Vec::new();
    for u in 0..spec.n_users {
        let home = u % spec.n_regions;
        let class_user = spec.region_class(home);
        for e in user_events(spec, u) {
            let kind = if e.region == home {
                VisitKind::Home
            } else if e.is_night {
                VisitKind::Other
            } else {
                VisitKind::Poi
            };
            visits.push(Visit {
                user_id: SynthSpec::user_id(u),
                region_id: SynthSpec::region_id(e.region),
                class_user,
                class_place: spec.region_class(e.region),
                timestamp: e.start_ts,
                date: NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()
                    + Duration::days(e.start_ts.div_euclid(SECS_PER_DAY)),
                kind,
            });
        }
    }
    Ok(visits)
}

/// Fast class-pair sampler for matrix-convergence oracles: user classes are
/// equally likely, place class follows the mixing rule. Returns 1-based
/// (people class, place class) pairs.
pub fn sample_class_pairs(p: f64, n: usize, n_classes: usize, seed: u64) -> Vec<(u8, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..n_classes);
            let j = if rng.gen::<f64>() < p {
                i
            } else {
                rng.gen_range(0..n_classes)
            };
            (i as u8 + 1, j as u8 + 1)
        })
        .collect()
}

/// Analytic oracle: M = p I + (1 - p)/k J (column-stochastic) and, under
/// equal class masses, the induced assortativity r = p exactly.
pub fn expected_matrix(p: f64, n_classes: usize) -> Result<(StratificationMatrix, f64)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Synth(format!("mixing p {p} outside [0, 1]")));
    }
    let k = n_classes;
    let off = (1.0 - p) / k as f64;
    let values: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..k)
                .map(|i| if i == j { p + off } else { off })
                .collect()
        })
        .collect();
    Ok((
        StratificationMatrix {
            period: "expected".into(),
            filter: "analytic".into(),
            values,
            active_columns: vec![true; k],
        },
        p,
    ))
}

pub struct CityFiles {
    pub trajectories: PathBuf,
    pub ses_map: PathBuf,
    pub stringency: PathBuf,
    pub ground_truth: PathBuf,
    pub config: PathBuf,
    pub n_stay_records: usize,
}

/// Write a complete synthetic city in exactly the ingest file formats, plus
/// ground truth and a ready-to-run pipeline config.
pub fn generate_city(spec: &SynthSpec, out_dir: &Path) -> Result<CityFiles> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut homes = BTreeMap::new();
    let mut user_classes = BTreeMap::new();
    for u in 0..spec.n_users {
        let home = u % spec.n_regions;
        let uid = SynthSpec::user_id(u);
        homes.insert(uid.clone(), SynthSpec::region_id(home));
        user_classes.insert(uid.clone(), spec.region_class(home));
        for e in user_events(spec, u) {
            let (lon, lat) = spec.region_center(e.region);
            records.push(TrajectoryRecord {
                user_id: uid.clone(),
                lat,
                lon,
                start_ts: e.start_ts,
                end_ts: e.end_ts,
            });
        }
    }

    let trajectories = out_dir.join("trajectories.csv");
    write_trajectories(&trajectories, &records)?;

    let ses_map = out_dir.join("ses_map.geojson");
    write_ses_map(&ses_map, &spec.regions())?;

    let stringency = out_dir.join("stringency.csv");
    write_stringency(&stringency, &stringency_series(spec))?;

    let ground_truth = out_dir.join("ground_truth.json");
    let gt = GroundTruth {
        seed: spec.seed,
        n_users: spec.n_users,
        n_regions: spec.n_regions,
        n_classes: spec.n_classes,
        home_fidelity: spec.home_fidelity,
        homes,
        user_classes,
        region_classes: (0..spec.n_regions)
            .map(|i| (SynthSpec::region_id(i), spec.region_class(i)))
            .collect(),
        schedule: spec.mixing.clone(),
    };
    std::fs::write(&ground_truth, serde_json::to_string_pretty(&gt)?)?;

    let config = out_dir.join("config.txt");
    write_run_config(spec, &config)?;

    Ok(CityFiles {
        trajectories,
        ses_map,
        stringency,
        ground_truth,
        config,
        n_stay_records: records.len(),
    })
}

/// Daily stringency levels that track the mixing schedule. Levels rise with
/// the schedule segment and carry small deterministic per-restriction
/// variation so the nine columns are linearly independent.
pub fn stringency_series(spec: &SynthSpec) -> Vec<StringencyRecord> {
    (0..spec.n_days)
        .map(|d| {
            let date = spec.start + Duration::days(d as i64);
            let segment = spec
                .mixing
                .iter()
                .filter(|(from, _)| *from <= date)
                .count()
                .saturating_sub(1);
            let mut levels = [0f64; 9];
            for (k, lvl) in levels.iter_mut().enumerate() {
                // k+1 is never 0 mod 11, so every column keeps day-to-day
                // variation and no column is an affine function of another
                let wiggle = ((d as usize * (k + 1) + k * k) % 11) as f64 * 0.05;
                *lvl = segment as f64 * (1.0 + 0.25 * k as f64) + wiggle;
            }
            StringencyRecord { date, levels }
        })
        .collect()
}

/// Period labels for the schedule segments: BL, then L1, R1, L2, R2, ...
pub fn schedule_period_labels(n_segments: usize) -> Vec<String> {
    (0..n_segments)
        .map(|i| {
            if i == 0 {
                "BL".to_string()
            } else if i % 2 == 1 {
                format!("L{}", i / 2 + 1)
            } else {
                format!("R{}", i / 2)
            }
        })
        .collect()
}

fn write_run_config(spec: &SynthSpec, path: &Path) -> Result<()> {
    let labels = schedule_period_labels(spec.mixing.len());
    let end = spec.start + Duration::days(spec.n_days as i64 - 1);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# generated synthetic city configuration")?;
    writeln!(f, "utc_offset_minutes = 0")?;
    writeln!(f, "window_days = 14")?;
    writeln!(f, "slide_days = 1")?;
    writeln!(f, "n_classes = {}", spec.n_classes)?;
    writeln!(f, "filter = all")?;
    writeln!(f, "trajectories = trajectories.csv")?;
    writeln!(f, "ses_map = ses_map.geojson")?;
    writeln!(f, "stringency = stringency.csv")?;
    for (i, (from, _)) in spec.mixing.iter().enumerate() {
        let p_start = if i == 0 { spec.start } else { *from };
        let p_end = spec
            .mixing
            .get(i + 1)
            .map(|(next, _)| *next - Duration::days(1))
            .unwrap_or(end);
        writeln!(f, "\n[period.{}]", labels[i])?;
        writeln!(f, "start = {p_start}")?;
        writeln!(f, "end = {p_end}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: f64) -> SynthSpec {
        SynthSpec {
            n_users: 50,
            n_regions: 100,
            n_classes: 10,
            mixing: vec![(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), p)],
            visits_per_day: 3.0,
            home_fidelity: 1.0,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            n_days: 10,
            seed: 11,
        }
    }

    #[test]
    fn p_one_keeps_visits_in_class() {
        let visits = generate_visits(&spec(1.0)).unwrap();
        for v in visits.iter().filter(|v| v.kind == VisitKind::Poi) {
            assert_eq!(v.class_user, v.class_place);
        }
    }

    #[test]
    fn p_zero_spreads_over_classes() {
        let visits = generate_visits(&spec(0.0)).unwrap();
        let mut counts = [0usize; 10];
        for v in visits.iter().filter(|v| v.kind != VisitKind::Home && !matches!(v.kind, VisitKind::Other)) {
            counts[v.class_place as usize - 1] += 1;
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let share = c as f64 / total as f64;
            assert!((share - 0.1).abs() < 0.05, "share {share}");
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let s = spec(0.5);
        generate_city(&s, dir1.path()).unwrap();
        generate_city(&s, dir2.path()).unwrap();
        for name in [
            "trajectories.csv",
            "ses_map.geojson",
            "stringency.csv",
            "ground_truth.json",
            "config.txt",
        ] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical seeds");
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let mut s = spec(0.5);
        s.n_regions = 7;
        assert!(matches!(generate_visits(&s), Err(Error::Synth(_))));
        let mut s2 = spec(0.5);
        s2.n_regions = 15; // not a multiple of 10
        assert!(generate_visits(&s2).is_err());
    }

    #[test]
    fn expected_matrix_edges() {
        let (m, r) = expected_matrix(1.0, 10).unwrap();
        assert_eq!(r, 1.0);
        for j in 0..10 {
            for i in 0..10 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m.values[j][i] - want).abs() < 1e-12);
            }
        }
        let (m0, r0) = expected_matrix(0.0, 10).unwrap();
        assert_eq!(r0, 0.0);
        assert!(m0.values.iter().flatten().all(|v| (v - 0.1).abs() < 1e-12));
        assert!(expected_matrix(1.5, 10).is_err());
    }

    #[test]
    fn expected_r_matches_brute_force_summation() {
        // symbolic covariance oracle checked by brute force over all cells
        use crate::stratify::assortativity_of;
        for p in [0.0, 0.3, 0.6, 0.9, 1.0] {
            let (m, r) = expected_matrix(p, 10).unwrap();
            // equal class masses: joint mass = column / 10
            let joint: Vec<Vec<f64>> = m
                .values
                .iter()
                .map(|row| row.iter().map(|v| v / 10.0).collect())
                .collect();
            if p == 0.0 {
                assert!(assortativity_of(&joint).unwrap().abs() < 1e-12);
            } else {
                assert!((assortativity_of(&joint).unwrap() - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn schedule_labels() {
        assert_eq!(schedule_period_labels(1), vec!["BL"]);
        assert_eq!(schedule_period_labels(3), vec!["BL", "L1", "R1"]);
        assert_eq!(
            schedule_period_labels(5),
            vec!["BL", "L1", "R1", "L2", "R2"]
        );
    }

    #[test]
    fn region_classes_balanced() {
        let s = spec(0.5);
        let mut counts = [0usize; 10];
        for i in 0..s.n_regions {
            counts[s.region_class(i) as usize - 1] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }
}
