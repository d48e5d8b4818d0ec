//! Staged pipeline: ingest -> infer -> label -> matrices -> entropy -> stats.
//!
//! Every stage persists its outputs under `<out>/<stage>/` and later stages
//! reload from disk, so any stage can be re-run in isolation once its
//! prerequisites exist. All maps are BTree-ordered and floats use the shortest
//! round-trip formatting, which makes reruns byte-identical. `manifest.json`
//! records config/input digests and per-stage row counts; its timing fields
//! are the only nondeterministic bytes a run produces.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PlaceDecileMode, RunConfig};
use crate::entropy::{self, EntropySummary};
use crate::error::{Error, Result};
use crate::filter::{parse_filter, FilterContext};
use crate::inference::{
    extract_visits, infer_home, label_population, map_and_coalesce, HomeAssignment, RegionStay,
    Visit, VisitKind,
};
use crate::ingest::{
    load_ses_map, load_stringency, write_stringency, SesRegion, TrajectoryReader,
    TrajectoryRecord, RESTRICTION_CODES,
};
use crate::segmentation::{segment, windows, Period, Window};
use crate::spatial::{assign_deciles, SpatialIndex};
use crate::stats::{covariate_ratio, kruskal_wallis, ols_fit, r2_ratio, KruskalResult,
    RegressionResult};
use crate::stratify::{
    adjustment_matrix, assortativity, assortativity_series, build_network, residual_isolation,
    stratification_matrix, StratificationMatrix,
};

pub const STAGES: [&str; 6] = ["ingest", "infer", "label", "matrices", "entropy", "stats"];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub rows: BTreeMap<String, u64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    /// Input file path -> content digest, recorded by the ingest stage.
    pub inputs: BTreeMap<String, String>,
    pub completed: Vec<String>,
    pub stages: BTreeMap<String, StageReport>,
}

pub struct Pipeline {
    config: RunConfig,
    out_dir: PathBuf,
}

type Rows = BTreeMap<String, u64>;

impl Pipeline {
    pub fn new(config: RunConfig, out_dir: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(out_dir)?;
        Ok(Pipeline {
            config,
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn run_all(&self) -> Result<()> {
        for stage in STAGES {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    pub fn run_stage(&self, name: &str) -> Result<()> {
        let t0 = Instant::now();
        let result = match name {
            "ingest" => self.stage_ingest(),
            "infer" => self.stage_infer(),
            "label" => self.stage_label(),
            "matrices" => self.stage_matrices(),
            "entropy" => self.stage_entropy(),
            "stats" => self.stage_stats(),
            _ => Err(Error::Config(format!(
                "unknown stage `{name}`, expected one of {STAGES:?}"
            ))),
        };
        let rows = result.map_err(|e| match e {
            // keep prerequisite errors unwrapped so callers can match on them
            Error::MissingPrerequisite { .. } => e,
            other => other.in_stage(name),
        })?;
        self.record(name, rows, t0.elapsed().as_secs_f64())
    }

    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.out_dir.join(stage);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Path to a prerequisite output, or the error naming the stage to run.
    fn require(&self, stage: &str, prerequisite: &str, file: &str) -> Result<PathBuf> {
        let p = self.out_dir.join(prerequisite).join(file);
        if !p.is_file() {
            return Err(Error::MissingPrerequisite {
                stage: stage.to_string(),
                prerequisite: prerequisite.to_string(),
            });
        }
        Ok(p)
    }

    fn record(&self, stage: &str, rows: Rows, seconds: f64) -> Result<()> {
        let path = self.out_dir.join("manifest.json");
        let mut manifest: Manifest = if path.is_file() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)?
        } else {
            Manifest::default()
        };
        manifest.config_sha256 = hex(&Sha256::digest(serde_json::to_vec(&self.config)?));
        if stage == "ingest" {
            manifest.inputs.clear();
            for p in [&self.config.trajectories, &self.config.ses_map, &self.config.stringency]
                .into_iter()
                .flatten()
            {
                manifest
                    .inputs
                    .insert(p.display().to_string(), hex(&Sha256::digest(std::fs::read(p)?)));
            }
        }
        manifest.stages.insert(stage.to_string(), StageReport { rows, seconds });
        manifest.completed = STAGES
            .iter()
            .filter(|s| manifest.stages.contains_key(**s))
            .map(|s| s.to_string())
            .collect();
        write_json(&path, &manifest)
    }

    // ---- stage 1: ingest --------------------------------------------------

    fn stage_ingest(&self) -> Result<Rows> {
        let dir = self.stage_dir("ingest")?;
        let traj_path = self
            .config
            .trajectories
            .as_ref()
            .ok_or_else(|| Error::Config("no trajectories path configured".into()))?;
        let ses_path = self
            .config
            .ses_map
            .as_ref()
            .ok_or_else(|| Error::Config("no ses_map path configured".into()))?;
        let str_path = self
            .config
            .stringency
            .as_ref()
            .ok_or_else(|| Error::Config("no stringency path configured".into()))?;

        let mut reader = TrajectoryReader::open(traj_path, self.config.lenient)?;
        let mut n_records = 0u64;
        for rec in &mut reader {
            rec?;
            n_records += 1;
        }
        let rejected = reader.rejected();

        let regions = load_ses_map(ses_path, self.config.invert_income)?;
        write_json(&dir.join("regions.json"), &regions)?;

        let (stringency, gaps) = load_stringency(str_path)?;
        write_stringency(&dir.join("stringency.csv"), &stringency)?;

        #[derive(Serialize)]
        struct IngestSummary {
            stay_records: u64,
            rejected_rows: u64,
            regions: usize,
            stringency_days: usize,
            stringency_gap_dates: Vec<NaiveDate>,
        }
        write_json(
            &dir.join("summary.json"),
            &IngestSummary {
                stay_records: n_records,
                rejected_rows: rejected,
                regions: regions.len(),
                stringency_days: stringency.len(),
                stringency_gap_dates: gaps.clone(),
            },
        )?;

        Ok(rows([
            ("stay_records", n_records),
            ("rejected_rows", rejected),
            ("regions", regions.len() as u64),
            ("stringency_days", stringency.len() as u64),
            ("stringency_gaps", gaps.len() as u64),
        ]))
    }

    // ---- stage 2: infer ---------------------------------------------------

    fn stage_infer(&self) -> Result<Rows> {
        let regions_path = self.require("infer", "ingest", "regions.json")?;
        let dir = self.stage_dir("infer")?;
        let regions: Vec<SesRegion> =
            serde_json::from_str(&std::fs::read_to_string(regions_path)?)?;
        let index = SpatialIndex::build(regions, self.config.cells_per_axis)?;

        let traj_path = self
            .config
            .trajectories
            .as_ref()
            .ok_or_else(|| Error::Config("no trajectories path configured".into()))?;
        let mut per_user: BTreeMap<String, Vec<TrajectoryRecord>> = BTreeMap::new();
        for rec in TrajectoryReader::open(traj_path, self.config.lenient)? {
            let rec = rec?;
            per_user.entry(rec.user_id.clone()).or_default().push(rec);
        }

        let users: Vec<(String, Vec<TrajectoryRecord>)> = per_user.into_iter().collect();
        let processed: Vec<(String, Vec<RegionStay>, Option<HomeAssignment>)> = users
            .into_par_iter()
            .map(|(uid, mut recs)| {
                recs.sort_by_key(|r| (r.start_ts, r.end_ts));
                let stays = map_and_coalesce(&recs, &index);
                let home = infer_home(&uid, &stays, &self.config);
                (uid, stays, home)
            })
            .collect();

        let mut n_stays = 0u64;
        let mut n_unmapped = 0u64;
        let mut n_homed = 0u64;
        let mut stays_w = csv_writer(&dir.join("stays.csv"), "user_id,region_id,start_ts,end_ts")?;
        let mut homes_w = csv_writer(
            &dir.join("homes.csv"),
            "user_id,home_region,night_hours,tie_broken",
        )?;
        for (uid, stays, home) in &processed {
            for s in stays {
                n_stays += 1;
                if s.region_id.is_none() {
                    n_unmapped += 1;
                }
                writeln!(
                    stays_w,
                    "{uid},{},{},{}",
                    s.region_id.as_deref().unwrap_or(""),
                    s.start_ts,
                    s.end_ts
                )?;
            }
            if let Some(h) = home {
                n_homed += 1;
                writeln!(
                    homes_w,
                    "{},{},{},{}",
                    h.user_id, h.home_region, h.night_hours, h.tie_broken
                )?;
            }
        }
        stays_w.flush()?;
        homes_w.flush()?;

        #[derive(Serialize)]
        struct InferSummary {
            users: usize,
            users_with_home: u64,
            stays: u64,
            unmapped_stays: u64,
        }
        write_json(
            &dir.join("summary.json"),
            &InferSummary {
                users: processed.len(),
                users_with_home: n_homed,
                stays: n_stays,
                unmapped_stays: n_unmapped,
            },
        )?;

        Ok(rows([
            ("users", processed.len() as u64),
            ("users_with_home", n_homed),
            ("stays", n_stays),
            ("unmapped_stays", n_unmapped),
        ]))
    }

    // ---- stage 3: label ---------------------------------------------------

    fn stage_label(&self) -> Result<Rows> {
        let regions_path = self.require("label", "ingest", "regions.json")?;
        let homes_path = self.require("label", "infer", "homes.csv")?;
        let stays_path = self.require("label", "infer", "stays.csv")?;
        let dir = self.stage_dir("label")?;

        let regions: Vec<SesRegion> =
            serde_json::from_str(&std::fs::read_to_string(regions_path)?)?;
        let homes = read_homes(&homes_path)?;
        let stays = read_stays(&stays_path)?;

        let mut home_counts: BTreeMap<String, u64> = BTreeMap::new();
        for h in &homes {
            *home_counts.entry(h.home_region.clone()).or_insert(0) += 1;
        }
        let deciles_people = assign_deciles(&regions, Some(&home_counts), self.config.n_classes)?;

        let visit_weights;
        let place_weights = match self.config.place_decile_mode {
            PlaceDecileMode::Unit => None,
            PlaceDecileMode::Visits => {
                let mut w: BTreeMap<String, u64> = BTreeMap::new();
                for user_stays in stays.values() {
                    for s in user_stays {
                        if let Some(r) = &s.region_id {
                            *w.entry(r.clone()).or_insert(0) += 1;
                        }
                    }
                }
                visit_weights = w;
                Some(&visit_weights)
            }
        };
        let deciles_places = assign_deciles(&regions, place_weights, self.config.n_classes)?;

        let labels = label_population(&homes, &deciles_people, &deciles_places)?;

        let mut visits_w = csv_writer(
            &dir.join("visits.csv"),
            "user_id,region_id,class_user,class_place,timestamp,date,kind",
        )?;
        let mut n_visits = 0u64;
        let mut dropped_total = 0u64;
        let mut no_home = 0u64;
        let home_by_user: BTreeMap<&str, &HomeAssignment> =
            homes.iter().map(|h| (h.user_id.as_str(), h)).collect();
        for (uid, user_stays) in &stays {
            let Some(home) = home_by_user.get(uid.as_str()) else {
                no_home += 1;
                continue;
            };
            let class = labels.user_classes[uid.as_str()];
            let (visits, dropped) =
                extract_visits(uid, user_stays, home, class, &labels.place_classes, &self.config);
            dropped_total += dropped;
            for v in &visits {
                n_visits += 1;
                writeln!(
                    visits_w,
                    "{},{},{},{},{},{},{}",
                    v.user_id,
                    v.region_id,
                    v.class_user,
                    v.class_place,
                    v.timestamp,
                    v.date,
                    v.kind.as_str()
                )?;
            }
        }
        visits_w.flush()?;

        let mut users_w = csv_writer(&dir.join("user_classes.csv"), "user_id,class")?;
        for (u, c) in &labels.user_classes {
            writeln!(users_w, "{u},{c}")?;
        }
        users_w.flush()?;
        let mut places_w = csv_writer(&dir.join("place_classes.csv"), "region_id,class")?;
        for (r, c) in &labels.place_classes {
            writeln!(places_w, "{r},{c}")?;
        }
        places_w.flush()?;

        #[derive(Serialize)]
        struct DecileCuts {
            people_cut_points: Vec<f64>,
            place_cut_points: Vec<f64>,
        }
        write_json(
            &dir.join("deciles.json"),
            &DecileCuts {
                people_cut_points: deciles_people.cut_points.clone(),
                place_cut_points: deciles_places.cut_points.clone(),
            },
        )?;

        #[derive(Serialize)]
        struct LabelSummary {
            users_labeled: usize,
            users_without_home: u64,
            visits: u64,
            dropped_stays: u64,
        }
        write_json(
            &dir.join("summary.json"),
            &LabelSummary {
                users_labeled: labels.user_classes.len(),
                users_without_home: no_home,
                visits: n_visits,
                dropped_stays: dropped_total,
            },
        )?;

        Ok(rows([
            ("users_labeled", labels.user_classes.len() as u64),
            ("users_without_home", no_home),
            ("visits", n_visits),
            ("dropped_stays", dropped_total),
        ]))
    }

    // ---- stage 4: matrices ------------------------------------------------

    fn stage_matrices(&self) -> Result<Rows> {
        let visits_path = self.require("matrices", "label", "visits.csv")?;
        let homes_path = self.require("matrices", "infer", "homes.csv")?;
        let regions_path = self.require("matrices", "ingest", "regions.json")?;
        let dir = self.stage_dir("matrices")?;

        let visits = read_visits(&visits_path)?;
        let homes = read_homes(&homes_path)?;
        let regions: Vec<SesRegion> =
            serde_json::from_str(&std::fs::read_to_string(regions_path)?)?;
        let ctx = FilterContext {
            home_regions: homes
                .iter()
                .map(|h| (h.user_id.clone(), h.home_region.clone()))
                .collect(),
            region_groups: regions
                .iter()
                .map(|r| (r.region_id.clone(), r.group.clone()))
                .collect(),
        };
        let filter = parse_filter(&self.config.filter)?;
        let periods = segment(&self.config)?;

        let mut matrices: Vec<StratificationMatrix> = Vec::new();
        let mut r_by_period: BTreeMap<String, Option<f64>> = BTreeMap::new();
        for p in &periods {
            let net = build_network(&visits, p, filter.as_ref(), &ctx, self.config.n_classes);
            let m = stratification_matrix(&net).map_err(|e| match e {
                Error::EmptyNetwork => {
                    Error::DegenerateMatrix(format!("period {} has no visits", p.label))
                }
                other => other,
            })?;
            write_matrix_csv(&dir.join(format!("M_{}.csv", p.label)), &m.values)?;
            r_by_period.insert(p.label.clone(), assortativity(&m).ok());
            matrices.push(m);
        }
        write_json(&dir.join("assortativity.json"), &r_by_period)?;

        #[derive(Serialize)]
        struct Isolation {
            period_from: String,
            period_to: String,
            mu_re: f64,
            trace: f64,
        }
        let mut pairs: Vec<(usize, usize)> = (1..matrices.len()).map(|k| (k - 1, k)).collect();
        if matrices.len() > 2 {
            pairs.push((0, matrices.len() - 1));
        }
        let mut isolations: Vec<Isolation> = Vec::new();
        for (a, b) in pairs {
            let s = adjustment_matrix(&matrices[a], &matrices[b])?;
            write_matrix_csv(
                &dir.join(format!("S_{}_{}.csv", s.period_from, s.period_to)),
                &s.values,
            )?;
            let ri = residual_isolation(&s);
            isolations.push(Isolation {
                period_from: s.period_from.clone(),
                period_to: s.period_to.clone(),
                mu_re: ri.mu_re,
                trace: ri.trace,
            });
        }
        write_json(&dir.join("residual_isolation.json"), &isolations)?;

        let ws = self.full_range_windows(&periods)?;
        let series = assortativity_series(
            &visits,
            &ws,
            filter.as_ref(),
            &ctx,
            self.config.n_classes,
        );
        let mut series_w = csv_writer(&dir.join("series.csv"), "anchor,r")?;
        for pt in &series {
            match pt.r {
                Some(r) => writeln!(series_w, "{},{r}", pt.anchor)?,
                None => writeln!(series_w, "{},", pt.anchor)?,
            }
        }
        series_w.flush()?;

        Ok(rows([
            ("periods", periods.len() as u64),
            ("adjustment_matrices", isolations.len() as u64),
            ("series_points", series.len() as u64),
            (
                "series_gaps",
                series.iter().filter(|p| p.r.is_none()).count() as u64,
            ),
        ]))
    }

    // ---- stage 5: entropy -------------------------------------------------

    fn stage_entropy(&self) -> Result<Rows> {
        let visits_path = self.require("entropy", "label", "visits.csv")?;
        let dir = self.stage_dir("entropy")?;
        let visits = read_visits(&visits_path)?;
        let periods = segment(&self.config)?;
        let min_visits = self.config.entropy_min_visits;

        let mut user_w = csv_writer(
            &dir.join("user_entropy.csv"),
            "period,user_id,n_visits,spatial,ses,included",
        )?;
        let mut summaries: BTreeMap<String, PeriodEntropy> = BTreeMap::new();
        let mut n_rows = 0u64;
        for p in &periods {
            let mut per_user: BTreeMap<&str, (Vec<&str>, Vec<u8>)> = BTreeMap::new();
            for v in visits.iter().filter(|v| p.contains(v.date)) {
                let e = per_user.entry(&v.user_id).or_default();
                e.0.push(&v.region_id);
                e.1.push(v.class_place);
            }
            let global_alphabet: usize = {
                let mut all: Vec<&str> = per_user.values().flat_map(|(r, _)| r.iter().copied()).collect();
                all.sort_unstable();
                all.dedup();
                all.len()
            };
            let mut spatial_incl = Vec::new();
            let mut ses_incl = Vec::new();
            let mut excluded = 0u64;
            for (uid, (regions, classes)) in &per_user {
                let spatial = if self.config.entropy_global_alphabet {
                    entropy::spatial_entropy_global(regions.iter().copied(), global_alphabet)?
                } else {
                    entropy::spatial_entropy(regions.iter().copied())?
                };
                let ses = entropy::ses_entropy(classes.iter().copied(), self.config.n_classes)?;
                let included = regions.len() >= min_visits;
                if included {
                    spatial_incl.push(spatial);
                    ses_incl.push(ses);
                } else {
                    excluded += 1;
                }
                n_rows += 1;
                writeln!(
                    user_w,
                    "{},{uid},{},{spatial},{ses},{included}",
                    p.label,
                    regions.len()
                )?;
            }
            summaries.insert(
                p.label.clone(),
                PeriodEntropy {
                    spatial: entropy::summarize(&spatial_incl).ok(),
                    ses: entropy::summarize(&ses_incl).ok(),
                    users_excluded: excluded,
                },
            );
        }
        user_w.flush()?;
        write_json(&dir.join("summary.json"), &summaries)?;

        // windowed mean entropies over users meeting the visit threshold
        let ws = self.full_range_windows(&periods)?;
        let mut daily: BTreeMap<NaiveDate, Vec<(String, String, u8)>> = BTreeMap::new();
        for v in &visits {
            daily
                .entry(v.date)
                .or_default()
                .push((v.user_id.clone(), v.region_id.clone(), v.class_place));
        }
        let series: Vec<(NaiveDate, usize, Option<f64>, Option<f64>)> = ws
            .par_iter()
            .map(|w| {
                let mut per_user: BTreeMap<&str, (Vec<&str>, Vec<u8>)> = BTreeMap::new();
                for (_, day) in daily.range(w.start..=w.end) {
                    for (uid, rid, cp) in day {
                        let e = per_user.entry(uid).or_default();
                        e.0.push(rid);
                        e.1.push(*cp);
                    }
                }
                let mut spatial = Vec::new();
                let mut ses = Vec::new();
                for (regions, classes) in per_user.values() {
                    if regions.len() < min_visits {
                        continue;
                    }
                    if let Ok(h) = entropy::spatial_entropy(regions.iter().copied()) {
                        spatial.push(h);
                    }
                    if let Ok(h) = entropy::ses_entropy(classes.iter().copied(), self.config.n_classes)
                    {
                        ses.push(h);
                    }
                }
                let mean = |v: &[f64]| {
                    if v.is_empty() {
                        None
                    } else {
                        Some(v.iter().sum::<f64>() / v.len() as f64)
                    }
                };
                (w.anchor, spatial.len(), mean(&spatial), mean(&ses))
            })
            .collect();
        let mut series_w = csv_writer(
            &dir.join("series.csv"),
            "anchor,n_users,mean_spatial,mean_ses",
        )?;
        for (anchor, n, sp, se) in &series {
            writeln!(
                series_w,
                "{anchor},{n},{},{}",
                sp.map(|v| v.to_string()).unwrap_or_default(),
                se.map(|v| v.to_string()).unwrap_or_default()
            )?;
        }
        series_w.flush()?;

        Ok(rows([
            ("user_period_rows", n_rows),
            ("periods", periods.len() as u64),
            ("series_points", series.len() as u64),
        ]))
    }

    // ---- stage 6: stats ---------------------------------------------------

    fn stage_stats(&self) -> Result<Rows> {
        let r_series_path = self.require("stats", "matrices", "series.csv")?;
        let e_series_path = self.require("stats", "entropy", "series.csv")?;
        let user_entropy_path = self.require("stats", "entropy", "user_entropy.csv")?;
        let stringency_path = self.require("stats", "ingest", "stringency.csv")?;
        let dir = self.stage_dir("stats")?;

        let (stringency, _) = load_stringency(&stringency_path)?;
        let levels_by_date: BTreeMap<NaiveDate, [f64; 9]> =
            stringency.iter().map(|s| (s.date, s.levels)).collect();

        let r_series = read_assortativity_series(&r_series_path)?;
        let e_series = read_entropy_series(&e_series_path)?;

        // window-mean restriction levels per anchor; a window contributes only
        // if at least one of its dates has a stringency record
        let window_days = self.config.window_days as i64;
        let mean_levels = |anchor: NaiveDate| -> Option<[f64; 9]> {
            let start = anchor - chrono::Duration::days(window_days - 1);
            let mut sums = [0f64; 9];
            let mut n = 0usize;
            for (_, lv) in levels_by_date.range(start..=anchor) {
                for k in 0..9 {
                    sums[k] += lv[k];
                }
                n += 1;
            }
            if n == 0 {
                return None;
            }
            for s in &mut sums {
                *s /= n as f64;
            }
            Some(sums)
        };

        let names: Vec<String> = RESTRICTION_CODES.iter().map(|s| s.to_string()).collect();
        let build_fit = |points: &[(NaiveDate, f64)]| -> FitOutcome {
            let mut y = Vec::new();
            let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 9];
            for (anchor, value) in points {
                let Some(levels) = mean_levels(*anchor) else {
                    continue;
                };
                y.push(*value);
                for k in 0..9 {
                    cols[k].push(levels[k]);
                }
            }
            match ols_fit(&y, &cols, &names) {
                Ok(fit) => FitOutcome {
                    fit: Some(fit),
                    error: None,
                },
                Err(e) => FitOutcome {
                    fit: None,
                    error: Some(e.to_string()),
                },
            }
        };

        let seg_points: Vec<(NaiveDate, f64)> = r_series
            .iter()
            .filter_map(|(a, r)| r.map(|r| (*a, r)))
            .collect();
        let spatial_points: Vec<(NaiveDate, f64)> = e_series
            .iter()
            .filter_map(|(a, sp, _)| sp.map(|v| (*a, v)))
            .collect();
        let ses_points: Vec<(NaiveDate, f64)> = e_series
            .iter()
            .filter_map(|(a, _, se)| se.map(|v| (*a, v)))
            .collect();

        let fit_seg = build_fit(&seg_points);
        let fit_spatial = build_fit(&spatial_points);
        let fit_ses = build_fit(&ses_points);
        write_json(&dir.join("regression_assortativity.json"), &fit_seg)?;
        write_json(&dir.join("regression_entropy_spatial.json"), &fit_spatial)?;
        write_json(&dir.join("regression_entropy_ses.json"), &fit_ses)?;

        // mobility-vs-segregation response ratios per restriction
        #[derive(Serialize)]
        struct Ratios {
            coefficient_ratios: BTreeMap<String, Option<f64>>,
            r2_ratio: Option<f64>,
        }
        let ratios = match (&fit_spatial.fit, &fit_seg.fit) {
            (Some(m), Some(s)) => Ratios {
                coefficient_ratios: RESTRICTION_CODES
                    .iter()
                    .map(|k| (k.to_string(), covariate_ratio(m, s, k).ok()))
                    .collect(),
                r2_ratio: r2_ratio(m, s).ok(),
            },
            _ => Ratios {
                coefficient_ratios: RESTRICTION_CODES
                    .iter()
                    .map(|k| (k.to_string(), None))
                    .collect(),
                r2_ratio: None,
            },
        };
        write_json(&dir.join("ratios.json"), &ratios)?;

        // Kruskal-Wallis across periods
        let user_entropy = read_user_entropy(&user_entropy_path)?;
        let periods = segment(&self.config)?;
        let group = |pick: fn(&UserEntropyRow) -> f64| -> Vec<Vec<f64>> {
            periods
                .iter()
                .map(|p| {
                    user_entropy
                        .iter()
                        .filter(|r| r.included && r.period == p.label)
                        .map(pick)
                        .collect()
                })
                .filter(|g: &Vec<f64>| !g.is_empty())
                .collect()
        };
        let r_groups: Vec<Vec<f64>> = periods
            .iter()
            .map(|p| {
                r_series
                    .iter()
                    .filter_map(|(a, r)| if p.contains(*a) { *r } else { None })
                    .collect()
            })
            .filter(|g: &Vec<f64>| !g.is_empty())
            .collect();
        let mut kw: BTreeMap<String, KwOutcome> = BTreeMap::new();
        kw.insert("spatial_entropy".into(), kw_outcome(&group(|r| r.spatial)));
        kw.insert("ses_entropy".into(), kw_outcome(&group(|r| r.ses)));
        kw.insert("assortativity_windows".into(), kw_outcome(&r_groups));
        write_json(&dir.join("kruskal_wallis.json"), &kw)?;

        Ok(rows([
            ("segregation_obs", seg_points.len() as u64),
            ("mobility_obs", spatial_points.len() as u64),
            ("kruskal_tests", kw.len() as u64),
        ]))
    }

    fn full_range_windows(&self, periods: &[Period]) -> Result<Vec<Window>> {
        let start = periods.first().map(|p| p.start).unwrap();
        let end = periods.last().map(|p| p.end).unwrap();
        let range_len = (end - start).num_days() + 1;
        if range_len < self.config.window_days as i64 {
            return Ok(Vec::new());
        }
        windows(start, end, self.config.window_days, self.config.slide_days)
    }
}

#[derive(Serialize, Deserialize)]
struct PeriodEntropy {
    spatial: Option<EntropySummary>,
    ses: Option<EntropySummary>,
    users_excluded: u64,
}

#[derive(Serialize, Deserialize)]
struct FitOutcome {
    fit: Option<RegressionResult>,
    error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct KwOutcome {
    result: Option<KruskalResult>,
    error: Option<String>,
}

fn kw_outcome(groups: &[Vec<f64>]) -> KwOutcome {
    match kruskal_wallis(groups) {
        Ok(r) => KwOutcome {
            result: Some(r),
            error: None,
        },
        Err(e) => KwOutcome {
            result: None,
            error: Some(e.to_string()),
        },
    }
}

// ---- persistence helpers ---------------------------------------------------

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_writer(path: &Path, header: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn write_matrix_csv(path: &Path, values: &[Vec<f64>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in values {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        out.push(rec?);
    }
    Ok(out)
}

fn bad_row(path: &Path, line: u64, msg: &str) -> Error {
    Error::MalformedRow {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

fn read_homes(path: &Path) -> Result<Vec<HomeAssignment>> {
    read_csv_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let err = || bad_row(path, i as u64 + 2, "bad home row");
            Ok(HomeAssignment {
                user_id: rec.get(0).ok_or_else(err)?.to_string(),
                home_region: rec.get(1).ok_or_else(err)?.to_string(),
                night_hours: rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(err)?,
                tie_broken: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(err)?,
            })
        })
        .collect()
}

fn read_stays(path: &Path) -> Result<BTreeMap<String, Vec<RegionStay>>> {
    let mut out: BTreeMap<String, Vec<RegionStay>> = BTreeMap::new();
    for (i, rec) in read_csv_rows(path)?.iter().enumerate() {
        let err = || bad_row(path, i as u64 + 2, "bad stay row");
        let uid = rec.get(0).ok_or_else(err)?.to_string();
        let region = rec.get(1).ok_or_else(err)?;
        out.entry(uid).or_default().push(RegionStay {
            region_id: if region.is_empty() {
                None
            } else {
                Some(region.to_string())
            },
            start_ts: rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(err)?,
            end_ts: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(err)?,
        });
    }
    Ok(out)
}

fn read_visits(path: &Path) -> Result<Vec<Visit>> {
    read_csv_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let err = || bad_row(path, i as u64 + 2, "bad visit row");
            let kind = match rec.get(6).ok_or_else(err)? {
                "home" => VisitKind::Home,
                "poi" => VisitKind::Poi,
                "other" => VisitKind::Other,
                _ => return Err(err()),
            };
            Ok(Visit {
                user_id: rec.get(0).ok_or_else(err)?.to_string(),
                region_id: rec.get(1).ok_or_else(err)?.to_string(),
                class_user: rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(err)?,
                class_place: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(err)?,
                timestamp: rec.get(4).and_then(|v| v.parse().ok()).ok_or_else(err)?,
                date: rec.get(5).and_then(|v| v.parse().ok()).ok_or_else(err)?,
                kind,
            })
        })
        .collect()
}

fn read_assortativity_series(path: &Path) -> Result<Vec<(NaiveDate, Option<f64>)>> {
    read_csv_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let err = || bad_row(path, i as u64 + 2, "bad series row");
            let anchor: NaiveDate = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(err)?;
            let r = match rec.get(1).ok_or_else(err)? {
                "" => None,
                v => Some(v.parse().map_err(|_| err())?),
            };
            Ok((anchor, r))
        })
        .collect()
}

type EntropySeriesRow = (NaiveDate, Option<f64>, Option<f64>);

fn read_entropy_series(path: &Path) -> Result<Vec<EntropySeriesRow>> {
    read_csv_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let err = || bad_row(path, i as u64 + 2, "bad entropy series row");
            let anchor: NaiveDate = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(err)?;
            let opt = |idx: usize| -> Result<Option<f64>> {
                match rec.get(idx).ok_or_else(err)? {
                    "" => Ok(None),
                    v => Ok(Some(v.parse().map_err(|_| err())?)),
                }
            };
            Ok((anchor, opt(2)?, opt(3)?))
        })
        .collect()
}

struct UserEntropyRow {
    period: String,
    spatial: f64,
    ses: f64,
    included: bool,
}

fn read_user_entropy(path: &Path) -> Result<Vec<UserEntropyRow>> {
    read_csv_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let err = || bad_row(path, i as u64 + 2, "bad user entropy row");
            Ok(UserEntropyRow {
                period: rec.get(0).ok_or_else(err)?.to_string(),
                spatial: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(err)?,
                ses: rec.get(4).and_then(|v| v.parse().ok()).ok_or_else(err)?,
                included: rec.get(5).and_then(|v| v.parse().ok()).ok_or_else(err)?,
            })
        })
        .collect()
}

fn rows<const N: usize>(pairs: [(&str, u64); N]) -> Rows {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

// ---- plot-ready exports ------------------------------------------------------

/// Flatten pipeline outputs into plot-ready CSV tables under `<out>/plots/`.
/// Requires the matrices, entropy and stats stages to have completed.
pub fn emit_plots(out_dir: &Path) -> Result<()> {
    let need = |stage: &str, file: &str| -> Result<PathBuf> {
        let p = out_dir.join(stage).join(file);
        if !p.is_file() {
            return Err(Error::MissingPrerequisite {
                stage: "emit-plots".to_string(),
                prerequisite: stage.to_string(),
            });
        }
        Ok(p)
    };
    let plots = out_dir.join("plots");
    std::fs::create_dir_all(&plots)?;

    // family 1: matrix heatmaps in long form
    need("matrices", "assortativity.json")?;
    let mut heatmaps = csv_writer(
        &plots.join("matrix_heatmaps.csv"),
        "matrix,place_class,people_class,value",
    )?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(out_dir.join("matrices"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("M_") || n.starts_with("S_"))
        })
        .collect();
    entries.sort();
    for path in entries {
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        let text = std::fs::read_to_string(&path)?;
        for (j, line) in text.lines().enumerate() {
            for (i, cell) in line.split(',').enumerate() {
                writeln!(heatmaps, "{name},{},{},{cell}", j + 1, i + 1)?;
            }
        }
    }
    heatmaps.flush()?;

    // family 2: assortativity over sliding windows
    std::fs::copy(
        need("matrices", "series.csv")?,
        plots.join("assortativity_series.csv"),
    )?;

    // family 3: entropy histograms per period
    let summary: BTreeMap<String, PeriodEntropy> =
        serde_json::from_str(&std::fs::read_to_string(need("entropy", "summary.json")?)?)?;
    let mut hist_w = csv_writer(
        &plots.join("entropy_histograms.csv"),
        "period,metric,bin_low,bin_high,count",
    )?;
    for (period, pe) in &summary {
        for (metric, s) in [("spatial", &pe.spatial), ("ses", &pe.ses)] {
            let Some(s) = s else { continue };
            let width = 1.0 / s.histogram.len() as f64;
            for (b, count) in s.histogram.iter().enumerate() {
                writeln!(
                    hist_w,
                    "{period},{metric},{},{},{count}",
                    b as f64 * width,
                    (b + 1) as f64 * width
                )?;
            }
        }
    }
    hist_w.flush()?;

    // family 4: entropy series plus regression coefficient table
    std::fs::copy(
        need("entropy", "series.csv")?,
        plots.join("entropy_series.csv"),
    )?;
    let mut reg_w = csv_writer(
        &plots.join("regression_table.csv"),
        "response,term,coefficient,standardized,dropped",
    )?;
    for (response, file) in [
        ("assortativity", "regression_assortativity.json"),
        ("spatial_entropy", "regression_entropy_spatial.json"),
        ("ses_entropy", "regression_entropy_ses.json"),
    ] {
        let outcome: FitOutcome =
            serde_json::from_str(&std::fs::read_to_string(need("stats", file)?)?)?;
        let Some(fit) = outcome.fit else { continue };
        writeln!(reg_w, "{response},intercept,{},,false", fit.intercept)?;
        for (name, coef) in &fit.coefficients {
            let std_coef = fit
                .standardized
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.to_string())
                .unwrap_or_default();
            let dropped = fit.dropped.contains(name);
            writeln!(reg_w, "{response},{name},{coef},{std_coef},{dropped}")?;
        }
    }
    reg_w.flush()?;

    // family 5: Kruskal-Wallis table
    let kw: BTreeMap<String, KwOutcome> =
        serde_json::from_str(&std::fs::read_to_string(need("stats", "kruskal_wallis.json")?)?)?;
    let mut kw_w = csv_writer(
        &plots.join("kruskal_table.csv"),
        "metric,h,df,p_value,tie_correction,degenerate",
    )?;
    for (metric, outcome) in &kw {
        let Some(r) = &outcome.result else { continue };
        writeln!(
            kw_w,
            "{metric},{},{},{},{},{}",
            r.h, r.df, r.p_value, r.tie_correction, r.degenerate
        )?;
    }
    kw_w.flush()?;
    Ok(())
}
