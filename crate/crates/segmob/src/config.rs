//! Run configuration: a flat `key = value` text file with `[period.<label>]`
//! sections describing the intervention periods.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minutes-from-midnight interval in city local time. `end < start` means the
/// window crosses midnight (the night window 21:00-06:00 does).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockWindow {
    pub start_min: u32,
    pub end_min: u32,
}

impl ClockWindow {
    pub fn crosses_midnight(&self) -> bool {
        self.end_min <= self.start_min
    }

    fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("bad clock window `{s}`, want HH:MM-HH:MM")))?;
        Ok(ClockWindow {
            start_min: parse_clock(a)?,
            end_min: parse_clock(b)?,
        })
    }
}

fn parse_clock(s: &str) -> Result<u32> {
    let (h, m) = s
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("bad clock `{s}`")))?;
    let h: u32 = h
        .parse()
        .map_err(|_| Error::Config(format!("bad clock `{s}`")))?;
    let m: u32 = m
        .parse()
        .map_err(|_| Error::Config(format!("bad clock `{s}`")))?;
    if h > 23 || m > 59 {
        return Err(Error::Config(format!("clock `{s}` out of range")));
    }
    Ok(h * 60 + m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodSpec {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Decile weighting mode for place classes. People classes are always
/// weighted by home counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaceDecileMode {
    /// Each SES region counts once (area-unit weighted).
    Unit,
    /// Regions weighted by visit counts.
    Visits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub utc_offset_minutes: i32,
    pub periods: Vec<PeriodSpec>,
    pub window_days: u32,
    pub slide_days: u32,
    pub night_window: ClockWindow,
    pub poi_window: ClockWindow,
    pub min_home_hours: f64,
    pub n_classes: usize,
    pub invert_income: bool,
    pub cells_per_axis: usize,
    /// Visit filter spec, e.g. `all`, `exclude-home`, `intra:Manhattan`.
    pub filter: String,
    /// Users with fewer visits than this are excluded from entropy summaries
    /// (their per-user values are still emitted).
    pub entropy_min_visits: usize,
    /// Normalize spatial entropy by the period-global distinct-location count
    /// instead of the user's own alphabet.
    pub entropy_global_alphabet: bool,
    pub place_decile_mode: PlaceDecileMode,
    pub lenient: bool,
    pub trajectories: Option<PathBuf>,
    pub ses_map: Option<PathBuf>,
    pub stringency: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            utc_offset_minutes: 0,
            periods: Vec::new(),
            window_days: 14,
            slide_days: 1,
            night_window: ClockWindow {
                start_min: 21 * 60,
                end_min: 6 * 60,
            },
            poi_window: ClockWindow {
                start_min: 9 * 60,
                end_min: 15 * 60,
            },
            min_home_hours: 6.0,
            n_classes: 10,
            invert_income: false,
            cells_per_axis: 256,
            filter: "all".to_string(),
            entropy_min_visits: 5,
            entropy_global_alphabet: false,
            place_decile_mode: PlaceDecileMode::Unit,
            lenient: false,
            trajectories: None,
            ses_map: None,
            stringency: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        // Relative data paths resolve against the config file location.
        if let Some(dir) = path.parent() {
            for pb in [&mut cfg.trajectories, &mut cfg.ses_map, &mut cfg.stringency].into_iter().flatten() {
                if pb.is_relative() {
                    *pb = dir.join(&pb);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut current_period: Option<(String, Option<NaiveDate>, Option<NaiveDate>)> = None;
        let finish_period = |p: Option<(String, Option<NaiveDate>, Option<NaiveDate>)>,
                                 periods: &mut Vec<PeriodSpec>|
         -> Result<()> {
            if let Some((label, start, end)) = p {
                let start =
                    start.ok_or_else(|| Error::Config(format!("period {label}: missing start")))?;
                let end =
                    end.ok_or_else(|| Error::Config(format!("period {label}: missing end")))?;
                periods.push(PeriodSpec { label, start, end });
            }
            Ok(())
        };

        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                finish_period(current_period.take(), &mut cfg.periods)?;
                let label = section
                    .strip_prefix("period.")
                    .ok_or_else(|| Error::Config(format!("unknown section `[{section}]`")))?;
                if label.is_empty() {
                    return Err(Error::Config("empty period label".into()));
                }
                current_period = Some((label.to_string(), None, None));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", idx + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if let Some((_, start, end)) = current_period.as_mut() {
                match key {
                    "start" => *start = Some(parse_date(value)?),
                    "end" => *end = Some(parse_date(value)?),
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown period key `{key}` (line {})",
                            idx + 1
                        )))
                    }
                }
                continue;
            }
            cfg.set(key, value)?;
        }
        finish_period(current_period.take(), &mut cfg.periods)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value `{v}` for `{k}`"));
        match key {
            "utc_offset_minutes" => {
                self.utc_offset_minutes = value.parse().map_err(|_| bad(key, value))?
            }
            "window_days" => self.window_days = value.parse().map_err(|_| bad(key, value))?,
            "slide_days" => self.slide_days = value.parse().map_err(|_| bad(key, value))?,
            "night_window" => self.night_window = ClockWindow::parse(value)?,
            "poi_window" => self.poi_window = ClockWindow::parse(value)?,
            "min_home_hours" => {
                self.min_home_hours = value.parse().map_err(|_| bad(key, value))?
            }
            "n_classes" => self.n_classes = value.parse().map_err(|_| bad(key, value))?,
            "invert_income" => self.invert_income = parse_bool(value)?,
            "spatial.cells_per_axis" => {
                self.cells_per_axis = value.parse().map_err(|_| bad(key, value))?
            }
            "filter" => self.filter = value.to_string(),
            "entropy.min_visits" => {
                self.entropy_min_visits = value.parse().map_err(|_| bad(key, value))?
            }
            "entropy.global_alphabet" => self.entropy_global_alphabet = parse_bool(value)?,
            "deciles.places" => {
                self.place_decile_mode = match value {
                    "unit" => PlaceDecileMode::Unit,
                    "visits" => PlaceDecileMode::Visits,
                    _ => return Err(bad(key, value)),
                }
            }
            "lenient" => self.lenient = parse_bool(value)?,
            "trajectories" => self.trajectories = Some(PathBuf::from(value)),
            "ses_map" => self.ses_map = Some(PathBuf::from(value)),
            "stringency" => self.stringency = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_days < 1 {
            return Err(Error::Config("window_days must be >= 1".into()));
        }
        if self.slide_days < 1 {
            return Err(Error::Config("slide_days must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if self.min_home_hours <= 0.0 {
            return Err(Error::Config("min_home_hours must be positive".into()));
        }
        for p in &self.periods {
            if p.start > p.end {
                return Err(Error::Config(format!(
                    "period {}: start after end",
                    p.label
                )));
            }
        }
        for pair in self.periods.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(Error::Config(format!(
                    "periods {} and {} overlap or are out of order",
                    pair[0].label, pair[1].label
                )));
            }
        }
        Ok(())
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}`"))),
    }
}

fn parse_date(v: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(v, "%Y-%m-%d")
        .map_err(|_| Error::Config(format!("bad date `{v}`, want YYYY-MM-DD")))
}
