//! Loaders for the three input datasets: stay-point trajectories (CSV),
//! SES map (GeoJSON) and daily NPI stringency levels (CSV). Writers for the
//! same formats live here too so the synthetic generator emits exactly what
//! the loaders accept.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// One timed stay of one anonymous user at a geographic point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub user_id: String,
    pub lat: f64,
    pub lon: f64,
    pub start_ts: i64,
    pub end_ts: i64,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.user_id.is_empty() {
            return Err("empty user_id".into());
        }
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("lat {} out of range", self.lat));
        }
        if !self.lon.is_finite() || !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!("lon {} out of range", self.lon));
        }
        if self.end_ts < self.start_ts {
            return Err(format!(
                "end_ts {} before start_ts {}",
                self.end_ts, self.start_ts
            ));
        }
        Ok(())
    }
}

/// Polygonal SES unit. `rings` are (lon, lat) closed rings: the first is the
/// outer boundary, the rest are holes (even-odd containment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SesRegion {
    pub region_id: String,
    pub rings: Vec<Vec<(f64, f64)>>,
    /// Monotone welfare metric, higher = richer after load-time inversion.
    pub income: f64,
    /// Super-region (borough) label for intra/inter flow filters.
    pub group: String,
}

/// The nine OxCGRT restriction codes, in column order.
pub const RESTRICTION_CODES: [&str; 9] =
    ["C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8", "H1"];

/// One day of stringency levels, indexed like [`RESTRICTION_CODES`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StringencyRecord {
    pub date: NaiveDate,
    pub levels: [f64; 9],
}

/// Streaming trajectory reader. Iterate to get validated records; in lenient
/// mode malformed rows are skipped and counted, otherwise they are fatal.
pub struct TrajectoryReader {
    rdr: csv::Reader<BufReader<File>>,
    path: String,
    lenient: bool,
    line: u64,
    rejected: u64,
    accepted: u64,
}

impl TrajectoryReader {
    pub fn open(path: &Path, lenient: bool) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            Error::Config(format!("cannot open trajectory file {}: {e}", path.display()))
        })?;
        let rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(BufReader::new(file));
        let mut this = TrajectoryReader {
            rdr,
            path: path.display().to_string(),
            lenient,
            line: 1,
            rejected: 0,
            accepted: 0,
        };
        let headers = this.rdr.headers()?.clone();
        let want = ["user_id", "lat", "lon", "start_ts", "end_ts"];
        let got: Vec<&str> = headers.iter().collect();
        if got != want {
            return Err(Error::Config(format!(
                "{}: bad header {:?}, want {:?}",
                this.path, got, want
            )));
        }
        Ok(this)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    fn parse_row(&self, rec: &csv::StringRecord) -> std::result::Result<TrajectoryRecord, String> {
        if rec.len() != 5 {
            return Err(format!("expected 5 fields, got {}", rec.len()));
        }
        let record = TrajectoryRecord {
            user_id: rec[0].to_string(),
            lat: rec[1].parse().map_err(|_| format!("bad lat `{}`", &rec[1]))?,
            lon: rec[2].parse().map_err(|_| format!("bad lon `{}`", &rec[2]))?,
            start_ts: rec[3]
                .parse()
                .map_err(|_| format!("bad start_ts `{}`", &rec[3]))?,
            end_ts: rec[4]
                .parse()
                .map_err(|_| format!("bad end_ts `{}`", &rec[4]))?,
        };
        record.validate()?;
        Ok(record)
    }
}

impl Iterator for TrajectoryReader {
    type Item = Result<TrajectoryRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let mut rec = csv::StringRecord::new();
            match self.rdr.read_record(&mut rec) {
                Ok(false) => return None,
                Ok(true) => {
                    self.line += 1;
                    match self.parse_row(&rec) {
                        Ok(r) => {
                            self.accepted += 1;
                            return Some(Ok(r));
                        }
                        Err(msg) => {
                            if self.lenient {
                                self.rejected += 1;
                                continue;
                            }
                            return Some(Err(Error::MalformedRow {
                                path: self.path.clone(),
                                line: self.line,
                                msg,
                            }));
                        }
                    }
                }
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

/// Open the trajectory CSV for streaming reads.
pub fn load_trajectories(path: &Path, lenient: bool) -> Result<TrajectoryReader> {
    TrajectoryReader::open(path, lenient)
}

pub fn write_trajectories<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a TrajectoryRecord>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user_id,lat,lon,start_ts,end_ts")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.user_id, r.lat, r.lon, r.start_ts, r.end_ts
        )?;
    }
    Ok(())
}

/// Load a GeoJSON FeatureCollection of SES regions. Every feature must carry
/// `region_id` and `income` properties; `group` is optional and defaults to
/// the region id. With `invert`, incomes are negated so that "higher =
/// richer" holds for poverty-style indices.
pub fn load_ses_map(path: &Path, invert: bool) -> Result<Vec<SesRegion>> {
    let mut text = String::new();
    File::open(path)
        .map_err(|e| Error::Config(format!("cannot open SES map {}: {e}", path.display())))?
        .read_to_string(&mut text)?;
    parse_ses_map(&text, invert)
}

pub fn parse_ses_map(text: &str, invert: bool) -> Result<Vec<SesRegion>> {
    let doc: Value = serde_json::from_str(text)?;
    let features = doc
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::SesMap("not a FeatureCollection".into()))?;
    if features.is_empty() {
        return Err(Error::SesMap("empty feature collection".into()));
    }
    let mut regions = Vec::with_capacity(features.len());
    for (idx, feat) in features.iter().enumerate() {
        let props = feat
            .get("properties")
            .ok_or_else(|| Error::SesMap(format!("feature {idx}: no properties")))?;
        let region_id = match props.get("region_id") {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => {
                return Err(Error::SesMap(format!(
                    "feature {idx}: missing region_id property"
                )))
            }
        };
        let income = props
            .get("income")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::MissingProperty {
                region_id: region_id.clone(),
                property: "income".into(),
            })?;
        if !income.is_finite() {
            return Err(Error::SesMap(format!(
                "region {region_id}: income is not finite"
            )));
        }
        let group = match props.get("group") {
            Some(Value::String(s)) => s.clone(),
            _ => region_id.clone(),
        };
        let geom = feat
            .get("geometry")
            .ok_or_else(|| Error::SesMap(format!("region {region_id}: no geometry")))?;
        let rings = parse_polygon(geom, &region_id)?;
        regions.push(SesRegion {
            region_id,
            rings,
            income: if invert { -income } else { income },
            group,
        });
    }
    Ok(regions)
}

fn parse_ring(v: &Value, region_id: &str) -> Result<Vec<(f64, f64)>> {
    let pts = v
        .as_array()
        .ok_or_else(|| Error::SesMap(format!("region {region_id}: bad ring")))?;
    pts.iter()
        .map(|p| {
            let c = p
                .as_array()
                .filter(|c| c.len() >= 2)
                .ok_or_else(|| Error::SesMap(format!("region {region_id}: bad coordinate")))?;
            let lon = c[0]
                .as_f64()
                .ok_or_else(|| Error::SesMap(format!("region {region_id}: bad coordinate")))?;
            let lat = c[1]
                .as_f64()
                .ok_or_else(|| Error::SesMap(format!("region {region_id}: bad coordinate")))?;
            Ok((lon, lat))
        })
        .collect()
}

fn parse_polygon(geom: &Value, region_id: &str) -> Result<Vec<Vec<(f64, f64)>>> {
    let gtype = geom.get("type").and_then(|t| t.as_str()).unwrap_or("");
    let coords = geom
        .get("coordinates")
        .and_then(|c| c.as_array())
        .ok_or_else(|| Error::SesMap(format!("region {region_id}: no coordinates")))?;
    match gtype {
        "Polygon" => coords.iter().map(|r| parse_ring(r, region_id)).collect(),
        "MultiPolygon" => {
            let mut rings = Vec::new();
            for poly in coords {
                let poly = poly
                    .as_array()
                    .ok_or_else(|| Error::SesMap(format!("region {region_id}: bad polygon")))?;
                for r in poly {
                    rings.push(parse_ring(r, region_id)?);
                }
            }
            Ok(rings)
        }
        other => Err(Error::SesMap(format!(
            "region {region_id}: geometry type {other:?} is not a polygon"
        ))),
    }
}

pub fn write_ses_map(path: &Path, regions: &[SesRegion]) -> Result<()> {
    let features: Vec<Value> = regions
        .iter()
        .map(|r| {
            json!({
                "type": "Feature",
                "properties": {
                    "region_id": r.region_id,
                    "income": r.income,
                    "group": r.group,
                },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": r.rings.iter()
                        .map(|ring| ring.iter().map(|&(x, y)| vec![x, y]).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                }
            })
        })
        .collect();
    let doc = json!({ "type": "FeatureCollection", "features": features });
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Load the daily stringency CSV. Returns records sorted by date and the list
/// of missing dates inside the covered span.
pub fn load_stringency(path: &Path) -> Result<(Vec<StringencyRecord>, Vec<NaiveDate>)> {
    let file = File::open(path).map_err(|e| {
        Error::Config(format!("cannot open stringency file {}: {e}", path.display()))
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers = rdr.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    let mut want = vec!["date"];
    want.extend(RESTRICTION_CODES);
    if got != want {
        return Err(Error::Config(format!(
            "{}: bad stringency header {:?}, want {:?}",
            path.display(),
            got,
            want
        )));
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i as u64 + 2;
        let bad = |msg: String| Error::MalformedRow {
            path: path.display().to_string(),
            line,
            msg,
        };
        let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d")
            .map_err(|_| bad(format!("bad date `{}`", &row[0])))?;
        if !seen.insert(date) {
            return Err(Error::DuplicateDate(date));
        }
        let mut levels = [0f64; 9];
        for (k, lvl) in levels.iter_mut().enumerate() {
            let raw = &row[k + 1];
            let v: f64 = raw
                .parse()
                .map_err(|_| bad(format!("bad level `{raw}` for {}", RESTRICTION_CODES[k])))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!(
                    "level {v} for {} must be finite and >= 0",
                    RESTRICTION_CODES[k]
                )));
            }
            *lvl = v;
        }
        records.push(StringencyRecord { date, levels });
    }
    records.sort_by_key(|r| r.date);
    let mut gaps = Vec::new();
    for pair in records.windows(2) {
        let mut d = pair[0].date + Duration::days(1);
        while d < pair[1].date {
            gaps.push(d);
            d += Duration::days(1);
        }
    }
    Ok((records, gaps))
}

pub fn write_stringency(path: &Path, records: &[StringencyRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "date,{}", RESTRICTION_CODES.join(","))?;
    for r in records {
        write!(w, "{}", r.date)?;
        for l in &r.levels {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
